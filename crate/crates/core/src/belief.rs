//! Two-way belief propagation over a fixed genealogy.
//!
//! Every non-root node `v` owns two message slots: the upward message
//! `v -> parent(v)` and the downward message `parent(v) -> v`. Each message
//! holds, per locus, a length-`K` vector scaled so that `sum_v p0(v) m(v) = 1`
//! together with the log of the removed scale (the normalizer `Z`). Vectors stay
//! bounded by `1 / min(p0)`, so all underflow is absorbed by the log normalizers.
//!
//! Downward messages are functions of the parent state and carry the prior
//! mass of everything outside the child's subtree. The likelihood at any node
//! is the sum of log normalizers of the messages directed toward it plus the
//! log of the local combination of those messages.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::genealogy::{Alignment, Genealogy};
use crate::mutation::{MutationModel, TransitionCache, TransitionMatrix};

/// Normalization tolerance for every fresh message.
pub const NORMALIZATION_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Upward,
    Downward,
}

/// One directed message, all loci.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub direction: Direction,
    /// `(from, to)` node ids.
    pub edge: (usize, usize),
    pub num_states: usize,
    /// Locus-major normalized values, `loci x K`.
    pub values: Vec<f64>,
    /// `log Z` per locus.
    pub log_normalizers: Vec<f64>,
}

impl Message {
    pub fn locus(&self, l: usize) -> &[f64] {
        &self.values[l * self.num_states..(l + 1) * self.num_states]
    }

    /// Log-domain view of locus `l`.
    pub fn log_values(&self, l: usize) -> Vec<f64> {
        self.locus(l).iter().map(|v| v.ln()).collect()
    }

    pub fn total_log_normalizer(&self) -> f64 {
        self.log_normalizers.iter().sum()
    }

    /// Largest `|sum_v p0(v) m(v) - 1|` over loci.
    pub fn normalization_error(&self, p0: &[f64]) -> f64 {
        self.values
            .chunks(self.num_states)
            .map(|m| (weighted_sum(p0, m) - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Leaf message: `m(v) = [v = x] / p0(x)` at every locus, for a single observed state.
pub fn leaf_message(state: usize, model: &MutationModel) -> Result<Message> {
    let k = model.num_states();
    if state >= k {
        return Err(Error::Data(format!(
            "state {state} out of range for {k} states"
        )));
    }
    let mut values = vec![0.0; k];
    values[state] = 1.0;
    let mut log_z = [0.0];
    normalize(&mut values, &mut log_z, model.equilibrium());
    Ok(Message {
        direction: Direction::Upward,
        edge: (usize::MAX, usize::MAX),
        num_states: k,
        values,
        log_normalizers: log_z.to_vec(),
    })
}

#[inline]
fn weighted_sum(p0: &[f64], m: &[f64]) -> f64 {
    p0.iter().zip(m).map(|(p, v)| p * v).sum()
}

/// Normalizes each locus block of `values` so that `sum p0 m = 1`, writing `log Z`.
///
/// A block with zero or non-finite mass becomes the equilibrium message with `log Z = -inf`.
pub(crate) fn normalize(values: &mut [f64], log_z: &mut [f64], p0: &[f64]) {
    let k = p0.len();
    for (block, lz) in values.chunks_mut(k).zip(log_z.iter_mut()) {
        let z = weighted_sum(p0, block);
        if z > 0.0 && z.is_finite() {
            let inv = 1.0 / z;
            block.iter_mut().for_each(|v| *v *= inv);
            *lz = z.ln();
            debug_assert!(
                (weighted_sum(p0, block) - 1.0).abs() <= NORMALIZATION_TOL,
                "message normalization drifted"
            );
        } else {
            block.iter_mut().for_each(|v| *v = 1.0);
            *lz = f64::NEG_INFINITY;
        }
    }
}

/// Applies `t` to every locus block: `out = T m` (toward the parent).
#[inline]
pub(crate) fn pull_up(t: &TransitionMatrix, msg: &[f64], out: &mut [f64]) {
    let k = t.num_states();
    for (m, o) in msg.chunks(k).zip(out.chunks_mut(k)) {
        t.apply(m, o);
    }
}

/// Applies `t^T` to every locus block: `out = T^T m` (toward the child).
#[inline]
pub(crate) fn push_down(t: &TransitionMatrix, msg: &[f64], out: &mut [f64]) {
    let k = t.num_states();
    for (m, o) in msg.chunks(k).zip(out.chunks_mut(k)) {
        t.apply_transpose(m, o);
    }
}

/// Per-edge message slots for one genealogy.
#[derive(Debug, Clone)]
pub struct MessageStore {
    k: usize,
    loci: usize,
    up: Vec<f64>,
    up_log_z: Vec<f64>,
    up_fresh: Vec<bool>,
    down: Vec<f64>,
    down_log_z: Vec<f64>,
    down_fresh: Vec<bool>,
}

impl MessageStore {
    fn new(num_nodes: usize, loci: usize, k: usize) -> Self {
        MessageStore {
            k,
            loci,
            up: vec![0.0; num_nodes * loci * k],
            up_log_z: vec![0.0; num_nodes * loci],
            up_fresh: vec![false; num_nodes],
            down: vec![0.0; num_nodes * loci * k],
            down_log_z: vec![0.0; num_nodes * loci],
            down_fresh: vec![false; num_nodes],
        }
    }

    fn block(&self) -> usize {
        self.loci * self.k
    }

    /// Upward message `v -> parent(v)` values.
    pub fn up(&self, v: usize) -> &[f64] {
        let b = self.block();
        &self.up[v * b..(v + 1) * b]
    }

    /// Downward message `parent(v) -> v` values.
    pub fn down(&self, v: usize) -> &[f64] {
        let b = self.block();
        &self.down[v * b..(v + 1) * b]
    }

    pub fn up_log_normalizers(&self, v: usize) -> &[f64] {
        &self.up_log_z[v * self.loci..(v + 1) * self.loci]
    }

    pub fn down_log_normalizers(&self, v: usize) -> &[f64] {
        &self.down_log_z[v * self.loci..(v + 1) * self.loci]
    }

    pub fn is_up_fresh(&self, v: usize) -> bool {
        self.up_fresh[v]
    }

    pub fn is_down_fresh(&self, v: usize) -> bool {
        self.down_fresh[v]
    }

    /// Number of stale slots among the `num_slots` non-root nodes.
    pub fn stale_count(&self, num_slots: usize) -> usize {
        (0..num_slots)
            .filter(|&v| !self.up_fresh[v] || !self.down_fresh[v])
            .count()
    }

    fn write_up(&mut self, v: usize, values: &[f64], log_z: &[f64]) {
        let b = self.block();
        self.up[v * b..(v + 1) * b].copy_from_slice(values);
        self.up_log_z[v * self.loci..(v + 1) * self.loci].copy_from_slice(log_z);
        self.up_fresh[v] = true;
    }

    fn write_down(&mut self, v: usize, values: &[f64], log_z: &[f64]) {
        let b = self.block();
        self.down[v * b..(v + 1) * b].copy_from_slice(values);
        self.down_log_z[v * self.loci..(v + 1) * self.loci].copy_from_slice(log_z);
        self.down_fresh[v] = true;
    }

    /// Largest normalization error across all fresh slots.
    pub fn max_normalization_error(&self, p0: &[f64], num_slots: usize) -> f64 {
        let k = self.k;
        let mut worst = 0.0f64;
        for v in 0..num_slots {
            for (fresh, values, log_z) in [
                (self.up_fresh[v], self.up(v), self.up_log_normalizers(v)),
                (
                    self.down_fresh[v],
                    self.down(v),
                    self.down_log_normalizers(v),
                ),
            ] {
                if !fresh {
                    continue;
                }
                for (m, lz) in values.chunks(k).zip(log_z) {
                    if lz.is_finite() {
                        worst = worst.max((weighted_sum(p0, m) - 1.0).abs());
                    }
                }
            }
        }
        worst
    }
}

/// A genealogy together with its fresh message store.
#[derive(Debug, Clone)]
pub struct BeliefTree<'a> {
    model: &'a MutationModel,
    alignment: &'a Alignment,
    theta: f64,
    genealogy: Genealogy,
    store: MessageStore,
    branch: Vec<Option<Arc<TransitionMatrix>>>,
    cache: TransitionCache,
    scratch: Vec<f64>,
    scratch2: Vec<f64>,
    log_z_scratch: Vec<f64>,
}

impl<'a> BeliefTree<'a> {
    pub fn new(
        genealogy: Genealogy,
        alignment: &'a Alignment,
        model: &'a MutationModel,
        theta: f64,
    ) -> Result<Self> {
        if alignment.num_individuals() != genealogy.num_leaves() {
            return Err(Error::Data(format!(
                "alignment has {} individuals but the genealogy has {} leaves",
                alignment.num_individuals(),
                genealogy.num_leaves()
            )));
        }
        if !(theta > 0.0) || !theta.is_finite() {
            return Err(Error::Domain(format!(
                "theta must be positive and finite, got {theta}"
            )));
        }
        alignment.check_states(model.num_states())?;
        let k = model.num_states();
        let loci = alignment.num_loci();
        let nodes = genealogy.num_nodes();
        let mut tree = BeliefTree {
            model,
            alignment,
            theta,
            store: MessageStore::new(nodes, loci, k),
            branch: vec![None; nodes],
            cache: TransitionCache::default(),
            genealogy,
            scratch: vec![0.0; loci * k],
            scratch2: vec![0.0; loci * k],
            log_z_scratch: vec![0.0; loci],
        };
        tree.full_propagate()?;
        Ok(tree)
    }

    pub fn genealogy(&self) -> &Genealogy {
        &self.genealogy
    }

    pub fn into_genealogy(self) -> Genealogy {
        self.genealogy
    }

    pub fn store(&self) -> &MessageStore {
        &self.store
    }

    pub fn model(&self) -> &'a MutationModel {
        self.model
    }

    pub fn alignment(&self) -> &'a Alignment {
        self.alignment
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn num_loci(&self) -> usize {
        self.alignment.num_loci()
    }

    /// Transition matrix on the branch above `v`.
    pub fn branch_matrix(&self, v: usize) -> Option<&TransitionMatrix> {
        self.branch[v].as_deref()
    }

    fn refresh_branch(&mut self, v: usize) -> Result<()> {
        self.branch[v] = match self.genealogy.parent(v) {
            Some(p) => {
                let dt = self.genealogy.node_time(v) - self.genealogy.node_time(p);
                Some(self.cache.get(self.model, self.theta, dt)?)
            }
            None => None,
        };
        Ok(())
    }

    /// Recomputes every message: leaves, upward in event order, downward in reverse.
    pub fn full_propagate(&mut self) -> Result<()> {
        let g = &self.genealogy;
        let n = g.num_leaves();
        let root = g.root();
        for v in 0..root {
            self.refresh_branch(v)?;
        }
        self.store.up_fresh.iter_mut().for_each(|f| *f = false);
        self.store.down_fresh.iter_mut().for_each(|f| *f = false);
        for leaf in 0..n {
            self.compute_leaf(leaf);
        }
        for v in n..root {
            self.compute_up(v)?;
        }
        for v in (n..=root).rev() {
            let [a, b] = self.genealogy.children(v).expect("internal node");
            self.compute_down(a)?;
            self.compute_down(b)?;
        }
        Ok(())
    }

    fn compute_leaf(&mut self, leaf: usize) {
        let k = self.model.num_states();
        let loci = self.num_loci();
        let mut values = std::mem::take(&mut self.scratch);
        values.iter_mut().for_each(|v| *v = 0.0);
        for l in 0..loci {
            values[l * k + self.alignment.state(leaf, l)] = 1.0;
        }
        let mut log_z = std::mem::take(&mut self.log_z_scratch);
        normalize(&mut values, &mut log_z, self.model.equilibrium());
        self.store.write_up(leaf, &values, &log_z);
        self.scratch = values;
        self.log_z_scratch = log_z;
    }

    fn require_up(&self, v: usize) -> Result<()> {
        if self.store.up_fresh[v] {
            Ok(())
        } else {
            Err(Error::Sequencing(format!(
                "upward message from node {v} is stale"
            )))
        }
    }

    fn require_down(&self, v: usize) -> Result<()> {
        if self.store.down_fresh[v] {
            Ok(())
        } else {
            Err(Error::Sequencing(format!(
                "downward message into node {v} is stale"
            )))
        }
    }

    /// Unnormalized upward product at internal node `v` into `out`.
    fn up_product(&self, v: usize, out: &mut [f64], tmp: &mut [f64]) -> Result<()> {
        let [a, b] = self.genealogy.children(v).ok_or_else(|| {
            Error::Sequencing(format!("node {v} is a leaf and has no upward product"))
        })?;
        self.require_up(a)?;
        self.require_up(b)?;
        pull_up(
            self.branch[a].as_deref().expect("branch"),
            self.store.up(a),
            out,
        );
        pull_up(
            self.branch[b].as_deref().expect("branch"),
            self.store.up(b),
            tmp,
        );
        out.iter_mut().zip(tmp.iter()).for_each(|(o, t)| *o *= t);
        Ok(())
    }

    /// Unnormalized downward product from `parent(c)` to `c` into `out`.
    fn down_product(&self, c: usize, out: &mut [f64], tmp: &mut [f64]) -> Result<()> {
        let g = &self.genealogy;
        let p = g.parent(c).ok_or_else(|| {
            Error::Sequencing(format!("node {c} is the root; no downward message"))
        })?;
        let s = g.sibling(c).expect("non-root has a sibling");
        self.require_up(s)?;
        pull_up(
            self.branch[s].as_deref().expect("branch"),
            self.store.up(s),
            out,
        );
        match g.parent(p) {
            None => {
                let p0 = self.model.equilibrium();
                for block in out.chunks_mut(p0.len()) {
                    block.iter_mut().zip(p0).for_each(|(o, q)| *o *= q);
                }
            }
            Some(_) => {
                self.require_down(p)?;
                push_down(
                    self.branch[p].as_deref().expect("branch"),
                    self.store.down(p),
                    tmp,
                );
                out.iter_mut().zip(tmp.iter()).for_each(|(o, t)| *o *= t);
            }
        }
        Ok(())
    }

    fn compute_up(&mut self, v: usize) -> Result<()> {
        let mut out = std::mem::take(&mut self.scratch);
        let mut tmp = std::mem::take(&mut self.scratch2);
        let mut log_z = std::mem::take(&mut self.log_z_scratch);
        let res = self.up_product(v, &mut out, &mut tmp);
        if res.is_ok() {
            normalize(&mut out, &mut log_z, self.model.equilibrium());
            self.store.write_up(v, &out, &log_z);
        }
        self.scratch = out;
        self.scratch2 = tmp;
        self.log_z_scratch = log_z;
        res
    }

    fn compute_down(&mut self, c: usize) -> Result<()> {
        let mut out = std::mem::take(&mut self.scratch);
        let mut tmp = std::mem::take(&mut self.scratch2);
        let mut log_z = std::mem::take(&mut self.log_z_scratch);
        let res = self.down_product(c, &mut out, &mut tmp);
        if res.is_ok() {
            normalize(&mut out, &mut log_z, self.model.equilibrium());
            self.store.write_down(c, &out, &log_z);
        }
        self.scratch = out;
        self.scratch2 = tmp;
        self.log_z_scratch = log_z;
        res
    }

    /// Freshly computed upward message from internal node `v` to its parent.
    pub fn upward_message(&self, v: usize) -> Result<Message> {
        let p = self
            .genealogy
            .parent(v)
            .ok_or_else(|| Error::Sequencing(format!("node {v} is the root")))?;
        let k = self.model.num_states();
        let loci = self.num_loci();
        let mut values = vec![0.0; loci * k];
        let mut log_normalizers = vec![0.0; loci];
        if self.genealogy.is_leaf(v) {
            values.copy_from_slice(self.store.up(v));
            log_normalizers.copy_from_slice(self.store.up_log_normalizers(v));
        } else {
            let mut tmp = vec![0.0; loci * k];
            self.up_product(v, &mut values, &mut tmp)?;
            normalize(&mut values, &mut log_normalizers, self.model.equilibrium());
        }
        Ok(Message {
            direction: Direction::Upward,
            edge: (v, p),
            num_states: k,
            values,
            log_normalizers,
        })
    }

    /// Freshly computed downward message from internal node `v` into its child `child`.
    pub fn downward_message(&self, v: usize, child: usize) -> Result<Message> {
        if self.genealogy.parent(child) != Some(v) {
            return Err(Error::Sequencing(format!(
                "node {child} is not a child of {v}"
            )));
        }
        let k = self.model.num_states();
        let loci = self.num_loci();
        let mut values = vec![0.0; loci * k];
        let mut tmp = vec![0.0; loci * k];
        let mut log_normalizers = vec![0.0; loci];
        self.down_product(child, &mut values, &mut tmp)?;
        normalize(&mut values, &mut log_normalizers, self.model.equilibrium());
        Ok(Message {
            direction: Direction::Downward,
            edge: (v, child),
            num_states: k,
            values,
            log_normalizers,
        })
    }

    /// Stored message in slot `v` for the given direction.
    pub fn stored_message(&self, direction: Direction, v: usize) -> Result<Message> {
        let p = self
            .genealogy
            .parent(v)
            .ok_or_else(|| Error::Sequencing(format!("node {v} is the root and has no slot")))?;
        let (fresh, values, log_z, edge) = match direction {
            Direction::Upward => (
                self.store.up_fresh[v],
                self.store.up(v),
                self.store.up_log_normalizers(v),
                (v, p),
            ),
            Direction::Downward => (
                self.store.down_fresh[v],
                self.store.down(v),
                self.store.down_log_normalizers(v),
                (p, v),
            ),
        };
        if !fresh {
            return Err(Error::Sequencing(format!("slot {v} is stale")));
        }
        Ok(Message {
            direction,
            edge,
            num_states: self.model.num_states(),
            values: values.to_vec(),
            log_normalizers: log_z.to_vec(),
        })
    }

    /// Log-likelihood at the root.
    pub fn log_likelihood(&self) -> Result<f64> {
        self.log_likelihood_at(self.genealogy.root())
    }

    /// Log-likelihood assembled at `node` from the messages directed toward it.
    pub fn log_likelihood_at(&self, node: usize) -> Result<f64> {
        let g = &self.genealogy;
        if node >= g.num_nodes() {
            return Err(Error::Domain(format!("node {node} does not exist")));
        }
        let root = g.root();
        let k = self.model.num_states();
        let loci = self.num_loci();
        // ancestors-or-self of `node`: their downward slot points toward it
        let mut toward_down = vec![false; g.num_nodes()];
        let mut cur = Some(node);
        while let Some(v) = cur {
            toward_down[v] = true;
            cur = g.parent(v);
        }
        let mut total = 0.0;
        for v in 0..root {
            if toward_down[v] {
                self.require_down(v)?;
                total += self.store.down_log_normalizers(v).iter().sum::<f64>();
            } else {
                self.require_up(v)?;
                total += self.store.up_log_normalizers(v).iter().sum::<f64>();
            }
        }
        if total == f64::NEG_INFINITY {
            return Ok(total);
        }

        let mut local = vec![1.0; loci * k];
        let mut tmp = vec![0.0; loci * k];
        if g.is_leaf(node) {
            self.require_down(node)?;
            push_down(
                self.branch[node].as_deref().expect("branch"),
                self.store.down(node),
                &mut tmp,
            );
            for l in 0..loci {
                let x = self.alignment.state(node, l);
                total += tmp[l * k + x].max(0.0).ln();
            }
            return Ok(total);
        }
        self.up_product(node, &mut local, &mut tmp)?;
        if node == root {
            let p0 = self.model.equilibrium();
            for block in local.chunks(k) {
                total += weighted_sum(p0, block).ln();
            }
        } else {
            self.require_down(node)?;
            push_down(
                self.branch[node].as_deref().expect("branch"),
                self.store.down(node),
                &mut tmp,
            );
            for (block, d) in local.chunks(k).zip(tmp.chunks(k)) {
                total += block.iter().zip(d).map(|(a, b)| a * b).sum::<f64>().ln();
            }
        }
        Ok(total)
    }

    /// Moves event `event` to time `t` and refreshes every message that depends on it.
    pub fn set_time(&mut self, event: usize, t: f64) -> Result<()> {
        let v = self.genealogy.node_of_event(event);
        if let Some([a, b]) = self.genealogy.children(v) {
            let child_min = self.genealogy.node_time(a).min(self.genealogy.node_time(b));
            if t >= child_min {
                return Err(Error::InvariantViolation(format!(
                    "time {t} for node {v} is not older than its children"
                )));
            }
        }
        if let Some(p) = self.genealogy.parent(v) {
            if t <= self.genealogy.node_time(p) {
                return Err(Error::InvariantViolation(format!(
                    "time {t} for node {v} is older than its parent"
                )));
            }
        }
        if self.genealogy.time(event) == t {
            return Ok(());
        }
        self.genealogy.set_time(event, t)?;
        self.refresh_after_time_change(v)
    }

    /// Recomputes every message directed away from `v`, breadth first.
    pub fn refresh_after_time_change(&mut self, v: usize) -> Result<()> {
        let root = self.genealogy.root();
        self.refresh_branch(v)?;
        if let Some([a, b]) = self.genealogy.children(v) {
            self.refresh_branch(a)?;
            self.refresh_branch(b)?;
        }
        let g = &self.genealogy;
        // messages directed away from v: upward slots on v's ancestor path,
        // downward slots everywhere else
        let mut on_path = vec![false; g.num_nodes()];
        let mut cur = Some(v);
        while let Some(x) = cur {
            on_path[x] = true;
            cur = g.parent(x);
        }
        for x in 0..root {
            if on_path[x] {
                self.store.up_fresh[x] = false;
            } else {
                self.store.down_fresh[x] = false;
            }
        }

        // (from, to) pairs; `to` is a neighbour of `from`
        let mut queue: VecDeque<(usize, usize)> = VecDeque::new();
        for w in self.neighbours(v) {
            queue.push_back((v, w));
        }
        while let Some((from, to)) = queue.pop_front() {
            if self.genealogy.parent(from) == Some(to) {
                self.compute_up(from)?;
            } else {
                self.compute_down(to)?;
            }
            for next in self.neighbours(to) {
                if next != from {
                    queue.push_back((to, next));
                }
            }
        }
        Ok(())
    }

    fn neighbours(&self, v: usize) -> impl Iterator<Item = usize> {
        let g = &self.genealogy;
        let up = g.parent(v);
        let down = g.children(v);
        up.into_iter().chain(down.into_iter().flatten())
    }

    /// True when no message slot is stale.
    pub fn is_fresh(&self) -> bool {
        self.store.stale_count(self.genealogy.root()) == 0
    }

    /// Largest normalization error among all stored messages.
    pub fn max_normalization_error(&self) -> f64 {
        self.store
            .max_normalization_error(self.model.equilibrium(), self.genealogy.root())
    }
}

/// `log p(X | G, theta)` at the root (default) or at `at_node`.
pub fn log_likelihood(
    genealogy: &Genealogy,
    alignment: &Alignment,
    model: &MutationModel,
    theta: f64,
    at_node: Option<usize>,
) -> Result<f64> {
    let tree = BeliefTree::new(genealogy.clone(), alignment, model, theta)?;
    match at_node {
        Some(v) => tree.log_likelihood_at(v),
        None => tree.log_likelihood(),
    }
}

/// Upward pass only: `log p(X | G, theta)` at the root.
pub fn pruning_log_likelihood(
    genealogy: &Genealogy,
    alignment: &Alignment,
    model: &MutationModel,
    theta: f64,
    cache: &mut TransitionCache,
) -> Result<f64> {
    if alignment.num_individuals() != genealogy.num_leaves() {
        return Err(Error::Data("alignment and genealogy sizes differ".into()));
    }
    let k = model.num_states();
    let loci = alignment.num_loci();
    let p0 = model.equilibrium();
    let n = genealogy.num_leaves();
    let block = loci * k;
    let mut up = vec![0.0; genealogy.num_nodes() * block];
    let mut log_z = vec![0.0; loci];
    let mut total = 0.0;
    for leaf in 0..n {
        let slot = &mut up[leaf * block..(leaf + 1) * block];
        for l in 0..loci {
            slot[l * k + alignment.state(leaf, l)] = 1.0;
        }
        normalize(slot, &mut log_z, p0);
        total += log_z.iter().sum::<f64>();
    }
    let mut a_buf = vec![0.0; block];
    let mut b_buf = vec![0.0; block];
    for e in 0..genealogy.num_events() {
        let v = n + e;
        let [a, b] = genealogy.events()[e];
        let tv = genealogy.node_time(v);
        let ta = cache.get(model, theta, genealogy.node_time(a) - tv)?;
        let tb = cache.get(model, theta, genealogy.node_time(b) - tv)?;
        pull_up(&ta, &up[a * block..(a + 1) * block], &mut a_buf);
        pull_up(&tb, &up[b * block..(b + 1) * block], &mut b_buf);
        a_buf.iter_mut().zip(&b_buf).for_each(|(x, y)| *x *= y);
        if v == genealogy.root() {
            for blk in a_buf.chunks(k) {
                total += weighted_sum(p0, blk).ln();
            }
        } else {
            normalize(&mut a_buf, &mut log_z, p0);
            total += log_z.iter().sum::<f64>();
            up[v * block..(v + 1) * block].copy_from_slice(&a_buf);
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genealogy::{simulate_data, simulate_prior, Structure};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair_tree(height: f64) -> Genealogy {
        Genealogy::new(Structure::new(2, vec![[0, 1]]).unwrap(), vec![-height]).unwrap()
    }

    #[test]
    fn leaf_messages() {
        let bin = MutationModel::binary();
        let m = leaf_message(0, &bin).unwrap();
        assert_eq!(m.values, vec![2.0, 0.0]);
        assert!((m.log_normalizers[0] - 0.5f64.ln()).abs() < 1e-15);
        assert_eq!(leaf_message(1, &bin).unwrap().values, vec![0.0, 2.0]);
        let sw = MutationModel::stepwise(20).unwrap();
        let m = leaf_message(8, &sw).unwrap();
        for (i, &v) in m.values.iter().enumerate() {
            if i == 8 {
                assert!((v - 1.0 / sw.equilibrium()[8]).abs() < 1e-12);
            } else {
                assert_eq!(v, 0.0);
            }
        }
        assert!(leaf_message(2, &bin).is_err());
    }

    #[test]
    fn equilibrium_children_give_equilibrium_message() {
        let model = MutationModel::stepwise(4).unwrap();
        let ones = vec![1.0; 8];
        let t = model.transition_matrix(1.3, 0.7).unwrap();
        let mut a = vec![0.0; 8];
        let mut b = vec![0.0; 8];
        pull_up(&t, &ones, &mut a);
        pull_up(&t, &ones, &mut b);
        a.iter_mut().zip(&b).for_each(|(x, y)| *x *= y);
        let mut lz = vec![0.0; 2];
        normalize(&mut a, &mut lz, model.equilibrium());
        assert!(a.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(lz.iter().all(|z| z.abs() < 1e-12));
    }

    #[test]
    fn two_leaf_upward_product_matches_closed_form() {
        let model = MutationModel::binary();
        // a 3-leaf tree whose first event merges leaves 0 and 1 at -tau
        let tau = 0.4;
        let g = Genealogy::new(
            Structure::new(3, vec![[0, 1], [2, 3]]).unwrap(),
            vec![-tau, -1.0],
        )
        .unwrap();
        let a3 = Alignment::from_rows(&[vec![0], vec![0], vec![1]]).unwrap();
        let tree = BeliefTree::new(g, &a3, &model, 1.0).unwrap();
        let m = tree.upward_message(3).unwrap();
        let e = (-tau).exp();
        let raw = [
            ((1.0 + e) / 2.0).powi(2) * 4.0,
            ((1.0 - e) / 2.0).powi(2) * 4.0,
        ];
        let z = 0.5 * raw[0] + 0.5 * raw[1];
        assert!((m.values[0] - raw[0] / z).abs() < 1e-12);
        assert!((m.values[1] - raw[1] / z).abs() < 1e-12);
        assert_eq!(tree.stored_message(Direction::Upward, 3).unwrap(), m);
    }

    #[test]
    fn pair_likelihood_matches_hand_formula() {
        let model = MutationModel::binary();
        let a = Alignment::from_rows(&[vec![0], vec![0]]).unwrap();
        for &tau in &[0.05, 0.5, 2.0] {
            let ll = log_likelihood(&pair_tree(tau / 2.0), &a, &model, 1.0, None).unwrap();
            let e = (-tau).exp();
            // sum_y p0(y) T_{tau/2}(y,0)^2 with the binary closed form
            let t0 = (1.0 + (-tau / 2.0f64).exp()) / 2.0;
            let t1 = (1.0 - (-tau / 2.0f64).exp()) / 2.0;
            let direct = 0.5 * t0 * t0 + 0.5 * t1 * t1;
            assert!((ll - direct.ln()).abs() < 1e-13);
            assert!((direct - (1.0 + e) / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn downward_message_into_pair_leaf() {
        // n=2: root -> leaf 0 is proportional to p0(y) T(y, x1)
        let model = MutationModel::stepwise(3).unwrap();
        let a = Alignment::from_rows(&[vec![0], vec![2]]).unwrap();
        let tree = BeliefTree::new(pair_tree(0.8), &a, &model, 1.7).unwrap();
        let m = tree.downward_message(2, 0).unwrap();
        let t = model.transition_matrix(1.7, 0.8).unwrap();
        let p0 = model.equilibrium();
        let raw: Vec<f64> = (0..3).map(|y| p0[y] * t.get(y, 2)).collect();
        let z: f64 = (0..3).map(|y| p0[y] * raw[y]).sum();
        for y in 0..3 {
            assert!((m.values[y] - raw[y] / z).abs() < 1e-12);
        }
        assert!(m.normalization_error(p0) < 1e-12);
        // leaf evaluation gives the same likelihood as the root
        let at_root = tree.log_likelihood().unwrap();
        let at_leaf = tree.log_likelihood_at(0).unwrap();
        assert!((at_root - at_leaf).abs() < 1e-12);
    }

    #[test]
    fn identical_columns_scale_linearly() {
        let model = MutationModel::stepwise(5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = simulate_prior(5, &mut rng).unwrap();
        let one = Alignment::from_rows(&[vec![1], vec![2], vec![2], vec![3], vec![0]]).unwrap();
        let rows: Vec<Vec<usize>> = (0..5).map(|i| vec![one.state(i, 0); 7]).collect();
        let seven = Alignment::from_rows(&rows).unwrap();
        let l1 = log_likelihood(&g, &one, &model, 2.0, None).unwrap();
        let l7 = log_likelihood(&g, &seven, &model, 2.0, None).unwrap();
        assert!((l7 - 7.0 * l1).abs() < 1e-12 * l7.abs().max(1.0));
    }

    #[test]
    fn vanishing_theta_penalizes_divergent_leaves() {
        let model = MutationModel::binary();
        let a = Alignment::from_rows(&[vec![0], vec![1]]).unwrap();
        let g = pair_tree(1.0);
        let mut last = f64::INFINITY;
        for &theta in &[1e-6, 1e-8, 1e-10, 1e-12] {
            let ll = log_likelihood(&g, &a, &model, theta, None).unwrap();
            assert!(ll < last);
            last = ll;
        }
        assert!(last < -25.0);
    }

    #[test]
    fn stale_dependencies_are_reported() {
        let model = MutationModel::binary();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = simulate_prior(4, &mut rng).unwrap();
        let a = simulate_data(&g, &model, 1.0, 3, &mut rng).unwrap();
        let mut tree = BeliefTree::new(g, &a, &model, 1.0).unwrap();
        tree.store.up_fresh[0] = false;
        let parent = tree.genealogy().parent(0).unwrap();
        assert!(matches!(tree.compute_up(parent), Err(Error::Sequencing(_))));
        assert!(matches!(tree.log_likelihood(), Err(Error::Sequencing(_))));
        tree.full_propagate().unwrap();
        assert!(tree.is_fresh());
    }

    #[test]
    fn noop_time_change_keeps_likelihood() {
        let model = MutationModel::binary();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = simulate_prior(5, &mut rng).unwrap();
        let a = simulate_data(&g, &model, 1.0, 4, &mut rng).unwrap();
        let mut tree = BeliefTree::new(g, &a, &model, 1.0).unwrap();
        let before = tree.log_likelihood().unwrap();
        let t = tree.genealogy().time(2);
        tree.set_time(2, t).unwrap();
        assert_eq!(tree.log_likelihood().unwrap(), before);
    }

    #[test]
    fn pruning_matches_store() {
        let model = MutationModel::stepwise(6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let g = simulate_prior(7, &mut rng).unwrap();
        let a = simulate_data(&g, &model, 3.0, 5, &mut rng).unwrap();
        let tree = BeliefTree::new(g.clone(), &a, &model, 3.0).unwrap();
        let mut cache = TransitionCache::default();
        let pruned = pruning_log_likelihood(&g, &a, &model, 3.0, &mut cache).unwrap();
        assert!((tree.log_likelihood().unwrap() - pruned).abs() < 1e-12);
    }

    #[test]
    fn empty_alignment_has_unit_likelihood() {
        let model = MutationModel::binary();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = simulate_prior(6, &mut rng).unwrap();
        let a = Alignment::without_data(6);
        let tree = BeliefTree::new(g, &a, &model, 1.0).unwrap();
        assert_eq!(tree.log_likelihood().unwrap(), 0.0);
        assert_eq!(tree.log_likelihood_at(7).unwrap(), 0.0);
    }
}
