//! Coalescent genealogies, aligned data, the coalescent prior and forward simulation.
//!
//! Node ids are zero-based: leaves are `0..n`, event `e` (zero-based, most
//! recent first) creates internal node `n + e`, and the root is `2n - 2`.
//! Times are measured backward from the present as negative numbers:
//! leaves sit at `0` and event times strictly decrease, `0 > t_1 > ... > t_{n-1}`.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mutation::MutationModel;
use crate::numeric::pair_count;

/// An unordered pair of merged node ids, stored smaller id first.
pub type Event = [usize; 2];

const NO_PARENT: usize = usize::MAX;

pub(crate) fn ordered(a: usize, b: usize) -> Event {
    if a < b {
        [a, b]
    } else {
        [b, a]
    }
}

/// The ordered list of coalescent events, without times.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Structure(Vec<Event>);

impl Structure {
    /// Validates that each event merges two distinct lineages alive at that point.
    pub fn new(n: usize, events: Vec<Event>) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvariantViolation(format!(
                "need at least 2 leaves, got {n}"
            )));
        }
        if events.len() != n - 1 {
            return Err(Error::InvariantViolation(format!(
                "{} leaves need {} events, got {}",
                n,
                n - 1,
                events.len()
            )));
        }
        let mut alive = vec![false; 2 * n - 1];
        alive[..n].iter_mut().for_each(|a| *a = true);
        let mut normalized = Vec::with_capacity(events.len());
        for (e, &[a, b]) in events.iter().enumerate() {
            let created = n + e;
            for id in [a, b] {
                if id >= created || !alive[id] {
                    return Err(Error::InvariantViolation(format!(
                        "event {e} merges lineage {id}, which is not alive"
                    )));
                }
            }
            if a == b {
                return Err(Error::InvariantViolation(format!(
                    "event {e} merges {a} with itself"
                )));
            }
            alive[a] = false;
            alive[b] = false;
            alive[created] = true;
            normalized.push(ordered(a, b));
        }
        Ok(Structure(normalized))
    }

    pub(crate) fn from_valid(events: Vec<Event>) -> Self {
        Structure(events)
    }

    pub fn events(&self) -> &[Event] {
        &self.0
    }

    pub fn num_leaves(&self) -> usize {
        self.0.len() + 1
    }

    /// Log prior probability of the event ordering, `-sum log C(k, 2)`.
    pub fn log_prior(&self) -> f64 {
        log_structure_prior(self.num_leaves())
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|[a, b]| format!("({a},{b})")).collect();
        write!(f, "{}", parts.join(""))
    }
}

/// A coalescent tree: structure plus event times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GenealogyRecord", into = "GenealogyRecord")]
pub struct Genealogy {
    n: usize,
    structure: Structure,
    times: Vec<f64>,
    parent: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct GenealogyRecord {
    events: Vec<Event>,
    times: Vec<f64>,
}

impl TryFrom<GenealogyRecord> for Genealogy {
    type Error = Error;

    fn try_from(r: GenealogyRecord) -> Result<Self> {
        let n = r.events.len() + 1;
        Genealogy::new(Structure::new(n, r.events)?, r.times)
    }
}

impl From<Genealogy> for GenealogyRecord {
    fn from(g: Genealogy) -> Self {
        GenealogyRecord {
            events: g.structure.0,
            times: g.times,
        }
    }
}

impl Genealogy {
    pub fn new(structure: Structure, times: Vec<f64>) -> Result<Self> {
        let n = structure.num_leaves();
        if times.len() != n - 1 {
            return Err(Error::InvariantViolation(format!(
                "{} events need {} times, got {}",
                n - 1,
                n - 1,
                times.len()
            )));
        }
        let mut previous = 0.0;
        for (e, &t) in times.iter().enumerate() {
            if !t.is_finite() || t >= previous {
                return Err(Error::InvariantViolation(format!(
                    "event time {e} is {t}, which does not precede {previous}"
                )));
            }
            previous = t;
        }
        let mut g = Genealogy {
            n,
            structure,
            times,
            parent: Vec::new(),
        };
        g.rebuild_parents();
        Ok(g)
    }

    fn rebuild_parents(&mut self) {
        let n = self.n;
        self.parent = vec![NO_PARENT; 2 * n - 1];
        for (e, &[a, b]) in self.structure.0.iter().enumerate() {
            self.parent[a] = n + e;
            self.parent[b] = n + e;
        }
    }

    pub fn num_leaves(&self) -> usize {
        self.n
    }

    pub fn num_nodes(&self) -> usize {
        2 * self.n - 1
    }

    pub fn num_events(&self) -> usize {
        self.n - 1
    }

    pub fn root(&self) -> usize {
        2 * self.n - 2
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        node < self.n
    }

    pub fn structure(&self) -> &Structure {
        &self.structure
    }

    pub fn events(&self) -> &[Event] {
        &self.structure.0
    }

    /// Event times `t_1 .. t_{n-1}`.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Time of event `e` (zero-based).
    pub fn time(&self, event: usize) -> f64 {
        self.times[event]
    }

    pub fn node_of_event(&self, event: usize) -> usize {
        self.n + event
    }

    pub fn event_of_node(&self, node: usize) -> Option<usize> {
        (node >= self.n && node < 2 * self.n - 1).then(|| node - self.n)
    }

    pub fn node_time(&self, node: usize) -> f64 {
        if node < self.n {
            0.0
        } else {
            self.times[node - self.n]
        }
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        let p = self.parent[node];
        (p != NO_PARENT).then_some(p)
    }

    pub fn children(&self, node: usize) -> Option<Event> {
        self.event_of_node(node).map(|e| self.structure.0[e])
    }

    pub fn sibling(&self, node: usize) -> Option<usize> {
        let p = self.parent(node)?;
        let [a, b] = self.structure.0[p - self.n];
        Some(if a == node { b } else { a })
    }

    /// Waiting time `delta_i = t_{i-1} - t_i` before event `e` (zero-based).
    pub fn waiting_time(&self, event: usize) -> f64 {
        let prev = if event == 0 {
            0.0
        } else {
            self.times[event - 1]
        };
        prev - self.times[event]
    }

    /// Distance from the root to the leaves.
    pub fn height(&self) -> f64 {
        -self.times[self.n - 2]
    }

    pub fn total_branch_length(&self) -> f64 {
        (0..self.num_nodes() - 1)
            .map(|v| self.node_time(v) - self.node_time(self.parent[v]))
            .sum()
    }

    /// Moves event `e` to time `t`, rejecting values that break time ordering.
    pub fn set_time(&mut self, event: usize, t: f64) -> Result<()> {
        let upper = if event == 0 {
            0.0
        } else {
            self.times[event - 1]
        };
        let lower = self
            .times
            .get(event + 1)
            .copied()
            .unwrap_or(f64::NEG_INFINITY);
        if !t.is_finite() || t >= upper || t <= lower {
            return Err(Error::InvariantViolation(format!(
                "time {t} for event {event} is outside ({lower}, {upper})"
            )));
        }
        self.times[event] = t;
        Ok(())
    }

    /// Same times, different structure.
    pub fn with_structure(&self, structure: Structure) -> Result<Self> {
        if structure.num_leaves() != self.n {
            return Err(Error::InvariantViolation(
                "structure has the wrong number of leaves".into(),
            ));
        }
        let mut g = Genealogy {
            n: self.n,
            structure,
            times: self.times.clone(),
            parent: Vec::new(),
        };
        g.rebuild_parents();
        Ok(g)
    }

    /// Log density of the tree under the coalescent prior.
    pub fn log_prior(&self) -> f64 {
        log_prior(self)
    }
}

/// `log p(G) = -sum_i C(n-i+1, 2) * delta_i`.
///
/// This is the joint density of the structure and the times: the uniform
/// pairing probabilities `C(k,2)^-1` cancel the exponential rate factors.
pub fn log_prior(g: &Genealogy) -> f64 {
    let n = g.num_leaves();
    (0..g.num_events())
        .map(|e| -pair_count(n - e) * g.waiting_time(e))
        .sum()
}

/// `log p(S) = -sum_k log C(k, 2)`, identical for every structure on `n` leaves.
pub fn log_structure_prior(n: usize) -> f64 {
    -(2..=n).map(|k| pair_count(k).ln()).sum::<f64>()
}

/// `log p(T)` with exponential waiting times of rate `C(k, 2)`.
pub fn log_time_prior(g: &Genealogy) -> f64 {
    log_prior(g) - log_structure_prior(g.num_leaves())
}

/// Draws a genealogy from the coalescent prior.
pub fn simulate_prior<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Genealogy> {
    if n < 2 {
        return Err(Error::InvariantViolation(format!(
            "need at least 2 leaves, got {n}"
        )));
    }
    let mut alive: Vec<usize> = (0..n).collect();
    let mut events = Vec::with_capacity(n - 1);
    let mut times = Vec::with_capacity(n - 1);
    let mut t = 0.0;
    for e in 0..n - 1 {
        let k = alive.len();
        let wait = Exp::new(pair_count(k)).expect("positive rate").sample(rng);
        let next = t - wait;
        // a vanishing draw must still move strictly backward
        t = if next < t { next } else { t.next_down() };
        let i = rng.random_range(0..k);
        let mut j = rng.random_range(0..k - 1);
        if j >= i {
            j += 1;
        }
        let (a, b) = (alive[i], alive[j]);
        events.push(ordered(a, b));
        times.push(t);
        let (hi, lo) = if i > j { (i, j) } else { (j, i) };
        alive.swap_remove(hi);
        alive.swap_remove(lo);
        alive.push(n + e);
    }
    Genealogy::new(Structure::from_valid(events), times)
}

/// Aligned allelic states: `n` individuals by `L` loci.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    n: usize,
    loci: usize,
    data: Vec<usize>,
}

impl Alignment {
    /// Row-major `n x loci` states.
    pub fn new(n: usize, loci: usize, data: Vec<usize>) -> Result<Self> {
        if n < 2 {
            return Err(Error::Data(format!("need at least 2 individuals, got {n}")));
        }
        if loci == 0 {
            return Err(Error::Data("alignment has no loci".into()));
        }
        if data.len() != n * loci {
            return Err(Error::Data(format!(
                "expected {} states, got {}",
                n * loci,
                data.len()
            )));
        }
        Ok(Alignment { n, loci, data })
    }

    /// An alignment with no loci. The likelihood of every genealogy is 1.
    pub fn without_data(n: usize) -> Self {
        Alignment {
            n,
            loci: 0,
            data: Vec::new(),
        }
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let loci = rows.first().map_or(0, Vec::len);
        if let Some((i, _)) = rows.iter().enumerate().find(|(_, r)| r.len() != loci) {
            return Err(Error::Data(format!(
                "row {i} has a different number of loci"
            )));
        }
        Self::new(rows.len(), loci, rows.concat())
    }

    pub fn num_individuals(&self) -> usize {
        self.n
    }

    pub fn num_loci(&self) -> usize {
        self.loci
    }

    pub fn state(&self, individual: usize, locus: usize) -> usize {
        self.data[individual * self.loci + locus]
    }

    pub fn row(&self, individual: usize) -> &[usize] {
        &self.data[individual * self.loci..(individual + 1) * self.loci]
    }

    pub fn max_state(&self) -> Option<usize> {
        self.data.iter().copied().max()
    }

    /// Checks every state is below `num_states`.
    pub fn check_states(&self, num_states: usize) -> Result<()> {
        for i in 0..self.n {
            if let Some((l, &s)) = self
                .row(i)
                .iter()
                .enumerate()
                .find(|(_, &s)| s >= num_states)
            {
                return Err(Error::Data(format!(
                    "individual {i} locus {l} has state {s}, model has {num_states} states"
                )));
            }
        }
        Ok(())
    }

    /// Single-locus alignment of column `locus`.
    pub fn column(&self, locus: usize) -> Alignment {
        let data = (0..self.n).map(|i| self.state(i, locus)).collect();
        Alignment {
            n: self.n,
            loci: 1,
            data,
        }
    }

    /// Parses whitespace-separated states, one individual per line; `#` starts a comment line.
    pub fn parse(text: &str, num_states: Option<usize>) -> Result<Self> {
        let mut rows: Vec<Vec<usize>> = Vec::new();
        let mut loci = None;
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let row = trimmed
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<usize>().map_err(|_| Error::Parse {
                        line: line_no,
                        message: format!("'{tok}' is not a nonnegative integer"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            match loci {
                None => loci = Some(row.len()),
                Some(l) if l != row.len() => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("expected {l} loci, found {}", row.len()),
                    })
                }
                _ => {}
            }
            if let Some(k) = num_states {
                if let Some(&s) = row.iter().find(|&&s| s >= k) {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("state {s} is out of range for {k} states"),
                    });
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Parse {
                line: 0,
                message: "no data rows".into(),
            });
        }
        if rows.len() < 2 {
            return Err(Error::Parse {
                line: 0,
                message: "need at least 2 individuals".into(),
            });
        }
        Self::from_rows(&rows)
    }

    pub fn from_path(path: impl AsRef<Path>, num_states: Option<usize>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, num_states)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n {
            let row: Vec<String> = self.row(i).iter().map(usize::to_string).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Forward-simulates `loci` independent sites down `g`.
pub fn simulate_data<R: Rng + ?Sized>(
    g: &Genealogy,
    model: &MutationModel,
    theta: f64,
    loci: usize,
    rng: &mut R,
) -> Result<Alignment> {
    let n = g.num_leaves();
    let root = g.root();
    let branch: Vec<_> = (0..root)
        .map(|v| {
            let p = g.parent(v).expect("non-root has a parent");
            model.transition_matrix(theta, g.node_time(v) - g.node_time(p))
        })
        .collect::<Result<_>>()?;
    let mut data = vec![0usize; n * loci];
    let mut states = vec![0usize; g.num_nodes()];
    for l in 0..loci {
        states[root] = sample_categorical(model.equilibrium(), rng);
        // parents are created after their children, so descending ids visit parents first
        for v in (0..root).rev() {
            let p = g.parent(v).expect("non-root has a parent");
            states[v] = sample_categorical(branch[v].row(states[p]), rng);
        }
        for i in 0..n {
            data[i * loci + l] = states[i];
        }
    }
    if loci == 0 {
        return Ok(Alignment::without_data(n));
    }
    Alignment::new(n, loci, data)
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}
