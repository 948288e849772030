//! Gibbs updates of coalescent times given the tree structure.
//!
//! The full conditional of one event time is the product of the two prior
//! exponential factors touching it and the local combination of the three
//! messages entering its node. It is sampled by inverting a grid
//! approximation whose log-density is linear within each cell.

use log::warn;
use rand::Rng;

use crate::belief::BeliefTree;
use crate::error::{Error, Result};
use crate::genealogy::Genealogy;
use crate::mutation::{MutationModel, Spectral};
use crate::numeric::pair_count;

/// Prior tail mass left beyond the truncated root interval: `exp(-27.6) < 1.1e-12`.
pub const ROOT_TAIL_LOG_MASS: f64 = 27.6;

/// Intervals narrower than this are left untouched for the sweep.
pub const DEGENERATE_WIDTH: f64 = 1e-14;

/// Grid controls for the inverse-CDF sampler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSettings {
    pub points: usize,
    pub max_points: usize,
}

impl Default for GridSettings {
    fn default() -> Self {
        GridSettings {
            points: 256,
            max_points: 2048,
        }
    }
}

/// Bounds `(lower, upper)` of event `e`'s time. `lower` is `-inf` for the root.
///
/// Event-order neighbours and tree neighbours are enforced jointly.
pub fn conditional_bounds(g: &Genealogy, event: usize) -> Result<(f64, f64)> {
    let v = g.node_of_event(event);
    let mut lower = f64::NEG_INFINITY;
    if event + 1 < g.num_events() {
        lower = lower.max(g.time(event + 1));
    }
    if let Some(p) = g.parent(v) {
        lower = lower.max(g.node_time(p));
    }
    let mut upper = if event == 0 { 0.0 } else { g.time(event - 1) };
    let [a, b] = g.children(v).expect("event nodes are internal");
    upper = upper.min(g.node_time(a)).min(g.node_time(b));
    if !(lower < upper) {
        return Err(Error::InvariantViolation(format!(
            "empty interval ({lower}, {upper}) for event {event}"
        )));
    }
    Ok((lower, upper))
}

enum Kernel<'a> {
    Spectral {
        spectral: &'a Spectral,
        parent: Option<Vec<f64>>,
        left: Vec<f64>,
        right: Vec<f64>,
    },
    Dense {
        model: &'a MutationModel,
        parent: Option<Vec<f64>>,
        left: Vec<f64>,
        right: Vec<f64>,
    },
}

/// Full conditional of one event time, as an unnormalized log-density.
pub struct TimeConditional<'a> {
    event: usize,
    lower: f64,
    upper: f64,
    slope: f64,
    theta: f64,
    parent_time: Option<f64>,
    child_times: [f64; 2],
    k: usize,
    loci: usize,
    p0: &'a [f64],
    kernel: Kernel<'a>,
}

impl<'a> TimeConditional<'a> {
    /// Snapshots the messages entering the node of `event`; the store must be fresh.
    pub fn new(tree: &BeliefTree<'a>, event: usize) -> Result<Self> {
        let g = tree.genealogy();
        if event >= g.num_events() {
            return Err(Error::Domain(format!("event {event} does not exist")));
        }
        let (lower, upper) = conditional_bounds(g, event)?;
        let v = g.node_of_event(event);
        let [a, b] = g.children(v).expect("internal");
        let store = tree.store();
        for c in [a, b] {
            if !store.is_up_fresh(c) {
                return Err(Error::Sequencing(format!(
                    "upward message from {c} is stale"
                )));
            }
        }
        let parent = g.parent(v);
        if parent.is_some() && !store.is_down_fresh(v) {
            return Err(Error::Sequencing(format!(
                "downward message into {v} is stale"
            )));
        }
        let model = tree.model();
        let k = model.num_states();
        let loci = tree.num_loci();
        // (C(m+1,2) - C(m,2)) with m = n - i lineages after the event; 1 at the root
        let slope = pair_count(g.num_leaves() - event) - pair_count(g.num_leaves() - event - 1);

        let kernel = match model.spectral() {
            Some(sp) => {
                let project = |msg: &[f64], transpose: bool| {
                    let mut out = vec![0.0; loci * k];
                    for (m, o) in msg.chunks(k).zip(out.chunks_mut(k)) {
                        if transpose {
                            sp.transpose_coefficients(m, o);
                        } else {
                            sp.forward_coefficients(m, o);
                        }
                    }
                    out
                };
                Kernel::Spectral {
                    spectral: sp,
                    parent: parent.map(|_| project(store.down(v), true)),
                    left: project(store.up(a), false),
                    right: project(store.up(b), false),
                }
            }
            None => Kernel::Dense {
                model,
                parent: parent.map(|_| store.down(v).to_vec()),
                left: store.up(a).to_vec(),
                right: store.up(b).to_vec(),
            },
        };
        Ok(TimeConditional {
            event,
            lower,
            upper,
            slope,
            theta: tree.theta(),
            parent_time: parent.map(|p| g.node_time(p)),
            child_times: [g.node_time(a), g.node_time(b)],
            k,
            loci,
            p0: model.equilibrium(),
            kernel,
        })
    }

    pub fn event(&self) -> usize {
        self.event
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.lower, self.upper)
    }

    pub fn is_root(&self) -> bool {
        self.parent_time.is_none()
    }

    /// Unnormalized log-density at candidate time `t`; `-inf` outside the bounds.
    pub fn log_density(&self, t: f64) -> f64 {
        if !(t >= self.lower && t <= self.upper) {
            return f64::NEG_INFINITY;
        }
        let k = self.k;
        let s_left = self.theta * (self.child_times[0] - t).max(0.0);
        let s_right = self.theta * (self.child_times[1] - t).max(0.0);
        let s_parent = self.parent_time.map(|tp| self.theta * (t - tp).max(0.0));
        let mut total = self.slope * t;
        let mut a = [0.0f64; 64];
        let mut b = [0.0f64; 64];
        let mut c = [0.0f64; 64];
        let mut d = [0.0f64; 64];
        let (mut a_heap, mut b_heap, mut c_heap, mut d_heap);
        let (a, b, c, d): (&mut [f64], &mut [f64], &mut [f64], &mut [f64]) = if k <= 64 {
            (&mut a[..k], &mut b[..k], &mut c[..k], &mut d[..k])
        } else {
            a_heap = vec![0.0; k];
            b_heap = vec![0.0; k];
            c_heap = vec![0.0; k];
            d_heap = vec![0.0; k];
            (&mut a_heap, &mut b_heap, &mut c_heap, &mut d_heap)
        };
        let dense = match &self.kernel {
            Kernel::Dense { model, .. } => Some((
                model.transition_for_length(s_left),
                model.transition_for_length(s_right),
                s_parent.map(|s| model.transition_for_length(s)),
            )),
            Kernel::Spectral { .. } => None,
        };
        for l in 0..self.loci {
            let blk = l * k..(l + 1) * k;
            match &self.kernel {
                Kernel::Spectral {
                    spectral,
                    parent,
                    left,
                    right,
                } => {
                    spectral.eval_forward(&left[blk.clone()], s_left, d, a);
                    spectral.eval_forward(&right[blk.clone()], s_right, d, b);
                    match (parent, s_parent) {
                        (Some(pc), Some(sp)) => spectral.eval_transpose(&pc[blk], sp, d, c),
                        _ => c.copy_from_slice(self.p0),
                    }
                }
                Kernel::Dense {
                    parent,
                    left,
                    right,
                    ..
                } => {
                    let (tl, tr, tp) = dense.as_ref().expect("dense matrices");
                    tl.apply(&left[blk.clone()], a);
                    tr.apply(&right[blk.clone()], b);
                    match (parent, tp) {
                        (Some(pm), Some(tp)) => tp.apply_transpose(&pm[blk], c),
                        _ => c.copy_from_slice(self.p0),
                    }
                }
            }
            let local: f64 = (0..k).map(|y| a[y] * b[y] * c[y]).sum();
            if !(local > 0.0) {
                return f64::NEG_INFINITY;
            }
            total += local.ln();
        }
        total
    }

    /// Builds the grid sampler for this conditional.
    pub fn grid(&self, settings: GridSettings) -> Result<GridSampler> {
        let hi = self.upper;
        let mut points = settings.points.max(2);
        let mut span = if self.is_root() {
            ROOT_TAIL_LOG_MASS / self.slope
        } else {
            self.upper - self.lower
        };
        loop {
            let lo = if self.is_root() {
                hi - span
            } else {
                self.lower
            };
            let grid = GridSampler::build(lo, hi, points, |t| self.log_density(t))?;
            if self.is_root() && span < 1e4 {
                // widen while the truncated edge still carries non-negligible density
                let edge = grid.log_values[0] - grid.max_log;
                if edge > -ROOT_TAIL_LOG_MASS {
                    span *= 2.0;
                    continue;
                }
            }
            if grid.concentrated_cells() < 4 && points < settings.max_points {
                points = (points * 2).min(settings.max_points);
                continue;
            }
            return Ok(grid);
        }
    }
}

/// Inverse-CDF sampler over a grid with log-linear density in each cell.
#[derive(Debug, Clone)]
pub struct GridSampler {
    xs: Vec<f64>,
    log_values: Vec<f64>,
    max_log: f64,
    /// Cumulative cell masses, `cum[0] = 0`.
    cum: Vec<f64>,
}

impl GridSampler {
    pub fn build(lo: f64, hi: f64, points: usize, log_f: impl Fn(f64) -> f64) -> Result<Self> {
        let points = points.max(2);
        let h = (hi - lo) / (points - 1) as f64;
        let xs: Vec<f64> = (0..points)
            .map(|j| {
                if j == points - 1 {
                    hi
                } else {
                    lo + h * j as f64
                }
            })
            .collect();
        let log_values: Vec<f64> = xs.iter().map(|&x| log_f(x)).collect();
        let max_log = log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max_log.is_finite() {
            return Err(Error::Estimation(format!(
                "conditional density vanishes on [{lo}, {hi}]"
            )));
        }
        let mut cum = Vec::with_capacity(points);
        cum.push(0.0);
        let mut acc = 0.0;
        for j in 0..points - 1 {
            acc += cell_mass(
                xs[j + 1] - xs[j],
                log_values[j] - max_log,
                log_values[j + 1] - max_log,
            );
            cum.push(acc);
        }
        Ok(GridSampler {
            xs,
            log_values,
            max_log,
            cum,
        })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.xs[0], *self.xs.last().expect("nonempty"))
    }

    fn total(&self) -> f64 {
        *self.cum.last().expect("nonempty")
    }

    /// Fewest cells holding 99% of the mass.
    pub fn concentrated_cells(&self) -> usize {
        let total = self.total();
        let mut masses: Vec<f64> = self.cum.windows(2).map(|w| w[1] - w[0]).collect();
        masses.sort_by(|a, b| b.total_cmp(a));
        let mut acc = 0.0;
        for (i, m) in masses.iter().enumerate() {
            acc += m;
            if acc >= 0.99 * total {
                return i + 1;
            }
        }
        masses.len()
    }

    /// CDF of the grid approximation.
    pub fn cdf(&self, x: f64) -> f64 {
        let (lo, hi) = self.bounds();
        if x <= lo {
            return 0.0;
        }
        if x >= hi {
            return 1.0;
        }
        let j = self.xs.partition_point(|&v| v <= x) - 1;
        let h = self.xs[j + 1] - self.xs[j];
        let a = self.log_values[j] - self.max_log;
        let b = self.log_values[j + 1] - self.max_log;
        let frac = (x - self.xs[j]) / h;
        let partial = partial_cell_mass(h, a, b, frac);
        (self.cum[j] + partial) / self.total()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let target = rng.random::<f64>() * self.total();
        let cell = (self.cum.partition_point(|&c| c <= target).max(1) - 1).min(self.xs.len() - 2);
        let h = self.xs[cell + 1] - self.xs[cell];
        let mass = self.cum[cell + 1] - self.cum[cell];
        let u = if mass > 0.0 {
            ((target - self.cum[cell]) / mass).clamp(0.0, 1.0)
        } else {
            0.5
        };
        let a = self.log_values[cell] - self.max_log;
        let b = self.log_values[cell + 1] - self.max_log;
        let frac = invert_cell(a, b, u);
        (self.xs[cell] + frac * h).clamp(self.xs[cell], self.xs[cell + 1])
    }
}

/// Mass of a cell of width `h` whose log-density runs linearly from `a` to `b`.
fn cell_mass(h: f64, a: f64, b: f64) -> f64 {
    partial_cell_mass(h, a, b, 1.0)
}

/// Mass over the first `frac` of the cell.
fn partial_cell_mass(h: f64, a: f64, b: f64, frac: f64) -> f64 {
    match (a.is_finite(), b.is_finite()) {
        (false, false) => 0.0,
        // one end vanishes: treat the density as linear down to zero
        (true, false) => h * a.exp() * (frac - frac * frac / 2.0),
        (false, true) => h * b.exp() * frac * frac / 2.0,
        (true, true) => {
            let d = b - a;
            if d.abs() < 1e-10 {
                h * a.exp() * frac * (1.0 + d * frac / 2.0)
            } else {
                h * a.exp() * (d * frac).exp_m1() / d
            }
        }
    }
}

/// Fraction `s` in `[0,1]` with cell mass fraction `u` below it.
fn invert_cell(a: f64, b: f64, u: f64) -> f64 {
    match (a.is_finite(), b.is_finite()) {
        (false, false) => u,
        (true, false) => 1.0 - (1.0 - u).sqrt(),
        (false, true) => u.sqrt(),
        (true, true) => {
            let d = b - a;
            if d.abs() < 1e-10 {
                u
            } else if d > 0.0 {
                1.0 + (u + (1.0 - u) * (-d).exp()).ln() / d
            } else {
                (u * d.exp_m1()).ln_1p() / d
            }
        }
    }
}

/// Counters from time updates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SweepStats {
    pub updates: u64,
    pub skipped: u64,
    pub density_evaluations: u64,
}

impl SweepStats {
    pub fn merge(&mut self, other: SweepStats) {
        self.updates += other.updates;
        self.skipped += other.skipped;
        self.density_evaluations += other.density_evaluations;
    }
}

/// Resamples the time of `event` from its full conditional and refreshes messages.
pub fn sample_time<R: Rng + ?Sized>(
    tree: &mut BeliefTree<'_>,
    event: usize,
    settings: GridSettings,
    rng: &mut R,
) -> Result<SweepStats> {
    let mut stats = SweepStats::default();
    let (lower, upper) = conditional_bounds(tree.genealogy(), event)?;
    if upper - lower < DEGENERATE_WIDTH {
        warn!(
            "event {event}: interval width {} below {DEGENERATE_WIDTH}; keeping current time",
            upper - lower
        );
        stats.skipped = 1;
        return Ok(stats);
    }
    let conditional = TimeConditional::new(tree, event)?;
    let grid = match conditional.grid(settings) {
        Ok(grid) => grid,
        Err(Error::Estimation(msg)) => {
            warn!("event {event}: {msg}; keeping current time");
            stats.skipped = 1;
            return Ok(stats);
        }
        Err(e) => return Err(e),
    };
    stats.density_evaluations = grid.len() as u64;
    let mut t = grid.sample(rng);
    if t <= lower {
        t = lower.next_up();
    }
    if t >= upper {
        t = upper.next_down();
    }
    tree.set_time(event, t)?;
    stats.updates = 1;
    Ok(stats)
}

/// `rounds` ascending passes over all event times.
pub fn gibbs_sweep<R: Rng + ?Sized>(
    tree: &mut BeliefTree<'_>,
    rounds: usize,
    settings: GridSettings,
    rng: &mut R,
) -> Result<SweepStats> {
    let mut stats = SweepStats::default();
    for _ in 0..rounds {
        for event in 0..tree.genealogy().num_events() {
            stats.merge(sample_time(tree, event, settings, rng)?);
        }
    }
    Ok(stats)
}
