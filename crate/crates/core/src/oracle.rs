//! Independent references for small problems: exhaustive hidden-state sums,
//! structure enumeration and low-dimensional quadrature over times.
//!
//! Nothing here shares code with the message passing in [`crate::belief`]
//! beyond the transition matrices themselves.

use rand::Rng;

use crate::belief::log_likelihood;
use crate::error::{Error, Result};
use crate::genealogy::{ordered, Alignment, Event, Genealogy, Structure};
use crate::mutation::MutationModel;
use crate::numeric::pair_count;

/// Largest number of hidden-state assignments the brute-force sum will visit.
pub const BRUTE_FORCE_LIMIT: f64 = 1e6;

/// Largest `n` accepted by [`enumerate_structures`].
pub const ENUMERATION_LIMIT: usize = 6;

/// Prior tail cut for quadrature: `exp(-40)` of the waiting-time mass is dropped.
pub const QUADRATURE_TAIL: f64 = 40.0;

/// Relative tolerance between successive refined quadrature estimates.
pub const QUADRATURE_TOL: f64 = 1e-6;

fn transition(model: &MutationModel, theta: f64, dt: f64) -> Result<Vec<f64>> {
    let k = model.num_states();
    if theta == 0.0 {
        let mut id = vec![0.0; k * k];
        (0..k).for_each(|i| id[i * k + i] = 1.0);
        return Ok(id);
    }
    Ok(model.transition_matrix(theta, dt)?.as_slice().to_vec())
}

/// `p(X | G, theta)` by summing over every assignment of internal-node states.
///
/// `theta = 0` is accepted and means no mutation.
pub fn brute_force_likelihood(
    genealogy: &Genealogy,
    alignment: &Alignment,
    model: &MutationModel,
    theta: f64,
) -> Result<f64> {
    let n = genealogy.num_leaves();
    let k = model.num_states();
    let internal = n - 1;
    if (k as f64).powi(internal as i32) > BRUTE_FORCE_LIMIT {
        return Err(Error::OracleGuard(format!(
            "{k}^{internal} assignments exceed {BRUTE_FORCE_LIMIT}"
        )));
    }
    if alignment.num_individuals() != n {
        return Err(Error::Data("alignment and genealogy sizes differ".into()));
    }
    alignment.check_states(k)?;
    let root = genealogy.root();
    let edges: Vec<(usize, usize, Vec<f64>)> = (0..root)
        .map(|v| {
            let p = genealogy.parent(v).expect("non-root");
            transition(
                model,
                theta,
                genealogy.node_time(v) - genealogy.node_time(p),
            )
            .map(|t| (p, v, t))
        })
        .collect::<Result<_>>()?;
    let p0 = model.equilibrium();
    let mut total = 1.0;
    let mut states = vec![0usize; genealogy.num_nodes()];
    for l in 0..alignment.num_loci() {
        for (leaf, s) in states.iter_mut().enumerate().take(n) {
            *s = alignment.state(leaf, l);
        }
        let mut sum = 0.0;
        let mut assignment = vec![0usize; internal];
        loop {
            states[n..].copy_from_slice(&assignment);
            let mut term = p0[states[root]];
            for (p, v, t) in &edges {
                term *= t[states[*p] * k + states[*v]];
            }
            sum += term;
            // odometer over internal states
            let mut i = 0;
            while i < internal {
                assignment[i] += 1;
                if assignment[i] < k {
                    break;
                }
                assignment[i] = 0;
                i += 1;
            }
            if i == internal {
                break;
            }
        }
        total *= sum;
    }
    Ok(total)
}

/// Every ordered coalescent history for `n` labelled leaves.
pub fn enumerate_structures(n: usize) -> Result<Vec<Structure>> {
    if n < 2 {
        return Err(Error::Domain(format!("need at least 2 leaves, got {n}")));
    }
    if n > ENUMERATION_LIMIT {
        return Err(Error::OracleGuard(format!(
            "enumeration is limited to n <= {ENUMERATION_LIMIT}"
        )));
    }
    fn recurse(n: usize, live: &[usize], events: &mut Vec<Event>, out: &mut Vec<Structure>) {
        if live.len() == 1 {
            out.push(Structure::from_valid(events.clone()));
            return;
        }
        let node = n + events.len();
        for i in 0..live.len() {
            for j in i + 1..live.len() {
                let (a, b) = (live[i], live[j]);
                let mut next: Vec<usize> =
                    live.iter().copied().filter(|&x| x != a && x != b).collect();
                next.push(node);
                events.push(ordered(a, b));
                recurse(n, &next, events, out);
                events.pop();
            }
        }
    }
    let mut out = Vec::new();
    let leaves: Vec<usize> = (0..n).collect();
    recurse(n, &leaves, &mut Vec::new(), &mut out);
    Ok(out)
}

/// `n! (n-1)! / 2^(n-1)`.
pub fn structure_count(n: usize) -> f64 {
    (2..=n).map(pair_count).product()
}

/// Structures with a value for each.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumerationResult {
    pub structures: Vec<Structure>,
    pub values: Vec<f64>,
}

/// `p(S | X, T)` for every structure at fixed times, by brute-force likelihoods.
///
/// Every structure has the same prior mass given the times, so the posterior is
/// the normalized likelihood.
pub fn structure_posterior_given_times(
    times: &[f64],
    alignment: &Alignment,
    model: &MutationModel,
    theta: f64,
) -> Result<EnumerationResult> {
    let structures = enumerate_structures(times.len() + 1)?;
    let mut values = structures
        .iter()
        .map(|s| {
            brute_force_likelihood(
                &Genealogy::new(s.clone(), times.to_vec())?,
                alignment,
                model,
                theta,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = values.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Estimation(
            "data have zero likelihood under every structure".into(),
        ));
    }
    values.iter_mut().for_each(|v| *v /= total);
    Ok(EnumerationResult { structures, values })
}

/// Composite trapezoid on `[0, b]` with `m` intervals.
fn trapezoid(f: &mut impl FnMut(f64) -> f64, b: f64, m: usize) -> f64 {
    let h = b / m as f64;
    let mut s = 0.5 * (f(0.0) + f(b));
    for j in 1..m {
        s += f(h * j as f64);
    }
    s * h
}

/// Trapezoid with Richardson extrapolation, halving `h` until two extrapolated
/// estimates agree to [`QUADRATURE_TOL`] relative.
fn refine(mut estimate_at: impl FnMut(usize) -> f64, start: usize, max: usize) -> f64 {
    let mut m = start;
    let mut coarse = estimate_at(m);
    let mut prev: Option<f64> = None;
    while m < max {
        m *= 2;
        let fine = estimate_at(m);
        let rich = (4.0 * fine - coarse) / 3.0;
        if let Some(p) = prev {
            if (rich - p).abs() <= QUADRATURE_TOL * rich.abs().max(f64::MIN_POSITIVE) {
                return rich;
            }
        }
        prev = Some(rich);
        coarse = fine;
    }
    prev.unwrap_or(coarse)
}

fn genealogy_from_waits(s: &Structure, waits: &[f64]) -> Option<Genealogy> {
    let mut t = 0.0;
    let mut times = Vec::with_capacity(waits.len());
    for w in waits {
        let next = t - w;
        times.push(if next < t { next } else { t.next_down() });
        t = *times.last().expect("pushed");
    }
    Genealogy::new(s.clone(), times).ok()
}

fn likelihood_of(
    s: &Structure,
    waits: &[f64],
    a: &Alignment,
    model: &MutationModel,
    theta: f64,
) -> f64 {
    match genealogy_from_waits(s, waits) {
        Some(g) => brute_force_likelihood(&g, a, model, theta).unwrap_or(0.0),
        None => 0.0,
    }
}

fn check_small(alignment: &Alignment) -> Result<usize> {
    let n = alignment.num_individuals();
    if !(2..=3).contains(&n) {
        return Err(Error::OracleGuard(format!(
            "quadrature supports n = 2 or 3, got {n}"
        )));
    }
    Ok(n)
}

/// Per-structure `int p(X | S, T) p(S, T) dT` for `n` in {2, 3}.
pub fn quadrature_by_structure(
    alignment: &Alignment,
    model: &MutationModel,
    theta: f64,
) -> Result<EnumerationResult> {
    let n = check_small(alignment)?;
    alignment.check_states(model.num_states())?;
    let structures = enumerate_structures(n)?;
    let values = structures
        .iter()
        .map(|s| {
            if n == 2 {
                let b = QUADRATURE_TAIL;
                let mut f = |d: f64| (-d).exp() * likelihood_of(s, &[d], alignment, model, theta);
                refine(|m| trapezoid(&mut f, b, m), 64, 1 << 16)
            } else {
                let (b1, b2) = (QUADRATURE_TAIL / 3.0, QUADRATURE_TAIL);
                refine(
                    |m| {
                        let mut outer = |d1: f64| {
                            let mut inner = |d2: f64| {
                                (-3.0 * d1 - d2).exp()
                                    * likelihood_of(s, &[d1, d2], alignment, model, theta)
                            };
                            trapezoid(&mut inner, b2, m)
                        };
                        trapezoid(&mut outer, b1, m)
                    },
                    32,
                    1024,
                )
            }
        })
        .collect();
    Ok(EnumerationResult { structures, values })
}

/// `L(theta) = int p(X | G, theta) p(G) dG` for `n` in {2, 3}.
pub fn quadrature_likelihood(
    alignment: &Alignment,
    model: &MutationModel,
    theta: f64,
) -> Result<f64> {
    Ok(quadrature_by_structure(alignment, model, theta)?
        .values
        .iter()
        .sum())
}

/// `p(S | X)` over the structures of an `n = 3` (or 2) dataset.
pub fn structure_posterior(
    alignment: &Alignment,
    model: &MutationModel,
    theta: f64,
) -> Result<EnumerationResult> {
    let mut r = quadrature_by_structure(alignment, model, theta)?;
    let total: f64 = r.values.iter().sum();
    r.values.iter_mut().for_each(|v| *v /= total);
    Ok(r)
}

/// A CDF tabulated on an increasing grid, linear in between.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedCdf {
    pub xs: Vec<f64>,
    pub cdf: Vec<f64>,
}

impl TabulatedCdf {
    /// Integrates a nonnegative density on `xs` by the trapezoid rule and normalizes.
    pub fn from_density(xs: Vec<f64>, density: &[f64]) -> Result<Self> {
        let mut cdf = Vec::with_capacity(xs.len());
        cdf.push(0.0);
        for j in 1..xs.len() {
            let prev = cdf[j - 1];
            cdf.push(prev + 0.5 * (density[j] + density[j - 1]) * (xs[j] - xs[j - 1]));
        }
        let total = *cdf.last().expect("nonempty");
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::Estimation("density has no mass on the grid".into()));
        }
        cdf.iter_mut().for_each(|c| *c /= total);
        Ok(TabulatedCdf { xs, cdf })
    }

    pub fn eval(&self, x: f64) -> f64 {
        if x <= self.xs[0] {
            return 0.0;
        }
        let last = self.xs.len() - 1;
        if x >= self.xs[last] {
            return 1.0;
        }
        let j = self.xs.partition_point(|&v| v <= x) - 1;
        let w = (x - self.xs[j]) / (self.xs[j + 1] - self.xs[j]);
        self.cdf[j] + w * (self.cdf[j + 1] - self.cdf[j])
    }
}

/// Full conditional CDF of one event time with everything else fixed, from the
/// joint density `p(X | G) p(G)` with brute-force likelihoods.
///
/// For the root the support is truncated [`QUADRATURE_TAIL`] below its upper bound.
pub fn time_conditional_cdf(
    genealogy: &Genealogy,
    alignment: &Alignment,
    model: &MutationModel,
    theta: f64,
    event: usize,
    points: usize,
) -> Result<TabulatedCdf> {
    let v = genealogy.node_of_event(event);
    let [a, b] = genealogy.children(v).expect("internal");
    let mut upper = genealogy.node_time(a).min(genealogy.node_time(b));
    if event > 0 {
        upper = upper.min(genealogy.time(event - 1));
    }
    let mut lower = f64::NEG_INFINITY;
    if event + 1 < genealogy.num_events() {
        lower = genealogy.time(event + 1);
    }
    if let Some(p) = genealogy.parent(v) {
        lower = lower.max(genealogy.node_time(p));
    }
    if !lower.is_finite() {
        lower = upper - QUADRATURE_TAIL;
    }
    let xs: Vec<f64> = (0..points)
        .map(|j| lower + (upper - lower) * j as f64 / (points - 1) as f64)
        .collect();
    let log_joint = |t: f64| {
        let mut g = genealogy.clone();
        // endpoints coincide with neighbours; nudge inward
        let t = t.clamp(lower.next_up(), upper.next_down());
        g.set_time(event, t).ok()?;
        let lik = brute_force_likelihood(&g, alignment, model, theta).ok()?;
        Some(g.log_prior() + lik.ln())
    };
    let logs: Vec<f64> = xs
        .iter()
        .map(|&t| log_joint(t).unwrap_or(f64::NEG_INFINITY))
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let density: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    TabulatedCdf::from_density(xs, &density)
}

/// Posterior CDF of the tree height `-t_2` for `n = 3`, by integrating the joint
/// density along lines of constant height.
pub fn n3_height_cdf(
    alignment: &Alignment,
    model: &MutationModel,
    theta: f64,
    points: usize,
    inner: usize,
) -> Result<TabulatedCdf> {
    if alignment.num_individuals() != 3 {
        return Err(Error::OracleGuard("height marginal needs n = 3".into()));
    }
    let structures = enumerate_structures(3)?;
    let hmax = QUADRATURE_TAIL;
    let xs: Vec<f64> = (0..points)
        .map(|j| hmax * j as f64 / (points - 1) as f64)
        .collect();
    let density: Vec<f64> = xs
        .iter()
        .map(|&h| {
            if h == 0.0 {
                return 0.0;
            }
            structures
                .iter()
                .map(|s| {
                    let mut f = |d1: f64| {
                        let d2 = h - d1;
                        (-3.0 * d1 - d2).exp()
                            * likelihood_of(s, &[d1, d2], alignment, model, theta)
                    };
                    trapezoid(&mut f, h, inner)
                })
                .sum()
        })
        .collect();
    TabulatedCdf::from_density(xs, &density)
}

/// One-sample Kolmogorov-Smirnov statistic against `cdf`.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic p-value of a KS statistic `d` from `n` draws.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=200 {
        let j = j as f64;
        let term = (-2.0 * j * j * lambda * lambda).exp();
        sum += if j as usize % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// A random small problem for equivalence checks.
#[derive(Debug, Clone)]
pub struct Instance {
    pub genealogy: Genealogy,
    pub alignment: Alignment,
    pub model: MutationModel,
    pub theta: f64,
}

/// `n <= 5`, `K <= 4`, `L <= 2`, `theta` in `[0.1, 10]`; a third of the models are
/// non-reversible.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R) -> Result<Instance> {
    let n = rng.random_range(2..=5);
    let k = rng.random_range(2..=4);
    let loci = rng.random_range(1..=2);
    let theta = rng.random_range(0.1..=10.0);
    let model = match rng.random_range(0..3) {
        0 if k == 2 => MutationModel::binary(),
        0 | 1 => MutationModel::stepwise(k)?,
        _ => {
            let mut rate = vec![0.0; k * k];
            for i in 0..k {
                let mut out = 0.0;
                for j in 0..k {
                    if i != j {
                        rate[i * k + j] = rng.random_range(0.05..1.0);
                        out += rate[i * k + j];
                    }
                }
                rate[i * k + i] = -out;
            }
            MutationModel::from_rate_matrix(k, rate)?
        }
    };
    let genealogy = crate::genealogy::simulate_prior(n, rng)?;
    let data = (0..n * loci).map(|_| rng.random_range(0..k)).collect();
    let alignment = Alignment::new(n, loci, data)?;
    Ok(Instance {
        genealogy,
        alignment,
        model,
        theta,
    })
}

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Small equivalence suite run by `pgsc oracle-check`.
pub fn self_check<R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();

    let mut worst = 0.0f64;
    let mut worst_node = 0.0f64;
    for _ in 0..100 {
        let inst = random_instance(rng)?;
        let bp = log_likelihood(
            &inst.genealogy,
            &inst.alignment,
            &inst.model,
            inst.theta,
            None,
        )?;
        let bf = brute_force_likelihood(&inst.genealogy, &inst.alignment, &inst.model, inst.theta)?;
        worst = worst.max(((bp - bf.ln()).exp() - 1.0).abs());
        for v in inst.genealogy.num_leaves()..inst.genealogy.num_nodes() {
            let at = log_likelihood(
                &inst.genealogy,
                &inst.alignment,
                &inst.model,
                inst.theta,
                Some(v),
            )?;
            worst_node = worst_node.max(((at - bp).exp() - 1.0).abs());
        }
    }
    results.push(CheckResult {
        name: "belief propagation vs brute force",
        passed: worst <= 1e-10,
        detail: format!("max relative error {worst:.3e} over 100 instances"),
    });
    results.push(CheckResult {
        name: "likelihood invariant across nodes",
        passed: worst_node <= 1e-8,
        detail: format!("max relative error {worst_node:.3e}"),
    });

    let mut counts_ok = true;
    let mut detail = String::new();
    for n in 2..=ENUMERATION_LIMIT {
        let got = enumerate_structures(n)?.len();
        counts_ok &= got as f64 == structure_count(n);
        detail.push_str(&format!("n={n}:{got} "));
    }
    results.push(CheckResult {
        name: "structure enumeration count",
        passed: counts_ok,
        detail: detail.trim().into(),
    });

    let model = MutationModel::binary();
    let same = Alignment::from_rows(&[vec![0], vec![0]])?;
    let diff = Alignment::from_rows(&[vec![0], vec![1]])?;
    let tiny = 1e-6;
    let l_same = quadrature_likelihood(&same, &model, tiny)?;
    let l_diff = quadrature_likelihood(&diff, &model, tiny)?;
    results.push(CheckResult {
        name: "quadrature no-mutation limit",
        passed: (l_same - 0.5).abs() < 1e-5 && l_diff < 1e-5,
        detail: format!("L(identical) = {l_same:.8}, L(distinct) = {l_diff:.3e}"),
    });
    Ok(results)
}
