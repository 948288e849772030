//! Conditional SMC over tree structures at fixed coalescent times.
//!
//! Each particle builds a structure one event at a time. At event `i` every
//! live pair is scored by the normalizer of the upward message its merge would
//! send at `t_i`; the pair is drawn in proportion to that score and the score
//! total `w_i` is the incremental weight. Particle 0 replays the reference
//! structure and is never resampled away.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief::{leaf_message, normalize};
use crate::error::{Error, Result};
use crate::genealogy::{ordered, Alignment, Event, Genealogy, Structure};
use crate::mutation::{MutationModel, TransitionMatrix};
use crate::numeric::{log_sum_exp, normalize_log_weights, pick_index};

/// Weighting scheme for the particle system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CsmcMode {
    /// No resampling; final weight is the product of all increments.
    Sis,
    /// Multinomial resampling after every step; final weight is the last increment.
    #[default]
    Smc,
}

#[derive(Debug, Clone, PartialEq)]
struct Lineage {
    node: usize,
    /// Index into the source times: 0 for leaves, `e + 1` for event `e`.
    source: usize,
    /// Normalized message, `loci x K`.
    message: Vec<f64>,
}

/// A structure under construction: live lineages and committed events.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialStructure {
    lineages: Vec<Lineage>,
    events: Vec<Event>,
    /// Sum of log increments (SIS) or the latest increment (SMC).
    log_weight: f64,
}

impl PartialStructure {
    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn num_live(&self) -> usize {
        self.lineages.len()
    }

    /// Node ids of the live lineages.
    pub fn live_nodes(&self) -> Vec<usize> {
        self.lineages.iter().map(|l| l.node).collect()
    }

    pub fn log_weight(&self) -> f64 {
        self.log_weight
    }

    pub fn is_complete(&self) -> bool {
        self.lineages.len() == 1
    }

    /// The full structure; fails before the last event.
    pub fn structure(&self) -> Result<Structure> {
        if !self.is_complete() {
            return Err(Error::Sequencing(format!(
                "structure requested with {} live lineages",
                self.lineages.len()
            )));
        }
        Ok(Structure::from_valid(self.events.clone()))
    }
}

/// Normalized proposal over the live pairs of one particle.
#[derive(Debug, Clone, PartialEq)]
pub struct PairWeights {
    /// Positions into the live lineage list, `(a, b)` with `a < b`.
    pub pairs: Vec<(usize, usize)>,
    pub probabilities: Vec<f64>,
    /// `log w_i`, the log of the unnormalized total.
    pub log_total: f64,
}

/// Projected messages, candidate pairs and their log weights.
type Scored = (Vec<Vec<f64>>, Vec<(usize, usize)>, Vec<f64>);

/// Fixed inputs shared by all particles of one run.
pub struct CsmcContext<'a> {
    model: &'a MutationModel,
    n: usize,
    loci: usize,
    times: Vec<f64>,
    /// `transitions[i][s]`: branch from source `s` up to event `i`, for `s <= i`.
    transitions: Vec<Vec<TransitionMatrix>>,
    leaves: Vec<Vec<f64>>,
}

impl<'a> CsmcContext<'a> {
    pub fn new(
        times: &[f64],
        alignment: &'a Alignment,
        model: &'a MutationModel,
        theta: f64,
    ) -> Result<Self> {
        let n = alignment.num_individuals();
        if times.len() + 1 != n {
            return Err(Error::Domain(format!(
                "{} times for {n} leaves",
                times.len()
            )));
        }
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(Error::Domain(format!(
                "theta must be positive, got {theta}"
            )));
        }
        let mut prev = 0.0;
        for &t in times {
            if !(t < prev) {
                return Err(Error::Domain(
                    "event times must be strictly decreasing below 0".into(),
                ));
            }
            prev = t;
        }
        alignment.check_states(model.num_states())?;
        let loci = alignment.num_loci();
        let source_time = |s: usize| if s == 0 { 0.0 } else { times[s - 1] };
        let transitions = (0..times.len())
            .map(|i| {
                (0..=i)
                    .map(|s| model.transition_matrix(theta, source_time(s) - times[i]))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let k = model.num_states();
        let leaves = (0..n)
            .map(|i| {
                let mut m = Vec::with_capacity(loci * k);
                for l in 0..loci {
                    m.extend_from_slice(&leaf_message(alignment.state(i, l), model)?.values);
                }
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CsmcContext {
            model,
            n,
            loci,
            times: times.to_vec(),
            transitions,
            leaves,
        })
    }

    pub fn num_leaves(&self) -> usize {
        self.n
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// All leaves live, no events.
    pub fn initial(&self) -> PartialStructure {
        PartialStructure {
            lineages: (0..self.n)
                .map(|i| Lineage {
                    node: i,
                    source: 0,
                    message: self.leaves[i].clone(),
                })
                .collect(),
            events: Vec::new(),
            log_weight: 0.0,
        }
    }

    fn projections(&self, particle: &PartialStructure) -> Vec<Vec<f64>> {
        let step = particle.events.len();
        let k = self.model.num_states();
        particle
            .lineages
            .iter()
            .map(|lin| {
                let t = &self.transitions[step][lin.source];
                let mut out = vec![0.0; self.loci * k];
                for (m, o) in lin.message.chunks(k).zip(out.chunks_mut(k)) {
                    t.apply(m, o);
                }
                out
            })
            .collect()
    }

    fn pair_log_z(&self, pa: &[f64], pb: &[f64]) -> f64 {
        let k = self.model.num_states();
        let p0 = self.model.equilibrium();
        let mut total = 0.0;
        for (a, b) in pa.chunks(k).zip(pb.chunks(k)) {
            let z: f64 = (0..k).map(|y| p0[y] * a[y] * b[y]).sum();
            if !(z > 0.0) {
                return f64::NEG_INFINITY;
            }
            total += z.ln();
        }
        total
    }

    fn score(&self, particle: &PartialStructure) -> Result<Scored> {
        let live = particle.lineages.len();
        if live < 2 || particle.events.len() >= self.times.len() {
            return Err(Error::Sequencing(format!(
                "no event left to propose with {live} live lineages"
            )));
        }
        let proj = self.projections(particle);
        let mut pairs = Vec::with_capacity(live * (live - 1) / 2);
        let mut log_z = Vec::with_capacity(pairs.capacity());
        for a in 0..live {
            for b in a + 1..live {
                pairs.push((a, b));
                log_z.push(self.pair_log_z(&proj[a], &proj[b]));
            }
        }
        Ok((proj, pairs, log_z))
    }

    /// Proposal over live pairs at the particle's next event time.
    pub fn pair_weights(&self, particle: &PartialStructure) -> Result<PairWeights> {
        let (_, pairs, log_z) = self.score(particle)?;
        let mut probabilities = Vec::new();
        let log_total = normalize_log_weights(&log_z, &mut probabilities);
        Ok(PairWeights {
            pairs,
            probabilities,
            log_total,
        })
    }

    /// `log w_{n-1}`: the root combination of the last two lineages.
    pub fn final_weight(&self, particle: &PartialStructure) -> Result<f64> {
        if particle.lineages.len() != 2 {
            return Err(Error::Sequencing(format!(
                "final weight needs 2 live lineages, found {}",
                particle.lineages.len()
            )));
        }
        Ok(self.pair_weights(particle)?.log_total)
    }

    /// Scores, chooses a pair and merges it. `forced` replays a given event.
    /// Returns `log w_i` and the number of pairs scored.
    fn advance(
        &self,
        particle: &mut PartialStructure,
        forced: Option<Event>,
        u: f64,
    ) -> Result<(f64, usize)> {
        let (mut proj, pairs, log_z) = self.score(particle)?;
        let mut probs = Vec::new();
        let log_total = normalize_log_weights(&log_z, &mut probs);
        let (a, b) = match forced {
            Some([x, y]) => {
                let pos = |node| particle.lineages.iter().position(|l| l.node == node);
                match (pos(x), pos(y)) {
                    (Some(p), Some(q)) => (p.min(q), p.max(q)),
                    _ => {
                        return Err(Error::InvariantViolation(format!(
                            "reference event ({x}, {y}) merges a lineage that is not live"
                        )))
                    }
                }
            }
            None => pairs[pick_index(&probs, u)],
        };
        let step = particle.events.len();
        let mut message = std::mem::take(&mut proj[a]);
        for (m, o) in message.iter_mut().zip(&proj[b]) {
            *m *= o;
        }
        let mut scratch = vec![0.0; self.loci];
        normalize(&mut message, &mut scratch, self.model.equilibrium());
        let event = ordered(particle.lineages[a].node, particle.lineages[b].node);
        particle.lineages.swap_remove(b);
        particle.lineages.swap_remove(a);
        particle.lineages.push(Lineage {
            node: self.n + step,
            source: step + 1,
            message,
        });
        particle.events.push(event);
        Ok((log_total, pairs.len()))
    }
}

/// Counters from one run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsmcStats {
    pub pair_evaluations: u64,
    pub resampling_steps: u64,
}

impl CsmcStats {
    pub fn merge(&mut self, other: CsmcStats) {
        self.pair_evaluations += other.pair_evaluations;
        self.resampling_steps += other.resampling_steps;
    }
}

/// Completed particles with their normalized weights.
#[derive(Debug, Clone)]
pub struct ParticleSet {
    pub particles: Vec<PartialStructure>,
    pub log_weights: Vec<f64>,
    pub weights: Vec<f64>,
    pub mode: CsmcMode,
    pub stats: CsmcStats,
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Index of the particle that replayed the reference.
    pub fn reference_index(&self) -> usize {
        0
    }

    pub fn structure(&self, m: usize) -> Result<Structure> {
        self.particles[m].structure()
    }

    /// Number of distinct structures among the particles.
    pub fn distinct_structures(&self) -> usize {
        let mut seen: Vec<&[Event]> = self.particles.iter().map(|p| p.events()).collect();
        seen.sort();
        seen.dedup();
        seen.len()
    }
}

fn split_mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform in `[0, 1)` for particle `m` at `step`, independent of scheduling.
fn stream_uniform(base: u64, m: usize, step: usize) -> f64 {
    let h = split_mix(
        split_mix(base ^ split_mix(m as u64)) ^ (step as u64).wrapping_mul(0xd1b5_4a32_d192_ed03),
    );
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Runs conditional SMC with `reference` as particle 0.
pub fn csmc_run<R: Rng + ?Sized>(
    reference: &Genealogy,
    alignment: &Alignment,
    model: &MutationModel,
    theta: f64,
    num_particles: usize,
    mode: CsmcMode,
    rng: &mut R,
) -> Result<ParticleSet> {
    let ctx = CsmcContext::new(reference.times(), alignment, model, theta)?;
    csmc_run_with(&ctx, reference.structure(), num_particles, mode, rng)
}

/// As [`csmc_run`] with a prepared context.
pub fn csmc_run_with<R: Rng + ?Sized>(
    ctx: &CsmcContext<'_>,
    reference: &Structure,
    num_particles: usize,
    mode: CsmcMode,
    rng: &mut R,
) -> Result<ParticleSet> {
    if num_particles < 2 {
        return Err(Error::Config(format!(
            "at least 2 particles are required, got {num_particles}"
        )));
    }
    if reference.num_leaves() != ctx.num_leaves() {
        return Err(Error::Domain(
            "reference structure does not match the data".into(),
        ));
    }
    let base: u64 = rng.random();
    let steps = ctx.times().len();
    let ref_events = reference.events();
    let mut particles = vec![ctx.initial(); num_particles];
    let mut stats = CsmcStats::default();
    let mut probs = Vec::with_capacity(num_particles);
    for step in 0..steps {
        let results: Vec<Result<(f64, usize)>> = particles
            .par_iter_mut()
            .enumerate()
            .map(|(m, p)| {
                let forced = (m == 0).then(|| ref_events[step]);
                let (log_w, scored) = ctx.advance(p, forced, stream_uniform(base, m, step))?;
                p.log_weight = match mode {
                    CsmcMode::Sis => p.log_weight + log_w,
                    CsmcMode::Smc => log_w,
                };
                Ok((log_w, scored))
            })
            .collect();
        for r in results {
            stats.pair_evaluations += r?.1 as u64;
        }
        if mode == CsmcMode::Smc && step + 1 < steps {
            let log_w: Vec<f64> = particles.iter().map(|p| p.log_weight).collect();
            normalize_log_weights(&log_w, &mut probs);
            let ancestors: Vec<usize> = (1..num_particles)
                .map(|_| pick_index(&probs, rng.random()))
                .collect();
            let mut next = Vec::with_capacity(num_particles);
            next.push(particles[0].clone());
            next.extend(ancestors.into_iter().map(|a| particles[a].clone()));
            particles = next;
            stats.resampling_steps += 1;
        }
    }
    let log_weights: Vec<f64> = particles.iter().map(|p| p.log_weight).collect();
    let mut weights = Vec::new();
    normalize_log_weights(&log_weights, &mut weights);
    Ok(ParticleSet {
        particles,
        log_weights,
        weights,
        mode,
        stats,
    })
}

/// Draws one complete structure with probability equal to its weight.
pub fn select_structure<R: Rng + ?Sized>(set: &ParticleSet, rng: &mut R) -> Result<Structure> {
    let m = pick_index(&set.weights, rng.random());
    set.structure(m)
}

/// Log of the mean unnormalized particle weight: an estimate of `log p(X | T)`
/// up to the leaf normalizers (SIS mode only).
pub fn log_marginal_estimate(set: &ParticleSet) -> f64 {
    log_sum_exp(&set.log_weights) - (set.len() as f64).ln()
}
