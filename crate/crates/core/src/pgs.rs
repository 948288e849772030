//! The particle Gibbs chain and the relative likelihood surface of `theta`.
//!
//! One iteration resamples all coalescent times given the structure, then
//! resamples the structure with conditional SMC at the new times. Samples
//! drawn at `theta0` are reweighted to other values of `theta` by averaging
//! per-sample likelihood ratios.

use std::path::Path;
use std::time::{Duration, Instant};

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief::{pruning_log_likelihood, BeliefTree};
use crate::csmc::{csmc_run, select_structure, CsmcMode};
use crate::error::{Error, Result};
use crate::genealogy::{simulate_prior, Alignment, Genealogy};
use crate::mutation::{MutationModel, TransitionCache};
use crate::numeric::log_sum_exp;
use crate::timegibbs::{gibbs_sweep, GridSettings};

/// Default number of batches for batch-means standard errors.
pub const SURFACE_BATCHES: usize = 20;

/// Chain hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgsConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub particles: usize,
    pub gibbs_rounds: usize,
    pub csmc_mode: CsmcMode,
    pub grid_points: usize,
    /// Save a checkpoint every this many iterations (0 disables).
    pub checkpoint_interval: usize,
}

impl Default for PgsConfig {
    fn default() -> Self {
        PgsConfig {
            iterations: 2000,
            burn_in: 800,
            thinning: 1,
            particles: 200,
            gibbs_rounds: 50,
            csmc_mode: CsmcMode::Smc,
            grid_points: 256,
            checkpoint_interval: 0,
        }
    }
}

impl PgsConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.iterations == 0 {
            return fail("iterations must be at least 1");
        }
        if self.burn_in >= self.iterations {
            return fail("burn_in must be smaller than iterations");
        }
        if self.thinning == 0 {
            return fail("thinning must be at least 1");
        }
        if self.particles < 2 {
            return fail("particles must be at least 2");
        }
        if self.gibbs_rounds == 0 {
            return fail("gibbs_rounds must be at least 1");
        }
        if self.grid_points < 2 {
            return fail("grid_points must be at least 2");
        }
        Ok(())
    }

    /// Number of samples a full run retains.
    pub fn retained(&self) -> usize {
        (self.iterations - self.burn_in) / self.thinning
    }

    fn grid(&self) -> GridSettings {
        GridSettings {
            points: self.grid_points,
            max_points: self.grid_points.max(2048),
        }
    }
}

/// Counters collected along the chain. Wall times are not persisted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iterations: u64,
    pub structure_changes: u64,
    pub pair_evaluations: u64,
    pub resampling_steps: u64,
    pub time_updates: u64,
    pub time_skips: u64,
    pub density_evaluations: u64,
    #[serde(skip)]
    pub gibbs_time: Duration,
    #[serde(skip)]
    pub csmc_time: Duration,
}

/// Summary derived from [`Diagnostics`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub iterations: u64,
    pub retained_samples: usize,
    pub structure_change_rate: f64,
    pub pair_evaluations_per_iteration: f64,
    /// `M * C(n+1, 3)`: pairs scored per iteration with no reuse across steps.
    pub predicted_pair_evaluations_per_iteration: f64,
    pub time_updates_per_iteration: f64,
    pub skipped_time_updates: u64,
    pub density_evaluations_per_update: f64,
    pub mean_tree_height: Option<f64>,
    pub gibbs_seconds: f64,
    pub csmc_seconds: f64,
}

/// Resumable chain state: what a checkpoint stores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PgsState {
    pub iteration: usize,
    pub genealogy: Genealogy,
    pub rng: ChaCha8Rng,
    pub diagnostics: Diagnostics,
    pub samples: Vec<Genealogy>,
}

impl PgsState {
    /// Random start drawn from the prior.
    pub fn initial(n: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let genealogy = simulate_prior(n, &mut rng)?;
        Ok(PgsState {
            iteration: 0,
            genealogy,
            rng,
            diagnostics: Diagnostics::default(),
            samples: Vec::new(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn report(&self, particles: usize) -> DiagnosticsReport {
        let d = &self.diagnostics;
        let iters = d.iterations.max(1) as f64;
        let n = self.genealogy.num_leaves() as f64;
        let heights: Vec<f64> = self.samples.iter().map(|g| g.height()).collect();
        DiagnosticsReport {
            iterations: d.iterations,
            retained_samples: self.samples.len(),
            structure_change_rate: if d.iterations == 0 {
                0.0
            } else {
                d.structure_changes as f64 / iters
            },
            pair_evaluations_per_iteration: if d.iterations == 0 {
                0.0
            } else {
                d.pair_evaluations as f64 / iters
            },
            predicted_pair_evaluations_per_iteration: particles as f64 * (n + 1.0) * n * (n - 1.0)
                / 6.0,
            time_updates_per_iteration: if d.iterations == 0 {
                0.0
            } else {
                d.time_updates as f64 / iters
            },
            skipped_time_updates: d.time_skips,
            density_evaluations_per_update: if d.time_updates == 0 {
                0.0
            } else {
                d.density_evaluations as f64 / d.time_updates as f64
            },
            mean_tree_height: (!heights.is_empty())
                .then(|| heights.iter().sum::<f64>() / heights.len() as f64),
            gibbs_seconds: d.gibbs_time.as_secs_f64(),
            csmc_seconds: d.csmc_time.as_secs_f64(),
        }
    }
}

/// A particle Gibbs chain over genealogies at fixed `theta0`.
pub struct PgsSampler<'a> {
    alignment: &'a Alignment,
    model: &'a MutationModel,
    theta0: f64,
    config: PgsConfig,
}

impl<'a> PgsSampler<'a> {
    pub fn new(
        alignment: &'a Alignment,
        model: &'a MutationModel,
        theta0: f64,
        config: PgsConfig,
    ) -> Result<Self> {
        config.validate()?;
        if !(theta0 > 0.0 && theta0.is_finite()) {
            return Err(Error::Config(format!(
                "theta0 must be positive, got {theta0}"
            )));
        }
        alignment.check_states(model.num_states())?;
        Ok(PgsSampler {
            alignment,
            model,
            theta0,
            config,
        })
    }

    pub fn config(&self) -> &PgsConfig {
        &self.config
    }

    pub fn initial_state(&self, seed: u64) -> Result<PgsState> {
        PgsState::initial(self.alignment.num_individuals(), seed)
    }

    /// One iteration: time sweep, conditional SMC, structure draw.
    pub fn step(&self, state: &mut PgsState) -> Result<()> {
        let started = Instant::now();
        let mut tree = BeliefTree::new(
            state.genealogy.clone(),
            self.alignment,
            self.model,
            self.theta0,
        )?;
        let sweep = gibbs_sweep(
            &mut tree,
            self.config.gibbs_rounds,
            self.config.grid(),
            &mut state.rng,
        )?;
        let genealogy = tree.into_genealogy();
        let mid = Instant::now();
        let set = csmc_run(
            &genealogy,
            self.alignment,
            self.model,
            self.theta0,
            self.config.particles,
            self.config.csmc_mode,
            &mut state.rng,
        )?;
        let structure = select_structure(&set, &mut state.rng)?;
        let d = &mut state.diagnostics;
        d.gibbs_time += mid - started;
        d.csmc_time += mid.elapsed();
        d.iterations += 1;
        d.time_updates += sweep.updates;
        d.time_skips += sweep.skipped;
        d.density_evaluations += sweep.density_evaluations;
        d.pair_evaluations += set.stats.pair_evaluations;
        d.resampling_steps += set.stats.resampling_steps;
        if &structure != genealogy.structure() {
            d.structure_changes += 1;
        }
        state.genealogy = genealogy.with_structure(structure)?;
        state.iteration += 1;
        let k = state.iteration;
        if k > self.config.burn_in && (k - self.config.burn_in).is_multiple_of(self.config.thinning)
        {
            state.samples.push(state.genealogy.clone());
        }
        Ok(())
    }

    /// Advances `state` to the configured iteration count, checkpointing if asked.
    pub fn run(&self, state: &mut PgsState, checkpoint: Option<&Path>) -> Result<()> {
        while state.iteration < self.config.iterations {
            self.step(state)?;
            if state.iteration.is_multiple_of(100) {
                debug!(
                    "iteration {} height {:.4} structure changes {}",
                    state.iteration,
                    state.genealogy.height(),
                    state.diagnostics.structure_changes
                );
            }
            if let Some(path) = checkpoint {
                let c = self.config.checkpoint_interval;
                if c > 0 && state.iteration.is_multiple_of(c) {
                    state.save(path)?;
                    info!("checkpoint at iteration {}", state.iteration);
                }
            }
        }
        Ok(())
    }
}

/// Runs a fresh chain from `seed` and returns its final state.
pub fn pgs_run(
    alignment: &Alignment,
    model: &MutationModel,
    theta0: f64,
    config: &PgsConfig,
    seed: u64,
) -> Result<PgsState> {
    let sampler = PgsSampler::new(alignment, model, theta0, config.clone())?;
    let mut state = sampler.initial_state(seed)?;
    sampler.run(&mut state, None)?;
    Ok(state)
}

/// `log L(theta) / L(theta0)` over a grid with batch-means standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceEstimate {
    pub theta0: f64,
    pub theta_grid: Vec<f64>,
    pub log_relative_likelihood: Vec<f64>,
    pub stderr: Vec<f64>,
    pub num_samples: usize,
}

impl SurfaceEstimate {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("theta,log_rel_likelihood,stderr\n");
        for ((t, v), s) in self
            .theta_grid
            .iter()
            .zip(&self.log_relative_likelihood)
            .zip(&self.stderr)
        {
            out.push_str(&format!("{t},{v},{s}\n"));
        }
        out
    }

    /// Index of the largest estimate.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.log_relative_likelihood.iter().enumerate() {
            if *v > self.log_relative_likelihood[best] {
                best = i;
            }
        }
        best
    }

    /// True when the values rise to the maximum and fall after it.
    pub fn is_unimodal(&self) -> bool {
        let v = &self.log_relative_likelihood;
        let m = self.argmax();
        v[..=m].windows(2).all(|w| w[0] <= w[1]) && v[m..].windows(2).all(|w| w[0] >= w[1])
    }
}

/// Grid of `count` points between `min` and `max`, log- or linearly spaced.
pub fn theta_grid(min: f64, max: f64, count: usize, log_spaced: bool) -> Result<Vec<f64>> {
    if !(min > 0.0 && max >= min && max.is_finite()) || count == 0 || (count == 1 && min != max) {
        return Err(Error::Config(format!(
            "invalid theta grid [{min}, {max}] x {count}"
        )));
    }
    if count == 1 {
        return Ok(vec![min]);
    }
    let step = |j: usize| j as f64 / (count - 1) as f64;
    Ok((0..count)
        .map(|j| match j {
            0 => min,
            j if j == count - 1 => max,
            j if log_spaced => (min.ln() + step(j) * (max / min).ln()).exp(),
            j => min + step(j) * (max - min),
        })
        .collect())
}

/// Estimates the relative likelihood surface from samples drawn at `theta0`.
pub fn relative_likelihood_surface(
    samples: &[Genealogy],
    alignment: &Alignment,
    model: &MutationModel,
    theta_grid: &[f64],
    theta0: f64,
) -> Result<SurfaceEstimate> {
    surface_with_batches(
        samples,
        alignment,
        model,
        theta_grid,
        theta0,
        SURFACE_BATCHES,
    )
}

pub fn surface_with_batches(
    samples: &[Genealogy],
    alignment: &Alignment,
    model: &MutationModel,
    theta_grid: &[f64],
    theta0: f64,
    batches: usize,
) -> Result<SurfaceEstimate> {
    if samples.is_empty() {
        return Err(Error::Estimation("no samples to reweight".into()));
    }
    if theta_grid.iter().any(|t| !(*t > 0.0 && t.is_finite())) || !(theta0 > 0.0) {
        return Err(Error::Config("theta values must be positive".into()));
    }
    let per_sample = |theta: f64| -> Result<Vec<f64>> {
        let mut cache = TransitionCache::with_capacity(4096);
        samples
            .iter()
            .map(|g| pruning_log_likelihood(g, alignment, model, theta, &mut cache))
            .collect()
    };
    let base = per_sample(theta0)?;
    let m = samples.len();
    let rows: Vec<Result<(f64, f64)>> = theta_grid
        .par_iter()
        .map(|&theta| {
            if theta == theta0 {
                let se = if m.min(batches) >= 2 {
                    0.0
                } else {
                    f64::INFINITY
                };
                return Ok((0.0, se));
            }
            let ll = per_sample(theta)?;
            let d: Vec<f64> = ll.iter().zip(&base).map(|(a, b)| a - b).collect();
            let estimate = log_sum_exp(&d) - (m as f64).ln();
            Ok((estimate, batch_log_stderr(&d, batches)))
        })
        .collect();
    let (values, errors): (Vec<f64>, Vec<f64>) = rows
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    Ok(SurfaceEstimate {
        theta0,
        theta_grid: theta_grid.to_vec(),
        log_relative_likelihood: values,
        stderr: errors,
        num_samples: m,
    })
}

/// Standard error of `log mean(exp(d))` from batch means, by the delta method.
fn batch_log_stderr(d: &[f64], batches: usize) -> f64 {
    let b = batches.min(d.len());
    if b < 2 {
        return f64::INFINITY;
    }
    let shift = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return f64::INFINITY;
    }
    let size = d.len() / b;
    let means: Vec<f64> = (0..b)
        .map(|i| {
            let end = if i == b - 1 { d.len() } else { (i + 1) * size };
            let chunk = &d[i * size..end];
            chunk.iter().map(|x| (x - shift).exp()).sum::<f64>() / chunk.len() as f64
        })
        .collect();
    let mean = d.iter().map(|x| (x - shift).exp()).sum::<f64>() / d.len() as f64;
    let bm = means.iter().sum::<f64>() / b as f64;
    let var = means.iter().map(|x| (x - bm).powi(2)).sum::<f64>() / (b - 1) as f64;
    (var / b as f64).sqrt() / mean
}
