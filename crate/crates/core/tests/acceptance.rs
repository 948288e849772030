//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero
//! if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use pgs_coalescent::belief::{log_likelihood, BeliefTree};
use pgs_coalescent::csmc::{csmc_run, CsmcMode};
use pgs_coalescent::genealogy::{simulate_prior, Alignment, Genealogy, Structure};
use pgs_coalescent::mutation::MutationModel;
use pgs_coalescent::numeric::pair_count;
use pgs_coalescent::oracle::{
    brute_force_likelihood, ks_p_value, ks_statistic, n3_height_cdf, quadrature_likelihood,
    random_instance, structure_posterior, structure_posterior_given_times, time_conditional_cdf,
};
use pgs_coalescent::pgs::{pgs_run, relative_likelihood_surface, theta_grid, PgsConfig};
use pgs_coalescent::timegibbs::{conditional_bounds, gibbs_sweep, sample_time, GridSettings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn relative_gap(log_a: f64, log_b: f64) -> f64 {
    ((log_a - log_b).exp() - 1.0).abs()
}

fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Largest normalization error seen by any criterion that builds message stores.
static MAX_NORM_ERROR: std::sync::Mutex<(f64, usize)> = std::sync::Mutex::new((0.0, 0));

fn record_normalization(tree: &BeliefTree<'_>) {
    let e = tree.max_normalization_error();
    let mut m = MAX_NORM_ERROR.lock().unwrap();
    m.0 = m.0.max(e);
    m.1 += 1;
}

fn bp_vs_brute_force() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let inst = random_instance(&mut rng).unwrap();
        let tree = BeliefTree::new(
            inst.genealogy.clone(),
            &inst.alignment,
            &inst.model,
            inst.theta,
        )
        .unwrap();
        record_normalization(&tree);
        let bp = tree.log_likelihood().unwrap();
        let bf = brute_force_likelihood(&inst.genealogy, &inst.alignment, &inst.model, inst.theta)
            .unwrap();
        worst = worst.max(relative_gap(bp, bf.ln()));
    }
    outcome(
        worst <= 1e-10,
        format!("max relative error {worst:.2e} over 100 instances (tol 1e-10)"),
    )
}

fn node_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let inst = random_instance(&mut rng).unwrap();
        let tree = BeliefTree::new(
            inst.genealogy.clone(),
            &inst.alignment,
            &inst.model,
            inst.theta,
        )
        .unwrap();
        record_normalization(&tree);
        let root = tree.log_likelihood().unwrap();
        let g = tree.genealogy();
        for v in g.num_leaves()..g.num_nodes() {
            worst = worst.max(relative_gap(tree.log_likelihood_at(v).unwrap(), root));
        }
    }
    outcome(
        worst <= 1e-8,
        format!("max relative deviation {worst:.2e} over 100 instances (tol 1e-8)"),
    )
}

fn n4_tree() -> (Genealogy, Alignment, MutationModel, f64) {
    let s = Structure::new(4, vec![[0, 1], [2, 3], [4, 5]]).unwrap();
    let g = Genealogy::new(s, vec![-0.2, -0.55, -1.3]).unwrap();
    let a = Alignment::from_rows(&[vec![0, 1, 0], vec![0, 1, 1], vec![1, 0, 0], vec![1, 1, 0]])
        .unwrap();
    (g, a, MutationModel::binary(), 1.5)
}

fn time_conditional_ks() -> Outcome {
    let (g, a, model, theta) = n4_tree();
    let draws = 100_000;
    let mut details = Vec::new();
    let mut ok = true;
    // event 1 is internal with a parent; event 2 is the root
    for (event, seed) in [(1usize, 41u64), (2, 42)] {
        let mut tree = BeliefTree::new(g.clone(), &a, &model, theta).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sample = Vec::with_capacity(draws);
        for _ in 0..draws {
            sample_time(&mut tree, event, GridSettings::default(), &mut rng).unwrap();
            sample.push(tree.genealogy().time(event));
        }
        record_normalization(&tree);
        let cdf = time_conditional_cdf(&g, &a, &model, theta, event, 20_001).unwrap();
        let d = ks_statistic(&sample, |x| cdf.eval(x));
        let p = ks_p_value(d, draws);
        ok &= p > 0.01;
        let (lo, hi) = conditional_bounds(&g, event).unwrap();
        details.push(format!("event {event} on ({lo}, {hi}): D={d:.4} p={p:.3}"));
    }
    outcome(ok, format!("{} (need p > 0.01)", details.join("; ")))
}

/// Standard error of a mean from `batches` batch means.
fn batch_se(xs: &[f64], batches: usize) -> f64 {
    let size = xs.len() / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| xs[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let m = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (var / batches as f64).sqrt()
}

fn prior_reduction() -> Outcome {
    let n = 6;
    let sweeps = 10_000;
    let model = MutationModel::binary();
    let empty = Alignment::without_data(n);
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let start = simulate_prior(n, &mut rng).unwrap();
    let mut tree = BeliefTree::new(start, &empty, &model, 1.0).unwrap();
    let mut waits = vec![Vec::with_capacity(sweeps); n - 1];
    for _ in 0..sweeps {
        gibbs_sweep(&mut tree, 1, GridSettings::default(), &mut rng).unwrap();
        for (i, w) in waits.iter_mut().enumerate() {
            w.push(tree.genealogy().waiting_time(i));
        }
    }
    record_normalization(&tree);
    let mut direct = vec![Vec::with_capacity(sweeps); n - 1];
    for _ in 0..sweeps {
        let g = simulate_prior(n, &mut rng).unwrap();
        for (i, w) in direct.iter_mut().enumerate() {
            w.push(g.waiting_time(i));
        }
    }
    let mut worst_gibbs = 0.0f64;
    let mut worst_direct = 0.0f64;
    for i in 0..n - 1 {
        let expect = 1.0 / pair_count(n - i);
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        // successive sweeps are correlated; batch means absorb it
        let z_gibbs = (mean(&waits[i]) - expect).abs() / batch_se(&waits[i], 50);
        let sd = (waits[i].len() as f64).sqrt();
        let d = &direct[i];
        let var = d.iter().map(|x| (x - mean(d)).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
        let z_direct = (mean(d) - expect).abs() / (var.sqrt() / sd);
        worst_gibbs = worst_gibbs.max(z_gibbs);
        worst_direct = worst_direct.max(z_direct);
    }
    outcome(
        worst_gibbs < 3.0 && worst_direct < 3.0,
        format!("max |z| over 5 waiting times: gibbs {worst_gibbs:.2}, simulate_prior {worst_direct:.2} (need < 3)"),
    )
}

fn n3_data() -> Alignment {
    Alignment::from_rows(&[vec![0], vec![0], vec![1]]).unwrap()
}

fn csmc_posterior() -> Outcome {
    let model = MutationModel::binary();
    let a = n3_data();
    let theta = 1.0;
    let times = vec![-0.4, -1.2];
    let exact = structure_posterior_given_times(&times, &a, &model, theta).unwrap();
    // start from a structure the data disfavour
    let reference = Genealogy::new(
        Structure::new(3, vec![[0, 2], [1, 3]]).unwrap(),
        times.clone(),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let runs = 200;
    let mut freq = vec![0.0; exact.structures.len()];
    for _ in 0..runs {
        let set = csmc_run(&reference, &a, &model, theta, 1000, CsmcMode::Smc, &mut rng).unwrap();
        for (m, w) in set.weights.iter().enumerate() {
            let s = set.structure(m).unwrap();
            let idx = exact.structures.iter().position(|x| *x == s).unwrap();
            freq[idx] += w / runs as f64;
        }
    }
    let tv = total_variation(&freq, &exact.values);
    outcome(
        tv < 0.02,
        format!(
            "TV {tv:.4} (tol 0.02); estimated {freq:.4?} vs exact {:.4?}",
            exact.values
        ),
    )
}

fn pgs_posterior() -> Outcome {
    let model = MutationModel::binary();
    let a = n3_data();
    let theta = 2.0;
    let config = PgsConfig {
        iterations: 100_500,
        burn_in: 500,
        thinning: 5,
        particles: 20,
        gibbs_rounds: 5,
        csmc_mode: CsmcMode::Smc,
        grid_points: 256,
        checkpoint_interval: 0,
    };
    let state = pgs_run(&a, &model, theta, &config, 77).unwrap();
    let samples = &state.samples;
    let exact = structure_posterior(&a, &model, theta).unwrap();
    let mut freq = vec![0.0; exact.structures.len()];
    for g in samples {
        let idx = exact
            .structures
            .iter()
            .position(|s| s == g.structure())
            .unwrap();
        freq[idx] += 1.0 / samples.len() as f64;
    }
    let tv = total_variation(&freq, &exact.values);
    let cdf = n3_height_cdf(&a, &model, theta, 8001, 400).unwrap();
    let heights: Vec<f64> = samples.iter().map(|g| g.height()).collect();
    let d = ks_statistic(&heights, |h| cdf.eval(h));
    let p = ks_p_value(d, heights.len());
    outcome(
        tv < 0.02 && p > 0.01 && samples.len() == 20_000,
        format!(
            "{} samples; topology TV {tv:.4} (tol 0.02), {freq:.4?} vs {:.4?}; height KS D={d:.4} p={p:.3}",
            samples.len(),
            exact.values
        ),
    )
}

fn surface_oracle() -> Outcome {
    let model = MutationModel::binary();
    let a = Alignment::from_rows(&[vec![0], vec![0]]).unwrap();
    let theta0 = 1.0;
    let mut grid = theta_grid(0.2, 5.0, 9, true).unwrap();
    grid[4] = theta0;
    let config = PgsConfig {
        iterations: 10_100,
        burn_in: 100,
        thinning: 1,
        particles: 2,
        gibbs_rounds: 1,
        csmc_mode: CsmcMode::Smc,
        grid_points: 256,
        checkpoint_interval: 0,
    };
    let state = pgs_run(&a, &model, theta0, &config, 88).unwrap();
    let surface = relative_likelihood_surface(&state.samples, &a, &model, &grid, theta0).unwrap();
    let l0 = quadrature_likelihood(&a, &model, theta0).unwrap();
    let mut worst = 0.0f64;
    for (theta, est) in grid.iter().zip(&surface.log_relative_likelihood) {
        let exact = quadrature_likelihood(&a, &model, *theta).unwrap() / l0;
        worst = worst.max((est.exp() / exact - 1.0).abs());
    }
    outcome(
        worst < 0.05 && state.samples.len() == 10_000,
        format!(
            "max relative error {worst:.4} over 9 grid points with {} samples (tol 0.05)",
            state.samples.len()
        ),
    )
}

fn microsat_experiment() -> Outcome {
    let a =
        Alignment::from_path(repo_root().join("data/microsat_one_locus.txt"), Some(20)).unwrap();
    let model = MutationModel::stepwise(20).unwrap();
    let theta0 = 5.0;
    let mut grid = theta_grid(1.0, 25.0, 21, true).unwrap();
    grid[10] = theta0;
    let config = PgsConfig {
        iterations: 1000,
        burn_in: 400,
        thinning: 1,
        particles: 40,
        gibbs_rounds: 10,
        csmc_mode: CsmcMode::Smc,
        grid_points: 256,
        checkpoint_interval: 0,
    };
    let results: Vec<(usize, bool)> = (1u64..=5)
        .into_par_iter()
        .map(|seed| {
            let state = pgs_run(&a, &model, theta0, &config, seed).unwrap();
            let s = relative_likelihood_surface(&state.samples, &a, &model, &grid, theta0).unwrap();
            (s.argmax(), s.is_unimodal())
        })
        .collect();
    let argmaxes: Vec<f64> = results.iter().map(|r| grid[r.0]).collect();
    let same = results.iter().all(|r| r.0 == results[0].0);
    let unimodal = results.iter().all(|r| r.1);
    outcome(
        same && unimodal,
        format!("argmax theta per seed {argmaxes:.3?}; all unimodal: {unimodal}"),
    )
}

fn transition_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let models = [
        MutationModel::binary(),
        MutationModel::stepwise(5).unwrap(),
        MutationModel::stepwise(20).unwrap(),
    ];
    let (mut semi, mut stat) = (0.0f64, 0.0f64);
    for i in 0..1000 {
        let model = &models[i % models.len()];
        let k = model.num_states();
        let theta = rng.random_range(0.01..10.0);
        let (a, b) = (rng.random_range(0.0..3.0), rng.random_range(0.0..3.0));
        let tab = model.transition_matrix(theta, a + b).unwrap();
        let ta = model.transition_matrix(theta, a).unwrap();
        let tb = model.transition_matrix(theta, b).unwrap();
        let p0 = model.equilibrium();
        for r in 0..k {
            for c in 0..k {
                let prod: f64 = (0..k).map(|m| ta.get(r, m) * tb.get(m, c)).sum();
                semi = semi.max((prod - tab.get(r, c)).abs());
            }
        }
        for c in 0..k {
            let v: f64 = (0..k).map(|r| p0[r] * tab.get(r, c)).sum();
            stat = stat.max((v - p0[c]).abs());
        }
    }
    let binary = MutationModel::binary();
    let far = binary.transition_matrix(1.0, 1e3).unwrap();
    let conv = (0..2)
        .flat_map(|r| (0..2).map(move |c| (r, c)))
        .map(|(r, c)| (far.get(r, c) - binary.equilibrium()[c]).abs())
        .fold(0.0, f64::max);
    outcome(
        semi < 1e-8 && stat < 1e-9 && conv < 1e-6,
        format!(
            "semigroup {semi:.1e} (1e-8), equilibrium {stat:.1e} (1e-9), dt=1e3 {conv:.1e} (1e-6)"
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    let input = repo_root().join("data/microsat_one_locus.txt");
    std::fs::write(
        &config,
        format!(
            r#"{{"model":"stepwise","num_states":20,"theta0":5.0,"iterations":60,"burn_in":20,"particles":12,"gibbs_rounds":3,"seed":9,"input":{}}}"#,
            serde_json::to_string(&input).unwrap()
        ),
    )
    .unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_pgsc"))
            .arg("surface")
            .arg("--config")
            .arg(&config)
            .arg("--output")
            .arg(&out)
            .status()
            .unwrap();
        (status.success(), std::fs::read(&out).unwrap_or_default())
    };
    let (ok1, a) = run("a.csv");
    let (ok2, b) = run("b.csv");
    let header = a.starts_with(b"theta,log_rel_likelihood,stderr\n");
    outcome(
        ok1 && ok2 && header && !a.is_empty() && a == b,
        format!(
            "two runs exit ok: {}, {} bytes, identical: {}",
            ok1 && ok2,
            a.len(),
            a == b
        ),
    )
}

fn incremental_refresh() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1212);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.random_range(2..=5);
        let model = MutationModel::stepwise(k).unwrap();
        let g = simulate_prior(6, &mut rng).unwrap();
        let loci = rng.random_range(1..=3);
        let data = (0..6 * loci).map(|_| rng.random_range(0..k)).collect();
        let a = Alignment::new(6, loci, data).unwrap();
        let theta = rng.random_range(0.1..10.0);
        let mut tree = BeliefTree::new(g.clone(), &a, &model, theta).unwrap();
        let event = rng.random_range(0..g.num_events());
        let (lo, hi) = conditional_bounds(&g, event).unwrap();
        let lo = if lo.is_finite() { lo } else { hi - 3.0 };
        tree.set_time(event, lo + rng.random_range(0.01..0.99) * (hi - lo))
            .unwrap();
        record_normalization(&tree);
        let fresh = BeliefTree::new(tree.genealogy().clone(), &a, &model, theta).unwrap();
        let rel = |x: f64, y: f64| {
            if x == y {
                0.0
            } else {
                (x - y).abs() / x.abs().max(y.abs())
            }
        };
        for v in 0..g.root() {
            let pairs = [
                (tree.store().up(v), fresh.store().up(v)),
                (tree.store().down(v), fresh.store().down(v)),
                (
                    tree.store().up_log_normalizers(v),
                    fresh.store().up_log_normalizers(v),
                ),
                (
                    tree.store().down_log_normalizers(v),
                    fresh.store().down_log_normalizers(v),
                ),
            ];
            for (x, y) in pairs {
                for (p, q) in x.iter().zip(y) {
                    worst = worst.max(rel(*p, *q));
                }
            }
        }
        worst = worst.max(rel(
            tree.log_likelihood().unwrap(),
            log_likelihood(tree.genealogy(), &a, &model, theta, None).unwrap(),
        ));
    }
    outcome(
        worst <= 1e-13,
        format!("max relative difference {worst:.1e} over 100 perturbations (tol 1e-13)"),
    )
}

fn message_normalization() -> Outcome {
    let (worst, trees) = *MAX_NORM_ERROR.lock().unwrap();
    // every computed message also passes a debug assertion at 1e-10 in test builds
    outcome(
        worst <= 1e-10 && trees > 0,
        format!("max error {worst:.1e} over every message of {trees} stores (tol 1e-10); per-message assertion active: {}", cfg!(debug_assertions)),
    )
}

fn main() {
    type Criterion = (usize, &'static str, fn() -> Outcome, Duration);
    let criteria: Vec<Criterion> = vec![
        (
            1,
            "belief propagation matches brute force",
            bp_vs_brute_force,
            Duration::from_secs(10),
        ),
        (
            2,
            "likelihood invariant across nodes",
            node_invariance,
            Duration::from_secs(10),
        ),
        (
            4,
            "time conditional sampler KS",
            time_conditional_ks,
            Duration::from_secs(60),
        ),
        (
            5,
            "prior reduction with empty data",
            prior_reduction,
            Duration::from_secs(30),
        ),
        (
            6,
            "conditional SMC posterior",
            csmc_posterior,
            Duration::from_secs(60),
        ),
        (
            7,
            "full particle Gibbs posterior",
            pgs_posterior,
            Duration::from_secs(600),
        ),
        (
            8,
            "surface matches quadrature",
            surface_oracle,
            Duration::from_secs(120),
        ),
        (
            9,
            "microsatellite surface stable across seeds",
            microsat_experiment,
            Duration::from_secs(1800),
        ),
        (
            10,
            "transition matrix semigroup and stationarity",
            transition_properties,
            Duration::from_secs(5),
        ),
        (
            11,
            "surface CSV determinism",
            determinism,
            Duration::from_secs(600),
        ),
        (
            12,
            "incremental refresh equals recomputation",
            incremental_refresh,
            Duration::from_secs(10),
        ),
        (
            3,
            "message normalization",
            message_normalization,
            Duration::from_secs(1),
        ),
    ];
    let mut failures = 0;
    let mut lines = Vec::new();
    for (id, name, run, budget) in criteria {
        let started = Instant::now();
        let result = std::panic::catch_unwind(run);
        let elapsed = started.elapsed();
        let (passed, detail) = match result {
            Ok(o) => (o.passed && elapsed <= budget, o.detail),
            Err(_) => (false, "panicked".to_string()),
        };
        let line = format!(
            "criterion {id:>2} {}: {name}: {detail} [{:.1}s, budget {}s]",
            if passed { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
        println!("{line}");
        lines.push((id, line));
        if !passed {
            failures += 1;
        }
    }
    lines.sort_by_key(|l| l.0);
    println!("\nacceptance summary:");
    for (_, l) in &lines {
        println!("{l}");
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all 12 criteria passed");
}
