//! Command-line front end for the `pgsc` binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csmc::CsmcMode;
use crate::error::{Error, Result};
use crate::genealogy::{simulate_data, simulate_prior, Alignment, Genealogy};
use crate::mutation::MutationModel;
use crate::oracle::self_check;
use crate::pgs::{relative_likelihood_surface, theta_grid, PgsConfig, PgsSampler, PgsState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Binary,
    #[default]
    Stepwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    Linear,
    #[default]
    Log,
}

/// Either explicit values or an evenly spaced range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThetaGridSpec {
    List(Vec<f64>),
    Range {
        min: f64,
        max: f64,
        count: usize,
        #[serde(default)]
        spacing: Spacing,
    },
}

/// Run settings as read from a flat JSON file. Absent fields take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_states: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_grid: Option<ThetaGridSpec>,
    pub iterations: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub particles: usize,
    pub gibbs_rounds: usize,
    pub csmc_mode: CsmcMode,
    pub grid_points: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_interval: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PgsConfig::default();
        RunConfig {
            model: ModelKind::Stepwise,
            num_states: None,
            theta0: None,
            theta_grid: None,
            iterations: p.iterations,
            burn_in: p.burn_in,
            thinning: p.thinning,
            particles: p.particles,
            gibbs_rounds: p.gibbs_rounds,
            csmc_mode: p.csmc_mode,
            grid_points: p.grid_points,
            seed: 1,
            input: None,
            output: None,
            checkpoint: None,
            checkpoint_interval: 100,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn num_states(&self) -> usize {
        self.num_states.unwrap_or(match self.model {
            ModelKind::Binary => 2,
            ModelKind::Stepwise => 20,
        })
    }

    pub fn theta0(&self) -> f64 {
        self.theta0.unwrap_or(match self.model {
            ModelKind::Binary => 2.0,
            ModelKind::Stepwise => 5.0,
        })
    }

    pub fn mutation_model(&self) -> Result<MutationModel> {
        match self.model {
            ModelKind::Binary => {
                if self.num_states() != 2 {
                    return Err(Error::Config(
                        "the binary model has exactly 2 states".into(),
                    ));
                }
                Ok(MutationModel::binary())
            }
            ModelKind::Stepwise => {
                MutationModel::stepwise(self.num_states()).map_err(|e| Error::Config(e.to_string()))
            }
        }
    }

    /// Grid values; defaults to 21 log-spaced points in `[theta0/5, 5 theta0]`.
    /// Points within `1e-12` relative of `theta0` are snapped onto it.
    pub fn grid(&self) -> Result<Vec<f64>> {
        let t0 = self.theta0();
        let mut grid = match &self.theta_grid {
            None => theta_grid(t0 / 5.0, t0 * 5.0, 21, true)?,
            Some(ThetaGridSpec::List(v)) => v.clone(),
            Some(ThetaGridSpec::Range {
                min,
                max,
                count,
                spacing,
            }) => theta_grid(*min, *max, *count, *spacing == Spacing::Log)?,
        };
        if grid.is_empty() || grid.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::Config("theta grid values must be positive".into()));
        }
        for t in grid.iter_mut() {
            if ((*t - t0) / t0).abs() < 1e-12 {
                *t = t0;
            }
        }
        Ok(grid)
    }

    pub fn pgs_config(&self) -> PgsConfig {
        PgsConfig {
            iterations: self.iterations,
            burn_in: self.burn_in,
            thinning: self.thinning,
            particles: self.particles,
            gibbs_rounds: self.gibbs_rounds,
            csmc_mode: self.csmc_mode,
            grid_points: self.grid_points,
            checkpoint_interval: self.checkpoint_interval,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pgs_config().validate()?;
        let t0 = self.theta0();
        if !(t0 > 0.0 && t0.is_finite()) {
            return Err(Error::Config(format!("theta0 must be positive, got {t0}")));
        }
        self.mutation_model()?;
        self.grid()?;
        Ok(())
    }

    /// Seed of an independent stream for `tag`: the master seed xor a hash of the tag.
    pub fn stream_seed(&self, tag: &str) -> u64 {
        stream_seed(self.seed, tag)
    }
}

/// `seed ^ fnv1a(tag)`, then one mixing round.
pub fn stream_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = (seed ^ h).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Parser)]
#[command(
    name = "pgsc",
    version,
    about = "Particle Gibbs sampling for Kingman's coalescent"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a genealogy from the prior and data along it.
    Simulate(SimulateArgs),
    /// Run the particle Gibbs chain and write retained genealogies as JSON.
    Infer(RunArgs),
    /// Run the chain and write the relative likelihood surface as CSV.
    Surface(RunArgs),
    /// Check belief propagation against brute-force references.
    OracleCheck {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// Print a diagnostics report from a checkpoint.
    Diagnostics {
        checkpoint: PathBuf,
        /// Particle count the chain used, for the complexity prediction.
        #[arg(long, default_value_t = 200)]
        particles: usize,
    },
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub individuals: usize,
    #[arg(long)]
    pub loci: usize,
    #[arg(long, value_enum, default_value_t = ModelKind::Binary)]
    pub model: ModelKind,
    #[arg(long)]
    pub num_states: Option<usize>,
    #[arg(long)]
    pub theta: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output prefix: writes `<prefix>.txt` and `<prefix>.genealogy.json`.
    #[arg(long)]
    pub output: PathBuf,
}

/// Flags shared by `infer` and `surface`; each overrides the config file.
#[derive(Debug, Args, Default)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub num_states: Option<usize>,
    #[arg(long)]
    pub theta0: Option<f64>,
    /// Comma-separated explicit grid.
    #[arg(long, value_delimiter = ',')]
    pub theta_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub thinning: Option<usize>,
    #[arg(long)]
    pub particles: Option<usize>,
    #[arg(long)]
    pub gibbs_rounds: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    pub csmc_mode: Option<CsmcMode>,
    #[arg(long)]
    pub grid_points: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    /// Continue from a saved checkpoint instead of a fresh start.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<CsmcMode, String> {
    match s {
        "sis" => Ok(CsmcMode::Sis),
        "smc" => Ok(CsmcMode::Smc),
        _ => Err(format!("unknown csmc mode '{s}' (expected sis or smc)")),
    }
}

impl RunArgs {
    /// Loads the config file, if any, and applies flag overrides.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_path(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = &self.$field {
                    c.$field = v.clone();
                }
            };
            (opt $field:ident) => {
                if let Some(v) = &self.$field {
                    c.$field = Some(v.clone());
                }
            };
        }
        set!(opt input);
        set!(opt output);
        set!(model);
        set!(opt num_states);
        set!(opt theta0);
        set!(iterations);
        set!(burn_in);
        set!(thinning);
        set!(particles);
        set!(gibbs_rounds);
        set!(csmc_mode);
        set!(grid_points);
        set!(seed);
        set!(opt checkpoint);
        set!(checkpoint_interval);
        if let Some(v) = &self.theta_grid {
            c.theta_grid = Some(ThetaGridSpec::List(v.clone()));
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Serialize)]
struct InferOutput<'a> {
    theta0: f64,
    model: ModelKind,
    num_states: usize,
    samples: &'a [Genealogy],
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn run_chain(
    config: &RunConfig,
    resume: Option<&Path>,
) -> Result<(Alignment, MutationModel, PgsState)> {
    let model = config.mutation_model()?;
    let input = config
        .input
        .as_ref()
        .ok_or_else(|| Error::Config("no input alignment given".into()))?;
    let alignment = Alignment::from_path(input, Some(model.num_states()))?;
    if alignment.num_loci() == 0 {
        return Err(Error::Data("alignment has no loci".into()));
    }
    let sampler = PgsSampler::new(&alignment, &model, config.theta0(), config.pgs_config())?;
    let mut state = match resume {
        Some(p) => {
            let s = PgsState::load(p)?;
            if s.genealogy.num_leaves() != alignment.num_individuals() {
                return Err(Error::Data(
                    "checkpoint does not match the alignment".into(),
                ));
            }
            s
        }
        None => sampler.initial_state(config.stream_seed("chain"))?,
    };
    sampler.run(&mut state, config.checkpoint.as_deref())?;
    if let Some(p) = &config.checkpoint {
        state.save(p)?;
    }
    let report = state.report(config.particles);
    info!(
        "{} iterations, {} samples, structure change rate {:.3}, gibbs {:.2}s, csmc {:.2}s",
        report.iterations,
        report.retained_samples,
        report.structure_change_rate,
        report.gibbs_seconds,
        report.csmc_seconds
    );
    Ok((alignment, model, state))
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let config = RunConfig {
        model: args.model,
        num_states: args.num_states,
        ..RunConfig::default()
    };
    let model = config.mutation_model()?;
    if !(args.theta > 0.0) || args.loci == 0 {
        return Err(Error::Config(
            "simulate needs theta > 0 and at least one locus".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(args.seed, "simulate"));
    let g = simulate_prior(args.individuals, &mut rng)?;
    let a = simulate_data(&g, &model, args.theta, args.loci, &mut rng)?;
    let prefix = args.output.display().to_string();
    let header = format!(
        "# synthetic: {} individuals, {} loci, {:?} model with {} states, theta {}, seed {}\n",
        args.individuals,
        args.loci,
        args.model,
        model.num_states(),
        args.theta,
        args.seed
    )
    .to_lowercase();
    std::fs::write(format!("{prefix}.txt"), header + &a.to_text())?;
    std::fs::write(
        format!("{prefix}.genealogy.json"),
        serde_json::to_string(&g)? + "\n",
    )?;
    Ok(())
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => simulate(&args),
        Command::Infer(args) => {
            let config = args.resolve()?;
            let (_, _, state) = run_chain(&config, args.resume.as_deref())?;
            let out = InferOutput {
                theta0: config.theta0(),
                model: config.model,
                num_states: config.num_states(),
                samples: &state.samples,
            };
            write_output(
                config.output.as_deref(),
                &(serde_json::to_string(&out)? + "\n"),
            )
        }
        Command::Surface(args) => {
            let config = args.resolve()?;
            let grid = config.grid()?;
            let (alignment, model, state) = run_chain(&config, args.resume.as_deref())?;
            let surface = relative_likelihood_surface(
                &state.samples,
                &alignment,
                &model,
                &grid,
                config.theta0(),
            )?;
            write_output(config.output.as_deref(), &surface.to_csv())
        }
        Command::OracleCheck { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let results = self_check(&mut rng)?;
            let mut ok = true;
            for r in &results {
                println!(
                    "{} {}: {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.detail
                );
                ok &= r.passed;
            }
            if ok {
                Ok(())
            } else {
                Err(Error::InvariantViolation("oracle check failed".into()))
            }
        }
        Command::Diagnostics {
            checkpoint,
            particles,
        } => {
            let state = PgsState::load(&checkpoint)?;
            let report = state.report(particles);
            write_output(None, &(serde_json::to_string_pretty(&report)? + "\n"))
        }
    }
}

/// Parses arguments, runs, and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
