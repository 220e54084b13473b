use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use gcp_smd::bregman::{GeneratorSpec, Regularizer};
use gcp_smd::data::{Distribution, TraceFormat};
use gcp_smd::estimators::EstimatorKind;
use gcp_smd::losses::{LossKind, LossSpec};
use gcp_smd::metrics::LyapunovConfig;
use gcp_smd::solver::{
    BlockSelection, ExtrapolationCheck, Method, MomentumHistory, SolverConfig, StepsizeSchedule,
};

use crate::error::{usage, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "gcp-smd",
    version,
    about = "Generalized CP decomposition by inertial stochastic mirror descent"
)]
#[command(after_help = "Logging follows RUST_LOG (default: warn).")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a planted-model tensor and write it with its factors.
    #[command(args_override_self = true)]
    Synthesize(SynthesizeArgs),
    /// Fit a CP model to a .tns tensor.
    #[command(args_override_self = true)]
    Decompose(DecomposeArgs),
    /// Run a method x seed grid on one instance and summarize.
    #[command(args_override_self = true)]
    Compare(CompareArgs),
    /// Run the built-in oracle checks.
    #[command(args_override_self = true)]
    Verify(VerifyArgs),
}

/// Accepted everywhere; expanded before parsing.
#[derive(Debug, Args)]
pub struct ConfigArg {
    /// key = value file; command-line flags override its entries.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
}

/// Tensor dimensions written `20,15,20` or `20x15x20`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dims(pub Vec<usize>);

impl FromStr for Dims {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split([',', 'x'])
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| format!("bad dimension {p:?} in {s:?}"))
            })
            .collect::<Result<_, _>>()
            .map(Dims)
    }
}

fn parse_list<T: FromStr>(flag: &str, s: &str) -> CliResult<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| parse(flag, p.trim()))
        .collect()
}

#[derive(Debug, Args)]
pub struct InstanceArgs {
    /// Tensor dimensions, e.g. 20,15,20.
    #[arg(long)]
    pub shape: Option<Dims>,
    /// gamma, poisson, bernoulli-odds or gaussian:<sigma>.
    #[arg(long)]
    pub dist: Option<String>,
    /// Upper end of the uniform planted factor entries.
    #[arg(long)]
    pub a_max: Option<f64>,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// File name stem for everything written.
    #[arg(long)]
    pub prefix: Option<String>,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub instance: InstanceArgs,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    /// gaussian, gamma, poisson-identity, poisson-log, bernoulli-odds, bernoulli-logit.
    #[arg(long)]
    pub loss: Option<String>,
    /// squared-euclidean or negative-entropy.
    #[arg(long)]
    pub generator: Option<String>,
    /// One regularizer for all modes, or a comma-separated list per mode.
    #[arg(long)]
    pub regularizer: Option<String>,
    /// full, sgd, saga or sarah.
    #[arg(long)]
    pub estimator: Option<String>,
    /// itablesmd or smartcpd.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub rank: Option<usize>,
    /// Constant stepsize, or the initial one under the rule schedule.
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub c1: Option<f64>,
    #[arg(long)]
    pub c2: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fibers per stochastic gradient; defaults to 2R.
    #[arg(long)]
    pub batch: Option<usize>,
    /// SARAH restart parameter; defaults to ceil(J_n / B).
    #[arg(long)]
    pub sarah_p: Option<f64>,
    /// Iterations between objective evaluations; defaults to one epoch.
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub init_max: Option<f64>,
    /// per-block or global.
    #[arg(long)]
    pub momentum: Option<String>,
    /// uniform or cyclic.
    #[arg(long)]
    pub block_selection: Option<String>,
    /// Extrapolation check: off or backtrack.
    #[arg(long)]
    pub check: Option<String>,
    #[arg(long)]
    pub check_delta: Option<f64>,
    #[arg(long)]
    pub check_epsilon: Option<f64>,
    /// Stand-in for the lower curvature constant in the backtracking check.
    #[arg(long)]
    pub l_tilde: Option<f64>,
    /// Switches to the stepsize rule with this upper curvature estimate.
    #[arg(long)]
    pub l_bar: Option<f64>,
    #[arg(long)]
    pub m2: Option<f64>,
    #[arg(long)]
    pub gamma_bar: Option<f64>,
    #[arg(long)]
    pub rule_alpha: Option<f64>,
    #[arg(long)]
    pub rule_delta: Option<f64>,
    /// Record the estimator error against the exact block gradient.
    #[arg(long)]
    pub track_gamma: Option<bool>,
    /// Record the Lyapunov series (constant stepsize only).
    #[arg(long)]
    pub lyapunov: Option<bool>,
    /// Record wall time; off makes traces byte-identical across reruns.
    #[arg(long)]
    pub timing: Option<bool>,
    #[arg(long)]
    pub divergence_factor: Option<f64>,
}

fn parse<T: FromStr>(flag: &str, s: &str) -> CliResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| usage(format!("--{flag}: {e}")))
}

impl SolverArgs {
    /// Fully resolved configuration; `loss_default` applies when no --loss.
    pub fn resolve(&self, loss_default: Option<LossKind>) -> CliResult<SolverConfig> {
        let kind = match &self.loss {
            Some(s) => parse::<LossKind>("loss", s)?,
            None => loss_default.ok_or_else(|| usage("missing --loss"))?,
        };
        let rank = self.rank.ok_or_else(|| usage("missing --rank"))?;
        let mut cfg = SolverConfig::new(rank, LossSpec::new(kind));
        if let Some(g) = &self.generator {
            cfg.generator = GeneratorSpec::new(parse("generator", g)?);
        }
        if let Some(r) = &self.regularizer {
            cfg.regularizers = r
                .split(',')
                .map(|p| parse::<Regularizer>("regularizer", p.trim()))
                .collect::<CliResult<_>>()?;
        }
        if let Some(e) = &self.estimator {
            cfg.estimator = parse::<EstimatorKind>("estimator", e)?;
        }
        if let Some(m) = &self.method {
            cfg.method = parse::<Method>("method", m)?;
        }
        let eta = self.eta.unwrap_or(match cfg.stepsize {
            StepsizeSchedule::Constant { eta } => eta,
            StepsizeSchedule::Rule { eta0, .. } => eta0,
        });
        cfg.stepsize = match self.l_bar {
            None => StepsizeSchedule::Constant { eta },
            Some(l_bar) => StepsizeSchedule::Rule {
                eta0: eta,
                l_bar,
                m2: self.m2.unwrap_or(0.0),
                gamma_bar: self.gamma_bar.unwrap_or(1e-3),
                alpha: self.rule_alpha.unwrap_or(0.0),
                delta: self.rule_delta.unwrap_or(0.5),
            },
        };
        cfg.c1 = self.c1.unwrap_or(cfg.c1);
        cfg.c2 = self.c2.unwrap_or(cfg.c2);
        cfg.max_iters = self.iters.unwrap_or(cfg.max_iters);
        cfg.tol = self.tol.unwrap_or(cfg.tol);
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        cfg.batch = self.batch.unwrap_or(cfg.batch);
        cfg.sarah_p = self.sarah_p.or(cfg.sarah_p);
        cfg.eval_every = self.eval_every.or(cfg.eval_every);
        cfg.init_max = self.init_max.unwrap_or(cfg.init_max);
        if let Some(m) = &self.momentum {
            cfg.momentum = match m.as_str() {
                "per-block" => MomentumHistory::PerBlock,
                "global" => MomentumHistory::Global,
                _ => {
                    return Err(usage(format!(
                        "--momentum: expected per-block or global, got {m:?}"
                    )))
                }
            };
        }
        if let Some(b) = &self.block_selection {
            cfg.block_selection = match b.as_str() {
                "uniform" => BlockSelection::Uniform,
                "cyclic" => BlockSelection::Cyclic,
                _ => {
                    return Err(usage(format!(
                        "--block-selection: expected uniform or cyclic, got {b:?}"
                    )))
                }
            };
        }
        cfg.extrapolation = match self.check.as_deref() {
            None | Some("off") => ExtrapolationCheck::Off,
            Some("backtrack") => ExtrapolationCheck::Backtrack {
                delta: self.check_delta.unwrap_or(0.5),
                epsilon: self.check_epsilon.unwrap_or(0.25),
                l_tilde: self.l_tilde.unwrap_or(0.0),
            },
            Some(other) => {
                return Err(usage(format!(
                    "--check: expected off or backtrack, got {other:?}"
                )))
            }
        };
        cfg.track_gamma = self.track_gamma.unwrap_or(cfg.track_gamma);
        if self.lyapunov == Some(true) {
            cfg.lyapunov = Some(LyapunovConfig {
                m2: self.m2.unwrap_or(0.0),
                ..LyapunovConfig::default()
            });
        }
        cfg.timing = self.timing.unwrap_or(cfg.timing);
        cfg.divergence_factor = self.divergence_factor.unwrap_or(cfg.divergence_factor);
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Tensor in .tns format.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Dimensions when the file carries no shape header.
    #[arg(long)]
    pub shape: Option<Dims>,
    /// Planted factors: one CSV per mode (comma-separated) or their common
    /// stem, `<stem>_mode<n>.csv`.
    #[arg(long)]
    pub truth: Option<String>,
    /// Replay a previous run from its manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// csv or json.
    #[arg(long)]
    pub format: Option<String>,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Tensor in .tns format; otherwise a planted instance is drawn.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub truth: Option<String>,
    #[command(flatten)]
    pub instance: InstanceArgs,
    /// Seed for drawing the planted instance.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// Comma-separated grid rows, each <method>-<estimator>.
    #[arg(long, default_value = "itablesmd-saga,smartcpd-sgd")]
    pub methods: String,
    /// Comma-separated solver seeds.
    #[arg(long, default_value = "0,1,2,3,4")]
    pub seeds: String,
    /// NRE to reach; defaults to the planted model's NRE plus 1% of its
    /// magnitude when a planted model is known.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub prox_trials: usize,
    #[arg(long, default_value_t = 200)]
    pub mse_pairs: usize,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

impl CompareArgs {
    pub fn method_list(&self) -> CliResult<Vec<String>> {
        parse_list("methods", &self.methods)
    }

    pub fn seed_list(&self) -> CliResult<Vec<u64>> {
        parse_list("seeds", &self.seeds)
    }
}

pub fn parse_distribution(s: &str) -> CliResult<Distribution> {
    parse("dist", s)
}

pub fn parse_format(s: Option<&str>) -> CliResult<TraceFormat> {
    s.map_or(Ok(TraceFormat::Csv), |s| parse("format", s))
}
