//! Inertial block-randomized stochastic mirror descent (iTableSMD) and the
//! no-inertia SmartCPD baseline.
//!
//! One iteration `k ≥ 1` picks a block `n`, forms the two extrapolated points
//! `Ã = A + α_k (A − A_prev)` and `A̲ = A + β_k (A − A_prev)`, estimates the
//! block gradient at `A̲` from sampled fibers and takes a mirror-prox step from
//! `Ã`. Schedules are `α_k = c₁(k−1)/(k+2)`, `β_k = c₂(k−1)/(k+2)`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, warn};
use ndarray::{Array1, Array2, Zip};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bregman::{check_supported, mirror_prox_step, GeneratorSpec, Regularizer};
use crate::error::{Error, Result};
use crate::estimators::{full_gradient, EstimatorKind, EstimatorState, GradientRequest};
use crate::losses::{LossKind, LossSpec};
use crate::metrics::{lyapunov, model_mse, nre, LyapunovConfig, LyapunovHistory, LyapunovRecord};
use crate::tensor::{KruskalModel, Tensor, TensorShape};

pub const DEFAULT_C1: f64 = 0.6;
pub const DEFAULT_C2: f64 = 0.8;
pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_INIT_MAX: f64 = 0.5;
pub const DEFAULT_DIVERGENCE_FACTOR: f64 = 1e6;
/// Halvings tried by the extrapolation guard before falling back to 0.
pub const GUARD_HALVINGS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Inertial updates with the `c₁`, `c₂` schedules.
    Itablesmd,
    /// `α_k = β_k = 0`.
    Smartcpd,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Itablesmd => "itablesmd",
            Method::Smartcpd => "smartcpd",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "itablesmd" => Ok(Method::Itablesmd),
            "smartcpd" => Ok(Method::Smartcpd),
            _ => Err(Error::Config(format!(
                "unknown method {s:?}; expected itablesmd or smartcpd"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum StepsizeSchedule {
    Constant {
        eta: f64,
    },
    /// `η_k = min{η_{k−1}, 1/L̄, (1 − δ − 2|α_k − β_k| M₂) / (α + 2γ̄)}` from
    /// user estimates of the constants.
    Rule {
        eta0: f64,
        l_bar: f64,
        m2: f64,
        gamma_bar: f64,
        alpha: f64,
        delta: f64,
    },
}

impl StepsizeSchedule {
    pub fn is_constant(&self) -> bool {
        matches!(self, StepsizeSchedule::Constant { .. })
    }

    fn initial(&self) -> f64 {
        match *self {
            StepsizeSchedule::Constant { eta } => eta,
            StepsizeSchedule::Rule { eta0, .. } => eta0,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            StepsizeSchedule::Constant { eta } => {
                if !(eta > 0.0) || !eta.is_finite() {
                    return Err(Error::Config(format!(
                        "stepsize must be positive, got {eta}"
                    )));
                }
            }
            StepsizeSchedule::Rule {
                eta0,
                l_bar,
                m2,
                gamma_bar,
                alpha,
                delta,
            } => {
                let vals = [eta0, l_bar, m2, gamma_bar, alpha, delta];
                if vals.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config("non-finite stepsize rule constant".into()));
                }
                if !(eta0 > 0.0) || !(l_bar > 0.0) {
                    return Err(Error::Config(
                        "stepsize rule needs eta0 > 0 and l_bar > 0".into(),
                    ));
                }
                if m2 < 0.0 || gamma_bar < 0.0 || alpha < 0.0 || !(alpha + 2.0 * gamma_bar > 0.0) {
                    return Err(Error::Config(
                        "stepsize rule needs m2, gamma_bar, alpha >= 0 and alpha + 2 gamma_bar > 0"
                            .into(),
                    ));
                }
                if !(delta > 0.0 && delta < 1.0) {
                    return Err(Error::Config(format!(
                        "stepsize rule needs 0 < delta < 1, got {delta}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Stepsize for iteration `k` given the previous one.
    pub fn next(&self, eta_prev: f64, alpha_k: f64, beta_k: f64) -> Result<f64> {
        match *self {
            StepsizeSchedule::Constant { eta } => Ok(eta),
            StepsizeSchedule::Rule {
                l_bar,
                m2,
                gamma_bar,
                alpha,
                delta,
                ..
            } => {
                let bound =
                    (1.0 - delta - 2.0 * (alpha_k - beta_k).abs() * m2) / (alpha + 2.0 * gamma_bar);
                if !(bound > 0.0) {
                    return Err(Error::Config(format!(
                        "stepsize rule bound is {bound} <= 0; lower m2 or the inertial gap"
                    )));
                }
                Ok(eta_prev.min(1.0 / l_bar).min(bound))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ExtrapolationCheck {
    /// Use the schedule value for `β_k` as is.
    Off,
    /// Halve `β_k` until
    /// `D(A^k, A̲^k) ≤ (δ − ε)/(1 + L̃ η_{k−1}) · D(A^{k−1}, A^k)`;
    /// `l_tilde` stands in for the unknown lower curvature constant.
    Backtrack {
        delta: f64,
        epsilon: f64,
        l_tilde: f64,
    },
}

/// Which earlier value of a block the momentum direction refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentumHistory {
    /// The block's value before its own most recent update.
    PerBlock,
    /// The block's value in the previous global iterate; nonzero only when
    /// the same block was drawn in the previous iteration.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockSelection {
    Uniform,
    Cyclic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    pub rank: usize,
    pub loss: LossSpec,
    pub generator: GeneratorSpec,
    /// One per mode, or a single entry applied to every mode.
    pub regularizers: Vec<Regularizer>,
    pub estimator: EstimatorKind,
    /// Fibers per iteration; capped at `J_n` per mode.
    pub batch: usize,
    /// SARAH restart parameter; `⌈J_n / B⌉` per mode when unset.
    pub sarah_p: Option<f64>,
    pub stepsize: StepsizeSchedule,
    pub c1: f64,
    pub c2: f64,
    pub extrapolation: ExtrapolationCheck,
    pub momentum: MomentumHistory,
    pub block_selection: BlockSelection,
    pub max_iters: usize,
    /// Relative objective change below which two consecutive evaluations
    /// stop the run.
    pub tol: f64,
    /// Iterations between evaluations; one epoch `⌈mean_n J_n / B⌉` when unset.
    pub eval_every: Option<usize>,
    pub seed: u64,
    /// Initial entries are uniform on `(0, init_max]`.
    pub init_max: f64,
    /// Measure `Γ_k` each iteration (one extra pass over the block's fibers).
    pub track_gamma: bool,
    pub lyapunov: Option<LyapunovConfig>,
    /// Record wall-clock seconds; zeros when off, for byte-stable traces.
    pub timing: bool,
    pub divergence_factor: f64,
}

impl SolverConfig {
    /// Defaults for a loss: entropy generator with nonnegativity for the
    /// nonnegative losses, SAGA with `B = 2R`, `η` 0.1 for gamma (and the
    /// unconstrained losses) and 0.2 for poisson and bernoulli.
    pub fn new(rank: usize, loss: LossSpec) -> Self {
        let nonneg = loss.kind.requires_nonnegative();
        let eta = match loss.kind {
            LossKind::PoissonIdentity
            | LossKind::PoissonLog
            | LossKind::BernoulliOdds
            | LossKind::BernoulliLogit => 0.2,
            LossKind::Gamma | LossKind::Gaussian => 0.1,
        };
        SolverConfig {
            method: Method::Itablesmd,
            rank,
            loss,
            generator: if nonneg {
                GeneratorSpec::entropy()
            } else {
                GeneratorSpec::euclidean()
            },
            regularizers: vec![if nonneg {
                Regularizer::NONNEGATIVE
            } else {
                Regularizer::ZERO
            }],
            estimator: EstimatorKind::Saga,
            batch: 2 * rank.max(1),
            sarah_p: None,
            stepsize: StepsizeSchedule::Constant { eta },
            c1: DEFAULT_C1,
            c2: DEFAULT_C2,
            extrapolation: ExtrapolationCheck::Off,
            momentum: MomentumHistory::PerBlock,
            block_selection: BlockSelection::Uniform,
            max_iters: 5000,
            tol: DEFAULT_TOL,
            eval_every: None,
            seed: 0,
            init_max: DEFAULT_INIT_MAX,
            track_gamma: false,
            lyapunov: None,
            timing: true,
            divergence_factor: DEFAULT_DIVERGENCE_FACTOR,
        }
    }

    pub fn regularizer(&self, n: usize) -> &Regularizer {
        if self.regularizers.len() == 1 {
            &self.regularizers[0]
        } else {
            &self.regularizers[n]
        }
    }

    /// Inertial coefficients `(α_k, β_k)` for iteration `k ≥ 1`.
    pub fn inertia(&self, k: usize) -> (f64, f64) {
        match self.method {
            Method::Smartcpd => (0.0, 0.0),
            Method::Itablesmd => {
                let t = (k.saturating_sub(1)) as f64 / (k + 2) as f64;
                (self.c1 * t, self.c2 * t)
            }
        }
    }

    pub fn validate(&self, shape: &TensorShape) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        for (name, c) in [("c1", self.c1), ("c2", self.c2)] {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {c}")));
            }
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config(format!(
                "tolerance must be >= 0, got {}",
                self.tol
            )));
        }
        if !(self.init_max > 0.0) || !self.init_max.is_finite() {
            return Err(Error::Config(format!(
                "init_max must be positive, got {}",
                self.init_max
            )));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(Error::Config("divergence factor must exceed 1".into()));
        }
        if self.eval_every == Some(0) {
            return Err(Error::Config(
                "evaluation cadence must be at least 1".into(),
            ));
        }
        self.stepsize.validate()?;
        if let ExtrapolationCheck::Backtrack {
            delta,
            epsilon,
            l_tilde,
        } = self.extrapolation
        {
            if !(1.0 > delta && delta > epsilon && epsilon > 0.0) {
                return Err(Error::Config(format!(
                    "extrapolation check needs 1 > delta > epsilon > 0, got delta={delta}, epsilon={epsilon}"
                )));
            }
            if !(l_tilde >= 0.0) || !l_tilde.is_finite() {
                return Err(Error::Config(format!(
                    "l_tilde must be >= 0, got {l_tilde}"
                )));
            }
        }
        let order = shape.order();
        if self.regularizers.len() != 1 && self.regularizers.len() != order {
            return Err(Error::Config(format!(
                "expected 1 or {order} regularizers, got {}",
                self.regularizers.len()
            )));
        }
        for n in 0..order {
            let reg = self.regularizer(n);
            check_supported(&self.generator, reg)?;
            let constrained = reg.nonnegative
                || self.generator.kind == crate::bregman::GeneratorKind::NegativeEntropy;
            if self.loss.kind.requires_nonnegative() && !constrained {
                return Err(Error::Config(format!(
                    "loss {} needs nonnegative factors; use the nonnegative regularizer or the \
                     negative-entropy generator",
                    self.loss.kind
                )));
            }
        }
        if let Some(p) = self.sarah_p {
            if !(p >= 1.0) {
                return Err(Error::Config(format!("SARAH p must be >= 1, got {p}")));
            }
        }
        if let Some(cfg) = &self.lyapunov {
            match self.stepsize {
                StepsizeSchedule::Constant { eta } => {
                    let (c1, c2) = match self.method {
                        Method::Itablesmd => (self.c1, self.c2),
                        Method::Smartcpd => (0.0, 0.0),
                    };
                    cfg.validate(eta, c1, c2)?;
                }
                StepsizeSchedule::Rule { .. } => {}
            }
        }
        Ok(())
    }

    /// Default evaluation cadence: one effective epoch.
    pub fn cadence(&self, shape: &TensorShape) -> usize {
        if let Some(e) = self.eval_every {
            return e;
        }
        let order = shape.order();
        let mean_j = (0..order).map(|n| shape.fiber_count(n)).sum::<usize>() as f64 / order as f64;
        ((mean_j / self.batch as f64).ceil() as usize).max(1)
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Uniform `(0, init_max]` factors from a dedicated stream of `seed`.
pub fn init_model(
    shape: &TensorShape,
    rank: usize,
    init_max: f64,
    seed: u64,
) -> Result<KruskalModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let factors = shape
        .dims()
        .iter()
        .map(|&d| Array2::from_shape_fn((d, rank), |_| init_max * (1.0 - rng.random::<f64>())))
        .collect();
    KruskalModel::new(factors)
}

/// Largest eigenvalue of the gaussian-loss block Hessian `(⊛_{m≠n} A_mᵀA_m)/Π I`,
/// by power iteration.
pub fn gaussian_block_curvature(model: &KruskalModel, n: usize) -> f64 {
    let rank = model.rank();
    let mut gram = Array2::<f64>::ones((rank, rank));
    for (m, a) in model.factors().iter().enumerate() {
        if m != n {
            gram *= &a.t().dot(a);
        }
    }
    let mut v = Array1::from_elem(rank, 1.0 / (rank as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..1000 {
        let w = gram.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = w / norm;
        let l = next.dot(&gram.dot(&next));
        v = next;
        if (l - lambda).abs() <= 1e-15 * l.abs() {
            lambda = l;
            break;
        }
        lambda = l;
    }
    lambda / model.shape().total() as f64
}

/// Accepts or shrinks `β_k` per the extrapolation inequality.
pub fn extrapolation_guard(
    check: &ExtrapolationCheck,
    gen: &GeneratorSpec,
    reg: &Regularizer,
    current: &Array2<f64>,
    previous: &Array2<f64>,
    eta_prev: f64,
    beta: f64,
) -> Result<f64> {
    let (delta, epsilon, l_tilde) = match *check {
        ExtrapolationCheck::Off => return Ok(beta),
        ExtrapolationCheck::Backtrack {
            delta,
            epsilon,
            l_tilde,
        } => (delta, epsilon, l_tilde),
    };
    if beta == 0.0 {
        return Ok(0.0);
    }
    let rhs = (delta - epsilon) / (1.0 + l_tilde * eta_prev) * gen.divergence(previous, current)?;
    let mut b = beta;
    for _ in 0..=GUARD_HALVINGS {
        let point = extrapolate(gen, reg, current, previous, b);
        if gen.divergence(current, &point)? <= rhs {
            return Ok(b);
        }
        b *= 0.5;
    }
    Ok(0.0)
}

/// `A + w (A − P)`, clamped into the generator/constraint domain.
fn extrapolate(
    gen: &GeneratorSpec,
    reg: &Regularizer,
    current: &Array2<f64>,
    previous: &Array2<f64>,
    w: f64,
) -> Array2<f64> {
    let mut out = current.clone();
    if w != 0.0 {
        Zip::from(&mut out)
            .and(previous)
            .for_each(|o, &p| *o += w * (*o - p));
        gen.clamp_to_domain(reg, &mut out);
    }
    out
}

/// What one step did.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// `k`, starting at 1.
    pub k: usize,
    pub mode: usize,
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    /// `γ_k = |α_k − β_k| M₂`.
    pub gamma_k_coef: f64,
    /// Realized `Γ` when tracked.
    pub gamma: Option<f64>,
    pub upsilon: Option<f64>,
    pub restarted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Completed iterations.
    pub iteration: usize,
    pub seconds: f64,
    pub nre: f64,
    pub mse_mean: Option<f64>,
    pub mse: Vec<f64>,
    pub mse_shared: Option<f64>,
    pub lyapunov: Option<f64>,
    /// `Γ` of the most recent step.
    pub gamma_k: Option<f64>,
    /// Most recent `Γ` per mode.
    pub gamma_per_mode: Vec<Option<f64>>,
    pub eta: f64,
}

impl TraceRecord {
    /// Equality ignoring wall time.
    pub fn same_values(&self, other: &TraceRecord) -> bool {
        TraceRecord {
            seconds: 0.0,
            ..self.clone()
        } == TraceRecord {
            seconds: 0.0,
            ..other.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMetadata {
    pub config_hash: String,
    pub seed: u64,
    pub method: Method,
    pub estimator: EstimatorKind,
    pub order: usize,
    /// Lower bound used for the Lyapunov records.
    pub lyapunov_v0: Option<f64>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub metadata: TraceMetadata,
    pub records: Vec<TraceRecord>,
    /// Full Lyapunov breakdown, aligned with `records` when enabled.
    pub lyapunov: Vec<LyapunovRecord>,
}

impl IterationTrace {
    pub fn final_record(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// Equality ignoring wall time.
    pub fn same_values(&self, other: &IterationTrace) -> bool {
        self.metadata == other.metadata
            && self.lyapunov == other.lyapunov
            && self.records.len() == other.records.len()
            && self
                .records
                .iter()
                .zip(&other.records)
                .all(|(a, b)| a.same_values(b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxIterations,
    Converged,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: IterationTrace,
    pub model: KruskalModel,
    pub stop: StopReason,
    pub iterations: usize,
}

/// Mutable state of one run.
#[derive(Debug, Clone)]
pub struct SolverRunState {
    /// `A^k`
    pub model: KruskalModel,
    /// `A^{k−1}`
    pub previous: KruskalModel,
    /// `A^{k−2}`
    pub before_previous: KruskalModel,
    /// Per block: its value before its most recent update.
    block_previous: Vec<Array2<f64>>,
    /// Completed iterations.
    pub iteration: usize,
    /// `η_{k−1}`
    pub eta: f64,
    pub best_objective: f64,
    rng: ChaCha8Rng,
    estimator: EstimatorState,
    gamma_per_mode: Vec<Option<f64>>,
    pub last_step: Option<StepInfo>,
}

impl SolverRunState {
    pub fn estimator(&self) -> &EstimatorState {
        &self.estimator
    }
}

/// A solver bound to one tensor.
#[derive(Debug, Clone)]
pub struct Solver<'a> {
    config: SolverConfig,
    tensor: &'a Tensor,
    state: SolverRunState,
}

impl<'a> Solver<'a> {
    /// Starts from uniform random factors.
    pub fn new(config: SolverConfig, tensor: &'a Tensor) -> Result<Self> {
        config.validate(tensor.shape())?;
        let model = init_model(tensor.shape(), config.rank, config.init_max, config.seed)?;
        Self::with_init(config, tensor, model)
    }

    /// Starts from `init`, with `A^{-1} = A^0 = init`.
    pub fn with_init(config: SolverConfig, tensor: &'a Tensor, init: KruskalModel) -> Result<Self> {
        config.validate(tensor.shape())?;
        if init.shape() != *tensor.shape() || init.rank() != config.rank {
            return Err(Error::Contract(format!(
                "initial model {:?} rank {} does not match tensor {:?} rank {}",
                init.shape().dims(),
                init.rank(),
                tensor.shape().dims(),
                config.rank
            )));
        }
        for n in 0..init.order() {
            let reg = config.regularizer(n);
            let a = init.factor(n);
            let floor = match config.generator.kind {
                crate::bregman::GeneratorKind::NegativeEntropy => Some(0.0),
                crate::bregman::GeneratorKind::SquaredEuclidean if reg.nonnegative => None,
                crate::bregman::GeneratorKind::SquaredEuclidean => {
                    continue;
                }
            };
            let infeasible = match floor {
                Some(_) => a.iter().any(|&v| !(v > 0.0)),
                None => a.iter().any(|&v| v < 0.0),
            };
            if infeasible {
                return Err(Error::Contract(format!(
                    "initial factor {n} is outside the feasible domain"
                )));
            }
        }
        config.loss.check_model(&init)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(0);
        let estimator_seed = {
            let mut r = ChaCha8Rng::seed_from_u64(config.seed);
            r.set_stream(1);
            r.random::<u64>()
        };
        let estimator = EstimatorState::new(
            config.estimator,
            &config.loss,
            tensor,
            &init,
            config.batch,
            config.sarah_p,
            estimator_seed,
        )?;
        let order = init.order();
        let state = SolverRunState {
            previous: init.clone(),
            before_previous: init.clone(),
            block_previous: init.factors().to_vec(),
            iteration: 0,
            eta: config.stepsize.initial(),
            best_objective: f64::INFINITY,
            rng,
            estimator,
            gamma_per_mode: vec![None; order],
            last_step: None,
            model: init,
        };
        Ok(Solver {
            config,
            tensor,
            state,
        })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn state(&self) -> &SolverRunState {
        &self.state
    }

    pub fn model(&self) -> &KruskalModel {
        &self.state.model
    }

    fn pick_block(&mut self) -> usize {
        let order = self.state.model.order();
        match self.config.block_selection {
            BlockSelection::Uniform => self.state.rng.random_range(0..order),
            BlockSelection::Cyclic => self.state.iteration % order,
        }
    }

    /// One inertial step with the configured method's schedules.
    pub fn step(&mut self) -> Result<StepInfo> {
        let k = self.state.iteration + 1;
        let (alpha, beta) = self.config.inertia(k);
        self.step_with(alpha, beta).map_err(|e| Error::AtIteration {
            iteration: k,
            source: Box::new(e),
        })
    }

    /// One step with the inertial schedules of iTableSMD, regardless of the
    /// configured method.
    pub fn itablesmd_step(&mut self) -> Result<StepInfo> {
        let k = self.state.iteration + 1;
        let t = (k - 1) as f64 / (k + 2) as f64;
        let (alpha, beta) = (self.config.c1 * t, self.config.c2 * t);
        self.step_with(alpha, beta).map_err(|e| Error::AtIteration {
            iteration: k,
            source: Box::new(e),
        })
    }

    /// One step with `α_k = β_k = 0`.
    pub fn smartcpd_step(&mut self) -> Result<StepInfo> {
        let k = self.state.iteration + 1;
        self.step_with(0.0, 0.0).map_err(|e| Error::AtIteration {
            iteration: k,
            source: Box::new(e),
        })
    }

    fn step_with(&mut self, alpha: f64, beta_schedule: f64) -> Result<StepInfo> {
        let k = self.state.iteration + 1;
        let n = self.pick_block();
        let cfg = &self.config;
        let reg = *cfg.regularizer(n);
        let gen = cfg.generator;
        let current = self.state.model.factor(n).clone();
        let anchor_prev = match cfg.momentum {
            MomentumHistory::PerBlock => self.state.block_previous[n].clone(),
            MomentumHistory::Global => self.state.previous.factor(n).clone(),
        };
        let beta = extrapolation_guard(
            &cfg.extrapolation,
            &gen,
            &reg,
            &current,
            &anchor_prev,
            self.state.eta,
            beta_schedule,
        )?;
        let tilde = extrapolate(&gen, &reg, &current, &anchor_prev, alpha);
        let under = extrapolate(&gen, &reg, &current, &anchor_prev, beta);

        let count = self.tensor.shape().fiber_count(n);
        let b = cfg.batch.min(count);
        let mut fibers = index::sample(&mut self.state.rng, count, b).into_vec();
        fibers.sort_unstable();

        let eta = cfg.stepsize.next(self.state.eta, alpha, beta)?;
        let gamma_k_coef = match cfg.stepsize {
            StepsizeSchedule::Rule { m2, .. } => (alpha - beta).abs() * m2,
            StepsizeSchedule::Constant { .. } => {
                (alpha - beta).abs() * cfg.lyapunov.map_or(0.0, |l| l.m2)
            }
        };

        // gradient at the underline point, with the other blocks at A^k
        let saved = self.state.model.replace_factor(n, under);
        let outcome = (|| {
            let req = GradientRequest::new(&self.state.model, n, &fibers)?;
            let est = self
                .state
                .estimator
                .estimate(&cfg.loss, self.tensor, &req)?;
            let vr = if cfg.track_gamma {
                let exact = full_gradient(&cfg.loss, self.tensor, &self.state.model, n)?;
                Some(self.state.estimator.vr_diagnostics(
                    &cfg.loss,
                    self.tensor,
                    &req,
                    &est.gradient,
                    &exact,
                )?)
            } else {
                None
            };
            Ok::<_, Error>((est, vr))
        })();
        self.state.model.replace_factor(n, saved);
        let (est, vr) = outcome?;

        let next = mirror_prox_step(&gen, &reg, &tilde, &est.gradient, eta)?;

        let st = &mut self.state;
        st.before_previous = std::mem::replace(&mut st.previous, st.model.clone());
        st.block_previous[n] = st.model.replace_factor(n, next);
        st.iteration = k;
        st.eta = eta;
        if let Some(v) = vr {
            st.gamma_per_mode[n] = Some(v.gamma);
        }
        let info = StepInfo {
            k,
            mode: n,
            alpha,
            beta,
            eta,
            gamma_k_coef,
            gamma: vr.map(|v| v.gamma),
            upsilon: vr.map(|v| v.upsilon),
            restarted: est.restarted,
        };
        st.last_step = Some(info);
        Ok(info)
    }

    fn record(
        &mut self,
        planted: Option<&KruskalModel>,
        started: &Instant,
        lyap: &mut Vec<LyapunovRecord>,
        lyapunov_on: bool,
    ) -> Result<TraceRecord> {
        let value = nre(&self.config.loss, self.tensor, &self.state.model)?;
        let regularized = value
            + (0..self.state.model.order())
                .map(|n| self.config.regularizer(n).value(self.state.model.factor(n)))
                .sum::<f64>();
        self.state.best_objective = self.state.best_objective.min(regularized);
        let (mse_mean, mse, mse_shared) = match planted {
            Some(truth) => match model_mse(&self.state.model, truth) {
                Ok(m) => (
                    Some(m.mean),
                    m.per_mode.iter().map(|r| r.mse).collect(),
                    Some(m.shared),
                ),
                Err(Error::Degenerate(msg)) => {
                    warn!("MSE skipped at iteration {}: {msg}", self.state.iteration);
                    (None, Vec::new(), None)
                }
                Err(e) => return Err(e),
            },
            None => (None, Vec::new(), None),
        };
        let lyapunov_value = if lyapunov_on {
            let cfg = self.config.lyapunov.expect("checked by caller");
            let gamma_next = self.state.last_step.and_then(|s| s.gamma).unwrap_or(0.0);
            let gamma_k = self.state.last_step.map_or(0.0, |s| s.gamma_k_coef);
            let rec = lyapunov(
                &cfg,
                &self.config.generator,
                LyapunovHistory {
                    previous: Some(&self.state.before_previous),
                    current: Some(&self.state.previous),
                    next: &self.state.model,
                },
                regularized,
                gamma_next,
                self.state.eta,
                gamma_k,
            )?;
            lyap.push(rec);
            Some(rec.value)
        } else {
            None
        };
        Ok(TraceRecord {
            iteration: self.state.iteration,
            seconds: if self.config.timing {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
            nre: value,
            mse_mean,
            mse,
            mse_shared,
            lyapunov: lyapunov_value,
            gamma_k: self.state.last_step.and_then(|s| s.gamma),
            gamma_per_mode: self.state.gamma_per_mode.clone(),
            eta: self.state.eta,
        })
    }

    /// Runs to the iteration budget or the stopping rule.
    pub fn run(mut self, planted: Option<&KruskalModel>) -> Result<RunOutput> {
        let started = Instant::now();
        let shape = self.tensor.shape().clone();
        let cadence = self.config.cadence(&shape);
        let mut notes = Vec::new();
        if matches!(
            self.config.extrapolation,
            ExtrapolationCheck::Backtrack { .. }
        ) {
            notes.push(
                "extrapolation check uses the user-supplied l_tilde for the lower curvature constant"
                    .to_string(),
            );
        }
        let lyapunov_on = match (&self.config.lyapunov, self.config.stepsize.is_constant()) {
            (Some(_), true) => true,
            (Some(_), false) => {
                warn!("Lyapunov records suppressed: they need a constant stepsize");
                notes.push("lyapunov suppressed: varying stepsize".to_string());
                false
            }
            (None, _) => false,
        };
        let mut lyap = Vec::new();
        let mut records = Vec::new();
        let first = self.record(planted, &started, &mut lyap, lyapunov_on)?;
        let initial = first.nre;
        records.push(first);

        let mut stop = StopReason::MaxIterations;
        let mut small_changes = 0;
        while self.state.iteration < self.config.max_iters {
            self.step()?;
            let t = self.state.iteration;
            if !t.is_multiple_of(cadence) && t != self.config.max_iters {
                continue;
            }
            let rec = self.record(planted, &started, &mut lyap, lyapunov_on)?;
            if !rec.nre.is_finite() || rec.nre > self.config.divergence_factor * initial.abs() {
                return Err(Error::Divergence {
                    iteration: t,
                    detail: format!(
                        "objective {} exceeds {} x initial value {initial}",
                        rec.nre, self.config.divergence_factor
                    ),
                });
            }
            let prev = records.last().map_or(initial, |r: &TraceRecord| r.nre);
            let change = (rec.nre - prev).abs() / prev.abs().max(1.0);
            debug!("iteration {t}: nre {} (change {change:e})", rec.nre);
            records.push(rec);
            if change < self.config.tol {
                small_changes += 1;
                if small_changes >= 2 {
                    stop = StopReason::Converged;
                    break;
                }
            } else {
                small_changes = 0;
            }
        }

        let mut v0 = None;
        if lyapunov_on {
            let bound = self.config.lyapunov.and_then(|c| c.v0).unwrap_or_else(|| {
                lyap.iter()
                    .map(|r| r.objective)
                    .fold(f64::INFINITY, f64::min)
            });
            for (rec, trace_rec) in lyap.iter_mut().zip(records.iter_mut()) {
                *rec = rec.with_v0(bound);
                trace_rec.lyapunov = Some(rec.value);
            }
            v0 = Some(bound);
        }
        let iterations = self.state.iteration;
        let trace = IterationTrace {
            metadata: TraceMetadata {
                config_hash: self.config.hash(),
                seed: self.config.seed,
                method: self.config.method,
                estimator: self.config.estimator,
                order: shape.order(),
                lyapunov_v0: v0,
                notes,
            },
            records,
            lyapunov: lyap,
        };
        Ok(RunOutput {
            trace,
            model: self.state.model,
            stop,
            iterations,
        })
    }
}

/// Random start, run, trace.
pub fn run(
    config: &SolverConfig,
    tensor: &Tensor,
    planted: Option<&KruskalModel>,
) -> Result<RunOutput> {
    Solver::new(config.clone(), tensor)?.run(planted)
}
