//! Self-checks against independent oracles: finite differences, numeric
//! prox minimization, estimator exactness, explicit Khatri-Rao products and
//! brute-force matching.

use std::fmt;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bregman::{mirror_prox_step, GeneratorSpec, Regularizer};
use crate::data::{generate, Distribution, SyntheticSpec};
use crate::estimators::{
    full_gradient, sgd_gradient, EstimatorKind, EstimatorState, GradientRequest,
};
use crate::losses::{objective, ElementLoss, LossSpec, ObjectiveMode};
use crate::metrics::{mse_with, Matching};
use crate::tensor::{KruskalModel, Tensor, TensorShape};
use crate::Result;

pub const GRADIENT_TOL: f64 = 1e-5;
pub const PROX_TOL: f64 = 1e-8;
pub const EXACT_ESTIMATOR_TOL: f64 = 1e-12;
pub const ENUMERATION_TOL: f64 = 1e-10;
pub const KHATRI_RAO_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub suite: String,
    pub name: String,
    pub tolerance: f64,
    /// Worst observed error; compared against `tolerance`.
    pub observed: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(suite: &str, name: impl Into<String>, tolerance: f64, observed: f64) -> Self {
        CheckResult {
            suite: suite.to_string(),
            name: name.into(),
            tolerance,
            observed,
            passed: observed <= tolerance,
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}/{}: observed {:.3e}, tolerance {:.1e}",
            if self.passed { "pass" } else { "FAIL" },
            self.suite,
            self.name,
            self.observed,
            self.tolerance
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failed = self.failures().count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub prox_trials: usize,
    pub mse_pairs: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            prox_trials: 1000,
            mse_pairs: 200,
        }
    }
}

/// A small planted instance whose model entries stay well inside every
/// loss domain, so central differences never leave it.
pub fn fd_instance(
    dist: Distribution,
    dims: &[usize],
    rank: usize,
    seed: u64,
) -> Result<(Tensor, KruskalModel)> {
    let spec = SyntheticSpec {
        dims: dims.to_vec(),
        rank,
        distribution: dist,
        a_max: 0.5,
        seed,
    };
    let (tensor, _) = generate(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let factors = dims
        .iter()
        .map(|&d| Array2::from_shape_fn((d, rank), |_| rng.random_range(0.1..0.6)))
        .collect();
    Ok((tensor, KruskalModel::new(factors)?))
}

/// Worst per-entry relative error between `full_gradient` and central
/// differences of the exact objective, over every factor entry.
pub fn gradient_error<L: ElementLoss + ?Sized>(
    loss: &L,
    tensor: &Tensor,
    model: &KruskalModel,
) -> Result<f64> {
    let f = |m: &KruskalModel| -> Result<f64> {
        Ok(objective(loss, tensor, m, ObjectiveMode::Exact)?.value)
    };
    let mut worst: f64 = 0.0;
    for n in 0..model.order() {
        let g = full_gradient(loss, tensor, model, n)?;
        let scale = g.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        for ((i, r), &gv) in g.indexed_iter() {
            let a = model.factor(n)[[i, r]];
            let h = 1e-6 * a.abs().max(1e-3);
            let mut plus = model.clone();
            let mut minus = model.clone();
            let mut fp = plus.factor(n).clone();
            fp[[i, r]] = a + h;
            plus.set_factor(n, fp);
            let mut fm = minus.factor(n).clone();
            fm[[i, r]] = a - h;
            minus.set_factor(n, fm);
            let fd = (f(&plus)? - f(&minus)?) / (2.0 * h);
            let denom = gv
                .abs()
                .max(fd.abs())
                .max(1e-6 * scale)
                .max(f64::MIN_POSITIVE);
            worst = worst.max((fd - gv).abs() / denom);
        }
    }
    Ok(worst)
}

pub fn gradient_check<L: ElementLoss + ?Sized>(
    name: &str,
    loss: &L,
    tensor: &Tensor,
    model: &KruskalModel,
) -> Result<CheckResult> {
    let err = gradient_error(loss, tensor, model)?;
    Ok(CheckResult::new("gradient", name, GRADIENT_TOL, err))
}

/// The four families on a 6x5x4, R=3 instance.
pub fn gradient_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let dists = [
        Distribution::Gaussian { sigma: 0.1 },
        Distribution::Poisson,
        Distribution::Gamma,
        Distribution::BernoulliOdds,
    ];
    dists
        .iter()
        .map(|&d| {
            let (t, m) = fd_instance(d, &[6, 5, 4], 3, seed)?;
            gradient_check(d.name(), &LossSpec::new(d.loss()), &t, &m)
        })
        .collect()
}

/// Minimizes `g u + D(u, a)/η` over `u ≥ lo` by bisection on the
/// monotone derivative `g + ∇ψ(u) − ∇ψ(a)`.
fn bisect_prox(grad_psi: impl Fn(f64) -> f64, a: f64, g: f64, eta: f64, lo: f64, hi: f64) -> f64 {
    let dphi = |u: f64| g + (grad_psi(u) - grad_psi(a)) / eta;
    if dphi(lo) >= 0.0 {
        return lo;
    }
    let (mut lo, mut hi) = (lo, hi);
    while dphi(hi) < 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if dphi(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Worst `|Δ|` between the closed-form prox and per-coordinate numeric
/// minimization over random `(Ã, g, η)` triples.
pub fn prox_error(gen: &GeneratorSpec, trials: usize, seed: u64) -> Result<f64> {
    let reg = Regularizer::NONNEGATIVE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let a = Array2::from_shape_fn((3, 2), |_| rng.random_range(1e-3..2.0));
        let g = Array2::from_shape_fn((3, 2), |_| rng.random_range(-3.0..3.0));
        let eta = rng.random_range(0.01..1.0);
        let out = mirror_prox_step(gen, &reg, &a, &g, eta)?;
        for ((ij, &av), &gv) in a.indexed_iter().zip(g.iter()) {
            let u = match gen.kind {
                crate::bregman::GeneratorKind::NegativeEntropy => {
                    bisect_prox(f64::ln, av, gv, eta, gen.floor, 1.0)
                }
                crate::bregman::GeneratorKind::SquaredEuclidean => {
                    bisect_prox(|u| u, av, gv, eta, 0.0, 1.0)
                }
            };
            worst = worst.max((out[ij] - u).abs());
        }
    }
    Ok(worst)
}

pub fn prox_suite(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for gen in [GeneratorSpec::entropy(), GeneratorSpec::euclidean()] {
        let err = prox_error(&gen, trials, seed)?;
        out.push(CheckResult::new(
            "prox",
            format!(
                "{} vs numeric minimization ({trials} triples)",
                gen.kind.name()
            ),
            PROX_TOL,
            err,
        ));
    }
    Ok(out)
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()))
}

/// SGD and SAGA with `B = J_n` against the full gradient, and the mean of
/// all single-fiber SGD gradients against the full gradient.
pub fn estimator_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let loss = LossSpec::new(Distribution::Poisson.loss());
    let (tensor, start) = fd_instance(Distribution::Poisson, &[5, 4, 3], 2, seed)?;
    let (_, moved) = fd_instance(Distribution::Poisson, &[5, 4, 3], 2, seed + 1)?;
    let shape = tensor.shape().clone();
    let (mut sgd_err, mut saga_err, mut mean_err) = (0.0f64, 0.0f64, 0.0f64);
    for n in 0..shape.order() {
        let count = shape.fiber_count(n);
        let all: Vec<usize> = (0..count).collect();
        let full = full_gradient(&loss, &tensor, &moved, n)?;

        let req = GradientRequest::new(&moved, n, &all)?;
        sgd_err = sgd_err.max(max_abs_diff(&sgd_gradient(&loss, &tensor, &req)?, &full));

        // Table built at `start`, queried at `moved`.
        let mut state = EstimatorState::new(
            EstimatorKind::Saga,
            &loss,
            &tensor,
            &start,
            count,
            None,
            seed,
        )?;
        saga_err = saga_err.max(max_abs_diff(
            &state.saga_gradient(&loss, &tensor, &req)?,
            &full,
        ));

        let mut mean = Array2::zeros(full.dim());
        for j in 0..count {
            let one = [j];
            let req = GradientRequest::new(&moved, n, &one)?;
            mean += &sgd_gradient(&loss, &tensor, &req)?;
        }
        mean /= count as f64;
        mean_err = mean_err.max(max_abs_diff(&mean, &full));
    }
    Ok(vec![
        CheckResult::new(
            "estimators",
            "sgd with B = J_n equals full",
            EXACT_ESTIMATOR_TOL,
            sgd_err,
        ),
        CheckResult::new(
            "estimators",
            "saga with B = J_n equals full",
            EXACT_ESTIMATOR_TOL,
            saga_err,
        ),
        CheckResult::new(
            "estimators",
            "mean over all single-fiber sgd equals full",
            ENUMERATION_TOL,
            mean_err,
        ),
    ])
}

/// `H_n` built from explicit column-wise Kronecker products, with the
/// lowest remaining mode varying fastest.
pub fn explicit_khatri_rao(model: &KruskalModel, n: usize) -> Array2<f64> {
    let rank = model.rank();
    let mut h = Array2::<f64>::ones((1, rank));
    for (m, a) in model.factors().iter().enumerate() {
        if m == n {
            continue;
        }
        // kron(a_col, h_col): rows of `a` vary slowest.
        let mut next = Array2::zeros((a.nrows() * h.nrows(), rank));
        for i in 0..a.nrows() {
            for j in 0..h.nrows() {
                for r in 0..rank {
                    next[[i * h.nrows() + j, r]] = a[[i, r]] * h[[j, r]];
                }
            }
        }
        h = next;
    }
    h
}

/// Sampled Khatri-Rao rows and model fibers against the explicit product
/// and against entries of the dense reconstruction.
pub fn khatri_rao_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let shape = TensorShape::new(vec![4, 3, 5, 2])?;
    let model = crate::solver::init_model(&shape, 3, 1.0, seed)?;
    let dense = model.to_dense();
    let (mut kr_err, mut fiber_err) = (0.0f64, 0.0f64);
    for n in 0..shape.order() {
        let fibers = crate::tensor::FiberIndex::all(&shape, n)?;
        let sampled = model.khatri_rao_rows(n, &fibers)?;
        kr_err = kr_err.max(max_abs_diff(&sampled, &explicit_khatri_rao(&model, n)));
        let mf = model.model_fiber(n, &fibers)?;
        for (j, row) in mf.axis_iter(Axis(0)).enumerate() {
            for (i, &v) in row.iter().enumerate() {
                let idx = shape.fiber_entry(n, j, i);
                fiber_err = fiber_err.max((v - dense.get(&idx)?).abs());
            }
        }
    }
    Ok(vec![
        CheckResult::new(
            "khatri-rao",
            "sampled rows equal explicit product",
            KHATRI_RAO_TOL,
            kr_err,
        ),
        CheckResult::new(
            "khatri-rao",
            "model fibers equal dense entries",
            KHATRI_RAO_TOL,
            fiber_err,
        ),
    ])
}

/// Exhaustive and assignment matching on random pairs with `R ≤ 6`, plus
/// exact invariance under column permutation and power-of-two scaling.
pub fn mse_suite(pairs: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut disagree, mut variant) = (0usize, 0usize);
    for _ in 0..pairs {
        let rank = rng.random_range(1..=6);
        let rows = rng.random_range(rank.max(2)..12);
        let truth = Array2::from_shape_fn((rows, rank), |_| rng.random_range(0.01..1.0));
        let est = Array2::from_shape_fn((rows, rank), |_| rng.random_range(0.01..1.0));
        let ex = mse_with(&est, &truth, Matching::Exhaustive)?;
        let asg = mse_with(&est, &truth, Matching::Assignment)?;
        if ex.mse != asg.mse {
            disagree += 1;
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.shuffle(&mut rng);
        let mut moved = est.select(Axis(1), &perm);
        for mut col in moved.columns_mut() {
            let s = 2f64.powi(rng.random_range(-4..=4));
            col.mapv_inplace(|v| v * s);
        }
        if mse_with(&moved, &truth, Matching::Exhaustive)?.mse != ex.mse {
            variant += 1;
        }
    }
    Ok(vec![
        CheckResult::new(
            "mse",
            format!("exhaustive and assignment agree ({pairs} pairs, mismatches)"),
            0.0,
            disagree as f64,
        ),
        CheckResult::new(
            "mse",
            format!("permutation and scale invariance ({pairs} pairs, mismatches)"),
            0.0,
            variant as f64,
        ),
    ])
}

/// Every suite.
pub fn run_all(opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut checks = gradient_suite(opts.seed)?;
    checks.extend(prox_suite(opts.prox_trials, opts.seed)?);
    checks.extend(estimator_suite(opts.seed)?);
    checks.extend(khatri_rao_suite(opts.seed)?);
    checks.extend(mse_suite(opts.mse_pairs, opts.seed)?);
    Ok(VerifyReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct FlippedDeriv(LossSpec);

    impl ElementLoss for FlippedDeriv {
        fn value(&self, x: f64, m: f64) -> Result<f64> {
            self.0.loss_value(x, m)
        }
        fn deriv(&self, x: f64, m: f64) -> Result<f64> {
            Ok(-self.0.loss_deriv(x, m)?)
        }
    }

    #[test]
    fn fresh_build_passes_everything() {
        let report = run_all(&VerifyOptions {
            prox_trials: 200,
            mse_pairs: 50,
            ..Default::default()
        })
        .unwrap();
        assert!(report.passed(), "{report}");
        for suite in ["gradient", "prox", "estimators", "khatri-rao", "mse"] {
            assert!(report.checks.iter().any(|c| c.suite == suite));
        }
    }

    #[test]
    fn sign_flip_is_caught() {
        let (t, m) = fd_instance(Distribution::Poisson, &[6, 5, 4], 3, 0).unwrap();
        let good = gradient_check(
            "poisson",
            &LossSpec::new(Distribution::Poisson.loss()),
            &t,
            &m,
        )
        .unwrap();
        let bad = gradient_check(
            "poisson-flipped",
            &FlippedDeriv(LossSpec::new(Distribution::Poisson.loss())),
            &t,
            &m,
        )
        .unwrap();
        assert!(good.passed);
        assert!(!bad.passed && bad.observed > 1.0);
    }

    #[test]
    fn explicit_khatri_rao_small_case() {
        let a0 = Array2::from_shape_vec((2, 1), vec![1.0, 2.0]).unwrap();
        let a1 = Array2::from_shape_vec((2, 1), vec![3.0, 5.0]).unwrap();
        let a2 = Array2::from_shape_vec((1, 1), vec![7.0]).unwrap();
        let m = KruskalModel::new(vec![a0, a1, a2]).unwrap();
        // mode 2 fibers: (i0, i1) with i0 fastest
        let h = explicit_khatri_rao(&m, 2);
        assert_eq!(h.column(0).to_vec(), vec![3.0, 6.0, 5.0, 10.0]);
    }
}
