//! Evaluation quantities: NRE, permutation-matched factor MSE and the
//! Lyapunov diagnostic.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bregman::GeneratorSpec;
use crate::error::{Error, Result};
use crate::losses::{objective, ElementLoss, ObjectiveMode};
use crate::tensor::{KruskalModel, Tensor};

/// Largest rank matched by exhaustive permutation search.
pub const EXHAUSTIVE_MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    pub mse: f64,
    /// `permutation[r]` is the estimate column matched to truth column `r`.
    pub permutation: Vec<usize>,
    /// Squared normalized difference for each truth column `r`.
    pub residuals: Vec<f64>,
}

/// Permutation search strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Matching {
    /// Exhaustive up to [`EXHAUSTIVE_MAX_RANK`], assignment above.
    Auto,
    Exhaustive,
    Assignment,
}

fn normalized_columns(a: &Array2<f64>, which: &str) -> Result<Array2<f64>> {
    let mut out = a.clone();
    for (r, mut col) in out.columns_mut().into_iter().enumerate() {
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Degenerate(format!(
                "{which} column {r} has zero or non-finite norm"
            )));
        }
        col.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

/// `cost[r][s] = ‖ā_r − a_s‖²` over normalized columns of truth and estimate.
fn cost_matrix(estimate: &Array2<f64>, truth: &Array2<f64>) -> Result<Array2<f64>> {
    if estimate.dim() != truth.dim() {
        return Err(Error::Contract(format!(
            "estimate shape {:?} does not match truth shape {:?}",
            estimate.dim(),
            truth.dim()
        )));
    }
    if truth.ncols() == 0 {
        return Err(Error::Degenerate("factor with zero columns".into()));
    }
    let a = normalized_columns(estimate, "estimate")?;
    let t = normalized_columns(truth, "truth")?;
    let rank = t.ncols();
    Ok(Array2::from_shape_fn((rank, rank), |(r, s)| {
        t.column(r)
            .iter()
            .zip(a.column(s))
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    }))
}

/// Sum of matched costs, order-independent: residuals summed in ascending
/// order so that the result does not depend on column labels.
fn matched_total(cost: &Array2<f64>, perm: &[usize]) -> (f64, Vec<f64>) {
    let residuals: Vec<f64> = perm
        .iter()
        .enumerate()
        .map(|(r, &s)| cost[[r, s]])
        .collect();
    let mut sorted = residuals.clone();
    sorted.sort_by(f64::total_cmp);
    (sorted.iter().sum(), residuals)
}

/// Minimum-cost permutation by enumeration (Heap's algorithm).
pub fn match_exhaustive(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    let mut perm: Vec<usize> = (0..n).collect();
    let total = |p: &[usize]| -> f64 { p.iter().enumerate().map(|(r, &s)| cost[[r, s]]).sum() };
    let mut best = perm.clone();
    let mut best_cost = total(&perm);
    let mut c = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let t = total(&perm);
            if t < best_cost {
                best_cost = t;
                best.copy_from_slice(&perm);
            }
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

/// Minimum-cost permutation by the Hungarian method with potentials,
/// `O(n³)`.
pub fn match_assignment(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    // 1-based rows/columns; column 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[owner[j] - 1] = j - 1;
    }
    perm
}

fn solve(cost: &Array2<f64>, matching: Matching) -> Vec<usize> {
    match matching {
        Matching::Exhaustive => match_exhaustive(cost),
        Matching::Assignment => match_assignment(cost),
        Matching::Auto if cost.nrows() <= EXHAUSTIVE_MAX_RANK => match_exhaustive(cost),
        Matching::Auto => match_assignment(cost),
    }
}

/// Permutation- and scale-invariant MSE between one estimated and one
/// planted factor.
pub fn mse(estimate: &Array2<f64>, truth: &Array2<f64>) -> Result<MseReport> {
    mse_with(estimate, truth, Matching::Auto)
}

pub fn mse_with(
    estimate: &Array2<f64>,
    truth: &Array2<f64>,
    matching: Matching,
) -> Result<MseReport> {
    let cost = cost_matrix(estimate, truth)?;
    let permutation = solve(&cost, matching);
    let (total, residuals) = matched_total(&cost, &permutation);
    Ok(MseReport {
        mse: total / cost.nrows() as f64,
        permutation,
        residuals,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMse {
    /// Independently matched per mode.
    pub per_mode: Vec<MseReport>,
    /// Mean of the per-mode values.
    pub mean: f64,
    /// Mean over modes under one permutation shared by all modes.
    pub shared: f64,
    pub shared_permutation: Vec<usize>,
}

/// Per-mode MSE of a whole model, plus the shared-permutation variant.
pub fn model_mse(estimate: &KruskalModel, truth: &KruskalModel) -> Result<ModelMse> {
    if estimate.order() != truth.order() {
        return Err(Error::Contract(format!(
            "estimate has {} modes, truth has {}",
            estimate.order(),
            truth.order()
        )));
    }
    let order = truth.order();
    let mut per_mode = Vec::with_capacity(order);
    let mut costs = Vec::with_capacity(order);
    for n in 0..order {
        let cost = cost_matrix(estimate.factor(n), truth.factor(n))?;
        let permutation = solve(&cost, Matching::Auto);
        let (total, residuals) = matched_total(&cost, &permutation);
        per_mode.push(MseReport {
            mse: total / cost.nrows() as f64,
            permutation,
            residuals,
        });
        costs.push(cost);
    }
    let mean = per_mode.iter().map(|r| r.mse).sum::<f64>() / order as f64;

    let mut joint = costs[0].clone();
    for c in &costs[1..] {
        joint += c;
    }
    let shared_permutation = solve(&joint, Matching::Auto);
    let rank = truth.rank() as f64;
    let shared = costs
        .iter()
        .map(|c| matched_total(c, &shared_permutation).0 / rank)
        .sum::<f64>()
        / order as f64;
    Ok(ModelMse {
        per_mode,
        mean,
        shared,
        shared_permutation,
    })
}

/// The NRE series value: the exact mean-loss objective.
pub fn nre<L: ElementLoss + ?Sized>(
    loss: &L,
    tensor: &Tensor,
    model: &KruskalModel,
) -> Result<f64> {
    Ok(objective(loss, tensor, model, ObjectiveMode::Exact)?.value)
}

/// User-supplied surrogate constants for the Lyapunov diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovConfig {
    /// Smoothness surrogate `α`.
    pub alpha: f64,
    /// `γ̄ > 0`.
    pub gamma_bar: f64,
    /// `τ > 0`.
    pub tau: f64,
    /// `ε ≥ 0`.
    pub epsilon: f64,
    /// `M₂`, scaling `γ_k = |α_k − β_k| M₂`.
    pub m2: f64,
    /// Lower bound `V₀` on the objective; the minimum observed objective
    /// when unset.
    pub v0: Option<f64>,
}

impl Default for LyapunovConfig {
    fn default() -> Self {
        LyapunovConfig {
            alpha: 0.0,
            gamma_bar: 1e-3,
            tau: 1.0,
            epsilon: 1e-3,
            m2: 0.0,
            v0: None,
        }
    }
}

impl LyapunovConfig {
    /// Checks that every summand coefficient is nonnegative for all `k`,
    /// given the largest possible `γ_k = |c₁ − c₂| M₂`.
    pub fn validate(&self, eta: f64, c1: f64, c2: f64) -> Result<()> {
        let finite = [
            self.alpha,
            self.gamma_bar,
            self.tau,
            self.epsilon,
            self.m2,
            eta,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite Lyapunov constant".into()));
        }
        if !(self.gamma_bar > 0.0) || !(self.tau > 0.0) {
            return Err(Error::Config(
                "Lyapunov constants need gamma_bar > 0 and tau > 0".into(),
            ));
        }
        if self.epsilon < 0.0 || self.m2 < 0.0 || self.alpha < 0.0 {
            return Err(Error::Config(
                "Lyapunov constants alpha, epsilon, m2 must be nonnegative".into(),
            ));
        }
        let gamma_max = (c1 - c2).abs() * self.m2;
        let forward =
            1.0 - eta * self.alpha - eta * self.gamma_bar - gamma_max - self.epsilon / 3.0;
        if forward < 0.0 {
            return Err(Error::Config(format!(
                "Lyapunov forward coefficient 1 - eta*alpha - eta*gamma_bar - gamma_k - eps/3 \
                 is {forward} < 0"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovRecord {
    /// `Ψ`, relative to `v0`.
    pub value: f64,
    /// `Φ` at the newest iterate.
    pub objective: f64,
    pub v0: f64,
    /// `η (Φ − V₀)`
    pub gap_term: f64,
    /// `(1 − ηα − ηγ̄ − γ_k − ε/3) D(A^k, A^{k+1})`
    pub forward_term: f64,
    /// `η(γ̄/2 + ε/(3η)) D(A^{k−1}, A^k)`
    pub backward_term: f64,
    /// `(η/(2τγ̄)) Γ_{k+1}`
    pub gamma_term: f64,
    eta: f64,
}

impl LyapunovRecord {
    /// Recomputes the record against a different lower bound.
    pub fn with_v0(mut self, v0: f64) -> Self {
        self.v0 = v0;
        self.gap_term = self.eta * (self.objective - v0);
        self.value = self.gap_term + self.forward_term + self.backward_term + self.gamma_term;
        self
    }
}

/// Iterates `A^{k−1}`, `A^k`, `A^{k+1}`; earlier ones may be missing at the
/// start of a run.
#[derive(Debug, Clone, Copy)]
pub struct LyapunovHistory<'a> {
    pub previous: Option<&'a KruskalModel>,
    pub current: Option<&'a KruskalModel>,
    pub next: &'a KruskalModel,
}

/// Summed Bregman divergence over all blocks.
pub fn block_divergence(gen: &GeneratorSpec, x: &KruskalModel, y: &KruskalModel) -> Result<f64> {
    if x.order() != y.order() {
        return Err(Error::Contract("models differ in order".into()));
    }
    x.factors()
        .iter()
        .zip(y.factors())
        .try_fold(0.0, |acc, (a, b)| Ok(acc + gen.divergence(a, b)?))
}

/// `Ψ_{k+1}` from the iterate history, the objective `Φ^{k+1}`, the realized
/// `Γ_{k+1}` and `γ_k`.
pub fn lyapunov(
    cfg: &LyapunovConfig,
    gen: &GeneratorSpec,
    history: LyapunovHistory<'_>,
    objective: f64,
    gamma_next: f64,
    eta: f64,
    gamma_k: f64,
) -> Result<LyapunovRecord> {
    let (prev, cur) = match (history.previous, history.current) {
        (Some(p), Some(c)) => (p, c),
        _ => {
            return Err(Error::State(
                "Lyapunov record needs two previous iterates".into(),
            ))
        }
    };
    if !(eta > 0.0) {
        return Err(Error::Config(format!(
            "stepsize must be positive, got {eta}"
        )));
    }
    let forward_coef = 1.0 - eta * cfg.alpha - eta * cfg.gamma_bar - gamma_k - cfg.epsilon / 3.0;
    let backward_coef = eta * (cfg.gamma_bar / 2.0 + cfg.epsilon / (3.0 * eta));
    let forward_term = forward_coef * block_divergence(gen, cur, history.next)?;
    let backward_term = backward_coef * block_divergence(gen, prev, cur)?;
    let gamma_term = eta / (2.0 * cfg.tau * cfg.gamma_bar) * gamma_next;
    let v0 = cfg.v0.unwrap_or(objective);
    let record = LyapunovRecord {
        value: 0.0,
        objective,
        v0,
        gap_term: 0.0,
        forward_term,
        backward_term,
        gamma_term,
        eta,
    };
    Ok(record.with_v0(v0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_factors_have_zero_mse() {
        let a = array![[1.0, 0.5], [2.0, -1.0], [0.3, 4.0]];
        let r = mse(&a, &a).unwrap();
        assert_eq!(r.mse, 0.0);
        assert_eq!(r.permutation, vec![0, 1]);
    }

    #[test]
    fn permuted_and_rescaled_columns_match() {
        let truth = array![[1.0, 0.5, 3.0], [2.0, -1.0, 0.0], [0.3, 4.0, 1.0]];
        let mut est = Array2::zeros((3, 3));
        est.column_mut(0).assign(&truth.column(2).mapv(|v| 4.0 * v));
        est.column_mut(1).assign(&truth.column(0).mapv(|v| 0.5 * v));
        est.column_mut(2).assign(&truth.column(1).mapv(|v| 2.0 * v));
        let r = mse(&est, &truth).unwrap();
        assert_eq!(r.mse, 0.0);
        assert_eq!(r.permutation, vec![1, 2, 0]);
    }

    #[test]
    fn orthogonal_unit_columns() {
        let r = mse(&array![[1.0], [0.0]], &array![[0.0], [1.0]]).unwrap();
        assert!((r.mse - 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_column_is_degenerate() {
        let a = array![[1.0, 0.0], [1.0, 0.0]];
        let b = array![[1.0, 1.0], [1.0, 2.0]];
        assert!(matches!(mse(&a, &b), Err(Error::Degenerate(_))));
        assert!(matches!(mse(&b, &a), Err(Error::Degenerate(_))));
    }

    #[test]
    fn assignment_handles_known_case() {
        let cost = array![[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]];
        let p = match_assignment(&cost);
        let total: f64 = p.iter().enumerate().map(|(r, &s)| cost[[r, s]]).sum();
        assert_eq!(total, 5.0);
        assert_eq!(match_exhaustive(&cost), p);
    }

    #[test]
    fn rank_one_permutation_search() {
        let cost = array![[0.7]];
        assert_eq!(match_exhaustive(&cost), vec![0]);
        assert_eq!(match_assignment(&cost), vec![0]);
    }

    fn model(vals: &[f64]) -> KruskalModel {
        KruskalModel::new(vec![
            Array2::from_shape_vec((2, 1), vals[0..2].to_vec()).unwrap(),
            Array2::from_shape_vec((2, 1), vals[2..4].to_vec()).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn stationary_lyapunov_is_zero() {
        let m = model(&[1.0, 2.0, 3.0, 4.0]);
        let cfg = LyapunovConfig::default();
        let h = LyapunovHistory {
            previous: Some(&m),
            current: Some(&m),
            next: &m,
        };
        let rec = lyapunov(&cfg, &GeneratorSpec::euclidean(), h, 0.7, 0.0, 0.1, 0.0).unwrap();
        assert_eq!(rec.value, 0.0);
    }

    #[test]
    fn lyapunov_reduces_to_gap_without_motion() {
        let m = model(&[1.0, 2.0, 3.0, 4.0]);
        let cfg = LyapunovConfig {
            v0: Some(0.2),
            ..LyapunovConfig::default()
        };
        let h = LyapunovHistory {
            previous: Some(&m),
            current: Some(&m),
            next: &m,
        };
        let rec = lyapunov(&cfg, &GeneratorSpec::euclidean(), h, 0.7, 0.0, 0.1, 0.0).unwrap();
        assert!((rec.value - 0.1 * 0.5).abs() < 1e-16);
    }

    #[test]
    fn lyapunov_terms_are_weighted_divergences() {
        let a = model(&[1.0, 2.0, 3.0, 4.0]);
        let b = model(&[1.0, 2.5, 3.0, 4.0]);
        let c = model(&[1.0, 2.5, 2.0, 4.0]);
        let cfg = LyapunovConfig {
            alpha: 1.0,
            gamma_bar: 0.5,
            tau: 2.0,
            epsilon: 0.3,
            m2: 0.0,
            v0: Some(0.0),
        };
        let eta = 0.2;
        let h = LyapunovHistory {
            previous: Some(&a),
            current: Some(&b),
            next: &c,
        };
        let rec = lyapunov(&cfg, &GeneratorSpec::euclidean(), h, 1.0, 0.4, eta, 0.05).unwrap();
        let fwd = (1.0 - 0.2 - 0.1 - 0.05 - 0.1) * 0.5;
        let bwd = 0.2 * (0.25 + 0.3 / 0.6) * 0.125;
        let gam = 0.2 / 2.0 * 0.4;
        assert!((rec.forward_term - fwd).abs() < 1e-15);
        assert!((rec.backward_term - bwd).abs() < 1e-15);
        assert!((rec.gamma_term - gam).abs() < 1e-15);
        assert!((rec.value - (0.2 + fwd + bwd + gam)).abs() < 1e-15);
    }

    #[test]
    fn lyapunov_without_history_is_state_error() {
        let m = model(&[1.0, 2.0, 3.0, 4.0]);
        let h = LyapunovHistory {
            previous: None,
            current: Some(&m),
            next: &m,
        };
        let cfg = LyapunovConfig::default();
        assert!(matches!(
            lyapunov(&cfg, &GeneratorSpec::euclidean(), h, 0.0, 0.0, 0.1, 0.0),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn lyapunov_config_rejects_negative_forward_coefficient() {
        let cfg = LyapunovConfig {
            alpha: 20.0,
            ..LyapunovConfig::default()
        };
        assert!(matches!(cfg.validate(0.1, 0.0, 0.0), Err(Error::Config(_))));
        assert!(LyapunovConfig::default().validate(0.1, 0.6, 0.8).is_ok());
    }
}
