//! Element-wise generalized losses `f(x, m)` with their derivatives in the
//! model parameter `m`, link functions and domain guards.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{KruskalModel, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Gaussian,
    Gamma,
    PoissonIdentity,
    PoissonLog,
    BernoulliOdds,
    BernoulliLogit,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Gaussian,
        LossKind::Gamma,
        LossKind::PoissonIdentity,
        LossKind::PoissonLog,
        LossKind::BernoulliOdds,
        LossKind::BernoulliLogit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Gaussian => "gaussian",
            LossKind::Gamma => "gamma",
            LossKind::PoissonIdentity => "poisson-identity",
            LossKind::PoissonLog => "poisson-log",
            LossKind::BernoulliOdds => "bernoulli-odds",
            LossKind::BernoulliLogit => "bernoulli-logit",
        }
    }

    /// Whether the factor matrices must be nonnegative for this loss.
    pub fn requires_nonnegative(self) -> bool {
        matches!(
            self,
            LossKind::Gamma | LossKind::PoissonIdentity | LossKind::BernoulliOdds
        )
    }

    /// Losses whose formula carries `m + ε`.
    pub fn is_guarded(self) -> bool {
        matches!(
            self,
            LossKind::Gamma | LossKind::PoissonIdentity | LossKind::BernoulliOdds
        )
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = LossKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown loss {s:?}; expected one of {names:?}"))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub epsilon: f64,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        LossSpec {
            kind,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn with_epsilon(kind: LossKind, epsilon: f64) -> Result<Self> {
        if kind.is_guarded() && !(epsilon > 0.0) {
            return Err(Error::Config(format!(
                "{kind} needs a positive epsilon, got {epsilon}"
            )));
        }
        Ok(LossSpec { kind, epsilon })
    }

    fn check(&self, x: f64, m: f64) -> Result<()> {
        let bad =
            |what: &str, v: f64| Err(Error::domain(self.kind.name(), format!("{what} = {v}")));
        if !x.is_finite() {
            return bad("x", x);
        }
        if !m.is_finite() {
            return bad("m", m);
        }
        match self.kind {
            LossKind::Gaussian => {}
            LossKind::Gamma => {
                if x < 0.0 {
                    return bad("x", x);
                }
                if m < 0.0 {
                    return bad("m", m);
                }
            }
            LossKind::PoissonIdentity => {
                if x < 0.0 || x.fract() != 0.0 {
                    return bad("x", x);
                }
                if m < 0.0 {
                    return bad("m", m);
                }
            }
            LossKind::PoissonLog => {
                if x < 0.0 || x.fract() != 0.0 {
                    return bad("x", x);
                }
            }
            LossKind::BernoulliOdds => {
                if x != 0.0 && x != 1.0 {
                    return bad("x", x);
                }
                if m < 0.0 {
                    return bad("m", m);
                }
            }
            LossKind::BernoulliLogit => {
                if x != 0.0 && x != 1.0 {
                    return bad("x", x);
                }
            }
        }
        Ok(())
    }

    /// Checks a datum against the loss's data domain, independent of `m`.
    pub fn check_datum(&self, x: f64) -> Result<()> {
        let m = if self.kind.requires_nonnegative() {
            0.0
        } else {
            0.5
        };
        self.check(x, m)
    }

    pub fn loss_value(&self, x: f64, m: f64) -> Result<f64> {
        self.check(x, m)?;
        let eps = self.epsilon;
        Ok(match self.kind {
            LossKind::Gaussian => 0.5 * (x - m) * (x - m),
            LossKind::Gamma => x / (m + eps) + (m + eps).ln(),
            LossKind::PoissonIdentity => m - x * (m + eps).ln(),
            LossKind::PoissonLog => m.exp() - x * m,
            LossKind::BernoulliOdds => (m + 1.0).ln() - x * (m + eps).ln(),
            LossKind::BernoulliLogit => softplus(m) - x * m,
        })
    }

    /// `∂f/∂m`.
    pub fn loss_deriv(&self, x: f64, m: f64) -> Result<f64> {
        self.check(x, m)?;
        let eps = self.epsilon;
        Ok(match self.kind {
            LossKind::Gaussian => m - x,
            LossKind::Gamma => {
                let s = m + eps;
                -x / (s * s) + 1.0 / s
            }
            LossKind::PoissonIdentity => 1.0 - x / (m + eps),
            LossKind::PoissonLog => m.exp() - x,
            LossKind::BernoulliOdds => 1.0 / (m + 1.0) - x / (m + eps),
            LossKind::BernoulliLogit => sigmoid(m) - x,
        })
    }

    /// Mean parameter `ℓ⁻¹(m)`.
    pub fn link_inverse(&self, m: f64) -> f64 {
        match self.kind {
            LossKind::Gaussian | LossKind::Gamma | LossKind::PoissonIdentity => m,
            LossKind::PoissonLog => m.exp(),
            LossKind::BernoulliOdds => m / (1.0 + m),
            LossKind::BernoulliLogit => sigmoid(m),
        }
    }

    /// Rejects models that violate the kind's nonnegativity requirement.
    pub fn check_model(&self, model: &KruskalModel) -> Result<()> {
        if self.kind.requires_nonnegative() {
            for (n, a) in model.factors().iter().enumerate() {
                if let Some(v) = a.iter().find(|v| **v < 0.0) {
                    return Err(Error::domain(
                        self.kind.name(),
                        format!("factor {n} has negative entry {v}"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// The element-wise loss interface the gradient machinery consumes.
pub trait ElementLoss {
    fn value(&self, x: f64, m: f64) -> Result<f64>;
    fn deriv(&self, x: f64, m: f64) -> Result<f64>;

    fn check_model(&self, _model: &KruskalModel) -> Result<()> {
        Ok(())
    }
}

impl ElementLoss for LossSpec {
    fn value(&self, x: f64, m: f64) -> Result<f64> {
        self.loss_value(x, m)
    }

    fn deriv(&self, x: f64, m: f64) -> Result<f64> {
        self.loss_deriv(x, m)
    }

    fn check_model(&self, model: &KruskalModel) -> Result<()> {
        LossSpec::check_model(self, model)
    }
}

/// `log(1 + e^m)` without overflow.
pub fn softplus(m: f64) -> f64 {
    m.max(0.0) + (-m.abs()).exp().ln_1p()
}

pub fn sigmoid(m: f64) -> f64 {
    if m >= 0.0 {
        1.0 / (1.0 + (-m).exp())
    } else {
        let e = m.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObjectiveMode {
    Exact,
    /// Uniform sampling of entries with replacement.
    Sampled {
        samples: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub value: f64,
    pub exact: bool,
    pub samples: usize,
    /// Standard error of a sampled estimate.
    pub std_error: Option<f64>,
}

/// Mean element-wise loss `(1/Π I_n) Σ_i f(x_i, m_i)`.
pub fn objective<L: ElementLoss + ?Sized>(
    loss: &L,
    tensor: &Tensor,
    model: &KruskalModel,
    mode: ObjectiveMode,
) -> Result<ObjectiveValue> {
    let shape = tensor.shape();
    if model.shape() != *shape {
        return Err(Error::Contract(format!(
            "model shape {:?} does not match tensor shape {:?}",
            model.shape().dims(),
            shape.dims()
        )));
    }
    loss.check_model(model)?;
    match mode {
        ObjectiveMode::Exact => {
            let total = shape.total();
            let value = objective_over(loss, tensor, model, 0..total)?;
            Ok(ObjectiveValue {
                value,
                exact: true,
                samples: total,
                std_error: None,
            })
        }
        ObjectiveMode::Sampled { samples, seed } => {
            if samples == 0 {
                return Err(Error::Contract(
                    "sampled objective needs samples > 0".into(),
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let total = shape.total();
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..samples {
                let lin = rng.random_range(0..total);
                let v = entry_loss(loss, tensor, model, lin)?;
                sum += v;
                sum_sq += v * v;
            }
            let k = samples as f64;
            let mean = sum / k;
            let var = if samples > 1 {
                ((sum_sq - k * mean * mean) / (k - 1.0)).max(0.0)
            } else {
                0.0
            };
            Ok(ObjectiveValue {
                value: mean,
                exact: false,
                samples,
                std_error: Some((var / k).sqrt()),
            })
        }
    }
}

/// Mean loss over the given dense offsets.
pub fn objective_over<L: ElementLoss + ?Sized>(
    loss: &L,
    tensor: &Tensor,
    model: &KruskalModel,
    offsets: impl IntoIterator<Item = usize>,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for lin in offsets {
        sum += entry_loss(loss, tensor, model, lin)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Contract("objective over an empty index set".into()));
    }
    Ok(sum / count as f64)
}

fn entry_loss<L: ElementLoss + ?Sized>(
    loss: &L,
    tensor: &Tensor,
    model: &KruskalModel,
    lin: usize,
) -> Result<f64> {
    let idx = tensor.shape().multi_index(lin);
    loss.value(tensor.get_linear(lin), model.entry_unchecked(&idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{DenseTensor, TensorShape};
    use ndarray::Array2;

    fn spec(kind: LossKind) -> LossSpec {
        LossSpec::new(kind)
    }

    #[test]
    fn value_examples() {
        assert_eq!(
            spec(LossKind::PoissonIdentity)
                .loss_value(0.0, 1.0)
                .unwrap(),
            1.0
        );
        assert_eq!(spec(LossKind::Gaussian).loss_value(0.3, 0.3).unwrap(), 0.0);
        let v = spec(LossKind::BernoulliOdds).loss_value(1.0, 1.0).unwrap();
        let expected = 2f64.ln() - (1.0 + 1e-9f64).ln();
        assert!((v - expected).abs() < 1e-15);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-8);
    }

    #[test]
    fn deriv_examples() {
        let unguarded = LossSpec {
            kind: LossKind::PoissonIdentity,
            epsilon: 0.0,
        };
        assert_eq!(unguarded.loss_deriv(1.0, 1.0).unwrap(), 0.0);
        assert_eq!(spec(LossKind::Gaussian).loss_deriv(2.5, 2.5).unwrap(), 0.0);
        assert_eq!(
            spec(LossKind::BernoulliLogit).loss_deriv(0.0, 0.0).unwrap(),
            0.5
        );
    }

    #[test]
    fn link_examples() {
        assert_eq!(spec(LossKind::PoissonLog).link_inverse(0.0), 1.0);
        assert_eq!(spec(LossKind::BernoulliOdds).link_inverse(1.0), 0.5);
        assert_eq!(spec(LossKind::BernoulliLogit).link_inverse(0.0), 0.5);
    }

    #[test]
    fn domain_errors_name_the_kind() {
        let err = spec(LossKind::Gamma).loss_value(-1.0, 1.0).unwrap_err();
        assert!(err.to_string().contains("gamma"), "{err}");
        assert!(spec(LossKind::PoissonIdentity)
            .loss_value(1.5, 1.0)
            .is_err());
        assert!(spec(LossKind::BernoulliOdds).loss_value(2.0, 1.0).is_err());
        assert!(spec(LossKind::BernoulliOdds).loss_deriv(1.0, -0.1).is_err());
        assert!(spec(LossKind::BernoulliLogit).loss_value(1.0, -5.0).is_ok());
        assert!(spec(LossKind::PoissonLog).loss_value(3.0, -2.0).is_ok());
    }

    #[test]
    fn guarded_losses_are_finite_at_zero() {
        for kind in [
            LossKind::Gamma,
            LossKind::PoissonIdentity,
            LossKind::BernoulliOdds,
        ] {
            for x in [0.0, 1.0] {
                let s = spec(kind);
                assert!(s.loss_value(x, 0.0).unwrap().is_finite(), "{kind}");
                assert!(s.loss_deriv(x, 0.0).unwrap().is_finite(), "{kind}");
            }
        }
    }

    #[test]
    fn stable_softplus_does_not_overflow() {
        let s = spec(LossKind::BernoulliLogit);
        assert_eq!(s.loss_value(1.0, 800.0).unwrap(), 0.0);
        assert!((s.loss_value(0.0, -800.0).unwrap()).abs() < 1e-300);
        assert_eq!(s.loss_deriv(0.0, 800.0).unwrap(), 1.0);
    }

    fn in_domain_grid(kind: LossKind) -> Vec<(f64, f64)> {
        let xs: &[f64] = match kind {
            LossKind::Gaussian => &[-1.5, 0.0, 2.0],
            LossKind::Gamma => &[0.0, 0.3, 2.0],
            LossKind::PoissonIdentity | LossKind::PoissonLog => &[0.0, 1.0, 4.0],
            LossKind::BernoulliOdds | LossKind::BernoulliLogit => &[0.0, 1.0],
        };
        let ms: &[f64] = if kind.requires_nonnegative() {
            &[0.05, 0.4, 1.0, 3.0]
        } else {
            &[-2.0, -0.3, 0.0, 0.7, 3.0]
        };
        xs.iter()
            .flat_map(|&x| ms.iter().map(move |&m| (x, m)))
            .collect()
    }

    #[test]
    fn derivative_matches_central_difference() {
        for kind in LossKind::ALL {
            let s = spec(kind);
            for (x, m) in in_domain_grid(kind) {
                let h = 1e-6 * m.abs().max(1.0);
                let fd =
                    (s.loss_value(x, m + h).unwrap() - s.loss_value(x, m - h).unwrap()) / (2.0 * h);
                let an = s.loss_deriv(x, m).unwrap();
                let rel = (fd - an).abs() / an.abs().max(1.0);
                assert!(rel <= 1e-6, "{kind} x={x} m={m}: fd={fd} an={an}");
            }
        }
    }

    #[test]
    fn minimizer_matches_mean() {
        // f(x, ·) is minimized where the mean equals x
        let cases = [
            (LossKind::Gaussian, 1.3, 1.3),
            (LossKind::Gamma, 0.8, 0.8),
            (LossKind::PoissonIdentity, 3.0, 3.0),
            (LossKind::PoissonLog, 3.0, 3f64.ln()),
        ];
        for (kind, x, m_star) in cases {
            let s = spec(kind);
            let grid: Vec<f64> = (1..=4000).map(|k| k as f64 * 1e-3).collect();
            let best = grid
                .iter()
                .copied()
                .min_by(|a, b| {
                    s.loss_value(x, *a)
                        .unwrap()
                        .total_cmp(&s.loss_value(x, *b).unwrap())
                })
                .unwrap();
            assert!((best - m_star).abs() <= 1e-3, "{kind}: {best} vs {m_star}");
            assert!(s.loss_deriv(x, m_star).unwrap().abs() <= 1e-6, "{kind}");
        }
    }

    #[test]
    fn names_round_trip() {
        for kind in LossKind::ALL {
            assert_eq!(kind.name().parse::<LossKind>().unwrap(), kind);
        }
        assert!("kl".parse::<LossKind>().is_err());
    }

    fn ones_model(dims: &[usize], rank: usize) -> KruskalModel {
        KruskalModel::new(dims.iter().map(|&d| Array2::ones((d, rank))).collect()).unwrap()
    }

    #[test]
    fn objective_examples() {
        let shape = TensorShape::new(vec![2, 2, 2]).unwrap();
        let model = ones_model(&[2, 2, 2], 2);
        let recon = Tensor::Dense(model.to_dense());
        let g = objective(
            &spec(LossKind::Gaussian),
            &recon,
            &model,
            ObjectiveMode::Exact,
        )
        .unwrap();
        assert_eq!(g.value, 0.0);
        assert!(g.exact);

        let ones = Tensor::Dense(DenseTensor::new(shape, vec![1.0; 8]).unwrap());
        let rank1 = ones_model(&[2, 2, 2], 1);
        let p = objective(
            &spec(LossKind::PoissonIdentity),
            &ones,
            &rank1,
            ObjectiveMode::Exact,
        )
        .unwrap();
        let expected = 1.0 - (1.0 + 1e-9f64).ln();
        assert!((p.value - expected).abs() < 1e-15);
        assert!((p.value - 1.0).abs() < 1e-8);

        let over = objective_over(&spec(LossKind::PoissonIdentity), &ones, &rank1, 0..8).unwrap();
        assert_eq!(over, p.value);
    }

    #[test]
    fn objective_rejects_infeasible_model_and_shape_mismatch() {
        let mut a = Array2::ones((2, 1));
        a[[0, 0]] = -1.0;
        let model = KruskalModel::new(vec![a, Array2::ones((2, 1))]).unwrap();
        assert!(spec(LossKind::Gamma).check_model(&model).is_err());
        assert!(spec(LossKind::Gaussian).check_model(&model).is_ok());
        let data = Tensor::Dense(model.to_dense());
        let err = objective(&spec(LossKind::Gamma), &data, &model, ObjectiveMode::Exact);
        assert!(matches!(err, Err(Error::Domain { .. })));

        let t = Tensor::Dense(DenseTensor::zeros(TensorShape::new(vec![3, 2]).unwrap()));
        assert!(objective(&spec(LossKind::Gaussian), &t, &model, ObjectiveMode::Exact).is_err());
    }
}
