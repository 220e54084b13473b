//! Coordinate-wise Bregman generators, divergences and the closed-form
//! mirror-prox block update
//!
//! ```text
//! argmin_A  h(A) + <g, A - Ã> + (1/η) D_ψ(A, Ã)
//! ```

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ENTROPY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    /// `ψ(a) = a²/2`
    SquaredEuclidean,
    /// `ψ(a) = a log a`
    NegativeEntropy,
}

impl GeneratorKind {
    pub fn name(self) -> &'static str {
        match self {
            GeneratorKind::SquaredEuclidean => "squared-euclidean",
            GeneratorKind::NegativeEntropy => "negative-entropy",
        }
    }
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared-euclidean" | "euclidean" => Ok(GeneratorKind::SquaredEuclidean),
            "negative-entropy" | "entropy" => Ok(GeneratorKind::NegativeEntropy),
            _ => Err(Error::Config(format!(
                "unknown generator {s:?}; expected squared-euclidean or negative-entropy"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    /// Lower bound applied to entropy iterates so they stay in `int dom ψ`.
    pub floor: f64,
}

impl GeneratorSpec {
    pub fn euclidean() -> Self {
        GeneratorSpec {
            kind: GeneratorKind::SquaredEuclidean,
            floor: DEFAULT_ENTROPY_FLOOR,
        }
    }

    pub fn entropy() -> Self {
        GeneratorSpec {
            kind: GeneratorKind::NegativeEntropy,
            floor: DEFAULT_ENTROPY_FLOOR,
        }
    }

    pub fn new(kind: GeneratorKind) -> Self {
        match kind {
            GeneratorKind::SquaredEuclidean => Self::euclidean(),
            GeneratorKind::NegativeEntropy => Self::entropy(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == GeneratorKind::NegativeEntropy && !(self.floor > 0.0) {
            return Err(Error::Config(format!(
                "entropy floor must be positive, got {}",
                self.floor
            )));
        }
        Ok(())
    }

    fn entropy_arg(&self, a: f64, strict: bool) -> Result<()> {
        if !a.is_finite() || a < 0.0 || (strict && a == 0.0) {
            return Err(Error::domain(
                self.kind.name(),
                format!("argument {a} outside the generator domain"),
            ));
        }
        Ok(())
    }

    /// `Σ ψ(a_ij)`.
    pub fn value(&self, a: &Array2<f64>) -> Result<f64> {
        match self.kind {
            GeneratorKind::SquaredEuclidean => Ok(a.iter().map(|v| 0.5 * v * v).sum()),
            GeneratorKind::NegativeEntropy => a.iter().try_fold(0.0, |acc, &v| {
                self.entropy_arg(v, false)?;
                Ok(acc + if v == 0.0 { 0.0 } else { v * v.ln() })
            }),
        }
    }

    /// Coordinate-wise `∇ψ`.
    pub fn grad(&self, a: &Array2<f64>) -> Result<Array2<f64>> {
        match self.kind {
            GeneratorKind::SquaredEuclidean => Ok(a.clone()),
            GeneratorKind::NegativeEntropy => {
                for &v in a {
                    self.entropy_arg(v, true)?;
                }
                Ok(a.mapv(|v| 1.0 + v.ln()))
            }
        }
    }

    /// `D_ψ(x, y) = Σ ψ(x) − ψ(y) − ψ'(y)(x − y)`.
    pub fn divergence(&self, x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
        if x.dim() != y.dim() {
            return Err(Error::Contract(format!(
                "divergence between shapes {:?} and {:?}",
                x.dim(),
                y.dim()
            )));
        }
        match self.kind {
            GeneratorKind::SquaredEuclidean => Ok(Zip::from(x)
                .and(y)
                .fold(0.0, |acc, &a, &b| acc + 0.5 * (a - b) * (a - b))),
            GeneratorKind::NegativeEntropy => {
                let mut sum = 0.0;
                for (&a, &b) in x.iter().zip(y) {
                    self.entropy_arg(a, false)?;
                    self.entropy_arg(b, true)?;
                    sum += entropy_divergence(a, b);
                }
                Ok(sum)
            }
        }
    }

    /// Residual of the three-point identity; zero up to rounding.
    pub fn three_point_residual(
        &self,
        x: &Array2<f64>,
        y: &Array2<f64>,
        z: &Array2<f64>,
    ) -> Result<f64> {
        let dxz = self.divergence(x, z)?;
        let dxy = self.divergence(x, y)?;
        let dyz = self.divergence(y, z)?;
        let gy = self.grad(y)?;
        let gz = self.grad(z)?;
        let inner = Zip::from(&gy)
            .and(&gz)
            .and(x)
            .and(y)
            .fold(0.0, |acc, &a, &b, &xi, &yi| acc + (a - b) * (xi - yi));
        Ok(dxz - dxy - dyz - inner)
    }

    /// Clamps an extrapolated point into the interior of the domain implied
    /// by this generator and the regularizer's constraint.
    pub fn clamp_to_domain(&self, reg: &Regularizer, a: &mut Array2<f64>) {
        match self.kind {
            GeneratorKind::NegativeEntropy => a.mapv_inplace(|v| v.max(self.floor)),
            GeneratorKind::SquaredEuclidean if reg.nonnegative => a.mapv_inplace(|v| v.max(0.0)),
            GeneratorKind::SquaredEuclidean => {}
        }
    }
}

/// `x log(x/y) − x + y`, with `0 log 0 = 0`.
fn entropy_divergence(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        y
    } else {
        x * (x / y).ln() - x + y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "weight")]
pub enum Penalty {
    None,
    /// `(λ/2) ‖A‖²`
    SquaredL2(f64),
    /// `λ ‖A‖₁`
    L1(f64),
}

/// Block regularizer `h_n`: an optional nonnegativity indicator plus an
/// optional convex penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regularizer {
    pub nonnegative: bool,
    pub penalty: Penalty,
}

impl Regularizer {
    pub const ZERO: Regularizer = Regularizer {
        nonnegative: false,
        penalty: Penalty::None,
    };

    pub const NONNEGATIVE: Regularizer = Regularizer {
        nonnegative: true,
        penalty: Penalty::None,
    };

    pub fn validate(&self) -> Result<()> {
        match self.penalty {
            Penalty::SquaredL2(w) | Penalty::L1(w) if !(w >= 0.0) || !w.is_finite() => {
                Err(Error::Config(format!(
                    "regularizer weight must be finite and >= 0, got {w}"
                )))
            }
            _ => Ok(()),
        }
    }

    /// `h(A)`; infinite outside the nonnegative orthant when constrained.
    pub fn value(&self, a: &Array2<f64>) -> f64 {
        if self.nonnegative && a.iter().any(|&v| v < 0.0) {
            return f64::INFINITY;
        }
        match self.penalty {
            Penalty::None => 0.0,
            Penalty::SquaredL2(w) => 0.5 * w * a.iter().map(|v| v * v).sum::<f64>(),
            Penalty::L1(w) => w * a.iter().map(|v| v.abs()).sum::<f64>(),
        }
    }
}

impl fmt::Display for Regularizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.nonnegative, self.penalty) {
            (false, Penalty::None) => f.write_str("zero"),
            (true, Penalty::None) => f.write_str("nonnegative"),
            (nn, p) => {
                if nn {
                    f.write_str("nonnegative+")?;
                }
                match p {
                    Penalty::SquaredL2(w) => write!(f, "squared-l2:{w}"),
                    Penalty::L1(w) => write!(f, "l1:{w}"),
                    Penalty::None => unreachable!(),
                }
            }
        }
    }
}

impl FromStr for Regularizer {
    type Err = Error;

    /// `zero`, `nonnegative`, `squared-l2:λ`, `l1:λ`, or `nonnegative+<penalty>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "unknown regularizer {s:?}; expected zero, nonnegative, squared-l2:<w>, \
                 l1:<w> or nonnegative+<penalty>"
            ))
        };
        let (nonnegative, rest) = match s {
            "zero" => return Ok(Regularizer::ZERO),
            "nonnegative" | "nonnegative-indicator" => return Ok(Regularizer::NONNEGATIVE),
            _ => match s.strip_prefix("nonnegative+") {
                Some(rest) => (true, rest),
                None => (false, s),
            },
        };
        let (name, weight) = rest.split_once(':').ok_or_else(bad)?;
        let w: f64 = weight.parse().map_err(|_| bad())?;
        let penalty = match name {
            "squared-l2" => Penalty::SquaredL2(w),
            "l1" => Penalty::L1(w),
            _ => return Err(bad()),
        };
        let reg = Regularizer {
            nonnegative,
            penalty,
        };
        reg.validate()?;
        Ok(reg)
    }
}

const SUPPORTED_PAIRS: &str = "squared-euclidean with any regularizer; negative-entropy with \
                               zero, nonnegative, or (nonnegative+)l1";

/// Checks that the pair has a closed-form prox.
pub fn check_supported(gen: &GeneratorSpec, reg: &Regularizer) -> Result<()> {
    gen.validate()?;
    reg.validate()?;
    if gen.kind == GeneratorKind::NegativeEntropy && matches!(reg.penalty, Penalty::SquaredL2(_)) {
        return Err(Error::Config(format!(
            "no closed-form prox for {} with {reg}; supported pairs: {SUPPORTED_PAIRS}",
            gen.kind
        )));
    }
    Ok(())
}

/// Closed-form solution of the mirror-prox subproblem, coordinate-wise.
pub fn mirror_prox_step(
    gen: &GeneratorSpec,
    reg: &Regularizer,
    anchor: &Array2<f64>,
    grad: &Array2<f64>,
    eta: f64,
) -> Result<Array2<f64>> {
    check_supported(gen, reg)?;
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::Contract(format!(
            "stepsize must be positive, got {eta}"
        )));
    }
    if anchor.dim() != grad.dim() {
        return Err(Error::Contract(format!(
            "anchor {:?} and gradient {:?} shapes differ",
            anchor.dim(),
            grad.dim()
        )));
    }
    let out = match gen.kind {
        GeneratorKind::SquaredEuclidean => {
            let mut out = Zip::from(anchor)
                .and(grad)
                .map_collect(|&a, &g| a - eta * g);
            match reg.penalty {
                Penalty::None => {}
                Penalty::SquaredL2(w) => out.mapv_inplace(|v| v / (1.0 + eta * w)),
                Penalty::L1(w) => {
                    let t = eta * w;
                    out.mapv_inplace(|v| v.signum() * (v.abs() - t).max(0.0));
                }
            }
            if reg.nonnegative {
                out.mapv_inplace(|v| v.max(0.0));
            }
            out
        }
        GeneratorKind::NegativeEntropy => {
            if let Some(a) = anchor.iter().find(|&&a| !(a > 0.0) || !a.is_finite()) {
                return Err(Error::domain(
                    gen.kind.name(),
                    format!("anchor entry {a} outside int dom ψ"),
                ));
            }
            let shift = match reg.penalty {
                Penalty::L1(w) => w,
                _ => 0.0,
            };
            let floor = gen.floor;
            Zip::from(anchor)
                .and(grad)
                .map_collect(|&a, &g| (a * (-eta * (g + shift)).exp()).max(floor))
        }
    };
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain(
            gen.kind.name(),
            "prox step produced a non-finite entry",
        ));
    }
    Ok(out)
}
