//! Block partial-gradient estimators: exact, fiber-sampled SGD, SAGA and
//! SARAH, plus the realized variance-reduction diagnostics `Γ_k`, `Υ_k`.
//!
//! All estimators share one scaling convention. For mode `n` with derivative
//! row `d_j` (length `I_n`) and Khatri-Rao row `h_j` (length `R`) of fiber `j`,
//! the per-fiber gradient is `∇f_j = d_j h_jᵀ / I_n`, and
//!
//! ```text
//! full  = (1 / J_n) Σ_{j ≤ J_n} ∇f_j = (1 / (I_n J_n)) Σ_j d_j h_jᵀ
//! sgd   = (1 / B)   Σ_{j ∈ F}  ∇f_j
//! ```
//!
//! so full, SGD with `B = J_n` and SAGA with `B = J_n` coincide. Sums over
//! fibers always run in ascending fiber order.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ElementLoss;
use crate::tensor::{KruskalModel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Full,
    Sgd,
    Saga,
    Sarah,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Full => "full",
            EstimatorKind::Sgd => "sgd",
            EstimatorKind::Saga => "saga",
            EstimatorKind::Sarah => "sarah",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(EstimatorKind::Full),
            "sgd" => Ok(EstimatorKind::Sgd),
            "saga" => Ok(EstimatorKind::Saga),
            "sarah" => Ok(EstimatorKind::Sarah),
            _ => Err(Error::Config(format!(
                "unknown estimator {s:?}; expected full, sgd, saga or sarah"
            ))),
        }
    }
}

/// One block-gradient query: the model already carries the extrapolated
/// point in block `mode`.
#[derive(Debug, Clone, Copy)]
pub struct GradientRequest<'a> {
    pub model: &'a KruskalModel,
    pub mode: usize,
    /// Sampled fiber rows, distinct.
    pub fibers: &'a [usize],
}

impl<'a> GradientRequest<'a> {
    pub fn new(model: &'a KruskalModel, mode: usize, fibers: &'a [usize]) -> Result<Self> {
        let req = GradientRequest {
            model,
            mode,
            fibers,
        };
        req.validate()?;
        Ok(req)
    }

    fn validate(&self) -> Result<()> {
        if self.mode >= self.model.order() {
            return Err(Error::Index(format!("mode {} out of range", self.mode)));
        }
        if self.fibers.is_empty() {
            return Err(Error::Contract("empty fiber set".into()));
        }
        let count = self.model.shape().fiber_count(self.mode);
        if self.fibers.len() > count {
            return Err(Error::Contract(format!(
                "batch of {} fibers exceeds J_n = {count}",
                self.fibers.len()
            )));
        }
        let mut sorted = self.fibers.to_vec();
        sorted.sort_unstable();
        if let Some(&j) = sorted.last() {
            if j >= count {
                return Err(Error::Index(format!(
                    "fiber {j} out of range for mode {} ({count} fibers)",
                    self.mode
                )));
            }
        }
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract("duplicate fibers in batch".into()));
        }
        Ok(())
    }

    fn sorted_fibers(&self) -> Vec<usize> {
        let mut f = self.fibers.to_vec();
        f.sort_unstable();
        f
    }
}

/// Scratch buffers for per-fiber evaluation.
struct FiberWork {
    h: Array1<f64>,
    m: Array1<f64>,
    x: Array1<f64>,
    d: Array1<f64>,
}

impl FiberWork {
    fn new(rows: usize, rank: usize) -> Self {
        FiberWork {
            h: Array1::zeros(rank),
            m: Array1::zeros(rows),
            x: Array1::zeros(rows),
            d: Array1::zeros(rows),
        }
    }

    /// Fills `h = H_n(j, :)` and `d = f'(X_(n)(j, :), A_n h)`.
    fn eval<L: ElementLoss + ?Sized>(
        &mut self,
        loss: &L,
        tensor: &Tensor,
        model: &KruskalModel,
        n: usize,
        j: usize,
    ) -> Result<()> {
        model.khatri_rao_row_of(n, j, self.h.view_mut());
        model.fiber_from_kr_row(n, self.h.view(), self.m.view_mut());
        tensor.fiber_into(n, j, self.x.view_mut());
        for ((d, &x), &m) in self.d.iter_mut().zip(&self.x).zip(&self.m) {
            *d = loss.deriv(x, m)?;
        }
        Ok(())
    }
}

/// `acc += scale · d hᵀ`
fn add_outer(acc: &mut Array2<f64>, scale: f64, d: ArrayView1<f64>, h: ArrayView1<f64>) {
    for (mut row, &di) in acc.rows_mut().into_iter().zip(d) {
        let s = scale * di;
        Zip::from(&mut row).and(h).for_each(|a, &hr| *a += s * hr);
    }
}

fn check_shapes(tensor: &Tensor, model: &KruskalModel) -> Result<()> {
    if model.shape() != *tensor.shape() {
        return Err(Error::Contract(format!(
            "model shape {:?} does not match tensor shape {:?}",
            model.shape().dims(),
            tensor.shape().dims()
        )));
    }
    Ok(())
}

/// `Σ_{j ∈ fibers} d_j h_jᵀ`, in the given order.
fn fiber_sum<L: ElementLoss + ?Sized>(
    loss: &L,
    tensor: &Tensor,
    model: &KruskalModel,
    n: usize,
    fibers: impl IntoIterator<Item = usize>,
) -> Result<Array2<f64>> {
    let a = model.factor(n);
    let mut work = FiberWork::new(a.nrows(), a.ncols());
    let mut acc = Array2::zeros(a.dim());
    for j in fibers {
        work.eval(loss, tensor, model, n, j)?;
        add_outer(&mut acc, 1.0, work.d.view(), work.h.view());
    }
    Ok(acc)
}

/// Exact block partial gradient of the mean-loss objective with respect to
/// `A_n`.
pub fn full_gradient<L: ElementLoss + ?Sized>(
    loss: &L,
    tensor: &Tensor,
    model: &KruskalModel,
    n: usize,
) -> Result<Array2<f64>> {
    check_shapes(tensor, model)?;
    if n >= model.order() {
        return Err(Error::Index(format!("mode {n} out of range")));
    }
    loss.check_model(model)?;
    let shape = tensor.shape();
    let count = shape.fiber_count(n);
    let mut g = fiber_sum(loss, tensor, model, n, 0..count)?;
    g /= (shape.dims()[n] * count) as f64;
    Ok(g)
}

/// Fiber-sampled estimate `(1/(I_n B)) Σ_{j ∈ F} d_j h_jᵀ`.
pub fn sgd_gradient<L: ElementLoss + ?Sized>(
    loss: &L,
    tensor: &Tensor,
    req: &GradientRequest<'_>,
) -> Result<Array2<f64>> {
    req.validate()?;
    check_shapes(tensor, req.model)?;
    let n = req.mode;
    let fibers = req.sorted_fibers();
    let b = fibers.len();
    let mut g = fiber_sum(loss, tensor, req.model, n, fibers)?;
    g /= (tensor.shape().dims()[n] * b) as f64;
    Ok(g)
}

/// Per-mode SAGA table of stored per-fiber gradients in factored form
/// `d_j h_jᵀ`.
#[derive(Debug, Clone)]
struct SagaTable {
    d: Array2<f64>,
    h: Array2<f64>,
    /// `(1/(I_n J_n)) Σ_j d_j h_jᵀ`, maintained incrementally.
    average: Array2<f64>,
    updates_since_sync: usize,
}

impl SagaTable {
    fn build<L: ElementLoss + ?Sized>(
        loss: &L,
        tensor: &Tensor,
        model: &KruskalModel,
        n: usize,
    ) -> Result<Self> {
        let a = model.factor(n);
        let (rows, rank) = a.dim();
        let count = tensor.shape().fiber_count(n);
        let mut work = FiberWork::new(rows, rank);
        let mut d = Array2::zeros((count, rows));
        let mut h = Array2::zeros((count, rank));
        for j in 0..count {
            work.eval(loss, tensor, model, n, j)?;
            d.row_mut(j).assign(&work.d);
            h.row_mut(j).assign(&work.h);
        }
        let mut table = SagaTable {
            d,
            h,
            average: Array2::zeros((rows, rank)),
            updates_since_sync: 0,
        };
        table.resync();
        Ok(table)
    }

    fn resync(&mut self) {
        let (count, rows) = self.d.dim();
        let mut avg = Array2::zeros((rows, self.h.ncols()));
        for j in 0..count {
            add_outer(&mut avg, 1.0, self.d.row(j), self.h.row(j));
        }
        avg /= (rows * count) as f64;
        self.average = avg;
        self.updates_since_sync = 0;
    }

    fn matches(&self, model: &KruskalModel, n: usize) -> bool {
        let a = model.factor(n);
        self.d.ncols() == a.nrows()
            && self.h.ncols() == a.ncols()
            && self.d.nrows() == model.shape().fiber_count(n)
    }
}

#[derive(Debug, Clone)]
struct SarahMode {
    estimate: Option<Array2<f64>>,
    snapshot: Option<KruskalModel>,
    /// Restart probability is `1/p`.
    p: f64,
}

/// Result of one estimator call.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub gradient: Array2<f64>,
    /// SARAH only: whether this call restarted from the exact gradient.
    pub restarted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VrDiagnostics {
    /// `Γ`: realized mean-squared-error bound term.
    pub gamma: f64,
    /// `Υ`: realized error-norm bound term.
    pub upsilon: f64,
}

/// Persistent estimator state, exclusively owned by one solver run.
#[derive(Debug, Clone)]
pub struct EstimatorState {
    kind: EstimatorKind,
    saga: Vec<Option<SagaTable>>,
    sarah: Vec<SarahMode>,
    rng: ChaCha8Rng,
    last_batch: Vec<usize>,
}

impl EstimatorState {
    /// Initializes per-mode state at `model`: SAGA tables hold the exact
    /// per-fiber gradients, SARAH holds the exact block gradients.
    /// `sarah_p` defaults per mode to `⌈J_n / B⌉`.
    pub fn new<L: ElementLoss + ?Sized>(
        kind: EstimatorKind,
        loss: &L,
        tensor: &Tensor,
        model: &KruskalModel,
        batch: usize,
        sarah_p: Option<f64>,
        seed: u64,
    ) -> Result<Self> {
        check_shapes(tensor, model)?;
        if batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if let Some(p) = sarah_p {
            if !(p >= 1.0) {
                return Err(Error::Config(format!("SARAH p must be >= 1, got {p}")));
            }
        }
        let order = model.order();
        let shape = tensor.shape();
        let mut saga = vec![None; order];
        let mut sarah = Vec::with_capacity(order);
        for (n, slot) in saga.iter_mut().enumerate() {
            let count = shape.fiber_count(n);
            let p = sarah_p.unwrap_or_else(|| count.div_ceil(batch.min(count)) as f64);
            let mut mode = SarahMode {
                estimate: None,
                snapshot: None,
                p,
            };
            match kind {
                EstimatorKind::Saga => *slot = Some(SagaTable::build(loss, tensor, model, n)?),
                EstimatorKind::Sarah => {
                    mode.estimate = Some(full_gradient(loss, tensor, model, n)?);
                    mode.snapshot = Some(model.clone());
                }
                EstimatorKind::Full | EstimatorKind::Sgd => {}
            }
            sarah.push(mode);
        }
        Ok(EstimatorState {
            kind,
            saga,
            sarah,
            rng: ChaCha8Rng::seed_from_u64(seed),
            last_batch: Vec::new(),
        })
    }

    pub fn kind(&self) -> EstimatorKind {
        self.kind
    }

    /// Dispatches on the estimator kind.
    pub fn estimate<L: ElementLoss + ?Sized>(
        &mut self,
        loss: &L,
        tensor: &Tensor,
        req: &GradientRequest<'_>,
    ) -> Result<Estimate> {
        self.last_batch = req.sorted_fibers();
        let plain = |gradient| Estimate {
            gradient,
            restarted: false,
        };
        match self.kind {
            EstimatorKind::Full => full_gradient(loss, tensor, req.model, req.mode).map(plain),
            EstimatorKind::Sgd => sgd_gradient(loss, tensor, req).map(plain),
            EstimatorKind::Saga => self.saga_gradient(loss, tensor, req).map(plain),
            EstimatorKind::Sarah => self.sarah_gradient(loss, tensor, req),
        }
    }

    /// `(1/(I_n B)) Σ_{j∈F} (d_j h_jᵀ − stored_j) + table average`; replaces
    /// the stored entries for `j ∈ F`.
    pub fn saga_gradient<L: ElementLoss + ?Sized>(
        &mut self,
        loss: &L,
        tensor: &Tensor,
        req: &GradientRequest<'_>,
    ) -> Result<Array2<f64>> {
        req.validate()?;
        check_shapes(tensor, req.model)?;
        let n = req.mode;
        let table = self.saga[n]
            .as_mut()
            .ok_or_else(|| Error::State(format!("no SAGA table for mode {n}")))?;
        if !table.matches(req.model, n) {
            return Err(Error::State(format!(
                "SAGA table for mode {n} does not match the model shape"
            )));
        }
        let (rows, rank) = req.model.factor(n).dim();
        let fibers = req.sorted_fibers();
        let b = fibers.len();
        let count = table.d.nrows();
        let mut work = FiberWork::new(rows, rank);
        let mut correction = Array2::zeros((rows, rank));
        for &j in &fibers {
            work.eval(loss, tensor, req.model, n, j)?;
            add_outer(&mut correction, 1.0, work.d.view(), work.h.view());
            add_outer(&mut correction, -1.0, table.d.row(j), table.h.row(j));
            table.d.row_mut(j).assign(&work.d);
            table.h.row_mut(j).assign(&work.h);
        }
        let mut g = &correction / (rows * b) as f64 + &table.average;
        // the table average moves by the same correction, rescaled
        table
            .average
            .scaled_add(1.0 / (rows * count) as f64, &correction);
        table.updates_since_sync += b;
        if table.updates_since_sync >= count {
            table.resync();
        }
        if b == count {
            // telescoped: the estimate is the fresh table average
            g.assign(&table.average);
        }
        Ok(g)
    }

    /// With probability `1/p` the exact block gradient (restart); otherwise
    /// `(1/B) Σ_{j∈F} (∇f_j(current) − ∇f_j(previous)) + previous estimate`.
    pub fn sarah_gradient<L: ElementLoss + ?Sized>(
        &mut self,
        loss: &L,
        tensor: &Tensor,
        req: &GradientRequest<'_>,
    ) -> Result<Estimate> {
        let p = self.sarah[req.mode].p;
        let restart = p <= 1.0 || self.rng.random::<f64>() < 1.0 / p;
        if restart {
            self.sarah_restart(loss, tensor, req)
                .map(|gradient| Estimate {
                    gradient,
                    restarted: true,
                })
        } else {
            self.sarah_recursive(loss, tensor, req)
                .map(|gradient| Estimate {
                    gradient,
                    restarted: false,
                })
        }
    }

    pub fn sarah_restart<L: ElementLoss + ?Sized>(
        &mut self,
        loss: &L,
        tensor: &Tensor,
        req: &GradientRequest<'_>,
    ) -> Result<Array2<f64>> {
        req.validate()?;
        let g = full_gradient(loss, tensor, req.model, req.mode)?;
        let mode = &mut self.sarah[req.mode];
        mode.estimate = Some(g.clone());
        mode.snapshot = Some(req.model.clone());
        Ok(g)
    }

    pub fn sarah_recursive<L: ElementLoss + ?Sized>(
        &mut self,
        loss: &L,
        tensor: &Tensor,
        req: &GradientRequest<'_>,
    ) -> Result<Array2<f64>> {
        req.validate()?;
        check_shapes(tensor, req.model)?;
        let n = req.mode;
        let mode = &mut self.sarah[n];
        let (prev_est, prev_model) = match (&mode.estimate, &mode.snapshot) {
            (Some(e), Some(m)) => (e, m),
            _ => {
                return Err(Error::State(format!(
                    "SARAH recursive step for mode {n} without a previous snapshot"
                )))
            }
        };
        if prev_model.shape() != req.model.shape() || prev_model.rank() != req.model.rank() {
            return Err(Error::State(format!(
                "SARAH snapshot for mode {n} does not match the model shape"
            )));
        }
        let fibers = req.sorted_fibers();
        let (rows, rank) = req.model.factor(n).dim();
        let mut cur = FiberWork::new(rows, rank);
        let mut prev = FiberWork::new(rows, rank);
        let mut diff = Array2::zeros((rows, rank));
        for &j in &fibers {
            cur.eval(loss, tensor, req.model, n, j)?;
            prev.eval(loss, tensor, prev_model, n, j)?;
            add_outer(&mut diff, 1.0, cur.d.view(), cur.h.view());
            add_outer(&mut diff, -1.0, prev.d.view(), prev.h.view());
        }
        let g = &diff / (rows * fibers.len()) as f64 + prev_est;
        mode.estimate = Some(g.clone());
        mode.snapshot = Some(req.model.clone());
        Ok(g)
    }

    /// Realized `Γ`, `Υ` for the last call on mode `req.mode`, given the exact
    /// block gradient at the same point.
    ///
    /// SAGA: `Γ = (1/(B J_n)) Σ_i ‖∇f_i(current) − stored_i‖²`,
    /// `Υ = (1/√(B J_n)) Σ_i ‖∇f_i(current) − stored_i‖`.
    /// SGD / SARAH: squared error and error norm of the estimate. Full: zero.
    /// Norms are Frobenius.
    pub fn vr_diagnostics<L: ElementLoss + ?Sized>(
        &self,
        loss: &L,
        tensor: &Tensor,
        req: &GradientRequest<'_>,
        estimate: &Array2<f64>,
        exact: &Array2<f64>,
    ) -> Result<VrDiagnostics> {
        match self.kind {
            EstimatorKind::Full => Ok(VrDiagnostics {
                gamma: 0.0,
                upsilon: 0.0,
            }),
            EstimatorKind::Sgd | EstimatorKind::Sarah => {
                let sq: f64 = Zip::from(estimate)
                    .and(exact)
                    .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b));
                Ok(VrDiagnostics {
                    gamma: sq,
                    upsilon: sq.sqrt(),
                })
            }
            EstimatorKind::Saga => {
                let n = req.mode;
                let table = self.saga[n]
                    .as_ref()
                    .ok_or_else(|| Error::State(format!("no SAGA table for mode {n}")))?;
                let (rows, rank) = req.model.factor(n).dim();
                let count = table.d.nrows();
                let b = req.fibers.len() as f64;
                let mut work = FiberWork::new(rows, rank);
                let mut sum_sq = 0.0;
                let mut sum_norm = 0.0;
                let scale = 1.0 / rows as f64;
                for j in 0..count {
                    work.eval(loss, tensor, req.model, n, j)?;
                    let mut sq = 0.0;
                    for i in 0..rows {
                        for r in 0..rank {
                            let v =
                                scale * (work.d[i] * work.h[r] - table.d[[j, i]] * table.h[[j, r]]);
                            sq += v * v;
                        }
                    }
                    sum_sq += sq;
                    sum_norm += sq.sqrt();
                }
                let bj = b * count as f64;
                Ok(VrDiagnostics {
                    gamma: sum_sq / bj,
                    upsilon: sum_norm / bj.sqrt(),
                })
            }
        }
    }

    /// Fibers of the most recent call, sorted.
    pub fn last_batch(&self) -> &[usize] {
        &self.last_batch
    }

    /// Current SAGA table average for mode `n`, if any.
    pub fn saga_average(&self, n: usize) -> Option<&Array2<f64>> {
        self.saga.get(n)?.as_ref().map(|t| &t.average)
    }

    /// Recomputes the SAGA average from the stored table.
    pub fn saga_resync(&mut self, n: usize) {
        if let Some(Some(t)) = self.saga.get_mut(n) {
            t.resync();
        }
    }

    pub fn sarah_p(&self, n: usize) -> f64 {
        self.sarah[n].p
    }

    /// Drops the SARAH snapshot of mode `n`; the next recursive step errors.
    pub fn clear_sarah_snapshot(&mut self, n: usize) {
        self.sarah[n].snapshot = None;
        self.sarah[n].estimate = None;
    }
}
