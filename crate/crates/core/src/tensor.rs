//! Tensor containers, Kruskal models and mode-n fiber algebra.
//!
//! All indices are 0-based. Dense storage is mode-1 fastest (column-major over
//! modes). A mode-n fiber is a row of the mode-n unfolding `X_(n)` (shape
//! `J_n x I_n`); its row index `j` linearizes the remaining modes with the
//! smallest remaining mode varying fastest. That is the row order of the
//! Khatri-Rao product `H_n = A_N ⊙ … ⊙ A_{n+1} ⊙ A_{n-1} ⊙ … ⊙ A_1`, so the
//! unfolding and `H_n` agree by construction.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView1, ArrayViewMut1};

use crate::error::{Error, Result};

/// Highest supported tensor order.
pub const MAX_ORDER: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorShape {
    dims: Vec<usize>,
    total: usize,
}

impl TensorShape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 || dims.len() > MAX_ORDER {
            return Err(Error::Contract(format!(
                "tensor order must be in [2, {MAX_ORDER}], got {}",
                dims.len()
            )));
        }
        if let Some(m) = dims.iter().position(|&d| d == 0) {
            return Err(Error::Contract(format!("mode {m} has size 0")));
        }
        let total = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Contract(format!("shape {dims:?} overflows usize")))?;
        Ok(TensorShape { dims, total })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    /// Number of entries, `Π I_n`.
    pub fn total(&self) -> usize {
        self.total
    }

    /// `J_n = Π_{m≠n} I_m`, the number of mode-n fibers.
    pub fn fiber_count(&self, n: usize) -> usize {
        self.total / self.dims[n]
    }

    fn check_mode(&self, n: usize) -> Result<()> {
        if n >= self.order() {
            return Err(Error::Index(format!(
                "mode {n} out of range for order {}",
                self.order()
            )));
        }
        Ok(())
    }

    pub fn check_index(&self, idx: &[usize]) -> Result<()> {
        if idx.len() != self.order() {
            return Err(Error::Index(format!(
                "multi-index {idx:?} has {} coordinates, tensor order is {}",
                idx.len(),
                self.order()
            )));
        }
        for (m, (&i, &d)) in idx.iter().zip(&self.dims).enumerate() {
            if i >= d {
                return Err(Error::Index(format!(
                    "coordinate {i} out of range for mode {m} of size {d}"
                )));
            }
        }
        Ok(())
    }

    /// Dense offset of a multi-index (mode-1 fastest). Unchecked.
    pub fn linear_index(&self, idx: &[usize]) -> usize {
        let mut lin = 0;
        for (&i, &d) in idx.iter().zip(&self.dims).rev() {
            lin = lin * d + i;
        }
        lin
    }

    pub fn multi_index(&self, mut lin: usize) -> Vec<usize> {
        self.dims
            .iter()
            .map(|&d| {
                let i = lin % d;
                lin /= d;
                i
            })
            .collect()
    }

    /// Coordinates over the modes `≠ n` of mode-n fiber `j`.
    pub fn fiber_to_multi_index(&self, n: usize, j: usize) -> Result<Vec<usize>> {
        self.check_mode(n)?;
        let count = self.fiber_count(n);
        if j >= count {
            return Err(Error::Index(format!(
                "fiber {j} out of range for mode {n} ({count} fibers)"
            )));
        }
        let mut rest = j;
        Ok(self
            .dims
            .iter()
            .enumerate()
            .filter(|&(m, _)| m != n)
            .map(|(_, &d)| {
                let i = rest % d;
                rest /= d;
                i
            })
            .collect())
    }

    /// Inverse of [`fiber_to_multi_index`](Self::fiber_to_multi_index).
    pub fn multi_index_to_fiber(&self, n: usize, others: &[usize]) -> Result<usize> {
        self.check_mode(n)?;
        if others.len() + 1 != self.order() {
            return Err(Error::Index(format!(
                "expected {} coordinates for a mode-{n} fiber, got {}",
                self.order() - 1,
                others.len()
            )));
        }
        let dims: Vec<usize> = self
            .dims
            .iter()
            .enumerate()
            .filter(|&(m, _)| m != n)
            .map(|(_, &d)| d)
            .collect();
        let mut j = 0;
        for (&d, &i) in dims.iter().zip(others).rev() {
            if i >= d {
                return Err(Error::Index(format!("coordinate {i} out of range {d}")));
            }
            j = j * d + i;
        }
        Ok(j)
    }

    /// Full multi-index of entry `i` (along mode n) of fiber `j`. Unchecked.
    pub fn fiber_entry(&self, n: usize, j: usize, i: usize) -> Vec<usize> {
        let mut rest = j;
        self.dims
            .iter()
            .enumerate()
            .map(|(m, &d)| {
                if m == n {
                    i
                } else {
                    let c = rest % d;
                    rest /= d;
                    c
                }
            })
            .collect()
    }

    /// Mode-n fiber containing the entry at `idx`. Unchecked.
    pub fn fiber_of(&self, n: usize, idx: &[usize]) -> usize {
        let mut j = 0;
        for (m, (&i, &d)) in idx.iter().zip(&self.dims).enumerate().rev() {
            if m != n {
                j = j * d + i;
            }
        }
        j
    }

    /// Dense offset of fiber `j` entry 0, and the stride along mode n.
    fn fiber_offset(&self, n: usize, j: usize) -> (usize, usize) {
        let mut stride = 1;
        let mut offset = 0;
        let mut rest = j;
        let mut mode_stride = 0;
        for (m, &d) in self.dims.iter().enumerate() {
            if m == n {
                mode_stride = stride;
            } else {
                offset += (rest % d) * stride;
                rest /= d;
            }
            stride *= d;
        }
        (offset, mode_stride)
    }
}

/// A mode-n fiber identified both by its unfolding row and its coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FiberIndex {
    pub mode: usize,
    pub row: usize,
    pub others: Vec<usize>,
}

impl FiberIndex {
    pub fn new(shape: &TensorShape, mode: usize, row: usize) -> Result<Self> {
        let others = shape.fiber_to_multi_index(mode, row)?;
        Ok(FiberIndex { mode, row, others })
    }

    pub fn all(shape: &TensorShape, mode: usize) -> Result<Vec<Self>> {
        (0..shape.fiber_count(mode))
            .map(|j| FiberIndex::new(shape, mode, j))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: TensorShape,
    values: Vec<f64>,
}

impl DenseTensor {
    /// `values` in mode-1-fastest order.
    pub fn new(shape: TensorShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.total() {
            return Err(Error::Contract(format!(
                "{} values for a tensor with {} entries",
                values.len(),
                shape.total()
            )));
        }
        if let Some(p) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!(
                "non-finite value at entry {:?}",
                shape.multi_index(p)
            )));
        }
        Ok(DenseTensor { shape, values })
    }

    pub fn zeros(shape: TensorShape) -> Self {
        let values = vec![0.0; shape.total()];
        DenseTensor { shape, values }
    }

    pub fn shape(&self) -> &TensorShape {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, idx: &[usize]) -> Result<f64> {
        self.shape.check_index(idx)?;
        Ok(self.values[self.shape.linear_index(idx)])
    }
}

/// Coordinate-format sparse tensor. Absent coordinates read as zero.
#[derive(Debug, Clone)]
pub struct SparseTensor {
    shape: TensorShape,
    entries: Vec<(Vec<usize>, f64)>,
    lookup: HashMap<usize, f64>,
    // per mode: fiber row -> [(position along the mode, value)]
    fibers: Vec<HashMap<usize, Vec<(usize, f64)>>>,
}

impl SparseTensor {
    /// Rejects out-of-bounds and duplicate coordinates.
    pub fn new(shape: TensorShape, entries: Vec<(Vec<usize>, f64)>) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(entries.len());
        let mut fibers = vec![HashMap::new(); shape.order()];
        for (idx, v) in &entries {
            shape.check_index(idx)?;
            if !v.is_finite() {
                return Err(Error::Contract(format!("non-finite value at {idx:?}")));
            }
            if lookup.insert(shape.linear_index(idx), *v).is_some() {
                return Err(Error::Contract(format!("duplicate coordinate {idx:?}")));
            }
            for (n, index) in fibers.iter_mut().enumerate() {
                index
                    .entry(shape.fiber_of(n, idx))
                    .or_insert_with(Vec::new)
                    .push((idx[n], *v));
            }
        }
        Ok(SparseTensor {
            shape,
            entries,
            lookup,
            fibers,
        })
    }

    pub fn shape(&self) -> &TensorShape {
        &self.shape
    }

    pub fn entries(&self) -> &[(Vec<usize>, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, idx: &[usize]) -> Result<f64> {
        self.shape.check_index(idx)?;
        Ok(self
            .lookup
            .get(&self.shape.linear_index(idx))
            .copied()
            .unwrap_or(0.0))
    }

    pub fn to_dense(&self) -> DenseTensor {
        let mut values = vec![0.0; self.shape.total()];
        for (idx, v) in &self.entries {
            values[self.shape.linear_index(idx)] = *v;
        }
        DenseTensor {
            shape: self.shape.clone(),
            values,
        }
    }
}

impl From<&DenseTensor> for SparseTensor {
    fn from(dense: &DenseTensor) -> Self {
        let entries = dense
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(lin, v)| (dense.shape.multi_index(lin), *v))
            .collect();
        SparseTensor::new(dense.shape.clone(), entries).expect("dense tensor is valid")
    }
}

/// Observed data in either layout.
#[derive(Debug, Clone)]
pub enum Tensor {
    Dense(DenseTensor),
    Sparse(SparseTensor),
}

impl Tensor {
    pub fn shape(&self) -> &TensorShape {
        match self {
            Tensor::Dense(t) => t.shape(),
            Tensor::Sparse(t) => t.shape(),
        }
    }

    pub fn get(&self, idx: &[usize]) -> Result<f64> {
        match self {
            Tensor::Dense(t) => t.get(idx),
            Tensor::Sparse(t) => t.get(idx),
        }
    }

    /// Value at a dense offset. Unchecked.
    pub(crate) fn get_linear(&self, lin: usize) -> f64 {
        match self {
            Tensor::Dense(t) => t.values[lin],
            Tensor::Sparse(t) => t.lookup.get(&lin).copied().unwrap_or(0.0),
        }
    }

    /// Writes row `j` of `X_(n)` into `out` (length `I_n`). Unchecked.
    pub fn fiber_into(&self, n: usize, j: usize, mut out: ArrayViewMut1<f64>) {
        match self {
            Tensor::Dense(t) => {
                let (offset, stride) = t.shape.fiber_offset(n, j);
                for (i, o) in out.iter_mut().enumerate() {
                    *o = t.values[offset + i * stride];
                }
            }
            Tensor::Sparse(t) => {
                out.fill(0.0);
                if let Some(nz) = t.fibers[n].get(&j) {
                    for &(i, v) in nz {
                        out[i] = v;
                    }
                }
            }
        }
    }

    /// `X_(n)(fibers, :)`, a `B x I_n` matrix.
    pub fn data_fiber(&self, n: usize, fibers: &[FiberIndex]) -> Result<Array2<f64>> {
        let shape = self.shape();
        shape.check_mode(n)?;
        let mut out = Array2::zeros((fibers.len(), shape.dims()[n]));
        for (b, f) in fibers.iter().enumerate() {
            check_fiber(shape, n, f)?;
            self.fiber_into(n, f.row, out.row_mut(b));
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> DenseTensor {
        match self {
            Tensor::Dense(t) => t.clone(),
            Tensor::Sparse(t) => t.to_dense(),
        }
    }
}

fn check_fiber(shape: &TensorShape, n: usize, f: &FiberIndex) -> Result<()> {
    if f.mode != n {
        return Err(Error::Contract(format!(
            "fiber of mode {} passed for mode {n}",
            f.mode
        )));
    }
    if f.row >= shape.fiber_count(n) {
        return Err(Error::Index(format!(
            "fiber {} out of range for mode {n}",
            f.row
        )));
    }
    Ok(())
}

/// CP model `M = Σ_r A_1(:, r) ∘ … ∘ A_N(:, r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KruskalModel {
    factors: Vec<Array2<f64>>,
}

impl KruskalModel {
    pub fn new(factors: Vec<Array2<f64>>) -> Result<Self> {
        if factors.len() < 2 || factors.len() > MAX_ORDER {
            return Err(Error::Contract(format!(
                "model order must be in [2, {MAX_ORDER}], got {}",
                factors.len()
            )));
        }
        let rank = factors[0].ncols();
        if rank == 0 {
            return Err(Error::Contract("rank must be positive".into()));
        }
        for (n, a) in factors.iter().enumerate() {
            if a.ncols() != rank {
                return Err(Error::Contract(format!(
                    "factor {n} has {} columns, expected {rank}",
                    a.ncols()
                )));
            }
            if a.nrows() == 0 {
                return Err(Error::Contract(format!("factor {n} has no rows")));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract(format!(
                    "factor {n} has non-finite entries"
                )));
            }
        }
        Ok(KruskalModel { factors })
    }

    pub fn rank(&self) -> usize {
        self.factors[0].ncols()
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn factors(&self) -> &[Array2<f64>] {
        &self.factors
    }

    pub fn factor(&self, n: usize) -> &Array2<f64> {
        &self.factors[n]
    }

    /// Replaces block `n`; the caller keeps the shape fixed.
    pub fn set_factor(&mut self, n: usize, a: Array2<f64>) {
        debug_assert_eq!(a.dim(), self.factors[n].dim());
        self.factors[n] = a;
    }

    /// Swaps in block `n`, returning the old one.
    pub(crate) fn replace_factor(&mut self, n: usize, a: Array2<f64>) -> Array2<f64> {
        debug_assert_eq!(a.dim(), self.factors[n].dim());
        std::mem::replace(&mut self.factors[n], a)
    }

    pub fn into_factors(self) -> Vec<Array2<f64>> {
        self.factors
    }

    pub fn shape(&self) -> TensorShape {
        TensorShape::new(self.factors.iter().map(|a| a.nrows()).collect())
            .expect("validated at construction")
    }

    /// `Σ_r Π_n A_n(i_n, r)`.
    pub fn model_entry(&self, idx: &[usize]) -> Result<f64> {
        self.shape().check_index(idx)?;
        Ok(self.entry_unchecked(idx))
    }

    pub(crate) fn entry_unchecked(&self, idx: &[usize]) -> f64 {
        (0..self.rank())
            .map(|r| {
                self.factors
                    .iter()
                    .zip(idx)
                    .map(|(a, &i)| a[[i, r]])
                    .product::<f64>()
            })
            .sum()
    }

    /// Row of `H_n` for the fiber with coordinates `others` over modes `≠ n`.
    pub(crate) fn khatri_rao_row_into(
        &self,
        n: usize,
        others: &[usize],
        mut out: ArrayViewMut1<f64>,
    ) {
        out.fill(1.0);
        let modes = (0..self.order()).filter(|&m| m != n);
        for (m, &i) in modes.zip(others) {
            out *= &self.factors[m].row(i);
        }
    }

    /// Like `khatri_rao_row_into` but from the fiber row index.
    pub(crate) fn khatri_rao_row_of(&self, n: usize, j: usize, mut out: ArrayViewMut1<f64>) {
        out.fill(1.0);
        let mut rest = j;
        for (m, a) in self.factors.iter().enumerate() {
            if m == n {
                continue;
            }
            let d = a.nrows();
            out *= &a.row(rest % d);
            rest /= d;
        }
    }

    /// `H_n(fibers, :)`, a `B x R` matrix, without materializing `H_n`.
    pub fn khatri_rao_rows(&self, n: usize, fibers: &[FiberIndex]) -> Result<Array2<f64>> {
        let shape = self.shape();
        shape.check_mode(n)?;
        let mut out = Array2::zeros((fibers.len(), self.rank()));
        for (b, f) in fibers.iter().enumerate() {
            check_fiber(&shape, n, f)?;
            self.khatri_rao_row_into(n, &f.others, out.row_mut(b));
        }
        Ok(out)
    }

    /// Sampled rows of `H_n A_nᵀ`, a `B x I_n` matrix.
    pub fn model_fiber(&self, n: usize, fibers: &[FiberIndex]) -> Result<Array2<f64>> {
        let h = self.khatri_rao_rows(n, fibers)?;
        Ok(h.dot(&self.factors[n].t()))
    }

    /// `A_n h` for one Khatri-Rao row `h`.
    pub(crate) fn fiber_from_kr_row(
        &self,
        n: usize,
        h: ArrayView1<f64>,
        mut out: ArrayViewMut1<f64>,
    ) {
        ndarray::linalg::general_mat_vec_mul(1.0, &self.factors[n], &h, 0.0, &mut out);
    }

    /// Full dense reconstruction. Desk-scale use only.
    pub fn to_dense(&self) -> DenseTensor {
        let shape = self.shape();
        let values = (0..shape.total())
            .map(|lin| self.entry_unchecked(&shape.multi_index(lin)))
            .collect();
        DenseTensor { shape, values }
    }
}
