//! Planted-model generators, `.tns` sparse tensor files, trace and factor
//! persistence.
//!
//! `.tns` lines hold N 1-based indices and one value, whitespace separated.
//! Lines starting with `#` are comments; a `# shape: I1 I2 ...` comment
//! declares the dimensions, otherwise they are the largest indices seen.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossKind, LossSpec};
use crate::solver::{IterationTrace, TraceRecord};
use crate::tensor::{DenseTensor, KruskalModel, SparseTensor, Tensor, TensorShape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Distribution {
    /// Shape 1, scale `M_i`: mean `M_i`.
    Gamma,
    /// Mean `M_i`.
    Poisson,
    /// Success probability `M_i / (1 + M_i)`.
    BernoulliOdds,
    /// `M_i` plus gaussian noise of standard deviation `sigma`.
    Gaussian { sigma: f64 },
}

impl Distribution {
    pub fn name(&self) -> &'static str {
        match self {
            Distribution::Gamma => "gamma",
            Distribution::Poisson => "poisson",
            Distribution::BernoulliOdds => "bernoulli",
            Distribution::Gaussian { .. } => "gaussian",
        }
    }

    /// Loss family matched to the distribution.
    pub fn loss(&self) -> LossKind {
        match self {
            Distribution::Gamma => LossKind::Gamma,
            Distribution::Poisson => LossKind::PoissonIdentity,
            Distribution::BernoulliOdds => LossKind::BernoulliOdds,
            Distribution::Gaussian { .. } => LossKind::Gaussian,
        }
    }

    pub fn requires_nonnegative(&self) -> bool {
        !matches!(self, Distribution::Gaussian { .. })
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Distribution::Gaussian { sigma } => write!(f, "gaussian:{sigma}"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for Distribution {
    type Err = Error;

    /// `gamma`, `poisson`, `bernoulli`, `gaussian` or `gaussian:<sigma>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(Distribution::Gamma),
            "poisson" => Ok(Distribution::Poisson),
            "bernoulli" | "bernoulli-odds" => Ok(Distribution::BernoulliOdds),
            "gaussian" => Ok(Distribution::Gaussian { sigma: 0.1 }),
            _ => match s.strip_prefix("gaussian:") {
                Some(sigma) => sigma
                    .parse()
                    .map(|sigma| Distribution::Gaussian { sigma })
                    .map_err(|_| Error::Config(format!("bad gaussian sigma {sigma:?}"))),
                None => Err(Error::Config(format!(
                    "unknown distribution {s:?}; expected gamma, poisson, bernoulli or gaussian[:sigma]"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub dims: Vec<usize>,
    pub rank: usize,
    pub distribution: Distribution,
    /// Planted factor entries are uniform on `(0, a_max]`.
    pub a_max: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<TensorShape> {
        let shape = TensorShape::new(self.dims.clone())
            .map_err(|e| Error::Config(format!("bad shape: {e}")))?;
        if self.rank == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        if !(self.a_max > 0.0) || !self.a_max.is_finite() {
            return Err(Error::Config(format!(
                "a_max must be positive, got {}",
                self.a_max
            )));
        }
        if let Distribution::Gaussian { sigma } = self.distribution {
            if !(sigma >= 0.0) || !sigma.is_finite() {
                return Err(Error::Config(format!("sigma must be >= 0, got {sigma}")));
            }
        }
        Ok(shape)
    }
}

/// Planted factors and one observation drawn per entry; deterministic per
/// seed.
pub fn generate(spec: &SyntheticSpec) -> Result<(Tensor, KruskalModel)> {
    let shape = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let factors = shape
        .dims()
        .iter()
        .map(|&d| {
            Array2::from_shape_fn((d, spec.rank), |_| spec.a_max * (1.0 - rng.random::<f64>()))
        })
        .collect();
    let planted = KruskalModel::new(factors)?;
    let tensor = sample_from(&planted, &spec.distribution, &mut rng)?;
    Ok((tensor, planted))
}

/// Draws one observation per entry of `planted`.
pub fn generate_from(
    planted: &KruskalModel,
    distribution: &Distribution,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_from(planted, distribution, &mut rng)
}

fn sample_from(
    planted: &KruskalModel,
    distribution: &Distribution,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if distribution.requires_nonnegative()
        && planted.factors().iter().any(|a| a.iter().any(|&v| v < 0.0))
    {
        return Err(Error::Config(format!(
            "{} data need a nonnegative planted model",
            distribution.name()
        )));
    }
    let means = planted.to_dense();
    let noise = match *distribution {
        Distribution::Gaussian { sigma } => Some(
            Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("gaussian noise: {e}")))?,
        ),
        _ => None,
    };
    let mut values = Vec::with_capacity(means.values().len());
    for &m in means.values() {
        let x = match distribution {
            Distribution::Gamma => {
                if m > 0.0 {
                    Gamma::new(1.0, m)
                        .map_err(|e| Error::Config(format!("gamma({m}): {e}")))?
                        .sample(rng)
                } else {
                    0.0
                }
            }
            Distribution::Poisson => {
                if m > 0.0 {
                    Poisson::new(m)
                        .map_err(|e| Error::Config(format!("poisson({m}): {e}")))?
                        .sample(rng)
                } else {
                    0.0
                }
            }
            Distribution::BernoulliOdds => {
                let p = m / (1.0 + m);
                if rng.random::<f64>() < p {
                    1.0
                } else {
                    0.0
                }
            }
            Distribution::Gaussian { .. } => m + noise.expect("built above").sample(rng),
        };
        values.push(x);
    }
    Ok(Tensor::Dense(DenseTensor::new(
        means.shape().clone(),
        values,
    )?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        detail: detail.into(),
    }
}

fn parse_shape_comment(body: &str) -> Option<&str> {
    let rest = body.trim_start_matches('#').trim_start();
    rest.strip_prefix("shape:").map(str::trim)
}

/// Reads a `.tns` file. Dimensions come from a `# shape:` comment, or else
/// from the largest index per mode.
pub fn read_tns(path: impl AsRef<Path>) -> Result<SparseTensor> {
    read_tns_with_shape(path, None)
}

/// Like [`read_tns`] with externally declared dimensions, which take
/// precedence over a header.
pub fn read_tns_with_shape(path: impl AsRef<Path>, dims: Option<&[usize]>) -> Result<SparseTensor> {
    let path = path.as_ref();
    let reader = open(path)?;
    let mut declared: Option<Vec<usize>> = dims.map(<[usize]>::to_vec);
    let mut order: Option<usize> = declared.as_ref().map(Vec::len);
    let mut entries = Vec::new();
    let mut max_idx: Vec<usize> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let body = line.trim();
        if body.is_empty() {
            continue;
        }
        if body.starts_with('#') {
            if let Some(spec) = parse_shape_comment(body) {
                if dims.is_none() {
                    if !entries.is_empty() {
                        return Err(parse_err(path, lineno, "shape comment after data lines"));
                    }
                    let parsed: std::result::Result<Vec<usize>, _> =
                        spec.split_whitespace().map(str::parse).collect();
                    let parsed = parsed
                        .map_err(|_| parse_err(path, lineno, format!("bad shape {spec:?}")))?;
                    order = Some(parsed.len());
                    declared = Some(parsed);
                }
            }
            continue;
        }
        let fields: Vec<&str> = body.split_whitespace().collect();
        let n = *order.get_or_insert(fields.len().saturating_sub(1));
        if n < 2 || fields.len() != n + 1 {
            return Err(parse_err(
                path,
                lineno,
                format!(
                    "expected {} indices and a value, got {} fields",
                    n.max(2),
                    fields.len()
                ),
            ));
        }
        let mut idx = Vec::with_capacity(n);
        for (m, f) in fields[..n].iter().enumerate() {
            let i: usize = f.parse().map_err(|_| {
                parse_err(path, lineno, format!("bad index {f:?} in mode {}", m + 1))
            })?;
            if i == 0 {
                return Err(Error::Index(format!(
                    "{}:{lineno}: index 0 in mode {}; indices are 1-based",
                    path.display(),
                    m + 1
                )));
            }
            if let Some(d) = &declared {
                if i > d[m] {
                    return Err(Error::Index(format!(
                        "{}:{lineno}: index {i} exceeds dimension {} of mode {}",
                        path.display(),
                        d[m],
                        m + 1
                    )));
                }
            }
            idx.push(i - 1);
        }
        let value: f64 = fields[n]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad value {:?}", fields[n])))?;
        if !value.is_finite() {
            return Err(parse_err(path, lineno, format!("non-finite value {value}")));
        }
        if !seen.insert(idx.clone()) {
            return Err(parse_err(
                path,
                lineno,
                format!("duplicate entry {:?}", one_based(&idx)),
            ));
        }
        if max_idx.is_empty() {
            max_idx = vec![0; n];
        }
        for (mx, &i) in max_idx.iter_mut().zip(&idx) {
            *mx = (*mx).max(i + 1);
        }
        entries.push((idx, value));
    }
    let dims = match declared {
        Some(d) => d,
        None if !max_idx.is_empty() => max_idx,
        None => return Err(parse_err(path, 0, "no entries and no declared shape")),
    };
    let shape = TensorShape::new(dims).map_err(|e| parse_err(path, 0, e.to_string()))?;
    SparseTensor::new(shape, entries)
}

fn one_based(idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|i| i + 1).collect()
}

/// Writes a `# shape:` header and one line per stored entry; dense tensors
/// write every entry.
pub fn write_tns(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    let shape = tensor.shape();
    let dims: Vec<String> = shape.dims().iter().map(usize::to_string).collect();
    writeln!(w, "# shape: {}", dims.join(" ")).map_err(io)?;
    let mut line = String::new();
    let mut emit = |w: &mut BufWriter<File>, idx: &[usize], v: f64| -> std::io::Result<()> {
        line.clear();
        for i in idx {
            line.push_str(&(i + 1).to_string());
            line.push(' ');
        }
        line.push_str(&format!("{v:?}"));
        writeln!(w, "{line}")
    };
    match tensor {
        Tensor::Dense(d) => {
            for (lin, &v) in d.values().iter().enumerate() {
                emit(&mut w, &shape.multi_index(lin), v).map_err(io)?;
            }
        }
        Tensor::Sparse(s) => {
            for (idx, v) in s.entries() {
                emit(&mut w, idx, *v).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

/// Dense when the file lists every entry, sparse otherwise.
pub fn into_working_tensor(sparse: SparseTensor) -> Tensor {
    if sparse.nnz() == sparse.shape().total() {
        Tensor::Dense(sparse.to_dense())
    } else {
        Tensor::Sparse(sparse)
    }
}

/// Rejects data outside the loss domain (e.g. negative counts).
pub fn check_domain(tensor: &Tensor, loss: &LossSpec) -> Result<()> {
    let check = |idx: &[usize], v: f64| {
        loss.check_datum(v).map_err(|e| {
            Error::domain(
                loss.kind.name(),
                format!("entry {:?} = {v}: {e}", one_based(idx)),
            )
        })
    };
    match tensor {
        Tensor::Dense(d) => {
            for (lin, &v) in d.values().iter().enumerate() {
                check(&d.shape().multi_index(lin), v)?;
            }
        }
        Tensor::Sparse(s) => {
            for (idx, v) in s.entries() {
                check(idx, *v)?;
            }
            // implicit zeros must be admissible too
            if s.nnz() < s.shape().total() {
                loss.check_datum(0.0).map_err(|e| {
                    Error::domain(loss.kind.name(), format!("implicit zero entries: {e}"))
                })?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceFormat {
    Csv,
    Json,
}

impl FromStr for TraceFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TraceFormat::Csv),
            "json" => Ok(TraceFormat::Json),
            _ => Err(Error::Config(format!("unknown trace format {s:?}"))),
        }
    }
}

/// `iteration, seconds, nre, mse_mean, mse_mode_1..N, lyapunov, gamma_k`.
pub fn trace_csv_header(order: usize) -> Vec<String> {
    let mut h: Vec<String> = ["iteration", "seconds", "nre", "mse_mean"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((1..=order).map(|n| format!("mse_mode_{n}")));
    h.push("lyapunov".into());
    h.push("gamma_k".into());
    h
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

fn record_row(rec: &TraceRecord, order: usize) -> Vec<String> {
    let mut row = vec![
        rec.iteration.to_string(),
        format!("{:?}", rec.seconds),
        format!("{:?}", rec.nre),
        opt(rec.mse_mean),
    ];
    row.extend((0..order).map(|n| opt(rec.mse.get(n).copied())));
    row.push(opt(rec.lyapunov));
    row.push(opt(rec.gamma_k));
    row
}

/// Trace plus free-form metadata (e.g. a run manifest) for the JSON form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceDocument {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub manifest: Option<serde_json::Value>,
    pub trace: IterationTrace,
}

pub fn write_trace(
    trace: &IterationTrace,
    path: impl AsRef<Path>,
    format: TraceFormat,
) -> Result<()> {
    write_trace_with(trace, None, path, format)
}

/// Writes a trace; the JSON form also carries `manifest` when given.
pub fn write_trace_with(
    trace: &IterationTrace,
    manifest: Option<&serde_json::Value>,
    path: impl AsRef<Path>,
    format: TraceFormat,
) -> Result<()> {
    let path = path.as_ref();
    match format {
        TraceFormat::Csv => {
            let order = trace.metadata.order;
            let mut w = csv::Writer::from_writer(create(path)?);
            let csv_err = |e: csv::Error| Error::Serialization(format!("{}: {e}", path.display()));
            w.write_record(trace_csv_header(order)).map_err(csv_err)?;
            for rec in &trace.records {
                w.write_record(record_row(rec, order)).map_err(csv_err)?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
        TraceFormat::Json => {
            let doc = TraceDocument {
                manifest: manifest.cloned(),
                trace: trace.clone(),
            };
            let mut w = create(path)?;
            serde_json::to_writer_pretty(&mut w, &doc)
                .map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))?;
            writeln!(w).map_err(|e| Error::io(path, e))?;
            w.flush().map_err(|e| Error::io(path, e))
        }
    }
}

/// One parsed CSV trace row; empty cells are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub seconds: f64,
    pub nre: f64,
    pub mse_mean: Option<f64>,
    pub mse: Vec<Option<f64>>,
    pub lyapunov: Option<f64>,
    pub gamma_k: Option<f64>,
}

impl TraceRow {
    /// Field-by-field equality with the record it was written from.
    pub fn matches(&self, rec: &TraceRecord) -> bool {
        self.iteration == rec.iteration
            && self.seconds == rec.seconds
            && self.nre == rec.nre
            && self.mse_mean == rec.mse_mean
            && self.mse.len() >= rec.mse.len()
            && self
                .mse
                .iter()
                .enumerate()
                .all(|(n, v)| *v == rec.mse.get(n).copied())
            && self.lyapunov == rec.lyapunov
            && self.gamma_k == rec.gamma_k
    }
}

pub fn read_trace_csv(path: impl AsRef<Path>) -> Result<Vec<TraceRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_reader(open(path)?);
    let header = r
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let order = header.len().saturating_sub(6);
    if header.iter().collect::<Vec<_>>() != trace_csv_header(order) {
        return Err(parse_err(path, 1, "unexpected trace header"));
    }
    let num = |s: &str, line: usize| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse()
                .map(Some)
                .map_err(|_| parse_err(path, line, format!("bad number {s:?}")))
        }
    };
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(path, line, e.to_string()))?;
        let need = |v: Option<f64>| v.ok_or_else(|| parse_err(path, line, "missing value"));
        rows.push(TraceRow {
            iteration: rec[0]
                .parse()
                .map_err(|_| parse_err(path, line, "bad iteration"))?,
            seconds: need(num(&rec[1], line)?)?,
            nre: need(num(&rec[2], line)?)?,
            mse_mean: num(&rec[3], line)?,
            mse: (0..order)
                .map(|n| num(&rec[4 + n], line))
                .collect::<Result<_>>()?,
            lyapunov: num(&rec[4 + order], line)?,
            gamma_k: num(&rec[5 + order], line)?,
        });
    }
    Ok(rows)
}

pub fn read_trace_json(path: impl AsRef<Path>) -> Result<TraceDocument> {
    let path = path.as_ref();
    serde_json::from_reader(open(path)?)
        .map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))
}

/// `<dir>/<prefix>_mode<n>.csv`, 1-based `n`.
pub fn factor_paths(dir: &Path, prefix: &str, order: usize) -> Vec<PathBuf> {
    (1..=order)
        .map(|n| dir.join(format!("{prefix}_mode{n}.csv")))
        .collect()
}

/// One headerless CSV per mode, one row per factor row.
pub fn write_factors(model: &KruskalModel, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let paths = factor_paths(dir, prefix, model.order());
    for (a, path) in model.factors().iter().zip(&paths) {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(create(path)?);
        for row in a.rows() {
            w.write_record(row.iter().map(|v| format!("{v:?}")))
                .map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(paths)
}

pub fn read_factor(path: &Path) -> Result<Array2<f64>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(open(path)?);
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        if *cols.get_or_insert(rec.len()) != rec.len() {
            return Err(parse_err(path, i + 1, "ragged factor row"));
        }
        for f in rec.iter() {
            values.push(
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(path, i + 1, format!("bad number {f:?}")))?,
            );
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| parse_err(path, 0, "empty factor file"))?;
    Array2::from_shape_vec((rows, cols), values).map_err(|e| parse_err(path, 0, e.to_string()))
}

pub fn read_factors(paths: &[PathBuf]) -> Result<KruskalModel> {
    let factors = paths
        .iter()
        .map(|p| read_factor(p))
        .collect::<Result<Vec<_>>>()?;
    KruskalModel::new(factors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn single_entry_with_shape() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.tns", "1 1 1 3.0\n");
        let t = read_tns_with_shape(&p, Some(&[2, 2, 2])).unwrap();
        assert_eq!(t.nnz(), 1);
        assert_eq!(t.get(&[0, 0, 0]).unwrap(), 3.0);
        assert_eq!(t.shape().dims(), &[2, 2, 2]);
    }

    #[test]
    fn zero_index_is_bounds_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.tns", "# comment\n0 1 1 3.0\n");
        assert!(matches!(read_tns(&p), Err(Error::Index(_))));
        let p = write(dir.path(), "b.tns", "# shape: 2 2 2\n1 3 1 3.0\n");
        assert!(matches!(read_tns(&p), Err(Error::Index(_))));
    }

    #[test]
    fn malformed_lines_report_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.tns", "1 1 1 1.0\n1 2 x 2.0\n");
        match read_tns(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let p = write(dir.path(), "b.tns", "1 1 1 1.0\n1 2 2.0\n");
        assert!(matches!(read_tns(&p), Err(Error::Parse { line: 2, .. })));
        let p = write(dir.path(), "c.tns", "1 1 1 1.0\n1 1 1 2.0\n");
        assert!(matches!(read_tns(&p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn shape_is_inferred_without_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.tns", "1 3 1 1.0\n2 1 4 2.5\n");
        assert_eq!(read_tns(&p).unwrap().shape().dims(), &[2, 3, 4]);
    }

    #[test]
    fn negative_counts_rejected_for_poisson() {
        let shape = TensorShape::new(vec![2, 2]).unwrap();
        let t = Tensor::Sparse(SparseTensor::new(shape, vec![(vec![0, 1], -1.0)]).unwrap());
        assert!(check_domain(&t, &LossSpec::new(LossKind::PoissonIdentity)).is_err());
        assert!(check_domain(&t, &LossSpec::new(LossKind::Gaussian)).is_ok());
    }

    #[test]
    fn bernoulli_with_zero_model_is_all_zero() {
        let zero = KruskalModel::new(vec![Array2::zeros((3, 2)), Array2::zeros((4, 2))]).unwrap();
        let t = generate_from(&zero, &Distribution::BernoulliOdds, 1).unwrap();
        assert!(t.to_dense().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn negative_planted_model_rejected_for_counts() {
        let m = KruskalModel::new(vec![
            ndarray::array![[1.0], [-1.0]],
            ndarray::array![[1.0], [1.0]],
        ])
        .unwrap();
        assert!(matches!(
            generate_from(&m, &Distribution::Poisson, 0),
            Err(Error::Config(_))
        ));
        assert!(generate_from(&m, &Distribution::Gaussian { sigma: 1.0 }, 0).is_ok());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec {
            dims: vec![4, 3, 5],
            rank: 2,
            distribution: Distribution::Gamma,
            a_max: 0.5,
            seed: 9,
        };
        let (a, pa) = generate(&spec).unwrap();
        let (b, pb) = generate(&spec).unwrap();
        assert_eq!(a.to_dense(), b.to_dense());
        assert_eq!(pa, pb);
        assert!(pa
            .factors()
            .iter()
            .all(|f| f.iter().all(|&v| v > 0.0 && v <= 0.5)));
    }

    #[test]
    fn distribution_names_parse() {
        for s in ["gamma", "poisson", "bernoulli"] {
            assert_eq!(s.parse::<Distribution>().unwrap().name(), s);
        }
        assert_eq!(
            "gaussian:0.5".parse::<Distribution>().unwrap(),
            Distribution::Gaussian { sigma: 0.5 }
        );
        assert!("weibull".parse::<Distribution>().is_err());
    }

    #[test]
    fn factor_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = KruskalModel::new(vec![
            ndarray::array![[0.1, 1.0 / 3.0], [2.5e-17, 7.0]],
            ndarray::array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]],
        ])
        .unwrap();
        let paths = write_factors(&m, dir.path(), "model").unwrap();
        assert_eq!(read_factors(&paths).unwrap(), m);
    }
}
