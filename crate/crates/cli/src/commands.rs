use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use gcp_smd::data::{
    check_domain, factor_paths, generate, into_working_tensor, read_factors, read_tns_with_shape,
    write_factors, write_tns, write_trace_with, SyntheticSpec, TraceFormat,
};
use gcp_smd::estimators::EstimatorKind;
use gcp_smd::losses::{LossKind, LossSpec};
use gcp_smd::metrics::nre;
use gcp_smd::solver::{run, Method, RunOutput, SolverConfig};
use gcp_smd::tensor::{KruskalModel, Tensor};
use gcp_smd::verify::{run_all, VerifyOptions, VerifyReport};
use log::warn;
use serde::Serialize;

use crate::args::{
    parse_distribution, parse_format, CompareArgs, DecomposeArgs, InstanceArgs, SynthesizeArgs,
    VerifyArgs,
};
use crate::error::{usage, CliError, CliResult};
use crate::manifest::{Input, RunManifest, GAMMA_NOTE};

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(gcp_smd::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn synthetic_spec(inst: &InstanceArgs, rank: Option<usize>, seed: u64) -> CliResult<SyntheticSpec> {
    let dims = inst
        .shape
        .clone()
        .ok_or_else(|| usage("missing --shape"))?
        .0;
    let dist = parse_distribution(
        inst.dist
            .as_deref()
            .ok_or_else(|| usage("missing --dist"))?,
    )?;
    let rank = rank.ok_or_else(|| usage("missing --rank"))?;
    let spec = SyntheticSpec {
        dims,
        rank,
        distribution: dist,
        a_max: inst.a_max.unwrap_or(gcp_smd::solver::DEFAULT_INIT_MAX),
        seed,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    Ok(spec)
}

fn notes_for(loss: LossKind) -> Vec<String> {
    if loss == LossKind::Gamma {
        vec![GAMMA_NOTE.to_string()]
    } else {
        Vec::new()
    }
}

pub struct SynthesizeOutcome {
    pub manifest: RunManifest,
    pub tensor_path: PathBuf,
    pub factor_paths: Vec<PathBuf>,
}

/// Writes `<prefix>.tns`, `<prefix>_mode<n>.csv` and `<prefix>.manifest.json`.
pub fn synthesize(args: &SynthesizeArgs) -> CliResult<SynthesizeOutcome> {
    let spec = synthetic_spec(&args.instance, args.rank, args.seed)?;
    let (tensor, planted) = generate(&spec).map_err(CliError::data)?;
    let dir = &args.output.out_dir;
    ensure_dir(dir)?;
    let prefix = args
        .output
        .prefix
        .clone()
        .unwrap_or_else(|| "synthetic".to_string());
    let tensor_path = dir.join(format!("{prefix}.tns"));
    write_tns(&tensor, &tensor_path).map_err(CliError::data)?;
    let factor_paths = write_factors(&planted, dir, &prefix).map_err(CliError::data)?;
    let manifest_path = dir.join(format!("{prefix}.manifest.json"));
    let mut manifest = RunManifest::new("synthesize", Input::Synthetic { spec: spec.clone() });
    manifest.seeds = vec![spec.seed];
    manifest.outputs = std::iter::once(tensor_path.clone())
        .chain(factor_paths.iter().cloned())
        .chain(std::iter::once(manifest_path.clone()))
        .collect();
    if spec.distribution.loss() == LossKind::Gamma {
        manifest.notes.push(GAMMA_NOTE.to_string());
    }
    manifest.write(&manifest_path)?;
    Ok(SynthesizeOutcome {
        manifest,
        tensor_path,
        factor_paths,
    })
}

/// Comma-separated CSV paths, or the stem `<stem>_mode<n>.csv`.
pub fn truth_paths(arg: &str) -> CliResult<Vec<PathBuf>> {
    if arg.contains(',') {
        return Ok(arg.split(',').map(|p| PathBuf::from(p.trim())).collect());
    }
    let single = PathBuf::from(arg);
    if single.is_file() {
        return Ok(vec![single]);
    }
    let stem = Path::new(arg);
    let dir = stem.parent().unwrap_or(Path::new(""));
    let name = stem
        .file_name()
        .ok_or_else(|| usage(format!("--truth {arg:?} names no files")))?
        .to_string_lossy();
    let mut paths = Vec::new();
    for n in 1.. {
        let p = factor_paths(dir, &name, n)
            .pop()
            .expect("one path per mode");
        if !p.is_file() {
            break;
        }
        paths.push(p);
    }
    if paths.is_empty() {
        return Err(usage(format!("--truth {arg:?}: no {name}_mode1.csv found")));
    }
    Ok(paths)
}

fn load_input(input: &Input) -> CliResult<(Tensor, Option<KruskalModel>)> {
    match input {
        Input::Synthetic { spec } => {
            let (t, m) = generate(spec).map_err(CliError::data)?;
            Ok((t, Some(m)))
        }
        Input::File { path, shape } => {
            let sparse = read_tns_with_shape(path, shape.as_deref()).map_err(CliError::data)?;
            Ok((into_working_tensor(sparse), None))
        }
    }
}

fn load_truth(paths: &[PathBuf], tensor: &Tensor) -> CliResult<Option<KruskalModel>> {
    if paths.is_empty() {
        return Ok(None);
    }
    let model = read_factors(paths).map_err(CliError::data)?;
    if model.shape().dims() != tensor.shape().dims() {
        return Err(CliError::Data(gcp_smd::Error::Contract(format!(
            "planted factors have shape {:?}, tensor has {:?}",
            model.shape().dims(),
            tensor.shape().dims()
        ))));
    }
    Ok(Some(model))
}

fn prepare(config: &SolverConfig, tensor: &Tensor) -> CliResult<()> {
    config
        .validate(tensor.shape())
        .map_err(|e| usage(e.to_string()))?;
    check_domain(tensor, &config.loss).map_err(CliError::data)
}

pub struct DecomposeOutcome {
    pub manifest: RunManifest,
    pub output: RunOutput,
    pub trace_path: PathBuf,
    pub model_paths: Vec<PathBuf>,
    pub manifest_path: PathBuf,
}

/// Runs the solver and writes `<prefix>_trace.{csv,json}`,
/// `<prefix>_model_mode<n>.csv` and `<prefix>.manifest.json`.
pub fn decompose(args: &DecomposeArgs) -> CliResult<DecomposeOutcome> {
    let (config, input, truth, format) = match &args.manifest {
        Some(path) => {
            let m = RunManifest::read(path)?;
            if m.command != "decompose" {
                return Err(usage(format!(
                    "{} records a {:?} run, not decompose",
                    path.display(),
                    m.command
                )));
            }
            let cfg = m
                .solver
                .ok_or_else(|| usage(format!("{} has no solver section", path.display())))?;
            (
                cfg,
                m.input,
                m.truth,
                m.trace_format.unwrap_or(TraceFormat::Csv),
            )
        }
        None => {
            let path = args
                .input
                .as_ref()
                .ok_or_else(|| usage("missing --input (or --manifest)"))?;
            let truth = match &args.truth {
                Some(t) => truth_paths(t)?.iter().map(|p| absolute(p)).collect(),
                None => Vec::new(),
            };
            let input = Input::File {
                path: absolute(path),
                shape: args.shape.clone().map(|d| d.0),
            };
            (
                args.solver.resolve(None)?,
                input,
                truth,
                parse_format(args.format.as_deref())?,
            )
        }
    };
    let (tensor, generated) = load_input(&input)?;
    prepare(&config, &tensor)?;
    let planted = match load_truth(&truth, &tensor)? {
        Some(m) => Some(m),
        None => generated,
    };

    let dir = &args.output.out_dir;
    ensure_dir(dir)?;
    let prefix = args
        .output
        .prefix
        .clone()
        .unwrap_or_else(|| "run".to_string());
    let ext = match format {
        TraceFormat::Csv => "csv",
        TraceFormat::Json => "json",
    };
    let trace_path = dir.join(format!("{prefix}_trace.{ext}"));
    let model_stem = format!("{prefix}_model");
    let model_paths = factor_paths(dir, &model_stem, tensor.shape().order());
    let manifest_path = dir.join(format!("{prefix}.manifest.json"));

    let mut manifest = RunManifest::new("decompose", input);
    manifest.seeds = vec![config.seed];
    manifest.truth = truth;
    manifest.trace_format = Some(format);
    manifest.notes = notes_for(config.loss.kind);
    manifest.outputs = std::iter::once(trace_path.clone())
        .chain(model_paths.iter().cloned())
        .chain(std::iter::once(manifest_path.clone()))
        .collect();
    manifest.solver = Some(config.clone());

    let output = run(&config, &tensor, planted.as_ref()).map_err(CliError::numerical)?;
    write_trace_with(
        &output.trace,
        Some(&manifest.to_json()),
        &trace_path,
        format,
    )
    .map_err(CliError::data)?;
    write_factors(&output.model, dir, &model_stem).map_err(CliError::data)?;
    manifest.write(&manifest_path)?;
    Ok(DecomposeOutcome {
        manifest,
        output,
        trace_path,
        model_paths,
        manifest_path,
    })
}

/// One grid cell of `compare`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutcome {
    pub method: String,
    pub seed: u64,
    pub diverged: bool,
    /// First evaluated iteration with NRE at or below the threshold.
    pub iterations_to_threshold: Option<usize>,
    pub final_nre: Option<f64>,
    pub final_mse: Option<f64>,
}

/// Per-method medians. Diverged runs count as never reaching the threshold
/// and are left out of the final-value medians.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub method: String,
    pub runs: usize,
    pub diverged: usize,
    /// `None` when the median run did not reach the threshold in budget.
    pub median_iterations: Option<f64>,
    pub median_final_nre: Option<f64>,
    pub median_final_mse: Option<f64>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// `itablesmd-saga` style labels.
pub fn parse_method_label(label: &str) -> CliResult<(Method, EstimatorKind)> {
    let (m, e) = label
        .split_once('-')
        .ok_or_else(|| usage(format!("method {label:?}: expected <method>-<estimator>")))?;
    let method = m.parse::<Method>().map_err(|e| usage(e.to_string()))?;
    let est = e
        .parse::<EstimatorKind>()
        .map_err(|e| usage(e.to_string()))?;
    Ok((method, est))
}

pub fn summarize(method: &str, runs: &[RunOutcome]) -> CompareRow {
    let iters: Vec<f64> = runs
        .iter()
        .map(|r| {
            r.iterations_to_threshold
                .map_or(f64::INFINITY, |i| i as f64)
        })
        .collect();
    let nres: Vec<f64> = runs.iter().filter_map(|r| r.final_nre).collect();
    let mses: Vec<f64> = runs.iter().filter_map(|r| r.final_mse).collect();
    CompareRow {
        method: method.to_string(),
        runs: runs.len(),
        diverged: runs.iter().filter(|r| r.diverged).count(),
        median_iterations: median(&iters).filter(|v| v.is_finite()),
        median_final_nre: median(&nres),
        median_final_mse: median(&mses),
    }
}

fn cell(v: Option<f64>, missing: &str) -> String {
    v.map_or_else(|| missing.to_string(), |x| x.to_string())
}

pub fn summary_csv(rows: &[CompareRow]) -> String {
    let mut s = String::from(
        "method,runs,diverged,median_iterations_to_threshold,median_final_nre,median_final_mse\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.method,
            r.runs,
            r.diverged,
            cell(r.median_iterations, "budget"),
            cell(r.median_final_nre, ""),
            cell(r.median_final_mse, "")
        );
    }
    s
}

pub fn runs_csv(runs: &[RunOutcome]) -> String {
    let mut s = String::from("method,seed,status,iterations_to_threshold,final_nre,final_mse\n");
    for r in runs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.method,
            r.seed,
            if r.diverged { "diverged" } else { "completed" },
            r.iterations_to_threshold
                .map_or_else(|| "budget".to_string(), |i| i.to_string()),
            cell(r.final_nre, ""),
            cell(r.final_mse, "")
        );
    }
    s
}

/// Runs one configuration and measures it against `threshold`.
pub fn run_cell(
    config: &SolverConfig,
    label: &str,
    tensor: &Tensor,
    planted: Option<&KruskalModel>,
    threshold: f64,
) -> RunOutcome {
    match run(config, tensor, planted) {
        Ok(out) => {
            let last = out.trace.final_record();
            RunOutcome {
                method: label.to_string(),
                seed: config.seed,
                diverged: false,
                iterations_to_threshold: out
                    .trace
                    .records
                    .iter()
                    .find(|r| r.nre <= threshold)
                    .map(|r| r.iteration),
                final_nre: last.map(|r| r.nre),
                final_mse: last.and_then(|r| r.mse_mean),
            }
        }
        Err(e) => {
            warn!("{label} seed {}: {e}", config.seed);
            RunOutcome {
                method: label.to_string(),
                seed: config.seed,
                diverged: true,
                iterations_to_threshold: None,
                final_nre: None,
                final_mse: None,
            }
        }
    }
}

pub struct CompareOutcome {
    pub manifest: RunManifest,
    pub threshold: f64,
    pub rows: Vec<CompareRow>,
    pub runs: Vec<RunOutcome>,
    pub summary_path: PathBuf,
}

pub fn compare(args: &CompareArgs) -> CliResult<CompareOutcome> {
    let (tensor, planted, input, loss_default) = match &args.input {
        Some(path) => {
            let input = Input::File {
                path: absolute(path),
                shape: args.instance.shape.clone().map(|d| d.0),
            };
            let (tensor, _) = load_input(&input)?;
            let truth = match &args.truth {
                Some(t) => truth_paths(t)?,
                None => Vec::new(),
            };
            let planted = load_truth(&truth, &tensor)?;
            (tensor, planted, input, None)
        }
        None => {
            let spec = synthetic_spec(&args.instance, args.solver.rank, args.data_seed)?;
            let (tensor, planted) = generate(&spec).map_err(CliError::data)?;
            let loss = spec.distribution.loss();
            (tensor, Some(planted), Input::Synthetic { spec }, Some(loss))
        }
    };
    let base = args.solver.resolve(loss_default)?;
    prepare(&base, &tensor)?;
    let threshold = match (args.threshold, &planted) {
        (Some(t), _) => t,
        (None, Some(p)) => {
            let t = nre(&LossSpec::new(base.loss.kind), &tensor, p).map_err(CliError::numerical)?;
            t + 0.01 * t.abs()
        }
        (None, None) => return Err(usage("--threshold is required without a planted model")),
    };
    let methods = args.method_list()?;
    let seeds = args.seed_list()?;
    if methods.is_empty() || seeds.is_empty() {
        return Err(usage("need at least one method and one seed"));
    }
    let mut cells = Vec::new();
    for label in &methods {
        let (method, estimator) = parse_method_label(label)?;
        for &seed in &seeds {
            let mut cfg = base.clone();
            cfg.method = method;
            cfg.estimator = estimator;
            cfg.seed = seed;
            cells.push((label.clone(), cfg));
        }
    }

    let jobs = args
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, cells.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<RunOutcome>>> = Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((label, cfg)) = cells.get(i) else {
                    break;
                };
                let out = run_cell(cfg, label, &tensor, planted.as_ref(), threshold);
                results.lock().expect("no poisoned workers")[i] = Some(out);
            });
        }
    });
    let runs: Vec<RunOutcome> = results
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect();
    let rows: Vec<CompareRow> = methods
        .iter()
        .map(|m| {
            let mine: Vec<RunOutcome> = runs.iter().filter(|r| &r.method == m).cloned().collect();
            summarize(m, &mine)
        })
        .collect();

    let dir = &args.output.out_dir;
    ensure_dir(dir)?;
    let prefix = args
        .output
        .prefix
        .clone()
        .unwrap_or_else(|| "compare".to_string());
    let summary_path = dir.join(format!("{prefix}_summary.csv"));
    let runs_path = dir.join(format!("{prefix}_runs.csv"));
    let manifest_path = dir.join(format!("{prefix}.manifest.json"));
    fs::write(&summary_path, summary_csv(&rows)).map_err(|e| io_err(&summary_path, e))?;
    fs::write(&runs_path, runs_csv(&runs)).map_err(|e| io_err(&runs_path, e))?;
    let mut manifest = RunManifest::new("compare", input);
    manifest.notes = notes_for(base.loss.kind);
    manifest.solver = Some(base);
    manifest.methods = methods;
    manifest.threshold = Some(threshold);
    manifest.seeds = seeds;
    manifest.outputs = vec![summary_path.clone(), runs_path, manifest_path.clone()];
    manifest.write(&manifest_path)?;
    Ok(CompareOutcome {
        manifest,
        threshold,
        rows,
        runs,
        summary_path,
    })
}

pub fn verify(args: &VerifyArgs) -> CliResult<VerifyReport> {
    let report = run_all(&VerifyOptions {
        seed: args.seed,
        prox_trials: args.prox_trials,
        mse_pairs: args.mse_pairs,
    })
    .map_err(CliError::numerical)?;
    if let Some(path) = &args.json {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(path, text + "\n").map_err(|e| io_err(path, e))?;
    }
    Ok(report)
}
