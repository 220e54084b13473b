use std::collections::HashSet;

use gcp_smd::data::{
    generate, generate_from, read_factors, read_tns, read_trace_csv, read_trace_json,
    trace_csv_header, write_factors, write_tns, write_trace, write_trace_with, Distribution,
    SyntheticSpec, TraceFormat,
};
use gcp_smd::losses::{LossKind, LossSpec};
use gcp_smd::solver::{run, IterationTrace, SolverConfig};
use gcp_smd::tensor::{KruskalModel, SparseTensor, Tensor, TensorShape};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_sparse(dims: &[usize], nnz: usize, seed: u64) -> SparseTensor {
    let shape = TensorShape::new(dims.to_vec()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(nnz);
    while entries.len() < nnz {
        let idx: Vec<usize> = dims.iter().map(|&d| rng.random_range(0..d)).collect();
        if seen.insert(idx.clone()) {
            // Values that do not survive a short decimal print.
            let v = rng.random_range(-1e3..1e3) / 7.0;
            entries.push((idx, v));
        }
    }
    SparseTensor::new(shape, entries).unwrap()
}

fn sorted_entries(t: &SparseTensor) -> Vec<(Vec<usize>, u64)> {
    let mut e: Vec<_> = t
        .entries()
        .iter()
        .map(|(i, v)| (i.clone(), v.to_bits()))
        .collect();
    e.sort();
    e
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn tns_round_trip_is_identity(
        dims in prop::collection::vec(12usize..30, 3..=4),
        nnz in 1usize..1000,
        seed: u64,
    ) {
        let t = random_sparse(&dims, nnz, seed);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tns");
        write_tns(&Tensor::Sparse(t.clone()), &p).unwrap();
        let back = read_tns(&p).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert_eq!(sorted_entries(&back), sorted_entries(&t));
    }
}

#[test]
fn thousand_entry_round_trip() {
    let t = random_sparse(&[40, 30, 20], 1000, 5);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.tns");
    write_tns(&Tensor::Sparse(t.clone()), &p).unwrap();
    assert_eq!(sorted_entries(&read_tns(&p).unwrap()), sorted_entries(&t));
}

fn sample_trace() -> IterationTrace {
    let (t, truth) = generate(&SyntheticSpec {
        dims: vec![6, 5, 4],
        rank: 2,
        distribution: Distribution::Poisson,
        a_max: 0.5,
        seed: 3,
    })
    .unwrap();
    let mut cfg = SolverConfig::new(2, LossSpec::new(LossKind::PoissonIdentity));
    cfg.max_iters = 50;
    cfg.track_gamma = true;
    run(&cfg, &t, Some(&truth)).unwrap().trace
}

#[test]
fn csv_and_json_traces_agree_field_by_field() {
    let trace = sample_trace();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("t.csv");
    let json = dir.path().join("t.json");
    write_trace(&trace, &csv, TraceFormat::Csv).unwrap();
    let manifest = serde_json::json!({"note": "x"});
    write_trace_with(&trace, Some(&manifest), &json, TraceFormat::Json).unwrap();
    let rows = read_trace_csv(&csv).unwrap();
    let doc = read_trace_json(&json).unwrap();
    assert_eq!(doc.manifest, Some(manifest));
    assert_eq!(doc.trace, trace);
    assert_eq!(rows.len(), trace.records.len());
    for (row, rec) in rows.iter().zip(&doc.trace.records) {
        assert!(row.matches(rec), "{row:?} vs {rec:?}");
    }
    assert!(rows.iter().any(|r| r.gamma_k.is_some()));
}

#[test]
fn empty_trace_is_header_only_and_one_record_is_one_row() {
    let mut trace = sample_trace();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.csv");
    let full = trace.records.clone();
    trace.records.clear();
    write_trace(&trace, &p, TraceFormat::Csv).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.trim_end(), trace_csv_header(3).join(","));
    trace.records = full[..1].to_vec();
    write_trace(&trace, &p, TraceFormat::Csv).unwrap();
    let rows = read_trace_csv(&p).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].matches(&trace.records[0]));
}

#[test]
fn factor_files_and_generation_are_stable() {
    let spec = SyntheticSpec {
        dims: vec![5, 4, 3],
        rank: 2,
        distribution: Distribution::Gamma,
        a_max: 0.5,
        seed: 11,
    };
    let (a, pa) = generate(&spec).unwrap();
    let (b, pb) = generate(&spec).unwrap();
    assert_eq!(a.to_dense(), b.to_dense());
    assert_eq!(pa, pb);
    let dir = tempfile::tempdir().unwrap();
    let paths = write_factors(&pa, dir.path(), "p").unwrap();
    assert_eq!(read_factors(&paths).unwrap(), pa);
}

/// Mean and variance of one entry over `draws` independent resamples.
fn resample_one(m: f64, dist: Distribution, draws: usize) -> (f64, f64) {
    let planted = KruskalModel::new(vec![
        Array2::from_elem((1, 1), m),
        Array2::from_elem((1, 1), 1.0),
    ])
    .unwrap();
    let xs: Vec<f64> = (0..draws)
        .map(|s| {
            generate_from(&planted, &dist, s as u64)
                .unwrap()
                .get(&[0, 0])
                .unwrap()
        })
        .collect();
    let mean = xs.iter().sum::<f64>() / draws as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (draws - 1) as f64;
    (mean, var)
}

#[test]
fn sampled_entries_match_their_parameterization() {
    let draws = 100_000;
    let m = 0.7;
    // poisson mean m; gamma shape 1 scale m; bernoulli success m / (1 + m)
    for (dist, want) in [
        (Distribution::Poisson, m),
        (Distribution::Gamma, m),
        (Distribution::BernoulliOdds, m / (1.0 + m)),
        (Distribution::Gaussian { sigma: 0.3 }, m),
    ] {
        let (mean, var) = resample_one(m, dist, draws);
        let se = (var / draws as f64).sqrt();
        assert!(
            (mean - want).abs() <= 4.0 * se,
            "{dist}: mean {mean}, want {want} +- {se}"
        );
    }
    let (_, var) = resample_one(m, Distribution::Gamma, draws);
    assert!((var - m * m).abs() < 0.05, "gamma shape-1 variance {var}");
}
