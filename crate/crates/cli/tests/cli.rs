use h2cov::Error;
use h2cov_cli::{power_iteration, read_csv, run_convergence, spectral_norm, write_csv, CsvRow, Diagnostics, RunConfig, RunRecord, Switch};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use std::process::Command;

fn record(level: usize, eps: f64, time: f64, mem: u64, schedule: Vec<u64>) -> RunRecord {
    RunRecord {
        level,
        eps,
        time_sec: time,
        mem_bytes: mem,
        schedule,
        diagnostics: Diagnostics {
            n_panels: 16,
            c_sp: 4,
            depth: 2,
            zeta: 1.0,
            q_bar: 0.5,
            far_blocks: 0,
            near_blocks: 16,
            kl_rank: 3,
        },
        iterations: 1,
        eps_dense: None,
    }
}

#[test]
fn power_iteration_diagonal() {
    let r = power_iteration(2, |x| DVector::from_vec(vec![2.0 * x[0], x[1]]), 1e-4, 10_000).unwrap();
    assert!((r.value - 2.0).abs() < 1e-4, "{}", r.value);
}

#[test]
fn power_iteration_zero_operator() {
    let r = power_iteration(5, |x| DVector::zeros(x.len()), 1e-4, 10_000).unwrap();
    assert_eq!((r.value, r.iterations), (0.0, 1));
}

#[test]
fn power_iteration_matches_dense_eigensolver() {
    for seed in 0..5u64 {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let b = DMatrix::from_fn(50, 50, |_, _| next());
        let a = &b + b.transpose();
        let exact = a.clone().symmetric_eigen().eigenvalues.amax();
        let r = power_iteration(50, |x| &a * x, 1e-4, 10_000).unwrap();
        assert!((r.value - exact).abs() < 1e-3 * exact.max(1.0), "seed {seed}: {} vs {exact}", r.value);
        assert!((spectral_norm(a.clone()) - exact).abs() < 1e-10 * exact);
    }
}

#[test]
fn power_iteration_reports_non_convergence() {
    // Two steps cannot reach a tolerance of 1e-12 on this shear.
    let err = power_iteration(2, |x| DVector::from_vec(vec![x[0] + 10.0 * x[1], x[1]]), 1e-12, 2).unwrap_err();
    assert!(matches!(err, Error::NoConvergence { iterations: 2, .. }));
    assert!(power_iteration(2, |x| x.clone(), 0.0, 10).is_err());
}

proptest! {
    #[test]
    fn csv_round_trip(rows in prop::collection::vec(
        (0usize..7, 0.0f64..10.0, 0.0f64..1e4, 0u64..1u64 << 40, prop::collection::vec(1u64..200_000, 1..8)),
        0..6,
    )) {
        let records: Vec<RunRecord> = rows.into_iter().map(|(l, e, t, m, s)| record(l, e, t, m, s)).collect();
        let mut buf = Vec::new();
        write_csv(&mut buf, &records).unwrap();
        let back = read_csv(buf.as_slice()).unwrap();
        let expected: Vec<CsvRow> = records.iter().map(CsvRow::from).collect();
        prop_assert_eq!(back, expected);
    }
}

#[test]
fn csv_header_and_padding() {
    let mut buf = Vec::new();
    write_csv(&mut buf, &[record(0, 0.5, 0.0, 8, vec![1]), record(1, 0.25, 0.0, 16, vec![4, 1])]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text, "L,eps,time,mem,M0,M1\n0,0.5,0,8,1,\n1,0.25,0,16,4,1\n");
}

#[test]
fn single_level_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        lmax: 0,
        oracle: Switch::On,
        timings: Switch::Off,
        csv_out: Some(dir.path().join("a.csv")),
        manifest_out: Some(dir.path().join("a.json")),
        ..RunConfig::default()
    };
    let out = run_convergence(&cfg).unwrap();
    assert_eq!(out.records.len(), 1);
    let r = &out.records[0];
    assert_eq!(r.schedule, vec![1]);
    assert!((r.eps - r.eps_dense.unwrap()).abs() < 1e-4);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("a.json")).unwrap()).unwrap();
    assert_eq!(manifest["outcome"]["records"][0]["level"], 0);
    assert!(manifest["stream_policy"].as_str().unwrap().contains("ChaCha8"));
}

#[test]
fn epsilon_selects_level() {
    let cfg = RunConfig {
        eps: Some(0.3),
        timings: Switch::Off,
        ..RunConfig::default()
    };
    assert_eq!(cfg.finest_level().unwrap(), 2);
    assert_eq!(run_convergence(&cfg).unwrap().records.len(), 3);
}

#[test]
fn resource_cap_gives_partial_results() {
    let cfg = RunConfig {
        lmax: 3,
        mem_cap_bytes: 4 << 20,
        ..RunConfig::default()
    };
    let out = run_convergence(&cfg).unwrap();
    assert!(out.warning.is_some());
    assert!(!out.records.is_empty() && out.records.len() < 4);
}

#[test]
fn invalid_config_is_rejected() {
    for cfg in [
        RunConfig { beta: 0, ..RunConfig::default() },
        RunConfig { eta: -1.0, ..RunConfig::default() },
        RunConfig { eps: Some(2.0), ..RunConfig::default() },
        RunConfig { threads: Some(0), ..RunConfig::default() },
    ] {
        assert!(matches!(run_convergence(&cfg), Err(Error::Config(_) | Error::InvalidArgument(_))));
    }
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_h2cov");
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("out.csv");
    let ok = Command::new(bin)
        .args(["--lmax", "1", "--timings", "off", "--threads", "2", "--law", "uniform", "--csv-out"])
        .arg(&csv)
        .status()
        .unwrap();
    assert_eq!(ok.code(), Some(0));
    assert_eq!(read_csv(std::fs::File::open(&csv).unwrap()).unwrap().len(), 2);
    for bad in [&["--law", "cauchy"][..], &["--beta", "0"], &["--oracle", "maybe"], &["--geometry", "torus"], &["--nope"]] {
        let st = Command::new(bin).args(bad).status().unwrap();
        assert_eq!(st.code(), Some(2), "{bad:?}");
    }
    let capped = Command::new(bin).args(["--lmax", "3", "--mem-cap-mib", "4"]).output().unwrap();
    assert_eq!(capped.status.code(), Some(3));
}
