mod common;

use std::path::{Path, PathBuf};
use std::process::Command;

use nalgebra::DMatrix;
use surrogate_uq::basis::BasisSpec;
use surrogate_uq::cli::{
    cmd_demo, cmd_evidence, cmd_fit, cmd_propagate, cmd_trust, cmd_verify, BasisArgs, DemoArgs, EvidenceArgs,
    FitArgs, GprArgs, PropagateArgs, TrainingArgs, TrustArgs, VerifyArgs,
};
use surrogate_uq::io::{self, format_g17, read_artifact, write_propagation_csv};
use surrogate_uq::oracle::random_instance;
use surrogate_uq::par::Execution;
use surrogate_uq::propagate::{basis_moments, propagate_covariance, SurrogateStatus};
use surrogate_uq::surrogate::fit;
use surrogate_uq::Error;
use tempfile::TempDir;

use common::{uniform_input, write_matrix_csv};

struct Files {
    dir: TempDir,
}

impl Files {
    fn new() -> Self {
        Files { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, content: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, content).unwrap();
        p
    }
}

fn training(inputs: &Path, outputs: &Path) -> TrainingArgs {
    TrainingArgs {
        inputs: inputs.to_path_buf(),
        outputs: outputs.to_path_buf(),
    }
}

fn by_degree(d: u32) -> BasisArgs {
    BasisArgs { degree: Some(d), spec: None }
}

fn no_gpr() -> GprArgs {
    GprArgs {
        kernel: None,
        theta_grid: None,
        evidence_weighting: false,
        inputs: None,
        outputs: None,
    }
}

fn propagate_args(artifact: &Path, input: &Path, output: &Path) -> PropagateArgs {
    PropagateArgs {
        artifact: artifact.to_path_buf(),
        input_posterior: input.to_path_buf(),
        output: Some(output.to_path_buf()),
        epsilon: 1e-3,
        exclude_surrogate: false,
        gpr: no_gpr(),
    }
}

/// Writes a seeded instance as CSVs and returns (inputs, outputs) paths.
fn instance_files(f: &Files, n_s: usize, n_a: usize, degree: u32, n_x: usize, seed: u64) -> (PathBuf, PathBuf) {
    let (t, _) = random_instance(n_s, n_a, degree, n_x, 0.3, seed).unwrap();
    let a_names: Vec<String> = (0..n_a).map(|k| format!("a{k}")).collect();
    let x_names: Vec<String> = (0..n_x).map(|x| format!("site{x}")).collect();
    let (ip, op) = (f.path("inputs.csv"), f.path("outputs.csv"));
    write_matrix_csv(&ip, &a_names.iter().map(String::as_str).collect::<Vec<_>>(), t.inputs());
    write_matrix_csv(&op, &x_names.iter().map(String::as_str).collect::<Vec<_>>(), t.outputs());
    (ip, op)
}

fn sample_file(f: &Files, n_a: usize, seed: u64) -> PathBuf {
    let input = uniform_input(300, n_a, -0.8, 0.8, seed);
    let names: Vec<String> = (0..n_a).map(|k| format!("a{k}")).collect();
    let p = f.path("posterior.csv");
    write_matrix_csv(&p, &names.iter().map(String::as_str).collect::<Vec<_>>(), input.samples());
    p
}

#[test]
fn artifact_round_trip_is_bitwise() {
    let f = Files::new();
    let (ip, op) = instance_files(&f, 20, 2, 2, 3, 11);
    let artifact = f.path("fit.json");
    cmd_fit(&FitArgs {
        training: training(&ip, &op),
        basis: by_degree(2),
        artifact: artifact.clone(),
    })
    .unwrap();
    let post_path = sample_file(&f, 2, 12);
    let out = f.path("prop.csv");
    let from_disk = cmd_propagate(&propagate_args(&artifact, &post_path, &out), Execution::Parallel).unwrap();

    let (_, t) = io::read_training(&ip, &op).unwrap();
    let spec = BasisSpec::total_degree(2, io::inferred_domain(t.inputs()).unwrap()).unwrap();
    let post = fit(&t, &spec).unwrap();
    let (_, input) = io::read_input_posterior_file(&post_path).unwrap();
    let m = basis_moments(&spec, &input, Execution::Parallel).unwrap();
    let in_memory = propagate_covariance(&post, &m, true, 1e-3).unwrap();
    assert_eq!(from_disk, in_memory);

    let mut buf = Vec::new();
    write_propagation_csv(&mut buf, &in_memory).unwrap();
    assert_eq!(std::fs::read(&out).unwrap(), buf);
    assert_eq!(read_artifact(&artifact).unwrap().c_hat(), post.c_hat());
}

#[test]
fn fit_with_explicit_spec_recovers_line() {
    let f = Files::new();
    let ip = f.write("in.csv", "a\n-1\n0\n1\n");
    let op = f.write("out.csv", "z\n0\n1\n2\n");
    let spec = f.path("spec.json");
    io::write_json(&spec, &BasisSpec::total_degree(1, vec![[-1.0, 1.0]]).unwrap()).unwrap();
    let artifact = f.path("fit.json");
    let summary = cmd_fit(&FitArgs {
        training: training(&ip, &op),
        basis: BasisArgs { degree: None, spec: Some(spec) },
        artifact: artifact.clone(),
    })
    .unwrap();
    assert!(summary.chi2_min < 1e-28);
    let post = read_artifact(&artifact).unwrap();
    assert!((post.c_hat()[0] - 1.0).abs() < 1e-14);
    assert!((post.c_hat()[1] - 1.0).abs() < 1e-14);
    assert!(summary.to_string().contains("N_s"));
}

#[test]
fn non_finite_output_is_a_located_parse_error() {
    let f = Files::new();
    let ip = f.write("in.csv", "a\n-1\n0\n1\n");
    let op = f.write("out.csv", "z\n0\nNaN\n2\n");
    let err = cmd_fit(&FitArgs {
        training: training(&ip, &op),
        basis: by_degree(1),
        artifact: f.path("fit.json"),
    })
    .unwrap_err();
    assert!(matches!(err, Error::Parse { .. }), "{err:?}");
    let msg = err.to_string();
    assert!(msg.contains('3') && msg.contains('z'), "{msg}");
}

#[test]
fn mismatched_row_counts_are_rejected() {
    let f = Files::new();
    let ip = f.write("in.csv", "a\n-1\n0\n1\n");
    let op = f.write("out.csv", "z\n0\n1\n");
    let err = cmd_fit(&FitArgs {
        training: training(&ip, &op),
        basis: by_degree(1),
        artifact: f.path("fit.json"),
    })
    .unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err:?}");
}

#[test]
fn evidence_ranks_quadratic_first_and_flags_undefined() {
    let f = Files::new();
    let a: Vec<f64> = (0..9).map(|i| -1.0 + 0.25 * i as f64).collect();
    let z: Vec<f64> = a.iter().enumerate().map(|(i, x)| 1.0 - x + 2.0 * x * x + 1e-3 * ((i * 7 % 5) as f64 - 2.0)).collect();
    let ip = f.path("in.csv");
    let op = f.path("out.csv");
    write_matrix_csv(&ip, &["a"], &DMatrix::from_column_slice(9, 1, &a));
    write_matrix_csv(&op, &["z"], &DMatrix::from_column_slice(9, 1, &z));
    let table = f.path("ev.csv");
    let rows = cmd_evidence(
        &EvidenceArgs {
            training: training(&ip, &op),
            degrees: vec![0, 1, 2, 8],
            output: Some(table.clone()),
        },
        Execution::Parallel,
    )
    .unwrap();
    assert_eq!(rows[0].degree, 2);
    assert_eq!(rows.last().unwrap().degree, 8);
    assert_eq!(rows.last().unwrap().status, "evidence-undefined");
    let total: f64 = rows.iter().map(|r| r.posterior_prob).sum();
    assert!((total - 1.0).abs() < 1e-12);
    let text = std::fs::read_to_string(&table).unwrap();
    assert!(text.starts_with("degree,N_p,log_evidence,posterior_prob,status\n"));
    assert!(text.contains("evidence-undefined"));

    let single = cmd_evidence(
        &EvidenceArgs {
            training: training(&ip, &op),
            degrees: vec![1],
            output: None,
        },
        Execution::Sequential,
    )
    .unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!(single[0].posterior_prob, 1.0);
}

#[test]
fn excluding_the_surrogate_term_equates_variances() {
    let f = Files::new();
    let (ip, op) = instance_files(&f, 15, 1, 2, 2, 5);
    let artifact = f.path("fit.json");
    cmd_fit(&FitArgs {
        training: training(&ip, &op),
        basis: by_degree(2),
        artifact: artifact.clone(),
    })
    .unwrap();
    let post_path = sample_file(&f, 1, 6);
    let out = f.path("prop.csv");
    let mut args = propagate_args(&artifact, &post_path, &out);
    args.exclude_surrogate = true;
    let r = cmd_propagate(&args, Execution::Sequential).unwrap();
    assert_eq!(r.status, SurrogateStatus::Excluded);
    let text = std::fs::read_to_string(&out).unwrap();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[2], cols[3], "{line}");
        assert_eq!(cols[8], "excluded");
    }
}

#[test]
fn dof_violation_writes_naive_csv_then_fails() {
    let f = Files::new();
    // N_s = 4, N_p = 3, N_x = 1 leaves one degree of freedom
    let ip = f.write("in.csv", "a\n-1\n-0.3\n0.4\n1\n");
    let op = f.write("out.csv", "z\n1\n0.2\n0.3\n1.1\n");
    let artifact = f.path("fit.json");
    cmd_fit(&FitArgs {
        training: training(&ip, &op),
        basis: by_degree(2),
        artifact: artifact.clone(),
    })
    .unwrap();
    let post_path = f.write("post.csv", "a\n0.1\n0.2\n");
    let out = f.path("prop.csv");
    let err = cmd_propagate(&propagate_args(&artifact, &post_path, &out), Execution::Sequential).unwrap_err();
    assert!(matches!(err, Error::CovarianceUndefined { .. }), "{err:?}");
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.lines().nth(1).unwrap().ends_with("covariance-undefined"));

    let trust = cmd_trust(
        &TrustArgs {
            artifact,
            input_posterior: post_path,
            epsilon: 1e-3,
            output: Some(f.path("trust.csv")),
        },
        Execution::Sequential,
    );
    assert!(matches!(trust, Err(Error::CovarianceUndefined { .. })));
}

#[test]
fn demo_is_deterministic_across_runs_and_modes() {
    let f = Files::new();
    let run = |name: &str, exec| {
        let p = f.path(name);
        let args = DemoArgs {
            n_t: 16,
            output: Some(p.clone()),
            ..DemoArgs::default()
        };
        cmd_demo(&args, exec).unwrap();
        std::fs::read(p).unwrap()
    };
    let a = run("a.csv", Execution::Parallel);
    let b = run("b.csv", Execution::Parallel);
    let c = run("c.csv", Execution::Sequential);
    assert_eq!(a, b);
    assert_eq!(a, c);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 1 + 16 * 2);
}

#[test]
fn demo_rejects_underdetermined_config() {
    let args = DemoArgs {
        n_s: 5,
        ..DemoArgs::default()
    };
    assert!(matches!(cmd_demo(&args, Execution::Sequential), Err(Error::Underdetermined { .. })));
}

#[test]
fn verify_reports_passing_checks() {
    let f = Files::new();
    let out = f.path("verify.json");
    let checks = cmd_verify(
        &VerifyArgs {
            inputs: None,
            outputs: None,
            degree: 0,
            seed: 3,
            output: Some(out.clone()),
        },
        Execution::Parallel,
    )
    .unwrap();
    assert!(checks.iter().all(|c| c.pass), "{checks:?}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), checks.len());
}

#[test]
fn floats_are_written_with_17_digits() {
    assert_eq!(format_g17(0.1), "0.10000000000000001");
    assert_eq!(format_g17(1.0), "1");
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_surrogate-uq"))
}

#[test]
fn binary_exit_codes() {
    let f = Files::new();
    let ip = f.write("in.csv", "a\n-1\n0\n1\n0.5\n-0.5\n");
    let op = f.write("out.csv", "z\n0\n1\n2\n1.4\n0.6\n");
    let bad = f.write("bad.csv", "z\n0\ninf\n2\n1\n1\n");
    let art = f.path("fit.json");

    let ok = binary()
        .args(["fit", "--degree", "1", "--artifact"])
        .arg(&art)
        .arg("--inputs")
        .arg(&ip)
        .arg("--outputs")
        .arg(&op)
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(art.exists());

    let usage = binary().args(["fit", "--degree", "1"]).output().unwrap();
    assert_eq!(usage.status.code(), Some(1));

    let help = binary().arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));

    let parse = binary()
        .args(["fit", "--degree", "1", "--artifact"])
        .arg(f.path("x.json"))
        .arg("--inputs")
        .arg(&ip)
        .arg("--outputs")
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(parse.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&parse.stderr).contains("line 3"));

    let seq = binary()
        .args(["--sequential", "verify", "--seed", "1"])
        .env("SURROGATE_UQ_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(seq.status.code(), Some(0), "{}", String::from_utf8_lossy(&seq.stderr));
}
