use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use htmm::commands::{self, EstimateArgs, MomentsArgs, SimulateArgs, VerifyArgs, EXIT_FAILURE, EXIT_OK};
use htmm::config::{to_json, MomentsParams};
use htmm::htmm_core::estimator::{FitResult, Nu0Mode};
use htmm::htmm_core::inner::{q00_from_inner, theta_from_inner, thin_theta, CameraModel, InnerAlexaParams};
use htmm::htmm_core::markov::OuterModelSpec;
use htmm::htmm_core::moments::{moment_set, MomentSet, MomentsError, SecondOrderParams};
use htmm::htmm_core::simulator::SimulationConfig;
use htmm::io::{read_matrix, read_traces};
use htmm::manifest::{RunManifest, MANIFEST_NAME};
use htmm::verify::Status;
use tempfile::TempDir;

fn r1_config(m: usize, t_len: usize) -> SimulationConfig {
    let inner = InnerAlexaParams::new(0.8, 0.98, 10.0).unwrap();
    let q00 = q00_from_inner(&inner);
    let spec = OuterModelSpec::new(1, vec![vec![q00], vec![1.0 - q00]], vec![1.0, 0.0]).unwrap();
    let camera = CameraModel { a: 10.0, f2: 2.0, o: 100.0, sigma: vec![5.0], p_d: 0.5 };
    SimulationConfig { spec, inner, camera, m, t_len, seed: 3, replicates: 1 }
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, bytes).unwrap();
    p
}

fn simulate_args(config: PathBuf, out: PathBuf) -> SimulateArgs {
    SimulateArgs { config, out, seed: None, replicates: None }
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_NAME)).unwrap()).unwrap()
}

#[test]
fn minimal_config_gives_one_trace_file() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "sim.json", &to_json(&r1_config(1, 40)));
    let out = dir.path().join("out");
    let outcome = commands::simulate(&simulate_args(cfg.clone(), out.clone())).unwrap();
    assert_eq!(outcome.exit_code, EXIT_OK);
    let text = fs::read_to_string(out.join("traces.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,y"));
    assert_eq!(lines.count(), 40);
    let m = manifest(&out);
    assert_eq!(m.command, "simulate");
    assert_eq!(m.seed, Some(3));
    assert_eq!(m.config_path.as_deref(), Some(cfg.as_path()));
    assert_eq!(m.outputs, vec![out.join("traces.csv")]);
}

#[test]
fn simulation_is_deterministic_per_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "sim.json", &to_json(&r1_config(2, 30)));
    let run = |name: &str, seed: u64| {
        let out = dir.path().join(name);
        let args = SimulateArgs { config: cfg.clone(), out: out.clone(), seed: Some(seed), replicates: Some(4) };
        commands::simulate(&args).unwrap();
        fs::read(out.join("traces.csv")).unwrap()
    };
    assert_eq!(run("a", 9), run("b", 9));
    assert_ne!(run("a", 9), run("c", 10));
}

#[test]
fn replicate_bundles_carry_a_summary() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "sim.json", &to_json(&r1_config(2, 25)));
    let out = dir.path().join("out");
    let args = SimulateArgs { config: cfg, out: out.clone(), seed: None, replicates: Some(300) };
    let outcome = commands::simulate(&args).unwrap();
    assert_eq!(outcome.outputs.len(), 2);
    let traces = read_traces(&out.join("traces.csv")).unwrap();
    assert_eq!(traces.len(), 300);
    assert!(traces.iter().enumerate().all(|(i, t)| t.replicate == i as u64 && t.y.len() == 25));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("t,mu_hat,var_hat,mu,var\n"));
    assert_eq!(summary.lines().count(), 26);
}

#[test]
fn malformed_config_leaves_no_files() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "bad.json", br#"{"spec": {"r": 1, "q": [[0.9], [0.1]], "nu": [1, 0]}, "inner": "#);
    let out = dir.path().join("out");
    assert!(commands::simulate(&simulate_args(cfg, out.clone())).is_err());
    assert!(!out.exists());

    // bad value deep in the document: the error names the field
    let mut v = serde_json::to_value(r1_config(1, 10)).unwrap();
    v["inner"]["p"] = serde_json::json!("high");
    let cfg = write(dir.path(), "typed.json", v.to_string().as_bytes());
    let err = commands::simulate(&simulate_args(cfg, out.clone())).unwrap_err().to_string();
    assert!(err.contains("inner.p"), "{err}");
    assert!(!out.exists());

    let mut bad = r1_config(1, 10);
    bad.camera.sigma = vec![1.0, 2.0];
    let cfg = write(dir.path(), "sigma.json", &to_json(&bad));
    let err = commands::simulate(&simulate_args(cfg, out.clone())).unwrap_err().to_string();
    assert!(err.contains("camera.sigma"), "{err}");
    assert!(!out.exists());
}

fn moments_params(m: f64) -> MomentsParams {
    let cfg = r1_config(1, 10);
    let mut gamma = cfg.second_order_params().unwrap();
    gamma.m = m;
    MomentsParams { gamma, camera: cfg.camera }
}

#[test]
fn moments_files_reproduce_in_process_values() {
    let dir = TempDir::new().unwrap();
    let params = moments_params(3.0);
    let cfg = write(dir.path(), "params.json", &to_json(&params));
    let out = dir.path().join("out");
    commands::moments(&MomentsArgs { config: cfg, t_len: 30, out: out.clone() }).unwrap();

    let set = moment_set(&params.gamma, &params.camera, 30).unwrap();
    let mu = htmm::io::read_columns(&out.join("mu.csv"), &["t", "mu"]).unwrap();
    assert_eq!(mu[0], (1..=30).map(f64::from).collect::<Vec<_>>());
    assert!(mu[1].iter().zip(&set.mu).all(|(a, b)| a.to_bits() == b.to_bits()));
    // starting bright, the first frame carries m theta1
    let first = params.gamma.m * params.gamma.theta.theta1;
    assert!((mu[1][0] - first).abs() < 1e-12 * first);

    let sigma = read_matrix(&out.join("sigma.csv")).unwrap();
    assert_eq!(sigma, sigma.transpose());
    for (a, b) in sigma.iter().zip(set.sigma.iter()) {
        assert_eq!(a.to_bits(), b.to_bits(), "{a} vs {b}");
    }
    assert_eq!(manifest(&out).command, "moments");
}

#[test]
fn invalid_moment_parameters_are_rejected() {
    let dir = TempDir::new().unwrap();
    let mut params = moments_params(1.0);
    params.gamma.alpha0[0] += 0.1;
    let cfg = write(dir.path(), "params.json", &to_json(&params));
    let out = dir.path().join("out");
    assert!(commands::moments(&MomentsArgs { config: cfg, t_len: 5, out: out.clone() }).is_err());
    assert!(!out.exists());
}

fn estimate_args(dir: &Path, trace: PathBuf, grid: Vec<usize>) -> EstimateArgs {
    let camera = write(dir, "camera.json", &to_json(&r1_config(1, 1).camera));
    EstimateArgs {
        trace,
        camera,
        out: dir.join("fit"),
        config: None,
        m_grid: Some(grid),
        r: Some(1),
        nu0: Some(Nu0Mode::Fixed(1.0)),
        seed: None,
    }
}

#[test]
fn single_grid_point_gives_a_single_profile_entry() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "sim.json", &to_json(&r1_config(2, 60)));
    commands::simulate(&simulate_args(cfg, dir.path().join("sim"))).unwrap();
    let args = estimate_args(dir.path(), dir.path().join("sim/traces.csv"), vec![3]);
    let outcome = commands::estimate(&args).unwrap();
    let fit: FitResult = serde_json::from_str(&fs::read_to_string(args.out.join("fit.json")).unwrap()).unwrap();
    assert_eq!(fit.profile.len(), 1);
    assert_eq!(fit.m_hat, 3);
    assert!(outcome.report.contains("m_hat = 3"));
    assert_eq!(outcome.exit_code, if fit.diagnostics.converged { EXIT_OK } else { 2 });
}

#[test]
fn empty_trace_file_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let trace = write(dir.path(), "empty.csv", b"t,y\n");
    let args = estimate_args(dir.path(), trace, vec![1, 2]);
    let err = commands::estimate(&args).unwrap_err().to_string();
    assert!(err.contains("no rows"), "{err}");
    assert!(!args.out.exists());

    let trace = write(dir.path(), "gap.csv", b"t,y\n1,2.0\n3,1.0\n");
    let err = commands::estimate(&estimate_args(dir.path(), trace, vec![1])).unwrap_err().to_string();
    assert!(err.contains("expected t = 2"), "{err}");
}

#[test]
fn verify_passes_skips_and_fails() {
    let dir = TempDir::new().unwrap();
    let run = |budget: Option<u64>, f: htmm::verify::MomentsFn| {
        commands::verify(&VerifyArgs { budget, seed: 0, out: dir.path().join("v") }, f).unwrap()
    };
    let healthy = run(None, moment_set);
    assert_eq!(healthy.exit_code, EXIT_OK, "{}", healthy.report);
    assert!(!healthy.report.contains("SKIP"));

    let small = run(Some(1000), moment_set);
    assert_eq!(small.exit_code, EXIT_OK);
    let table = fs::read_to_string(dir.path().join("v/verify.csv")).unwrap();
    assert!(table.contains("enumeration_r3_t8,SKIP"), "{table}");
    assert!(!table.contains("FAIL"));

    // moments with a covariance that is slightly off
    fn corrupted(g: &SecondOrderParams, c: &CameraModel, t: usize) -> Result<MomentSet, MomentsError> {
        let mut set = moment_set(g, c, t)?;
        if t > 1 {
            set.sigma[(1, 0)] *= 1.0 + 1e-6;
        }
        Ok(set)
    }
    let broken = run(None, corrupted);
    assert_eq!(broken.exit_code, EXIT_FAILURE);
    assert!(broken.report.contains("failed: spectral_vs_matrix_power"), "{}", broken.report);
    let suite = htmm::verify::VerifySuite { moments: corrupted, ..Default::default() };
    assert!(matches!(suite.run_check("enumeration_r1_t6").status, Status::Fail(_)));
}

#[test]
fn calibration_recovers_the_gain() {
    use htmm::htmm_core::simulator::simulate_calibration_stack;
    let dir = TempDir::new().unwrap();
    let camera = CameraModel { a: 40.0, f2: 2.0, o: 100.0, sigma: vec![4.0], p_d: 1.0 };
    let intensities: Vec<f64> = (0..60).map(|i| 5.0 * 1.06f64.powi(i)).collect();
    let stats = simulate_calibration_stack(&camera, &intensities, 400, 5);
    let rows = stats.iter().map(|(m, v)| vec![m.to_string(), v.to_string()]);
    let csv = write(dir.path(), "stats.csv", &htmm::io::to_csv(&["mean", "var"], rows));
    let out = dir.path().join("cal");
    commands::calibrate(&commands::CalibrateArgs { stats: csv, f2: 2.0, out: out.clone() }).unwrap();
    let cal: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("calibration.json")).unwrap()).unwrap();
    let a = cal["a"].as_f64().unwrap();
    assert!((a - 40.0).abs() < 0.05 * 40.0, "a = {a}");
}

#[test]
fn single_file_and_bundle_give_the_same_fit() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "sim.json", &to_json(&r1_config(1, 40)));
    let args = SimulateArgs { config: cfg, out: dir.path().join("sim"), seed: None, replicates: Some(2) };
    commands::simulate(&args).unwrap();
    let traces = read_traces(&dir.path().join("sim/traces.csv")).unwrap();
    let single = write(dir.path(), "one.csv", &htmm::io::traces_csv(&traces[..1]));
    let a = commands::estimate(&estimate_args(dir.path(), single, vec![1, 2])).unwrap();
    let fit_a: FitResult = serde_json::from_str(&fs::read_to_string(dir.path().join("fit/fit.json")).unwrap()).unwrap();
    commands::estimate(&estimate_args(dir.path(), dir.path().join("sim/traces.csv"), vec![1, 2])).unwrap();
    let fits: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(dir.path().join("fit/fits.json")).unwrap()).unwrap();
    let fit_b: FitResult = serde_json::from_value(fits[0]["result"].clone()).unwrap();
    assert_eq!(fit_a, fit_b);
    assert!(a.report.contains("m_hat"));
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_htmm"))
}

#[test]
fn binary_exit_codes() {
    let dir = TempDir::new().unwrap();
    let bad = write(dir.path(), "bad.json", b"{ not json");
    let status = bin().args(["simulate", "--config"]).arg(&bad).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert_eq!(status.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&status.stderr).contains("bad.json"));
    assert!(!dir.path().join("o").exists());

    let ok = bin().args(["verify", "--budget", "1000", "--quiet", "--out"]).arg(dir.path().join("v")).output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(ok.stdout.is_empty());
    assert!(dir.path().join("v").join(MANIFEST_NAME).exists());

    let cfg = write(dir.path(), "sim.json", &to_json(&r1_config(1, 12)));
    let sim = bin().args(["simulate", "--seed", "4", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join("s")).output().unwrap();
    assert_eq!(sim.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&sim.stdout).contains("simulated 1 trace"));
}

#[test]
fn grid_and_nu0_flags_parse() {
    assert_eq!(commands::parse_m_grid("1-4").unwrap(), vec![1, 2, 3, 4]);
    assert_eq!(commands::parse_m_grid("5, 2,2-3").unwrap(), vec![2, 3, 5]);
    assert!(commands::parse_m_grid("0-2").is_err());
    assert!(commands::parse_m_grid("3-1").is_err());
    assert!(commands::parse_m_grid("").is_err());
    assert_eq!(commands::parse_nu0("free").unwrap(), Nu0Mode::Free);
    assert_eq!(commands::parse_nu0("0.7").unwrap(), Nu0Mode::Fixed(0.7));
    assert!(commands::parse_nu0("1.5").is_err());
}

#[test]
fn theta_of_the_test_config_is_consistent() {
    // guards the fixtures above: detection thinning scales theta1 only
    let cfg = r1_config(1, 5);
    let th = thin_theta(&theta_from_inner(&cfg.inner), cfg.camera.p_d);
    assert_eq!(cfg.second_order_params().unwrap().theta, th);
}
