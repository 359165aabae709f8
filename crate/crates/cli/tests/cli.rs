use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use oqsim_cli::compare::ResultTable;
use oqsim_cli::exit;

fn oqsim(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oqsim"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("OQSIM_WORKERS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn column(table_csv: &Path, name: &str) -> Vec<f64> {
    let mut rdr = csv::Reader::from_path(table_csv).unwrap();
    let idx = rdr.headers().unwrap().iter().position(|h| h == name).unwrap();
    rdr.records().map(|r| r.unwrap()[idx].parse().unwrap()).collect()
}

const EXPONENTIAL: &str = r#"
method = "exact_amplitude"
observables = ["sigma_z"]
[system]
preset = "two_level"
omega = 1.0
[coupling]
operator = "sigma_minus"
[bath]
kind = "exponential"
g = 0.3
gamma = 1.0
omega0 = 1.0
[grid]
t_max = 8.0
dt = 0.001
[initial]
state = "excited"
[output]
name = "amp"
density_matrix = true
"#;

/// `A(t) = e^{−γt/2}(cosh(dt/2) + (γ/d) sinh(dt/2))`, `d = √(γ² − 4g)`.
fn closed_form_population(g: f64, gamma: f64, t: f64) -> f64 {
    let d = (gamma * gamma - 4.0 * g).abs().sqrt();
    let a = if gamma * gamma > 4.0 * g {
        (0.5 * d * t).cosh() + gamma / d * (0.5 * d * t).sinh()
    } else {
        (0.5 * d * t).cos() + gamma / d * (0.5 * d * t).sin()
    };
    (a * (-0.5 * gamma * t).exp()).powi(2)
}

#[test]
fn exact_amplitude_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "amp.toml", EXPONENTIAL);
    let o = oqsim(&["simulate", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = dir.path().join("amp.csv");
    let t = column(&csv, "t");
    let p = column(&csv, "rho_0_0_re");
    let sz = column(&csv, "sigma_z_re");
    assert_eq!(t.len(), 8001);
    let worst = t
        .iter()
        .zip(&p)
        .map(|(&t, &p)| (p - closed_form_population(0.3, 1.0, t)).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-6, "worst {worst}");
    assert!(p.iter().zip(&sz).all(|(p, s)| (2.0 * p - 1.0 - s).abs() < 1e-12));
}

#[test]
fn config_errors_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let heom = EXPONENTIAL.replace("exact_amplitude", "heom");
    let cfg = write(dir.path(), "heom.toml", &heom);
    let o = oqsim(&["simulate", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), exit::CONFIG);
    assert!(String::from_utf8_lossy(&o.stderr).contains("depth"));

    let typo = EXPONENTIAL.replace("[grid]", "colour = 3\n[grid]\ntmax = 1.0");
    let cfg = write(dir.path(), "typo.toml", &typo);
    let o = oqsim(&["simulate", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), exit::CONFIG);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bath.colour") && err.contains("grid.tmax"), "{err}");

    let sln = EXPONENTIAL.replace("exact_amplitude", "sln") + "[sln]\nn_traj = 4\n";
    let cfg = write(dir.path(), "sln.toml", &sln);
    let o = oqsim(&["simulate", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), exit::CONFIG);
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
}

#[test]
fn solver_failures_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    // Strong resonant coupling: the amplitude passes through zero.
    let strong = EXPONENTIAL
        .replace("method = \"exact_amplitude\"", "method = \"nmqj\"\nseed = 1")
        .replace("g = 0.3", "g = 1.0")
        .replace("gamma = 1.0", "gamma = 0.5")
        .replace("dt = 0.001", "dt = 0.01")
        + "[nmqj]\nn_traj = 50\n";
    let cfg = write(dir.path(), "strong.toml", &strong);
    assert_eq!(code(&oqsim(&["simulate", cfg.to_str().unwrap()], dir.path())), exit::NUMERICAL);

    // A two-member ensemble that has not jumped when the rate turns negative.
    let tiny = strong
        .replace("g = 1.0", "g = 0.3")
        .replace("omega0 = 1.0", "omega0 = 2.0")
        .replace("n_traj = 50", "n_traj = 2")
        .replace("t_max = 8.0", "t_max = 6.0")
        .replace("seed = 1", "seed = 2");
    let cfg = write(dir.path(), "tiny.toml", &tiny);
    let o = oqsim(&["simulate", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), exit::POSITIVITY, "{}", String::from_utf8_lossy(&o.stderr));

    let budget = EXPONENTIAL.replace("exact_amplitude", "heom").replace("dt = 0.001", "dt = 0.01")
        + "[heom]\ndepth = 8\nmax_ados = 3\n";
    let cfg = write(dir.path(), "budget.toml", &budget);
    assert_eq!(code(&oqsim(&["simulate", cfg.to_str().unwrap()], dir.path())), exit::BUDGET);
}

const SLN_SWEEP: &str = r#"
method = "sln"
seed = 42
observables = ["sigma_z", "sigma_x"]
[system]
preset = "two_level"
omega = 1.0
delta0 = 1.0
[coupling]
operator = "sigma_z"
[bath]
kind = "drude"
lambda = 0.1
gamma = 1.0
beta = 0.1
[grid]
t_max = 1.0
dt = 0.02
[sln]
n_traj = 300
m_max = 1
[output]
name = "sweep"
[sweep]
key = "coupling.strength"
values = [0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0]
"#;

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv" || e == "toml"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn sweep_output_independent_of_worker_count() {
    let src = tempfile::tempdir().unwrap();
    let cfg = write(src.path(), "sweep.toml", SLN_SWEEP);
    let mut outputs = Vec::new();
    for workers in ["1", "4", "8"] {
        let out = tempfile::tempdir().unwrap();
        let o = oqsim(&["--workers", workers, "simulate", cfg.to_str().unwrap()], out.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(files(out.path()));
    }
    assert_eq!(outputs[0].len(), 16);
    assert!(outputs[0] == outputs[1] && outputs[1] == outputs[2]);
    let header = String::from_utf8_lossy(&outputs[0][0].1).lines().next().unwrap().to_string();
    assert_eq!(header, "t,sigma_z_re,sigma_z_im,sigma_z_stderr,sigma_x_re,sigma_x_im,sigma_x_stderr");
}

#[test]
fn repeated_runs_and_env_workers_are_byte_identical() {
    let src = tempfile::tempdir().unwrap();
    let single = SLN_SWEEP.split("[sweep]").next().unwrap().to_string();
    let cfg = write(src.path(), "one.toml", &single);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(code(&oqsim(&["simulate", cfg.to_str().unwrap()], a.path())), 0);
    let o = Command::new(env!("CARGO_BIN_EXE_oqsim"))
        .args(["--out", b.path().to_str().unwrap(), "simulate", cfg.to_str().unwrap()])
        .env("OQSIM_WORKERS", "3")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(files(a.path()), files(b.path()));
}

#[test]
fn seed_override_changes_stochastic_output() {
    let src = tempfile::tempdir().unwrap();
    let single = SLN_SWEEP.split("[sweep]").next().unwrap().to_string();
    let cfg = write(src.path(), "one.toml", &single);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    oqsim(&["simulate", cfg.to_str().unwrap()], a.path());
    oqsim(&["--seed", "7", "simulate", cfg.to_str().unwrap()], b.path());
    let ca = fs::read(a.path().join("sweep.csv")).unwrap();
    let cb = fs::read(b.path().join("sweep.csv")).unwrap();
    assert_ne!(ca, cb);
    let meta = fs::read_to_string(b.path().join("sweep.toml")).unwrap();
    assert!(meta.contains("seed = 7"));
}

#[test]
fn metadata_reruns_reproduce_the_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "amp.toml", &EXPONENTIAL.replace("t_max = 8.0", "t_max = 1.0"));
    assert_eq!(code(&oqsim(&["simulate", cfg.to_str().unwrap()], dir.path())), 0);
    let first = fs::read(dir.path().join("amp.csv")).unwrap();
    let meta = dir.path().join("amp.toml");
    let again = tempfile::tempdir().unwrap();
    assert_eq!(code(&oqsim(&["simulate", meta.to_str().unwrap()], again.path())), 0);
    assert_eq!(first, fs::read(again.path().join("amp.csv")).unwrap());
}

#[test]
fn compare_identical_and_misaligned_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "amp.toml", &EXPONENTIAL.replace("t_max = 8.0", "t_max = 2.0"));
    oqsim(&["simulate", cfg.to_str().unwrap()], dir.path());
    let a = dir.path().join("amp.csv");
    let o = oqsim(&["compare", a.to_str().unwrap(), a.to_str().unwrap(), "--tol", "0"], dir.path());
    assert_eq!(code(&o), 0);
    let report = String::from_utf8_lossy(&o.stdout);
    assert!(report.contains("PASS sigma_z max_abs_diff=0e0"), "{report}");
    assert!(report.contains("trace_distance"));

    let coarse = EXPONENTIAL
        .replace("t_max = 8.0", "t_max = 2.0")
        .replace("dt = 0.001", "dt = 0.002")
        .replace("name = \"amp\"", "name = \"coarse\"");
    let cfg = write(dir.path(), "coarse.toml", &coarse);
    oqsim(&["simulate", cfg.to_str().unwrap()], dir.path());
    let b = dir.path().join("coarse.csv");
    let args = ["compare", a.to_str().unwrap(), b.to_str().unwrap(), "--tol", "1e-5"];
    assert_eq!(code(&oqsim(&args, dir.path())), exit::CONFIG);
    let mut with_flag = args.to_vec();
    with_flag.push("--interpolate");
    assert_eq!(code(&oqsim(&with_flag, dir.path())), 0);

    let tight = ["compare", a.to_str().unwrap(), b.to_str().unwrap(), "--tol", "1e-12", "--interpolate"];
    assert_eq!(code(&oqsim(&tight, dir.path())), exit::COMPARE_FAILED);
}

#[test]
fn tcl2_matches_exact_amplitude_at_weak_coupling() {
    let dir = tempfile::tempdir().unwrap();
    let weak = EXPONENTIAL
        .replace("g = 0.3", "g = 0.01")
        .replace("dt = 0.001", "dt = 0.01")
        .replace("state = \"excited\"", "state = \"plus\"");
    let exact = write(dir.path(), "exact.toml", &weak);
    let tcl2 = write(
        dir.path(),
        "tcl2.toml",
        &weak.replace("exact_amplitude", "tcl2").replace("name = \"amp\"", "name = \"tcl2\""),
    );
    assert_eq!(code(&oqsim(&["simulate", exact.to_str().unwrap()], dir.path())), 0);
    let o = oqsim(&["simulate", tcl2.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let a = dir.path().join("amp.csv");
    let b = dir.path().join("tcl2.csv");
    let o = oqsim(&["compare", a.to_str().unwrap(), b.to_str().unwrap(), "--tol", "1e-3"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn heom_and_sln_agree_within_three_standard_errors() {
    let dir = tempfile::tempdir().unwrap();
    let base = SLN_SWEEP.split("[sweep]").next().unwrap().replace("n_traj = 300", "n_traj = 2000");
    let sln = write(dir.path(), "sln.toml", &base);
    let heom = base
        .replace("method = \"sln\"", "method = \"heom\"")
        .replace("[sln]\nn_traj = 2000\nm_max = 1", "[heom]\ndepth = 6\nm_max = 1")
        .replace("name = \"sweep\"", "name = \"heom\"");
    let heom = write(dir.path(), "heom.toml", &heom);
    assert_eq!(code(&oqsim(&["simulate", sln.to_str().unwrap()], dir.path())), 0);
    let o = oqsim(&["simulate", heom.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let a = dir.path().join("heom.csv");
    let b = dir.path().join("sweep.csv");
    let args = ["compare", a.to_str().unwrap(), b.to_str().unwrap(), "--tol", "0", "--stderr-factor", "3"];
    let o = oqsim(&args, dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let table = ResultTable::read(&b).unwrap();
    assert_eq!(table.times.len(), 51);
}

#[test]
fn chain_dump_reads_tabulated_density() {
    let dir = tempfile::tempdir().unwrap();
    let mut table = String::from("# omega J\n");
    for k in 0..=400 {
        let w = k as f64 * 0.05;
        table.push_str(&format!("{w} {}\n", 0.05 * w * (-w / 5.0).exp()));
    }
    write(dir.path(), "j.dat", &table);
    let cfg = EXPONENTIAL
        .replace("kind = \"exponential\"\ng = 0.3\ngamma = 1.0\nomega0 = 1.0", "kind = \"tabulated\"\nfile = \"j.dat\"")
        .replace("exact_amplitude", "chain")
        + "[chain]\nn_sites = 12\n";
    let cfg = write(dir.path(), "chain.toml", &cfg);
    let out = tempfile::tempdir().unwrap();
    let o = oqsim(&["chain", cfg.to_str().unwrap()], out.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.path().join("amp_chain.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("n,alpha_n,beta_n,omega_p,W_p,A_n,B_n"));
    assert_eq!(lines.count(), 12);
}

#[test]
fn measure_writes_rates_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let detuned = EXPONENTIAL
        .replace("gamma = 1.0", "gamma = 0.5")
        .replace("omega0 = 1.0", "omega0 = 2.0")
        .replace("dt = 0.001", "dt = 0.005")
        .replace("t_max = 8.0", "t_max = 6.0");
    let cfg = write(dir.path(), "m.toml", &detuned);
    let o = oqsim(&["measure", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("amp_measures.csv")).unwrap();
    assert!(csv.starts_with("t,D,g,Delta_0,Delta_1,Delta_2\n"));
    let meta: toml::Table = toml::from_str(&fs::read_to_string(dir.path().join("amp_measures.toml")).unwrap()).unwrap();
    let result = meta["result"].as_table().unwrap();
    // Detuned memory kernel: the excited population revives.
    assert!(result["blp"].as_float().unwrap() > 1e-4);
    assert!(result["rhp"].as_float().unwrap() > 1e-4);
}
