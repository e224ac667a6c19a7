use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hdsgd_cli::commands::{ou_check, sde};
use hdsgd_cli::{ExperimentConfig, Kind, OutputDir};
use tempfile::TempDir;

fn hdsgd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdsgd")).args(args).output().unwrap()
}

/// Writes `toml` to dir/name.toml and runs `kind` with output in dir/name.
fn run(dir: &Path, name: &str, kind: &str, toml: &str, extra: &[&str]) -> Output {
    let cfg = dir.join(format!("{name}.toml"));
    fs::write(&cfg, toml).unwrap();
    let out = dir.join(name);
    let mut args = vec![kind, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    hdsgd(&args)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

#[test]
fn hermite_reports_information_exponents() {
    let dir = TempDir::new().unwrap();
    for (label, k) in [("h3", 3), ("identity", 1)] {
        let o = run(
            dir.path(),
            label,
            "hermite",
            &format!("[activation]\nlabel = \"{label}\"\n"),
            &[],
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(
            stdout(&o).contains(&format!("information exponent: {k}")),
            "{}",
            stdout(&o)
        );
    }
    let o = run(dir.path(), "purified", "hermite", "", &[]);
    assert_eq!(o.status.code(), Some(0));
    let k: usize = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("information exponent: "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(k >= 3);
    let (header, rows) = read_csv(&dir.path().join("purified/hermite.csv"));
    assert_eq!(header, ["k", "a_k"]);
    let a1: f64 = rows[1][1].parse().unwrap();
    assert!(a1.abs() < 1e-8, "{a1}");
}

#[test]
fn exponent_failure_names_the_activation() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), "zero", "hermite", "[activation]\nlabel = \"zero\"\n", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`zero`"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    for (name, toml, kind) in [
        ("unknown", "bogus = 1\n", "sgd"),
        ("nested", "[diagnose]\nbogus = 1\n", "diagnose"),
        ("mismatch", "kind = \"ode\"\n", "sgd"),
        ("variant", "sigma_variant = \"other\"\n", "ou-check"),
        ("small_n", "n = 4\n", "sgd"),
        ("checkpoint", "t_end = 1.0\ncheckpoints = [2.0]\n", "sde"),
        ("label", "[activation]\nlabel = \"relu\"\n", "ode"),
        ("no_root", "noise_var = 0.25\n", "fixed-point"),
    ] {
        let o = run(dir.path(), name, kind, toml, &[]);
        assert_eq!(o.status.code(), Some(2), "{name}: {}", stderr(&o));
        assert!(
            !dir.path().join(name).join("manifest.toml").exists() || name == "no_root",
            "{name}"
        );
    }
    let o = hdsgd(&[
        "sgd",
        "--threads",
        "0",
        "--out",
        dir.path().join("t0").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn compare_smoke_emits_well_formed_csv() {
    let dir = TempDir::new().unwrap();
    let o = run(
        dir.path(),
        "cmp",
        "compare",
        "n_list = [64]\nn_seeds = 2\nt_end = 0.05\n",
        &[],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (header, rows) = read_csv(&dir.path().join("cmp/compare.csv"));
    assert_eq!(header, ["N", "n_seeds", "sup_m", "sup_r2"]);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "64");
    let (header, rows) = read_csv(&dir.path().join("cmp/trajectory_N64.csv"));
    assert_eq!(
        header,
        [
            "t",
            "m_mean",
            "m_var",
            "r2_mean",
            "r2_var",
            "mtilde_mean",
            "mtilde_var",
            "n_seeds",
            "N"
        ]
    );
    assert!(rows.iter().all(|r| r.len() == 9 && r[7] == "2" && r[8] == "64"));
    let (header, _) = read_csv(&dir.path().join("cmp/deviation_N64.csv"));
    assert_eq!(header, ["t", "dev_m", "dev_r2"]);
}

#[test]
fn compare_with_cubic_activation_diverges_and_keeps_partial_output() {
    let dir = TempDir::new().unwrap();
    let toml = "noise_var = 0.0\ninit_sigma2 = 2.0\nn_list = [64]\nn_seeds = 2\n[activation]\nlabel = \"h3\"\n";
    let o = run(dir.path(), "h3", "compare", toml, &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("divergence"));
    let (header, _) = read_csv(&dir.path().join("h3/compare.csv"));
    assert_eq!(header, ["N", "n_seeds", "sup_m", "sup_r2"]);
}

#[test]
fn failed_acceptance_check_exits_with_four() {
    let dir = TempDir::new().unwrap();
    let toml = "n_list = [64, 128]\nn_seeds = 4\nt_end = 0.1\ncompare_tol = 1e-12\nacceptance = true\n";
    let o = run(dir.path(), "strict", "compare", toml, &[]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn manifest_rerun_reproduces_every_csv() {
    let dir = TempDir::new().unwrap();
    let toml = "n = 256\nn_seeds = 6\nt_end = 0.2\nmode = \"full\"\nnoise_law = \"two_point\"\n";
    let a = run(dir.path(), "a", "sgd", toml, &["--threads", "1", "--seed", "17"]);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    let manifest = dir.path().join("a/manifest.toml");
    let text = fs::read_to_string(&manifest).unwrap();
    assert!(text.contains("seed = 17") && text.contains("kind = \"sgd\"") && text.contains("[artifact]"));
    let b_out = dir.path().join("b");
    let b = hdsgd(&[
        "sgd",
        "--config",
        manifest.to_str().unwrap(),
        "--out",
        b_out.to_str().unwrap(),
        "--threads",
        "3",
    ]);
    assert_eq!(b.status.code(), Some(0), "{}", stderr(&b));
    let csv_a = fs::read(dir.path().join("a/trajectory.csv")).unwrap();
    let csv_b = fs::read(b_out.join("trajectory.csv")).unwrap();
    assert_eq!(csv_a, csv_b);
}

#[test]
fn svg_is_written_only_on_request() {
    let dir = TempDir::new().unwrap();
    let toml = "n = 64\nn_seeds = 2\nt_end = 0.1\n";
    run(dir.path(), "plain", "sgd", toml, &[]);
    run(dir.path(), "plot", "sgd", toml, &["--svg"]);
    assert!(!dir.path().join("plain/trajectory.svg").exists());
    let svg = fs::read_to_string(dir.path().join("plot/trajectory.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn ode_and_fixed_point_smoke() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), "ode", "ode", "t_end = 0.5\ndt = 0.01\n", &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (header, rows) = read_csv(&dir.path().join("ode/ode.csv"));
    assert_eq!(header, ["t", "m", "r2"]);
    assert_eq!(rows.len(), 51);
    let o = run(dir.path(), "fp", "fixed-point", "noise_var = 0.1\n", &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (_, rows) = read_csv(&dir.path().join("fp/fixed_point.csv"));
    let variants: Vec<&str> = rows.iter().map(|r| r[3].as_str()).collect();
    assert_eq!(variants, ["direct", "theorem_statement", "proof_form"]);
}

fn resolved(kind: Kind, toml: &str) -> hdsgd_cli::Resolved {
    ExperimentConfig::from_toml(toml).unwrap().resolve(kind).unwrap()
}

#[test]
fn ou_report_header_is_consistent() {
    let dir = TempDir::new().unwrap();
    let res = resolved(Kind::OuCheck, "n = 128\nn_seeds = 16\nt_end = 1.0\n");
    let r = ou_check(&res, &mut OutputDir::create(dir.path(), false).unwrap()).unwrap();
    let want = r.ou.vol * r.ou.vol / (2.0 * r.ou.theta);
    assert!((r.ou.stationary_var - want).abs() <= 1e-14 * want);
    assert_eq!(r.rows.len(), 1);
    assert_eq!(r.variants.len(), 3);
    assert_eq!(r.variants[0].rel_discrepancy, 0.0);
}

#[test]
fn sde_without_noise_follows_the_drift() {
    let dir = TempDir::new().unwrap();
    let res = resolved(
        Kind::Sde,
        "noise_var = 0.1\nm_tilde0 = 0.5\nr2_0 = 1.0\nt_end = 0.5\nn_seeds = 4\ncheckpoints = [0.5]\n",
    );
    let r = sde(&res, &mut OutputDir::create(dir.path(), false).unwrap()).unwrap();
    assert!(r.ou.is_none());
    assert!(r.r2[0].var < 1e-24, "r2 is deterministic");
    assert!(r.m_tilde[0].var > 0.0);
}
