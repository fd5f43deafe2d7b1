use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

struct Env {
    dir: TempDir,
}

impl Env {
    fn new() -> Self {
        Env {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_rearrange"))
            .args(args)
            .env("REARRANGE_CACHE", self.path("cache.csv"))
            .output()
            .unwrap()
    }
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    assert!(!o.status.success(), "expected failure, got: {}", String::from_utf8_lossy(&o.stdout));
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn value<'a>(report: &'a str, key: &str) -> &'a str {
    report
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key} in {report}"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn weights_block_matches_reference_table() {
    let env = Env::new();
    let out = env.path("w.csv");
    stdout(&env.run(&[
        "weights", "--alpha", ".05", "--rho", "2..9", "--q", "10,15,...,49", "--out", p(&out),
    ]));
    let produced = std::fs::read_to_string(&out).unwrap();
    let reference = include_str!("../../core/tests/data/reference_weights.csv");
    let key = |l: &str| {
        let f: Vec<&str> = l.split(',').collect();
        (f[0].parse::<f64>().unwrap().to_bits(), f[1].parse::<f64>().unwrap() as u32, f[2].parse::<u32>().unwrap())
    };
    let rows: Vec<&str> = produced.lines().skip(1).collect();
    assert_eq!(rows.len(), 8 * 9);
    let mut compared = 0;
    for line in reference.lines().skip(1).filter(|l| l.starts_with("0.05,")) {
        let mine = rows.iter().find(|r| key(r) == key(line)).unwrap();
        let (a, b): (Vec<&str>, Vec<&str>) = (line.split(',').collect(), mine.split(',').collect());
        assert_eq!(a[4], b[4], "grade {line} vs {mine}");
        assert_eq!(a[3].is_empty(), b[3].is_empty(), "{line} vs {mine}");
        // The reference q = 49 column is evaluated at 50 controls.
        if !a[3].is_empty() && a[2] != "49" {
            let (x, y): (f64, f64) = (a[3].parse().unwrap(), b[3].parse().unwrap());
            assert!((x - y).abs() <= 5e-4, "{line} vs {mine}");
            compared += 1;
        }
    }
    assert!(compared > 40);
}

#[test]
fn singleton_weights_and_bad_alpha() {
    let env = Env::new();
    let out = env.path("one.csv");
    stdout(&env.run(&["weights", "--alpha", "0.05", "--rho", "2", "--q", "20", "--out", p(&out)]));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().starts_with("0.05,2,20,0.50"));

    let bad = env.path("bad.csv");
    let err = stderr(&env.run(&["weights", "--alpha", ".6", "--rho", "2", "--q", "20", "--out", p(&bad)]));
    assert!(err.contains("alpha"), "{err}");
    assert!(!bad.exists());
}

fn estimates_file(env: &Env, treated: f64) -> PathBuf {
    let controls = [
        -1.9, -1.4, -1.1, -0.8, -0.6, -0.5, -0.3, -0.2, -0.1, 0.0, 0.1, 0.2, 0.4, 0.5, 0.7, 0.9,
        1.2, 1.5, 1.7, 2.0,
    ];
    let mut text = String::from("cluster,estimate,treated\nT,");
    writeln!(text, "{treated},1").unwrap();
    for (i, c) in controls.iter().enumerate() {
        writeln!(text, "c{i},{c},0").unwrap();
    }
    env.write(&format!("est_{treated}.csv"), &text)
}

#[test]
fn test_on_estimates_file() {
    let env = Env::new();
    let input = estimates_file(&env, 5.0);
    let report = env.path("report.txt");
    let s = stdout(&env.run(&["test", "--in", p(&input), "--rho", "2", "--out", p(&report)]));
    assert_eq!(value(&s, "decision"), "reject");
    assert_eq!(value(&s, "q"), "20");
    let w: f64 = value(&s, "weight").parse().unwrap();
    assert!((w - 0.502).abs() < 5e-4);
    let file = std::fs::read_to_string(&report).unwrap();
    assert!(s.starts_with(&file));

    let lower = stdout(&env.run(&["test", "--in", p(&input), "--rho", "2", "--direction", "lower"]));
    assert_eq!(value(&lower, "decision"), "no_reject");
    let two = stdout(&env.run(&["test", "--in", p(&input), "--rho", "2", "--direction", "two-sided"]));
    assert_eq!(value(&two, "alpha_used"), "0.025000");

    let shifted = stdout(&env.run(&["test", "--in", p(&input), "--rho", "2", "--shift", "5"]));
    assert_eq!(value(&shifted, "decision"), "no_reject");
}

#[test]
fn infeasible_cell_is_reported() {
    let env = Env::new();
    let input = estimates_file(&env, 5.0);
    let report = env.path("r.txt");
    let err = stderr(&env.run(&["test", "--in", p(&input), "--rho", "9", "--alpha", "0.005", "--out", p(&report)]));
    assert!(err.contains("infeasible combination"), "{err}");
    assert!(err.contains("see weight table"), "{err}");
    assert!(!report.exists());
}

fn panel_file(env: &Env) -> PathBuf {
    let mut text = String::from("unit,cluster,time,outcome\n");
    let mut state = 17u64;
    let mut noise = || {
        // Small deterministic pseudo-noise in [-0.5, 0.5).
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    for k in 0..20 {
        let cluster = if k == 0 { "TN".to_string() } else { format!("S{k:02}") };
        for t in 2000..2010 {
            let effect = if k == 0 && t >= 2006 { 6.0 } else { 0.0 };
            let y = 0.3 * k as f64 + 0.1 * (t - 2000) as f64 + effect + noise();
            writeln!(text, "{cluster}-{t},{cluster},{t},{y}").unwrap();
        }
    }
    env.write("panel.csv", &text)
}

#[test]
fn test_and_ct_on_panel_file() {
    let env = Env::new();
    let panel = panel_file(&env);
    let s = stdout(&env.run(&["test", "--in", p(&panel), "--treated", "TN", "--post-from", "2006", "--rho", "2"]));
    assert_eq!(value(&s, "q"), "19");
    assert_eq!(value(&s, "decision"), "reject");

    let err = stderr(&env.run(&["test", "--in", p(&panel), "--treated", "TN", "--rho", "2"]));
    assert!(err.contains("--post-from"), "{err}");

    let ct = stdout(&env.run(&["ct-test", "--in", p(&panel), "--treated", "TN", "--post-from", "2006", "--alpha", "0.1"]));
    assert_eq!(value(&ct, "decision"), "reject");
    let d: f64 = value(&ct, "delta_hat").parse().unwrap();
    assert!((d - 6.0).abs() < 1.0, "{d}");
}

#[test]
fn robustness_reports() {
    let env = Env::new();
    let strong = estimates_file(&env, 5.0);
    let s = stdout(&env.run(&["robustness", "--in", p(&strong), "--step", "0.01"]));
    let rho: f64 = value(&s, "rho").parse().unwrap();
    let rho2: f64 = value(&s, "rho_squared").parse().unwrap();
    assert!(rho > 2.0);
    assert!((rho2 - rho * rho).abs() < 1e-5);
    assert_eq!(value(&s, "saturated"), "false");

    let weak = estimates_file(&env, 0.0);
    let s = stdout(&env.run(&["robustness", "--in", p(&weak), "--step", "0.01"]));
    assert_eq!(value(&s, "rho"), "×");
    assert_eq!(value(&s, "rho_squared"), "×");

    let huge = estimates_file(&env, 1e4);
    let o = env.run(&["robustness", "--in", p(&huge), "--rho-max", "3", "--step", "0.5"]);
    let s = stdout(&o);
    assert_eq!(value(&s, "rho"), "3.000000");
    assert_eq!(value(&s, "saturated"), "true");
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
}

#[test]
fn bound_prints_components() {
    let env = Env::new();
    let s = stdout(&env.run(&["bound", "--q", "15", "--w", "0.7", "--rho", "3", "--alpha", "0.05"]));
    let total: f64 = value(&s, "total").parse().unwrap();
    let parts: f64 = ["escape_term", "oracle_integral", "centering_adjustment"]
        .iter()
        .map(|k| value(&s, k).parse::<f64>().unwrap())
        .sum();
    assert!((total - parts).abs() <= 2e-6);
    value(&s, "grade");
}

#[test]
fn simulate_is_reproducible() {
    let env = Env::new();
    let (a, b) = (env.path("a.csv"), env.path("b.csv"));
    let args = |out: &Path| {
        vec![
            "simulate".to_string(), "--q".into(), "16".into(), "--sigma".into(), "1,2".into(),
            "--reps".into(), "300".into(), "--seed".into(), "4".into(), "--out".into(), p(out).into(),
        ]
    };
    let run = |out: &Path| {
        let a = args(out);
        stdout(&env.run(&a.iter().map(String::as_str).collect::<Vec<_>>()))
    };
    assert_eq!(run(&a), run(&b));
    let (ta, tb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(ta, tb);
    let text = String::from_utf8(ta).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "method,q,gamma,sigma,delta,innovation,alpha,rho,replications,reject_rate,mc_se,master_seed"
    );
    assert_eq!(text.lines().count(), 1 + 2 * 2);
}

#[test]
fn failing_commands_leave_no_output() {
    let env = Env::new();
    let out = env.path("sim.csv");
    let err = stderr(&env.run(&["simulate", "--q", "5", "--rho", "9", "--alpha", "0.005", "--reps", "200", "--out", p(&out)]));
    assert!(err.contains("infeasible"), "{err}");
    assert!(!out.exists());

    let missing = env.path("nope.csv");
    let report = env.path("r.txt");
    stderr(&env.run(&["test", "--in", p(&missing), "--rho", "2", "--out", p(&report)]));
    assert!(!report.exists());

    // An existing artifact survives a failed rewrite untouched.
    std::fs::write(&report, "keep").unwrap();
    stderr(&env.run(&["test", "--in", p(&missing), "--rho", "2", "--out", p(&report)]));
    assert_eq!(std::fs::read_to_string(&report).unwrap(), "keep");
}
