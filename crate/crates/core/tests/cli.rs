use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ecomac(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecomac"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn column(rows: &[Vec<String>], name: &str) -> Vec<String> {
    let idx = rows[0].iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    rows[1..].iter().map(|r| r[idx].clone()).collect()
}

#[test]
fn check_default_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let out = ecomac(dir.path(), &["check"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS ")).count(), 5, "{text}");
    assert!(text.contains("deadlocks: 0"));
}

#[test]
fn check_reduced_unit_reports_deadlock() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("reduced.cfg"), "# contention unit minus one frame\ntcu_ticks = 3\n").unwrap();
    let out = ecomac(dir.path(), &["--config", "reduced.cfg", "check"]);
    assert_eq!(out.status.code(), Some(4));
    let text = stdout(&out);
    assert!(text.contains("deadlocks: 26"));
    let trace: Vec<&str> = text
        .lines()
        .skip_while(|l| !l.starts_with("shortest deadlock trace"))
        .skip(1)
        .take_while(|l| l.starts_with("  ") && !l.starts_with("    "))
        .collect();
    let last = trace.last().unwrap();
    assert!(last.contains("send_rts") && last.contains("r_send_cts"), "{last}");
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "n_senders = 2\nfrobnicate = 1\n").unwrap();
    let out = ecomac(dir.path(), &["--config", "bad.cfg", "check"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    fs::write(dir.path().join("one.cfg"), "n_runs = 1\n").unwrap();
    assert_eq!(ecomac(dir.path(), &["--config", "one.cfg", "simulate"]).status.code(), Some(2));
    assert_eq!(ecomac(dir.path(), &["--runs", "1", "simulate"]).status.code(), Some(2));
    assert_eq!(ecomac(dir.path(), &["--config", "missing.cfg", "check"]).status.code(), Some(2));
    assert_eq!(ecomac(dir.path(), &["sweep", "--sweep", "d_frame=1,2"]).status.code(), Some(2));
    assert_eq!(ecomac(dir.path(), &["bogus"]).status.code(), Some(2));
}

#[test]
fn state_cap_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ecomac(dir.path(), &["--state-cap", "100", "check"]).status.code(), Some(3));
}

#[test]
fn simulate_reports_analytic_column() {
    let dir = tempfile::tempdir().unwrap();
    let out = ecomac(dir.path(), &["--runs", "20000", "--seed", "5", "simulate", "--out", "sim.csv"]);
    assert_eq!(out.status.code(), Some(0));
    let rows = csv_rows(&dir.path().join("sim.csv"));
    assert_eq!(
        rows[0],
        ["metric", "mean", "std", "ci95", "n_runs", "seed", "analytic", "delta_over_se"]
    );
    assert!(rows[1..].iter().all(|r| r[4] == "20000" && r[5] == "5"));
    let ratio: Vec<f64> = column(&rows, "delta_over_se").iter().map(|x| x.parse().unwrap()).collect();
    assert!(ratio.iter().all(|&r| r < 3.0), "{ratio:?}");
    let metrics = column(&rows, "metric");
    let idx = metrics.iter().position(|m| m == "success_s1_e0").unwrap();
    let analytic: f64 = column(&rows, "analytic")[idx].parse().unwrap();
    assert!((analytic - 3.0 / 7.0).abs() < 1e-11);
    assert!(!fs::read_to_string(dir.path().join("sim.csv")).unwrap().contains('\r'));
}

#[test]
fn simulate_beyond_exact_cap_has_no_analytic_column() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.cfg"), "n_senders = 3\nexact_cap = 2\nn_runs = 500\n").unwrap();
    let out = ecomac(dir.path(), &["--config", "c.cfg", "simulate", "--out", "sim.csv"]);
    assert_eq!(out.status.code(), Some(0));
    let rows = csv_rows(&dir.path().join("sim.csv"));
    assert_eq!(rows[0], ["metric", "mean", "std", "ci95", "n_runs", "seed"]);
}

#[test]
fn simulate_deadlock_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("reduced.cfg"), "tcu_ticks = 3\nn_runs = 5000\n").unwrap();
    let out = ecomac(dir.path(), &["--config", "reduced.cfg", "simulate", "--out", "sim.csv"]);
    assert_eq!(out.status.code(), Some(4));
    let trace = fs::read_to_string(dir.path().join("sim.csv.deadlock.txt")).unwrap();
    let last = trace.lines().last().unwrap();
    assert!(last.contains("send_rts"), "{last}");
    assert!(trace.lines().next().unwrap().contains("r_w_start"));
}

#[test]
fn sweep_idle_over_nmax_is_increasing() {
    let dir = tempfile::tempdir().unwrap();
    let out = ecomac(dir.path(), &["sweep", "--sweep", "nmax_msg=1..5", "--metric", "idle", "--out", "idle.csv"]);
    assert_eq!(out.status.code(), Some(0));
    let rows = csv_rows(&dir.path().join("idle.csv"));
    assert_eq!(rows.len(), 6);
    let idle: Vec<f64> = column(&rows, "idle_time").iter().map(|x| x.parse().unwrap()).collect();
    assert!(idle.windows(2).all(|w| w[0] < w[1]), "{idle:?}");
    assert!(column(&rows, "mode").iter().all(|m| m == "exact"));
}

#[test]
fn sweep_energy_longer_unit_costs_more() {
    let dir = tempfile::tempdir().unwrap();
    let out = ecomac(
        dir.path(),
        &["sweep", "--sweep", "tcu_ticks=8,15", "--sweep", "nmax_msg=1..3", "--metric", "energy", "--out", "e.csv"],
    );
    assert_eq!(out.status.code(), Some(0));
    let rows = csv_rows(&dir.path().join("e.csv"));
    let energy: Vec<f64> = column(&rows, "energy_mj").iter().map(|x| x.parse().unwrap()).collect();
    assert_eq!(energy.len(), 6);
    for i in 0..3 {
        assert!(energy[3 + i] > energy[i], "{energy:?}");
    }
}

#[test]
fn sweep_with_deadlocks_exits_4_with_partial_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = ecomac(dir.path(), &["sweep", "--sweep", "tcu_ticks=3,8", "--metric", "energy", "--out", "e.csv"]);
    assert_eq!(out.status.code(), Some(4));
    let rows = csv_rows(&dir.path().join("e.csv"));
    assert_eq!(column(&rows, "energy_mj")[0], "");
    assert_ne!(column(&rows, "deadlocks")[0], "0");
    assert!(!column(&rows, "energy_mj")[1].is_empty());
}

#[test]
fn sweep_profile_mixes_exact_and_sampled() {
    let dir = tempfile::tempdir().unwrap();
    let out = ecomac(
        dir.path(),
        &["--runs", "2000", "sweep", "--sweep", "n_senders=2,5", "--metric", "profile", "--out", "p.csv"],
    );
    assert_eq!(out.status.code(), Some(0));
    let rows = csv_rows(&dir.path().join("p.csv"));
    assert_eq!(rows.len(), 1 + 2 * 13);
    let modes = column(&rows, "mode");
    assert_eq!(modes[0], "exact");
    assert_eq!(modes[13], "sampled");
    assert_eq!(column(&rows, "per_k")[0], "0.428571428571");
}

#[test]
fn dump_format() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("one.cfg"), "n_senders = 1\n").unwrap();
    let out = ecomac(dir.path(), &["--config", "one.cfg", "dump", "--out", "s.txt"]);
    assert_eq!(out.status.code(), Some(0));
    let text = fs::read_to_string(dir.path().join("s.txt")).unwrap();
    assert_eq!(text.lines().count(), 71);
    let first: Vec<&str> = text.lines().next().unwrap().split('\t').collect();
    assert_eq!(first[0], "0");
    assert!(first[1].split(',').any(|l| l == "s1_choose"));
    let probs: Vec<f64> = first[2]
        .split(' ')
        .map(|t| t.split_once(':').unwrap().1.parse().unwrap())
        .collect();
    assert_eq!(probs.len(), 7);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-11);
}

#[test]
fn every_subcommand_can_dump() {
    let dir = tempfile::tempdir().unwrap();
    let runs: [&[&str]; 3] = [
        &["--dump-statespace", "a.txt", "check"],
        &["--runs", "100", "--dump-statespace", "b.txt", "simulate", "--out", "x.csv"],
        &["--dump-statespace", "c.txt", "sweep", "--sweep", "nmax_msg=1", "--metric", "idle", "--out", "y.csv"],
    ];
    for args in runs {
        assert_eq!(ecomac(dir.path(), args).status.code(), Some(0), "{args:?}");
    }
    let a = fs::read(dir.path().join("a.txt")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.txt")).unwrap());
    assert_eq!(a, fs::read(dir.path().join("c.txt")).unwrap());
}
