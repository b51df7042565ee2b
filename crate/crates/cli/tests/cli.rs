use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ensfilter(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ensfilter")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ensfilter(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, extra: &[&str]) {
    let mut args = vec!["gen-data", "--system", "lorenz63", "--traj", "4", "--len", "10", "--seed", "7", "--burn-in", "500", "--out", p(dir)];
    args.extend_from_slice(extra);
    ok(&args);
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().to_string()).collect()
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let read_all = || {
        let mut files: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files.into_iter().map(|f| (f.clone(), fs::read(f).unwrap())).collect::<Vec<_>>()
    };
    gen(&a, &[]);
    let first = read_all();
    gen(&a, &[]);
    assert_eq!(first.len(), 6);
    assert!(first == read_all());
    let snapshot = fs::read_to_string(a.join("resolved_config.txt")).unwrap();
    assert!(snapshot.contains("seed=7\n") && snapshot.contains("traj=4\n"));
}

#[test]
fn zero_heads_matches_enkf() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, &[]);
    let (e, m) = (dir.path().join("enkf"), dir.path().join("mnmef"));
    ok(&["run-filter", "--method", "enkf", "--data", p(&data), "--seed", "3", "--out", p(&e)]);
    ok(&["run-filter", "--method", "mnmef", "--zero-heads", "--data", p(&data), "--seed", "3", "--out", p(&m)]);
    let re = column(&fs::read_to_string(e.join("metrics.csv")).unwrap(), "r_rmse");
    let rm = column(&fs::read_to_string(m.join("metrics.csv")).unwrap(), "r_rmse");
    assert_eq!(re.len(), 4);
    for (a, b) in re.iter().zip(&rm) {
        let (a, b): (f64, f64) = (a.parse().unwrap(), b.parse().unwrap());
        assert!((a - b).abs() <= 1e-10, "{a} {b}");
    }
    let header = fs::read_to_string(m.join("metrics.csv")).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "method,system,N,sigma_y,seed,trajectory_id,r_rmse");
    let summary = fs::read_to_string(m.join("summary.csv")).unwrap();
    assert!(summary.starts_with("method,system,N,sigma_y,mean,std\nmnmef,lorenz63,10,"));
}

#[test]
fn evaluate_truth_fixture_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, &[]);
    // Estimates equal to the truth, read back from the binary store.
    let mut csv = String::from("trajectory_id,step,x0,x1,x2\n");
    for m in 0..4 {
        let bytes = fs::read(data.join(format!("traj_{m:06}.bin"))).unwrap();
        let values: Vec<f64> = bytes[52..].chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        for j in 0..=10 {
            let s = &values[3 * j..3 * j + 3];
            csv.push_str(&format!("{m},{j},{},{},{}\n", s[0], s[1], s[2]));
        }
    }
    let est = dir.path().join("est.csv");
    fs::write(&est, csv).unwrap();
    let out = dir.path().join("eval");
    ok(&["evaluate", "--data", p(&data), "--estimates", p(&est), "--label", "truth", "--out", p(&out)]);
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    for v in column(&metrics, "r_rmse") {
        assert_eq!(v.parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn run_filter_means_feed_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, &[]);
    let run = dir.path().join("run");
    ok(&["run-filter", "--method", "esrf", "--alpha", "1.05", "--data", p(&data), "--out", p(&run)]);
    let out = dir.path().join("eval");
    let means = run.join("means.csv");
    ok(&["evaluate", "--data", p(&data), "--estimates", p(&means), "--out", p(&out)]);
    let a = column(&fs::read_to_string(run.join("metrics.csv")).unwrap(), "r_rmse");
    let b = column(&fs::read_to_string(out.join("metrics.csv")).unwrap(), "r_rmse");
    for (x, y) in a.iter().zip(&b) {
        let (x, y): (f64, f64) = (x.parse().unwrap(), y.parse().unwrap());
        assert!((x - y).abs() < 1e-12 * x.abs().max(1.0));
    }
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "system=lorenz96\ntraj=2\nlen=3\nburn_in=100\n").unwrap();
    let out = dir.path().join("data");
    ok(&["gen-data", "--config", p(&cfg), "--len", "5", "--out", p(&out)]);
    let snap = fs::read_to_string(out.join("resolved_config.txt")).unwrap();
    assert!(snap.contains("system=lorenz96\n") && snap.contains("len=5\n") && snap.contains("traj=2\n"));
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("steps=5"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad_cfg = dir.path().join("bad.cfg");
    fs::write(&bad_cfg, "colour=blue\n").unwrap();
    assert_eq!(ensfilter(&["gen-data", "--config", p(&bad_cfg)]).status.code(), Some(2));
    assert_eq!(ensfilter(&["gen-data", "--system", "lorenz99"]).status.code(), Some(2));
    assert_eq!(ensfilter(&["no-such-command"]).status.code(), Some(2));
    let missing = dir.path().join("missing");
    assert_eq!(ensfilter(&["run-filter", "--data", p(&missing)]).status.code(), Some(3));
    let data = dir.path().join("data");
    gen(&data, &[]);
    let out = dir.path().join("g");
    assert_eq!(ensfilter(&["run-filter", "--method", "mnmef", "--data", p(&data), "--out", p(&out)]).status.code(), Some(2));
    // Inflation far above one makes every run blow up.
    let code = ensfilter(&["grid-search", "--method", "enkf", "--alphas", "1e300", "--radii", "none", "--data", p(&data), "--out", p(&out)]).status.code();
    assert_eq!(code, Some(4));
}

#[test]
fn grid_search_writes_heatmap_and_best() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--system", "lorenz96", "--traj", "2", "--len", "10", "--burn-in", "200", "--out", p(&data)]);
    let out = dir.path().join("grid");
    ok(&["grid-search", "--alphas", "1.0,1.1", "--radii", "2,4,none", "--data", p(&data), "--out", p(&out), "--workers", "2"]);
    let heat = fs::read_to_string(out.join("heatmap.csv")).unwrap();
    assert_eq!(heat.lines().count(), 7);
    assert!(heat.starts_with("alpha,radius,mean_r_rmse\n"));
    let best = fs::read_to_string(out.join("best.txt")).unwrap();
    assert!(best.starts_with("alpha="));
}

#[test]
fn pretrain_then_finetune() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, &[]);
    let pre = dir.path().join("pre");
    ok(&["pretrain", "--data", p(&data), "--epochs", "1", "--batch", "2", "--hidden", "8", "--out", p(&pre)]);
    let log = fs::read_to_string(pre.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let ck = pre.join("checkpoint.bin");
    assert!(pre.join("checkpoint.bin.cfg").exists());
    let ft = dir.path().join("ft");
    ok(&["finetune", "--data", p(&data), "--checkpoint", p(&ck), "--members", "12", "--epochs", "1", "--batch", "2", "--out", p(&ft)]);
    let run = dir.path().join("run");
    ok(&["run-filter", "--method", "mnmef", "--checkpoint", p(&ft.join("checkpoint.bin")), "--members", "7", "--data", p(&data), "--out", p(&run)]);
}

#[test]
fn linear_experiment_curve() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("lin");
    ok(&[
        "linear-exp", "--train-traj", "4", "--train-len", "4", "--test-traj", "2", "--test-len", "5", "--epochs", "1",
        "--batch", "2", "--settings", "NL2,L2", "--out", p(&out),
    ]);
    let curve = fs::read_to_string(out.join("curve.csv")).unwrap();
    assert!(curve.starts_with("setting,epoch,w2,baseline_w2\n"));
    assert_eq!(curve.lines().count(), 5);
}
