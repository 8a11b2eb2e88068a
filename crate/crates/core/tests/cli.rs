//! End-to-end runs of the command-line binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use setcnf::checkpoint;
use setcnf::cli::grid_integral;
use setcnf::data::read_jsonl;
use setcnf::flow::{FlowConfig, FlowModel};
use setcnf::process::PointProcessModel;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_setcnf"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(args: &[&str]) -> i32 {
    let out = run(args);
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A small Thomas dataset plus an IHP checkpoint trained for two epochs.
fn fixture(dir: &Path) -> (String, String) {
    let data = dir.join("data");
    let ck = dir.join("ihp");
    assert_eq!(code(&["simulate", "--kind", "thomas", "--count", "20", "--seed", "3", "--out", p(&data)]), 0);
    assert_eq!(
        code(&["train", "--data", p(&data), "--model", "ihp", "--epochs", "2", "--out", p(&ck)]),
        0
    );
    (p(&data).to_string(), p(&ck).to_string())
}

#[test]
fn simulate_splits_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(code(&["simulate", "--kind", "thomas", "--count", "1000", "--seed", "7", "--out", p(out)]), 0);
    }
    for (name, lines) in [("train", 600), ("val", 200), ("test", 200)] {
        let file = format!("{name}.jsonl");
        let ta = fs::read(a.join(&file)).unwrap();
        assert_eq!(ta, fs::read(b.join(&file)).unwrap());
        assert_eq!(read_jsonl(&a.join(&file), 2).unwrap().len(), lines);
    }
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
}

#[test]
fn usage_and_configuration_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path()).to_string();
    assert_eq!(code(&["simulate", "--kind", "thomas", "--count", "3", "--out", &out]), 1);
    assert_eq!(code(&["simulate", "--kind", "poisson", "--out", &out]), 1);
    assert_eq!(code(&["no-such-command"]), 1);
    let (data, ck) = fixture(dir.path());
    let rejected = run(&["train", "--data", &data, "--model", "ihp", "--trace", "closed-form", "--out", &out]);
    assert_eq!(rejected.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&rejected.stderr).contains("CNF models only"));
    assert_eq!(
        code(&["train", "--data", &data, "--model", "cnf-attention", "--trace", "zero", "--out", &out]),
        1
    );
    assert_eq!(code(&["sample", "--checkpoint", &ck, "--n", "0", "--out", &out]), 1);
    let grid = dir.path().join("g.csv");
    assert_eq!(code(&["density-grid", "--checkpoint", &ck, "--resolution", "1", "--out", p(&grid)]), 1);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = fixture(dir.path());
    let missing = dir.path().join("missing");
    let m = p(&missing).to_string();
    assert_eq!(code(&["eval", "--checkpoint", &m, "--data", &data, "--out", &m]), 2);
    let blocked = dir.path().join("file");
    fs::write(&blocked, "x").unwrap();
    let inside = blocked.join("sub");
    assert_eq!(code(&["simulate", "--kind", "mixture", "--count", "5", "--out", p(&inside)]), 2);
}

#[test]
fn train_writes_checkpoint_history_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ck) = fixture(dir.path());
    let ck = Path::new(&ck);
    for f in ["config.json", "params.json", "history.csv", "summary.json"] {
        assert!(ck.join(f).exists(), "{f}");
    }
    let history = fs::read_to_string(ck.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_loss,mean_nfe,seconds\n"));
    assert_eq!(history.lines().count(), 4);

    // Flags override the config file.
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"model": "cnf-deepset", "train": {"max_epochs": 5, "batch_size": 4}}"#).unwrap();
    let out = dir.path().join("ck2");
    let status = code(&[
        "train", "--data", &data, "--config", p(&cfg), "--model", "ihp", "--epochs", "1", "--out", p(&out),
    ]);
    assert_eq!(status, 0);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["model"], "ihp");
    assert_eq!(summary["train_config"]["max_epochs"], 1);
    assert_eq!(summary["train_config"]["batch_size"], 4);

    fs::write(&cfg, r#"{"modle": "ihp"}"#).unwrap();
    assert_eq!(code(&["train", "--data", &data, "--config", p(&cfg), "--out", p(&out)]), 1);
}

#[test]
fn eval_is_deterministic_and_reports_every_metric() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ck) = fixture(dir.path());
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for out in [&a, &b] {
        let args = ["eval", "--checkpoint", &ck, "--data", &data, "--metrics", "nll,wasserstein,ripley", "--r", "0.1", "--out", p(out)];
        assert_eq!(code(&args), 0);
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let metrics: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(metrics, ["nll", "wasserstein", "ripley_k_data", "ripley_k"]);
    assert!(text.starts_with("dataset,model,metric,value,std,seed\nthomas,ihp,nll,"));
}

#[test]
fn identity_checkpoint_nll_matches_hand_computation() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("identity");
    let model = PointProcessModel::with_rate(FlowModel::new(FlowConfig::identity(2), 0).unwrap(), 1.0).unwrap();
    checkpoint::save(&ck, &model, None).unwrap();
    let data = dir.path().join("data");
    fs::create_dir_all(&data).unwrap();
    let set = r#"{"points":[[0.0,0.0],[1.0,2.0]]}"#;
    for f in ["train", "val", "test"] {
        fs::write(data.join(format!("{f}.jsonl")), format!("{set}\n")).unwrap();
    }
    fs::write(
        data.join("manifest.json"),
        r#"{"train":"train.jsonl","val":"val.jsonl","test":"test.jsonl","seed":0,"kind":"thomas"}"#,
    )
    .unwrap();
    let out = dir.path().join("m.csv");
    assert_eq!(code(&["eval", "--checkpoint", p(&ck), "--data", p(&data), "--out", p(&out)]), 0);
    let line = fs::read_to_string(&out).unwrap().lines().nth(1).unwrap().to_string();
    let value: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
    // Two 2-D standard-normal points: (4 * half log 2 pi + (0 + 5) / 2) / 2.
    let expected = (4.0 * 0.5 * (2.0 * std::f64::consts::PI).ln() + 2.5) / 2.0;
    assert!((value - expected).abs() < 1e-12, "{value} vs {expected}");
    assert!(line.starts_with("thomas,custom,nll,"));
}

#[test]
fn samples_have_the_requested_shape() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ck) = fixture(dir.path());
    let out = dir.path().join("s.jsonl");
    assert_eq!(code(&["sample", "--checkpoint", &ck, "--n", "5", "--count", "3", "--seed", "1", "--out", p(&out)]), 0);
    let sets = read_jsonl(&out, 2).unwrap();
    assert_eq!(sets.len(), 3);
    assert!(sets.iter().all(|s| s.len() == 5));
    assert!(sets.iter().flat_map(|s| s.coords()).all(|v| *v > 0.0 && *v < 1.0));

    let (model, _) = checkpoint::load(Path::new(&ck)).unwrap();
    let eval = model.default_settings();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let lp = model.log_location_density(&sets[0], &eval, &mut rng).unwrap();
    let rev = model.log_location_density(&sets[0].permuted(&[4, 3, 2, 1, 0]), &eval, &mut rng).unwrap();
    assert!(lp.is_finite());
    assert!((lp - rev).abs() < 1e-9);

    let pois = dir.path().join("p.jsonl");
    assert_eq!(code(&["sample", "--checkpoint", &ck, "--poisson", "--count", "4", "--out", p(&pois)]), 0);
    assert_eq!(read_jsonl(&pois, 2).unwrap().len(), 4);
}

#[test]
fn density_grid_is_normalized() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ck) = fixture(dir.path());
    let cond = dir.path().join("c.jsonl");
    fs::write(&cond, "{\"points\":[[0.3,0.3],[0.31,0.29]]}\n").unwrap();
    for condition in ["none", p(&cond)] {
        let out = dir.path().join("grid.csv");
        let args = ["density-grid", "--checkpoint", &ck, "--condition", condition, "--resolution", "15", "--out", p(&out)];
        assert_eq!(code(&args), 0);
        let text = fs::read_to_string(&out).unwrap();
        assert!(text.starts_with("x,y,log_score,normalized\n"));
        let rows: Vec<Vec<f64>> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 225);
        let xs: Vec<f64> = rows[..15].iter().map(|r| r[0]).collect();
        let ys: Vec<f64> = rows.iter().step_by(15).map(|r| r[1]).collect();
        let norm: Vec<f64> = rows.iter().map(|r| r[3]).collect();
        assert!((grid_integral(&xs, &ys, &norm) - 1.0).abs() < 1e-3);
    }
}

#[test]
fn bench_trace_writes_csv_and_enforces_the_ceiling() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.csv");
    let args = [
        "bench-trace", "--n-list", "8", "--d", "2", "--hidden", "16", "--modes", "closed-form,block,exact-dense",
        "--repeats", "2", "--out", p(&out),
    ];
    assert_eq!(code(&args), 0);
    let text = fs::read_to_string(&out).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(text.lines().next(), Some("n,d,mode,median_seconds,result_value"));
    let values: Vec<f64> = rows.iter().map(|r| r[4].parse().unwrap()).collect();
    assert!(values.iter().all(|v| (v - values[2]).abs() < 1e-9));

    let capped = run(&["bench-trace", "--n-list", "8", "--modes", "exact-dense", "--dense-ceiling", "4", "--out", p(&out)]);
    assert_eq!(capped.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&capped.stderr).contains("exceeds the ceiling"));

    let (data, ck) = fixture(dir.path());
    let nfe = dir.path().join("nfe.csv");
    let args = [
        "bench-trace", "--n-list", "4", "--repeats", "1", "--out", p(&out), "--compare", &format!("{ck},{ck}"),
        "--data", &data, "--nfe-out", p(&nfe),
    ];
    assert_eq!(code(&args), 0);
    let text = fs::read_to_string(&nfe).unwrap();
    assert!(text.starts_with("model,mean_nfe,val_loss\n"));
    assert_eq!(text.lines().count(), 3);
}
