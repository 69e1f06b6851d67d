use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bysgnn_cli::run_config::RunConfig;

const SMALL: &str = "\
[model]
lift_dim = 8
temporal_dim = 16
semantic_dim = 8
embed_dim = 32
heads = 2
gcn_hidden = 16
gcn_out = 8

[train]
epochs = 1
batch_size = 64
";

fn bysgnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bysgnn"))
        .args(args)
        .env_remove("BYSGNN_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = bysgnn(args);
    assert!(
        out.status.success(),
        "bysgnn {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, pois: usize, seed: u64) {
    ok(&[
        "synth",
        "--out",
        p(dir),
        "--set",
        &format!("n_pois={pois}"),
        "--set",
        "n_categories=2",
        "--set",
        "days=14",
        "--seed",
        &seed.to_string(),
    ]);
}

#[test]
fn synth_guards_existing_output() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("data");
    synth(&dir, 4, 1);
    let spec = fs::read_to_string(dir.join("synth_spec.txt")).unwrap();
    assert!(spec.starts_with("# seed = 1\n"));
    assert!(spec.contains("n_pois = 4"));
    let before = fs::read_to_string(dir.join("visits.csv")).unwrap();

    let again = bysgnn(&["synth", "--out", p(&dir), "--seed", "2"]);
    assert_eq!(again.status.code(), Some(2));
    assert_eq!(fs::read_to_string(dir.join("visits.csv")).unwrap(), before);

    ok(&["synth", "--out", p(&dir), "--set", "n_pois=4", "--set", "n_categories=2", "--set", "days=14", "--seed", "2", "--force"]);
    assert_ne!(fs::read_to_string(dir.join("visits.csv")).unwrap(), before);

    let bad = bysgnn(&["synth", "--out", p(&tmp.path().join("x")), "--set", "n_pois"]);
    assert_eq!(bad.status.code(), Some(2));
    let bad = bysgnn(&["synth", "--out", p(&tmp.path().join("y")), "--set", "colour=red"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn train_eval_inspect_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 5, 3);
    let cfg = tmp.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let run = tmp.path().join("run");
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run), "--seed", "5"]);

    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.starts_with("epoch,lr,train_loss,val_loss,val_mae,val_mape,val_rmse\n"));
    let snap = RunConfig::load(&run.join("run_config.toml")).unwrap();
    assert_eq!(snap.train.seed, 5);
    assert_eq!(snap.model.temporal_dim, 16);
    assert_eq!(snap.threads, Some(1));

    let ck = run.join("checkpoint.json");
    let ev = tmp.path().join("eval");
    ok(&["eval", "--checkpoint", p(&ck), "--data", p(&data), "--out", p(&ev)]);
    let csv = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("BysGNN,"));
    assert!(csv.contains("Naive Seasonal"));
    assert!(ev.join("metrics.txt").exists());
    assert!(ev.join("run_config.toml").exists());

    let ins = tmp.path().join("inspect");
    ok(&[
        "inspect-graph",
        "--checkpoint",
        p(&ck),
        "--data",
        p(&data),
        "--timestamp",
        "2020-01-06T12:00:00Z",
        "--out",
        p(&ins),
    ]);
    // 5 POIs, 2 categories, global.
    let adj = fs::read_to_string(ins.join("adjacency.csv")).unwrap();
    let rows: Vec<&str> = adj.lines().collect();
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| r.split(',').count() == 9));
    assert!(rows[0].ends_with(",global"));
    let emb = fs::read_to_string(ins.join("embeddings.csv")).unwrap();
    assert_eq!(emb.lines().count(), 9);
    assert_eq!(emb.lines().next().unwrap().split(',').count(), 1 + 8);
    let alpha: f64 = fs::read_to_string(ins.join("gate_alpha.txt")).unwrap().trim().parse().unwrap();
    assert!(alpha > 0.0 && alpha < 1.0);

    for ts in ["2020-01-01T03:00:00Z", "2020-02-01T00:00:00Z", "2020-01-06T12:30:00Z", "yesterday"] {
        let out = bysgnn(&["inspect-graph", "--checkpoint", p(&ck), "--data", p(&data), "--timestamp", ts, "--out", p(&ins)]);
        assert_eq!(out.status.code(), Some(2), "{ts}");
    }

    // A dataset with an extra POI is a different node set.
    let other = tmp.path().join("other");
    synth(&other, 6, 3);
    let out = bysgnn(&["eval", "--checkpoint", p(&ck), "--data", p(&other), "--out", p(&tmp.path().join("e2"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("node set mismatch"));
}

#[test]
fn snapshot_feeds_back_as_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 4, 8);
    let cfg = tmp.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let a = tmp.path().join("a");
    ok(&[
        "train", "--config", p(&cfg), "--data", p(&data), "--out", p(&a), "--lr", "0.002", "--ablate", "no_space",
        "--loss", "mse",
    ]);
    let b = tmp.path().join("b");
    ok(&["train", "--config", p(&a.join("run_config.toml")), "--out", p(&b)]);
    let sa = RunConfig::load(&a.join("run_config.toml")).unwrap();
    let sb = RunConfig::load(&b.join("run_config.toml")).unwrap();
    assert_eq!(sa.train, sb.train);
    assert_eq!(sa.model, sb.model);
    assert!(sb.train.ablation.no_space);
    assert_eq!(sb.train.lr0, 0.002);
    assert_eq!(
        fs::read_to_string(a.join("train_log.csv")).unwrap(),
        fs::read_to_string(b.join("train_log.csv")).unwrap()
    );
}

#[test]
fn ablate_writes_table() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 4, 9);
    let cfg = tmp.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let out = tmp.path().join("abl");
    ok(&[
        "ablate", "--config", p(&cfg), "--data", p(&data), "--out", p(&out), "--variants", "no_space,no_self_attention",
        "--seeds", "0,1",
    ]);
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let variants: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(variants, ["full", "no_space", "no_self_attention"]);
    assert!(csv.lines().nth(1).unwrap().starts_with("full,0 1,"));
    let text = fs::read_to_string(out.join("ablation.txt")).unwrap();
    assert!(text.contains('%'));
    let snap = RunConfig::load(&out.join("run_config.toml")).unwrap();
    assert_eq!(snap.seeds, Some(vec![0, 1]));
}

#[test]
fn input_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = p(tmp.path());
    let missing = bysgnn(&["train", "--data", "/nonexistent", "--out", out]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent/visits.csv"));
    assert_eq!(bysgnn(&["train", "--out", out]).status.code(), Some(2));
    assert_eq!(bysgnn(&["train", "--data", out, "--out", out, "--ablate", "no_graph"]).status.code(), Some(2));
    assert_eq!(bysgnn(&["train", "--data", out, "--out", out, "--loss", "huber"]).status.code(), Some(2));
    assert_eq!(bysgnn(&["--threads", "0", "train", "--data", out, "--out", out]).status.code(), Some(2));

    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepoch = 3\n").unwrap();
    assert_eq!(bysgnn(&["train", "--config", p(&cfg)]).status.code(), Some(2));

    let data = tmp.path().join("data");
    fs::create_dir(&data).unwrap();
    fs::write(data.join("visits.csv"), "poi_id,timestamp_utc,visits\np1,2020-01-01T00:00:00Z,abc\n").unwrap();
    fs::write(data.join("metadata.csv"), "").unwrap();
    let parse = bysgnn(&["train", "--data", p(&data), "--out", out]);
    assert_eq!(parse.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&parse.stderr).contains(":2:"));
}

#[test]
fn divergence_exits_with_three_and_keeps_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 4, 2);
    let cfg = tmp.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let run = tmp.path().join("run");
    let out = bysgnn(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run), "--lr", "1e300", "--epochs", "3"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("checkpoint.json").exists());
    assert!(run.join("train_log.csv").exists());
}

#[test]
fn synth_is_deterministic_under_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, 5, 42);
    synth(&b, 5, 42);
    for f in ["visits.csv", "metadata.csv", "synth_spec.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}
