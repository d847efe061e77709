use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gqkva::bench::CSV_HEADER;
use gqkva::checkpoint::load_checkpoint;
use gqkva::{init_weights, ViTConfig};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gqkva")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn verify_all_passes() {
    let o = run(&["verify", "--schemes", "all", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("15 of 15 schemes passed"));
}

#[test]
fn verify_embed_dim_scale_passes() {
    let o = run(&["verify", "--schemes", "table1", "--scale-mode", "embed-dim"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn verify_json_lists_every_check() {
    let o = run(&["verify", "--schemes", "mha,gqkva-2.3", "--format", "json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let reports = v.as_array().unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[1]["scheme"], "GQKVA-2.3");
    assert!(reports[1]["checks"].as_array().unwrap().len() >= 6);
}

#[test]
fn inconsistent_scheme_is_a_usage_error() {
    let o = run(&["verify", "--schemes", "gqkva-2.2", "--heads", "6"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("g_q * g_kv must equal h"));
    assert!(stderr(&o).contains("scheme grammar"));
}

#[test]
fn unparseable_scheme_lists_grammar() {
    let o = run(&["count", "--preset", "tiny", "--schemes", "mqa,foo-3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gqkva-<g_q>.<g_kv>"));
}

#[test]
fn unknown_preset_is_a_usage_error() {
    let o = run(&["count", "--preset", "vit-huge"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn count_vit_small_reproduces_column() {
    let o = run(&["count", "--preset", "vit-small", "--schemes", "table1", "--format", "json"]);
    assert_eq!(o.status.code(), Some(0));
    let rows: Vec<serde_json::Value> = serde_json::from_slice(&o.stdout).unwrap();
    let params: Vec<f64> = rows.iter().map(|r| r["params_m"].as_f64().unwrap()).collect();
    let expected = [22.05, 21.16, 20.86, 20.57, 20.27, 19.68, 19.09, 19.09, 18.79];
    for (p, e) in params.iter().zip(expected) {
        assert!((p - e).abs() <= 0.02, "{p} vs {e}");
    }
    assert_eq!(rows[0]["scheme"], "MHA");
    assert!((rows[0]["size_mib"].as_f64().unwrap() - 84.11).abs() <= 0.05);
}

#[test]
fn count_custom_dims_override_preset() {
    let o = run(&["count", "--preset", "tiny", "--dim", "16", "--heads", "4", "--schemes", "gqa-2", "--format", "csv"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cfg = ViTConfig::new(16, 4, 1, 16, 2, 4, 2, 6, "gqa-2".parse().unwrap()).unwrap();
    let exact = init_weights::<f32>(&cfg, 0).element_count() as f64 / 1e6;
    let line = stdout(&o).lines().nth(1).unwrap().to_string();
    let params_m: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(params_m, exact);
}

fn non_timing_columns(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            [f[0], f[1], f[2], f[3], f[6]].join(",")
        })
        .collect()
}

#[test]
fn bench_csv_header_order_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let paths = [dir.path().join("a.csv"), dir.path().join("b.csv")];
    for p in &paths {
        let o = run(&[
            "bench",
            "--preset",
            "tiny",
            "--schemes",
            "mqa,mha,gkva-2",
            "--batch",
            "4",
            "--iters",
            "5",
            "--out",
            p.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let a = fs::read_to_string(&paths[0]).unwrap();
    let b = fs::read_to_string(&paths[1]).unwrap();
    assert_eq!(a.lines().next().unwrap(), CSV_HEADER);
    let schemes: Vec<&str> = a.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(schemes, ["MHA", "MQA", "GKVA-2"]);
    assert_eq!(non_timing_columns(&a), non_timing_columns(&b));
}

#[test]
fn bench_rejects_too_few_iterations() {
    let o = run(&["bench", "--preset", "tiny", "--schemes", "mha", "--iters", "4"]);
    assert_eq!(o.status.code(), Some(2));
}

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--preset", "tiny", "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for p in [&a, &b] {
        let o = train(p, &["--schemes", "gqkva-2.3", "--steps", "40", "--seed", "1"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let ca = fs::read(a.join("gqkva-2.3.ckpt")).unwrap();
    assert_eq!(ca, fs::read(b.join("gqkva-2.3.ckpt")).unwrap());
    let strip = |p: &Path| -> Vec<serde_json::Value> {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("ms_per_batch");
                v
            })
            .collect()
    };
    assert_eq!(strip(&a.join("gqkva-2.3.jsonl")), strip(&b.join("gqkva-2.3.jsonl")));
}

#[test]
fn zero_lr_leaves_weights_at_init() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &["--schemes", "mkva", "--steps", "60", "--lr", "0", "--seed", "3", "--samples", "300"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (cfg, w) = load_checkpoint::<f32>(&dir.path().join("mkva.ckpt")).unwrap();
    assert_eq!(w, init_weights::<f32>(&cfg, 3));
    let log = fs::read_to_string(dir.path().join("mkva.jsonl")).unwrap();
    let mut losses = Vec::new();
    let mut accs = Vec::new();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if let Some(l) = v.get("loss") {
            assert_eq!(v["lr"], 0.0);
            losses.push(l.as_f64().unwrap());
        } else {
            accs.push(v["val_accuracy"].as_f64().unwrap());
        }
    }
    assert_eq!(losses.len(), 60);
    assert!(accs.windows(2).all(|w| w[0] == w[1]), "{accs:?}");
    let half = losses.len() / 2;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    assert!((mean(&losses[..half]) - mean(&losses[half..])).abs() < 0.05, "{losses:?}");
}

#[test]
fn default_toy_run_lowers_loss() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &["--schemes", "table1", "--steps", "150", "--samples", "600"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for line in stdout(&o).lines() {
        let (_, rest) = line.split_once("loss ").unwrap();
        let nums: Vec<f64> = rest.split_whitespace().take(3).filter_map(|t| t.parse().ok()).collect();
        assert!(nums[1] < nums[0], "{line}");
    }
    assert_eq!(stdout(&o).lines().count(), 9);
}

#[test]
fn divergence_exits_with_step() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &["--steps", "30", "--lr", "1e30", "--weight-decay", "0"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("diverged at step"));
}

#[test]
fn trains_from_dataset_directory() {
    let dir = tempfile::tempdir().unwrap();
    let data = gqkva::train::synth_dataset(5, 200, 16, 6).unwrap().train;
    gqkva::train::data::save_dataset_dir(&dir.path().join("ds"), &data).unwrap();
    let ds = dir.path().join("ds");
    let o = train(&dir.path().join("run"), &["--steps", "10", "--data-dir", ds.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("run/mha.ckpt").exists());
}

#[test]
fn scatter_writes_series_and_fits() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["scatter", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let csv = fs::read_to_string(dir.path().join("size_vs_acc.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("x,y"));
    assert_eq!(csv.lines().count(), 10);
    let fit: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("size_vs_acc.json")).unwrap()).unwrap();
    assert!(fit["slope"].as_f64().unwrap() > 0.0);
}
