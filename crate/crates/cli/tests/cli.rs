//! End-to-end runs of the `sessrec` binary against a temp directory.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

const BIN: &str = env!("CARGO_BIN_EXE_sessrec");

const SMALL_CFG: &str = "\
seed=7
data.num_users=15
data.num_items=80
data.num_days=5
model.dim=16
model.num_blocks=1
model.ff_hidden=32
model.max_seq_len=512
model.moe.expert_hidden=16
model.moe.num_routed=2
model.moe.top_k=1
loss.num_negatives=8
train.steps=6
train.batch_size=4
train.steps_per_phase=2
pit.num_buckets=3
pit.window_days=3
retrieval.ks=10,20
retrieval.k=10
";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_cfg(dir: &Path, extra: &str) {
    std::fs::write(dir.join("c.cfg"), format!("{}{}", SMALL_CFG, extra)).unwrap();
}

#[test]
fn gen_data_train_eval_pipeline() {
    let tmp = tempdir().unwrap();
    write_cfg(tmp.path(), "");
    let out = run(tmp.path(), &["gen-data", "--config", "c.cfg"]);
    assert!(out.status.success(), "{:?}", out);
    assert!(tmp.path().join("out/events.jsonl").exists());
    assert!(tmp.path().join("out/config.resolved.cfg").exists());

    let out = run(tmp.path(), &["train", "--config", "c.cfg"]);
    assert!(out.status.success(), "{:?}", out);
    assert!(tmp.path().join("out/checkpoint.bin").exists());
    let metrics = std::fs::read_to_string(tmp.path().join("out/train_metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,scenario,loss_nce,loss_click,loss_pay,loss_msp,loss_total"));

    let out = run(tmp.path(), &["eval", "--config", "c.cfg"]);
    assert!(out.status.success(), "{:?}", out);
    let eval = std::fs::read_to_string(tmp.path().join("out/eval.csv")).unwrap();
    assert!(eval.starts_with("scenario,K,hit_rate,users"));

    let out = run(
        tmp.path(),
        &["retrieve", "--config", "c.cfg", "--user", "u0000", "--k", "5"],
    );
    assert!(out.status.success(), "{:?}", out);
    let v: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("retrieve prints one JSON object");
    assert_eq!(v["user_id"], "u0000");
    assert_eq!(v["items"].as_array().unwrap().len(), 5);
}

#[test]
fn train_on_ingested_events_matches_source_flag() {
    let tmp = tempdir().unwrap();
    write_cfg(tmp.path(), "");
    assert!(run(tmp.path(), &["gen-data", "--config", "c.cfg"]).status.success());
    write_cfg(
        tmp.path(),
        "data.source=events\ndata.events=out/events.jsonl\n",
    );
    let out = run(tmp.path(), &["train", "--config", "c.cfg", "--out", "out2"]);
    assert!(out.status.success(), "{:?}", out);
    assert!(tmp.path().join("out2/checkpoint.bin").exists());
}

#[test]
fn pit_run_writes_checkpoint_and_metrics() {
    let tmp = tempdir().unwrap();
    write_cfg(tmp.path(), "");
    let out = run(tmp.path(), &["pit-run", "--config", "c.cfg"]);
    assert!(out.status.success(), "{:?}", out);
    assert!(tmp.path().join("out/checkpoint.bin").exists());
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("phases"), "{}", text);
}

#[test]
fn bad_config_exits_2_with_aggregated_errors() {
    let tmp = tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.cfg"), "model.dim=63\nbogus=1\n").unwrap();
    let out = run(tmp.path(), &["train", "--config", "bad.cfg"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(err.contains("unknown key"), "{}", err);
    assert!(err.contains("divisible"), "{}", err);
}

#[test]
fn unknown_subcommand_exits_2() {
    let tmp = tempdir().unwrap();
    let out = run(tmp.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_1() {
    let tmp = tempdir().unwrap();
    write_cfg(tmp.path(), "");
    let out = run(tmp.path(), &["eval", "--config", "c.cfg"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ablate_produces_four_variants_with_exact_param_deltas() {
    let tmp = tempdir().unwrap();
    std::fs::write(
        tmp.path().join("c.cfg"),
        SMALL_CFG.replace("train.steps=6", "train.steps=3"),
    )
    .unwrap();
    let out = run(tmp.path(), &["ablate", "--config", "c.cfg"]);
    assert!(out.status.success(), "{:?}", out);
    let summary = std::fs::read_to_string(tmp.path().join("out/ablation.csv")).unwrap();
    let mut rows = std::collections::BTreeMap::new();
    for line in summary.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        rows.insert(f[0].to_string(), f[2].parse::<i64>().unwrap());
        assert!(f[3].parse::<f64>().unwrap().is_finite());
        assert!(tmp
            .path()
            .join(format!("out/ablate_{}/train_metrics.csv", f[0]))
            .exists());
    }
    let d = 16i64;
    assert_eq!(rows["base"], 0);
    // TSN off drops one of the two per-stage affine pairs: 2 (d^2 + d).
    assert_eq!(rows["no_tsn"], -2 * (d * d + d));
    // MSP off drops one extra-depth head: d^2 + d.
    assert_eq!(rows["no_msp"], -(d * d + d));
    assert_eq!(rows["no_sw_rope"], 0);
    assert!(rows["no_moe"] < 0);
}

#[test]
fn scale_sweep_summarizes_dims() {
    let tmp = tempdir().unwrap();
    std::fs::write(
        tmp.path().join("c.cfg"),
        SMALL_CFG.replace("train.steps=6", "train.steps=3"),
    )
    .unwrap();
    let out = run(
        tmp.path(),
        &["scale", "--config", "c.cfg", "--dims", "8,16"],
    );
    assert!(out.status.success(), "{:?}", out);
    let summary = std::fs::read_to_string(tmp.path().join("out/scale.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "dim,param_count,log10_params,hr_at_k");
    assert_eq!(lines.len(), 3);
    // Param counts (and their logs) grow with dim.
    let p8: f64 = lines[1].split(',').nth(2).unwrap().parse().unwrap();
    let p16: f64 = lines[2].split(',').nth(2).unwrap().parse().unwrap();
    assert!(p16 > p8);
    // Both runs landed in the shared long-format metrics file.
    let metrics = std::fs::read_to_string(tmp.path().join("out/metrics.csv")).unwrap();
    assert!(metrics.contains("scale_dim8,"));
    assert!(metrics.contains("scale_dim16,"));
}

#[test]
fn same_seed_reproduces_training_metrics() {
    let tmp = tempdir().unwrap();
    write_cfg(tmp.path(), "");
    assert!(run(tmp.path(), &["train", "--config", "c.cfg", "--out", "a"]).status.success());
    assert!(run(tmp.path(), &["train", "--config", "c.cfg", "--out", "b"]).status.success());
    let a = std::fs::read_to_string(tmp.path().join("a/train_metrics.csv")).unwrap();
    let b = std::fs::read_to_string(tmp.path().join("b/train_metrics.csv")).unwrap();
    assert_eq!(a, b);
}
