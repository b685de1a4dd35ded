//! End-to-end runs of the `femba` binary on small synthetic data.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 7
[model]
name = "custom"
num_blocks = 1
embed_dim = 8
state_size = 4
channels = 4
samples = 256
[synth]
channels = 4
duration_s = 40.0
artifact_rate = 0.3
[train]
total_steps = 12
val_every = 4
epochs = 3
base_lr = 1e-3
"#;

fn femba(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_femba"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = femba(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A temp dir holding `small.toml` and `data/` from `gen-synth`.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    ok(dir.path(), &["gen-synth", "-c", "small.toml", "-o", "data"]);
    dir
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(femba(dir.path(), &["profile", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(femba(dir.path(), &["pretrain"]).status.code(), Some(2));
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("[model]\nembed_dimm = 3\n", "model.embed_dimm"),
        ("[train]\nlayer_decay = 2.0\n", "train.layer_decay"),
        ("[train.adam]\nbeta1 = \"high\"\n", "train.adam.beta1"),
        ("[model]\nname = \"tiny\"\nnum_blocks = 3\n", "model.name"),
        ("[bench]\nseed = 1\n", "bench.seed"),
        ("[data]\nscheme = \"xyz\"\n", "data.scheme"),
    ];
    for (text, field) in cases {
        std::fs::write(dir.path().join("bad.toml"), text).unwrap();
        let out = femba(dir.path(), &["profile", "-c", "bad.toml", "-o", "p"]);
        assert_eq!(out.status.code(), Some(1), "{text}");
        assert!(stderr(&out).contains(field), "{text}: {}", stderr(&out));
    }
    let out = femba(dir.path(), &["profile", "--set", "model.mask_ratio=1.0", "-o", "p"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("model.mask_ratio"));
}

#[test]
fn profile_writes_report_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["profile", "--variant", "base", "--seed", "3", "-o", "p"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("variant base"), "{stdout}");

    let csv = read(dir.path().join("p/profile.csv"));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,L,batch,params,flops,bytes,wallclock_ms");
    assert!(lines[1].starts_with("femba-base,250,1,"), "{}", lines[1]);
    assert_eq!(lines.iter().filter(|l| l.starts_with("reference-")).count(), 4);

    let report: serde_json::Value = serde_json::from_str(&read(dir.path().join("p/report.json"))).unwrap();
    assert_eq!(report["tokens"], 250);
    let manifest: serde_json::Value = serde_json::from_str(&read(dir.path().join("p/manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "profile");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config"]["model"]["name"], "base");
    assert_eq!(manifest["input_hash"].as_str().unwrap().len(), 64);
    assert!(dir.path().join("p/config.toml").is_file());
}

#[test]
fn pretrain_is_reproducible_and_reruns_from_resolved_config() {
    let ws = workspace();
    let d = ws.path();
    ok(d, &["pretrain", "-c", "small.toml", "--data", "data", "-o", "a"]);
    ok(d, &["pretrain", "-c", "small.toml", "--data", "data", "-o", "b"]);
    ok(d, &["pretrain", "-c", "a/config.toml", "--data", "data", "-o", "c"]);
    for run in ["b", "c"] {
        assert_eq!(read(d.join("a/log.csv")), read(d.join(run).join("log.csv")), "{run}");
        assert_eq!(std::fs::read(d.join("a/model.ckpt")).unwrap(), std::fs::read(d.join(run).join("model.ckpt")).unwrap());
        assert_eq!(read(d.join("a/config.toml")), read(d.join(run).join("config.toml")));
    }
    let log = read(d.join("a/log.csv"));
    assert_eq!(log.lines().next(), Some("step,split,loss,lr"));
    assert_eq!(log.lines().filter(|l| l.contains(",train,")).count(), 12);
    assert!(log.lines().any(|l| l.contains(",val,")));
    let kv = read(d.join("a/metrics.kv"));
    assert!(kv.contains("best_val=") && kv.contains("test_loss="), "{kv}");

    let ma: serde_json::Value = serde_json::from_str(&read(d.join("a/manifest.json"))).unwrap();
    let mc: serde_json::Value = serde_json::from_str(&read(d.join("c/manifest.json"))).unwrap();
    assert_eq!(ma["input_hash"], mc["input_hash"]);
    assert_eq!(ma["config"], mc["config"]);

    ok(d, &["pretrain", "-c", "small.toml", "--data", "data", "--seed", "8", "-o", "s8"]);
    assert_ne!(read(d.join("a/log.csv")), read(d.join("s8/log.csv")));
}

#[test]
fn finetune_eval_and_reconstruct_from_checkpoints() {
    let ws = workspace();
    let d = ws.path();
    ok(d, &["pretrain", "-c", "small.toml", "--data", "data", "-o", "pt"]);
    ok(d, &["finetune", "-c", "small.toml", "--data", "data", "--checkpoint", "pt/model.ckpt", "-o", "ft"]);
    for f in ["log.csv", "model.ckpt", "metrics.txt", "metrics.kv", "manifest.json"] {
        assert!(d.join("ft").join(f).is_file(), "{f}");
    }
    let kv = read(d.join("ft/metrics.kv"));
    assert!(kv.contains("balanced_accuracy=") && kv.contains("auroc="), "{kv}");

    let out = femba(
        d,
        &["finetune", "-c", "small.toml", "--data", "data", "--checkpoint", "pt/model.ckpt", "--set", "model.embed_dim=9", "-o", "bad"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("model.embed_dim"), "{}", stderr(&out));

    ok(d, &["eval", "-c", "small.toml", "--data", "data", "--checkpoint", "ft/model.ckpt", "--split", "all", "-o", "ev"]);
    assert!(read(d.join("ev/metrics.kv")).contains("scheme=bc"));
    let out = femba(d, &["eval", "--data", "data", "--checkpoint", "pt/model.ckpt", "-o", "ev2"]);
    assert_eq!(out.status.code(), Some(1));

    ok(d, &["reconstruct", "-c", "small.toml", "--data", "data", "--checkpoint", "pt/model.ckpt", "--window", "2", "-o", "rc/w.csv"]);
    let rec = read(d.join("rc/w.csv"));
    assert_eq!(rec.lines().next(), Some("channel,sample,original,reconstruction,masked"));
    assert_eq!(rec.lines().count(), 1 + 4 * 256);
    let masked = read(d.join("rc/w.masked.csv"));
    // 8 tokens at ratio 0.6
    assert_eq!(masked.lines().count(), 1 + 4);
    let masked_samples = rec.lines().skip(1).filter(|l| l.ends_with(",1")).count();
    assert_eq!(masked_samples, 4 * 4 * 32);
    assert!(d.join("rc/w.manifest.json").is_file());
}

#[test]
fn csv_recordings_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("small.toml"), SMALL).unwrap();
    std::fs::create_dir(d.join("csv")).unwrap();
    let mut text = String::from("c0,c1,c2,c3\n");
    for t in 0..256 * 12 {
        let x = t as f64 * 0.05;
        text.push_str(&format!("{},{},{},{}\n", x.sin(), x.cos(), (2.0 * x).sin(), (0.5 * x).cos()));
    }
    std::fs::write(d.join("csv/rec.csv"), text).unwrap();
    ok(d, &["pretrain", "-c", "small.toml", "--data", "csv", "--set", "data.stride=128", "--steps", "4", "-o", "pt"]);
    assert!(d.join("pt/model.ckpt").is_file());
}

#[test]
fn bench_scaling_writes_rows_and_slopes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("small.toml"), SMALL).unwrap();
    ok(d, &["bench-scaling", "-c", "small.toml", "--lengths", "16,32,64", "--reps", "3", "-o", "b"]);
    let csv = read(d.join("b/bench.csv"));
    assert_eq!(csv.lines().filter(|l| l.starts_with("femba-custom,")).count(), 3);
    assert_eq!(csv.lines().filter(|l| l.starts_with("attention,")).count(), 3);
    let slopes = read(d.join("b/slopes.kv"));
    assert!(slopes.contains("encoder_slope=") && slopes.contains("attention_slope="));
    let out = femba(d, &["bench-scaling", "--lengths", "64,32", "-o", "b2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("bench.lengths"));
}
