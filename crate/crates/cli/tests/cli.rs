use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dgcrn_core::Config;

const TINY: &str = r#"
seed = 3

[model]
hidden_dim = 4
emb_dim = 3
hyper_dim = 2
input_len = 4
output_len = 4

[train]
batch_size = 8
max_epochs = 2
max_batches_per_epoch = 2
step_size = 2
log_wall_clock = false

[data.synth]
n_nodes = 4
n_days = 3

[eval]
horizons = [1, 4]
"#;

fn dgcrn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgcrn"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("DGCRN_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn workdir() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

#[test]
fn unknown_command_prints_usage_and_exits_one() {
    let (dir, _) = workdir();
    let o = dgcrn(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(dgcrn(dir.path(), &[]).status.code(), Some(1));
}

#[test]
fn every_subcommand_help_lists_every_config_key() {
    let (dir, _) = workdir();
    let keys = Config::documented_defaults();
    for sub in ["gen-data", "build-graph", "train", "eval", "gradcheck", "bench", "analyze"] {
        let o = dgcrn(dir.path(), &[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        let text = stdout(&o);
        for (k, v) in &keys {
            assert!(text.contains(&format!("{k} = {v}")), "{sub} help lacks {k}");
        }
    }
    let text = stdout(&dgcrn(dir.path(), &["train", "--help"]));
    for line in [
        "train.learning_rate = 0.001",
        "model.hidden_dim = 64",
        "model.emb_dim = 40",
        "model.alpha_mix = 0.05",
        "model.beta_mix = 0.95",
        "model.gamma_mix = 0.95",
        "train.batch_size = 64",
    ] {
        assert!(text.contains(line), "{line}");
    }
}

#[test]
fn gradcheck_passes_and_writes_a_manifest() {
    let (dir, _) = workdir();
    let o = dgcrn(dir.path(), &["gradcheck", "--seed", "7", "--out", "g"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let line = stdout(&o);
    let err: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(err < 1e-4, "{line}");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("g/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gradcheck");
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["status"], "ok");
}

#[test]
fn failed_gradient_tolerance_is_a_numeric_exit() {
    let (dir, _) = workdir();
    let o = dgcrn(dir.path(), &["gradcheck", "--tol", "1e-30", "--out", "g"]);
    assert_eq!(o.status.code(), Some(2));
    let manifest = std::fs::read_to_string(dir.path().join("g/manifest.json")).unwrap();
    assert!(manifest.contains("\"status\": \"error: numeric failure"));
}

#[test]
fn missing_files_name_the_path_and_exit_one() {
    let (dir, _) = workdir();
    for args in [
        vec!["train", "--config", "absent.toml"],
        vec!["eval", "--checkpoint", "absent.ckpt"],
        vec!["build-graph", "--distances", "absent.csv"],
    ] {
        let o = dgcrn(dir.path(), &args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("absent."), "{args:?}");
    }
}

#[test]
fn invalid_settings_exit_one() {
    let (dir, cfg) = workdir();
    let cfg = cfg.to_str().unwrap();
    for args in [
        vec!["train", "--config", cfg, "--horizons", "5"],
        vec!["train", "--config", cfg, "--ablation", "w/o-everything"],
        vec!["train", "--config", cfg, "--precision", "16"],
    ] {
        assert_eq!(dgcrn(dir.path(), &args).status.code(), Some(1), "{args:?}");
    }
    let o = Command::new(env!("CARGO_BIN_EXE_dgcrn"))
        .args(["gradcheck"])
        .current_dir(dir.path())
        .env("DGCRN_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ablation_flag_equals_the_config_edit() {
    let (dir, cfg) = workdir();
    let cfg_s = cfg.to_str().unwrap();
    let edited = dir.path().join("nodg.toml");
    std::fs::write(&edited, TINY.replace("output_len = 4", "output_len = 4\nbeta_mix = 0.0")).unwrap();
    let a = dgcrn(dir.path(), &["train", "--config", cfg_s, "--ablation", "w/o-dg", "--out", "a"]);
    let b = dgcrn(dir.path(), &["train", "--config", edited.to_str().unwrap(), "--out", "b"]);
    assert_eq!((a.status.code(), b.status.code()), (Some(0), Some(0)));
    for f in ["model.ckpt", "train_log.csv", "metrics.csv"] {
        let x = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let y = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
}

#[test]
fn eval_of_perfect_predictions_is_all_zero() {
    let (dir, cfg) = workdir();
    let cfg = cfg.to_str().unwrap();
    assert_eq!(dgcrn(dir.path(), &["gen-data", "--config", cfg, "--format", "csv", "--out", "d"]).status.code(), Some(0));
    let o = dgcrn(
        dir.path(),
        &["eval", "--predictions", "d/speed.csv", "--truth", "d/speed.csv", "--out", "e"],
    );
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("e/metrics.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[2..5], &["0.000000", "0.000000", "0.00"]);
}

#[test]
fn train_then_eval_reproduces_the_test_metrics() {
    let (dir, cfg) = workdir();
    let cfg = cfg.to_str().unwrap();
    assert_eq!(dgcrn(dir.path(), &["train", "--config", cfg, "--out", "t"]).status.code(), Some(0));
    let o = dgcrn(dir.path(), &["eval", "--config", cfg, "--checkpoint", "t/model.ckpt", "--out", "e"]);
    assert_eq!(o.status.code(), Some(0));
    let read = |p: &str| std::fs::read_to_string(dir.path().join(p)).unwrap();
    assert_eq!(read("t/metrics.csv"), read("e/metrics.csv"));

    // f32 checkpoints are half the parameter bytes and still load.
    assert_eq!(
        dgcrn(dir.path(), &["train", "--config", cfg, "--precision", "32", "--out", "t32"]).status.code(),
        Some(0)
    );
    let (a, b) = (
        std::fs::metadata(dir.path().join("t/model.ckpt")).unwrap().len(),
        std::fs::metadata(dir.path().join("t32/model.ckpt")).unwrap().len(),
    );
    assert!(b < a);
    let o = dgcrn(dir.path(), &["eval", "--config", cfg, "--checkpoint", "t32/model.ckpt", "--split", "val", "--out", "e32"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn data_graph_bench_and_analyze_write_their_outputs() {
    let (dir, cfg) = workdir();
    let cfg = cfg.to_str().unwrap();
    let runs: [(&[&str], &[&str]); 4] = [
        (&["gen-data", "--config", cfg, "--out", "d"], &["speed.bin", "distances.csv"]),
        (&["build-graph", "--distances", "d/distances.csv", "--out", "g"], &["graph.bin"]),
        (&["bench", "--config", cfg, "--out", "b"], &["report.csv", "train_log.csv"]),
        (&["analyze", "--config", cfg, "--bins", "5", "--out", "a"], &["histograms.csv", "correlations.csv", "summary.json"]),
    ];
    for (args, files) in runs {
        let o = dgcrn(dir.path(), args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        let out = dir.path().join(args[args.len() - 1]);
        for f in files.iter().chain(&["manifest.json"]) {
            assert!(out.join(f).is_file(), "{args:?} missing {f}");
        }
    }
    let report = std::fs::read_to_string(dir.path().join("b/report.csv")).unwrap();
    for model in ["HA,", "persistence,", "DGCRN,"] {
        assert_eq!(report.lines().filter(|l| l.starts_with(model)).count(), 2, "{model}");
    }
    let (graph, kappa) = dgcrn_core::graph::load_graph(&dir.path().join("g/graph.bin")).unwrap();
    assert_eq!((graph.n_nodes, kappa), (4, 0.1));
}

#[test]
fn config_paths_resolve_next_to_the_config() {
    let (dir, _) = workdir();
    assert_eq!(dgcrn(dir.path(), &["gen-data", "--out", "data"]).status.code(), Some(0));
    let cfg = dir.path().join("data/real.toml");
    std::fs::write(
        &cfg,
        TINY.replace("[data.synth]\nn_nodes = 4\nn_days = 3\n", "[data]\nspeed = \"speed.bin\"\ndistances = \"distances.csv\"\n"),
    )
    .unwrap();
    let o = dgcrn(dir.path(), &["analyze", "--config", "data/real.toml", "--out", "a"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("20 nodes x 5760 steps"));
}
