//! End-to-end smoke tests that drive the compiled binary through a miniature
//! pipeline: data generation, both pretraining stages, adapter training, and
//! every evaluation protocol, plus the documented exit codes.

use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pdx() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pdx"));
    cmd.env_remove("PDX_SEED");
    cmd
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed with {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(cmd: &mut Command) -> (i32, String) {
    let out = cmd.output().expect("binary runs");
    (out.status.code().expect("exit code"), String::from_utf8_lossy(&out.stderr).into_owned())
}

/// Small enough to keep every stage under a few seconds, large enough for
/// stratified splits and non-trivial episodes.
fn tiny_config() -> Value {
    json!({
        "seeds": {"data": 11, "train": 12, "eval": 13},
        "engine": {"d_model": 16, "layers": 1, "heads": 2, "f_max": 8, "c_max": 4, "ff_mult": 2},
        "engine_pretrain": {
            "steps": 25,
            "lr": 1e-3,
            "prior": {
                "features_min": 2, "features_max": 8,
                "classes_min": 2, "classes_max": 4,
                "support_min": 6, "support_max": 10,
                "query_min": 4, "query_max": 6,
                "teacher_hidden": 8, "label_noise_max": 0.05
            }
        },
        "mmtm": {
            "d_model": 8, "heads": 2, "visual_depth": 1, "tab_depth": 1, "fusion_depth": 1,
            "ff_mult": 2, "patch": 4, "mask_rate_visual": 0.6, "mask_rate_tabular": 0.5,
            "lr": 1e-3, "batch": 8, "epochs": 1
        },
        "dpt": {
            "layers": 2, "hidden_mult": 2, "lr": 1e-3, "epochs": 2,
            "lambda_align": 1.0, "lambda_icl": 0.01, "support_frac": 0.7,
            "fixed_episode": false, "episode_cap": 64
        },
        "finetune": {"lr": 1e-4, "epochs": 2, "episode_cap": 64, "support_frac": 0.7},
        "multimodal": {
            "n": 32, "classes": 2, "vol_side": 8, "cont_cols": 3,
            "cat_cards": [2, 3], "coupling": 0.9, "missing_rate": 0.1
        },
        "tabular": {
            "n": 60, "context_size": 24, "features": 6, "informative": 4,
            "classes": 2, "separation": 2.0
        }
    })
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&tiny_config()).unwrap()).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap_or_else(|e| {
        panic!("reading {}: {e}", path.display());
    }))
    .unwrap()
}

fn assert_prob(v: &Value, what: &str) {
    let x = v.as_f64().unwrap_or_else(|| panic!("{what} is not a number: {v}"));
    assert!((0.0..=1.0).contains(&x), "{what} out of range: {x}");
}

#[test]
fn full_pipeline_produces_reports_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let data = tmp.path().join("data");
    let art = tmp.path().join("artifacts");
    std::fs::create_dir_all(&art).unwrap();

    run_ok(pdx()
        .args(["gen-data", "--kind", "multimodal", "--out"])
        .arg(&data)
        .arg("--config")
        .arg(&config));
    assert!(data.join("data.bin").exists());
    assert!(data.join("splits.json").exists());
    assert!(data.join("manifest.json").exists());

    // Same config, fresh directory: the dataset must be byte-identical.
    let data2 = tmp.path().join("data2");
    run_ok(pdx()
        .args(["gen-data", "--kind", "multimodal", "--out"])
        .arg(&data2)
        .arg("--config")
        .arg(&config));
    assert_eq!(
        std::fs::read(data.join("data.bin")).unwrap(),
        std::fs::read(data2.join("data.bin")).unwrap(),
        "dataset generation is not deterministic"
    );

    let engine = art.join("engine.ckpt");
    run_ok(pdx().args(["pretrain-engine", "--out"]).arg(&engine).arg("--config").arg(&config));
    assert!(engine.exists());
    assert!(art.join("engine.ckpt.manifest.json").exists());
    assert!(art.join("engine.ckpt.report.json").exists());

    // Determinism again at the checkpoint level.
    let engine2 = tmp.path().join("engine2.ckpt");
    run_ok(pdx().args(["pretrain-engine", "--out"]).arg(&engine2).arg("--config").arg(&config));
    assert_eq!(
        std::fs::read(&engine).unwrap(),
        std::fs::read(&engine2).unwrap(),
        "engine pretraining is not deterministic"
    );

    let mmtm = art.join("mmtm.ckpt");
    run_ok(pdx()
        .args(["pretrain-mmtm", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&mmtm)
        .arg("--config")
        .arg(&config));
    assert!(mmtm.exists());

    let adapter = art.join("adapter.ckpt");
    run_ok(pdx()
        .args(["train-dpt", "--data"])
        .arg(&data)
        .arg("--mmtm")
        .arg(&mmtm)
        .arg("--engine")
        .arg(&engine)
        .arg("--out")
        .arg(&adapter)
        .arg("--config")
        .arg(&config));
    assert!(adapter.exists());
    let curves = read_json(&art.join("adapter.ckpt.curves.json"));
    let records = curves.as_array().expect("curves are a list");
    assert_eq!(records.len(), 2, "one record per epoch");
    for rec in records {
        assert!(rec["l_total"].is_f64(), "missing combined loss in {rec}");
        assert!(rec["l_align"].is_f64());
        assert_prob(&rec["val_acc"], "validation accuracy");
    }

    let eval_out = tmp.path().join("eval.json");
    run_ok(pdx()
        .args(["evaluate", "--data"])
        .arg(&data)
        .arg("--artifacts")
        .arg(&art)
        .arg("--out")
        .arg(&eval_out));
    let eval = read_json(&eval_out);
    for method in ["raw", "adapted"] {
        assert_prob(&eval[method]["accuracy"], "accuracy");
        assert_prob(&eval[method]["macro_f1"], "macro F1");
        assert_prob(&eval[method]["macro_auc"], "macro AUC");
    }

    let sweep_out = tmp.path().join("sweep.json");
    run_ok(pdx()
        .args(["sweep-context", "--data"])
        .arg(&data)
        .arg("--artifacts")
        .arg(&art)
        .args(["--ratios", "0.5,1", "--seeds", "1", "--out"])
        .arg(&sweep_out));
    let sweep = read_json(&sweep_out);
    assert_eq!(sweep["mean"].as_array().unwrap().len(), 2);
    assert_prob(&sweep["mean"][0]["adapted"]["accuracy"], "sweep accuracy");

    let ablate_out = tmp.path().join("ablate.json");
    run_ok(pdx()
        .args(["ablate", "--data"])
        .arg(&data)
        .arg("--artifacts")
        .arg(&art)
        .args(["--seeds", "1", "--out"])
        .arg(&ablate_out));
    let ablate = read_json(&ablate_out);
    let arms = ablate["arms"].as_array().unwrap();
    assert_eq!(arms.len(), 5, "five ablation arms");
    assert!(arms.iter().any(|a| a["variant"] == "full"));

    let spec_path = tmp.path().join("tabular_spec.json");
    std::fs::write(&spec_path, tiny_config()["tabular"].to_string()).unwrap();
    let tab_out = tmp.path().join("tabular.json");
    run_ok(pdx()
        .args(["compare-tabular", "--spec"])
        .arg(&spec_path)
        .arg("--engine")
        .arg(&engine)
        .args(["--seeds", "1", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&tab_out));
    let tab = read_json(&tab_out);
    for method in ["mean_raw", "mean_finetuned", "mean_adapted"] {
        assert_prob(&tab[method]["accuracy"], "tabular accuracy");
    }
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg["dpt"]["lamda_align"] = json!(0.5); // typo on purpose
    let path = tmp.path().join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();

    let (code, stderr) = exit_code(
        pdx()
            .args(["gen-data", "--kind", "multimodal", "--out"])
            .arg(tmp.path().join("data"))
            .arg("--config")
            .arg(&path),
    );
    assert_eq!(code, 2, "stderr: {stderr}");
    assert!(stderr.contains("lamda_align"), "stderr should name the bad key: {stderr}");
}

#[test]
fn corrupted_checkpoint_is_a_corruption_error() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let engine = tmp.path().join("engine.ckpt");
    run_ok(pdx().args(["pretrain-engine", "--out"]).arg(&engine).arg("--config").arg(&config));

    let mut bytes = std::fs::read(&engine).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xFF;
    std::fs::write(&engine, bytes).unwrap();

    let spec_path = tmp.path().join("spec.json");
    std::fs::write(&spec_path, tiny_config()["tabular"].to_string()).unwrap();
    let (code, stderr) = exit_code(
        pdx()
            .args(["compare-tabular", "--spec"])
            .arg(&spec_path)
            .arg("--engine")
            .arg(&engine)
            .args(["--seeds", "1", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(tmp.path().join("out.json")),
    );
    assert_eq!(code, 3, "stderr: {stderr}");
}

#[test]
fn seed_env_override_controls_all_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());

    let a = tmp.path().join("a.ckpt");
    let b = tmp.path().join("b.ckpt");
    for out in [&a, &b] {
        run_ok(pdx()
            .env("PDX_SEED", "7")
            .args(["pretrain-engine", "--out"])
            .arg(out)
            .arg("--config")
            .arg(&config));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    // A different seed must change the weights.
    let c = tmp.path().join("c.ckpt");
    run_ok(pdx()
        .env("PDX_SEED", "8")
        .args(["pretrain-engine", "--out"])
        .arg(&c)
        .arg("--config")
        .arg(&config));
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());

    let (code, stderr) = exit_code(
        pdx()
            .env("PDX_SEED", "not-a-number")
            .args(["pretrain-engine", "--out"])
            .arg(tmp.path().join("d.ckpt"))
            .arg("--config")
            .arg(&config),
    );
    assert_eq!(code, 2, "stderr: {stderr}");
}
