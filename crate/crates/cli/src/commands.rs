//! Subcommand implementations: each stage reads validated inputs, runs one
//! deterministic piece of the pipeline, and writes its artifact plus a
//! manifest describing exactly how it was produced.

use crate::checkpoint;
use crate::config::{load_config, validate, RunConfig};
use crate::error::{from_core, CliError};
use crate::manifest::{read_config_echo, sidecar_for, Manifest};
use pdx_core::adapter::{predict_adapted, predict_raw, train_adapter, Adapter};
use pdx_core::data::{
    generate_multimodal, generate_tabular, stratified_split, MultimodalDataset, Splits,
    TabularDataset, TabularSpec,
};
use pdx_core::engine::Engine;
use pdx_core::eval::{
    compare_tabular, context_sweep, evaluate_probs, mean_metrics, run_ablation, AblationVariant,
    CohortFeatures, MethodMetrics, SweepPoint, TabularComparison,
};
use pdx_core::mmtm::{prepare_cohort, Mmtm, MmtmDims};
use pdx_core::prior::pretrain_engine;
use pdx_tensor::SeededRng;
use serde::Serialize;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DataKind {
    Multimodal,
    Tabular,
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::Corrupt(format!("creating {}: {e}", parent.display())))?;
        }
    }
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text)
        .map_err(|e| CliError::Corrupt(format!("writing {}: {e}", path.display())))
}

fn load_multimodal(dir: &Path) -> Result<(MultimodalDataset, Splits), CliError> {
    let ds = MultimodalDataset::load(dir).map_err(from_core)?;
    let splits_path = dir.join("splits.json");
    let text = std::fs::read_to_string(&splits_path)
        .map_err(|e| CliError::Corrupt(format!("reading {}: {e}", splits_path.display())))?;
    let splits: Splits = serde_json::from_str(&text)
        .map_err(|e| CliError::Corrupt(format!("{}: {e}", splits_path.display())))?;
    let n = ds.spec.n;
    if splits.train.iter().chain(&splits.val).chain(&splits.test).any(|&i| i >= n) {
        return Err(CliError::Corrupt(format!(
            "{}: split index out of range for {n} rows",
            splits_path.display()
        )));
    }
    Ok((ds, splits))
}

/// Rebuild the engine recorded at `ckpt`: architecture from the manifest's
/// config echo, weights from the checkpoint itself.
fn load_engine(ckpt: &Path) -> Result<(Engine, RunConfig), CliError> {
    let echo = read_config_echo(&sidecar_for(ckpt))?;
    let mut engine = Engine::new(echo.engine.clone(), &mut SeededRng::new(0));
    checkpoint::load_params(ckpt, &mut engine)?;
    Ok((engine, echo))
}

fn load_mmtm(ckpt: &Path, ds: &MultimodalDataset) -> Result<(Mmtm, RunConfig), CliError> {
    let echo = read_config_echo(&sidecar_for(ckpt))?;
    let spec = &ds.spec;
    if spec.vol_side % echo.mmtm.patch != 0 {
        return Err(CliError::Corrupt(format!(
            "checkpoint patch size {} does not divide volume side {}",
            echo.mmtm.patch, spec.vol_side
        )));
    }
    let dims = MmtmDims::for_dataset(spec.vol_side, echo.mmtm.patch, spec.cont_cols, &spec.cat_cards);
    let mut model = Mmtm::new(echo.mmtm.clone(), dims, &mut SeededRng::new(0));
    checkpoint::load_params(ckpt, &mut model)?;
    Ok((model, echo))
}

fn load_adapter(ckpt: &Path) -> Result<(Adapter, RunConfig), CliError> {
    let echo = read_config_echo(&sidecar_for(ckpt))?;
    let d = echo.mmtm.d_model;
    let mut adapter = Adapter::new(d, d, echo.dpt.layers, echo.dpt.hidden_mult, &mut SeededRng::new(0));
    checkpoint::load_params(ckpt, &mut adapter)?;
    Ok((adapter, echo))
}

/// Fused per-subject features for the whole cohort: preparation statistics
/// fitted on the training split, extraction over every row.
fn cohort_features(
    ds: &MultimodalDataset,
    splits: &Splits,
    mmtm: &Mmtm,
) -> Result<CohortFeatures, CliError> {
    let prep = prepare_cohort(ds, &splits.train, mmtm.config.patch).map_err(from_core)?;
    let all: Vec<usize> = (0..ds.spec.n).collect();
    let features = mmtm.extract(&prep, &all).map_err(from_core)?;
    Ok(CohortFeatures {
        features,
        labels: ds.labels.clone(),
        splits: splits.clone(),
        n_classes: ds.spec.classes,
    })
}

// ---------------------------------------------------------------------------
// Stage commands
// ---------------------------------------------------------------------------

pub fn gen_data(kind: DataKind, config: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Corrupt(format!("creating {}: {e}", out.display())))?;
    let mut manifest = Manifest::new("gen-data", &cfg);
    if let Some(c) = config {
        manifest.input(c)?;
    }
    let root = SeededRng::new(cfg.seeds.data);
    let labels = match kind {
        DataKind::Multimodal => {
            let ds = generate_multimodal(&cfg.multimodal, &mut root.split(1));
            ds.save(out).map_err(from_core)?;
            ds.labels
        }
        DataKind::Tabular => {
            let ds = generate_tabular(&cfg.tabular, &mut root.split(1));
            ds.save(out).map_err(from_core)?;
            ds.labels
        }
    };
    let splits = stratified_split(&labels, &mut root.split(2)).map_err(from_core)?;
    write_json(&out.join("splits.json"), &splits)?;
    manifest.output(&out.join("data.bin"));
    manifest.output(&out.join("splits.json"));
    manifest.write_for(out)?;
    Ok(())
}

pub fn pretrain_engine_cmd(config: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let mut manifest = Manifest::new("pretrain-engine", &cfg);
    if let Some(c) = config {
        manifest.input(c)?;
    }
    let root = SeededRng::new(cfg.seeds.train);
    let mut init_rng = root.split(1);
    let mut engine = Engine::new(cfg.engine.clone(), &mut init_rng);
    let report = pretrain_engine(&mut engine, &cfg.engine_pretrain, &root.split(2)).map_err(from_core)?;
    checkpoint::save_params(out, &engine)?;
    write_json(&report_path(out), &report)?;
    manifest.output(out);
    manifest.output(&report_path(out));
    manifest.write_for(out)?;
    Ok(())
}

pub fn pretrain_mmtm_cmd(data: &Path, config: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let (ds, splits) = load_multimodal(data)?;
    if ds.spec.vol_side % cfg.mmtm.patch != 0 {
        return Err(CliError::Config(format!(
            "mmtm: patch size {} does not divide the dataset's volume side {}",
            cfg.mmtm.patch, ds.spec.vol_side
        )));
    }
    let mut manifest = Manifest::new("pretrain-mmtm", &cfg);
    manifest.input(data)?;
    if let Some(c) = config {
        manifest.input(c)?;
    }
    let prep = prepare_cohort(&ds, &splits.train, cfg.mmtm.patch).map_err(from_core)?;
    let dims =
        MmtmDims::for_dataset(ds.spec.vol_side, cfg.mmtm.patch, ds.spec.cont_cols, &ds.spec.cat_cards);
    let root = SeededRng::new(cfg.seeds.train);
    let mut init_rng = root.split(1);
    let mut model = Mmtm::new(cfg.mmtm.clone(), dims, &mut init_rng);
    let report = model.pretrain(&prep, &splits.train, &root.split(2)).map_err(from_core)?;
    checkpoint::save_params(out, &model)?;
    write_json(&report_path(out), &report)?;
    manifest.output(out);
    manifest.output(&report_path(out));
    manifest.write_for(out)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn train_dpt_cmd(
    data: &Path,
    mmtm_ckpt: &Path,
    engine_ckpt: &Path,
    config: Option<&Path>,
    out: &Path,
    fixed_episode: bool,
    lambda_align: Option<f64>,
    lambda_icl: Option<f64>,
) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    if fixed_episode {
        cfg.dpt.fixed_episode = true;
    }
    if let Some(v) = lambda_align {
        cfg.dpt.lambda_align = v;
    }
    if let Some(v) = lambda_icl {
        cfg.dpt.lambda_icl = v;
    }
    validate(&cfg)?;

    let (ds, splits) = load_multimodal(data)?;
    let (engine, _) = load_engine(engine_ckpt)?;
    let (mmtm, _) = load_mmtm(mmtm_ckpt, &ds)?;
    if mmtm.config.d_model > engine.config.f_max {
        return Err(CliError::Config(format!(
            "engine supports at most {} features but fused features have width {}",
            engine.config.f_max, mmtm.config.d_model
        )));
    }

    let mut manifest = Manifest::new("train-dpt", &cfg);
    manifest.input(data)?;
    manifest.input(mmtm_ckpt)?;
    manifest.input(engine_ckpt)?;
    if let Some(c) = config {
        manifest.input(c)?;
    }

    let cohort = cohort_features(&ds, &splits, &mmtm)?;
    let (train_x, train_y) = (cohort.train_x(), cohort.train_y());
    let val_x = cohort.val_x();
    let val_y: Vec<usize> = splits.val.iter().map(|&i| ds.labels[i]).collect();
    let (adapter, report) = train_adapter(
        &engine,
        &train_x,
        &train_y,
        ds.spec.classes,
        Some((&val_x, &val_y)),
        &cfg.dpt,
        &SeededRng::new(cfg.seeds.train).split(3),
    )
    .map_err(from_core)?;

    checkpoint::save_params(out, &adapter)?;
    write_json(&curves_path(out), &report.records)?;
    manifest.output(out);
    manifest.output(&curves_path(out));
    manifest.write_for(out)?;
    Ok(())
}

fn report_path(ckpt: &Path) -> std::path::PathBuf {
    let mut name = ckpt.file_name().unwrap_or_default().to_os_string();
    name.push(".report.json");
    ckpt.with_file_name(name)
}

fn curves_path(ckpt: &Path) -> std::path::PathBuf {
    let mut name = ckpt.file_name().unwrap_or_default().to_os_string();
    name.push(".curves.json");
    ckpt.with_file_name(name)
}

// ---------------------------------------------------------------------------
// Protocol commands
// ---------------------------------------------------------------------------

/// Artifacts directory layout shared by the evaluation protocols.
struct Artifacts {
    engine: Engine,
    mmtm: Mmtm,
    config: RunConfig,
}

fn load_artifacts(dir: &Path, ds: &MultimodalDataset) -> Result<Artifacts, CliError> {
    let (engine, _) = load_engine(&dir.join("engine.ckpt"))?;
    let (mmtm, config) = load_mmtm(&dir.join("mmtm.ckpt"), ds)?;
    Ok(Artifacts { engine, mmtm, config })
}

#[derive(Serialize)]
struct EvaluateReport {
    raw: MethodMetrics,
    adapted: MethodMetrics,
}

pub fn evaluate_cmd(data: &Path, artifacts_dir: &Path, out: &Path) -> Result<(), CliError> {
    let (ds, splits) = load_multimodal(data)?;
    let art = load_artifacts(artifacts_dir, &ds)?;
    let (adapter, _) = load_adapter(&artifacts_dir.join("adapter.ckpt"))?;

    let mut manifest = Manifest::new("evaluate", &art.config);
    manifest.input(data)?;
    manifest.input(artifacts_dir)?;

    let cohort = cohort_features(&ds, &splits, &art.mmtm)?;
    let (train_x, train_y) = (cohort.train_x(), cohort.train_y());
    let (test_x, test_y) = (cohort.test_x(), cohort.test_y());
    let c = ds.spec.classes;

    let raw_probs = predict_raw(&art.engine, &train_x, &train_y, &test_x, c).map_err(from_core)?;
    let adapted_probs =
        predict_adapted(&art.engine, &adapter, &train_x, &train_y, &test_x, c).map_err(from_core)?;
    let report = EvaluateReport {
        raw: evaluate_probs(&test_y, &raw_probs, c),
        adapted: evaluate_probs(&test_y, &adapted_probs, c),
    };
    write_json(out, &report)?;
    manifest.output(out);
    manifest.write_for(out)?;
    Ok(())
}

#[derive(Serialize)]
struct SweepMeanPoint {
    ratio: f64,
    context_size: usize,
    raw: MethodMetrics,
    adapted: MethodMetrics,
    parametric: MethodMetrics,
}

#[derive(Serialize)]
struct SweepReport {
    ratios: Vec<f64>,
    seeds: usize,
    per_seed: Vec<Vec<SweepPoint>>,
    mean: Vec<SweepMeanPoint>,
}

pub fn sweep_context_cmd(
    data: &Path,
    artifacts_dir: &Path,
    ratios: &[f64],
    seeds: usize,
    config: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    if ratios.is_empty() || ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
        return Err(CliError::Config("ratios must lie in (0, 1]".into()));
    }
    if seeds == 0 {
        return Err(CliError::Config("need at least one seed".into()));
    }
    let (ds, splits) = load_multimodal(data)?;
    let art = load_artifacts(artifacts_dir, &ds)?;
    let cfg = match config {
        Some(_) => load_config(config)?,
        None => art.config.clone(),
    };

    let mut manifest = Manifest::new("sweep-context", &cfg);
    manifest.input(data)?;
    manifest.input(artifacts_dir)?;
    if let Some(c) = config {
        manifest.input(c)?;
    }

    let cohort = cohort_features(&ds, &splits, &art.mmtm)?;
    let mut per_seed = Vec::with_capacity(seeds);
    for s in 0..seeds {
        let rng = SeededRng::new(cfg.seeds.eval + s as u64);
        per_seed.push(context_sweep(&art.engine, &cohort, &cfg.dpt, ratios, &rng).map_err(from_core)?);
    }
    let mean = (0..ratios.len())
        .map(|k| {
            let raws: Vec<MethodMetrics> = per_seed.iter().map(|run| run[k].raw.clone()).collect();
            let adapteds: Vec<MethodMetrics> =
                per_seed.iter().map(|run| run[k].adapted.clone()).collect();
            let params: Vec<MethodMetrics> =
                per_seed.iter().map(|run| run[k].parametric.clone()).collect();
            SweepMeanPoint {
                ratio: ratios[k],
                context_size: per_seed[0][k].context_size,
                raw: mean_metrics(&raws),
                adapted: mean_metrics(&adapteds),
                parametric: mean_metrics(&params),
            }
        })
        .collect();
    let report = SweepReport { ratios: ratios.to_vec(), seeds, per_seed, mean };
    write_json(out, &report)?;
    manifest.output(out);
    manifest.write_for(out)?;
    Ok(())
}

#[derive(Serialize)]
struct AblationArm {
    variant: String,
    per_seed: Vec<MethodMetrics>,
    mean: MethodMetrics,
}

#[derive(Serialize)]
struct AblationReport {
    seeds: usize,
    arms: Vec<AblationArm>,
}

pub fn ablate_cmd(
    data: &Path,
    artifacts_dir: &Path,
    seeds: usize,
    config: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    if seeds == 0 {
        return Err(CliError::Config("need at least one seed".into()));
    }
    let (ds, splits) = load_multimodal(data)?;
    let art = load_artifacts(artifacts_dir, &ds)?;
    let cfg = match config {
        Some(_) => load_config(config)?,
        None => art.config.clone(),
    };

    let mut manifest = Manifest::new("ablate", &cfg);
    manifest.input(data)?;
    manifest.input(artifacts_dir)?;
    if let Some(c) = config {
        manifest.input(c)?;
    }

    let pretrained = cohort_features(&ds, &splits, &art.mmtm)?;
    // The no-pretraining arm extracts features with a freshly initialized
    // encoder of the same architecture.
    let dims = MmtmDims::for_dataset(
        ds.spec.vol_side,
        art.mmtm.config.patch,
        ds.spec.cont_cols,
        &ds.spec.cat_cards,
    );
    let mut fresh_rng = SeededRng::new(cfg.seeds.eval).split(0xF);
    let fresh = Mmtm::new(art.mmtm.config.clone(), dims, &mut fresh_rng);
    let random_init = cohort_features(&ds, &splits, &fresh)?;

    let mut arms = Vec::new();
    for variant in AblationVariant::ALL {
        let mut per_seed = Vec::with_capacity(seeds);
        for s in 0..seeds {
            let rng = SeededRng::new(cfg.seeds.eval + s as u64);
            per_seed.push(
                run_ablation(&art.engine, &pretrained, &random_init, variant, &cfg.dpt, &rng)
                    .map_err(from_core)?,
            );
        }
        arms.push(AblationArm {
            variant: variant.name().to_string(),
            mean: mean_metrics(&per_seed),
            per_seed,
        });
    }
    let report = AblationReport { seeds, arms };
    write_json(out, &report)?;
    manifest.output(out);
    manifest.write_for(out)?;
    Ok(())
}

#[derive(Serialize)]
struct TabularReport {
    spec: TabularSpec,
    seeds: usize,
    per_seed: Vec<TabularComparison>,
    mean_raw: MethodMetrics,
    mean_finetuned: MethodMetrics,
    mean_adapted: MethodMetrics,
}

pub fn compare_tabular_cmd(
    spec_path: &Path,
    engine_ckpt: &Path,
    seeds: usize,
    config: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    if seeds == 0 {
        return Err(CliError::Config("need at least one seed".into()));
    }
    let cfg = load_config(config)?;
    let text = std::fs::read_to_string(spec_path)
        .map_err(|e| CliError::Config(format!("reading {}: {e}", spec_path.display())))?;
    let spec: TabularSpec = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", spec_path.display())))?;
    let (engine, _) = load_engine(engine_ckpt)?;
    if spec.features > engine.config.f_max {
        return Err(CliError::Config(format!(
            "engine supports at most {} features but the dataset has {}",
            engine.config.f_max, spec.features
        )));
    }
    if spec.classes > engine.config.c_max {
        return Err(CliError::Config(format!(
            "engine supports at most {} classes but the dataset has {}",
            engine.config.c_max, spec.classes
        )));
    }

    let mut manifest = Manifest::new("compare-tabular", &cfg);
    manifest.input(spec_path)?;
    manifest.input(engine_ckpt)?;
    if let Some(c) = config {
        manifest.input(c)?;
    }

    let ds: TabularDataset = generate_tabular(&spec, &mut SeededRng::new(cfg.seeds.data).split(1));
    let mut per_seed = Vec::with_capacity(seeds);
    for s in 0..seeds {
        let rng = SeededRng::new(cfg.seeds.eval + s as u64);
        per_seed.push(compare_tabular(&engine, &ds, &cfg.dpt, &cfg.finetune, &rng).map_err(from_core)?);
    }
    let report = TabularReport {
        spec,
        seeds,
        mean_raw: mean_metrics(&per_seed.iter().map(|r| r.raw.clone()).collect::<Vec<_>>()),
        mean_finetuned: mean_metrics(&per_seed.iter().map(|r| r.finetuned.clone()).collect::<Vec<_>>()),
        mean_adapted: mean_metrics(&per_seed.iter().map(|r| r.adapted.clone()).collect::<Vec<_>>()),
        per_seed,
    };
    write_json(out, &report)?;
    manifest.output(out);
    manifest.write_for(out)?;
    Ok(())
}
