//! Run configuration: one JSON document with a section per pipeline stage.
//! Every field has a default; unknown keys are rejected.

use crate::error::CliError;
use pdx_core::adapter::AdapterConfig;
use pdx_core::data::{MultimodalSpec, TabularSpec};
use pdx_core::engine::EngineConfig;
use pdx_core::eval::FinetuneConfig;
use pdx_core::mmtm::MmtmConfig;
use pdx_core::prior::PretrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Base seeds per pipeline role. Stages derive their streams from these, so
/// runs are reproducible from the manifest alone.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub train: u64,
    pub eval: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Seeds,
    /// Default location for reports when a command has no explicit `--out`.
    pub out_dir: PathBuf,
    pub engine: EngineConfig,
    pub engine_pretrain: PretrainConfig,
    pub mmtm: MmtmConfig,
    pub dpt: AdapterConfig,
    pub finetune: FinetuneConfig,
    pub multimodal: MultimodalSpec,
    pub tabular: TabularSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: Seeds::default(),
            out_dir: PathBuf::from("runs"),
            engine: EngineConfig::default(),
            engine_pretrain: PretrainConfig::default(),
            mmtm: MmtmConfig::default(),
            dpt: AdapterConfig::default(),
            finetune: FinetuneConfig::default(),
            multimodal: MultimodalSpec::default(),
            tabular: TabularSpec::default(),
        }
    }
}

/// Load a config file (defaults when `path` is `None`), then apply the
/// `PDX_SEED` override and validate cross-field invariants.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let mut cfg: RunConfig = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("reading {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Ok(seed) = std::env::var("PDX_SEED") {
        let v: u64 = seed
            .parse()
            .map_err(|_| CliError::Config(format!("PDX_SEED must be an unsigned integer, got '{seed}'")))?;
        cfg.seeds = Seeds { data: v, train: v, eval: v };
    }
    validate(&cfg)?;
    Ok(cfg)
}

pub(crate) fn validate(cfg: &RunConfig) -> Result<(), CliError> {
    let d = &cfg.dpt;
    if d.lambda_align < 0.0 || d.lambda_icl < 0.0 {
        return Err(CliError::Config("dpt: loss weights must be non-negative".into()));
    }
    if d.lambda_align == 0.0 && d.lambda_icl == 0.0 {
        return Err(CliError::Config("dpt: at least one loss weight must be positive".into()));
    }
    if !(d.support_frac > 0.0 && d.support_frac < 1.0) {
        return Err(CliError::Config("dpt: support_frac must lie in (0, 1)".into()));
    }
    if d.layers < 1 {
        return Err(CliError::Config("dpt: layers must be at least 1".into()));
    }
    let m = &cfg.mmtm;
    if m.d_model == 0 || m.heads == 0 || m.d_model % m.heads != 0 {
        return Err(CliError::Config("mmtm: d_model must be a positive multiple of heads".into()));
    }
    if !(0.0..=1.0).contains(&m.mask_rate_visual) || !(0.0..=1.0).contains(&m.mask_rate_tabular) {
        return Err(CliError::Config("mmtm: mask rates must lie in [0, 1]".into()));
    }
    if cfg.multimodal.vol_side % m.patch != 0 {
        return Err(CliError::Config(format!(
            "mmtm: patch size {} does not divide volume side {}",
            m.patch, cfg.multimodal.vol_side
        )));
    }
    let e = &cfg.engine;
    if e.d_model == 0 || e.heads == 0 || e.d_model % e.heads != 0 {
        return Err(CliError::Config("engine: d_model must be a positive multiple of heads".into()));
    }
    if cfg.mmtm.d_model > e.f_max {
        return Err(CliError::Config(format!(
            "engine: f_max {} is smaller than the {}-dimensional fused features",
            e.f_max, cfg.mmtm.d_model
        )));
    }
    let t = &cfg.tabular;
    if t.informative > t.features {
        return Err(CliError::Config("tabular: informative block exceeds feature count".into()));
    }
    if t.classes < 2 {
        return Err(CliError::Config("tabular: need at least two classes".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_validate() {
        let cfg = load_config(None).unwrap();
        assert_eq!(cfg.dpt.layers, 6);
        assert_eq!(cfg.dpt.lambda_align, 1.0);
        assert_eq!(cfg.dpt.lambda_icl, 0.01);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"dpt": {"lr": 0.001, "warp_speed": 9}}"#).unwrap();
        let err = load_config(Some(&p)).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("warp_speed"));
    }

    #[test]
    fn partial_config_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seeds": {"train": 7}, "dpt": {"epochs": 3}}"#).unwrap();
        let cfg = load_config(Some(&p)).unwrap();
        assert_eq!(cfg.seeds.train, 7);
        assert_eq!(cfg.seeds.data, 0);
        assert_eq!(cfg.dpt.epochs, 3);
        assert_eq!(cfg.dpt.layers, 6);
    }

    #[test]
    fn invalid_loss_weights_are_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"dpt": {"lambda_align": 0.0, "lambda_icl": 0.0}}"#).unwrap();
        assert_eq!(load_config(Some(&p)).unwrap_err().exit_code(), 2);
    }
}
