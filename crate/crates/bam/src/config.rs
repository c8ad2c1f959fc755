//! Run configuration: a TOML file layered over built-in defaults, then
//! `section.key=value` overrides from the command line.
//!
//! ```toml
//! [data]
//! min_pixels = 16
//!
//! [model.ensemble]
//! use_psi = false
//! gram_tap = "B3"
//!
//! [meta]
//! lr = 0.02
//! lambda = 1.0
//! ```

use std::path::Path;

use anyhow::{bail, Context, Result};
use bam_core::eval::{EvalConfig, GeneralizedConfig};
use bam_core::generalized::{FusionScheme, DEFAULT_TAU};
use bam_core::model::BamConfig;
use bam_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    /// A class counts as present in an image from this many pixels on.
    pub min_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedSection {
    pub tau: f64,
    pub scheme: FusionScheme,
    pub sweep: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSection,
    /// `base.num_base` is taken from the fold split at training time.
    pub model: BamConfig,
    pub pretrain: TrainConfig,
    pub meta: TrainConfig,
    pub eval: EvalConfig,
    pub generalized: GeneralizedSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSection { min_pixels: 16 },
            model: BamConfig::desk(0),
            pretrain: TrainConfig::desk_pretrain(),
            meta: TrainConfig::meta(),
            eval: EvalConfig::default(),
            generalized: GeneralizedSection {
                tau: DEFAULT_TAU,
                scheme: FusionScheme::Main,
                sweep: (1..=19).map(|i| f64::from(i) * 0.05).collect(),
            },
        }
    }
}

impl RunConfig {
    /// Defaults, then the file (if any), then the overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(RunConfig::default())?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let file: toml::Value = toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            merge(&mut value, file, "")?;
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = value.try_into().context("invalid configuration")?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn generalized_config(&self) -> GeneralizedConfig {
        GeneralizedConfig {
            eval: self.eval.clone(),
            tau: self.generalized.tau,
            scheme: self.generalized.scheme,
            sweep: self.generalized.sweep.clone(),
            keep_dumps: false,
        }
    }
}

/// Recursively overlays `src` onto `dst`; unknown keys are errors.
fn merge(dst: &mut toml::Value, src: toml::Value, path: &str) -> Result<()> {
    match (dst, src) {
        (toml::Value::Table(d), toml::Value::Table(s)) => {
            for (k, v) in s {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => bail!("unknown configuration key {here}"),
                }
            }
            Ok(())
        }
        (d, s) => {
            *d = s;
            Ok(())
        }
    }
}

/// `a.b.c=value`; the value is read as TOML, falling back to a string.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .with_context(|| format!("override {spec:?} is not key=value"))?;
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut slot = &mut *root;
    for part in key.trim().split('.') {
        slot = slot
            .as_table_mut()
            .and_then(|t| t.get_mut(part))
            .with_context(|| format!("unknown configuration key {key}"))?;
    }
    *slot = parsed;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use bam_core::ensemble::{KShotFusion, Tap};

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[model.ensemble]\nuse_psi = false\ngram_tap = \"B3\"\n[meta]\nlr = 0.02\n").unwrap();
        let cfg = RunConfig::load(
            Some(&path),
            &["meta.lr=0.5".into(), "model.ensemble.kshot_fusion=mask-or".into(), "eval.seeds=[7, 8]".into()],
        )
        .unwrap();
        assert!(!cfg.model.ensemble.use_psi);
        assert_eq!(cfg.model.ensemble.gram_tap, Tap::B3);
        assert_eq!(cfg.model.ensemble.kshot_fusion, KShotFusion::MaskOr);
        assert_eq!(cfg.meta.lr, 0.5);
        assert_eq!(cfg.eval.seeds, vec![7, 8]);
        assert_eq!(cfg.pretrain, TrainConfig::desk_pretrain());
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(RunConfig::load(None, &["meta.learning_rate=1".into()]).is_err());
        assert!(RunConfig::load(None, &["meta.lr=fast".into()]).is_err());
        assert!(RunConfig::load(None, &["nonsense".into()]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[model]\nwidth = 3\n").unwrap();
        assert!(RunConfig::load(Some(&path), &[]).is_err());
    }
}
