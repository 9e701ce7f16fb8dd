//! Pipeline configuration: TOML with `HALU_SECTION__KEY=value` overrides.

use anyhow::{bail, Context, Result};
use halu_core::classifier::{FeatureMode, TrainConfig};
use halu_core::mock::{MockBehavior, RateCurve};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root seed; every stage seed is derived from it.
    pub seed: u64,
    pub mock: MockBehavior,
    pub scenes: ScenesConfig,
    pub annotate: AnnotateConfig,
    pub classifier: ClassifierConfig,
    pub decode: DecodeSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenesConfig {
    pub count: usize,
    /// Share of scenes held out for decoding and CHAIR.
    pub eval_fraction: f64,
    pub min_objects: usize,
    pub max_objects: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotateConfig {
    /// `p_exist` at or above which an object counts as present.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub mode: FeatureMode,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub k: usize,
    pub thresholds: Vec<f64>,
    pub break_on_selected_eos: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            mock: MockBehavior {
                hallucination_rate: RateCurve::linear(0.1, 0.5),
                ..MockBehavior::default()
            },
            scenes: ScenesConfig::default(),
            annotate: AnnotateConfig { threshold: 0.5 },
            classifier: ClassifierConfig::default(),
            decode: DecodeSection::default(),
        }
    }
}

impl Default for ScenesConfig {
    fn default() -> Self {
        Self {
            count: 200,
            eval_fraction: 0.25,
            min_objects: 3,
            max_objects: 6,
        }
    }
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            mode: FeatureMode::Diff,
            train: TrainConfig::default(),
        }
    }
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self {
            k: 3,
            thresholds: vec![0.5, 0.6, 0.7, 0.8],
            break_on_selected_eos: false,
        }
    }
}

/// splitmix64 of `root + tag`.
pub fn derive_seed(root: u64, tag: u64) -> u64 {
    let mut z = root.wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl PipelineConfig {
    /// Named stage seeds derived from the root seed.
    pub fn seeds(&self) -> BTreeMap<String, u64> {
        [("root", self.seed), ("mock_model", derive_seed(self.seed, 1)), ("scenes", derive_seed(self.seed, 2)), ("classifier", derive_seed(self.seed, 3))]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    /// Copies the derived seeds into the sections that consume them.
    pub fn with_derived_seeds(mut self) -> Self {
        let s = self.seeds();
        self.mock.model_seed = s["mock_model"];
        self.classifier.train.seed = s["classifier"];
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.scenes.eval_fraction) || self.scenes.eval_fraction == 0.0 {
            bail!("scenes.eval_fraction must be in (0, 1)");
        }
        if self.decode.thresholds.is_empty() {
            bail!("decode.thresholds must list at least one value");
        }
        self.classifier.train.validate().map_err(|e| anyhow::anyhow!("classifier.train: {e}"))?;
        Ok(())
    }

    pub fn from_toml_str(src: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut value: toml::Table = toml::from_str(src).context("parsing config TOML")?;
        apply_env_overrides(&mut value, env)?;
        let cfg: Self = toml::Value::Table(value).try_into().context("interpreting config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        let src = match path {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        Self::from_toml_str(&src, std::env::vars())
    }
}

/// Applies `HALU_A__B=value` as `a.b = value`. Values parse as TOML
/// scalars or arrays when possible and as strings otherwise.
pub fn apply_env_overrides(table: &mut toml::Table, env: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let mut vars: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with("HALU_")).collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key["HALU_".len()..].split("__").map(|s| s.to_ascii_lowercase()).collect();
        if path.iter().any(String::is_empty) {
            bail!("malformed override variable {key}");
        }
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.clone()));
        let mut cur = &mut *table;
        for part in &path[..path.len() - 1] {
            let entry = cur
                .entry(part.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cur = entry
                .as_table_mut()
                .with_context(|| format!("{key}: {part} is not a table"))?;
        }
        cur.insert(path[path.len() - 1].clone(), value);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        let c = PipelineConfig::from_toml_str("", Vec::new()).unwrap();
        assert_eq!(c, PipelineConfig::default());
    }

    #[test]
    fn env_overrides_nested_keys() {
        let env = vec![
            ("HALU_CLASSIFIER__TRAIN__EPOCHS".to_string(), "3".to_string()),
            ("HALU_DECODE__THRESHOLDS".to_string(), "[0.5, 0.9]".to_string()),
            ("HALU_CLASSIFIER__MODE".to_string(), "X2_ONLY".to_string()),
            ("OTHER".to_string(), "x".to_string()),
        ];
        let c = PipelineConfig::from_toml_str("seed = 3\n[classifier.train]\nepochs = 9\n", env).unwrap();
        assert_eq!(c.classifier.train.epochs, 3);
        assert_eq!(c.decode.thresholds, [0.5, 0.9]);
        assert_eq!(c.classifier.mode, FeatureMode::X2Only);
        assert_eq!(c.seed, 3);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(PipelineConfig::from_toml_str("bogus = 1\n", Vec::new()).is_err());
        assert!(PipelineConfig::from_toml_str("[decode]\nthresholds = []\n", Vec::new()).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let s = PipelineConfig::default().seeds();
        let mut v: Vec<u64> = s.values().copied().collect();
        v.sort();
        v.dedup();
        assert_eq!(v.len(), s.len());
    }
}
