//! Effective run configuration: preset, then `--config` file, then
//! `VHDA_*` environment overrides, then command-line flags.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use vhda::evaluation::{GdaConfig, TrackerConfig};
use vhda::sampler::SamplerConfig;
use vhda::trainer::TrainConfig;

pub const ENV_PREFIX: &str = "VHDA_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdaCounts {
    pub n_synthetic_sets: usize,
    pub n_tracker_seeds: usize,
    pub n_baseline_seeds: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
    pub gda: GdaCounts,
    /// Decoding limits; derived from the anchor corpus when absent.
    pub sampler: Option<SamplerConfig>,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let standard = GdaConfig::standard(SamplerConfig::for_corpus(&Default::default()));
        Ok(Self {
            train: TrainConfig::preset(name)?,
            tracker: TrackerConfig::default(),
            gda: GdaCounts {
                n_synthetic_sets: standard.n_synthetic_sets,
                n_tracker_seeds: standard.n_tracker_seeds,
                n_baseline_seeds: standard.n_baseline_seeds,
                ratio: standard.ratio,
            },
            sampler: None,
        })
    }

    /// Builds the configuration from a preset, an optional JSON file and the
    /// given environment variables.
    pub fn load(preset: &str, file: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut value = serde_json::to_value(Self::preset(preset)?)?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let patch: Value =
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            merge(&mut value, patch, "").with_context(|| format!("applying config {}", path.display()))?;
        }
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|rest| (rest.to_string(), v)))
            .collect();
        overrides.sort();
        for (key, raw) in overrides {
            apply_env(&mut value, &key, &raw).with_context(|| format!("environment override {ENV_PREFIX}{key}"))?;
        }
        let config: Self = serde_json::from_value(value).context("invalid configuration")?;
        config.train.validate()?;
        Ok(config)
    }

    pub fn sampler_for(&self, corpus: &vhda::corpus::DialogCorpus) -> SamplerConfig {
        self.sampler.unwrap_or_else(|| SamplerConfig::for_corpus(corpus))
    }

    pub fn gda(&self, sampler: SamplerConfig, seed: u64, workers: usize) -> GdaConfig {
        GdaConfig {
            n_synthetic_sets: self.gda.n_synthetic_sets,
            n_tracker_seeds: self.gda.n_tracker_seeds,
            n_baseline_seeds: self.gda.n_baseline_seeds,
            ratio: self.gda.ratio,
            seed,
            tracker: self.tracker,
            sampler,
            workers,
        }
    }

    pub fn hash(&self) -> String {
        crate::manifest::sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Recursively overlays `patch` on `base`. Keys absent from `base` are
/// rejected so typos surface as errors; `null` slots accept any value.
fn merge(base: &mut Value, patch: Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => bail!("unknown config key {here:?}"),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// `TRAIN__LEARNING_RATE=0.01` sets `train.learning_rate`. Values are parsed
/// as JSON, falling back to a plain string.
fn apply_env(value: &mut Value, key: &str, raw: &str) -> Result<()> {
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut patch = parsed;
    let parts: Vec<String> = key.split("__").map(|p| p.to_ascii_lowercase()).collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(anyhow!("malformed key"));
    }
    for p in parts.iter().rev() {
        let mut m = serde_json::Map::new();
        m.insert(p.clone(), patch);
        patch = Value::Object(m);
    }
    merge(value, patch, "")
}
