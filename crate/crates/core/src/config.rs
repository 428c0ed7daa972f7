//! Run configuration as flat dotted keys (`latent_gen.train.steps = 2000`).
//!
//! Files hold a JSON object whose keys are dotted paths; nested objects are
//! accepted too and flattened on load. Every key must exist in the defaults.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::autoencoder::AeConfig;
use crate::dit::{AttentionLayout, LayoutMode};
use crate::error::{config_err, Error, Result};
use crate::eval::{ExperimentConfig, LabConfig, ProbeConfig};
use crate::pipeline::{GenerateOptions, StageConfig};
use crate::semantics::{CompressorConfig, SemConfig};
use crate::synthdata::CorpusConfig;

/// Where a verb finds the runs it depends on (names under the artifact root).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Deps {
    pub corpus: String,
    pub ae: String,
    pub sem: String,
    pub latent_gen: String,
    pub sem_gen: String,
}

impl Default for Deps {
    fn default() -> Self {
        Self {
            corpus: "corpus".into(),
            ae: "ae".into(),
            sem: "sem".into(),
            latent_gen: "latent_gen".into(),
            sem_gen: "sem_gen".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    /// Number of conditions drawn from the held-out corpus.
    pub count: usize,
    /// Upscaling of filmstrip PNGs.
    pub png_scale: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { count: 4, png_scale: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LongConfig {
    pub latent_gen: StageConfig,
    pub sem_gen: StageConfig,
}

impl Default for LongConfig {
    fn default() -> Self {
        let mut latent_gen = StageConfig::default();
        latent_gen.dit.layout = AttentionLayout {
            mode: LayoutMode::SwinInterleaved,
            window: 4,
        };
        Self {
            latent_gen,
            sem_gen: StageConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub seeds: Vec<u64>,
    pub early_fraction: f64,
    pub coherent_threshold: f64,
    pub d_c_sweep: Vec<usize>,
    pub drift_clips: usize,
    pub drift_fraction: f64,
    pub eval_loss_clips: usize,
    pub reference_threshold: f64,
    pub eval_clips: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        let l = LabConfig::default();
        Self {
            seeds: e.seeds,
            early_fraction: e.early_fraction,
            coherent_threshold: e.coherent_threshold,
            d_c_sweep: e.d_c_sweep,
            drift_clips: e.drift_clips,
            drift_fraction: e.drift_fraction,
            eval_loss_clips: e.eval_loss_clips,
            reference_threshold: 0.7,
            eval_clips: l.eval_clips,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub corpus: CorpusConfig,
    pub ae: AeConfig,
    pub sem: SemConfig,
    pub probe: ProbeConfig,
    pub compressor: CompressorConfig,
    pub latent_gen: StageConfig,
    pub sem_gen: StageConfig,
    pub long: LongConfig,
    pub generate: GenerateOptions,
    pub sample: SampleConfig,
    pub harness: HarnessConfig,
    pub deps: Deps,
}

impl Config {
    pub fn lab(&self) -> LabConfig {
        LabConfig {
            corpus: self.corpus.clone(),
            ae: self.ae.clone(),
            sem: self.sem.clone(),
            probe: self.probe.clone(),
            eval_clips: self.harness.eval_clips,
        }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            seeds: self.harness.seeds.clone(),
            latent: self.latent_gen.clone(),
            sem: self.sem_gen.clone(),
            compressor: self.compressor.clone(),
            generate: self.generate.clone(),
            early_fraction: self.harness.early_fraction,
            coherent_threshold: self.harness.coherent_threshold,
            d_c_sweep: self.harness.d_c_sweep.clone(),
            long_latent: self.long.latent_gen.clone(),
            long_sem: self.long.sem_gen.clone(),
            drift_clips: self.harness.drift_clips,
            drift_fraction: self.harness.drift_fraction,
            eval_loss_clips: self.harness.eval_loss_clips,
        }
    }

    /// Every key with its current value, sorted.
    pub fn flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serialises"), &mut out);
        out
    }

    pub fn to_flat_json(&self) -> String {
        let m: Map<String, Value> = self.flat().into_iter().collect();
        serde_json::to_string_pretty(&Value::Object(m)).expect("config serialises")
    }

    /// Apply dotted-key assignments; unknown keys are rejected.
    pub fn apply(&self, assignments: &BTreeMap<String, Value>) -> Result<Self> {
        let mut flat = self.flat();
        for (k, v) in assignments {
            match flat.get_mut(k) {
                Some(slot) => *slot = coerce(k, slot, v.clone())?,
                None => return Err(config_err!("unknown config key `{k}`")),
            }
        }
        let nested = unflatten(&flat);
        serde_json::from_value(nested).map_err(|e| config_err!("{e}"))
    }

    pub fn load(path: &Path) -> Result<BTreeMap<String, Value>> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => config_err!("config file {} not found", path.display()),
            _ => Error::io(path, e),
        })?;
        let v: Value = serde_json::from_str(&text).map_err(|e| config_err!("{}: {e}", path.display()))?;
        if !v.is_object() {
            return Err(config_err!("{}: expected a JSON object of dotted keys", path.display()));
        }
        let mut out = BTreeMap::new();
        flatten("", &v, &mut out);
        Ok(out)
    }
}

/// Parse a `key=value` override; values are JSON, or bare strings.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| config_err!("override `{s}` is not of the form key=value"))?;
    let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), v))
}

/// Let integers stand in for floats and bare words for enum strings.
fn coerce(key: &str, current: &Value, new: Value) -> Result<Value> {
    let ok = match (current, &new) {
        (Value::Number(_), Value::Number(_)) => true,
        (Value::Bool(_), Value::Bool(_)) => true,
        (Value::String(_), Value::String(_)) => true,
        (Value::Array(_), Value::Array(_)) => true,
        (Value::Null, _) => true,
        _ => false,
    };
    if ok {
        Ok(new)
    } else {
        Err(config_err!("`{key}` expects a value like {current}, got {new}"))
    }
}

/// Leaves are scalars and arrays; objects recurse. Empty objects vanish.
fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (k, v) in flat {
        let parts: Vec<&str> = k.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("dotted prefixes are objects");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}
