//! Run configuration: model architecture plus training settings, read from
//! `key = value` text.
//!
//! ```text
//! # comments start with '#'
//! width = 64
//! cond_aware_set = [dw-conv, patch-embed, out-proj]
//! control_method = [CAN, CondTokens]
//! can_sources = [class, timestep]
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::can::{ConditionSources, LayerKind};
use crate::error::{Error, Result};
use crate::model::{ControlMethod, ModelConfig};

/// Settings of one training run that are not part of the architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub n_per_class: usize,
    pub heldout_per_class: usize,
    /// Seed of the synthetic dataset (independent of the run seed).
    pub data_seed: u64,
    /// Probability of replacing a label by the null class during training.
    pub p_null: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Noise draws per held-out image in the evaluation loss.
    pub eval_repeats: usize,
    pub sample_steps: usize,
    pub guidance: f64,
    /// Generated images per class for the fidelity metric.
    pub fidelity_per_class: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 40,
            batch_size: 32,
            n_per_class: 64,
            heldout_per_class: 16,
            data_seed: 0,
            p_null: 0.1,
            beta_start: 1e-4,
            beta_end: 0.02,
            eval_repeats: 4,
            sample_steps: 20,
            guidance: 1.5,
            fidelity_per_class: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainSettings::default(),
        }
    }
}

/// Every accepted key, in canonical order.
pub const KEYS: &[&str] = &[
    "seed",
    "image_size",
    "channels",
    "patch_size",
    "width",
    "depth",
    "heads",
    "mlp_ratio",
    "cond_dim",
    "n_classes",
    "timesteps",
    "cond_aware_set",
    "control_method",
    "can_sources",
    "skip_connections",
    "aks_kernels",
    "epochs",
    "batch_size",
    "n_per_class",
    "heldout_per_class",
    "data_seed",
    "p_null",
    "beta_start",
    "beta_end",
    "eval_repeats",
    "sample_steps",
    "guidance",
    "fidelity_per_class",
];

fn nearest_key(key: &str) -> &'static str {
    KEYS.iter()
        .copied()
        .max_by(|a, b| {
            strsim::jaro_winkler(key, a)
                .partial_cmp(&strsim::jaro_winkler(key, b))
                .expect("similarity is finite")
        })
        .expect("key table is nonempty")
}

fn parse_uint<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(key, format!("expected a nonnegative integer, got `{v}`")))
}

fn parse_float(key: &str, v: &str) -> Result<f64> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(Error::config(key, format!("expected a number, got `{v}`"))),
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{v}`"))),
    }
}

fn parse_list<'a>(key: &str, v: &'a str) -> Result<Vec<&'a str>> {
    let inner = v
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| Error::config(key, format!("expected a list like [a, b], got `{v}`")))?;
    Ok(inner.split(',').map(str::trim).filter(|s| !s.is_empty()).collect())
}

fn parse_sources(key: &str, v: &str) -> Result<ConditionSources> {
    let mut s = ConditionSources {
        class_label: false,
        timestep: false,
    };
    for item in parse_list(key, v)? {
        match item {
            "class" => s.class_label = true,
            "timestep" => s.timestep = true,
            other => {
                return Err(Error::config(key, format!("unknown source `{other}` (expected class or timestep)")));
            }
        }
    }
    Ok(s)
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse_uint(key, v)?,
            "image_size" => m.image_size = parse_uint(key, v)?,
            "channels" => m.channels = parse_uint(key, v)?,
            "patch_size" => m.patch_size = parse_uint(key, v)?,
            "width" => m.width = parse_uint(key, v)?,
            "depth" => m.depth = parse_uint(key, v)?,
            "heads" => m.heads = parse_uint(key, v)?,
            "mlp_ratio" => m.mlp_ratio = parse_uint(key, v)?,
            "cond_dim" => m.cond_dim = parse_uint(key, v)?,
            "n_classes" => m.n_classes = parse_uint(key, v)?,
            "timesteps" => m.timesteps = parse_uint(key, v)?,
            "cond_aware_set" => {
                m.cond_aware_set = parse_list(key, v)?
                    .into_iter()
                    .map(|s| {
                        LayerKind::parse(s).ok_or_else(|| {
                            Error::config(key, format!("unknown module `{s}` (expected one of dw-conv, patch-embed, out-proj, qkv-proj, mlp, head)"))
                        })
                    })
                    .collect::<Result<BTreeSet<_>>>()?
            }
            "control_method" => {
                m.control_method = parse_list(key, v)?
                    .into_iter()
                    .map(|s| {
                        ControlMethod::parse(s).ok_or_else(|| {
                            Error::config(key, format!("unknown control method `{s}` (expected CAN, AdaNorm, CondTokens or AKS)"))
                        })
                    })
                    .collect::<Result<BTreeSet<_>>>()?
            }
            "can_sources" => m.can_sources = parse_sources(key, v)?,
            "skip_connections" => m.skip_connections = parse_bool(key, v)?,
            "aks_kernels" => m.aks_kernels = parse_uint(key, v)?,
            "epochs" => t.epochs = parse_uint(key, v)?,
            "batch_size" => t.batch_size = parse_uint(key, v)?,
            "n_per_class" => t.n_per_class = parse_uint(key, v)?,
            "heldout_per_class" => t.heldout_per_class = parse_uint(key, v)?,
            "data_seed" => t.data_seed = parse_uint(key, v)?,
            "p_null" => t.p_null = parse_float(key, v)?,
            "beta_start" => t.beta_start = parse_float(key, v)?,
            "beta_end" => t.beta_end = parse_float(key, v)?,
            "eval_repeats" => t.eval_repeats = parse_uint(key, v)?,
            "sample_steps" => t.sample_steps = parse_uint(key, v)?,
            "guidance" => t.guidance = parse_float(key, v)?,
            "fidelity_per_class" => t.fidelity_per_class = parse_uint(key, v)?,
            _ => {
                return Err(Error::config(
                    key,
                    format!("unknown key `{key}`; did you mean `{}`?", nearest_key(key)),
                ))
            }
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        let m = &self.model;
        let t = &self.train;
        let list = |items: Vec<&str>| format!("[{}]", items.join(", "));
        match key {
            "seed" => self.seed.to_string(),
            "image_size" => m.image_size.to_string(),
            "channels" => m.channels.to_string(),
            "patch_size" => m.patch_size.to_string(),
            "width" => m.width.to_string(),
            "depth" => m.depth.to_string(),
            "heads" => m.heads.to_string(),
            "mlp_ratio" => m.mlp_ratio.to_string(),
            "cond_dim" => m.cond_dim.to_string(),
            "n_classes" => m.n_classes.to_string(),
            "timesteps" => m.timesteps.to_string(),
            "cond_aware_set" => list(m.cond_aware_set.iter().map(|k| k.name()).collect()),
            "control_method" => list(m.control_method.iter().map(|c| c.name()).collect()),
            "can_sources" => {
                let mut v = Vec::new();
                if m.can_sources.class_label {
                    v.push("class");
                }
                if m.can_sources.timestep {
                    v.push("timestep");
                }
                list(v)
            }
            "skip_connections" => m.skip_connections.to_string(),
            "aks_kernels" => m.aks_kernels.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "n_per_class" => t.n_per_class.to_string(),
            "heldout_per_class" => t.heldout_per_class.to_string(),
            "data_seed" => t.data_seed.to_string(),
            "p_null" => format!("{:?}", t.p_null),
            "beta_start" => format!("{:?}", t.beta_start),
            "beta_end" => format!("{:?}", t.beta_end),
            "eval_repeats" => t.eval_repeats.to_string(),
            "sample_steps" => t.sample_steps.to_string(),
            "guidance" => format!("{:?}", t.guidance),
            "fidelity_per_class" => t.fidelity_per_class.to_string(),
            _ => unreachable!("not a key: {key}"),
        }
    }

    /// Canonical text: every key in [`KEYS`] order.
    pub fn serialize(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.value_of(k)))
            .collect()
    }

    /// First 16 hex digits of the SHA-256 of [`RunConfig::serialize`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.serialize().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        for (field, v) in [
            ("batch_size", t.batch_size),
            ("n_per_class", t.n_per_class),
            ("heldout_per_class", t.heldout_per_class),
            ("eval_repeats", t.eval_repeats),
            ("sample_steps", t.sample_steps),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be ≥ 1"));
            }
        }
        if self.model.n_classes < 2 {
            return Err(Error::config("n_classes", "the synthetic dataset needs at least 2 classes"));
        }
        if !(0.0..1.0).contains(&t.p_null) {
            return Err(Error::config("p_null", format!("{} not in [0, 1)", t.p_null)));
        }
        if t.guidance < 0.0 {
            return Err(Error::config("guidance", "must be nonnegative"));
        }
        if t.sample_steps > self.model.timesteps {
            return Err(Error::config("sample_steps", "cannot exceed timesteps"));
        }
        Ok(())
    }
}

/// Applies `key = value` lines on top of the defaults, then `overrides`
/// (each `key=value`).
pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(
                format!("line {}", lineno + 1),
                format!("expected `key = value`, got `{line}`"),
            )
        })?;
        cfg.set(k.trim(), v)?;
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::config(o.clone(), "override must look like key=value"))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)?,
        None => String::new(),
    };
    parse_config(&text, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_default() {
        assert_eq!(parse_config("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn list_key() {
        let c = parse_config("cond_aware_set=[dw-conv]\n", &[]).unwrap();
        assert_eq!(c.model.cond_aware_set, [LayerKind::DwConv].into());
    }

    #[test]
    fn roundtrip_is_normalizing() {
        let text = "width = 32 # narrow\nheads=2\ncontrol_method = [CondTokens, CAN]\ncan_sources=[timestep]\n";
        let once = parse_config(text, &[]).unwrap().serialize();
        let twice = parse_config(&once, &[]).unwrap().serialize();
        assert_eq!(once, twice);
        assert!(once.contains("control_method = [CAN, CondTokens]"));
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let err = parse_config("widht = 3", &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("widht") && msg.contains("`width`"), "{msg}");
    }

    #[test]
    fn type_mismatch_names_expected_type() {
        let err = parse_config("", &["depth=deep".into()]).unwrap_err();
        assert!(err.to_string().contains("nonnegative integer"), "{err}");
        let err = parse_config("skip_connections = 1", &[]).unwrap_err();
        assert!(err.to_string().contains("true or false"), "{err}");
    }

    #[test]
    fn overrides_apply_after_file() {
        let c = parse_config("depth = 2", &["depth=6".into()]).unwrap();
        assert_eq!(c.model.depth, 6);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
