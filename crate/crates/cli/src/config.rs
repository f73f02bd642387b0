//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every command has a
//! fixed key set; unknown or repeated keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use asymnet_core::gradcheck::CheckSizes;
use asymnet_core::numerics::RNG_ALGORITHM;
use asymnet_core::trainer::Schedule;
use asymnet_core::{ModelConfig, SynthConfig, TrainConfig, TreeConfig};

pub type Entries = BTreeMap<String, String>;

pub fn parse(text: &str) -> Result<Entries, String> {
    let mut entries = Entries::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key = value", i + 1))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(format!("config line {}: empty key", i + 1));
        }
        if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(format!("config line {}: duplicate key {key:?}", i + 1));
        }
    }
    Ok(entries)
}

/// Consumes entries field by field, then complains about anything left.
struct Fields(Entries);

impl Fields {
    fn set<T>(&mut self, key: &str, slot: &mut T) -> Result<(), String>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some(v) = self.0.remove(key) {
            *slot = v.parse().map_err(|e| format!("config key {key}: {v:?}: {e}"))?;
        }
        Ok(())
    }

    fn finish(self) -> Result<(), String> {
        if self.0.is_empty() {
            Ok(())
        } else {
            let keys: Vec<&str> = self.0.keys().map(String::as_str).collect();
            Err(format!("unknown config key(s): {}", keys.join(", ")))
        }
    }
}

/// Canonical `key=value` text of an effective configuration; its digest is
/// stamped into trained models.
pub fn render(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn synth(entries: Entries) -> Result<SynthConfig, String> {
    let mut cfg = SynthConfig::default();
    let mut f = Fields(entries);
    f.set("n_traj", &mut cfg.n_traj)?;
    f.set("gallery_size", &mut cfg.gallery_size)?;
    f.set("dim", &mut cfg.dim)?;
    f.set("traj_len", &mut cfg.traj_len)?;
    f.set("n_categories", &mut cfg.n_categories)?;
    f.set("style_noise", &mut cfg.style_noise)?;
    f.set("frame_noise", &mut cfg.frame_noise)?;
    f.set("corrupt_fraction", &mut cfg.corrupt_fraction)?;
    f.set("seed", &mut cfg.seed)?;
    f.finish()?;
    Ok(cfg)
}

/// Tree shape as written in a config: `binary`, `flat`, or explicit level
/// gate counts leaves first (`32,16,8,4,2`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TreeSpec {
    Binary,
    Flat,
    Levels(Vec<usize>),
}

impl FromStr for TreeSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "binary" => Ok(TreeSpec::Binary),
            "flat" => Ok(TreeSpec::Flat),
            _ => s
                .split(',')
                .map(|c| c.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map(TreeSpec::Levels)
                .map_err(|_| "expected binary, flat or comma-separated level gate counts".to_string()),
        }
    }
}

impl std::fmt::Display for TreeSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TreeSpec::Binary => f.write_str("binary"),
            TreeSpec::Flat => f.write_str("flat"),
            TreeSpec::Levels(c) => {
                let parts: Vec<String> = c.iter().map(usize::to_string).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl TreeSpec {
    pub fn resolve(&self, leaf_count: usize, gate_bias: bool) -> TreeConfig {
        let mut cfg = match self {
            TreeSpec::Binary => TreeConfig::binary(leaf_count),
            TreeSpec::Flat => TreeConfig::flat(leaf_count),
            TreeSpec::Levels(c) => TreeConfig {
                leaf_count,
                level_gate_counts: c.clone(),
                gate_bias,
            },
        };
        cfg.gate_bias = gate_bias;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub model: ModelConfig,
    pub tree: TreeSpec,
    pub gate_bias: bool,
    pub train: TrainConfig,
}

impl TrainSettings {
    pub fn render(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let schedule = match t.schedule {
            Schedule::Alternate => "alternate",
            Schedule::Interleave => "interleave",
        };
        render(&[
            ("hidden_dim", m.hidden_dim.to_string()),
            ("depth", m.depth.to_string()),
            ("fc1_dim", m.fc1_dim.to_string()),
            ("init_scale", m.init_scale.to_string()),
            ("tree", self.tree.to_string()),
            ("gate_bias", self.gate_bias.to_string()),
            ("n", t.n.to_string()),
            ("s", t.s.to_string()),
            ("alpha", t.alpha.to_string()),
            ("eta", t.eta.to_string()),
            ("lambda", t.lambda.to_string()),
            ("epochs", t.epochs.to_string()),
            ("seed", t.seed.to_string()),
            ("clip_norm", t.clip_norm.to_string()),
            ("schedule", schedule.to_string()),
            ("rng", RNG_ALGORITHM.to_string()),
        ])
    }
}

pub fn train(entries: Entries) -> Result<TrainSettings, String> {
    let mut s = TrainSettings {
        model: ModelConfig::default(),
        tree: TreeSpec::Binary,
        gate_bias: true,
        train: TrainConfig::default(),
    };
    let mut f = Fields(entries);
    f.set("hidden_dim", &mut s.model.hidden_dim)?;
    f.set("depth", &mut s.model.depth)?;
    f.set("fc1_dim", &mut s.model.fc1_dim)?;
    f.set("init_scale", &mut s.model.init_scale)?;
    f.set("tree", &mut s.tree)?;
    f.set("gate_bias", &mut s.gate_bias)?;
    f.set("n", &mut s.train.n)?;
    f.set("s", &mut s.train.s)?;
    f.set("alpha", &mut s.train.alpha)?;
    f.set("eta", &mut s.train.eta)?;
    f.set("lambda", &mut s.train.lambda)?;
    f.set("epochs", &mut s.train.epochs)?;
    f.set("seed", &mut s.train.seed)?;
    f.set("clip_norm", &mut s.train.clip_norm)?;
    f.set("schedule", &mut s.train.schedule)?;
    f.finish()?;
    Ok(s)
}

pub struct GradcheckSettings {
    pub sizes: CheckSizes,
    pub seeds: u64,
}

pub fn gradcheck(entries: Entries) -> Result<GradcheckSettings, String> {
    let mut s = GradcheckSettings {
        sizes: CheckSizes::default(),
        seeds: 20,
    };
    let mut f = Fields(entries);
    f.set("input_dim", &mut s.sizes.input_dim)?;
    f.set("hidden_dim", &mut s.sizes.hidden_dim)?;
    f.set("depth", &mut s.sizes.depth)?;
    f.set("steps", &mut s.sizes.steps)?;
    f.set("fc1_dim", &mut s.sizes.fc1_dim)?;
    f.set("samples", &mut s.sizes.samples)?;
    f.set("leaves", &mut s.sizes.leaves)?;
    f.set("seeds", &mut s.seeds)?;
    f.finish()?;
    if s.seeds == 0 {
        return Err("seeds must be at least 1".into());
    }
    Ok(s)
}
