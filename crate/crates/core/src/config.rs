//! `key = value` experiment files and command-line overrides.
//!
//! Entries are applied on top of a preset in order, so later entries win.
//! `preset`, `scale` and `model` are resolved first whatever their position.

use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::{variant, Ablation, FdiwnConfig};
use crate::train::{preset, Preset};

/// Everything needed to run one training job.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    /// Stop after this many optimisation steps.
    pub steps: u64,
    /// Write a resumable checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
    /// Directory of HR PNGs; synthetic images are used when absent.
    pub data_dir: Option<PathBuf>,
}

pub const KEYS: &[&str] = &[
    "preset",
    "model",
    "scale",
    "channels",
    "wide",
    "n_groups",
    "n_blocks",
    "sa_groups",
    "cgs_groups",
    "ablation",
    "batch",
    "patch",
    "lr",
    "epochs",
    "steps_per_epoch",
    "decay_epochs",
    "beta1",
    "beta2",
    "eps",
    "seed",
    "steps",
    "checkpoint_every",
    "data",
    "data_seed",
    "images",
    "image_size",
];

/// Parse `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_entries(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let entry = parse_override(line).map_err(|e| Error::Config(format!("{origin}:{}: {e}", i + 1)))?;
        out.push(entry);
    }
    Ok(out)
}

/// Parse a single `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let Some((k, v)) = s.split_once('=') else {
        return Err(Error::Config(format!("expected key=value, got `{s}`")));
    };
    let (k, v) = (k.trim(), v.trim());
    if !KEYS.contains(&k) {
        return Err(Error::Config(format!("unknown key `{k}`")));
    }
    if v.is_empty() {
        return Err(Error::Config(format!("empty value for `{k}`")));
    }
    Ok((k.to_string(), v.to_string()))
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn last<'a>(entries: &'a [(String, String)], key: &str) -> Option<&'a str> {
    entries.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

fn base_model(name: &str, scale: usize) -> Result<FdiwnConfig> {
    match name {
        "fdiwn" => Ok(FdiwnConfig::fdiwn(scale)),
        "fdiwn-m" => Ok(FdiwnConfig::fdiwn_m(scale)),
        other => Err(Error::Config(format!("unknown model `{other}` (known: fdiwn, fdiwn-m)"))),
    }
}

impl RunConfig {
    pub fn from_entries(entries: &[(String, String)]) -> Result<Self> {
        let scale = last(entries, "scale").map(|v| num("scale", v)).transpose()?.unwrap_or(2);
        let mut p = preset(last(entries, "preset").unwrap_or("smoke"), scale)?;
        if let Some(name) = last(entries, "model") {
            p.model = FdiwnConfig { ablation: p.model.ablation, ..base_model(name, scale)? };
        }
        let mut cfg = RunConfig { steps: p.train.total_steps(), preset: p, checkpoint_every: 0, data_dir: None };
        let mut steps_set = false;
        for (k, v) in entries {
            steps_set |= k == "steps";
            cfg.set(k, v)?;
        }
        if !steps_set {
            cfg.steps = cfg.preset.train.total_steps();
        }
        if last(entries, "channels").is_some() && last(entries, "sa_groups").is_none() {
            cfg.preset.model.sa_groups = cfg.preset.model.channels / 2;
        }
        cfg.preset.model.validate()?;
        cfg.preset.train.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.preset.model;
        let t = &mut self.preset.train;
        let d = &mut self.preset.data;
        match key {
            "preset" | "model" => {}
            "scale" => m.scale = num(key, v)?,
            "channels" => m.channels = num(key, v)?,
            "wide" => m.wide = num(key, v)?,
            "n_groups" => m.n_groups = num(key, v)?,
            "n_blocks" => m.n_blocks = num(key, v)?,
            "sa_groups" => m.sa_groups = num(key, v)?,
            "cgs_groups" => m.cgs_groups = num(key, v)?,
            "ablation" => {
                m.ablation = match v.parse::<u32>() {
                    Ok(bits) => Ablation::from_bits(bits)?,
                    Err(_) => variant(v)?,
                }
            }
            "batch" => t.batch = num(key, v)?,
            "patch" => t.patch = num(key, v)?,
            "lr" => t.lr = num(key, v)?,
            "epochs" => t.epochs = num(key, v)?,
            "steps_per_epoch" => t.steps_per_epoch = num(key, v)?,
            "decay_epochs" => t.decay_epochs = num(key, v)?,
            "beta1" => t.beta1 = num(key, v)?,
            "beta2" => t.beta2 = num(key, v)?,
            "eps" => t.eps = num(key, v)?,
            "seed" => t.seed = num(key, v)?,
            "steps" => self.steps = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "data" => self.data_dir = Some(PathBuf::from(v)),
            "data_seed" => d.seed = num(key, v)?,
            "images" => d.images = num(key, v)?,
            "image_size" => d.size = num(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }
}
