//! Flat `key = value` run configuration with default < file < flag layering.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::model::{GateDcn, ModelConfig};
use crate::train::{Schedule, TrainConfig};
use crate::{Error, Result};

/// Environment variable naming the root of all run directories.
pub const RUNS_DIR_ENV: &str = "VUGA_RUNS_DIR";

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("resolution", "square input side in pixels, multiple of 32"),
    ("backbone", "backbone architecture (swinv2_t, swinv2_pico)"),
    ("backbone_weights", "safetensors file with backbone weights"),
    ("fusion_channels", "channel width of the fused pyramid"),
    ("ablate_cmp", "replace each perception block with a 1x1 projection"),
    ("ablate_sda", "fuse the pyramid without attention gates"),
    ("ablate_cae", "feed the raw deepest map to pooling"),
    ("dropout", "dropout rate inside the enhancement block"),
    ("regressor_hidden", "hidden width of the score regressor"),
    ("cae_expansion", "channel expansion inside the enhancement block"),
    ("dcn_modulated", "learn a modulation mask for deformable convolutions"),
    ("sda_dcn", "gate deformable conv: depthwise or dense"),
    ("epochs", "training epochs"),
    ("batch_size", "images per optimizer step"),
    ("lr", "initial learning rate"),
    ("weight_decay", "L2 penalty added to gradients"),
    ("seed", "seed for initialization, shuffling, dropout and splits"),
    ("schedule", "learning-rate schedule (cosine)"),
    ("train_fraction", "share of a database used for training when no split column exists"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            train_fraction: 0.8,
        }
    }
}

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse `{value}`"))
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("`{value}` is not a boolean")),
    }
}

impl RunConfig {
    /// Sets one key; `Err` carries the reason.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "resolution" => {
                m.resolution = parse(value)?;
                t.resolution = m.resolution;
            }
            "backbone" => m.backbone = value.to_string(),
            "backbone_weights" => m.backbone_weights = PathBuf::from(value),
            "fusion_channels" => m.fusion_channels = parse(value)?,
            "ablate_cmp" => m.ablate_cmp = parse_bool(value)?,
            "ablate_sda" => m.ablate_sda = parse_bool(value)?,
            "ablate_cae" => m.ablate_cae = parse_bool(value)?,
            "dropout" => m.dropout = parse(value)?,
            "regressor_hidden" => m.regressor_hidden = parse(value)?,
            "cae_expansion" => m.cae_expansion = parse(value)?,
            "dcn_modulated" => m.dcn_modulated = parse_bool(value)?,
            "sda_dcn" => {
                m.sda_dcn = match value {
                    "depthwise" => GateDcn::Depthwise,
                    "dense" => GateDcn::Dense,
                    _ => return Err(format!("`{value}` is not depthwise or dense")),
                }
            }
            "epochs" => t.epochs = parse(value)?,
            "batch_size" => t.batch_size = parse(value)?,
            "lr" => t.lr = parse(value)?,
            "weight_decay" => t.weight_decay = parse(value)?,
            "seed" => t.seed = parse(value)?,
            "schedule" => {
                t.schedule = match value {
                    "cosine" => Schedule::Cosine,
                    _ => return Err(format!("unknown schedule `{value}`")),
                }
            }
            "train_fraction" => self.train_fraction = parse(value)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (m, t) = (&self.model, &self.train);
        Some(match key {
            "resolution" => m.resolution.to_string(),
            "backbone" => m.backbone.clone(),
            "backbone_weights" => m.backbone_weights.display().to_string(),
            "fusion_channels" => m.fusion_channels.to_string(),
            "ablate_cmp" => m.ablate_cmp.to_string(),
            "ablate_sda" => m.ablate_sda.to_string(),
            "ablate_cae" => m.ablate_cae.to_string(),
            "dropout" => m.dropout.to_string(),
            "regressor_hidden" => m.regressor_hidden.to_string(),
            "cae_expansion" => m.cae_expansion.to_string(),
            "dcn_modulated" => m.dcn_modulated.to_string(),
            "sda_dcn" => match m.sda_dcn {
                GateDcn::Depthwise => "depthwise".into(),
                GateDcn::Dense => "dense".into(),
            },
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr" => t.lr.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "seed" => t.seed.to_string(),
            "schedule" => "cosine".into(),
            "train_fraction" => self.train_fraction.to_string(),
            _ => return None,
        })
    }

    /// Defaults, then `file`, then `overrides`. Every unknown key or bad
    /// value is collected into one [`Error::Config`].
    pub fn layered(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        let mut bad = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (line, key, value) in parse_text(&text, path)? {
                if let Err(reason) = cfg.set(&key, &value) {
                    bad.push(format!("{key} ({}:{line}: {reason})", path.display()));
                }
            }
        }
        for (key, value) in overrides {
            if let Err(reason) = cfg.set(key, value) {
                bad.push(format!("{key} ({reason})"));
            }
        }
        if !bad.is_empty() {
            return Err(Error::Config { keys: bad });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut keys = self.model.invalid_keys();
        for k in self.train.invalid_keys() {
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            keys.push("train_fraction".into());
        }
        if keys.is_empty() {
            Ok(())
        } else {
            Err(Error::Config { keys })
        }
    }

    /// Every key in [`KEYS`] order; parsing it back gives the same config.
    pub fn snapshot(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    /// Short digest of the snapshot without the seed.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, _) in KEYS.iter().filter(|(k, _)| *k != "seed") {
            h.update(format!("{k}={}\n", self.get(k).unwrap_or_default()));
        }
        hex::encode(h.finalize())[..12].to_string()
    }

    /// `<root>/<tag>-<hash>-s<seed>`; the tag names the data the run uses.
    pub fn run_dir(&self, root: &Path, tag: &str) -> PathBuf {
        root.join(format!("{tag}-{}-s{}", self.hash(), self.train.seed))
    }
}

/// `(line, key, value)` triples; blank lines and `#` comments are skipped.
pub fn parse_text(text: &str, path: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: path.into(),
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            });
        };
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// `$VUGA_RUNS_DIR`, or `runs` in the working directory.
pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}
