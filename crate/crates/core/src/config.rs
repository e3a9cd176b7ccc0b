//! Run configuration: a registry of dotted keys with defaults, a line-oriented
//! `key = value` file format, and conversion into the typed module configs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::AugmentConfig;
use crate::edge::EdgeExtractor;
use crate::inference::{InferConfig, WindowOrder};
use crate::losses::LossWeights;
use crate::network::{Mode, NetworkConfig};
use crate::trainer::{Normalization, OptimizerConfig, Preprocess, TrainConfig};
use crate::{Error, Result};

/// Environment variable supplying the default `data.root`.
pub const DATA_ROOT_ENV: &str = "EDGESEG_DATA_ROOT";

/// Value used by optional keys to mean "unset".
pub const NONE: &str = "none";

/// Value used by optimizer keys to mean "the mode's default".
pub const AUTO: &str = "auto";

#[derive(Clone, Copy, Debug)]
pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
    /// Subcommands that read this key.
    pub commands: &'static [&'static str],
}

const TRAINING: &[&str] = &["pretrain", "train"];
const MODEL_RUN: &[&str] = &["pretrain", "train", "infer"];
const ALL: &[&str] = &["pretrain", "train", "infer", "eval", "export-edges", "selftest"];

macro_rules! key {
    ($key:literal, $default:literal, $cmds:expr, $help:literal) => {
        KeySpec { key: $key, default: $default, help: $help, commands: $cmds }
    };
}

pub const KEYS: &[KeySpec] = &[
    key!("data.root", "", TRAINING, "Directory of <case>.mhd / <case>_segmentation.mhd pairs (default from EDGESEG_DATA_ROOT)"),
    key!("run.dir", "runs", ALL, "Parent directory for timestamped run directories"),
    key!("run.precision", "f32", MODEL_RUN, "Floating-point precision: f32 or f64"),
    key!("volume.spacing", "0.625, 0.625, 1.5", MODEL_RUN, "Resampling target spacing in mm (x, y, z)"),
    key!("volume.normalization", "zscore", MODEL_RUN, "Intensity normalization: zscore or none"),
    key!("network.width_multiplier", "1.0", MODEL_RUN, "Channel-width scale; infer uses the checkpoint's value when present"),
    key!("network.blocks", "3, 4, 23, 3", MODEL_RUN, "Bottleneck blocks per encoder stage"),
    key!("augment.enabled", "true", TRAINING, "Apply random elastic deformation"),
    key!("augment.max_displacement", "4.0", TRAINING, "Control-point displacement bound in voxels"),
    key!("augment.foreground_bias", "0.5", TRAINING, "Probability that a crop is anchored on foreground"),
    key!("train.patch_shape", "96, 96, 32", TRAINING, "Training patch shape (multiples of 8, 8, 4)"),
    key!("train.max_iterations", "6000", TRAINING, "Optimizer steps to run"),
    key!("train.batch_size", "16", TRAINING, "Samples per optimizer step"),
    key!("train.micro_batch", "1", TRAINING, "Samples per forward/backward pass; divides the batch size"),
    key!("train.seed", "0", TRAINING, "Seed for initialization, sample order and augmentation"),
    key!("train.checkpoint_every", "500", TRAINING, "Checkpoint cadence in iterations"),
    key!("train.lr_step", "2000", TRAINING, "Iterations between tenfold learning-rate drops (train)"),
    key!("train.pretrain_lr_decay", "none", TRAINING, "Per-epoch multiplicative decay for pretrain, or none"),
    key!("train.lr_override", "none", TRAINING, "Fixed learning rate bypassing the schedule, or none"),
    key!("train.workers", "1", TRAINING, "Sample-generation threads (results do not depend on it)"),
    key!("train.encoder_checkpoint", "none", &["train"], "Pretrained encoder checkpoint to warm-start from, or none"),
    key!("train.encoder_strict", "true", &["train"], "Fail when the encoder checkpoint does not match exactly"),
    key!("train.resume", "none", TRAINING, "Checkpoint to resume from, or none"),
    key!("train.holdout", "0", TRAINING, "Number of cases (last by id) held out from training"),
    key!("edge.extractor", "surface", &["pretrain", "train", "export-edges"], "Edge target extractor: surface or haar"),
    key!("loss.weights", "0.5, 0.8, 1.0", TRAINING, "Edge-loss weights, coarsest level first"),
    key!("loss.eps_dice", "1e-5", TRAINING, "Dice smoothing constant"),
    key!("loss.eps_log", "1e-7", TRAINING, "Log clamp for cross-entropy"),
    key!("optim.lr", "auto", TRAINING, "Base learning rate (auto: 0.01 pretrain, 0.001 train)"),
    key!("optim.momentum", "auto", TRAINING, "SGD momentum (auto: 0.9)"),
    key!("optim.betas", "auto", TRAINING, "Adam betas (auto: 0.9, 0.999)"),
    key!("optim.eps", "auto", TRAINING, "Adam epsilon (auto: 1e-8)"),
    key!("optim.weight_decay", "auto", TRAINING, "L2 weight decay (auto: 1e-6 pretrain, 0 train)"),
    key!("infer.threshold", "0.5", &["infer"], "Probability threshold for the binary mask"),
    key!("infer.lcc", "false", &["infer"], "Keep only the largest connected component"),
    key!("infer.window", "96, 96, 32", &["infer"], "Sliding-window size in voxels"),
    key!("infer.stride", "24, 24, 8", &["infer"], "Sliding-window stride in voxels"),
    key!("infer.workers", "1", &["infer"], "Window-evaluation threads"),
];

pub fn spec(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.key == key)
}

pub fn keys_for(command: &str) -> impl Iterator<Item = &'static KeySpec> + '_ {
    KEYS.iter().filter(move |k| k.commands.contains(&command))
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// unknown keys are rejected by name.
pub fn parse_text(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!("{origin}:{}: expected `key = value`, got {line:?}", n + 1)));
        };
        let key = key.trim();
        if spec(key).is_none() {
            return Err(Error::Config(format!("{origin}:{}: unknown key `{key}`", n + 1)));
        }
        out.push((key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Fully resolved key/value view for one subcommand.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    command: String,
    values: BTreeMap<&'static str, String>,
}

impl RunConfig {
    /// Registry defaults, with `data.root` taken from the environment.
    pub fn defaults(command: &str) -> Self {
        let mut values: BTreeMap<&'static str, String> = KEYS.iter().map(|k| (k.key, k.default.to_string())).collect();
        if let Ok(root) = std::env::var(DATA_ROOT_ENV) {
            values.insert("data.root", root);
        }
        RunConfig { command: command.to_string(), values }
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        let spec = spec(key).ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        self.values.insert(spec.key, value.into());
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (k, v) in parse_text(&text, &path.display().to_string())? {
            self.set(&k, v)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse().map_err(|_| Error::Config(format!("invalid value {v:?} for `{key}`")))
    }

    pub fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        if self.get(key) == NONE {
            return Ok(None);
        }
        self.parse(key).map(Some)
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty() && v != NONE).then(|| PathBuf::from(v))
    }

    /// Comma- and/or whitespace-separated list of exactly `N` items.
    pub fn array<T: FromStr + Copy + Default, const N: usize>(&self, key: &str) -> Result<[T; N]> {
        let v = self.get(key);
        let items: Vec<&str> = v.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
        let bad = || Error::Config(format!("`{key}` expects {N} values, got {v:?}"));
        if items.len() != N {
            return Err(bad());
        }
        let mut out = [T::default(); N];
        for (o, s) in out.iter_mut().zip(items) {
            *o = s.parse().map_err(|_| bad())?;
        }
        Ok(out)
    }

    pub fn preprocess(&self) -> Result<Preprocess> {
        let spacing: [f64; 3] = self.array("volume.spacing")?;
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("volume.spacing must be positive, got {spacing:?}")));
        }
        Ok(Preprocess { spacing, normalization: self.parse::<String>("volume.normalization")?.parse::<Normalization>()? })
    }

    pub fn network(&self) -> Result<NetworkConfig> {
        let cfg = NetworkConfig { width_multiplier: self.parse("network.width_multiplier")?, blocks: self.array("network.blocks")? };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Typed training configuration. `auto` optimizer values are replaced
    /// by the mode's defaults, in this view too, so the echo is concrete.
    pub fn resolve_train(&mut self, mode: Mode) -> Result<TrainConfig> {
        let base = OptimizerConfig::for_mode(mode);
        let auto = [
            ("optim.lr", base.lr.to_string()),
            ("optim.momentum", base.momentum.to_string()),
            ("optim.betas", format!("{}, {}", base.betas.0, base.betas.1)),
            ("optim.eps", base.eps.to_string()),
            ("optim.weight_decay", base.weight_decay.to_string()),
        ];
        for (k, v) in auto {
            if self.get(k) == AUTO {
                self.set(k, v)?;
            }
        }
        let betas: [f64; 2] = self.array("optim.betas")?;
        let optimizer = OptimizerConfig {
            lr: self.parse("optim.lr")?,
            momentum: self.parse("optim.momentum")?,
            betas: (betas[0], betas[1]),
            eps: self.parse("optim.eps")?,
            weight_decay: self.parse("optim.weight_decay")?,
            ..base
        };
        let augment = AugmentConfig {
            enabled: self.parse("augment.enabled")?,
            max_displacement: self.parse("augment.max_displacement")?,
            foreground_bias: self.parse("augment.foreground_bias")?,
            patch_shape: self.array("train.patch_shape")?,
        };
        let loss = LossWeights {
            w: self.array("loss.weights")?,
            eps_log: self.parse("loss.eps_log")?,
            eps_dice: self.parse("loss.eps_dice")?,
        };
        let cfg = TrainConfig {
            mode,
            network: self.network()?,
            optimizer,
            lr_step: self.parse("train.lr_step")?,
            pretrain_lr_decay: self.optional("train.pretrain_lr_decay")?,
            lr_override: self.optional("train.lr_override")?,
            batch_size: self.parse("train.batch_size")?,
            micro_batch: self.parse("train.micro_batch")?,
            max_iterations: self.parse("train.max_iterations")?,
            seed: self.parse("train.seed")?,
            checkpoint_every: self.parse("train.checkpoint_every")?,
            augment,
            edge_extractor: self.edge_extractor()?,
            loss,
            workers: self.parse("train.workers")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn edge_extractor(&self) -> Result<EdgeExtractor> {
        self.get("edge.extractor").parse()
    }

    pub fn infer_config(&self) -> Result<InferConfig> {
        let threshold: f64 = self.parse("infer.threshold")?;
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::Config(format!("infer.threshold must lie in [0, 1], got {threshold}")));
        }
        let workers: usize = self.parse("infer.workers")?;
        if workers == 0 {
            return Err(Error::Config("infer.workers must be >= 1".into()));
        }
        Ok(InferConfig {
            window: self.array("infer.window")?,
            stride: self.array("infer.stride")?,
            workers,
            order: WindowOrder::Raster,
            threshold,
            lcc: self.parse("infer.lcc")?,
        })
    }

    /// The keys this subcommand reads, one `key = value` line each. Feeding
    /// the text back through [`parse_text`] reproduces this view.
    pub fn to_text(&self) -> String {
        let mut s = format!("# resolved configuration for `{}`\n", self.command);
        for k in keys_for(&self.command) {
            let _ = writeln!(s, "{} = {}", k.key, self.get(k.key));
        }
        s
    }
}
