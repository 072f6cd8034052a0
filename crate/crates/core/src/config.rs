//! Run configuration as `section.key=value` lines.
//!
//! Every setting has a default, unknown keys are rejected, and
//! [`RunConfig::to_text`] writes every key back out so a run directory
//! carries its full configuration. Lists are comma separated; `#` starts a
//! comment line.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::model::{FamMode, ModelConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub data: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join<T: Display>(values: &[T]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = &mut self.data;
        let m = &mut self.model;
        let t = &mut self.train;
        let o = &mut t.optim;
        let l = &mut t.loss;
        match key {
            "data.num_samples" => d.num_samples = parse(key, value)?,
            "data.size" => d.size = parse(key, value)?,
            "data.classes" => d.classes = parse(key, value)?,
            "data.class_weights" => d.class_weights = parse_list(key, value)?,
            "data.train_fraction" => d.train_fraction = parse(key, value)?,
            "data.seed" => d.seed = parse(key, value)?,
            "data.lattice" => d.lattice = parse(key, value)?,
            "data.coarse_factor" => d.coarse_factor = parse(key, value)?,
            "data.noise" => d.noise = parse(key, value)?,

            "model.seed" => m.seed = parse(key, value)?,
            "model.fam" => m.fam = value.trim().parse().map_err(|e: String| Error::config(key, e))?,
            "model.backbone.channels" => m.backbone.channels = parse_list(key, value)?,
            "model.backbone.strides" => m.backbone.strides = parse_list(key, value)?,
            "model.vtm.patch" => m.vtm.patch = parse(key, value)?,
            "model.vtm.dim" => m.vtm.dim = parse(key, value)?,
            "model.vtm.depth" => m.vtm.depth = parse(key, value)?,
            "model.vtm.heads" => m.vtm.heads = parse(key, value)?,
            "model.vtm.mlp_ratio" => m.vtm.mlp_ratio = parse(key, value)?,
            "model.vtm.taps" => m.vtm.taps = parse_list(key, value)?,
            "model.vtm.grid" => m.vtm.grid = parse(key, value)?,
            "model.vtm.seed" => m.vtm.seed = parse(key, value)?,
            "model.fmm.blocks" => m.fmm.blocks = parse(key, value)?,
            "model.fmm.heads" => m.fmm.heads = parse(key, value)?,
            "model.fmm.mlp_ratio" => m.fmm.mlp_ratio = parse(key, value)?,
            "model.fmm.shared" => m.fmm.shared = parse(key, value)?,
            "model.head.decoder_channels" => m.head.decoder_channels = parse(key, value)?,
            "model.head.aux_channels" => m.head.aux_channels = parse(key, value)?,

            "loss.lambda_mse" => l.weights.mse = parse(key, value)?,
            "loss.lambda_kl" => l.weights.kl = parse(key, value)?,
            "loss.lambda_ce" => l.weights.ce = parse(key, value)?,
            "loss.lambda_aux" => l.weights.aux = parse(key, value)?,
            "loss.lambda_kt" => l.weights.kt = parse(key, value)?,
            "loss.lambda_da" => l.weights.da = parse(key, value)?,
            "loss.mse" => l.toggles.mse = parse(key, value)?,
            "loss.kl" => l.toggles.kl = parse(key, value)?,
            "loss.ce" => l.toggles.ce = parse(key, value)?,
            "loss.aux" => l.toggles.aux = parse(key, value)?,
            "loss.mse_sum" => l.mse_sum = parse(key, value)?,

            "optim.base_lr" => o.base_lr = parse(key, value)?,
            "optim.beta1" => o.beta1 = parse(key, value)?,
            "optim.beta2" => o.beta2 = parse(key, value)?,
            "optim.eps" => o.eps = parse(key, value)?,
            "optim.weight_decay" => o.weight_decay = parse(key, value)?,
            "optim.warmup_iters" => o.warmup_iters = parse(key, value)?,
            "optim.max_iters" => o.max_iters = parse(key, value)?,
            "optim.poly_power" => o.poly_power = parse(key, value)?,
            "optim.min_lr" => o.min_lr = parse(key, value)?,
            "optim.clip_norm" => {
                o.clip_norm = match value.trim() {
                    "none" | "" => None,
                    v => Some(parse(key, v)?),
                }
            }

            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.eval_every" => t.eval_every = parse(key, value)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        let m = &self.model;
        let t = &self.train;
        let o = &t.optim;
        let l = &t.loss;
        vec![
            ("data.num_samples", d.num_samples.to_string()),
            ("data.size", d.size.to_string()),
            ("data.classes", d.classes.to_string()),
            ("data.class_weights", join(&d.class_weights)),
            ("data.train_fraction", d.train_fraction.to_string()),
            ("data.seed", d.seed.to_string()),
            ("data.lattice", d.lattice.to_string()),
            ("data.coarse_factor", d.coarse_factor.to_string()),
            ("data.noise", d.noise.to_string()),
            ("model.seed", m.seed.to_string()),
            ("model.fam", m.fam.to_string()),
            ("model.backbone.channels", join(&m.backbone.channels)),
            ("model.backbone.strides", join(&m.backbone.strides)),
            ("model.vtm.patch", m.vtm.patch.to_string()),
            ("model.vtm.dim", m.vtm.dim.to_string()),
            ("model.vtm.depth", m.vtm.depth.to_string()),
            ("model.vtm.heads", m.vtm.heads.to_string()),
            ("model.vtm.mlp_ratio", m.vtm.mlp_ratio.to_string()),
            ("model.vtm.taps", join(&m.vtm.taps)),
            ("model.vtm.grid", m.vtm.grid.to_string()),
            ("model.vtm.seed", m.vtm.seed.to_string()),
            ("model.fmm.blocks", m.fmm.blocks.to_string()),
            ("model.fmm.heads", m.fmm.heads.to_string()),
            ("model.fmm.mlp_ratio", m.fmm.mlp_ratio.to_string()),
            ("model.fmm.shared", m.fmm.shared.to_string()),
            ("model.head.decoder_channels", m.head.decoder_channels.to_string()),
            ("model.head.aux_channels", m.head.aux_channels.to_string()),
            ("loss.lambda_mse", l.weights.mse.to_string()),
            ("loss.lambda_kl", l.weights.kl.to_string()),
            ("loss.lambda_ce", l.weights.ce.to_string()),
            ("loss.lambda_aux", l.weights.aux.to_string()),
            ("loss.lambda_kt", l.weights.kt.to_string()),
            ("loss.lambda_da", l.weights.da.to_string()),
            ("loss.mse", l.toggles.mse.to_string()),
            ("loss.kl", l.toggles.kl.to_string()),
            ("loss.ce", l.toggles.ce.to_string()),
            ("loss.aux", l.toggles.aux.to_string()),
            ("loss.mse_sum", l.mse_sum.to_string()),
            ("optim.base_lr", o.base_lr.to_string()),
            ("optim.beta1", o.beta1.to_string()),
            ("optim.beta2", o.beta2.to_string()),
            ("optim.eps", o.eps.to_string()),
            ("optim.weight_decay", o.weight_decay.to_string()),
            ("optim.warmup_iters", o.warmup_iters.to_string()),
            ("optim.max_iters", o.max_iters.to_string()),
            ("optim.poly_power", o.poly_power.to_string()),
            ("optim.min_lr", o.min_lr.to_string()),
            ("optim.clip_norm", o.clip_norm.map_or("none".into(), |c| c.to_string())),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.eval_every", t.eval_every.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Applies the settings in `text` on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), format!("expected key=value, got `{line}`")))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Copies derived settings (class count) into the model and checks
    /// everything.
    pub fn resolve(mut self) -> Result<Self> {
        self.model.num_classes = self.data.classes;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.num_classes != self.data.classes {
            return Err(Error::config("data.classes", "model class count differs from the dataset"));
        }
        let t = self.train.loss.toggles;
        if self.model.fam == FamMode::Disabled && t.any_kt() {
            return Err(Error::config(
                "model.fam",
                "off leaves no teacher features; also set loss.mse=false and loss.kl=false",
            ));
        }
        self.model.check_input(self.data.size, self.data.size)
    }

    /// 64-bit FNV-1a of the serialized configuration.
    pub fn hash(&self) -> u64 {
        self.to_text().bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}
