use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// CNN student backbone: one stage per entry of `channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub channels: Vec<usize>,
    /// Downsampling factor of each stage's stem.
    pub strides: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64, 128],
            strides: vec![2, 2, 2, 2],
        }
    }
}

impl BackboneConfig {
    pub fn scales(&self) -> usize {
        self.channels.len()
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::config("model.backbone.channels", "at least one stage required"));
        }
        if self.channels.contains(&0) {
            return Err(Error::config("model.backbone.channels", "channel counts must be >= 1"));
        }
        if self.strides.len() != self.channels.len() || self.strides.contains(&0) {
            return Err(Error::config(
                "model.backbone.strides",
                "one positive stride per stage required",
            ));
        }
        Ok(())
    }
}

/// Frozen vision-transformer teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct VtmConfig {
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// 1-based block indices whose outputs become teacher features.
    pub taps: Vec<usize>,
    /// Token grid side the position embedding is laid out on; other grids
    /// get a bilinearly resized copy.
    pub grid: usize,
    pub seed: u64,
}

impl Default for VtmConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            taps: vec![1, 2, 3, 4],
            grid: 8,
            seed: 0x7eac4e5,
        }
    }
}

/// `n` block indices spread evenly over `1..=depth`, ending at `depth`.
pub fn even_taps(depth: usize, n: usize) -> Vec<usize> {
    (1..=n)
        .map(|i| ((i * depth) as f64 / n as f64).round().max(1.0) as usize)
        .collect()
}

impl VtmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.dim == 0 || self.depth == 0 || self.grid == 0 {
            return Err(Error::config("model.vtm", "patch, dim, depth and grid must be >= 1"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config("model.vtm.heads", "must divide model.vtm.dim"));
        }
        if self.taps.is_empty()
            || self.taps.windows(2).any(|w| w[0] >= w[1])
            || self.taps[0] == 0
            || *self.taps.last().unwrap() > self.depth
        {
            return Err(Error::config(
                "model.vtm.taps",
                format!("must be strictly increasing within 1..={}", self.depth),
            ));
        }
        Ok(())
    }
}

/// How student features are aligned to the teacher.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FamMode {
    /// No alignment module and no teacher: heads read the raw backbone
    /// pyramid.
    Disabled,
    /// Only the deepest backbone feature is aligned.
    SingleScale,
    /// Every backbone scale is aligned.
    MultiScale,
}

impl fmt::Display for FamMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FamMode::Disabled => "off",
            FamMode::SingleScale => "single",
            FamMode::MultiScale => "multi",
        })
    }
}

impl FromStr for FamMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "off" | "none" | "disabled" => Ok(FamMode::Disabled),
            "single" => Ok(FamMode::SingleScale),
            "multi" => Ok(FamMode::MultiScale),
            _ => Err(format!("unknown FAM mode `{s}` (expected off, single or multi)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FmmConfig {
    /// Number of transformer blocks; 0 makes the module an identity.
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// One block stack shared by all scales instead of one stack per scale.
    pub shared: bool,
}

impl Default for FmmConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            heads: 4,
            mlp_ratio: 4,
            shared: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub decoder_channels: usize,
    pub aux_channels: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            decoder_channels: 32,
            aux_channels: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub backbone: BackboneConfig,
    pub vtm: VtmConfig,
    pub fam: FamMode,
    pub fmm: FmmConfig,
    pub head: HeadConfig,
    /// Seed for student parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: 5,
            backbone: BackboneConfig::default(),
            vtm: VtmConfig::default(),
            fam: FamMode::MultiScale,
            fmm: FmmConfig::default(),
            head: HeadConfig::default(),
            seed: 42,
        }
    }
}

impl ModelConfig {
    /// Number of aligned scales fed to the losses and heads.
    pub fn aligned_scales(&self) -> usize {
        match self.fam {
            FamMode::SingleScale => 1,
            FamMode::MultiScale | FamMode::Disabled => self.backbone.scales(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.vtm.validate()?;
        if self.in_channels == 0 {
            return Err(Error::config("model.in_channels", "must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("model.num_classes", "must be >= 2"));
        }
        if self.head.decoder_channels == 0 || self.head.aux_channels == 0 {
            return Err(Error::config("model.head", "channel counts must be >= 1"));
        }
        if self.fam == FamMode::MultiScale && self.vtm.taps.len() != self.backbone.scales() {
            return Err(Error::config(
                "model.vtm.taps",
                format!(
                    "{} taps for {} backbone scales",
                    self.vtm.taps.len(),
                    self.backbone.scales()
                ),
            ));
        }
        if self.fmm.blocks > 0 && (self.fmm.heads == 0 || self.vtm.dim % self.fmm.heads != 0) {
            return Err(Error::config("model.fmm.heads", "must divide model.vtm.dim"));
        }
        Ok(())
    }

    /// Checks that an input of this size fits both the backbone strides and
    /// the teacher patch grid.
    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let s = self.backbone.total_stride();
        if height % s != 0 || width % s != 0 || height == 0 || width == 0 {
            return Err(Error::invalid(
                "backbone",
                format!("input {height}x{width} is not divisible by total stride {s}"),
            ));
        }
        if self.fam != FamMode::Disabled && (height % self.vtm.patch != 0 || width % self.vtm.patch != 0) {
            return Err(Error::invalid(
                "vtm",
                format!("input {height}x{width} is not divisible by patch size {}", self.vtm.patch),
            ));
        }
        Ok(())
    }
}
