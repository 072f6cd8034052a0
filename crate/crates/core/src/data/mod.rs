//! Synthetic fine-grained segmentation data.
//!
//! Each sample is drawn from its own random stream keyed by `(seed, index)`.
//! A coarse random lattice is smoothed by two bilinear upsamplings into a
//! continuous field, which per-sample quantile thresholds cut into `K`
//! ordered bands (think coverage levels). The image paints every band in a
//! slightly different base colour with per-pixel texture noise, so adjacent
//! levels look alike.

pub mod kseg;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use kseg::{read_sample, write_sample};

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub num_samples: usize,
    /// Square patch side in pixels.
    pub size: usize,
    pub classes: usize,
    /// Relative area of each class; empty means uniform.
    pub class_weights: Vec<f64>,
    /// Fraction of samples assigned to training.
    pub train_fraction: f64,
    pub seed: u64,
    /// Side of the random lattice the field is grown from.
    pub lattice: usize,
    /// The field is first upsampled to `size / coarse_factor`.
    pub coarse_factor: usize,
    /// Standard deviation of per-pixel texture noise.
    pub noise: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_samples: 10,
            size: 64,
            classes: 5,
            class_weights: Vec::new(),
            train_fraction: 0.8,
            seed: 7,
            lattice: 4,
            coarse_factor: 8,
            noise: 0.05,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 254 {
            return Err(Error::config("data.classes", "must be within 2..=254"));
        }
        if self.size == 0 {
            return Err(Error::config("data.size", "must be >= 1"));
        }
        if !self.class_weights.is_empty()
            && (self.class_weights.len() != self.classes
                || self.class_weights.iter().any(|&w| !(w > 0.0 && w.is_finite())))
        {
            return Err(Error::config(
                "data.class_weights",
                format!("need {} positive weights", self.classes),
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("data.train_fraction", "must lie strictly between 0 and 1"));
        }
        if self.lattice < 2 || self.coarse_factor == 0 {
            return Err(Error::config("data.lattice", "lattice >= 2 and coarse_factor >= 1 required"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::config("data.noise", "must be >= 0"));
        }
        Ok(())
    }

    fn weights(&self) -> Vec<f64> {
        if self.class_weights.is_empty() {
            vec![1.0; self.classes]
        } else {
            self.class_weights.clone()
        }
    }

    /// Base RGB colour of class `k`: darker, browner low levels through
    /// brighter, greener high levels.
    pub fn class_colour(&self, k: usize) -> [f64; 3] {
        let t = k as f64 / (self.classes - 1) as f64;
        [0.50 - 0.30 * t, 0.35 + 0.35 * t, 0.25 - 0.10 * t]
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub index: usize,
    pub classes: usize,
    /// `[3,H,W]` values in `[0,1]`.
    pub image: Tensor<f32>,
    /// `H*W` class ids, row-major.
    pub mask: Vec<u8>,
}

impl PartialEq for Sample {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.index == other.index
            && self.classes == other.classes
            && self.image.shape() == other.image.shape()
            && self.image.data() == other.image.data()
            && self.mask == other.mask
    }
}

impl Sample {
    pub fn id_for(index: usize) -> String {
        format!("s{index:06}")
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Deterministic sample `index` of the dataset.
pub fn generate_sample(spec: &DatasetSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    if index >= spec.num_samples {
        return Err(Error::invalid(
            "generate_sample",
            format!("index {index} out of range for {} samples", spec.num_samples),
        ));
    }
    let mut rng = sample_rng(spec.seed, index);
    let n = spec.size;
    let coarse = (n / spec.coarse_factor).max(1);
    let lattice: Vec<f64> = (0..spec.lattice * spec.lattice).map(|_| rng.random::<f64>()).collect();
    let field = Tensor::<f64>::new(&[1, 1, spec.lattice, spec.lattice], lattice)?
        .bilinear_resize(coarse, coarse)?
        .bilinear_resize(n, n)?;

    // Thresholds at the cumulative class-weight quantiles of this sample's
    // field, so every class gets its share of the area.
    let mut sorted = field.to_vec();
    sorted.sort_by(f64::total_cmp);
    let weights = spec.weights();
    let total: f64 = weights.iter().sum();
    let mut cum = 0.0;
    let thresholds: Vec<f64> = weights[..weights.len() - 1]
        .iter()
        .map(|w| {
            cum += w / total;
            let pos = ((cum * sorted.len() as f64) as usize).min(sorted.len() - 1);
            sorted[pos]
        })
        .collect();
    let mask: Vec<u8> = field
        .data()
        .iter()
        .map(|&v| thresholds.iter().filter(|&&t| v >= t).count() as u8)
        .collect();

    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let pixels = n * n;
    let mut image = vec![0f32; 3 * pixels];
    for (p, &m) in mask.iter().enumerate() {
        let base = spec.class_colour(m as usize);
        for c in 0..3 {
            let v = base[c] + if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            image[c * pixels + p] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(Sample {
        id: Sample::id_for(index),
        index,
        classes: spec.classes,
        image: Tensor::new(&[3, n, n], image)?,
        mask,
    })
}

pub fn generate_all(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    (0..spec.num_samples).map(|i| generate_sample(spec, i)).collect()
}

/// Seeded shuffle, then the first `floor(train_fraction * n)` indices train.
pub fn split(spec: &DatasetSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    spec.validate()?;
    if spec.num_samples < 5 {
        return Err(Error::invalid(
            "split",
            format!("too few samples: {} (need at least 5)", spec.num_samples),
        ));
    }
    let mut ids: Vec<usize> = (0..spec.num_samples).collect();
    ids.shuffle(&mut sample_rng(spec.seed, usize::MAX - 1));
    let n_train = (spec.train_fraction * spec.num_samples as f64 + 1e-9).floor() as usize;
    let test = ids.split_off(n_train);
    Ok((ids, test))
}

/// One epoch of batches in a seeded order; the last batch may be short.
pub fn batch_iter(ids: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if ids.is_empty() {
        return Err(Error::invalid("batch_iter", "empty id list"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch_iter", "batch size must be >= 1"));
    }
    let mut order = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba7c_4e5);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Stacks samples into a `[B,3,H,W]` image batch and a flat `B*H*W` mask.
pub fn collate(samples: &[&Sample]) -> Result<(Tensor<f32>, Vec<u8>)> {
    let first = samples.first().ok_or_else(|| Error::invalid("collate", "empty batch"))?;
    let shape = first.image.shape().to_vec();
    let mut image = Vec::with_capacity(samples.len() * first.image.numel());
    let mut mask = Vec::with_capacity(samples.len() * first.mask.len());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::shape("collate", &shape, s.image.shape()));
        }
        image.extend_from_slice(s.image.data());
        mask.extend_from_slice(&s.mask);
    }
    let batch = Tensor::new(&[samples.len(), shape[0], shape[1], shape[2]], image)?;
    Ok((batch, mask))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// `id<TAB>split` lines in index order.
pub fn manifest_text(spec: &DatasetSpec) -> Result<String> {
    let (train, _) = split(spec)?;
    let mut out = String::new();
    for i in 0..spec.num_samples {
        let s = if train.contains(&i) { Split::Train } else { Split::Test };
        writeln!(out, "{}\t{}", Sample::id_for(i), s.as_str()).unwrap();
    }
    Ok(out)
}

pub fn parse_manifest(text: &str) -> Result<Vec<(String, Split)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let (id, split) = line
                .split_once('\t')
                .ok_or_else(|| Error::Malformed(format!("manifest line without tab: `{line}`")))?;
            let split = match split.trim() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(Error::Malformed(format!("unknown split `{other}`"))),
            };
            Ok((id.to_string(), split))
        })
        .collect()
}

/// Writes every sample as `<id>.kseg` plus `manifest.tsv` into `dir`.
pub fn write_dataset(spec: &DatasetSpec, dir: &Path) -> Result<()> {
    let manifest = manifest_text(spec)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for i in 0..spec.num_samples {
        let sample = generate_sample(spec, i)?;
        write_sample(&dir.join(format!("{}.kseg", sample.id)), &sample)?;
    }
    let path = dir.join("manifest.tsv");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// An in-memory dataset with its train/test partition.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        let (train, test) = split(spec)?;
        Ok(Self {
            samples: generate_all(spec)?,
            train,
            test,
        })
    }

    /// Loads a directory written by [`write_dataset`].
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.tsv");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut samples = Vec::new();
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (pos, (id, split)) in parse_manifest(&text)?.into_iter().enumerate() {
            samples.push(read_sample(&dir.join(format!("{id}.kseg")))?);
            match split {
                Split::Train => train.push(pos),
                Split::Test => test.push(pos),
            }
        }
        if samples.is_empty() {
            return Err(Error::Malformed(format!("{} lists no samples", path.display())));
        }
        Ok(Self { samples, train, test })
    }

    pub fn classes(&self) -> usize {
        self.samples[0].classes
    }

    pub fn size(&self) -> (usize, usize) {
        (self.samples[0].height(), self.samples[0].width())
    }
}
