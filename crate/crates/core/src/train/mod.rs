//! The optimization loop.
//!
//! Every iteration draws its batch from a shuffle keyed by `(seed, epoch)`,
//! so the whole trajectory is a pure function of the configuration and the
//! iteration counter. That is what makes checkpoint resume bit-exact: the
//! checkpoint holds parameters, Adam moments and the counter, and nothing
//! else is needed to continue.

mod adamw;
mod schedule;

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

pub use adamw::AdamW;
pub use schedule::{lr_at, OptimConfig};

use crate::data::{batch_iter, collate, Dataset};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossBreakdown, LossConfig, IGNORE_INDEX};
use crate::metrics::{ConfusionMatrix, MetricSummary};
use crate::model::{Checkpoint, FeaturePyramid, ModelConfig, Payload, Record, SegModel};
use crate::nn::ParamId;
use crate::tensor::{no_grad, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub batch_size: usize,
    /// Seed for the batch order.
    pub seed: u64,
    /// Evaluate on the test split every this many iterations (0: only at
    /// the end).
    pub eval_every: usize,
    /// Write `ckpt_<iter>.ktda` every this many iterations (0: never).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            batch_size: 4,
            seed: 1,
            eval_every: 200,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.loss.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        let t = self.loss.toggles;
        if !(t.mse || t.kl || t.ce || t.aux) {
            return Err(Error::config("loss", "all loss terms are disabled"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Number of completed iterations.
    pub iter: usize,
    pub best_miou: Option<f64>,
}

/// What one iteration produced.
#[derive(Debug, Clone, PartialEq)]
pub struct IterLog {
    pub iter: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Mean cosine similarity between aligned student features and teacher
    /// features; `None` without a teacher.
    pub cosine: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub logs: Vec<IterLog>,
    pub evals: Vec<(usize, MetricSummary)>,
}

/// Mean over scales, images and locations of the channel-vector cosine
/// between two `[B,C,H,W]` pyramids.
pub fn alignment_cosine<T: Scalar>(student: &FeaturePyramid<T>, teacher: &FeaturePyramid<T>) -> Option<f64> {
    if student.is_empty() || student.len() != teacher.len() {
        return None;
    }
    let mut per_scale = Vec::with_capacity(student.len());
    for (s, t) in student.iter().zip(teacher.iter()) {
        let shape = s.shape();
        let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let (sd, td) = (s.data(), t.data());
        let mut sum = 0.0;
        for bi in 0..b {
            for p in 0..hw {
                let (mut dot, mut ns, mut nt) = (0.0, 0.0, 0.0);
                for ch in 0..c {
                    let i = (bi * c + ch) * hw + p;
                    let (x, y) = (sd[i].as_f64(), td[i].as_f64());
                    dot += x * y;
                    ns += x * x;
                    nt += y * y;
                }
                sum += dot / (ns.sqrt() * nt.sqrt()).max(1e-12);
            }
        }
        per_scale.push(sum / (b * hw) as f64);
    }
    Some(per_scale.iter().sum::<f64>() / per_scale.len() as f64)
}

pub struct Trainer {
    pub model: SegModel<f32>,
    pub optimizer: AdamW<f32>,
    pub state: TrainState,
    pub config: TrainConfig,
    trainable: Vec<ParamId>,
}

impl Trainer {
    pub fn new(model: SegModel<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.loss.toggles.any_kt() && model.teacher().is_none() {
            return Err(Error::config(
                "loss",
                "knowledge-transfer terms are enabled but the model has no teacher (model.fam=off)",
            ));
        }
        let optimizer = AdamW::new(&config.optim, &model.params);
        let trainable = trainable_params(&model, &config.loss);
        Ok(Self {
            model,
            optimizer,
            state: TrainState {
                iter: 0,
                best_miou: None,
            },
            config,
            trainable,
        })
    }

    /// Student parameters the objective actually reaches.
    pub fn trainable(&self) -> &[ParamId] {
        &self.trainable
    }

    fn batch_for(&self, data: &Dataset, iter: usize) -> Result<Vec<usize>> {
        let n = data.train.len();
        if n == 0 {
            return Err(Error::invalid("train", "training split is empty"));
        }
        let per_epoch = n.div_ceil(self.config.batch_size);
        let batches = batch_iter(&data.train, self.config.batch_size, self.config.seed, iter / per_epoch)?;
        Ok(batches[iter % per_epoch].clone())
    }

    /// One forward/backward/update at the current iteration.
    pub fn step(&mut self, data: &Dataset) -> Result<IterLog> {
        let iter = self.state.iter;
        if iter >= self.config.optim.max_iters {
            return Err(Error::invalid("train", format!("already at max_iters {iter}")));
        }
        let ids = self.batch_for(data, iter)?;
        let samples: Vec<_> = ids.iter().map(|&i| &data.samples[i]).collect();
        let (x, y) = collate(&samples)?;
        let out = self.model.forward(&x)?;
        let (total, loss) = total_loss(&out, &y, &self.config.loss)?;
        if !loss.total.is_finite() {
            let (op, shape) = total
                .first_non_finite()
                .unwrap_or_else(|| ("total_loss".into(), Vec::new()));
            return Err(Error::NonFinite { op, shape });
        }
        self.model.params.zero_grad();
        total.backward()?;
        let lr = lr_at(iter, &self.config.optim)?;
        self.optimizer.step(&mut self.model.params, &self.trainable, lr)?;
        self.state.iter += 1;
        Ok(IterLog {
            iter,
            lr,
            loss,
            cosine: alignment_cosine(&out.aligned, &out.teacher),
        })
    }

    pub fn evaluate(&self, data: &Dataset, ids: &[usize]) -> Result<ConfusionMatrix> {
        evaluate(&self.model, data, ids, self.config.batch_size)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.model.to_checkpoint();
        for (id, p) in self.model.params.iter() {
            if p.frozen {
                continue;
            }
            let dims = p.tensor.shape();
            let i = id.index();
            ckpt.push(Record::new(format!("optim.m.{}", p.name), dims, Payload::from_scalars(&self.optimizer.m[i])).unwrap());
            ckpt.push(Record::new(format!("optim.v.{}", p.name), dims, Payload::from_scalars(&self.optimizer.v[i])).unwrap());
        }
        ckpt.push(Record::new("optim.step", &[1], Payload::U64(vec![self.optimizer.step])).unwrap());
        ckpt.push(Record::new("train.iter", &[1], Payload::U64(vec![self.state.iter as u64])).unwrap());
        let best = self.state.best_miou.unwrap_or(f64::NAN);
        ckpt.push(Record::new("train.best_miou", &[1], Payload::F64(vec![best])).unwrap());
        ckpt
    }

    /// Rebuilds a trainer mid-run from a checkpoint written by
    /// [`Trainer::to_checkpoint`].
    pub fn from_checkpoint(model_cfg: ModelConfig, config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut model = SegModel::new(model_cfg)?;
        model.load_checkpoint(ckpt)?;
        let mut t = Self::new(model, config)?;
        let ids: Vec<ParamId> = t.model.params.ids().collect();
        for id in ids {
            let p = t.model.params.param(id);
            if p.frozen {
                continue;
            }
            for (prefix, buf) in [("optim.m.", &mut t.optimizer.m), ("optim.v.", &mut t.optimizer.v)] {
                let name = format!("{prefix}{}", p.name);
                let rec = ckpt.get(&name).ok_or_else(|| Error::CheckpointMismatch {
                    name: name.clone(),
                    msg: "missing from checkpoint".into(),
                })?;
                let values = rec.payload.to_scalars::<f32>().filter(|v| v.len() == p.tensor.numel());
                buf[id.index()] = values.ok_or_else(|| Error::CheckpointMismatch {
                    name,
                    msg: "moment buffer does not match its parameter".into(),
                })?;
            }
        }
        let scalar_u64 = |name: &str| match ckpt.get(name).map(|r| &r.payload) {
            Some(Payload::U64(v)) if v.len() == 1 => Ok(v[0]),
            _ => Err(Error::CheckpointMismatch {
                name: name.into(),
                msg: "expected one u64 value".into(),
            }),
        };
        t.optimizer.step = scalar_u64("optim.step")?;
        t.state.iter = scalar_u64("train.iter")? as usize;
        if t.state.iter > t.config.optim.max_iters {
            return Err(Error::CheckpointMismatch {
                name: "train.iter".into(),
                msg: format!("{} exceeds max_iters {}", t.state.iter, t.config.optim.max_iters),
            });
        }
        t.state.best_miou = match ckpt.get("train.best_miou").map(|r| &r.payload) {
            Some(Payload::F64(v)) if v.len() == 1 && !v[0].is_nan() => Some(v[0]),
            _ => None,
        };
        Ok(t)
    }

    pub fn run(&mut self, data: &Dataset, until: usize, out: Option<&Path>) -> Result<TrainReport> {
        self.run_with(data, until, out, &mut |_| {})
    }

    /// Trains up to iteration `until` (capped at `max_iters`), writing CSVs
    /// and checkpoints under `out` when given.
    pub fn run_with(
        &mut self,
        data: &Dataset,
        until: usize,
        out: Option<&Path>,
        on_iter: &mut dyn FnMut(&IterLog),
    ) -> Result<TrainReport> {
        let until = until.min(self.config.optim.max_iters);
        let mut sink = match out {
            Some(dir) => Some(RunFiles::open(dir, self.state.iter == 0)?),
            None => None,
        };
        let eval_ids = if data.test.is_empty() { data.train.clone() } else { data.test.clone() };
        let mut report = TrainReport::default();
        while self.state.iter < until {
            let log = self.step(data)?;
            on_iter(&log);
            let done = self.state.iter;
            if let Some(s) = sink.as_mut() {
                s.loss_row(&log.loss.csv_row(log.iter))?;
            }
            let eval_due = (self.config.eval_every > 0 && done % self.config.eval_every == 0) || done == until;
            if eval_due {
                let summary = self.evaluate(data, &eval_ids)?.summary()?;
                report.evals.push((done, summary));
                let improved = self.state.best_miou.is_none_or(|b| summary.miou > b);
                if improved {
                    self.state.best_miou = Some(summary.miou);
                }
                if let Some(s) = sink.as_mut() {
                    s.metric_row(&summary.csv_row(done))?;
                    if improved {
                        self.to_checkpoint().save(&s.dir.join("best.ktda"))?;
                    }
                }
            }
            if let Some(s) = sink.as_ref() {
                if self.config.checkpoint_every > 0 && done % self.config.checkpoint_every == 0 {
                    self.to_checkpoint().save(&s.dir.join(format!("ckpt_{done}.ktda")))?;
                }
            }
            report.logs.push(log);
        }
        if let Some(s) = sink.as_ref() {
            self.to_checkpoint().save(&s.dir.join("final.ktda"))?;
        }
        Ok(report)
    }
}

/// Parameters reachable from the enabled loss terms. The FMM and primary
/// decoder only feed the primary cross-entropy, and the auxiliary head only
/// feeds its own.
fn trainable_params(model: &SegModel<f32>, loss: &LossConfig) -> Vec<ParamId> {
    let t = loss.toggles;
    model
        .student_param_ids()
        .into_iter()
        .filter(|&id| {
            let name = &model.params.param(id).name;
            let primary_only = name.starts_with("decoder.") || name.starts_with("fmm.");
            !(primary_only && !t.ce || name.starts_with("aux.") && !t.aux)
        })
        .collect()
}

/// Confusion matrix of `model` predictions over `ids`.
pub fn evaluate<T: Scalar>(model: &SegModel<T>, data: &Dataset, ids: &[usize], batch_size: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config.num_classes);
    for chunk in ids.chunks(batch_size.max(1)) {
        let samples: Vec<_> = chunk.iter().map(|&i| &data.samples[i]).collect();
        let (x, y) = collate(&samples)?;
        let pred = no_grad(|| model.predict(&x.cast::<T>()))?;
        cm.accumulate(&pred, &y, IGNORE_INDEX)?;
    }
    Ok(cm)
}

struct RunFiles {
    dir: PathBuf,
    loss: File,
    metrics: File,
}

impl RunFiles {
    fn open(dir: &Path, fresh: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str, header: &str| -> Result<File> {
            let path = dir.join(name);
            let new = fresh || !path.exists();
            let mut f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!new)
                .truncate(new)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if new {
                writeln!(f, "{header}").map_err(|e| Error::io(&path, e))?;
            }
            Ok(f)
        };
        Ok(Self {
            loss: open("loss.csv", LossBreakdown::CSV_HEADER)?,
            metrics: open("metrics.csv", MetricSummary::CSV_HEADER)?,
            dir: dir.to_path_buf(),
        })
    }

    fn loss_row(&mut self, row: &str) -> Result<()> {
        writeln!(self.loss, "{row}").map_err(|e| Error::io(self.dir.join("loss.csv"), e))
    }

    fn metric_row(&mut self, row: &str) -> Result<()> {
        writeln!(self.metrics, "{row}").map_err(|e| Error::io(self.dir.join("metrics.csv"), e))
    }
}
