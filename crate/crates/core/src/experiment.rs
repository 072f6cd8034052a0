//! Full training runs and ablation sweeps driven by a [`RunConfig`].

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::MetricSummary;
use crate::model::SegModel;
use crate::train::{IterLog, TrainReport, Trainer};

/// Trains from scratch into `out`, which receives `config.txt`, the loss
/// and metric CSVs and the checkpoints.
pub fn train_run(
    cfg: &RunConfig,
    data: &Dataset,
    out: &Path,
    on_iter: &mut dyn FnMut(&IterLog),
) -> Result<(Trainer, TrainReport)> {
    cfg.validate()?;
    check_dataset(cfg, data)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.save(&out.join("config.txt"))?;
    let model = SegModel::new(cfg.model.clone())?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let report = trainer.run_with(data, cfg.train.optim.max_iters, Some(out), on_iter)?;
    Ok((trainer, report))
}

/// Checks that a loaded dataset matches the configured class count and size.
pub fn check_dataset(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    if data.classes() != cfg.model.num_classes {
        return Err(Error::config(
            "data.classes",
            format!("dataset has {} classes, model expects {}", data.classes(), cfg.model.num_classes),
        ));
    }
    let (h, w) = data.size();
    cfg.model.check_input(h, w)
}

/// One row of an ablation grid: a name plus `key=value` overrides applied on
/// top of the base configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

impl AblationRun {
    fn new(name: &str, overrides: &[(&str, &str)]) -> Self {
        Self {
            name: name.to_string(),
            overrides: overrides.iter().map(|&(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

const BUILTIN: [&str; 3] = ["tab2", "tab3", "tab4"];

pub fn builtin_grid_names() -> &'static [&'static str] {
    &BUILTIN
}

/// Built-in grids: `tab2` toggles individual loss terms, `tab3` varies the
/// alignment module and `tab4` sweeps the modulation depth.
pub fn builtin_grid(name: &str) -> Option<Vec<AblationRun>> {
    let toggles = |kl: bool, mse: bool, aux: bool, ce: bool| {
        let b = |v: bool| if v { "true" } else { "false" };
        vec![("loss.kl", b(kl)), ("loss.mse", b(mse)), ("loss.aux", b(aux)), ("loss.ce", b(ce))]
    };
    let grid = match name {
        "tab2" => vec![
            AblationRun::new("all", &toggles(true, true, true, true)),
            AblationRun::new("no_aux", &toggles(true, true, false, true)),
            AblationRun::new("no_mse", &toggles(true, false, true, true)),
            AblationRun::new("no_kl", &toggles(false, true, true, true)),
        ],
        "tab3" => vec![
            AblationRun::new("single_scale", &[("model.fam", "single")]),
            AblationRun::new("multi_scale", &[("model.fam", "multi")]),
            AblationRun::new("no_fam", &[("model.fam", "off"), ("loss.kl", "false"), ("loss.mse", "false")]),
            AblationRun::new(
                "fam_without_loss",
                &[("model.fam", "multi"), ("loss.kl", "false"), ("loss.mse", "false"), ("loss.aux", "false")],
            ),
            AblationRun::new("fam_with_loss", &[("model.fam", "multi")]),
        ],
        "tab4" => (0..=4)
            .map(|n| AblationRun {
                name: format!("fmm_{n}"),
                overrides: vec![("model.fmm.blocks".into(), n.to_string())],
            })
            .collect(),
        _ => return None,
    };
    Some(grid)
}

/// Parses a grid file: one run per line as `name key=value key=value ...`.
pub fn parse_grid(text: &str) -> Result<Vec<AblationRun>> {
    let mut runs = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let mut parts = line.split_whitespace();
        let name = parts.next().unwrap_or_default().to_string();
        let overrides = parts
            .map(|kv| {
                kv.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::config(&name, format!("expected key=value, got `{kv}`")))
            })
            .collect::<Result<_>>()?;
        runs.push(AblationRun { name, overrides });
    }
    check_names(&runs)?;
    Ok(runs)
}

fn check_names(runs: &[AblationRun]) -> Result<()> {
    let mut seen = HashSet::new();
    for r in runs {
        let valid = !r.name.is_empty() && r.name.chars().all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c));
        if !valid {
            return Err(Error::config("grid", format!("invalid run name `{}`", r.name)));
        }
        if !seen.insert(r.name.as_str()) {
            return Err(Error::config("grid", format!("duplicate run name `{}`", r.name)));
        }
    }
    Ok(())
}

/// The resolved configuration for row `index`: base seeds offset by the
/// row index, then the row's overrides.
pub fn resolve_run(base: &RunConfig, run: &AblationRun, index: usize) -> Result<RunConfig> {
    let mut cfg = base.clone();
    cfg.model.seed = base.model.seed.wrapping_add(index as u64);
    cfg.train.seed = base.train.seed.wrapping_add(index as u64);
    for (k, v) in &run.overrides {
        cfg.set(k, v)?;
    }
    cfg.resolve()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub name: String,
    pub config_hash: u64,
    pub config: RunConfig,
    pub metrics: MetricSummary,
}

impl SummaryRow {
    pub const CSV_HEADER: &'static str = "name,config_hash,model_seed,train_seed,fam,fmm_blocks,kl,mse,aux,ce,miou,oa,f1";

    pub fn csv_row(&self) -> String {
        let c = &self.config;
        let t = c.train.loss.toggles;
        let m = &self.metrics;
        format!(
            "{},{:016x},{},{},{},{},{},{},{},{},{:e},{:e},{:e}",
            self.name,
            self.config_hash,
            c.model.seed,
            c.train.seed,
            c.model.fam,
            c.model.fmm.blocks,
            t.kl as u8,
            t.mse as u8,
            t.aux as u8,
            t.ce as u8,
            m.miou,
            m.oa,
            m.f1
        )
    }
}

/// Runs every row in order, each into `out/<name>/`, and writes
/// `out/summary.csv`. All rows are resolved before any training starts so a
/// bad override fails fast.
pub fn run_grid(
    base: &RunConfig,
    runs: &[AblationRun],
    out: &Path,
    on_row: &mut dyn FnMut(&SummaryRow),
) -> Result<Vec<SummaryRow>> {
    check_names(runs)?;
    let configs = runs
        .iter()
        .enumerate()
        .map(|(i, r)| resolve_run(base, r, i))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rows = Vec::with_capacity(runs.len());
    let mut csv = format!("{}\n", SummaryRow::CSV_HEADER);
    for (run, cfg) in runs.iter().zip(configs) {
        let data = Dataset::generate(&cfg.data)?;
        let (_, report) = train_run(&cfg, &data, &out.join(&run.name), &mut |_| {})?;
        let metrics = report
            .evals
            .last()
            .map(|&(_, s)| s)
            .ok_or_else(|| Error::invalid("ablation", format!("run `{}` produced no evaluation", run.name)))?;
        let row = SummaryRow {
            name: run.name.clone(),
            config_hash: cfg.hash(),
            config: cfg,
            metrics,
        };
        on_row(&row);
        writeln!(csv, "{}", row.csv_row()).expect("writing to a String");
        let path = out.join("summary.csv");
        std::fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
        rows.push(row);
    }
    Ok(rows)
}
