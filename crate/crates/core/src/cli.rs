//! The `ktda` command line.
//!
//! Exit codes: 0 success, 1 invalid arguments or configuration, 2 failure
//! while running, 3 gradient audit failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::audit;
use crate::config::RunConfig;
use crate::data::{write_dataset, Dataset};
use crate::error::{Error, Result};
use crate::experiment::{builtin_grid, check_dataset, parse_grid, run_grid, train_run, SummaryRow};
use crate::loss::IGNORE_INDEX;
use crate::metrics::ConfusionMatrix;
use crate::model::{Checkpoint, SegModel};
use crate::tensor::no_grad;
use crate::train::{IterLog, Trainer};

#[derive(Debug, Parser)]
#[command(name = "ktda", version, about = "Knowledge-transfer segmentation on a from-scratch autodiff engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Gen(GenArgs),
    /// Train a model and write CSV logs, checkpoints and the resolved config.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Run an ablation grid sequentially and write a summary CSV.
    Ablate(AblateArgs),
    /// Run the finite-difference gradient audit in f64.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Configuration file of `section.key=value` lines.
    #[arg(long, visible_alias = "spec")]
    pub config: Option<PathBuf>,
    /// Override one setting; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples (data.num_samples).
    #[arg(long)]
    pub num: Option<usize>,
    /// Image side length (data.size).
    #[arg(long)]
    pub size: Option<usize>,
    /// Generator seed (data.seed).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    /// Transformer blocks in the modulation module (model.fmm.blocks).
    #[arg(long)]
    pub fmm_blocks: Option<usize>,
    /// Alignment mode: off, single or multi (model.fam).
    #[arg(long)]
    pub fam: Option<String>,
    #[arg(long)]
    pub disable_kl: bool,
    #[arg(long)]
    pub disable_mse: bool,
    #[arg(long)]
    pub disable_ce: bool,
    #[arg(long)]
    pub disable_aux: bool,
    /// Total iterations (optim.max_iters).
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Seed for both model init and batch order.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Dataset directory written by `gen`; generated from the config when
    /// omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run. Without
    /// `--config`, the `config.txt` beside the checkpoint is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Print a loss line every this many iterations (0: silent).
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory; generated from the config when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run configuration; defaults to `config.txt` next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Which samples to score.
    #[arg(long, default_value = "test", value_parser = ["train", "test", "all"])]
    pub split: String,
    /// Where to write `eval.txt` (and masks); defaults to the checkpoint's
    /// directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write predicted masks as class-indexed PGM files.
    #[arg(long)]
    pub save_masks: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Built-in grid (tab2, tab3, tab4) or a grid file.
    #[arg(long)]
    pub grid: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Iterations per run (optim.max_iters).
    #[arg(long)]
    pub max_iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Append a check with a deliberately wrong backward rule.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

/// How a command ended, mapped to the process exit code.
#[derive(Debug)]
pub enum Failure {
    Validation(Error),
    Runtime(Error),
    Gradcheck,
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Gradcheck => 3,
        }
    }
}

trait Phase<T> {
    fn validation(self) -> std::result::Result<T, Failure>;
    fn runtime(self) -> std::result::Result<T, Failure>;
}

impl<T> Phase<T> for Result<T> {
    fn validation(self) -> std::result::Result<T, Failure> {
        self.map_err(Failure::Validation)
    }

    fn runtime(self) -> std::result::Result<T, Failure> {
        self.map_err(Failure::Runtime)
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses the process arguments, runs the command and returns its exit code.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Validation(e) => eprintln!("error: {e}"),
                Failure::Runtime(e) => eprintln!("error: {e}"),
                Failure::Gradcheck => eprintln!("error: gradient audit failed"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}

pub fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &args.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(kv, "--set expects KEY=VALUE"))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(cfg)
}

fn apply_flags(cfg: &mut RunConfig, f: &TrainFlags) -> Result<()> {
    if let Some(n) = f.fmm_blocks {
        cfg.model.fmm.blocks = n;
    }
    if let Some(mode) = &f.fam {
        cfg.set("model.fam", mode)?;
    }
    let t = &mut cfg.train.loss.toggles;
    t.kl &= !f.disable_kl;
    t.mse &= !f.disable_mse;
    t.ce &= !f.disable_ce;
    t.aux &= !f.disable_aux;
    if let Some(n) = f.max_iters {
        set_max_iters(cfg, n);
    }
    if let Some(s) = f.seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    Ok(())
}

/// Sets the run length, shrinking the warmup to 5% of it when the current
/// warmup would not fit.
fn set_max_iters(cfg: &mut RunConfig, n: usize) {
    let o = &mut cfg.train.optim;
    o.max_iters = n;
    if o.warmup_iters > n {
        o.warmup_iters = n / 20;
        eprintln!("note: optim.warmup_iters set to {} to fit optim.max_iters={n}", o.warmup_iters);
    }
}

fn cmd_gen(a: GenArgs) -> CmdResult {
    let mut cfg = load_config(&a.config).validation()?;
    if let Some(n) = a.num {
        cfg.data.num_samples = n;
    }
    if let Some(s) = a.size {
        cfg.data.size = s;
    }
    if let Some(s) = a.seed {
        cfg.data.seed = s;
    }
    cfg.data.validate().validation()?;
    crate::data::split(&cfg.data).validation()?;
    write_dataset(&cfg.data, &a.out).runtime()?;
    println!("wrote {} samples to {}", cfg.data.num_samples, a.out.display());
    Ok(())
}

fn load_data(cfg: &RunConfig, dir: Option<&Path>) -> Result<Dataset> {
    let data = match dir {
        Some(d) => Dataset::load(d)?,
        None => Dataset::generate(&cfg.data)?,
    };
    check_dataset(cfg, &data)?;
    Ok(data)
}

fn progress(every: usize) -> impl FnMut(&IterLog) {
    move |log| {
        if every > 0 && log.iter % every == 0 {
            let cos = log.cosine.map_or(String::new(), |c| format!("  cos {c:.4}"));
            println!("iter {:6}  lr {:.3e}  loss {:.5}{cos}", log.iter, log.lr, log.loss.total);
        }
    }
}

fn cmd_train(mut a: TrainArgs) -> CmdResult {
    if let (Some(ckpt), None) = (&a.resume, &a.config.config) {
        let beside = ckpt.parent().unwrap_or(Path::new(".")).join("config.txt");
        if beside.exists() {
            a.config.config = Some(beside);
        }
    }
    let mut cfg = load_config(&a.config).validation()?;
    apply_flags(&mut cfg, &a.flags).validation()?;
    let loaded = a.data.as_deref().map(Dataset::load).transpose().validation()?;
    if let Some(d) = &loaded {
        cfg.data.classes = d.classes();
        cfg.data.size = d.size().0;
        cfg.data.num_samples = d.samples.len();
    }
    let cfg = cfg.resolve().validation()?;
    let data = match loaded {
        Some(d) => d,
        None => Dataset::generate(&cfg.data).runtime()?,
    };
    check_dataset(&cfg, &data).validation()?;
    let mut on_iter = progress(a.log_every);
    let report = match &a.resume {
        None => train_run(&cfg, &data, &a.out, &mut on_iter).runtime()?.1,
        Some(path) => {
            let ckpt = Checkpoint::load(path).validation()?;
            let mut trainer = Trainer::from_checkpoint(cfg.model.clone(), cfg.train.clone(), &ckpt).validation()?;
            std::fs::create_dir_all(&a.out).map_err(|e| Failure::Runtime(Error::io(&a.out, e)))?;
            cfg.save(&a.out.join("config.txt")).runtime()?;
            trainer
                .run_with(&data, cfg.train.optim.max_iters, Some(&a.out), &mut on_iter)
                .runtime()?
        }
    };
    if let Some((iter, s)) = report.evals.last() {
        println!(
            "iter {iter}: mIoU {:.2}%  OA {:.2}%  F1 {:.2}%",
            100.0 * s.miou,
            100.0 * s.oa,
            100.0 * s.f1
        );
    }
    Ok(())
}

/// Text report with percentages to two decimals and a per-class IoU table.
pub fn eval_report(cm: &ConfusionMatrix) -> Result<String> {
    let s = cm.summary()?;
    let mut out = String::new();
    let pct = |v: f64| format!("{:.2}%", 100.0 * v);
    writeln!(out, "mIoU {}", pct(s.miou)).unwrap();
    writeln!(out, "OA   {}", pct(s.oa)).unwrap();
    writeln!(out, "F1   {}", pct(s.f1)).unwrap();
    writeln!(out, "class  IoU").unwrap();
    for (k, iou) in cm.class_iou().iter().enumerate() {
        let v = iou.map_or("-".to_string(), pct);
        writeln!(out, "{k:<5}  {v}").unwrap();
    }
    Ok(out)
}

fn write_pgm(path: &Path, width: usize, height: usize, mask: &[u8]) -> Result<()> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(mask);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let dir = a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default();
    let cfg_path = a.config.clone().unwrap_or_else(|| dir.join("config.txt"));
    let cfg = RunConfig::load(&cfg_path).and_then(RunConfig::resolve).validation()?;
    let data = load_data(&cfg, a.data.as_deref()).validation()?;
    let ckpt = Checkpoint::load(&a.checkpoint).validation()?;
    let mut model = SegModel::<f32>::new(cfg.model.clone()).validation()?;
    model.load_checkpoint(&ckpt).validation()?;
    let ids: Vec<usize> = match a.split.as_str() {
        "train" => data.train.clone(),
        "test" => data.test.clone(),
        _ => (0..data.samples.len()).collect(),
    };
    if ids.is_empty() {
        return Err(Failure::Validation(Error::config("split", "selected split is empty")));
    }
    let out = a.out.unwrap_or(dir);
    std::fs::create_dir_all(&out).map_err(|e| Failure::Runtime(Error::io(&out, e)))?;
    let mut cm = ConfusionMatrix::new(cfg.model.num_classes);
    for chunk in ids.chunks(cfg.train.batch_size) {
        let samples: Vec<_> = chunk.iter().map(|&i| &data.samples[i]).collect();
        let (x, y) = crate::data::collate(&samples).runtime()?;
        let pred = no_grad(|| model.predict(&x)).runtime()?;
        cm.accumulate(&pred, &y, IGNORE_INDEX).runtime()?;
        if a.save_masks {
            let per = pred.len() / samples.len();
            for (s, mask) in samples.iter().zip(pred.chunks(per)) {
                write_pgm(&out.join(format!("{}.pgm", s.id)), s.width(), s.height(), mask).runtime()?;
            }
        }
    }
    let report = eval_report(&cm).runtime()?;
    print!("{report}");
    let path = out.join("eval.txt");
    std::fs::write(&path, report).map_err(|e| Failure::Runtime(Error::io(&path, e)))?;
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> CmdResult {
    let mut base = load_config(&a.config).validation()?;
    if let Some(n) = a.max_iters {
        set_max_iters(&mut base, n);
    }
    let runs = match builtin_grid(&a.grid) {
        Some(runs) => runs,
        None => {
            let path = Path::new(&a.grid);
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Validation(Error::io(path, e)))?;
            parse_grid(&text).validation()?
        }
    };
    for (i, r) in runs.iter().enumerate() {
        crate::experiment::resolve_run(&base, r, i).validation()?;
    }
    println!("{}", SummaryRow::CSV_HEADER);
    run_grid(&base, &runs, &a.out, &mut |row| println!("{}", row.csv_row())).runtime()?;
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let reports = audit::run_suite(a.inject_fault).runtime()?;
    for r in &reports {
        let status = if r.passed { "pass" } else { "FAIL" };
        println!("{status}  {:<24} max_rel_error {:.3e}  tolerance {:.0e}", r.op_name, r.max_rel_error, r.tolerance);
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", reports.len());
    if failed > 0 {
        return Err(Failure::Gradcheck);
    }
    Ok(())
}
