//! Trains a short run into an output directory, then evaluates the best
//! checkpoint on the test split and prints the per-class report.
//!
//! Usage: `train_eval [OUT_DIR] [ITERS]`.

use ktda::cli::eval_report;
use ktda::config::RunConfig;
use ktda::data::Dataset;
use ktda::experiment::train_run;
use ktda::model::{Checkpoint, SegModel};
use ktda::train::evaluate;

fn main() -> ktda::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args
        .next()
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("ktda-train-eval"));
    let iters: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);

    let mut cfg = RunConfig::default();
    cfg.data.num_samples = 20;
    cfg.train.optim.max_iters = iters;
    cfg.train.optim.warmup_iters = iters / 20;
    cfg.train.eval_every = (iters / 3).max(1);
    let cfg = cfg.resolve()?;
    let data = Dataset::generate(&cfg.data)?;

    let (_, report) = train_run(&cfg, &data, &out, &mut |log| {
        if log.iter % 50 == 0 {
            println!("iter {:4}  loss {:.4}", log.iter, log.loss.total);
        }
    })?;
    for (iter, m) in &report.evals {
        println!("eval @ {iter:4}: mIoU {:.4}", m.miou);
    }

    let mut model = SegModel::<f32>::new(cfg.model.clone())?;
    model.load_checkpoint(&Checkpoint::load(&out.join("best.ktda"))?)?;
    let cm = evaluate(&model, &data, &data.test, cfg.train.batch_size)?;
    println!("\nbest checkpoint on the test split:\n{}", eval_report(&cm)?);
    println!("run directory: {}", out.display());
    Ok(())
}
