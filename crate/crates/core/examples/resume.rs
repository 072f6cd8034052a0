//! Interrupts a run at a checkpoint, resumes it in a fresh trainer and
//! shows that the continued loss trajectory matches the uninterrupted one
//! bit for bit.

use ktda::config::RunConfig;
use ktda::data::Dataset;
use ktda::model::SegModel;
use ktda::train::Trainer;

fn main() -> ktda::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.data.num_samples = 6;
    cfg.data.size = 32;
    cfg.train.optim.max_iters = 30;
    cfg.train.optim.warmup_iters = 3;
    let cfg = cfg.resolve()?;
    let data = Dataset::generate(&cfg.data)?;

    let mut straight = Trainer::new(SegModel::new(cfg.model.clone())?, cfg.train.clone())?;
    let full = straight.run(&data, 30, None)?;

    let mut first = Trainer::new(SegModel::new(cfg.model.clone())?, cfg.train.clone())?;
    first.run(&data, 15, None)?;
    let bytes = first.to_checkpoint().encode();
    println!("checkpoint at iteration 15: {} bytes", bytes.len());

    let ckpt = ktda::model::Checkpoint::decode(&bytes)?;
    let mut resumed = Trainer::from_checkpoint(cfg.model.clone(), cfg.train.clone(), &ckpt)?;
    let tail = resumed.run(&data, 30, None)?;

    let mut identical = true;
    for (a, b) in full.logs[15..].iter().zip(&tail.logs) {
        let same = a.loss.total.to_bits() == b.loss.total.to_bits();
        identical &= same;
        println!("iter {:2}  straight {:.9}  resumed {:.9}  {}", a.iter, a.loss.total, b.loss.total, if same { "=" } else { "DIFFERS" });
    }
    println!("bit-identical: {identical}");
    Ok(())
}
