//! Overfits the default model on eight synthetic 64×64 samples and reports
//! train-set mIoU, the knowledge-transfer loss and teacher alignment.

use std::time::Instant;

use ktda::data::{Dataset, DatasetSpec};
use ktda::model::{ModelConfig, SegModel};
use ktda::train::{TrainConfig, Trainer};

fn main() -> ktda::Result<()> {
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let data = Dataset::generate(&DatasetSpec::default())?;
    let model = SegModel::new(ModelConfig::default())?;
    let mut cfg = TrainConfig::default();
    cfg.optim.max_iters = iters;
    cfg.optim.warmup_iters = iters / 20;
    cfg.eval_every = 0;
    let mut trainer = Trainer::new(model, cfg)?;
    let start = Instant::now();
    let mut cosines = Vec::with_capacity(iters);
    let mut kt = Vec::with_capacity(iters);
    trainer.run_with(&data, iters, None, &mut |log| {
        cosines.push(log.cosine.unwrap_or(f64::NAN));
        kt.push(log.loss.kt);
        if log.iter % 50 == 0 || log.iter + 1 == iters {
            println!(
                "iter {:5}  total {:.4}  kt {:.4}  ce {:.4}  cos {:.4}  ({:.1}s)",
                log.iter,
                log.loss.total,
                log.loss.kt,
                log.loss.ce,
                log.cosine.unwrap_or(f64::NAN),
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    for (w, chunk) in cosines.chunks(200).enumerate() {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        println!("cosine window {:4}..{:4}  mean {mean:.5}", w * 200, w * 200 + chunk.len());
    }
    if kt.len() > 10 {
        println!("kt[10] {:.5}  kt[last] {:.5}  ratio {:.4}", kt[10], kt[kt.len() - 1], kt[kt.len() - 1] / kt[10]);
    }
    let summary = trainer.evaluate(&data, &data.train)?.summary()?;
    println!("train mIoU {:.4}  OA {:.4}  F1 {:.4}", summary.miou, summary.oa, summary.f1);
    Ok(())
}
