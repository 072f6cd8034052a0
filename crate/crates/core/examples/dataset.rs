//! Generates a synthetic dataset directory, reads it back and prints the
//! split and per-class pixel shares.
//!
//! Usage: `dataset [OUT_DIR]` (defaults to a directory under the system
//! temp dir).

use ktda::data::{write_dataset, Dataset, DatasetSpec};

fn main() -> ktda::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("ktda-dataset"));
    let spec = DatasetSpec::default();
    write_dataset(&spec, &out)?;
    let data = Dataset::load(&out)?;
    println!("{} samples of {:?} in {}", data.samples.len(), data.size(), out.display());
    println!("train {:?}\ntest  {:?}", data.train, data.test);

    let mut counts = vec![0usize; data.classes()];
    for s in &data.samples {
        for &m in &s.mask {
            counts[m as usize] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    for (k, c) in counts.iter().enumerate() {
        println!("class {k}: {:5.1}% of pixels", 100.0 * *c as f64 / total as f64);
    }
    assert_eq!(data.samples, Dataset::generate(&spec)?.samples, "generation is deterministic");
    Ok(())
}
