//! Builds the default model and prints the shapes flowing through it and
//! the parameter count of each component.

use ktda::model::{ModelConfig, SegModel};
use ktda::Tensor;

fn main() -> ktda::Result<()> {
    let model = SegModel::<f32>::new(ModelConfig::default())?;
    let x = Tensor::<f32>::zeros(&[2, 3, 64, 64]);
    let out = model.forward(&x)?;
    println!("input          {:?}", x.shape());
    for (name, pyr) in [("aligned", &out.aligned), ("modulated", &out.modulated), ("teacher", &out.teacher)] {
        println!("{name:<14} {:?}", pyr.shapes());
    }
    println!("y_hat          {:?}", out.y_hat.shape());
    println!("y_hat_aux      {:?}", out.y_hat_aux.shape());
    println!();
    for prefix in ["backbone.", "fam.", "fmm.", "decoder.", "aux.", "teacher."] {
        println!("{prefix:<10} {:>8} parameters", model.params.count(prefix));
    }
    Ok(())
}
