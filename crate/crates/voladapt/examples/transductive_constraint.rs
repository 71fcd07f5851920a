//! The size-margin penalty in isolation: its piecewise shape, the
//! support-derived prior, and how the constraint steers a predicted size
//! back into the tolerated band during transductive adaptation.
//!
//! Run with: cargo run --release --example transductive_constraint

use voladapt::autodiff::Tape;
use voladapt::error::Result;
use voladapt::objectives::{
    predicted_size, size_margin_penalty, size_margin_penalty_value, support_size_prior, SizePrior,
};
use voladapt::tensor::Tensor;
use voladapt::volume::LabelMask;

fn main() -> Result<()> {
    // support masks with 90, 110, and 130 foreground voxels
    let mk = |count: usize| {
        LabelMask::new(Tensor::from_fn(&[1, 8, 8, 8], |i| if i < count { 1.0 } else { 0.0 })).unwrap()
    };
    let masks = [mk(90), mk(110), mk(130)];
    let refs: Vec<&LabelMask> = masks.iter().collect();
    let prior = support_size_prior(&refs)?;
    println!("support sizes 90/110/130 -> prior S = {} voxels (K = {})", prior.voxels, prior.shots);

    let gamma = 0.2;
    let (lo, hi) = ((1.0 - gamma) * prior.voxels, (1.0 + gamma) * prior.voxels);
    println!("tolerated band at gamma {gamma}: [{lo}, {hi}]");
    for s_hat in [60.0, 88.0, 110.0, 132.0, 180.0] {
        let p = size_margin_penalty_value(s_hat, prior.voxels, gamma)?;
        println!("  predicted size {s_hat:>5}: penalty {p:>5.1}");
    }

    // the penalty is differentiable through the soft size: gradient descent
    // on the probability map pulls an over-segmented prediction into the band
    let mut probs = Tensor::full(&[1, 8, 8, 8], 0.45); // soft size 230, above the band
    let step = 0.05;
    println!("\nsteering an over-segmented map (soft size {:.0}):", probs.sum());
    for iter in 0..10 {
        let mut tape = Tape::new();
        let p = tape.leaf(probs.clone(), true);
        let s_hat = predicted_size(&mut tape, p);
        let pen = size_margin_penalty(&mut tape, s_hat, &prior, gamma)?;
        let pen_value = tape.value(pen).item();
        println!("  iter {iter}: soft size {:>6.1}, penalty {pen_value:>6.1}", tape.value(s_hat).item());
        if pen_value == 0.0 {
            println!("  inside the band; the constraint is silent");
            break;
        }
        tape.backward(pen)?;
        let grad = tape.grad(p).unwrap().clone();
        probs.axpy(-step, &grad);
        for v in probs.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }

    // the prior lives in voxels of the common working resolution, so it is
    // comparable across support and query volumes by construction
    let tiny_prior = SizePrior { voxels: 0.0, shots: 1 };
    let p = size_margin_penalty_value(5.0, tiny_prior.voxels, gamma)?;
    println!("\nempty-organ prior: any prediction above zero is penalized ({p})");
    Ok(())
}
