//! Parameter accounting across adaptation strategies: which parameters each
//! strategy trains and how many scalars that is.
//!
//! Run with: cargo run --release --example strategy_zoo

use voladapt::desk::{counting_arch, desk_arch};
use voladapt::error::Result;
use voladapt::nets::{Backbone, SegHead, SegModel, SpatialAdapter, ALL_STRATEGIES};

fn main() -> Result<()> {
    for (label, arch) in [("desk", desk_arch()), ("accounting (D=48)", counting_arch())] {
        println!("== {label}: base width {}, bottleneck {}, features {} ==", arch.base_width, arch.bottleneck(), arch.feature_dim);
        let backbone = Backbone::init(arch, 1);
        let head = SegHead::init(arch, 2);
        println!("{:<16}{:>12}  trainable set", "strategy", "#trainable");
        for strategy in ALL_STRATEGIES {
            let model = SegModel::assemble(backbone.clone(), head.clone(), strategy, 0, 3)?;
            let n = model.count_trainable()?;
            let part = model.select_trainable()?;
            let mut prefixes: Vec<String> = part
                .trainable
                .iter()
                .map(|p| p.split('.').take(2).collect::<Vec<_>>().join("."))
                .collect();
            prefixes.sort();
            prefixes.dedup();
            let set = if prefixes.is_empty() {
                "(frozen)".to_string()
            } else if prefixes.len() > 4 {
                "(everything)".to_string()
            } else {
                prefixes.join(", ")
            };
            println!("{:<16}{n:>12}  {set}", strategy.tag());
        }
        println!();
    }
    // the closed-form adapter count and the single-layer probe
    let d = 48;
    println!("adapter formula at D={d}: 3*(D*D*27 + 3D) + D + 1 = {}", SpatialAdapter::formula_params(d));
    println!("linear probe at D={d}: D + 1 = {}", d + 1);
    Ok(())
}
