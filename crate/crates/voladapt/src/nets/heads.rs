//! Classification heads: the pretrained multi-class head, the linear probe,
//! and the spatial adapter.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::backbone::Arch;
use super::layers::{Bound, Conv3, ConvBlock, Mode, Partition};

/// Pretrained 1x1x1 classification head mapping D features to C logits.
#[derive(Debug, Clone)]
pub struct SegHead {
    pub conv: Conv3,
}

impl SegHead {
    pub fn init(arch: Arch, seed: u64) -> Self {
        let mut rng = Rng::new(seed).split(0xC1);
        SegHead { conv: Conv3::init(arch.feature_dim, arch.n_classes, 1, &mut rng) }
    }

    pub fn n_params(&self) -> usize {
        self.conv.n_params()
    }

    pub fn named_params<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        self.conv.named_params("head", out);
    }

    pub fn named_params_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.conv.named_params_mut("head", out);
    }

    pub fn bind(&self, tape: &mut Tape, bound: &mut Bound, part: &Partition) -> super::layers::ConvVars {
        self.conv.bind(tape, bound, "head", part)
    }
}

/// Single 1x1x1 linear layer on frozen features; D+1 parameters per target.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    pub conv: Conv3,
}

impl LinearProbe {
    pub fn init(arch: Arch, seed: u64) -> Self {
        let mut rng = Rng::new(seed).split(0xC2);
        LinearProbe { conv: Conv3::init(arch.feature_dim, 1, 1, &mut rng) }
    }

    pub fn n_params(&self) -> usize {
        self.conv.n_params()
    }

    pub fn named_params<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        self.conv.named_params("probe", out);
    }

    pub fn named_params_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.conv.named_params_mut("probe", out);
    }

    pub fn bind(&self, tape: &mut Tape, bound: &mut Bound, part: &Partition) -> super::layers::ConvVars {
        self.conv.bind(tape, bound, "probe", part)
    }
}

/// Spatial adapter: three stacked 3x3x3 convolutions (batch norm +
/// Leaky-ReLU each) with an additive skip from adapter input to output,
/// followed by a 1x1x1 head to a single target channel.
#[derive(Debug, Clone)]
pub struct SpatialAdapter {
    pub blocks: [ConvBlock; 3],
    pub head: Conv3,
    pub width: usize,
}

impl SpatialAdapter {
    pub fn init(arch: Arch, seed: u64) -> Self {
        let d = arch.feature_dim;
        let mut rng = Rng::new(seed).split(0xC3);
        SpatialAdapter {
            blocks: [
                ConvBlock::init(d, d, 3, &mut rng),
                ConvBlock::init(d, d, 3, &mut rng),
                ConvBlock::init(d, d, 3, &mut rng),
            ],
            head: Conv3::init(d, 1, 1, &mut rng),
            width: d,
        }
    }

    /// Closed-form trainable parameter count:
    /// 3 * (D*D*27 + D + 2D) for the conv stack and D + 1 for the head.
    pub fn formula_params(d: usize) -> usize {
        3 * (d * d * 27 + d + 2 * d) + d + 1
    }

    pub fn n_params(&self) -> usize {
        self.blocks.iter().map(|b| b.n_params()).sum::<usize>() + self.head.n_params()
    }

    pub fn named_params<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.named_params(&format!("adapter.block{i}"), out);
        }
        self.head.named_params("adapter.head", out);
    }

    pub fn named_params_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.named_params_mut(&format!("adapter.block{i}"), out);
        }
        self.head.named_params_mut("adapter.head", out);
    }

    pub fn bn_state(&self) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                (format!("adapter.block{i}.bn"), b.bn.running_mean.clone(), b.bn.running_var.clone())
            })
            .collect()
    }

    pub fn set_bn_state(&mut self, state: &[(String, Vec<f64>, Vec<f64>)]) -> Result<()> {
        for (key, mean, var) in state {
            let idx = key
                .strip_prefix("adapter.block")
                .and_then(|r| r.strip_suffix(".bn"))
                .and_then(|r| r.parse::<usize>().ok())
                .ok_or_else(|| Error::Format(format!("unknown adapter batch-norm key {key:?}")))?;
            let b = self
                .blocks
                .get_mut(idx)
                .ok_or_else(|| Error::Format(format!("adapter block {idx} out of range")))?;
            if mean.len() != b.bn.running_mean.len() {
                return Err(Error::Format(format!("batch-norm state length mismatch for {key}")));
            }
            b.bn.running_mean = mean.clone();
            b.bn.running_var = var.clone();
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, bound: &mut Bound, part: &Partition) -> AdapterVars {
        AdapterVars {
            blocks: [
                self.blocks[0].bind(tape, bound, "adapter.block0", part),
                self.blocks[1].bind(tape, bound, "adapter.block1", part),
                self.blocks[2].bind(tape, bound, "adapter.block2", part),
            ],
            head: self.head.bind(tape, bound, "adapter.head", part),
        }
    }

    /// Feature map to single-channel probability map in (0, 1).
    pub fn forward(&mut self, tape: &mut Tape, vars: &AdapterVars, z: Var, mode: Mode) -> Result<Var> {
        let zc = tape.value(z).shape()[0];
        if zc != self.width {
            return Err(Error::InvalidShape(format!(
                "adapter expects {} input channels, got {zc}",
                self.width
            )));
        }
        let mut h = z;
        for (i, block) in self.blocks.iter_mut().enumerate() {
            h = block.forward(tape, vars.blocks[i], h, mode);
        }
        let residual = tape.add(h, z);
        let logits = vars.head.forward(tape, residual);
        Ok(tape.sigmoid(logits))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub blocks: [super::layers::BlockVars; 3],
    pub head: super::layers::ConvVars,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn arch() -> Arch {
        Arch::standard(2, 4, 3)
    }

    #[test]
    fn adapter_zeroed_head_outputs_half() {
        let mut a = SpatialAdapter::init(arch(), 1);
        a.head.weight.data_mut().fill(0.0);
        a.head.bias.data_mut().fill(0.0);
        let mut rng = Rng::new(2);
        let z0 = Tensor::from_fn(&[4, 4, 4, 4], |_| rng.normal());
        let mut tape = Tape::new();
        let mut bound = Bound::default();
        let vars = a.bind(&mut tape, &mut bound, &Partition::default());
        let z = tape.leaf(z0, false);
        let y = a.forward(&mut tape, &vars, z, Mode::Eval).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn adapter_shape_contract_and_open_interval() {
        let mut a = SpatialAdapter::init(arch(), 5);
        let mut rng = Rng::new(3);
        let z0 = Tensor::from_fn(&[4, 6, 6, 6], |_| rng.normal());
        let mut tape = Tape::new();
        let mut bound = Bound::default();
        let vars = a.bind(&mut tape, &mut bound, &Partition::default());
        let z = tape.leaf(z0, false);
        let y = a.forward(&mut tape, &vars, z, Mode::Eval).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 6, 6, 6]);
        for &v in tape.value(y).data() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn adapter_rejects_channel_mismatch() {
        let mut a = SpatialAdapter::init(arch(), 5);
        let mut tape = Tape::new();
        let mut bound = Bound::default();
        let vars = a.bind(&mut tape, &mut bound, &Partition::default());
        let z = tape.leaf(Tensor::zeros(&[3, 4, 4, 4]), false);
        assert!(a.forward(&mut tape, &vars, z, Mode::Eval).is_err());
    }

    #[test]
    fn adapter_gradient_matches_central_differences() {
        let mut rng = Rng::new(11);
        let z0 = Tensor::from_fn(&[4, 4, 4, 4], |_| rng.normal());
        let n_vox = 64.0;
        let eval = |a: &mut SpatialAdapter, trainable: bool| {
            let mut tape = Tape::new();
            let mut bound = Bound::default();
            let part = if trainable {
                let mut named = Vec::new();
                a.named_params(&mut named);
                Partition { trainable: named.iter().map(|(n, _)| n.clone()).collect() }
            } else {
                Partition::default()
            };
            let vars = a.bind(&mut tape, &mut bound, &part);
            let z = tape.leaf(z0.clone(), false);
            let y = a.forward(&mut tape, &vars, z, Mode::Eval).unwrap();
            let s = tape.sum_all(y);
            // mean of the output map
            let m = tape.weighted_sum(&[(s, 1.0 / n_vox)]);
            tape.backward(m).unwrap();
            let val = tape.value(m).item();
            let grads: std::collections::BTreeMap<String, Tensor> = bound
                .entries
                .iter()
                .filter_map(|(n, v)| tape.grad(*v).map(|g| (n.clone(), g.clone())))
                .collect();
            (val, grads)
        };
        let mut a = SpatialAdapter::init(arch(), 7);
        let (_, grads) = eval(&mut a, true);
        // Central differences at step 1e-3; a coordinate whose +-h interval
        // straddles a Leaky-ReLU kink makes the difference quotient itself
        // invalid, so such coordinates are detected (the quotient moves when
        // the step shrinks) and resampled.
        let h = 1e-3;
        for block in [0usize, 1, 2] {
            let g = &grads[&format!("adapter.block{block}.conv.weight")];
            let mut checked = 0;
            let mut attempts = 0;
            while checked < 5 && attempts < 50 {
                attempts += 1;
                let i = rng.below(g.numel());
                let mut fd_at = |step: f64| {
                    let orig = a.blocks[block].conv.weight.data()[i];
                    a.blocks[block].conv.weight.data_mut()[i] = orig + step;
                    let (fp, _) = eval(&mut a, false);
                    a.blocks[block].conv.weight.data_mut()[i] = orig - step;
                    let (fm, _) = eval(&mut a, false);
                    a.blocks[block].conv.weight.data_mut()[i] = orig;
                    (fp - fm) / (2.0 * step)
                };
                let fd = fd_at(h);
                let fd_fine = fd_at(h / 32.0);
                let scale = fd.abs().max(fd_fine.abs()).max(1e-8);
                if ((fd - fd_fine) / scale).abs() > 1e-5 {
                    continue; // kink inside the difference interval
                }
                let an = g.data()[i];
                let denom = an.abs().max(fd.abs()).max(1e-8);
                assert!(((fd - an) / denom).abs() < 1e-4, "block {block}: fd {fd} vs {an}");
                checked += 1;
            }
            assert!(checked >= 5, "block {block}: only {checked} smooth coordinates found");
        }
    }

    #[test]
    fn probe_and_adapter_param_counts() {
        let a48 = Arch::standard(8, 48, 9);
        let probe = LinearProbe::init(a48, 1);
        assert_eq!(probe.n_params(), 49);
        let adapter = SpatialAdapter::init(a48, 1);
        assert_eq!(adapter.n_params(), SpatialAdapter::formula_params(48));
        let head = SegHead::init(a48, 1);
        assert_eq!(head.n_params(), 9 * 49);
    }
}
