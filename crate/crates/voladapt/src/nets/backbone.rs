//! The 3-level U-shaped convolutional backbone.
//!
//! A compact encoder-decoder that maps a single-channel patch to a
//! `feature_dim`-channel map at input resolution. Channel widths are
//! `base_width` at full resolution, doubling per level. The interface admits
//! any drop-in producing features of the same shape.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{Bound, Conv3, ConvBlock, Mode, Partition};

/// Architecture hyperparameters shared by backbone and heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    /// Channel width of the first encoder level.
    pub base_width: usize,
    /// Channel width of the bottleneck level. Parameters there sit at 1/4
    /// resolution, so a wide bottleneck adds capacity far faster than
    /// compute; defaults to `4 * base_width`.
    #[serde(default)]
    pub bottleneck_width: usize,
    /// Channel count D of the output feature map.
    pub feature_dim: usize,
    /// Global class count C of the pretraining label space.
    pub n_classes: usize,
}

impl Arch {
    /// Standard shape: bottleneck at four times the base width.
    pub fn standard(base_width: usize, feature_dim: usize, n_classes: usize) -> Self {
        Arch { base_width, bottleneck_width: 4 * base_width, feature_dim, n_classes }
    }

    /// Effective bottleneck width (0 in a deserialized config means default).
    pub fn bottleneck(&self) -> usize {
        if self.bottleneck_width == 0 {
            4 * self.base_width
        } else {
            self.bottleneck_width
        }
    }
}

/// Number of resolution levels; patches must be divisible by 2^(LEVELS-1).
pub const LEVELS: usize = 3;
pub const PATCH_DIVISOR: usize = 1 << (LEVELS - 1);

#[derive(Debug, Clone)]
pub struct Backbone {
    pub arch: Arch,
    enc0: [ConvBlock; 2],
    enc1: [ConvBlock; 2],
    bott: [ConvBlock; 2],
    dec1: [ConvBlock; 2],
    dec0: [ConvBlock; 2],
    feat: Conv3,
}

impl Backbone {
    pub fn init(arch: Arch, seed: u64) -> Self {
        let w = arch.base_width;
        let b = arch.bottleneck();
        let mut rng = Rng::new(seed).split(0xBB);
        Backbone {
            arch,
            enc0: [ConvBlock::init(1, w, 3, &mut rng), ConvBlock::init(w, w, 3, &mut rng)],
            enc1: [ConvBlock::init(w, 2 * w, 3, &mut rng), ConvBlock::init(2 * w, 2 * w, 3, &mut rng)],
            bott: [ConvBlock::init(2 * w, b, 3, &mut rng), ConvBlock::init(b, b, 3, &mut rng)],
            dec1: [ConvBlock::init(b + 2 * w, 2 * w, 3, &mut rng), ConvBlock::init(2 * w, 2 * w, 3, &mut rng)],
            dec0: [ConvBlock::init(3 * w, w, 3, &mut rng), ConvBlock::init(w, w, 3, &mut rng)],
            feat: Conv3::init(w, arch.feature_dim, 1, &mut rng),
        }
    }

    pub fn named_params<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        for (name, pair) in [
            ("enc0", &self.enc0),
            ("enc1", &self.enc1),
            ("bott", &self.bott),
            ("dec1", &self.dec1),
            ("dec0", &self.dec0),
        ] {
            for (i, b) in pair.iter().enumerate() {
                b.named_params(&format!("backbone.{name}.{i}"), out);
            }
        }
        self.feat.named_params("backbone.feat", out);
    }

    pub fn named_params_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (name, pair) in [
            ("enc0", &mut self.enc0),
            ("enc1", &mut self.enc1),
            ("bott", &mut self.bott),
            ("dec1", &mut self.dec1),
            ("dec0", &mut self.dec0),
        ] {
            for (i, b) in pair.iter_mut().enumerate() {
                b.named_params_mut(&format!("backbone.{name}.{i}"), out);
            }
        }
        self.feat.named_params_mut("backbone.feat", out);
    }

    /// Running batch-norm statistics, keyed for checkpointing.
    pub fn bn_state(&self) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        let mut out = Vec::new();
        for (name, pair) in [
            ("enc0", &self.enc0),
            ("enc1", &self.enc1),
            ("bott", &self.bott),
            ("dec1", &self.dec1),
            ("dec0", &self.dec0),
        ] {
            for (i, b) in pair.iter().enumerate() {
                out.push((
                    format!("backbone.{name}.{i}.bn"),
                    b.bn.running_mean.clone(),
                    b.bn.running_var.clone(),
                ));
            }
        }
        out
    }

    pub fn set_bn_state(&mut self, state: &[(String, Vec<f64>, Vec<f64>)]) -> Result<()> {
        for (key, mean, var) in state {
            let b = self.block_by_key(key).ok_or_else(|| {
                Error::Format(format!("unknown batch-norm key {key:?} in checkpoint"))
            })?;
            if mean.len() != b.bn.running_mean.len() {
                return Err(Error::Format(format!("batch-norm state length mismatch for {key}")));
            }
            b.bn.running_mean = mean.clone();
            b.bn.running_var = var.clone();
        }
        Ok(())
    }

    fn block_by_key(&mut self, key: &str) -> Option<&mut ConvBlock> {
        let rest = key.strip_prefix("backbone.")?.strip_suffix(".bn")?;
        let (stage, idx) = rest.split_once('.')?;
        let i: usize = idx.parse().ok()?;
        let pair = match stage {
            "enc0" => &mut self.enc0,
            "enc1" => &mut self.enc1,
            "bott" => &mut self.bott,
            "dec1" => &mut self.dec1,
            "dec0" => &mut self.dec0,
            _ => return None,
        };
        pair.get_mut(i)
    }

    /// Leaf every backbone parameter onto the tape.
    pub fn bind(&self, tape: &mut Tape, bound: &mut Bound, part: &Partition) -> BackboneVars {
        let b = |blocks: &[ConvBlock; 2], name: &str, tape: &mut Tape, bound: &mut Bound| {
            [
                blocks[0].bind(tape, bound, &format!("backbone.{name}.0"), part),
                blocks[1].bind(tape, bound, &format!("backbone.{name}.1"), part),
            ]
        };
        BackboneVars {
            enc0: b(&self.enc0, "enc0", tape, bound),
            enc1: b(&self.enc1, "enc1", tape, bound),
            bott: b(&self.bott, "bott", tape, bound),
            dec1: b(&self.dec1, "dec1", tape, bound),
            dec0: b(&self.dec0, "dec0", tape, bound),
            feat: self.feat.bind(tape, bound, "backbone.feat", part),
        }
    }

    /// Validate that a patch can flow through all levels.
    pub fn check_patch_shape(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[0] != 1 {
            return Err(Error::InvalidShape(format!(
                "backbone expects a [1, d, h, w] patch, got {shape:?}"
            )));
        }
        for &d in &shape[1..] {
            if d % PATCH_DIVISOR != 0 || d == 0 {
                return Err(Error::InvalidShape(format!(
                    "patch dims must be divisible by {PATCH_DIVISOR}, got {shape:?}"
                )));
            }
        }
        Ok(())
    }

    /// Encoder-decoder forward: `[1, d, h, w]` patch to `[D, d, h, w]` features.
    pub fn forward(&mut self, tape: &mut Tape, vars: &BackboneVars, patch: Var, mode: Mode) -> Result<Var> {
        self.check_patch_shape(tape.value(patch).shape())?;
        let v = vars.clone();
        let e0 = self.enc0[0].forward(tape, v.enc0[0], patch, mode);
        let e0 = self.enc0[1].forward(tape, v.enc0[1], e0, mode);
        let p0 = tape.avg_pool2(e0);
        let e1 = self.enc1[0].forward(tape, v.enc1[0], p0, mode);
        let e1 = self.enc1[1].forward(tape, v.enc1[1], e1, mode);
        let p1 = tape.avg_pool2(e1);
        let bott = self.bott[0].forward(tape, v.bott[0], p1, mode);
        let bott = self.bott[1].forward(tape, v.bott[1], bott, mode);
        let u1 = tape.upsample_nearest2(bott);
        let c1 = tape.concat(u1, e1);
        let d1 = self.dec1[0].forward(tape, v.dec1[0], c1, mode);
        let d1 = self.dec1[1].forward(tape, v.dec1[1], d1, mode);
        let u0 = tape.upsample_nearest2(d1);
        let c0 = tape.concat(u0, e0);
        let d0 = self.dec0[0].forward(tape, v.dec0[0], c0, mode);
        let d0 = self.dec0[1].forward(tape, v.dec0[1], d0, mode);
        Ok(v.feat.forward(tape, d0))
    }

    /// Closed-form parameter count for this architecture.
    pub fn n_params(&self) -> usize {
        let blocks = [&self.enc0, &self.enc1, &self.bott, &self.dec1, &self.dec0];
        blocks.iter().flat_map(|p| p.iter()).map(|b| b.n_params()).sum::<usize>() + self.feat.n_params()
    }
}

#[derive(Debug, Clone)]
pub struct BackboneVars {
    pub enc0: [super::layers::BlockVars; 2],
    pub enc1: [super::layers::BlockVars; 2],
    pub bott: [super::layers::BlockVars; 2],
    pub dec1: [super::layers::BlockVars; 2],
    pub dec0: [super::layers::BlockVars; 2],
    pub feat: super::layers::ConvVars,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> Arch {
        Arch::standard(2, 4, 2)
    }

    #[test]
    fn feature_map_shape_contract() {
        let mut b = Backbone::init(small_arch(), 1);
        let mut tape = Tape::new();
        let mut bound = Bound::default();
        let vars = b.bind(&mut tape, &mut bound, &Partition::default());
        let patch = tape.leaf(Tensor::zeros(&[1, 8, 8, 8]), false);
        let f = b.forward(&mut tape, &vars, patch, Mode::Eval).unwrap();
        assert_eq!(tape.value(f).shape(), &[4, 8, 8, 8]);
    }

    #[test]
    fn rejects_indivisible_patch() {
        let mut b = Backbone::init(small_arch(), 1);
        let mut tape = Tape::new();
        let mut bound = Bound::default();
        let vars = b.bind(&mut tape, &mut bound, &Partition::default());
        let patch = tape.leaf(Tensor::zeros(&[1, 6, 8, 8]), false);
        assert!(b.forward(&mut tape, &vars, patch, Mode::Eval).is_err());
    }

    #[test]
    fn zeroed_backbone_maps_zero_patch_to_zero_features() {
        let mut b = Backbone::init(small_arch(), 1);
        let mut named = Vec::new();
        b.named_params_mut(&mut named);
        for (name, t) in named {
            // keep batch-norm scale at 1 so the stub stays linear
            if !name.ends_with(".gamma") {
                t.data_mut().fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let mut bound = Bound::default();
        let vars = b.bind(&mut tape, &mut bound, &Partition::default());
        let patch = tape.leaf(Tensor::zeros(&[1, 8, 8, 8]), false);
        let f = b.forward(&mut tape, &vars, patch, Mode::Eval).unwrap();
        assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut b = Backbone::init(small_arch(), 7);
        let mut rng = Rng::new(3);
        let patch0 = Tensor::from_fn(&[1, 8, 8, 8], |_| rng.uniform());
        let run = |b: &mut Backbone| {
            let mut tape = Tape::new();
            let mut bound = Bound::default();
            let vars = b.bind(&mut tape, &mut bound, &Partition::default());
            let patch = tape.leaf(patch0.clone(), false);
            let f = b.forward(&mut tape, &vars, patch, Mode::Eval).unwrap();
            tape.value(f).clone()
        };
        let a = run(&mut b);
        let c = run(&mut b);
        assert!(a.bit_eq(&c));
    }

    #[test]
    fn named_params_cover_count() {
        let b = Backbone::init(small_arch(), 1);
        let mut named = Vec::new();
        b.named_params(&mut named);
        let total: usize = named.iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(total, b.n_params());
        // names are unique
        let mut names: Vec<&String> = named.iter().map(|(n, _)| n).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), named.len());
    }

    #[test]
    fn bn_state_round_trips() {
        let mut b = Backbone::init(small_arch(), 1);
        let mut state = b.bn_state();
        state[0].1[0] = 0.5;
        state[0].2[0] = 2.0;
        b.set_bn_state(&state).unwrap();
        let got = b.bn_state();
        assert_eq!(got[0].1[0], 0.5);
        assert_eq!(got[0].2[0], 2.0);
    }
}
