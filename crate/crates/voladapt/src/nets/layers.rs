//! Parameterized layers and the machinery that binds them onto a tape.
//!
//! Model structs own their parameter tensors. For each training step the
//! layers are *bound*: every parameter is pushed onto the tape as a leaf
//! whose `requires_grad` comes from the strategy's trainable partition, and
//! the `(name, Var)` pairs are recorded so the optimizer can collect
//! gradients by parameter name afterwards.

use crate::autodiff::{Tape, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;
use std::collections::BTreeSet;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LEAKY_SLOPE: f64 = 0.01;

/// Forward mode: training uses batch statistics in trainable batch norms and
/// updates their running estimates; evaluation is fully deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// The set of trainable parameter names for the active strategy.
#[derive(Debug, Clone, Default)]
pub struct Partition {
    pub trainable: BTreeSet<String>,
}

impl Partition {
    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    pub fn n_scalars(&self, named: &[(String, &Tensor)]) -> usize {
        named
            .iter()
            .filter(|(n, _)| self.is_trainable(n))
            .map(|(_, t)| t.numel())
            .sum()
    }
}

/// Records the parameter leaves pushed onto a tape during binding.
#[derive(Debug, Default)]
pub struct Bound {
    pub entries: Vec<(String, Var)>,
}

impl Bound {
    pub fn leaf(&mut self, tape: &mut Tape, name: String, value: &Tensor, trainable: bool) -> Var {
        let v = tape.leaf(value.clone(), trainable);
        self.entries.push((name, v));
        v
    }
}

/// 3D convolution layer (kernel 1 or 3, stride 1, zero padding).
#[derive(Debug, Clone)]
pub struct Conv3 {
    pub weight: Tensor,
    pub bias: Tensor,
    pub kernel: usize,
}

impl Conv3 {
    /// He-normal initialization scaled by fan-in.
    pub fn init(c_in: usize, c_out: usize, kernel: usize, rng: &mut Rng) -> Self {
        let fan_in = (c_in * kernel * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight = Tensor::from_fn(&[c_out, c_in, kernel, kernel, kernel], |_| rng.normal() * std);
        Conv3 { weight, bias: Tensor::zeros(&[c_out]), kernel }
    }

    pub fn n_params(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn named_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub fn named_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }

    pub fn bind(&self, tape: &mut Tape, bound: &mut Bound, prefix: &str, part: &Partition) -> ConvVars {
        let wname = format!("{prefix}.weight");
        let bname = format!("{prefix}.bias");
        let w = bound.leaf(tape, wname.clone(), &self.weight, part.is_trainable(&wname));
        let b = bound.leaf(tape, bname.clone(), &self.bias, part.is_trainable(&bname));
        ConvVars { w, b, kernel: self.kernel }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub w: Var,
    pub b: Var,
    pub kernel: usize,
}

impl ConvVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        tape.conv3d(x, self.w, self.b, self.kernel)
    }
}

/// Batch normalization with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn init(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn n_params(&self) -> usize {
        self.gamma.numel() + self.beta.numel()
    }

    pub fn named_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.gamma"), &self.gamma));
        out.push((format!("{prefix}.beta"), &self.beta));
    }

    pub fn named_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma));
        out.push((format!("{prefix}.beta"), &mut self.beta));
    }

    pub fn bind(&self, tape: &mut Tape, bound: &mut Bound, prefix: &str, part: &Partition) -> BnVars {
        let gname = format!("{prefix}.gamma");
        let bname = format!("{prefix}.beta");
        let trainable = part.is_trainable(&gname);
        let beta_trainable = part.is_trainable(&bname);
        let g = bound.leaf(tape, gname, &self.gamma, trainable);
        let b = bound.leaf(tape, bname, &self.beta, beta_trainable);
        BnVars { g, b, trainable }
    }

    /// Forward with batch statistics (training, trainable layer): updates the
    /// running estimates in place.
    pub fn forward_train(&mut self, tape: &mut Tape, vars: BnVars, x: Var) -> Var {
        let (y, mean, var) = tape.batch_norm(x, vars.g, vars.b, BN_EPS, None);
        for c in 0..self.running_mean.len() {
            self.running_mean[c] = (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * mean[c];
            self.running_var[c] = (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * var[c];
        }
        y
    }

    /// Forward with frozen running statistics (inference mode or frozen layer).
    pub fn forward_eval(&self, tape: &mut Tape, vars: BnVars, x: Var) -> Var {
        tape.batch_norm(x, vars.g, vars.b, BN_EPS, Some((&self.running_mean, &self.running_var))).0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BnVars {
    pub g: Var,
    pub b: Var,
    /// Whether this layer's parameters are in the trainable partition; frozen
    /// normalization always runs in inference mode (statistics untouched).
    pub trainable: bool,
}

/// Conv + batch norm + Leaky-ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv3,
    pub bn: BatchNorm,
}

impl ConvBlock {
    pub fn init(c_in: usize, c_out: usize, kernel: usize, rng: &mut Rng) -> Self {
        ConvBlock { conv: Conv3::init(c_in, c_out, kernel, rng), bn: BatchNorm::init(c_out) }
    }

    pub fn n_params(&self) -> usize {
        self.conv.n_params() + self.bn.n_params()
    }

    pub fn named_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.conv.named_params(&format!("{prefix}.conv"), out);
        self.bn.named_params(&format!("{prefix}.bn"), out);
    }

    pub fn named_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.conv.named_params_mut(&format!("{prefix}.conv"), out);
        self.bn.named_params_mut(&format!("{prefix}.bn"), out);
    }

    pub fn bind(&self, tape: &mut Tape, bound: &mut Bound, prefix: &str, part: &Partition) -> BlockVars {
        BlockVars {
            conv: self.conv.bind(tape, bound, &format!("{prefix}.conv"), part),
            bn: self.bn.bind(tape, bound, &format!("{prefix}.bn"), part),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, vars: BlockVars, x: Var, mode: Mode) -> Var {
        let y = vars.conv.forward(tape, x);
        let y = if mode == Mode::Train && vars.bn.trainable {
            self.bn.forward_train(tape, vars.bn, y)
        } else {
            self.bn.forward_eval(tape, vars.bn, y)
        };
        tape.leaky_relu(y, LEAKY_SLOPE)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub conv: ConvVars,
    pub bn: BnVars,
}
