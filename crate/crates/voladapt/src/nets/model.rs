//! Segmentation model assembly and trainable-parameter strategies.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;

use super::backbone::{Arch, Backbone};
use super::heads::{AdapterVars, LinearProbe, SegHead, SpatialAdapter};
use super::layers::{Bound, ConvVars, Mode, Partition};

/// How a model is adapted to a target task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrainStrategy {
    /// Direct application of the pretrained model; nothing trains.
    Generalization,
    /// Random initialization, everything trains.
    Scratch,
    /// Fine-tune the whole pretrained network.
    Ft,
    /// Fine-tune only the last decoder stage plus the head.
    FtLast,
    /// Train a fresh 1x1x1 linear head on frozen features.
    LinearProbe,
    /// Train the spatial adapter on frozen features.
    Adapter,
    /// Spatial adapter plus the transductive size constraint.
    AdapterTi,
}

pub const ALL_STRATEGIES: [TrainStrategy; 7] = [
    TrainStrategy::Generalization,
    TrainStrategy::Scratch,
    TrainStrategy::Ft,
    TrainStrategy::FtLast,
    TrainStrategy::LinearProbe,
    TrainStrategy::Adapter,
    TrainStrategy::AdapterTi,
];

impl TrainStrategy {
    pub fn tag(&self) -> &'static str {
        match self {
            TrainStrategy::Generalization => "GENERALIZATION",
            TrainStrategy::Scratch => "SCRATCH",
            TrainStrategy::Ft => "FT",
            TrainStrategy::FtLast => "FT_LAST",
            TrainStrategy::LinearProbe => "LINEAR_PROBE",
            TrainStrategy::Adapter => "ADAPTER",
            TrainStrategy::AdapterTi => "ADAPTER_TI",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        ALL_STRATEGIES
            .iter()
            .copied()
            .find(|s| s.tag() == tag.to_ascii_uppercase())
            .ok_or_else(|| {
                let valid: Vec<&str> = ALL_STRATEGIES.iter().map(|s| s.tag()).collect();
                Error::Config(format!("unknown strategy {tag:?}; valid tags: {}", valid.join(", ")))
            })
    }

    /// Whether this strategy uses the spatial adapter head.
    pub fn uses_adapter(&self) -> bool {
        matches!(self, TrainStrategy::Adapter | TrainStrategy::AdapterTi)
    }

    /// Whether adaptation includes the transductive size constraint.
    pub fn transductive(&self) -> bool {
        matches!(self, TrainStrategy::AdapterTi)
    }
}

impl fmt::Display for TrainStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Which head sits on the backbone features.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)] // one head per model; size is irrelevant
pub enum HeadKind {
    /// Pretrained multi-class head; adaptation strategies address one class.
    Original(SegHead),
    /// Fresh single-output linear head.
    Probe(LinearProbe),
    /// Fresh spatial adapter.
    Adapter(SpatialAdapter),
}

/// A backbone plus head with a strategy tag. For target adaptation the model
/// predicts a single organ: `target_class` selects the channel of the
/// original head, while probe/adapter heads are single-channel by design.
#[derive(Debug, Clone)]
pub struct SegModel {
    pub backbone: Backbone,
    pub head: HeadKind,
    pub strategy: TrainStrategy,
    pub target_class: Option<usize>,
}

impl SegModel {
    /// Assemble a model for a strategy from a pretrained backbone + head.
    pub fn assemble(
        backbone: Backbone,
        original_head: SegHead,
        strategy: TrainStrategy,
        target_class: usize,
        head_seed: u64,
    ) -> Result<Self> {
        let arch = backbone.arch;
        if target_class >= arch.n_classes {
            return Err(Error::Config(format!(
                "target class {target_class} out of range for {} classes",
                arch.n_classes
            )));
        }
        let head = match strategy {
            TrainStrategy::Generalization
            | TrainStrategy::Scratch
            | TrainStrategy::Ft
            | TrainStrategy::FtLast => HeadKind::Original(original_head),
            TrainStrategy::LinearProbe => HeadKind::Probe(LinearProbe::init(arch, head_seed)),
            TrainStrategy::Adapter | TrainStrategy::AdapterTi => {
                HeadKind::Adapter(SpatialAdapter::init(arch, head_seed))
            }
        };
        Ok(SegModel { backbone, head, strategy, target_class: Some(target_class) })
    }

    /// Fresh model for pretraining (original head, all parameters live).
    pub fn for_pretraining(arch: Arch, seed: u64) -> Self {
        SegModel {
            backbone: Backbone::init(arch, seed),
            head: HeadKind::Original(SegHead::init(arch, seed ^ 0x9E37)),
            strategy: TrainStrategy::Scratch,
            target_class: None,
        }
    }

    pub fn arch(&self) -> Arch {
        self.backbone.arch
    }

    pub fn named_params<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        self.backbone.named_params(out);
        match &self.head {
            HeadKind::Original(h) => h.named_params(out),
            HeadKind::Probe(h) => h.named_params(out),
            HeadKind::Adapter(h) => h.named_params(out),
        }
    }

    pub fn named_params_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.backbone.named_params_mut(out);
        match &mut self.head {
            HeadKind::Original(h) => h.named_params_mut(out),
            HeadKind::Probe(h) => h.named_params_mut(out),
            HeadKind::Adapter(h) => h.named_params_mut(out),
        }
    }

    /// Snapshot of every parameter, keyed by name.
    pub fn param_snapshot(&self) -> std::collections::BTreeMap<String, Tensor> {
        let mut named = Vec::new();
        self.named_params(&mut named);
        named.into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    pub fn bn_state(&self) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        let mut s = self.backbone.bn_state();
        if let HeadKind::Adapter(a) = &self.head {
            s.extend(a.bn_state());
        }
        s
    }

    /// The strategy's trainable/frozen split over all named parameters.
    /// The two sets are disjoint and cover every parameter exactly once.
    pub fn select_trainable(&self) -> Result<ParamPartition> {
        let mut named = Vec::new();
        self.named_params(&mut named);
        let all: BTreeSet<String> = named.iter().map(|(n, _)| n.clone()).collect();
        let head_ok = match self.strategy {
            TrainStrategy::LinearProbe => matches!(self.head, HeadKind::Probe(_)),
            s if s.uses_adapter() => matches!(self.head, HeadKind::Adapter(_)),
            _ => matches!(self.head, HeadKind::Original(_)),
        };
        if !head_ok {
            return Err(Error::Config(format!(
                "strategy {} does not match the assembled head",
                self.strategy
            )));
        }
        let trainable: BTreeSet<String> = match self.strategy {
            TrainStrategy::Generalization => BTreeSet::new(),
            TrainStrategy::Scratch | TrainStrategy::Ft => all.clone(),
            TrainStrategy::FtLast => all
                .iter()
                .filter(|n| {
                    n.starts_with("backbone.dec0.")
                        || n.starts_with("backbone.feat.")
                        || n.starts_with("head.")
                })
                .cloned()
                .collect(),
            TrainStrategy::LinearProbe => {
                all.iter().filter(|n| n.starts_with("probe.")).cloned().collect()
            }
            TrainStrategy::Adapter | TrainStrategy::AdapterTi => {
                all.iter().filter(|n| n.starts_with("adapter.")).cloned().collect()
            }
        };
        let frozen: BTreeSet<String> = all.difference(&trainable).cloned().collect();
        Ok(ParamPartition { trainable, frozen })
    }

    /// Exact count of trainable scalars under the current strategy.
    pub fn count_trainable(&self) -> Result<usize> {
        let part = self.select_trainable()?;
        let mut named = Vec::new();
        self.named_params(&mut named);
        Ok(named
            .iter()
            .filter(|(n, _)| part.trainable.contains(n))
            .map(|(_, t)| t.numel())
            .sum())
    }

    pub fn total_params(&self) -> usize {
        let mut named = Vec::new();
        self.named_params(&mut named);
        named.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Bind all parameters onto a tape under the strategy partition.
    pub fn bind(&self, tape: &mut Tape, part: &Partition) -> (Bound, ModelVars) {
        let mut bound = Bound::default();
        let backbone = self.backbone.bind(tape, &mut bound, part);
        let head = match &self.head {
            HeadKind::Original(h) => HeadVars::Original(h.bind(tape, &mut bound, part)),
            HeadKind::Probe(h) => HeadVars::Probe(h.bind(tape, &mut bound, part)),
            HeadKind::Adapter(h) => HeadVars::Adapter(h.bind(tape, &mut bound, part)),
        };
        (bound, ModelVars { backbone, head })
    }

    /// Single-channel probability map for the target organ.
    pub fn forward_target_probs(
        &mut self,
        tape: &mut Tape,
        vars: &ModelVars,
        patch: Var,
        mode: Mode,
    ) -> Result<Var> {
        let features = self.backbone.forward(tape, &vars.backbone, patch, mode)?;
        self.head_probs_from_features(tape, vars, features, mode)
    }

    /// Head-only path over precomputed features (frozen-backbone training).
    pub fn head_probs_from_features(
        &mut self,
        tape: &mut Tape,
        vars: &ModelVars,
        features: Var,
        mode: Mode,
    ) -> Result<Var> {
        match (&mut self.head, &vars.head) {
            (HeadKind::Original(_), HeadVars::Original(h)) => {
                let class = self.target_class.ok_or_else(|| {
                    Error::Config("original-head prediction needs a target class".into())
                })?;
                let logits = h.forward(tape, features);
                let one = tape.slice_channel(logits, class);
                Ok(tape.sigmoid(one))
            }
            (HeadKind::Probe(_), HeadVars::Probe(h)) => {
                let logits = h.forward(tape, features);
                Ok(tape.sigmoid(logits))
            }
            (HeadKind::Adapter(a), HeadVars::Adapter(v)) => a.forward(tape, v, features, mode),
            _ => Err(Error::Config("bound variables do not match the model head".into())),
        }
    }

    /// All-class probability map through the original head (pretraining).
    pub fn forward_all_probs(
        &mut self,
        tape: &mut Tape,
        vars: &ModelVars,
        patch: Var,
        mode: Mode,
    ) -> Result<Var> {
        let features = self.backbone.forward(tape, &vars.backbone, patch, mode)?;
        match &vars.head {
            HeadVars::Original(h) => {
                let logits = h.forward(tape, features);
                Ok(tape.sigmoid(logits))
            }
            _ => Err(Error::Config("all-class forward requires the original head".into())),
        }
    }
}

/// Trainable/frozen split; disjoint by construction.
#[derive(Debug, Clone)]
pub struct ParamPartition {
    pub trainable: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
}

impl ParamPartition {
    pub fn as_partition(&self) -> Partition {
        Partition { trainable: self.trainable.clone() }
    }
}

#[derive(Debug, Clone)]
pub enum HeadVars {
    Original(ConvVars),
    Probe(ConvVars),
    Adapter(AdapterVars),
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub backbone: super::backbone::BackboneVars,
    pub head: HeadVars,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> Arch {
        Arch::standard(2, 4, 3)
    }

    fn pretrained() -> (Backbone, SegHead) {
        (Backbone::init(arch(), 1), SegHead::init(arch(), 2))
    }

    #[test]
    fn strategy_tags_round_trip() {
        for s in ALL_STRATEGIES {
            assert_eq!(TrainStrategy::parse(s.tag()).unwrap(), s);
        }
        assert!(TrainStrategy::parse("BOGUS").is_err());
    }

    #[test]
    fn generalization_has_zero_trainable() {
        let (b, h) = pretrained();
        let m = SegModel::assemble(b, h, TrainStrategy::Generalization, 0, 3).unwrap();
        assert_eq!(m.count_trainable().unwrap(), 0);
    }

    #[test]
    fn linear_probe_count_is_d_plus_one() {
        let a48 = Arch::standard(4, 48, 9);
        let m = SegModel::assemble(
            Backbone::init(a48, 1),
            SegHead::init(a48, 2),
            TrainStrategy::LinearProbe,
            0,
            3,
        )
        .unwrap();
        assert_eq!(m.count_trainable().unwrap(), 49);
    }

    #[test]
    fn adapter_count_matches_formula() {
        let a48 = Arch::standard(4, 48, 9);
        let m = SegModel::assemble(
            Backbone::init(a48, 1),
            SegHead::init(a48, 2),
            TrainStrategy::Adapter,
            0,
            3,
        )
        .unwrap();
        assert_eq!(m.count_trainable().unwrap(), SpatialAdapter::formula_params(48));
    }

    #[test]
    fn ft_count_is_total_and_dominates_adapter() {
        // the parameter-accounting architecture: D = 48 features with a wide
        // bottleneck so the frozen backbone dwarfs the adapter
        let a = Arch { base_width: 8, bottleneck_width: 840, feature_dim: 48, n_classes: 9 };
        let ft = SegModel::assemble(
            Backbone::init(a, 1),
            SegHead::init(a, 2),
            TrainStrategy::Ft,
            0,
            3,
        )
        .unwrap();
        let ft_count = ft.count_trainable().unwrap();
        assert_eq!(ft_count, ft.total_params());
        // direct summation oracle
        let mut named = Vec::new();
        ft.named_params(&mut named);
        let brute: usize = named.iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(ft_count, brute);
        let adapter_count = SpatialAdapter::formula_params(48);
        assert!(
            ft_count >= 100 * adapter_count,
            "FT {ft_count} vs 100x adapter {adapter_count}"
        );
    }

    #[test]
    fn partition_is_disjoint_and_covers() {
        let (b, h) = pretrained();
        for strategy in ALL_STRATEGIES {
            let m = SegModel::assemble(b.clone(), h.clone(), strategy, 1, 3).unwrap();
            let part = m.select_trainable().unwrap();
            assert!(part.trainable.is_disjoint(&part.frozen), "{strategy}");
            let mut named = Vec::new();
            m.named_params(&mut named);
            let all: BTreeSet<String> = named.iter().map(|(n, _)| n.clone()).collect();
            let union: BTreeSet<String> = part.trainable.union(&part.frozen).cloned().collect();
            assert_eq!(all, union, "{strategy}");
        }
    }

    #[test]
    fn strategy_head_mismatch_is_config_error() {
        let (b, h) = pretrained();
        let mut m = SegModel::assemble(b, h, TrainStrategy::Adapter, 0, 3).unwrap();
        m.strategy = TrainStrategy::LinearProbe; // inconsistent on purpose
        assert!(matches!(m.select_trainable(), Err(Error::Config(_))));
    }

    #[test]
    fn ft_last_trains_only_last_stage_and_head() {
        let (b, h) = pretrained();
        let m = SegModel::assemble(b, h, TrainStrategy::FtLast, 0, 3).unwrap();
        let part = m.select_trainable().unwrap();
        for n in &part.trainable {
            assert!(
                n.starts_with("backbone.dec0.") || n.starts_with("backbone.feat.") || n.starts_with("head."),
                "unexpected trainable {n}"
            );
        }
        assert!(part.frozen.iter().any(|n| n.starts_with("backbone.enc0.")));
    }

    #[test]
    fn target_probs_shapes_per_head() {
        let (b, h) = pretrained();
        for strategy in [TrainStrategy::Ft, TrainStrategy::LinearProbe, TrainStrategy::Adapter] {
            let mut m = SegModel::assemble(b.clone(), h.clone(), strategy, 2, 3).unwrap();
            let part = m.select_trainable().unwrap().as_partition();
            let mut tape = Tape::new();
            let (_, vars) = m.bind(&mut tape, &part);
            let patch = tape.leaf(Tensor::zeros(&[1, 8, 8, 8]), false);
            let probs = m.forward_target_probs(&mut tape, &vars, patch, Mode::Eval).unwrap();
            assert_eq!(tape.value(probs).shape(), &[1, 8, 8, 8], "{strategy}");
        }
    }
}
