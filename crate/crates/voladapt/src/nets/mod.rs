//! Networks: backbone, heads, spatial adapter, strategy selection, and
//! checkpointing.

pub mod backbone;
pub mod checkpoint;
pub mod heads;
pub mod layers;
pub mod model;

pub use backbone::{Arch, Backbone, LEVELS, PATCH_DIVISOR};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, PreprocessInfo};
pub use heads::{LinearProbe, SegHead, SpatialAdapter};
pub use layers::{Mode, Partition};
pub use model::{HeadKind, ParamPartition, SegModel, TrainStrategy, ALL_STRATEGIES};
