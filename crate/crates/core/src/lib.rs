//! Training-time channel pruning with per-channel switch layers.
//!
//! A [`SwitchLayer`] multiplies each channel of the preceding layer by a
//! learned scale `beta`. An L1 penalty on `beta` drives unneeded channels to
//! zero; a sign-variance screen flags channels whose `beta` keeps flipping
//! sign, and [`gc::collect`] deletes them from the network and the optimizer
//! while training continues. After training, [`fuse_network`] folds every
//! switch into a neighbouring layer and the result is saved as a compact
//! `.smlf` file.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`).

pub mod arch;
pub mod data;
pub mod error;
pub mod fuse;
pub mod gc;
pub mod layers;
pub mod network;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod serde_ext;
pub mod switch;
pub mod tensor;

pub use arch::{ArchSpec, LayerSpec, SwitchInit};
pub use data::{CsvOptions, Dataset, LabelColumn, Splits, Standardizer, SyntheticSpec};
pub use error::{Error, Result};
pub use fuse::{flip_sign, fuse_network, FusedModel};
pub use gc::{apply_removal, collect, plan_removal, RemovalPlan, SizeHistory, SizeRow};
pub use layers::{BatchNorm, Conv2d, Layer, Linear, MaxPool2d, Mode, ParamId, ParamKind};
pub use network::{FoldTarget, Gradients, Network, SwitchSite, Tape};
pub use objective::{cross_entropy, smallify_loss, LossBreakdown, PenaltyConfig};
pub use optim::{AdamState, PlateauSchedule, RemovalSpec, ScheduleConfig};
pub use rng::SeededRng;
pub use scalar::Scalar;
pub use switch::{ScreenerConfig, SwitchLayer};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Network64 = Network<f64>;
pub type Network32 = Network<f32>;
pub type FusedModel64 = FusedModel<f64>;
pub type FusedModel32 = FusedModel<f32>;
pub type AdamState64 = AdamState<f64>;
pub type Dataset64 = Dataset<f64>;
