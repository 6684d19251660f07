//! Dual-advantage weighted offline goal-conditioned RL on tabular grid worlds.
//!
//! The library is generic over the floating-point type through [`Scalar`];
//! the aliases below fix it to `f64` (or `f32`) for ordinary use.

pub mod cli;
pub mod dataset;
pub mod env;
pub mod error;
pub mod eval;
pub mod partition;
pub mod policy;
pub mod rng;
pub mod scalar;
pub mod table_io;
pub mod train;
pub mod value;
pub mod weighting;

pub use dataset::{generate_behavior_dataset, GenerationConfig, OfflineDataset, RelabeledSample};
pub use env::{Action, Goal, GridWorld, LayoutId, State, StateId, Trajectory, Transition};
pub use error::{DawogError, Result};
pub use partition::{Membership, PartitionConfig, RegionIndex};
pub use policy::{Controller, TabularPolicy};
pub use scalar::Scalar;
pub use train::{train, TrainConfig, TrainOutcome, TrainerVariant, VariantKind};
pub use value::{RegionValueTable, ValueTable};
pub use weighting::WeightConfig;

/// Default scalar.
pub type Real = f64;

pub type ValueTable64 = ValueTable<f64>;
pub type ValueTable32 = ValueTable<f32>;
pub type RegionValueTable64 = RegionValueTable<f64>;
pub type RegionValueTable32 = RegionValueTable<f32>;
pub type TabularPolicy64 = TabularPolicy<f64>;
pub type TabularPolicy32 = TabularPolicy<f32>;
pub type TrainOutcome64 = TrainOutcome<f64>;
