//! Tree-structured implicit neural compression for volumetric data.
//!
//! A volume is split into a complete octree of blocks; every block is fitted
//! by a small sine MLP whose hidden layers are partly shared with spatially
//! close blocks (one hyper layer per octree node). The learned parameters,
//! plus a compact header, are the compressed file.

pub mod cli;
pub mod codec;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod net;
pub mod octree;
pub mod train;
pub mod volume;

pub use codec::{compress, decompress, CompressOptions, CompressReport, CompressedArtifact};
pub use error::{ConfigError, Error, FormatError, Result};
pub use exec::Executor;
pub use metrics::{MetricReport, MetricSpec};
pub use net::TincNet;
pub use octree::{AllocationPolicy, InterLevelRatio, IntraLevel, NodeBudget, TreeConfig};
pub use train::{TrainConfig, TrainReport};
pub use volume::{Dtype, Region, Volume};
