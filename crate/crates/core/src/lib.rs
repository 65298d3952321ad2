pub mod bench;
pub mod error;
pub mod filter;
pub mod metrics;
pub mod model;
pub mod models;
pub mod oracles;
pub mod resampling;
pub mod rng;
pub mod tree;
pub mod weights;

pub use error::{Error, Result};
pub use filter::{dac_step, run_filter, DacConfig, FilterState, MergePath, TemperingConfig};
pub use model::{AuxiliaryFamily, MergeSplit, NodeCloud, Past, PastSupport, StateSpaceModel};
pub use models::lgssm::{build_lgssm, LgssmModel, LgssmParams};
pub use models::spatial::{build_spatial, SpatialModel, SpatialParams};
pub use resampling::MergeStrategy;
pub use rng::{RngStream, StreamRng};
pub use tree::{DecompositionTree, NodeId};
