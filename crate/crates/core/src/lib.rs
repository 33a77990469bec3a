//! Compression of federated model updates with variable-length codes.
//!
//! The top-k largest-magnitude coordinates of an update are split across a
//! fixed number of equally sized packets. Packets that carry the largest
//! coordinates hold fewer of them and spend more bits per value. The split
//! is chosen by minimizing an analytic bound on the relative compression
//! error, derived from a power-law model of the ranked magnitudes.
//!
//! Modules, bottom-up:
//!
//! * [`update`] ranks update vectors and fits the power-law decay.
//! * [`quantizer`] holds the unbiased PQ / QSGD quantizers and their error models.
//! * [`optimizer`] computes the error bound and solves for `k` and the packet split.
//! * [`packet`] is the bit-exact wire format.
//! * [`pipeline`] ties sparsification, quantization and scaling together.
//! * [`sim`] is a deterministic FedAvg simulator with pluggable compressors.

pub mod cli;
pub mod error;
pub mod optimizer;
pub mod packet;
pub mod pipeline;
pub mod quantizer;
pub mod rng;
pub mod sim;
pub mod update;

pub use error::{Error, Result};
pub use optimizer::{BudgetConfig, PartitionPlan, ScaleState};
pub use packet::{Packet, PacketEntry};
pub use pipeline::{CompressedRound, CompressionConfig};
pub use quantizer::{CentroidMeta, QuantizedBlock, QuantizerKind};
pub use update::{PowerLawFit, RankedUpdates, UpdateVector};
