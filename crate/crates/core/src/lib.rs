//! Budgeted surprise-guided navigation over precomputed whole-slide tile features.
//!
//! The engine runs a scan / search / readout routine:
//!
//! 1. [`scan`]: an online reconstruction [`memory`] streams the low-magnification
//!    tiles and scores each by its pre-update gradient norm; thresholding and
//!    distance-based NMS turn that surprise field into an ROI pool.
//! 2. [`search`]: question relevance reranks only within the pool, fused with
//!    surprise after pool-relative min-max normalization.
//! 3. [`readout`]: fresh per-ROI memories pick high-magnification evidence under
//!    per-ROI and global caps, and an adjudication packet is assembled.
//!
//! [`pipeline`] wires the stages together; [`harness`] generates synthetic
//! slides with planted anomalies and runs the policy ablations.

pub mod archive;
pub mod config;
pub mod error;
pub mod format;
pub mod harness;
pub mod memory;
pub mod pipeline;
pub mod readout;
pub mod rng;
pub mod router;
pub mod scan;
pub mod search;
pub mod types;

pub use config::EngineConfig;
pub use error::{NavError, Result};
pub use memory::{init_memory, MemoryState, StepAction, SummaryStats, SurpriseResult};
pub use rng::DeterministicRng;
pub use types::{validate_stream, Category, FeatureStream, Level, QuestionSpec, TileRecord, Violation};
