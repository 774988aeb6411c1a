//! Black-box parameter extraction for PReLU fully-connected networks.

pub mod critical_search;
pub mod error;
pub mod evaluation;
pub mod hexfloat;
pub mod linalg;
pub mod network;
pub mod oracle;
pub mod orchestrator;
pub mod prefix;
pub mod refinement;
pub mod weight_recovery;
pub mod wiggle_baseline;
pub mod scores_adapter;
pub mod sign_slope;

pub use error::{AttackError, NetworkError, OracleError, Result};
pub use network::{random_network, PReluNetwork, SplitNetwork};
pub use oracle::{Feedback, FeedbackMode, Oracle};
pub use evaluation::{evaluate, EquivalenceReport};
pub use orchestrator::{extract, AttackConfig, Extraction, ExtractionFailure, PhaseRecord, Workflow};
pub use refinement::{RefineConfig, RefinementReport};
pub use critical_search::ProbeConfig;
