//! Multi-biometric de-duplication engine.
//!
//! - [`template`]: the 3,456-d concatenated template and its binary record.
//! - [`fusion`]: weighted per-segment score fusion and decisions.
//! - [`index`]: exact sharded 1:N search and the gallery file format.
//! - [`pipeline`]: pluggable enrollment stages with stub implementations.
//! - [`synth`]: calibrated synthetic identities, galleries and probe sets.
//! - [`eval`]: FPIR/FNIR, DET curves, combination studies and reports.

pub mod eval;
pub mod fusion;
pub mod index;
pub mod pipeline;
pub mod synth;
pub mod template;

pub use fusion::{default_weights, Decision, DecisionThreshold, FusedScore, FusionWeights};
pub use index::{CandidateList, Gallery, SearchParams};
pub use template::{MultiBiometricTemplate, PresenceMask, QualityVector, SegmentKind};
