//! Depth-resolved diagnostics over block embeddings.

mod occlusion;
mod probe;
mod recon;
mod retrieval;
mod similarity;

pub use occlusion::{
    keep_locations, occdrop, occlude_and_probe, occlude_clip, KeepSpec, LocationAccuracy,
    OcclusionBlock, OcclusionConfig, OcclusionResult,
};
pub use probe::{cv_probe, linear_probe, ProbeConfig, ProbeFit, ProbeOutcome, ProbeResult, Standardizer};
pub use recon::{recon_mse_profile, ReconConfig};
pub use retrieval::{average_precision, knn_map};
pub use similarity::{cka, cps, cps_clip, pair_cka_dmap, CpsResult, TransitionRow, CPS_LN_EPS};
