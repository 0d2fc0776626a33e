//! Evaluation protocol: the frozen oracle, concept metrics, masked fidelity,
//! the perceptual-distance proxy, and the downstream augmentation
//! experiment.

mod concept;
mod downstream;
mod metrics;
mod oracle;
mod quality;
mod report;
mod segment;

pub use concept::{classified_fraction, confidence_shift, ddr, flip_rate, lesion_presence_rate};
pub use downstream::{
    downstream_experiment, registry, AugmentationContext, AugmentationSource, DownstreamResult,
};
pub use metrics::{effective_metrics, f1_score, mean_sd, roc_auc, EffectiveMetrics};
pub use oracle::{feature_distance, OracleClassifier, OracleManifest, OracleSettings};
pub use quality::{invert_mask, masked_psnr, masked_ssim};
pub use report::{fingerprint, MetricsReport};
pub use segment::estimate_lesion_mask;
