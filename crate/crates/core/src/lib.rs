//! Melt-pool characterization pipeline for etched optical cross-sections.
//!
//! The crate is organized bottom-up:
//!
//! * [`imaging`] – raw images, tiling, downscaling, model value range and
//!   class-mask overlays.
//! * [`seed`] – classical bootstrap segmentation: smoothing, mean threshold,
//!   contour tracing and expert correction points.
//! * [`nn`] – the conditional image-to-image translation network (U-Net
//!   generator, patch discriminator, adversarial + L1 objective) with
//!   hand-written gradients and a binary checkpoint format.
//! * [`train`] – Adam optimization loop and loss history.
//! * [`eval`] – windowed SSIM, difference images and checkpoint ranking.
//! * [`geometry`] – pool region extraction, half-ellipse fitting, apparent
//!   area / aspect ratio and skew-normal statistics.
//! * [`synth`] – procedural scenes with exact ground truth.
//! * [`workflow`] – the persistent dataset manifest and the iterative
//!   predict / correct / retrain loop.

pub mod error;
pub mod eval;
pub mod geometry;
pub mod imaging;
pub mod labeling;
pub mod nn;
pub mod seed;
pub mod synth;
pub mod train;
pub mod workflow;

pub use error::{Error, Result};
pub use eval::{rank_checkpoints, ssim_index, SsimReport};
pub use geometry::{
    extract_pool_regions, fit_half_ellipse, fit_skew_normal, pool_metrics, summarize_distributions,
    DistributionSummary, HalfEllipse, MeltPool, SkewNormalFit,
};
pub use imaging::{
    AnnotationMask, ClassPalette, ImagePair, MaskClass, ModelImage, RawImage, Tile,
};
pub use nn::{
    DiscriminatorConfig, GeneratorConfig, LossWeights, Mode, NetworkCheckpoint, NetworkParameters,
    PatchProbabilityMap,
};
pub use seed::{BinaryMask, ContourSet, CorrectionKind, CorrectionPoint};
pub use train::{LossHistory, TrainConfig, Trainer};
