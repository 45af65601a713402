//! Three-stage optimization, losses, metrics and gradient checks.

pub mod gradcheck;
pub mod losses;
pub mod params;
pub mod pipeline;
pub mod temporal;

pub use gradcheck::{gradcheck, GradcheckReport};
pub use losses::{image_loss, loss_mse, loss_ssim, metric_normal_degree, metric_psnr, metric_scale_aligned, ssim, LossValue};
pub use params::{Grads, ModelState, ParamId, ParamSet};
pub use pipeline::{
    build_geometry, render_view, stage1, stage2, stage3, DeshadeMode, EngineConfig, EpochLog, LossWeights, Observation, RegularizerMode, Scene,
};
pub use temporal::temporal_consistency;
