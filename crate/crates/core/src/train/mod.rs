//! Losses, batch sampling and the joint optimization of geometry and the
//! ray-bending network.

mod batch;
mod config;
mod eval;
mod losses;
mod model;
mod trainer;

pub use batch::{sample_batch, Patch, TrainBatch};
pub use config::TrainConfig;
pub use eval::{evaluate_split, HeldOutMetrics};
pub use losses::{
    alpha_schedule, loss_eik, loss_pix, loss_rg, loss_rs, loss_sil, silhouette_ce, total_loss, LossComponents,
    LossWeights, COSINE_EPS,
};
pub use model::{shade_learned, Geometry, Model, RayResult, ViewPrediction};
pub use trainer::{train, weighted_total, Evaluation, LossContext, StepReport, TrainSummary, Trainer, LOG_HEADER};
