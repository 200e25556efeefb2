//! Training, evaluation and the experiment drivers built on them.

mod ablate;
mod checkpoint;
mod config;
mod eval;
mod gradcheck;
mod heatmap;
mod optim;
mod train;

pub use ablate::{ablate, format_table, variant_dir, AblationRow};
pub use checkpoint::{from_checkpoint, load_model, save_model, to_checkpoint, CheckpointMeta, CHECKPOINT_KIND};
pub use config::{quantized_background, AdamConfig, LrRange, Phase, TrainConfig};
pub use eval::{evaluate, evaluate_frames, feature_centroids, psnr, render_frames, score_predictions, segment, split_frames, MetricReport, MISSING_FEATURE_PX};
pub use gradcheck::{run_gradchecks, GradCheckEntry, GRADCHECK_RTOL, MODULES as GRADCHECK_MODULES};
pub use heatmap::{emit_heatmap, HeatStats, Heatmaps};
pub use optim::{Adam, Moments};
pub use train::{finetune_from, reference_frame, training_frames, BatchInfo, EvalPoint, Trainer};
