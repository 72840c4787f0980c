//! Curriculum training: stage recipes, mixture sampling, AdamW, EMA and the
//! stage loop.

mod optim;
mod stage;
mod trainer;

pub use optim::{clip_grad_norm, AdamW, EmaShadow};
pub use stage::{default_stage, normalize_mixing, sample_mixture, FreezeFlags, StageConfig};
pub use trainer::{
    apply_freeze, checkpoint_path, save_stage, example_losses, pretrain_vae, run_curriculum, text_layout, trace_path,
    train_stage, window_mean, write_trace, CurriculumConfig, CurriculumOutcome, Datasets, ExampleLosses,
    StageOutcome, TraceRow, VaeConfig, TRACE_HEADER,
};
