//! Benchmarks live in `benches/`. Shared fixtures are here.

use okaf::data::{generate_samples, CorpusSpec, Sample, Task};
use okaf::model::{ModelConfig, UnifiedModel};

/// The default desk-scale model.
pub fn model() -> UnifiedModel {
    UnifiedModel::new(ModelConfig::default()).expect("default config is valid")
}

/// First sample of `task` in a small generated split.
pub fn sample_of(task: Task) -> Sample {
    generate_samples(&CorpusSpec::default().scaled(0.1), 0, "bench")
        .expect("default corpus generates")
        .into_iter()
        .find(|s| s.task == task)
        .expect("task present in the corpus")
}
