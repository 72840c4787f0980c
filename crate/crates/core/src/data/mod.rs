//! Synthetic corpus: procedurally rendered scenes, templated text and the
//! on-disk manifest format.

mod corpus;
mod pnm;
mod sample;
mod scene;
pub mod tokenizer;

pub use corpus::{
    build_corpus, generate_samples, read_manifest, split_rng, write_manifest, write_manifest_lines, CorpusSpec,
    Record, MANIFEST, MANIFEST_HEADER,
};
pub use pnm::{load_pnm, quantize, read_pnm, save_pnm, write_pnm};
pub use sample::{
    make_caption_pair, make_instruction, make_interleaved, make_t2i, make_text_only, parse_answer, Category,
    InterleavedKind, Question, Sample, Task, DESCRIBE, SUPERRES_FACTOR, THINK_CLOSE, THINK_OPEN,
};
pub use scene::{
    caption, parse_caption, render, shape_mask, GridPoint, LesionLevel, PseudoModality, SceneParams, ShapeKind,
    CANVAS,
};
