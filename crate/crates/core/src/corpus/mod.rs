//! Dataset model: vocabularies, caption and QA records with JSONL ingestion,
//! and the synthetic shape-world generator.

mod records;
mod synth;
mod vocab;

use std::path::PathBuf;

pub use records::{
    load_captions_jsonl, load_qa_jsonl, resolve_feature_path, write_jsonl, CaptionRecord, QARecord,
    ANNOTATORS,
};
pub use synth::{
    classify_question, clean_object_feature, derive_seed, gen_scene, scene_to_captions,
    scene_to_detections, scene_to_grid_features, scene_to_qa, Color, ObjectSize, QaItem,
    QuestionType, SceneObject, Shape, SyntheticScene, CANVAS, DEFAULT_FEATURE_DIM, GRID_SIDE,
    NUMBER_WORDS,
};
pub use vocab::{build_vocab, decode, encode, tokenize, Vocabulary, BOS, EOS, PAD, UNK};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: line {line}: {detail}", path = .path.display())]
    Line { path: PathBuf, line: usize, detail: String },
    #[error("schema violation: {detail}")]
    Schema { detail: String },
    #[error("token id {id} is out of vocabulary range")]
    UnknownTokenId { id: u32 },
    #[error("{path}: {source}", path = .path.display())]
    Io { path: PathBuf, source: std::io::Error },
}
