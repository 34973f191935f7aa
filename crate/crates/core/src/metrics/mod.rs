//! Caption metrics written from scratch: CIDEr-D, BLEU-4, the scorer
//! interface with its deterministic stub, and corpus evaluation.

mod bleu;
mod cider;
mod evaluate;
mod scorer;
mod tokenize;

pub use bleu::{bleu4, bleu4_with, BleuOptions, BleuStats};
pub use cider::{
    cider_d, cider_with_variant, ngram_counts, CiderResult, CiderScorer, CiderVariant,
    DEFAULT_SIGMA, MAX_N,
};
pub use evaluate::{evaluate, EvaluationReport, SampleScore};
pub use scorer::{
    scorer_by_name, stub_polos_score, unigram_f1, ImageAttributes, ImageSide, Scorer,
    StubPolosScorer, STUB_SCORER_NAME,
};
pub use tokenize::{render_tokens, tokenize_for_metrics, PUNCTUATION};
