//! Prompt decomposition and text feature encoding.

mod decompose;
mod encoder;

pub use decompose::{
    decompose_by_rules, decompose_prompt, singularize, DecompositionCache, DecompositionCase,
    PromptRecord, PromptSource,
};
pub use encoder::{
    sentence_feature, tokenize, FrozenEncoder, HashEmbedder, SentenceProjection, TextEncoder,
};
