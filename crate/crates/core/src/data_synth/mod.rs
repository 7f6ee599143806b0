//! Synthetic product corpus, vocabulary, and dataset splits.

mod corpus;
pub mod io;
mod split;
pub mod vocab;

pub use corpus::{
    brand_name, category_name, color_name, generate_corpus, generate_with_factors, CorpusSpec,
    Domain, LatentFactors, ProductRecord,
};
pub use split::{fewshot_size, split, split_sizes, subsample_fewshot, Splits, DEFAULT_RATIOS};
pub use vocab::{build_vocab, tokenize, Vocabulary};
