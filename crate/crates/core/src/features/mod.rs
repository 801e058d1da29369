//! Feature columns: question scores, expert rules and n-gram tf-idf.

pub mod bong;
pub mod expert;
pub mod matrix;
pub mod nllf;

pub use bong::{BongParams, BongVocabulary};
pub use expert::{ExpertBank, ExpertRule};
pub use matrix::{assemble, FeatureDescriptor, FeatureKind, FeatureMatrix};
pub use nllf::{build_nllf, NllfCache, NllfStats, PairScorer};
