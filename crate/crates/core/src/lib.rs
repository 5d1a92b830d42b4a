//! Transducers with pronunciation-aware embeddings.
//!
//! - [`lexicon`]: pronunciation dictionary ingestion and W/P/T/C/V features.
//! - [`embedding`]: per-feature embedding tables composed by summation.
//! - [`transducer`]: encoder/decoder/joiner network, lattice loss, greedy decoding.
//! - [`training`]: synthetic homophone-rich data, Adam training, checkpoint averaging.
//! - [`analysis`]: edit alignment, CER, conditional error rates and error clusters.

pub mod analysis;
pub mod embedding;
pub mod lexicon;
pub mod training;
pub mod transducer;

pub use embedding::{FeatureConfig, FeatureSet};
pub use lexicon::{ConsonantInventory, Feature, Lexicon};
pub use transducer::{AcousticSequence, ModelDims, Transducer};
