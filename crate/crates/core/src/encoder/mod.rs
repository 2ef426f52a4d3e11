//! Layer stacks from a toy transformer or from precomputed features.

mod frozen;
mod stack;
mod tokenizer;
mod transformer;

pub use frozen::{FrozenFeatures, FrozenSource};
pub use stack::{LayerStack, StackBatch};
pub use tokenizer::{Tokenizer, TokenizerMode, CLS_ID, PAD_ID, UNK_ID};
pub use transformer::{EncoderConfig, PREFIX};
