//! Dynamic visual-context trees.
//!
//! The crate is organised bottom-up:
//!
//! - [`ndcore`]: dense tensors, a reverse-mode tape, layer primitives and optimizers.
//! - [`scoring`]: the pairwise validity matrix over object proposals.
//! - [`treebuild`]: root selection, Prim construction (greedy or sampled),
//!   left-child/right-sibling binarization and the ablation structures.
//! - [`encoder`]: bidirectional TreeLSTM context encoding.
//! - [`sgg`]: scene-graph head and Recall@K / mean Recall@K.
//! - [`vqa`]: question answering head with dual attention and a question gate.
//! - [`learn`]: supervised steps, REINFORCE with a self-critic baseline and the
//!   alternating schedule.

pub mod encoder;
pub mod error;
pub mod learn;
pub mod ndcore;
pub mod scoring;
pub mod sgg;
pub mod treebuild;
pub mod vqa;

pub use error::{Error, Result};
