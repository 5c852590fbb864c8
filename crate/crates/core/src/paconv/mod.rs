//! The position-adaptive convolution operator.
//!
//! A layer owns a [`WeightBank`] of `M` matrices and a [`ScoreNet`]. For each
//! center `i` and neighbor `j` ScoreNet maps the pair's relation vector to `M`
//! normalized scores, the kernel is the score-weighted sum of bank matrices,
//! and the transformed neighbor features are reduced over the neighborhood.
//!
//! Two forward implementations compute the same function:
//! [`ExecPath::Naive`] builds every `C_in × C_out` kernel, while
//! [`ExecPath::Fused`] transforms each point by each bank matrix once and mixes
//! the gathered results by score, so no per-pair kernel ever exists.

mod bank;
mod layer;
mod scorenet;
pub mod serial;

pub use bank::WeightBank;
pub use layer::{aggregate, AggMode, ExecPath, ForwardCache, LayerConfig, PAConvLayer};
pub use scorenet::{
    normalize_row, normalize_row_backward, normalize_scores, Affine, NormMode, ScoreNet, ScoreOutput, ScoreTensor,
};
