//! Kolmogorov-Arnold layers with B-spline edge activations and the Tok-KAN
//! token block.

mod layer;
mod spline;
mod tokkan;

pub use layer::{default_grid, kan_layer_forward, kan_layer_op, kan_stack_forward, KanLayer, KanLayerParams};
pub use spline::{bspline_basis, KnotGrid, SplineEdge};
pub use tokkan::{detokenize, matched_mlp_hidden, timestep_embedding, tokenize, Mixer, TokKanBlock, TIME_EMBED_DIM};
