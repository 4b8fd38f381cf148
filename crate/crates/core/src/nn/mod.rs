//! Differentiable primitives: convolution, the layer kinds, and the two
//! loss primitives.

pub mod conv;
pub mod layer;
pub mod loss;

pub use conv::{conv2d_backward, conv2d_backward_input, conv2d_forward, ConvGeometry, ConvGrads};
pub use layer::{layer_backward, layer_forward, LayerCache, LayerGrads, LayerKind, Op};
pub use loss::{cosine_similarity, softmax_cross_entropy, CosineSimilarity};
