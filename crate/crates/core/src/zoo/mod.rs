//! Model zoo: the three architectures, forward/backward with feature taps,
//! and checkpoint files.

pub mod checkpoint;
pub mod model;
pub mod spec;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use model::{build_model, Backward, ForwardTrace, Model, Params, TapGradient, Upstream};
pub use spec::{Architecture, LayerSpec, ModelSpec};
