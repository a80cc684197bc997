//! Layer library: parameters, execution context, layers and attention.

pub mod attention;
pub mod ctx;
pub mod layers;
pub mod params;

pub use attention::{window_merge, window_partition, MultiHeadAttention, HEAD_DIM};
pub use ctx::{Ctx, Mode, TraceEvent};
pub use layers::{BatchNorm, Conv2d, Dense, DepthwiseConv2d, Hw, LayerNorm, SqueezeExcite};
pub use params::{path_order, ParamBuilder, ParamId, ParamSpec, ParamStore, Role};
