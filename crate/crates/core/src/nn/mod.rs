//! Parameter storage and network building blocks.

mod attention;
mod blocks;
mod gru;
mod layers;
mod params;

pub use attention::PixelGroupAttention;
pub use blocks::{DwsBlock, NfBlock, NF_ALPHA};
pub use gru::GruCell;
pub use layers::{standardize_kernel, standardize_weights, Conv, Linear, WsConv, WS_EPS};
pub use params::{Bound, Param, ParamId, ParamKind, ParamStore};
