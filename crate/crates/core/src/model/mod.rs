//! Layers, the assembled network, parameter storage and weight files.

pub mod builder;
pub mod config;
pub mod layers;
pub mod net;
pub mod params;
pub mod weights;

pub use builder::{Builder, GraphBuilder, Mode, BN_EPS, BN_MOMENTUM};
pub use config::{BlockStyle, ModelConfig, Preset};
pub use layers::{BatchNormLayer, Cbam, Conv, ConvBn, DcpBlock, DecoderBlock, LevelBlock, ResidualBlock, DILATION_RATES};
pub use net::{DilatedSegNet, NetOutput, Prediction};
pub use params::{Param, ParamId, ParamKind, ParamStore};
pub use weights::{load_weights, save_weights};
