//! Candle building blocks shared by the translator and the segmenter.

pub mod layers;
pub mod lgamma;
pub mod segnet;
pub mod unet;

pub use layers::{Conv2d, GroupNorm, Init, Linear, ParamStore, ResBlock};
pub use lgamma::lgamma;
