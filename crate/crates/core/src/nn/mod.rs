//! Parameter storage and the network building blocks.

pub mod checkpoint;
pub mod encoder;
pub mod layers;
pub mod params;
pub mod projector;

pub use encoder::{BlockPass, BlockSpec, Encoder, EncoderSpec, ForwardPlan};
pub use layers::{BatchNorm, BnMode, Conv2d, Linear};
pub use params::{BufferId, ParamId, ParamKind, ParamStore, Session};
pub use projector::{Projector, ProjectorSpec};
