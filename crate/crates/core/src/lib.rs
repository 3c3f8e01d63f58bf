pub mod augment;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod nn;
pub mod noise;
pub mod optim;
pub mod plotdata;
pub mod pooling;
pub mod presets;
pub mod rng;
pub mod routing;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

/// The book chapters, compiled and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/autograd.md")]
    struct Autograd;
    #[doc = include_str!("../../../book/src/blocks.md")]
    struct Blocks;
    #[doc = include_str!("../../../book/src/losses.md")]
    struct Losses;
    #[doc = include_str!("../../../book/src/pooling.md")]
    struct Pooling;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
    #[doc = include_str!("../../../book/src/experiments.md")]
    struct Experiments;
}
