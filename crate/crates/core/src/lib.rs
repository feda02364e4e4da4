//! A small vision-language model runtime built around image-token
//! compression: a patch encoder, a compressing projector and a causal
//! decoder with a KV cache, together with staged training, preference
//! optimization on minimal-edit pairs, cost estimates and a latency
//! benchmark harness.

pub mod bench;
pub mod config;
pub mod costmodel;
pub mod error;
pub mod io;
pub mod lm;
pub mod model;
pub mod projector;
pub mod tensor;
pub mod training;
pub mod vision;
pub mod weights;

pub use config::{CompressionKind, CompressionStrategy, LmConfig, ModelConfig, VisionConfig};
pub use error::{Error, Result};
pub use model::{GenerationParams, GenerationResult, Model};
pub use tensor::{Graph, Real, Tensor, Var};
pub use vision::Image;
pub use weights::{Component, Weights};

// The guide's code listings compile and run as doctests.
#[cfg(doctest)]
mod book {
    macro_rules! chapters {
        ($($name:ident => $file:literal),* $(,)?) => {
            $(
                #[doc = include_str!(concat!("../../../book/src/", $file))]
                mod $name {}
            )*
        };
    }
    chapters! {
        introduction => "introduction.md",
        tensors => "tensors.md",
        vision => "vision.md",
        projector => "projector.md",
        decoder => "decoder.md",
        training => "training.md",
        preferences => "preferences.md",
        sweep => "sweep.md",
        cost => "cost.md",
        bench => "bench.md",
        checkpoints => "checkpoints.md",
        cli => "cli.md",
        verification => "verification.md",
    }
}
