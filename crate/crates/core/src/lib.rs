pub mod diagnostics;
pub mod error;
pub mod fisher;
pub mod io;
pub mod metrics;
pub mod model;
pub mod regularize;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

// `cargo test --doc` runs the guide's snippets through these.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/adapters.md")]
    mod adapters {}
    #[doc = include_str!("../../../book/src/fisher.md")]
    mod fisher {}
    #[doc = include_str!("../../../book/src/penalties.md")]
    mod penalties {}
    #[doc = include_str!("../../../book/src/continual-loop.md")]
    mod continual_loop {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/drift.md")]
    mod drift {}
}
