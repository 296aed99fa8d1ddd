//! The book chapters double as doc-tests: every fenced Rust block in
//! `book/src/*.md` compiles and runs under `cargo test --doc`, keeping the
//! guide in sync with the library.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction_chapter {}

#[doc = include_str!("../../../book/src/schedules.md")]
pub mod schedules_chapter {}

#[doc = include_str!("../../../book/src/parameterization.md")]
pub mod parameterization_chapter {}

#[doc = include_str!("../../../book/src/network-and-training.md")]
pub mod network_and_training_chapter {}

#[doc = include_str!("../../../book/src/sampling.md")]
pub mod sampling_chapter {}

#[doc = include_str!("../../../book/src/inversion.md")]
pub mod inversion_chapter {}

#[doc = include_str!("../../../book/src/oracles.md")]
pub mod oracles_chapter {}
