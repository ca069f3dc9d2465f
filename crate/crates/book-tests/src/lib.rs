//! The guide's chapters as doc-test modules, so every snippet in `book/`
//! compiles and runs under `cargo test`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/terms.md")]
pub mod terms {}
#[doc = include_str!("../../../book/src/protocols.md")]
pub mod protocols {}
#[doc = include_str!("../../../book/src/strands.md")]
pub mod strands {}
#[doc = include_str!("../../../book/src/coverage.md")]
pub mod coverage {}
#[doc = include_str!("../../../book/src/confusions.md")]
pub mod confusions {}
#[doc = include_str!("../../../book/src/repair.md")]
pub mod repair {}
#[doc = include_str!("../../../book/src/verifier.md")]
pub mod verifier {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
