//! The chapters of the guide in `book/`, one module each, so that
//! `cargo test` runs their code blocks.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/sparse-storage.md")]
pub mod sparse_storage {}
#[doc = include_str!("../../../book/src/networks.md")]
pub mod networks {}
#[doc = include_str!("../../../book/src/cost-model.md")]
pub mod cost_model {}
#[doc = include_str!("../../../book/src/reconfiguration.md")]
pub mod reconfiguration {}
#[doc = include_str!("../../../book/src/federated-rounds.md")]
pub mod federated_rounds {}
#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
