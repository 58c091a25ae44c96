//! # ottv-core
//!
//! Compresses the visual tokens of a video down to a target retention ratio.
//!
//! The work happens in two stages. Each frame is first reduced to `K`
//! representative tokens, and every kept token receives a transport mass
//! that encodes how replaceable it is. Adjacent frame pairs are then matched
//! by entropic optimal transport: the coupling ranks merge/prune candidates,
//! and the total transport cost of each pair decides how much of the global
//! temporal budget that pair receives. Matches from all pairs are resolved
//! together with a union-find pass.
//!
//! | Module | Role |
//! |--------|------|
//! | [`container`] | `TokenVideo`, the `OTTV` file format, synthetic fixtures |
//! | [`spatial`] | per-frame selection and mass assignment |
//! | [`transport`] | cost matrix, log-domain Sinkhorn, transport difficulty |
//! | [`budget`] | difficulty-driven integer budgets under a per-pair cap |
//! | [`executor`] | match selection and union-find resolution |
//! | [`oracle`] | exact OT and exhaustive selection, used for verification |
//! | [`pipeline`] | configuration, staged execution, run reports |

pub mod budget;
pub mod container;
pub mod error;
pub mod executor;
pub mod math;
pub mod oracle;
pub mod pipeline;
pub mod spatial;
pub mod transport;

pub use error::{Error, Result};
pub use pipeline::{run, PipelineConfig, RunReport};
