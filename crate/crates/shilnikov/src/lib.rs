// Negated float guards intentionally send NaN down the failure path, and
// index loops mirror the matrix algebra they implement.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]
#![allow(clippy::too_many_arguments)]

//! Numerical laboratory for chaos near a Shilnikov homoclinic loop.
//!
//! The crate builds the full chain from a hyperbolic equilibrium to verified
//! symbolic dynamics: scaled flows and their closeness to the linearization
//! ([`flow`]), continuous angle lifts along projected flowlines ([`angles`]),
//! homoclinic crossing bookkeeping ([`homoclinic`]), section charts with
//! inner/exterior/return maps ([`sections`]), the parameter ledger and
//! nested-interval shadowing engine ([`chaos`]), and the straightening
//! pipeline that turns a raw vector field into a flow with flat invariant
//! manifolds ([`flatten`]).

pub mod angles;
pub mod chaos;
pub mod config;
pub mod error;
pub mod flatten;
pub mod flow;
pub mod geometry;
pub mod homoclinic;
pub mod report;
pub mod roots;
pub mod sections;

pub use error::{Error, Result};
pub use geometry::{Mat3, StabilityParams, Vec3};
