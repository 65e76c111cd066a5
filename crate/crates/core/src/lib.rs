//! Numerical laboratory for the n-harmonic map heat flow.
//!
//! The crate is organised by subsystem:
//!
//! * [`manifold`]: target geometry (round sphere, flat torus and its universal cover).
//! * [`fields`]: discrete maps and radial profiles, gradients and quadrature.
//! * [`energy_analysis`]: tension fields, dissipation, Pohozaev balance, dyadic neck quantities.
//! * [`equivariant_flow`]: the corotational flow simulator and blowup detection.
//! * [`bubble_neck`]: rescaling, bubble extraction and neck diagnostics.
//! * [`construction`]: the glued initial map into a torus cover and its width.
//! * [`io`]: CSV/JSON serialization helpers shared by the CLI.

// `!(x > 0.0)` is used on purpose: it rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bubble_neck;
pub mod construction;
pub mod energy_analysis;
pub mod equivariant_flow;
pub mod error;
pub mod fields;
pub mod io;
pub mod manifold;

pub use error::{Error, Result};

/// Crate version, stamped into experiment manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
