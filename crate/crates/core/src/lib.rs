//! Perturbed homogenized coefficients of random two-phase media.
//!
//! Spherical inclusions are placed by a stationary point process on a periodic
//! box; each inclusion is switched from the reference phase `alpha` to the
//! perturbed phase `beta` by an independent Bernoulli mark.  The crate solves
//! the massive corrector equation `phi/T - div A (grad phi + xi) = 0` on a
//! cell-centred grid and evaluates the derivatives of `p -> xi . A_T^(p) xi`
//! by cluster-expansion formulas, together with the Monte-Carlo probes used to
//! check them.
//!
//! Module map:
//!
//! * [`process`]: point samplers, marks, hardcore thinning.
//! * [`media`]: rasterized indicator and coefficient fields, face-level
//!   perturbation stencils.
//! * [`solver`]: matrix-free conjugate gradients, corrector families.
//! * [`setcalc`]: subset algebra and exhaustive combinatorial oracles.
//! * [`cluster`]: derivative formulas, remainders, scaling and rate probes.
//! * [`closedform`]: Clausius-Mossotti constants and the single-inclusion field.
//! * [`experiment`]: JSON-configured experiment runner behind the CLI.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod closedform;
pub mod cluster;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod media;
pub mod process;
pub mod setcalc;
pub mod solver;
pub mod stats;

pub use error::{Error, Result};
