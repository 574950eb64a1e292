//! Thermal tomography by differentiable heat diffusion.
//!
//! A coordinate network parameterizes the thermal diffusivity of a slab; an
//! implicit finite-difference solver maps it to surface temperature movies,
//! and adjoint-state gradients drive the network to fit observed frames.

pub mod adjoint;
pub mod datagen;
pub mod error;
pub mod grid;
pub mod inversion;
pub mod io;
pub mod memtrack;
pub mod metrics;
pub mod neural_field;
pub mod solver;
pub mod validation;

pub use error::{Error, Result};
pub use grid::{build_face_conductances, FaceConductances, GridSpec, MeanMode, ScalarField3D, SurfaceFrame};
