//! Zero-shot joint pandenoising and pansharpening of hyperspectral images.
//!
//! A noisy low-resolution cube `N` and a high-resolution panchromatic image `P`
//! are fused into a clean high-resolution cube by three small networks trained
//! on the observation alone:
//!
//! * a guided denoising network (GDN) producing the denoised low-resolution cube,
//! * a guided super-resolution network (GSRN) injecting a low-rank detail map,
//! * a PAN reconstruction network (PRN) tying both outputs back to the PAN image.
//!
//! The crate also carries the forward observation model used to simulate
//! `(N, P, Q)` triples, the reference quality metrics, and the detail-map
//! energy-curve analysis.

pub mod autograd;
mod ops;
pub mod cube;
pub mod degrade;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod nets;
pub mod prior;
pub mod train;

pub use cube::{BaseImages, CoeffMatrix, HsiCube, PanImage};
pub use error::{Error, Result};

/// Library version recorded in emitted manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
