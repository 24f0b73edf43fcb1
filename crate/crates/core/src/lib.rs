//! Neural discriminant analysis on a small self-contained differentiable
//! core: LDA-style losses, a paired training loop, semi-supervised
//! ensembles, OOD metrics and scatter-matrix diagnostics.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod discriminant;
pub mod error;
pub mod losses;
pub mod model;
pub mod ood;
pub mod settings;
pub mod ssl;
pub mod train;

pub use error::{NdaError, Result};
