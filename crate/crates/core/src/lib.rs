//! Fourier-attention neural operator for time-dependent PDEs, trained by
//! auto-regressive denoising over several heterogeneous datasets.

pub mod data;
pub mod io;
pub mod model;
pub mod pde;
pub mod tensor;
pub mod train;
pub mod verify;
