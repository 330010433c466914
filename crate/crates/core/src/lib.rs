//! Ultrafast diffraction simulation and quantum state tomography of molecular
//! rotational and vibrational wavepackets.

pub mod angular;
pub mod config;
pub mod diffraction;
pub mod error;
pub mod inversion;
pub mod io;
pub mod iterative;
pub mod mblock;
pub mod pipeline;
pub mod rotor;
pub mod vibrational;

pub use error::{Error, Result};
