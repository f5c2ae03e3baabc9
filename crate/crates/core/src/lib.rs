#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod gas;
pub mod linalg;
pub mod materials;
pub mod mpm;
pub mod objectives;
pub mod optimize;
pub mod scene;
pub mod sdf;
pub mod svd;

pub use error::{CheckpointError, LossError, SceneError, SimError};
pub use linalg::{Matrix, Vector};
