//! Sparse 3D voxel convolution engine and a desk-scale LiDAR detection
//! pipeline built on top of it.
//!
//! The crate is `no_std` and only needs `alloc`. Everything that touches the
//! file system, the clock or the command line lives in the `voxelflow`
//! companion crate.
//!
//! Layout, bottom up:
//!
//! * [`sparse`] and [`rulebook`]: the [`SparseTensor`] carrier, coordinate
//!   indexing and the (input, output, offset) pair lists that drive every
//!   convolution.
//! * [`conv`]: submanifold / strided sparse convolution, its backward pass and
//!   FLOPs accounting.
//! * [`autodiff`]: a small reverse-mode tape over the engine's primitives, a
//!   central-difference checker and Adam.
//! * [`dffm`]: kernel decoupling with per-site attention fusion of the
//!   intermediate features.
//! * [`fsm`]: per-voxel importance prediction, top-ratio selection and gating.
//! * [`detector`], [`eval`]: a BEV head, rotated NMS, rotated IoU and AP.
//! * [`voxel`], [`scene`]: cropping, voxelization, augmentation and synthetic
//!   scenes.
//! * [`model`]: the four-stage backbone wiring everything together.

#![cfg_attr(not(test), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod autodiff;
pub mod conv;
pub mod detector;
pub mod dffm;
pub mod error;
pub mod eval;
pub mod fsm;
pub mod geometry;
pub mod math;
pub mod model;
pub mod rulebook;
pub mod scene;
pub mod sparse;
pub mod voxel;

pub use error::{Error, Result};
pub use geometry::Box3D;
pub use rulebook::{ConvMode, Kernel, Rulebook};
pub use sparse::{Coord, SparseTensor};
