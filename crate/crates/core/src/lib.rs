//! Volumetric segmentation toolkit.
//!
//! The crate covers the whole patch-based 3D segmentation pipeline:
//! NIfTI-1 I/O ([`nifti`]), orientation canonicalisation ([`geometry`]),
//! intensity normalisation ([`normalize`]), class-balanced patch sampling
//! and tiled inference ([`patching`]), overlap coefficients and soft losses
//! ([`losses`]), a small reverse-mode autodiff engine ([`autograd`]) with 3D
//! convolutions ([`conv`]), a VNet ([`vnet`]) with a binary checkpoint
//! format ([`checkpoint`]), a deterministic trainer ([`trainer`]) and
//! synthetic phantoms ([`phantom`]).

pub mod autograd;
pub mod checkpoint;
pub mod conv;
pub mod geometry;
pub mod losses;
pub mod nifti;
pub mod normalize;
pub mod patching;
pub mod phantom;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod vnet;
pub mod volume;

pub use autograd::{Tape, Var};
pub use geometry::{orientation_of, reorient, OrientationCode};
pub use rng::RngStream;
pub use tensor::{Tensor, TensorError};
pub use vnet::{Model, VNetConfig};
pub use volume::Volume;
