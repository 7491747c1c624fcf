//! Compute core of a two-stage, resolution-independent image inpainting engine.
//!
//! Stage one fills the hole coarsely at a fixed working resolution
//! ([`coarse`]); stage two refines texture at native resolution with a
//! fully-convolutional U-Net ([`refiner`]) fed a 20-channel [`shift`] stack:
//! the coarse result plus four translated copies whose masks mark the
//! exposed bands invalid.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. File formats, the training driver, the CLI and the HTTP service
//! live in the companion `hiresfill` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_op_in_unsafe_fn)]

extern crate alloc;

pub mod coarse;
pub mod error;
pub mod features;
pub mod image;
pub mod losses;
pub mod maskgen;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod ranking;
pub mod refiner;
pub mod shift;
pub mod tensor;
pub mod train;

pub use crate::coarse::{coarse_fill, coarse_fill_with, pyramid_fill, CoarseConfig, CoarseResult};
pub use crate::error::{Error, Result};
pub use crate::image::{composite, resize_nearest, Image, Mask};
pub use crate::losses::{LossReport, LossWeights};
pub use crate::refiner::{Mode, RefinerConfig, RefinerModel};
pub use crate::shift::{assemble_stack, make_shift, PatchSpec, ShiftStack};
pub use crate::tensor::{Real, Tensor};
