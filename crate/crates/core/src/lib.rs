//! Patch-averaging binary image classifier.
//!
//! A shared convolutional subnet scores every patch of an image; the image
//! probability is the mean patch score. Training pushes the subnet to flag
//! every class-1 patch, and the stride-1 patch scores form a heatmap of the
//! learned features.
//!
//! The crate is `no_std` + `alloc` when built without the default `std`
//! feature. File formats, dataset layout and the CLI live in the `patchnet`
//! crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod analysis;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod patchcore;
pub mod tensor;

pub use error::{Error, Result};
pub use imaging::Image;
pub use nn::{PatchDims, SubnetParams};
pub use optim::{Sample, TrainConfig};
pub use patchcore::{Heatmap, PatchConfig};
pub use tensor::{Real, RngState, Tensor};
