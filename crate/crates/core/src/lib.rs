//! Split-learning simulator with entropy-driven, channel-adaptive
//! compression of smashed data.
//!
//! The pipeline per message: score channels by entropy ([`acii`]), group
//! them and quantize group-wise ([`cgc`]), serialize ([`codec`]), account the
//! bytes ([`netsim`]). [`harness`] wires this into multi-device split
//! training of the small network in [`model`] on data from [`data`].

pub mod acii;
pub mod cgc;
pub mod codec;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod netsim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Direction, SmashedData, Tensor};
