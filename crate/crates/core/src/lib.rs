//! Spiking neural networks for event-camera action recognition.
//!
//! The pipeline: [`events`] turns raw event streams into `[T, 2, H, W]`
//! count clips; [`network`] builds SEW residual spiking networks (a per-frame
//! 2D variant and a spatiotemporal 3D variant) on the [`tensor`] autodiff
//! core and the [`neuron`] dynamics; [`consensus`] runs the 2D network over
//! sampled temporal segments and fuses their class distributions; [`training`]
//! fits either model end to end with surrogate gradients.

pub mod consensus;
pub mod error;
pub mod events;
mod io;
pub mod network;
pub mod neuron;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
