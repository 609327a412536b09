//! Conversion of ReLU U-Nets into multi-threshold spiking networks, spiking
//! simulation, spike-flow fine-tuning, and energy accounting.
#![no_std]

extern crate alloc;

pub mod ann;
pub mod conversion;
pub mod data;
pub mod energy;
pub mod error;
pub mod finetune;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod neuron;
pub mod optim;
pub mod snn;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
