//! Synthetic S-parameter fault diagnosis for thin-film electrodes.

pub mod datagen;
pub mod defects;
pub mod embed;
pub mod harness;
pub mod models;
pub mod network;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod touchstone;
