//! Hierarchical fusion attention network for opinion-spam detection.
//!
//! The crate is organized bottom-up: [`tensor`] provides the autodiff
//! substrate, [`corpus`] turns raw reviews into padded id grids, [`model`]
//! assembles the network and its losses, [`training`] owns the optimizer
//! loop and checkpoints, and [`evaluation`] scores ranked predictions.

pub mod corpus;
pub mod evaluation;
pub mod model;
pub mod tensor;
pub mod training;
