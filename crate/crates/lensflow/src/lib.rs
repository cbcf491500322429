//! Learning pushforward distributions on lens spaces L(p;q) with
//! coupling-layer normalizing flows on the two solid tori of the genus-1
//! Heegaard splitting.

pub mod checkpoint;
pub mod config;
pub mod evaluator;
pub mod flow_model;
pub mod lens_geometry;
pub mod runner;
pub mod special;
pub mod target_densities;
pub mod verify;
pub mod trainer;
