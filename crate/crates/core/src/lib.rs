//! Numerical laboratory for triangle configuration sets of fractal measures.
//!
//! The crate is organised bottom-up: [`measure`] builds discrete stand-ins for
//! Frostman measures, [`separator`] runs the cube-subdivision search for three
//! well separated subsets, [`config`] pushes triple products forward to
//! triangle classes `(t, r, α)`, and [`oscillatory`] holds the stationary phase
//! machinery for the sphere-pair surface measure. [`experiment`] ties them to
//! the command line.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod experiment;
pub mod measure;
pub mod numeric;
pub mod oscillatory;
pub mod rng;
pub mod separator;

#[cfg(test)]
mod properties;
