//! Simulation and verification toolkit for the three-dimensional Kac master
//! equation with finite reservoirs and Maxwellian thermostats.

pub mod d2;
pub mod experiments;
pub mod inequality;
pub mod jump;
pub mod kinetics;
pub mod moments;
pub mod stats;
pub mod steady;
