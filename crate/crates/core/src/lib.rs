//! Micro-expression recognition with a shallow triple-stream CNN over
//! onset/apex optical flow and optical strain.
//!
//! Pipeline: [`dataio`] loads or synthesises clips, [`apex`] spots apex
//! frames, [`flow`] turns onset/apex pairs into 28x28x3 cubes, [`ststnet`]
//! trains and runs the network and [`eval`] scores it leave-one-subject-out.

pub mod apex;
pub mod config;
pub mod dataio;
pub mod eval;
pub mod flow;
pub mod numerics;
pub mod ststnet;
