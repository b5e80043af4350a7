//! Co-simulation of packetized energy management (PEM) for fleets of water
//! heaters and batteries.
#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod coordinator;
pub mod device;
pub mod estimator;
pub mod grid;
pub mod harness;
pub mod macromodel;
pub mod protocol;
