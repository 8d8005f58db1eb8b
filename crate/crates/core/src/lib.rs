//! Distributed optimal consensus for heterogeneous nonlinear multi-agent
//! systems.
//!
//! Each agent solves a finite-horizon optimal control problem over its own
//! control sequence against its neighbors' latest predicted trajectories.
//! Gradients and Hessians come from costate sweeps ([`adjoint`]), updates from
//! the OCP recursion ([`solver`]), and the synchronous exchange rounds and the
//! receding-horizon loop live in [`coordinator`].

pub mod adjoint;
pub mod coordinator;
pub mod cost;
pub mod dynamics;
pub mod error;
pub mod graph;
pub mod scenario;
pub mod solver;

pub use error::{Error, Result};
