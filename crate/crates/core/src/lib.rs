#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub use nalgebra;

pub mod markov;
pub mod inner;
pub mod moments;
pub mod oracles;
pub mod simulator;
pub mod estimator;
