#![no_std]
#![doc = include_str!("../README.md")]

extern crate alloc;

pub mod error;
pub mod math;
pub mod rng;
pub mod encoders;
pub mod data;
pub mod model;
pub mod trainer;
pub mod baselines;
pub mod eval;
pub mod tensorad;

pub use error::{Error, Result};
