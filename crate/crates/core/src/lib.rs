//! Multi-dancer motion fitting and music-driven group dance generation.

pub mod body;
pub mod config;
pub mod error;
pub mod features;
pub mod generator;
pub mod global_fit;
pub mod gradcheck;
pub mod io;
pub mod local_fit;
pub mod metrics;
pub mod numerics;

pub use error::{Error, Result};
