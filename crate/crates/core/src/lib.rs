//! U²-Former: a nested U-shaped transformer for image restoration.

pub mod backbone;
pub mod blocks;
pub mod cli;
pub mod contrastive;
pub mod costmodel;
pub mod datasynth;
pub mod error;
pub mod losses;
pub mod numerics;
pub mod rng;
pub mod training;
pub mod utb;

pub use error::{Error, Result};
