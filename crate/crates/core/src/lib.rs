//! Mixture-of-experts inference of PM2.5 for cities without monitoring
//! stations.
//!
//! Each monitored source city gets an expert that reads that city's
//! stations through a shared encoder and station attention. City attention
//! mixes the experts into one estimate. Training is leave-one-city-out over
//! the source cities. [`data`] loads or synthesizes datasets, [`geo`]
//! turns them into normalized feature bundles, [`network`] and [`losses`]
//! are built on the small reverse-mode engine in [`autodiff`], and
//! [`training`], [`baselines`] and [`cli`] run experiments.
pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod data;
pub mod error;
pub mod geo;
pub mod losses;
pub mod network;
pub mod training;

pub use error::{Error, Result};
