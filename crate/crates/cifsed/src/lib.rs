//! File formats, persistence, reporting and the experiment runner around
//! [`cifsed_core`].

pub mod config;
pub mod data;
mod error;
pub mod persist;
pub mod report;
pub mod runner;
pub mod selftest;

pub use error::{Error, Result};
