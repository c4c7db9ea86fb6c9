//! Desk-scale simulator for scene-prior laser attacks on traffic-sign
//! classifiers: an analytic pinhole scene, a perspective transformation
//! network, laser-beam compositing, surrogate/victim classifiers, and a
//! PPO decision agent, tied together by a reproducible CLI harness.

pub mod error;
pub mod img;
pub mod agent;
pub mod attack;
pub mod classify;
pub mod harness;
pub mod laser;
pub mod nn;
pub mod percept;
pub mod rng;
pub mod scene;

pub use error::{ElaError, Result};
