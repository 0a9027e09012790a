//! Training-free egocentric task planning pipeline.
//!
//! Progress video segments are turned into one-sentence textual memory
//! ([`memory`]), a multimodal model picks the next action from memory plus
//! the current observation under few-shot prompting ([`planner`]), and
//! several planning runs are folded into one answer by voting or by a judge
//! model ([`decision`]). [`harness`] runs the whole thing over a
//! multiple-choice benchmark and scores it.
//!
//! Interchangeable pieces (backend kinds, decision strategies, presets) are
//! looked up by name in [`registry::Registry`] instances so configuration
//! files and the CLI can pick them at runtime.

pub mod backends;
pub mod dataset;
pub mod decision;
pub mod digest;
pub mod error;
pub mod harness;
pub mod memory;
pub mod planner;
pub mod registry;
pub mod sampler;
pub mod synthetic;

pub use error::{Error, Result};
