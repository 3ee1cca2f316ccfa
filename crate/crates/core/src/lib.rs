//! Flow-level QoE analytics for video streaming over a shared wireless cell.
//!
//! The crate has two routes to the same per-class QoE metrics and keeps
//! both honest against each other:
//!
//! - [`analytic`]: closed-form starvation probability and mean
//!   downloading-time/viewing-time ratio, built from a family of Markov
//!   chains over flow counts and the spectral solution of the playout
//!   buffer ODE systems.
//! - [`flowsim`]: an event-driven fluid simulator of the same cell, exact
//!   under the model assumptions, used as the ground-truth oracle.
//!
//! Around them sit [`workload`] (viewing-time models and MLE fitting),
//! [`markov`] (state spaces and transition rates), and [`inference`]
//! (duration-bucketed completion-ratio models for viewing-time inference
//! when only the video duration is known).

pub mod analytic;
pub mod error;
pub mod flowsim;
pub mod inference;
pub mod linalg;
pub mod markov;
pub mod quadrature;
pub mod seed;
pub mod trace;
pub mod workload;

pub use error::{Error, ErrorCategory, Result};
pub use markov::{FlowClass, SystemConfig};

use serde::{Deserialize, Serialize};

/// A value per flow class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerClass<T> {
    pub short: T,
    pub long: T,
}

impl<T> PerClass<T> {
    pub fn new(short: T, long: T) -> Self {
        PerClass { short, long }
    }

    pub fn get(&self, class: FlowClass) -> &T {
        match class {
            FlowClass::Short => &self.short,
            FlowClass::Long => &self.long,
        }
    }

    pub fn get_mut(&mut self, class: FlowClass) -> &mut T {
        match class {
            FlowClass::Short => &mut self.short,
            FlowClass::Long => &mut self.long,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> PerClass<U> {
        PerClass {
            short: f(&self.short),
            long: f(&self.long),
        }
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(FlowClass, &T) -> Result<U>) -> Result<PerClass<U>> {
        Ok(PerClass {
            short: f(FlowClass::Short, &self.short)?,
            long: f(FlowClass::Long, &self.long)?,
        })
    }
}

impl<T: Default> Default for PerClass<T> {
    fn default() -> Self {
        PerClass {
            short: T::default(),
            long: T::default(),
        }
    }
}
