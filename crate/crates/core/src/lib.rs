//! Bidirectional pheromone-guided flow on directed graphs.
//!
//! The crate simulates fluid forward and backward flow that reinforces
//! pheromone on the edges it traverses, and ships the analysis needed to check
//! convergence to shortest and minimum-leakage paths, equilibria of general
//! decision rules, and the constructions on which non-proportional rules fail.

pub mod adversarial;
pub mod analysis;
pub mod dynamics;
pub mod equilibria;
pub mod experiments;
pub mod graph;
pub mod rules;
