//! Learning state automata of a pick-and-place conveyor from PLC sensor traces.
//!
//! Two learners are provided side by side: [`otala`], a passive learner that
//! needs the corner readings up front, and an [`lstm`] classifier that learns
//! the corner labels from annotated traces. Both produce an
//! [`automaton::Automaton`] that can be compared, exported as JSON or DOT.

pub mod automaton;
pub mod error;
pub mod lstm;
pub mod otala;
pub mod par;
pub mod pipeline;
pub mod plant_sim;
pub mod trace;

pub use error::{Error, Result};
