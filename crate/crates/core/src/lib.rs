//! Object-centric driving policy stack: autodiff engine, perception
//! features, object representations, PID control, and behavioral-cloning
//! training.

pub mod controller;
pub mod diffcore;
pub mod objectcentric;
pub mod perception;
pub mod policy;
pub mod seeding;
