//! Robust cooperative output regulation for heterogeneous discrete-time
//! multi-agent systems: model building, LMI-based gain synthesis and
//! closed-loop verification.

pub mod assembly;
pub mod graph;
pub mod internal_model;
pub mod linalg;
pub mod lmi;
pub mod plant;
pub mod reproduce;
pub mod config;
pub mod synthesis;
pub mod verification;
