//! Synthetic multi-task benchmark and experiment harness for the
//! adapter-pool pipeline: task generators, corpus management, exact-match
//! evaluation, cross-customization matrices, and experiment reproductions.

pub mod corpus;
pub mod eval;
pub mod experiments;
pub mod tasks;
