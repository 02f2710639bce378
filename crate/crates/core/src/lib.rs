//! Operator auto-tuning and inference-plan optimization for small tensor
//! graphs on CPU. The pipeline: load a graph, simplify it (folding,
//! fusion, layout conversion), tune each expensive operator's schedule
//! with genetic or reinforcement-learning search against a synthetic or
//! measured cost model, cache the winners, and assemble an execution plan
//! that picks the fastest strategy per node.

pub mod cache;
pub mod cli;
pub mod error;
pub mod evaluator;
pub mod genetic;
pub mod graph;
pub mod interp;
pub mod planner;
pub mod report;
pub mod rl;
pub mod runtime;
pub mod schedule;
pub mod kernels;
pub mod tensor_io;

pub use error::{Error, Result};
