//! Self-evolving tool-use agent: experience memory, composite-tool mining and
//! a two-stage (imitation, then group-relative RL) trained policy, run against
//! a synthetic tool-use environment.

pub mod environment;
pub mod error;
pub mod http;
pub mod io;
pub mod memory;
pub mod miner;
pub mod optimizer;
pub mod orchestrator;
pub mod parallel;
pub mod policy;
pub mod reward;
pub mod seeding;
pub mod tooling;

pub use error::{Error, ErrorCategory, Result};
