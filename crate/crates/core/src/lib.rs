//! Vehicle-to-grid smart-charging laboratory.
//!
//! A discrete-time V2G charging environment, heuristic baselines, a
//! perfect-knowledge LP scheduler, offline trajectory datasets, a typed
//! graph encoder and a decision transformer trained on those datasets.

pub mod bench;
pub mod codec;
pub mod dataset;
pub mod dt;
pub mod env;
pub mod graph;
pub mod numerics;
pub mod oracle;
pub mod par;
pub mod policies;
pub mod scenario;
