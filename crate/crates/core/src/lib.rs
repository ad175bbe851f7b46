//! Correlates a passive-DNS answer stream with a flow stream, attributing
//! each flow's address to the service domain behind it.

pub mod analysis;
pub mod dns_pipeline;
pub mod engine;
pub mod flow_pipeline;
pub mod harness;
pub mod io;
pub mod model;
pub mod queue;
pub mod store;
