//! Scenario ingestion, expression parsing, simulation orchestration, and
//! report emission for the liaison engine.

pub mod commands;
pub mod expr;
pub mod output;
pub mod scenario;
pub mod schema;
