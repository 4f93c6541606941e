//! Batch front end for the MTE toolkit: `simulate`, `estimate`, `mc-study`
//! and `report`.

pub mod commands;
pub mod config;
pub mod report;
