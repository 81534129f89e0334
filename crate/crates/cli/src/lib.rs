//! Batch front end for `ratecost`: JSON experiment configs in, CSV/JSON
//! tables and SVG plots out.

pub mod commands;
pub mod config;
pub mod svg;
pub mod tables;
