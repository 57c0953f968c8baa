//! Command-line front end: the `.dae` input format, the pipeline driver and
//! the report document.

pub mod parse;
pub mod pipeline;
pub mod report;
