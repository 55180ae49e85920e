pub mod backend;
pub mod conditioning;
pub mod config;
pub mod consensus;
pub mod dataset;
pub mod evaluation;
pub mod hash;
pub mod model;
pub mod pipeline;
pub mod prompt;
