//! Source-level linter for SEAndroid type-enforcement policies.

pub mod m4;
pub mod model;
pub mod syntax;
pub mod parser;
pub mod config;
pub mod template;
pub mod host;
pub mod plugins;
