//! Test oracles, fixtures and synthetic policy generators.
//!
//! The oracles here recompute plugin results the slow, obvious way and
//! share no matching or scoring code with the plugins.

pub mod fixtures;
pub mod gen;
pub mod oracle;

pub use fixtures::Fixture;
