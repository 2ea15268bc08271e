//! The built-in plugins.

pub mod parametrized_macros;
pub mod risky_rules;
pub mod simple_macros;
pub mod unnecessary_rules;
pub mod user_neverallows;

use crate::host::PluginRegistration;

/// Every plugin compiled into the linter, in name order.
pub const REGISTRY: &[PluginRegistration] = &[
    PluginRegistration {
        name: parametrized_macros::NAME,
        description: "suggest rule-block macro calls for groups of rules they would generate",
        build: parametrized_macros::ParametrizedMacros::build,
    },
    PluginRegistration {
        name: risky_rules::NAME,
        description: "score rules by the risk or trust of the types and permissions involved",
        build: risky_rules::RiskyRules::build,
    },
    PluginRegistration {
        name: simple_macros::NAME,
        description: "suggest permission-set macros for explicit permission lists",
        build: simple_macros::SimpleMacros::build,
    },
    PluginRegistration {
        name: unnecessary_rules::NAME,
        description: "report incomplete rule tuples, stray debug types and ineffective permissions",
        build: unnecessary_rules::UnnecessaryRules::build,
    },
    PluginRegistration {
        name: user_neverallows::NAME,
        description: "check the policy against neverallow rules from the configuration",
        build: user_neverallows::UserNeverallows::build,
    },
];
