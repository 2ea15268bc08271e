//! Plugin lifecycle: configuration loading, execution, finding ordering
//! and output formatting.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, ConfigValue, OutputFormat, PluginConfig, Profile};
use crate::model::{Diagnostic, Policy, SourceLocation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Suggestion,
    Warning,
    Violation,
}

impl Severity {
    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Info => "info",
            Severity::Suggestion => "suggestion",
            Severity::Warning => "warning",
            Severity::Violation => "violation",
        }
    }
}

/// One plugin result.
#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    pub plugin: String,
    pub severity: Severity,
    /// In `[0, 1]`; set by scoring and macro plugins.
    pub score: Option<f64>,
    pub location: SourceLocation,
    pub rule_text: String,
    pub message: String,
    pub suggestion: Option<String>,
}

impl Finding {
    pub fn new(
        plugin: &str,
        severity: Severity,
        location: SourceLocation,
        rule_text: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Self {
            plugin: plugin.to_string(),
            severity,
            score: None,
            location,
            rule_text: rule_text.into(),
            message: message.into(),
            suggestion: None,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn with_suggestion(mut self, suggestion: impl Into<String>) -> Self {
        self.suggestion = Some(suggestion.into());
        self
    }
}

/// Descending score (unscored last), then file, line, rule text, plugin
/// and message.
pub fn compare_findings(a: &Finding, b: &Finding) -> Ordering {
    let score = match (a.score, b.score) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    };
    score
        .then_with(|| a.location.file.cmp(&b.location.file))
        .then_with(|| a.location.line.cmp(&b.location.line))
        .then_with(|| a.rule_text.cmp(&b.rule_text))
        .then_with(|| a.plugin.cmp(&b.plugin))
        .then_with(|| a.message.cmp(&b.message))
        .then_with(|| a.suggestion.cmp(&b.suggestion))
}

pub fn sort_findings(findings: &mut [Finding]) {
    findings.sort_by(compare_findings);
}

#[derive(Debug, Clone, Default)]
pub struct PluginOutput {
    pub findings: Vec<Finding>,
    pub warnings: Vec<Diagnostic>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{0}")]
pub struct PluginError(pub String);

/// An analysis over a parsed policy. Implementations hold their validated
/// settings and must not keep mutable shared state: plugins run
/// concurrently over the same policy.
pub trait Plugin: Send + Sync {
    fn name(&self) -> &str;

    /// Checks settings that depend on the policy (e.g. identifiers named
    /// in the configuration). Runs before any plugin executes.
    fn validate(&self, _policy: &Policy) -> Result<(), ConfigError> {
        Ok(())
    }

    fn run(&self, policy: &Policy) -> Result<PluginOutput, PluginError>;
}

pub type PluginBuilder = fn(&PluginConfig) -> Result<Box<dyn Plugin>, ConfigError>;

/// A compiled-in plugin.
#[derive(Clone, Copy)]
pub struct PluginRegistration {
    pub name: &'static str,
    pub description: &'static str,
    pub build: PluginBuilder,
}

impl std::fmt::Debug for PluginRegistration {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PluginRegistration")
            .field("name", &self.name)
            .finish_non_exhaustive()
    }
}

/// Per-invocation adjustments to a profile.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Run only these plugins instead of the profile's list.
    pub plugins: Option<Vec<String>>,
    /// Setting overrides by plugin name.
    pub overrides: BTreeMap<String, Vec<(String, ConfigValue)>>,
    /// Run plugins one after another (needed for per-plugin memory
    /// figures).
    pub sequential: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PluginTiming {
    pub plugin: String,
    pub wall: Duration,
    /// Peak resident set size in KiB while the plugin ran, when known.
    pub peak_rss_kib: Option<u64>,
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    /// Sorted findings of every plugin that completed.
    pub findings: Vec<Finding>,
    pub warnings: Vec<Diagnostic>,
    /// First plugin (in profile order) that failed.
    pub failure: Option<(String, PluginError)>,
    pub timings: Vec<PluginTiming>,
}

/// Builds the plugins a profile enables, with `options` applied. Every
/// configuration is loaded and checked before this returns.
pub fn load_plugins(
    profile: &Profile,
    registry: &[PluginRegistration],
    options: &RunOptions,
) -> Result<Vec<Box<dyn Plugin>>, ConfigError> {
    let names = options.plugins.as_ref().unwrap_or(&profile.plugins);
    let mut plugins = Vec::with_capacity(names.len());
    for name in names {
        let registration = registry.iter().find(|r| r.name == name).ok_or_else(|| {
            let known: Vec<&str> = registry.iter().map(|r| r.name).collect();
            ConfigError::new(
                &profile.file,
                None,
                format!("unknown plugin `{name}` (known: {})", known.join(", ")),
            )
        })?;
        let mut config = profile.plugin_config(name)?;
        if let Some(overrides) = options.overrides.get(name.as_str()) {
            for (key, value) in overrides {
                config.set(key, value.clone());
            }
        }
        plugins.push((registration.build)(&config)?);
    }
    for name in options.overrides.keys() {
        if !names.contains(name) {
            return Err(ConfigError::new(
                "<command line>",
                None,
                format!("option for plugin `{name}`, which is not enabled"),
            ));
        }
    }
    Ok(plugins)
}

/// Loads, validates and runs a profile against `policy`.
pub fn run_profile(
    policy: &Policy,
    profile: &Profile,
    registry: &[PluginRegistration],
    options: &RunOptions,
) -> Result<RunReport, ConfigError> {
    let plugins = load_plugins(profile, registry, options)?;
    for plugin in &plugins {
        plugin.validate(policy)?;
    }
    Ok(run_plugins(policy, &plugins, options.sequential))
}

/// Runs already validated plugins and merges their results.
pub fn run_plugins(policy: &Policy, plugins: &[Box<dyn Plugin>], sequential: bool) -> RunReport {
    let timed = |plugin: &dyn Plugin| {
        let start = Instant::now();
        let result = plugin.run(policy);
        (result, start.elapsed())
    };
    let results: Vec<(Result<PluginOutput, PluginError>, Duration, Option<u64>)> = if sequential {
        plugins
            .iter()
            .map(|p| {
                reset_peak_rss();
                let (result, wall) = timed(p.as_ref());
                (result, wall, peak_rss_kib())
            })
            .collect()
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = plugins
                .iter()
                .map(|p| scope.spawn(move || timed(p.as_ref())))
                .collect();
            handles
                .into_iter()
                .map(|h| match h.join() {
                    Ok((result, wall)) => (result, wall, None),
                    Err(panic) => (Err(PluginError(panic_message(&panic))), Duration::ZERO, None),
                })
                .collect()
        })
    };

    let mut report = RunReport::default();
    for (plugin, (result, wall, peak)) in plugins.iter().zip(results) {
        report.timings.push(PluginTiming {
            plugin: plugin.name().to_string(),
            wall,
            peak_rss_kib: peak,
        });
        match result {
            Ok(output) => {
                report.findings.extend(output.findings);
                report.warnings.extend(output.warnings);
            }
            Err(e) => {
                if report.failure.is_none() {
                    report.failure = Some((plugin.name().to_string(), e));
                }
            }
        }
    }
    sort_findings(&mut report.findings);
    report
}

fn panic_message(panic: &Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = panic.downcast_ref::<&str>() {
        format!("panicked: {s}")
    } else if let Some(s) = panic.downcast_ref::<String>() {
        format!("panicked: {s}")
    } else {
        "panicked".to_string()
    }
}

fn reset_peak_rss() {
    // "5" resets the peak RSS counter (Linux 4.0+); ignored elsewhere
    let _ = std::fs::write("/proc/self/clear_refs", "5");
}

/// Peak resident set size of this process in KiB (Linux only).
pub fn peak_rss_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|v| v.trim().trim_end_matches("kB").trim().parse().ok())
}

#[derive(Serialize)]
struct MachineRecord<'a> {
    plugin: &'a str,
    severity: Severity,
    score: Option<f64>,
    file: String,
    line: usize,
    rule: &'a str,
    message: &'a str,
    suggestion: Option<&'a str>,
}

/// Renders findings as text (`SCORE: FILE:LINE: RULE` plus indented
/// message and suggestion lines) or as one JSON object per line.
pub fn format_findings(findings: &[Finding], format: OutputFormat) -> String {
    let mut out = String::new();
    for f in findings {
        match format {
            OutputFormat::Text => {
                if let Some(score) = f.score {
                    let _ = write!(out, "{score:.2}: ");
                }
                let _ = writeln!(out, "{}: {}", f.location, f.rule_text);
                for line in f.message.lines() {
                    let _ = writeln!(out, "    {line}");
                }
                if let Some(s) = &f.suggestion {
                    let _ = writeln!(out, "    suggestion: {s}");
                }
            }
            OutputFormat::Machine => {
                let record = MachineRecord {
                    plugin: &f.plugin,
                    severity: f.severity,
                    score: f.score,
                    file: f.location.file.display().to_string(),
                    line: f.location.line,
                    rule: &f.rule_text,
                    message: &f.message,
                    suggestion: f.suggestion.as_deref(),
                };
                out.push_str(&serde_json::to_string(&record).expect("finding serializes"));
                out.push('\n');
            }
        }
    }
    out
}

pub const EXIT_CLEAN: i32 = 0;
pub const EXIT_STRICT: i32 = 1;
pub const EXIT_VIOLATION: i32 = 2;
pub const EXIT_ERROR: i32 = 3;

/// Exit status for a set of findings: 2 for any violation; with `strict`,
/// 1 for any suggestion or warning; otherwise 0.
pub fn exit_code(findings: &[Finding], strict: bool) -> i32 {
    if findings.iter().any(|f| f.severity == Severity::Violation) {
        EXIT_VIOLATION
    } else if strict
        && findings
            .iter()
            .any(|f| matches!(f.severity, Severity::Suggestion | Severity::Warning))
    {
        EXIT_STRICT
    } else {
        EXIT_CLEAN
    }
}
