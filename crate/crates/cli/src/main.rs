//! `selint`: lint SEAndroid policy sources.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;

use selint_core::config::{ConfigValue, OutputFormat, Profile};
use selint_core::host::{self, RunOptions, EXIT_ERROR};
use selint_core::parser::{parse_policy_with, SourceSet};
use selint_core::plugins::REGISTRY;

const PROFILE_ENV: &str = "SELINT_PROFILE";
const DEFAULT_PROFILE_FILE: &str = "selint-profile";

#[derive(Debug, Parser)]
#[command(name = "selint", version, about = "Source-level linter for SEAndroid policies")]
struct Args {
    /// Policy directory; repeat to add overlays after the base tree.
    #[arg(long = "policy", value_name = "DIR")]
    policy: Vec<PathBuf>,

    /// Profile file [default: $SELINT_PROFILE, then ./selint-profile,
    /// then the built-in profile].
    #[arg(long, value_name = "FILE")]
    profile: Option<PathBuf>,

    /// Run only these plugins.
    #[arg(long, value_name = "NAME[,NAME]", value_delimiter = ',')]
    plugins: Option<Vec<String>>,

    /// Output format [default: the profile's].
    #[arg(long, value_name = "text|machine")]
    format: Option<OutputFormat>,

    /// Exit 1 when there are suggestions or warnings.
    #[arg(long)]
    strict: bool,

    /// Print the registered plugins and exit.
    #[arg(long)]
    list_plugins: bool,

    /// Print rule counts, per-plugin time and peak memory to stderr.
    #[arg(long)]
    stats: bool,

    /// Scoring criterion of risky_rules (risk, trust_hh, trust_hl,
    /// trust_lh, trust_ll).
    #[arg(long, value_name = "NAME")]
    criterion: Option<String>,

    /// Print the profile in use and rule counts to stderr.
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

struct Failure {
    message: String,
    detail: Option<String>,
}

impl Failure {
    fn new(message: impl ToString) -> Self {
        Self {
            message: message.to_string(),
            detail: None,
        }
    }

    fn detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }
}

fn main() -> ExitCode {
    // clap exits 2 on usage errors, which is the violation status here
    let args = match Args::try_parse() {
        Ok(args) => args,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("{first}");
            for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
                eprintln!("  {}", line.trim());
            }
            return ExitCode::from(EXIT_ERROR as u8);
        }
    };
    match run(args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(f) => {
            // first line stays on one line for grep
            eprintln!("error: {}", f.message.replace('\n', " "));
            if let Some(d) = f.detail {
                eprintln!("  {d}");
            }
            ExitCode::from(EXIT_ERROR as u8)
        }
    }
}

fn resolve_profile(explicit: Option<&Path>) -> Result<Profile, Failure> {
    let from_env = std::env::var_os(PROFILE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    let path = match (explicit, from_env) {
        (Some(p), _) => Some(p.to_path_buf()),
        (None, Some(p)) => Some(p),
        (None, None) => Some(PathBuf::from(DEFAULT_PROFILE_FILE)).filter(|p| p.is_file()),
    };
    match path {
        Some(p) => Profile::load(&p).map_err(|e| Failure::new(e).detail("while loading the profile")),
        None => Ok(Profile::builtin()),
    }
}

fn list_plugins(out: &mut impl Write) -> std::io::Result<()> {
    let width = REGISTRY.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in REGISTRY {
        writeln!(out, "{:width$}  {}", r.name, r.description)?;
    }
    Ok(())
}

fn run(args: Args) -> Result<i32, Failure> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    if args.list_plugins {
        list_plugins(&mut out).map_err(Failure::new)?;
        return Ok(host::EXIT_CLEAN);
    }
    if args.policy.is_empty() {
        return Err(Failure::new("no policy directory given").detail("pass --policy DIR"));
    }

    let profile = resolve_profile(args.profile.as_deref())?;
    let mut options = RunOptions {
        plugins: args.plugins.clone(),
        sequential: args.stats,
        ..RunOptions::default()
    };
    if let Some(c) = &args.criterion {
        options
            .overrides
            .entry("risky_rules".to_string())
            .or_default()
            .push(("criterion".to_string(), ConfigValue::Scalar(c.clone())));
    }

    let started = Instant::now();
    let sources = SourceSet::from_dirs(&args.policy)
        .map_err(|e| Failure::new(e).detail("while reading policy sources"))?;
    let policy = parse_policy_with(&sources, &profile.parse)
        .map_err(|e| Failure::new(e).detail("while parsing policy sources"))?;
    let parse_time = started.elapsed();
    let parse_peak = host::peak_rss_kib();

    for d in policy.diagnostics() {
        eprintln!("warning: {d}");
    }
    if args.verbose > 0 {
        eprintln!(
            "info: profile `{}` ({}), {} rules, {} expanded",
            profile.name,
            profile.file,
            policy.rules().len(),
            policy.expanded_rule_count()
        );
    }

    let report = host::run_profile(&policy, &profile, REGISTRY, &options)
        .map_err(|e| Failure::new(e).detail("while loading plugin configuration"))?;

    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if args.stats {
        let kib = |k: Option<u64>| k.map_or("n/a".to_string(), |k| format!("{k} KiB"));
        eprintln!("stats: expanded_rule_count {}", policy.expanded_rule_count());
        eprintln!(
            "stats: parse {:.3} s, peak {}",
            parse_time.as_secs_f64(),
            kib(parse_peak)
        );
        for t in &report.timings {
            eprintln!(
                "stats: {} {:.3} s, peak {}",
                t.plugin,
                t.wall.as_secs_f64(),
                kib(t.peak_rss_kib)
            );
        }
    }
    if let Some((plugin, e)) = &report.failure {
        return Err(Failure::new(format!("plugin `{plugin}` failed: {e}")));
    }

    let format = args.format.unwrap_or(profile.format);
    out.write_all(host::format_findings(&report.findings, format).as_bytes())
        .and_then(|_| out.flush())
        .map_err(Failure::new)?;
    Ok(host::exit_code(&report.findings, args.strict))
}
