use std::fs;
use std::process::{Command, Output};

use selint_testkit::fixtures;
use selint_testkit::Fixture;
use tempfile::TempDir;

/// A temporary working directory holding policy trees as subdirectories,
/// so output paths are short and relative.
struct Work {
    dir: TempDir,
}

impl Work {
    fn new() -> Self {
        Self {
            dir: TempDir::new().unwrap(),
        }
    }

    fn tree(self, name: &str, fixture: &Fixture) -> Self {
        fixture.write_to(&self.dir.path().join(name)).unwrap();
        self
    }

    fn file(self, name: &str, text: &str) -> Self {
        fs::write(self.dir.path().join(name), text).unwrap();
        self
    }

    fn cmd(&self) -> Command {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_selint"));
        cmd.current_dir(self.dir.path()).env_remove("SELINT_PROFILE");
        cmd
    }

    fn run(&self, args: &[&str]) -> Output {
        self.cmd().args(args).output().unwrap()
    }
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

/// Scores of the `SCORE: FILE:LINE: RULE` lines, in output order.
fn scores(text: &str) -> Vec<String> {
    text.lines()
        .filter(|l| !l.starts_with(' '))
        .filter_map(|l| l.split_once(": ").map(|(s, _)| s.to_string()))
        .collect()
}

const NEVERALLOW_PROFILE: &str = "\
[profile]
name = ci
plugins = [user_neverallows]
[plugin_config]
user_neverallows = neverallows.conf
";

const NEVERALLOW_CONF: &str = "\
[user_neverallows]
rules = [ \"neverallow untrusted_app security_file:dir *;\" ]
";

#[test]
fn macro_and_risk_findings_with_default_profile() {
    let w = Work::new()
        .tree("logd", &fixtures::logd_listing())
        .tree("apps", &fixtures::app_rules());
    let out = w.run(&["--policy", "logd", "--policy", "apps"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains(&format!("suggestion: {}", fixtures::LOGD_SUGGESTION)), "{text}");
    assert!(
        text.contains(&format!("1.00: apps/domain.te:104: {}", fixtures::EXECUTE_RULE)),
        "{text}"
    );
    assert!(
        text.contains(&format!("0.50: apps/domain.te:154: {}", fixtures::SEARCH_RULE)),
        "{text}"
    );
}

#[test]
fn trust_lh_lines_are_ordered() {
    let w = Work::new().tree("p", &fixtures::app_rules());
    let out = w.run(&["--policy", "p", "--plugins", "risky_rules", "--criterion", "trust_lh"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert_eq!(scores(&text), ["1.00", "0.58"], "{text}");
    let first = text.lines().next().unwrap();
    assert_eq!(first, format!("1.00: p/domain.te:154: {}", fixtures::SEARCH_RULE));
}

#[test]
fn empty_directory_is_an_error() {
    let w = Work::new();
    fs::create_dir(w.dir.path().join("empty")).unwrap();
    let out = w.run(&["--policy", "empty"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(out.stdout.is_empty());
    let err = stderr(&out);
    let first = err.lines().next().unwrap();
    assert!(first.starts_with("error: "), "{err}");
    assert!(first.contains("no policy sources"), "{err}");
}

#[test]
fn missing_policy_flag_is_an_error() {
    let out = Work::new().run(&[]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).starts_with("error: "));
}

#[test]
fn usage_errors_exit_3() {
    let out = Work::new().run(&["--no-such-flag"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).starts_with("error: "));
}

#[test]
fn list_plugins_is_stable() {
    let w = Work::new();
    let a = w.run(&["--list-plugins"]);
    let b = w.run(&["--list-plugins"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let text = stdout(&a);
    let names: Vec<&str> = text.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(
        names,
        ["parametrized_macros", "risky_rules", "simple_macros", "unnecessary_rules", "user_neverallows"]
    );
    assert!(text.lines().all(|l| l.split_whitespace().count() > 1));
}

#[test]
fn violations_exit_2() {
    let w = Work::new()
        .tree("p", &fixtures::app_rules())
        .file("prof", NEVERALLOW_PROFILE)
        .file("neverallows.conf", NEVERALLOW_CONF);
    let out = w.run(&["--policy", "p", "--profile", "prof"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stdout(&out).contains("p/domain.te:154"));
}

#[test]
fn strict_turns_suggestions_into_exit_1() {
    let w = Work::new().tree("p", &fixtures::logd_listing());
    let lax = w.run(&["--policy", "p", "--plugins", "simple_macros"]);
    let strict = w.run(&["--policy", "p", "--plugins", "simple_macros", "--strict"]);
    assert_eq!(lax.status.code(), Some(0));
    assert_eq!(strict.status.code(), Some(1));
    assert_eq!(lax.stdout, strict.stdout);
}

#[test]
fn clean_policy_prints_nothing() {
    let w = Work::new().tree("p", &fixtures::fd_use());
    let out = w.run(&["--policy", "p", "--plugins", "unnecessary_rules", "--strict"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(out.stdout.is_empty());
}

#[test]
fn machine_format_is_one_json_object_per_finding() {
    let w = Work::new().tree("p", &fixtures::app_rules());
    let out = w.run(&["--policy", "p", "--plugins", "risky_rules", "--format", "machine"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 2);
    for line in text.lines() {
        assert!(line.starts_with('{') && line.ends_with('}'), "{line}");
        assert!(line.contains("\"plugin\":\"risky_rules\""), "{line}");
    }
}

#[test]
fn profile_is_found_in_working_directory_and_environment() {
    let machine = "[profile]\nplugins = [risky_rules]\nformat = machine\n";
    let text = "[profile]\nplugins = [risky_rules]\nformat = text\n";
    let w = Work::new()
        .tree("p", &fixtures::app_rules())
        .file("selint-profile", machine)
        .file("other", text);
    let from_cwd = w.run(&["--policy", "p"]);
    assert!(stdout(&from_cwd).starts_with('{'));

    let from_env = w.cmd().env("SELINT_PROFILE", "other").args(["--policy", "p"]).output().unwrap();
    assert!(stdout(&from_env).starts_with("1.00: "));

    let explicit = w
        .cmd()
        .env("SELINT_PROFILE", "other")
        .args(["--policy", "p", "--profile", "selint-profile"])
        .output()
        .unwrap();
    assert!(stdout(&explicit).starts_with('{'));
}

#[test]
fn configuration_errors_exit_3() {
    let w = Work::new()
        .tree("p", &fixtures::app_rules())
        .file("bad", "[profile]\nplugins = [no_such_plugin]\n");
    let out = w.run(&["--policy", "p", "--profile", "bad"]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr(&out);
    assert!(err.starts_with("error: ") && err.contains("no_such_plugin"), "{err}");
    assert!(out.stdout.is_empty());

    let out = w.run(&["--policy", "p", "--plugins", "simple_macros", "--criterion", "trust_lh"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));

    let out = w.run(&["--policy", "p", "--plugins", "risky_rules", "--criterion", "nonsense"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn parse_errors_exit_3() {
    let w = Work::new().tree("p", &Fixture::new().file("a.te", "allow a b:file read;\n"));
    let out = w.run(&["--policy", "p"]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr(&out);
    assert!(err.starts_with("error: ") && err.contains("undeclared"), "{err}");
    assert_eq!(err.lines().filter(|l| l.starts_with("error: ")).count(), 1);
}

#[test]
fn stats_go_to_stderr() {
    let w = Work::new().tree("p", &fixtures::app_rules());
    let plain = w.run(&["--policy", "p"]);
    let stats = w.run(&["--policy", "p", "--stats"]);
    assert_eq!(plain.stdout, stats.stdout);
    let err = stderr(&stats);
    assert!(err.contains("stats: expanded_rule_count 2"), "{err}");
    for plugin in ["simple_macros", "risky_rules", "unnecessary_rules", "user_neverallows"] {
        assert!(err.contains(&format!("stats: {plugin} ")), "{err}");
    }
}

#[test]
fn warnings_stay_off_stdout() {
    let w = Work::new().tree("p", &fixtures::logd_listing());
    let out = w.run(&["--policy", "p", "--plugins", "risky_rules"]);
    assert!(stderr(&out).contains("warning: "));
    assert!(!stdout(&out).contains("warning"));
}

#[test]
fn aosp_tree_output_is_reproducible() {
    let w = Work::new().tree("aosp", &fixtures::aosp_tree());
    let a = w.run(&["--policy", "aosp"]);
    let b = w.run(&["--policy", "aosp"]);
    assert!(matches!(a.status.code(), Some(0 | 2)), "{}", stderr(&a));
    assert!(!a.stdout.is_empty());
    assert_eq!(a.stdout, b.stdout);
}
