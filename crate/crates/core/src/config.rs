//! Configuration files: profiles and per-plugin settings.
//!
//! ```text
//! # comment
//! [risky_rules]
//! criterion = risk
//! min_score = 0.5
//!
//! [risky_rules.bin.user_app]
//! risk = 30
//! members = [ untrusted_app, "isolated_app" ]
//! ```
//!
//! A `[a.b.c]` header opens a nested map: `b` inside `a`, then `c` inside
//! `b`. Values are scalars (bare up to a comment or end of line, or
//! double-quoted) or bracketed lists, which may span lines and separate
//! items with commas or whitespace.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::parser::{ParseOptions, UndeclaredPolicy};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{file}{}: {message}", line.map(|l| format!(":{l}")).unwrap_or_default())]
pub struct ConfigError {
    pub file: String,
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    pub fn new(file: impl Into<String>, line: Option<usize>, message: impl Into<String>) -> Self {
        Self {
            file: file.into(),
            line,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigValue {
    Scalar(String),
    List(Vec<String>),
    Map(BTreeMap<String, ConfigValue>),
}

impl ConfigValue {
    fn kind(&self) -> &'static str {
        match self {
            ConfigValue::Scalar(_) => "a scalar",
            ConfigValue::List(_) => "a list",
            ConfigValue::Map(_) => "a section",
        }
    }
}

/// A parsed configuration file: top-level sections by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfigDocument {
    pub file: String,
    pub sections: BTreeMap<String, BTreeMap<String, ConfigValue>>,
    lines: BTreeMap<String, usize>,
}

impl ConfigDocument {
    pub fn parse(text: &str, file: &str) -> Result<Self, ConfigError> {
        Lexer::new(text, file).document()
    }

    /// Line where `path` (dot-separated, section first) was defined.
    pub fn line_of(&self, path: &str) -> Option<usize> {
        self.lines.get(path).copied()
    }
}

struct Lexer<'a> {
    chars: Vec<char>,
    pos: usize,
    line: usize,
    file: &'a str,
}

impl<'a> Lexer<'a> {
    fn new(text: &str, file: &'a str) -> Self {
        Self {
            chars: text.chars().collect(),
            pos: 0,
            line: 1,
            file,
        }
    }

    fn err(&self, message: impl Into<String>) -> ConfigError {
        ConfigError::new(self.file, Some(self.line), message)
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += 1;
        if c == '\n' {
            self.line += 1;
        }
        Some(c)
    }

    fn skip_inline_space(&mut self) {
        while matches!(self.peek(), Some(' ' | '\t' | '\r')) {
            self.bump();
        }
    }

    fn skip_comment(&mut self) {
        if self.peek() == Some('#') {
            while !matches!(self.peek(), None | Some('\n')) {
                self.bump();
            }
        }
    }

    /// Skips blanks, comments and newlines.
    fn skip_all(&mut self) {
        loop {
            self.skip_inline_space();
            self.skip_comment();
            if self.peek() == Some('\n') {
                self.bump();
            } else {
                return;
            }
        }
    }

    fn end_of_line(&mut self) -> Result<(), ConfigError> {
        self.skip_inline_space();
        self.skip_comment();
        match self.peek() {
            None => Ok(()),
            Some('\n') => {
                self.bump();
                Ok(())
            }
            Some(c) => Err(self.err(format!("unexpected `{c}` at end of line"))),
        }
    }

    fn key(&mut self) -> Result<String, ConfigError> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_alphanumeric() || matches!(c, '_' | '-' | '.')) {
            self.bump();
        }
        if start == self.pos {
            let found = self.peek().map_or("end of file".to_string(), |c| format!("`{c}`"));
            return Err(self.err(format!("expected a key, found {found}")));
        }
        Ok(self.chars[start..self.pos].iter().collect())
    }

    fn quoted(&mut self) -> Result<String, ConfigError> {
        let line = self.line;
        self.bump();
        let mut out = String::new();
        loop {
            match self.bump() {
                None | Some('\n') => {
                    return Err(ConfigError::new(self.file, Some(line), "unterminated string"))
                }
                Some('"') => return Ok(out),
                Some('\\') => match self.bump() {
                    Some('n') => out.push('\n'),
                    Some(c @ ('"' | '\\')) => out.push(c),
                    _ => return Err(self.err("invalid escape in string")),
                },
                Some(c) => out.push(c),
            }
        }
    }

    fn scalar(&mut self) -> Result<String, ConfigError> {
        if self.peek() == Some('"') {
            return self.quoted();
        }
        let start = self.pos;
        while !matches!(self.peek(), None | Some('\n' | '#')) {
            self.bump();
        }
        let value: String = self.chars[start..self.pos].iter().collect();
        let value = value.trim().to_string();
        if value.is_empty() {
            return Err(self.err("missing value"));
        }
        Ok(value)
    }

    fn list(&mut self) -> Result<Vec<String>, ConfigError> {
        let line = self.line;
        self.bump();
        let mut items = Vec::new();
        loop {
            self.skip_all();
            match self.peek() {
                None => return Err(ConfigError::new(self.file, Some(line), "unterminated list")),
                Some(']') => {
                    self.bump();
                    return Ok(items);
                }
                Some(',') => {
                    self.bump();
                }
                Some('"') => items.push(self.quoted()?),
                Some('[') => return Err(self.err("nested lists are not supported")),
                Some(_) => {
                    let start = self.pos;
                    while !matches!(
                        self.peek(),
                        None | Some(' ' | '\t' | '\r' | '\n' | ',' | ']' | '#' | '"')
                    ) {
                        self.bump();
                    }
                    items.push(self.chars[start..self.pos].iter().collect());
                }
            }
        }
    }

    fn document(mut self) -> Result<ConfigDocument, ConfigError> {
        let mut doc = ConfigDocument {
            file: self.file.to_string(),
            ..ConfigDocument::default()
        };
        let mut current: Option<Vec<String>> = None;
        loop {
            self.skip_all();
            let Some(c) = self.peek() else {
                return Ok(doc);
            };
            let line = self.line;
            if c == '[' {
                self.bump();
                self.skip_inline_space();
                let name = self.key()?;
                self.skip_inline_space();
                if self.bump() != Some(']') {
                    return Err(self.err("expected `]` after section name"));
                }
                self.end_of_line()?;
                let path: Vec<String> = name.split('.').map(str::to_string).collect();
                if path.iter().any(String::is_empty) {
                    return Err(ConfigError::new(self.file, Some(line), format!("invalid section name `{name}`")));
                }
                if doc.lines.contains_key(&name) {
                    return Err(ConfigError::new(self.file, Some(line), format!("duplicate section `[{name}]`")));
                }
                let top = doc.sections.entry(path[0].clone()).or_default();
                let mut map = top;
                for part in &path[1..] {
                    let entry = map
                        .entry(part.clone())
                        .or_insert_with(|| ConfigValue::Map(BTreeMap::new()));
                    map = match entry {
                        ConfigValue::Map(m) => m,
                        other => {
                            return Err(ConfigError::new(
                                self.file,
                                Some(line),
                                format!("`{part}` is {} and cannot hold a section", other.kind()),
                            ))
                        }
                    };
                }
                doc.lines.insert(name, line);
                current = Some(path);
                continue;
            }
            let key = self.key()?;
            if key.contains('.') {
                return Err(self.err(format!("invalid key `{key}`")));
            }
            self.skip_inline_space();
            if self.bump() != Some('=') {
                return Err(self.err(format!("expected `=` after `{key}`")));
            }
            self.skip_inline_space();
            let value = match self.peek() {
                Some('[') => ConfigValue::List(self.list()?),
                _ => ConfigValue::Scalar(self.scalar()?),
            };
            self.end_of_line()?;
            let Some(path) = &current else {
                return Err(ConfigError::new(self.file, Some(line), format!("`{key}` appears before any section")));
            };
            let mut map = doc.sections.get_mut(&path[0]).expect("section exists");
            for part in &path[1..] {
                map = match map.get_mut(part) {
                    Some(ConfigValue::Map(m)) => m,
                    _ => unreachable!("section path was created as maps"),
                };
            }
            let full = format!("{}.{key}", path.join("."));
            if map.contains_key(&key) {
                return Err(ConfigError::new(self.file, Some(line), format!("duplicate key `{full}`")));
            }
            map.insert(key, value);
            doc.lines.insert(full, line);
        }
    }
}

/// Settings of one plugin.
#[derive(Debug, Clone, PartialEq)]
pub struct PluginConfig {
    pub plugin: String,
    /// Where the settings came from, for error messages.
    pub file: String,
    pub entries: BTreeMap<String, ConfigValue>,
    lines: BTreeMap<String, usize>,
}

impl PluginConfig {
    pub fn empty(plugin: &str) -> Self {
        Self {
            plugin: plugin.to_string(),
            file: format!("<{plugin}>"),
            entries: BTreeMap::new(),
            lines: BTreeMap::new(),
        }
    }

    /// Extracts the `[plugin]` section (and its subsections) of a plugin
    /// config file. Any other top-level section is an error.
    pub fn from_document(plugin: &str, doc: &ConfigDocument) -> Result<Self, ConfigError> {
        for name in doc.sections.keys() {
            if name != plugin {
                return Err(ConfigError::new(
                    &doc.file,
                    doc.line_of(name).or_else(|| first_line_under(doc, name)),
                    format!("unknown section `[{name}]` in configuration of `{plugin}`"),
                ));
            }
        }
        let prefix = format!("{plugin}.");
        Ok(Self {
            plugin: plugin.to_string(),
            file: doc.file.clone(),
            entries: doc.sections.get(plugin).cloned().unwrap_or_default(),
            lines: doc
                .lines
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|k| (k.to_string(), *v)))
                .collect(),
        })
    }

    pub fn parse(plugin: &str, text: &str, file: &str) -> Result<Self, ConfigError> {
        Self::from_document(plugin, &ConfigDocument::parse(text, file)?)
    }

    /// Settings of `over` replace those of `self` key by key; a section
    /// (such as the bin list) is replaced as a whole.
    pub fn overlay(mut self, over: PluginConfig) -> PluginConfig {
        for (key, value) in over.entries {
            self.lines.retain(|k, _| k != &key && !k.starts_with(&format!("{key}.")));
            self.entries.insert(key, value);
        }
        self.lines.extend(over.lines);
        self.file = over.file;
        self
    }

    pub fn set(&mut self, key: &str, value: ConfigValue) {
        self.entries.insert(key.to_string(), value);
    }

    pub fn reader(&self) -> ConfigReader<'_> {
        ConfigReader {
            config: self,
            prefix: String::new(),
            entries: &self.entries,
            used: Vec::new(),
        }
    }
}

fn first_line_under(doc: &ConfigDocument, name: &str) -> Option<usize> {
    let prefix = format!("{name}.");
    doc.lines
        .iter()
        .filter(|(k, _)| k.starts_with(&prefix))
        .map(|(_, l)| *l)
        .min()
}

/// Typed access to a plugin's settings. [`ConfigReader::finish`] rejects
/// keys that were never read.
pub struct ConfigReader<'a> {
    config: &'a PluginConfig,
    prefix: String,
    entries: &'a BTreeMap<String, ConfigValue>,
    used: Vec<String>,
}

impl<'a> ConfigReader<'a> {
    fn full(&self, key: &str) -> String {
        format!("{}{key}", self.prefix)
    }

    pub fn error(&self, key: &str, message: impl fmt::Display) -> ConfigError {
        let full = self.full(key);
        ConfigError::new(
            &self.config.file,
            self.config.lines.get(&full).copied(),
            format!("`{}.{full}`: {message}", self.config.plugin),
        )
    }

    fn get(&mut self, key: &str) -> Option<&'a ConfigValue> {
        self.used.push(key.to_string());
        self.entries.get(key)
    }

    pub fn has(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn string(&mut self, key: &str) -> Result<Option<String>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(ConfigValue::Scalar(s)) => Ok(Some(s.clone())),
            Some(other) => Err(self.error(key, format!("expected a scalar, found {}", other.kind()))),
        }
    }

    pub fn number(&mut self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.string(key)? {
            None => Ok(None),
            Some(s) => s
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(Some)
                .ok_or_else(|| self.error(key, format!("`{s}` is not a number"))),
        }
    }

    pub fn integer(&mut self, key: &str) -> Result<Option<u64>, ConfigError> {
        match self.string(key)? {
            None => Ok(None),
            Some(s) => s
                .replace('_', "")
                .parse::<u64>()
                .map(Some)
                .map_err(|_| self.error(key, format!("`{s}` is not a non-negative integer"))),
        }
    }

    pub fn list(&mut self, key: &str) -> Result<Option<Vec<String>>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(ConfigValue::List(items)) => Ok(Some(items.clone())),
            Some(other) => Err(self.error(key, format!("expected a list, found {}", other.kind()))),
        }
    }

    /// Subsections of `key` in name order.
    pub fn sections(&mut self, key: &str) -> Result<Vec<(String, ConfigReader<'a>)>, ConfigError> {
        match self.get(key) {
            None => Ok(Vec::new()),
            Some(ConfigValue::Map(map)) => {
                let mut out = Vec::new();
                for (name, value) in map {
                    match value {
                        ConfigValue::Map(inner) => out.push((
                            name.clone(),
                            ConfigReader {
                                config: self.config,
                                prefix: format!("{}{key}.{name}.", self.prefix),
                                entries: inner,
                                used: Vec::new(),
                            },
                        )),
                        other => {
                            return Err(self.error(
                                &format!("{key}.{name}"),
                                format!("expected a section, found {}", other.kind()),
                            ))
                        }
                    }
                }
                Ok(out)
            }
            Some(other) => Err(self.error(key, format!("expected a section, found {}", other.kind()))),
        }
    }

    /// Fails on the first key that was never read.
    pub fn finish(self) -> Result<(), ConfigError> {
        for key in self.entries.keys() {
            if !self.used.contains(key) {
                return Err(self.error(key, "unknown key"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputFormat {
    #[default]
    Text,
    Machine,
}

impl std::str::FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(OutputFormat::Text),
            "machine" => Ok(OutputFormat::Machine),
            other => Err(format!("unknown output format `{other}` (expected text or machine)")),
        }
    }
}

/// Built-in plugin configuration files.
pub const BUILTIN_CONFIGS: &[(&str, &str)] = &[
    ("simple_macros", include_str!("../config/simple_macros.conf")),
    ("parametrized_macros", include_str!("../config/parametrized_macros.conf")),
    ("risky_rules", include_str!("../config/risky_rules.conf")),
    ("unnecessary_rules", include_str!("../config/unnecessary_rules.conf")),
    ("user_neverallows", include_str!("../config/user_neverallows.conf")),
];

pub const DEFAULT_PROFILE: &str = include_str!("../config/default.profile");

/// The built-in settings of `plugin` (empty when it has none).
pub fn builtin_config(plugin: &str) -> Result<PluginConfig, ConfigError> {
    match BUILTIN_CONFIGS.iter().find(|(name, _)| *name == plugin) {
        Some((_, text)) => PluginConfig::parse(plugin, text, &format!("<built-in {plugin}.conf>")),
        None => Ok(PluginConfig::empty(plugin)),
    }
}

/// A named bundle of enabled plugins, their configuration files and parser
/// options.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub name: String,
    pub plugins: Vec<String>,
    pub config_paths: BTreeMap<String, PathBuf>,
    pub format: OutputFormat,
    pub parse: ParseOptions,
    /// File the profile was read from.
    pub file: String,
}

impl Profile {
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_PROFILE, "<built-in default.profile>", None)
            .expect("built-in profile is valid")
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let file = path.display().to_string();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new(&file, None, format!("cannot read profile: {e}")))?;
        Self::parse(&text, &file, path.parent())
    }

    /// Parses profile text; relative config paths are resolved against
    /// `base`.
    pub fn parse(text: &str, file: &str, base: Option<&Path>) -> Result<Self, ConfigError> {
        let doc = ConfigDocument::parse(text, file)?;
        let key_error = |path: &str, message: String| {
            ConfigError::new(file, doc.line_of(path), message)
        };
        for name in doc.sections.keys() {
            if !matches!(name.as_str(), "profile" | "plugin_config" | "parser") {
                return Err(key_error(name, format!("unknown section `[{name}]` in profile")));
            }
        }
        let empty = BTreeMap::new();
        let section = |name: &str| doc.sections.get(name).unwrap_or(&empty);

        let mut name = "default".to_string();
        let mut plugins = Vec::new();
        let mut format = OutputFormat::Text;
        for (key, value) in section("profile") {
            let path = format!("profile.{key}");
            match (key.as_str(), value) {
                ("name", ConfigValue::Scalar(s)) => name = s.clone(),
                ("plugins", ConfigValue::List(items)) => plugins = items.clone(),
                ("format", ConfigValue::Scalar(s)) => {
                    format = s.parse().map_err(|e| key_error(&path, format!("`{path}`: {e}")))?
                }
                ("name" | "format", _) => {
                    return Err(key_error(&path, format!("`{path}`: expected a scalar")))
                }
                ("plugins", _) => return Err(key_error(&path, format!("`{path}`: expected a list"))),
                _ => return Err(key_error(&path, format!("`{path}`: unknown key"))),
            }
        }

        let mut config_paths = BTreeMap::new();
        for (plugin, value) in section("plugin_config") {
            let path = format!("plugin_config.{plugin}");
            let ConfigValue::Scalar(p) = value else {
                return Err(key_error(&path, format!("`{path}`: expected a file path")));
            };
            let p = PathBuf::from(p);
            let resolved = match base {
                Some(base) if p.is_relative() => base.join(p),
                _ => p,
            };
            config_paths.insert(plugin.clone(), resolved);
        }

        let mut parse = ParseOptions::default();
        for (key, value) in section("parser") {
            let path = format!("parser.{key}");
            match (key.as_str(), value) {
                ("undeclared", ConfigValue::Scalar(s)) => {
                    parse.undeclared = match s.as_str() {
                        "error" => UndeclaredPolicy::Error,
                        "warn" => UndeclaredPolicy::Warn,
                        other => {
                            return Err(key_error(
                                &path,
                                format!("`{path}`: expected error or warn, found `{other}`"),
                            ))
                        }
                    }
                }
                ("guard_macros", ConfigValue::List(items)) => parse.guard_macros = items.clone(),
                ("undeclared", _) => return Err(key_error(&path, format!("`{path}`: expected a scalar"))),
                ("guard_macros", _) => return Err(key_error(&path, format!("`{path}`: expected a list"))),
                _ => return Err(key_error(&path, format!("`{path}`: unknown key"))),
            }
        }

        for plugin in config_paths.keys() {
            if !plugins.contains(plugin) {
                return Err(key_error(
                    &format!("plugin_config.{plugin}"),
                    format!("`plugin_config.{plugin}`: plugin is not enabled in this profile"),
                ));
            }
        }

        Ok(Profile {
            name,
            plugins,
            config_paths,
            format,
            parse,
            file: file.to_string(),
        })
    }

    /// Effective settings of `plugin`: the built-in defaults overlaid with
    /// the profile's config file, if any.
    pub fn plugin_config(&self, plugin: &str) -> Result<PluginConfig, ConfigError> {
        let base = builtin_config(plugin)?;
        match self.config_paths.get(plugin) {
            None => Ok(base),
            Some(path) => {
                let file = path.display().to_string();
                let text = std::fs::read_to_string(path).map_err(|e| {
                    ConfigError::new(&self.file, None, format!("config of `{plugin}` ({file}): {e}"))
                })?;
                Ok(base.overlay(PluginConfig::parse(plugin, &text, &file)?))
            }
        }
    }
}
