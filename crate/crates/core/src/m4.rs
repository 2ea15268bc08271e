//! The M4 subset used by SEAndroid macro files (`global_macros`,
//! `te_macros`): `define` with one quoting level, `$1`..`$9`, nested macro
//! calls and `#`/`dnl` comments.
//!
//! Conditional wrapper macros (`userdebug_or_eng` and friends) are defined
//! with `ifelse` in real trees. Names registered as guards are stored
//! without interpreting their body; any other use of `ifelse`, `ifdef` or
//! diversions is rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::model::{
    AvRule, Diagnostic, Identifier, PermissionSet, Rule, SourceLocation, TeRule,
};
use crate::syntax::{self, MacroLookup, MacroShape, SetExpr, Statement, StatementKind, SyntaxError};

/// Conditional wrappers recognised by default.
pub const DEFAULT_GUARDS: &[&str] = &[
    "userdebug_or_eng",
    "eng",
    "userdebug",
    "with_asan",
    "with_native_coverage",
    "recovery_only",
    "not_recovery",
    "full_treble_only",
    "not_full_treble",
];

const MAX_DEPTH: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MacroError {
    #[error("line {line}: unbalanced {what}")]
    Unbalanced { line: usize, what: &'static str },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unsupported M4 construct `{name}`")]
    Unsupported { line: usize, name: String },
    #[error("cyclic macro reference: {}", .cycle.join(" -> "))]
    Cycle { cycle: Vec<String> },
    #[error("unknown macro `{name}` referenced from `{from}`")]
    Unknown { name: String, from: String },
    #[error("macro `{name}` expects {expected} argument(s), got {found}")]
    Arity {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("macro `{name}`: invalid argument `{arg}`")]
    BadArgument { name: String, arg: String },
    #[error("macro `{name}` is a conditional wrapper and cannot be expanded")]
    Guard { name: String },
    #[error("expansion of `{name}` does not parse: {source}")]
    Expansion { name: String, source: SyntaxError },
    #[error("macro nesting deeper than {MAX_DEPTH} while expanding `{name}`")]
    TooDeep { name: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MacroKind {
    /// Zero-argument macro expanding to a list of names (permissions or
    /// classes), e.g. `r_file_perms`.
    PermissionSet,
    /// Macro expanding to policy statements, e.g. `file_type_trans`.
    RuleBlock,
    /// Conditional wrapper whose body is not interpreted.
    Guard,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MacroDefinition {
    pub name: Identifier,
    /// Highest `$n` referenced by the body.
    pub arity: usize,
    pub body: String,
    pub origin: SourceLocation,
    pub kind: MacroKind,
}

/// Macro definitions by name, plus the names treated as conditional
/// wrappers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MacroTable {
    defs: BTreeMap<String, MacroDefinition>,
    guards: BTreeSet<String>,
    warnings: Vec<Diagnostic>,
}

impl Default for MacroTable {
    fn default() -> Self {
        Self::with_guards(DEFAULT_GUARDS.iter().copied())
    }
}

impl MacroTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_guards<I, S>(guards: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            defs: BTreeMap::new(),
            guards: guards.into_iter().map(Into::into).collect(),
            warnings: Vec::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&MacroDefinition> {
        self.defs.get(name)
    }

    pub fn len(&self) -> usize {
        self.defs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.defs.is_empty()
    }

    /// Definitions in name order.
    pub fn iter(&self) -> impl Iterator<Item = &MacroDefinition> {
        self.defs.values()
    }

    pub fn of_kind(&self, kind: MacroKind) -> impl Iterator<Item = &MacroDefinition> {
        self.defs.values().filter(move |d| d.kind == kind)
    }

    pub fn is_guard(&self, name: &str) -> bool {
        self.guards.contains(name)
    }

    pub fn guards(&self) -> &BTreeSet<String> {
        &self.guards
    }

    pub fn warnings(&self) -> &[Diagnostic] {
        &self.warnings
    }

    /// Adds a definition, replacing (with a warning) any earlier one, and
    /// reclassifies the table.
    pub fn insert(&mut self, def: MacroDefinition) {
        self.insert_unclassified(def);
        self.reclassify();
    }

    fn insert_unclassified(&mut self, def: MacroDefinition) {
        if let Some(prev) = self.defs.get(def.name.as_str()) {
            self.warnings.push(Diagnostic::new(
                Some(def.origin.clone()),
                format!(
                    "macro `{}` redefined (previous definition at {})",
                    def.name, prev.origin
                ),
            ));
        }
        self.defs.insert(def.name.as_str().to_string(), def);
    }

    fn reclassify(&mut self) {
        let names: Vec<String> = self.defs.keys().cloned().collect();
        for name in names {
            let def = &self.defs[&name];
            let (kind, warning) = classify_with_reason(def, self);
            if let Some(message) = warning {
                let origin = def.origin.clone();
                let already = self
                    .warnings
                    .iter()
                    .any(|w| w.message == message && w.location.as_ref() == Some(&origin));
                if !already {
                    self.warnings.push(Diagnostic::new(Some(origin), message));
                }
            }
            self.defs.get_mut(&name).expect("present").kind = kind;
        }
    }
}

impl MacroLookup for MacroTable {
    fn shape(&self, name: &str) -> Option<MacroShape> {
        if self.is_guard(name) {
            return Some(MacroShape::Guard);
        }
        self.defs.get(name).map(|def| match def.kind {
            MacroKind::PermissionSet => MacroShape::PermissionSet,
            MacroKind::RuleBlock => MacroShape::RuleBlock { arity: def.arity },
            MacroKind::Guard => MacroShape::Guard,
        })
    }
}

/// Highest `$n` (1..=9) referenced in `body`.
pub fn infer_arity(body: &str) -> usize {
    let bytes = body.as_bytes();
    let mut arity = 0;
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'$' {
            if let Some(d) = bytes.get(i + 1).filter(|d| (b'1'..=b'9').contains(d)) {
                arity = arity.max((d - b'0') as usize);
            }
        }
    }
    arity
}

fn line_at(text: &str, offset: usize, base: usize) -> usize {
    base + text[..offset.min(text.len())].matches('\n').count()
}

fn is_word_start(b: u8) -> bool {
    b.is_ascii_alphabetic() || b == b'_'
}

fn is_word_char(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

fn word_end(bytes: &[u8], start: usize) -> usize {
    let mut end = start;
    while end < bytes.len() && is_word_char(bytes[end]) {
        end += 1;
    }
    end
}

/// Reads a quoted string starting at the opening backquote. Returns the
/// contents with the outer quote level removed and the index after the
/// closing quote.
fn read_quoted(text: &str, open: usize, base: usize) -> Result<(&str, usize), MacroError> {
    let bytes = text.as_bytes();
    let mut depth = 0usize;
    let mut i = open;
    while i < bytes.len() {
        match bytes[i] {
            b'`' => depth += 1,
            b'\'' => {
                depth -= 1;
                if depth == 0 {
                    return Ok((&text[open + 1..i], i + 1));
                }
            }
            _ => {}
        }
        i += 1;
    }
    Err(MacroError::Unbalanced {
        line: line_at(text, open, base),
        what: "quote",
    })
}

/// Collects the arguments of a macro call whose `(` is at `open`. Quotes
/// are stripped one level, leading whitespace is dropped and nested
/// parentheses are kept.
fn collect_args(text: &str, open: usize, base: usize) -> Result<(Vec<String>, usize), MacroError> {
    let bytes = text.as_bytes();
    let mut args = Vec::new();
    let mut current = String::new();
    let mut depth = 0usize;
    let mut at_start = true;
    let mut i = open + 1;
    while i < bytes.len() {
        let b = bytes[i];
        if at_start && b.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        at_start = false;
        match b {
            b'`' => {
                let (inner, next) = read_quoted(text, i, base)?;
                current.push_str(inner);
                i = next;
                continue;
            }
            b'#' => {
                let end = text[i..].find('\n').map_or(text.len(), |n| i + n);
                current.push_str(&text[i..end]);
                i = end;
                continue;
            }
            b'(' => depth += 1,
            b')' if depth == 0 => {
                args.push(std::mem::take(&mut current));
                return Ok((args, i + 1));
            }
            b')' => depth -= 1,
            b',' if depth == 0 => {
                args.push(std::mem::take(&mut current));
                at_start = true;
                i += 1;
                continue;
            }
            _ => {}
        }
        let ch_len = text[i..].chars().next().map_or(1, char::len_utf8);
        current.push_str(&text[i..i + ch_len]);
        i += ch_len;
    }
    Err(MacroError::Unbalanced {
        line: line_at(text, open, base),
        what: "parenthesis",
    })
}

fn check_supported(body: &str, base: usize) -> Result<(), MacroError> {
    let bytes = body.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if is_word_start(bytes[i]) && (i == 0 || !is_word_char(bytes[i - 1])) {
            let end = word_end(bytes, i);
            let word = &body[i..end];
            if syntax::UNSUPPORTED_M4.contains(&word) {
                return Err(MacroError::Unsupported {
                    line: line_at(body, i, base),
                    name: word.to_string(),
                });
            }
            i = end;
        } else {
            i += 1;
        }
    }
    Ok(())
}

/// Parses a macro definition file and returns `existing` extended with its
/// definitions. Later definitions replace earlier ones with a warning.
pub fn parse_macro_file(
    text: &str,
    path: &Path,
    existing: MacroTable,
) -> Result<MacroTable, MacroError> {
    let file: Arc<Path> = Arc::from(path);
    let mut table = existing;
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if b.is_ascii_whitespace() {
            i += 1;
        } else if b == b'#' {
            i = text[i..].find('\n').map_or(text.len(), |n| i + n);
        } else if is_word_start(b) {
            let end = word_end(bytes, i);
            let word = &text[i..end];
            let line = line_at(text, i, 1);
            match word {
                "dnl" => {
                    i = text[end..].find('\n').map_or(text.len(), |n| end + n + 1);
                }
                "define" if bytes.get(end) == Some(&b'(') => {
                    let (args, next) = collect_args(text, end, 1)?;
                    let (name, body) = match args.as_slice() {
                        [name] => (name.trim(), String::new()),
                        [name, body] => (name.trim(), body.clone()),
                        _ => {
                            return Err(MacroError::Syntax {
                                line,
                                message: format!(
                                    "`define` takes 1 or 2 arguments, got {}",
                                    args.len()
                                ),
                            })
                        }
                    };
                    let name = Identifier::new(name).map_err(|_| MacroError::Syntax {
                        line,
                        message: format!("invalid macro name `{name}`"),
                    })?;
                    let kind = if table.is_guard(name.as_str()) {
                        MacroKind::Guard
                    } else {
                        let body_line = line_at(text, end, 1);
                        check_supported(&body, body_line)?;
                        if body.contains("$*") || body.contains("$@") || body.contains("$#") {
                            return Err(MacroError::Unsupported {
                                line,
                                name: "$*/$@/$#".into(),
                            });
                        }
                        MacroKind::RuleBlock
                    };
                    table.insert_unclassified(MacroDefinition {
                        arity: if kind == MacroKind::Guard { 1 } else { infer_arity(&body) },
                        name,
                        body,
                        origin: SourceLocation::new(file.clone(), line),
                        kind,
                    });
                    i = next;
                }
                w if syntax::UNSUPPORTED_M4.contains(&w) => {
                    return Err(MacroError::Unsupported {
                        line,
                        name: w.to_string(),
                    })
                }
                w => {
                    return Err(MacroError::Syntax {
                        line,
                        message: format!("unexpected `{w}` outside a definition"),
                    })
                }
            }
        } else if b == b'`' || b == b'\'' {
            return Err(MacroError::Unbalanced {
                line: line_at(text, i, 1),
                what: "quote",
            });
        } else {
            return Err(MacroError::Syntax {
                line: line_at(text, i, 1),
                message: format!("unexpected character `{}`", text[i..].chars().next().unwrap()),
            });
        }
    }
    table.reclassify();
    Ok(table)
}

/// Replaces `$0`..`$9` in a macro body.
fn substitute(body: &str, name: &str, args: &[Identifier]) -> String {
    let mut out = String::with_capacity(body.len());
    let mut chars = body.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '$' {
            if let Some(&d) = chars.peek() {
                if let Some(n) = d.to_digit(10) {
                    chars.next();
                    match n {
                        0 => out.push_str(name),
                        n => {
                            if let Some(arg) = args.get(n as usize - 1) {
                                out.push_str(arg.as_str());
                            }
                        }
                    }
                    continue;
                }
            }
        }
        out.push(c);
    }
    out
}

fn rescan(
    text: &str,
    table: &MacroTable,
    stack: &mut Vec<String>,
    out: &mut String,
) -> Result<(), MacroError> {
    let bytes = text.as_bytes();
    let base = stack
        .first()
        .and_then(|n| table.get(n))
        .map_or(1, |d| d.origin.line);
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if b == b'#' {
            let end = text[i..].find('\n').map_or(text.len(), |n| i + n);
            out.push_str(&text[i..end]);
            i = end;
        } else if b == b'`' {
            let (inner, next) = read_quoted(text, i, base)?;
            out.push_str(inner);
            i = next;
        } else if is_word_start(b) {
            let end = word_end(bytes, i);
            let word = &text[i..end];
            let has_paren = bytes.get(end) == Some(&b'(');
            if table.is_guard(word) {
                out.push_str(word);
                i = end;
                if has_paren {
                    let (args, next) = collect_args(text, end, base)?;
                    out.push_str("(`");
                    for arg in &args {
                        rescan(arg, table, stack, out)?;
                    }
                    out.push_str("')");
                    i = next;
                }
                continue;
            }
            let Some(def) = table.get(word) else {
                if syntax::UNSUPPORTED_M4.contains(&word) && has_paren {
                    return Err(MacroError::Unsupported {
                        line: line_at(text, i, base),
                        name: word.to_string(),
                    });
                }
                out.push_str(word);
                i = end;
                continue;
            };
            let (raw_args, next) = if has_paren {
                collect_args(text, end, base)?
            } else {
                (Vec::new(), end)
            };
            let args = call_args(word, &raw_args, table)?;
            expand_into(def, &args, table, stack, out)?;
            i = next;
        } else {
            let ch_len = text[i..].chars().next().map_or(1, char::len_utf8);
            out.push_str(&text[i..i + ch_len]);
            i += ch_len;
        }
    }
    Ok(())
}

fn call_args(name: &str, raw: &[String], table: &MacroTable) -> Result<Vec<Identifier>, MacroError> {
    // `m()` is a call without arguments
    if raw.len() == 1 && raw[0].trim().is_empty() {
        return Ok(Vec::new());
    }
    raw.iter()
        .map(|arg| {
            let arg = arg.trim();
            if table.get(arg).is_some() || table.is_guard(arg) {
                return Err(MacroError::BadArgument {
                    name: name.to_string(),
                    arg: arg.to_string(),
                });
            }
            Identifier::new(arg).map_err(|_| MacroError::BadArgument {
                name: name.to_string(),
                arg: arg.to_string(),
            })
        })
        .collect()
}

fn expand_into(
    def: &MacroDefinition,
    args: &[Identifier],
    table: &MacroTable,
    stack: &mut Vec<String>,
    out: &mut String,
) -> Result<(), MacroError> {
    let name = def.name.as_str();
    if def.kind == MacroKind::Guard {
        return Err(MacroError::Guard { name: name.into() });
    }
    if args.len() != def.arity {
        return Err(MacroError::Arity {
            name: name.into(),
            expected: def.arity,
            found: args.len(),
        });
    }
    if let Some(pos) = stack.iter().position(|n| n == name) {
        let mut cycle = stack[pos..].to_vec();
        cycle.push(name.to_string());
        return Err(MacroError::Cycle { cycle });
    }
    if stack.len() >= MAX_DEPTH {
        return Err(MacroError::TooDeep { name: name.into() });
    }
    stack.push(name.to_string());
    let body = substitute(&def.body, name, args);
    let result = rescan(&body, table, stack, out);
    stack.pop();
    result
}

/// Fully expanded text of `def` applied to `args`.
pub fn expand_text(
    def: &MacroDefinition,
    args: &[Identifier],
    table: &MacroTable,
) -> Result<String, MacroError> {
    let mut out = String::new();
    expand_into(def, args, table, &mut Vec::new(), &mut out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Produced {
    Rules(Vec<Rule>),
    Permissions(PermissionSet),
}

/// Result of expanding one macro usage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MacroExpansion {
    pub name: Identifier,
    pub args: Vec<Identifier>,
    /// Fully expanded text.
    pub text: String,
    /// Statements of a rule-block expansion (empty for permission sets).
    pub statements: Vec<Statement>,
    pub produced: Produced,
    /// Rule statements whose set expressions (`~`, `*`, `-`) cannot be
    /// lowered to concrete rules.
    pub unsupported: usize,
}

impl MacroExpansion {
    pub fn rules(&self) -> &[Rule] {
        match &self.produced {
            Produced::Rules(rules) => rules,
            Produced::Permissions(_) => &[],
        }
    }

    pub fn permissions(&self) -> Option<&PermissionSet> {
        match &self.produced {
            Produced::Permissions(p) => Some(p),
            Produced::Rules(_) => None,
        }
    }
}

/// Expands a macro usage to a fixpoint and interprets the result.
pub fn expand(
    def: &MacroDefinition,
    args: &[Identifier],
    table: &MacroTable,
) -> Result<MacroExpansion, MacroError> {
    let text = expand_text(def, args, table)?;
    match def.kind {
        MacroKind::PermissionSet => {
            let permissions = list_items(&text).ok_or_else(|| MacroError::Expansion {
                name: def.name.to_string(),
                source: SyntaxError {
                    line: def.origin.line,
                    message: format!("`{}` is not a list of names", text.trim()),
                },
            })?;
            Ok(MacroExpansion {
                name: def.name.clone(),
                args: args.to_vec(),
                text,
                statements: Vec::new(),
                produced: Produced::Permissions(permissions.into_iter().collect()),
                unsupported: 0,
            })
        }
        MacroKind::RuleBlock => {
            let statements = syntax::parse_statements(&text, table).map_err(|source| {
                MacroError::Expansion {
                    name: def.name.to_string(),
                    source,
                }
            })?;
            let mut rules = Vec::new();
            let mut unsupported = 0;
            collect_rules(&statements, &mut rules, &mut unsupported);
            Ok(MacroExpansion {
                name: def.name.clone(),
                args: args.to_vec(),
                text,
                statements,
                produced: Produced::Rules(rules),
                unsupported,
            })
        }
        MacroKind::Guard => Err(MacroError::Guard {
            name: def.name.to_string(),
        }),
    }
}

fn collect_rules(statements: &[Statement], rules: &mut Vec<Rule>, unsupported: &mut usize) {
    for stmt in statements {
        match &stmt.kind {
            StatementKind::Guard { body, .. } => collect_rules(body, rules, unsupported),
            kind => match lower_rules(kind, &mut |set| set.plain().map(<[Identifier]>::to_vec)) {
                Some(Ok(mut lowered)) => rules.append(&mut lowered),
                Some(Err(_)) => *unsupported += 1,
                None => {}
            },
        }
    }
}

/// Marker for rule statements whose sets cannot be made concrete.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnsupportedSet;

/// Lowers a rule statement to concrete rules (cross product of its source,
/// target and class sets, repeated items included). `resolve` turns a set expression into a plain
/// list. Returns `None` for non-rule statements.
pub fn lower_rules(
    kind: &StatementKind,
    resolve: &mut dyn FnMut(&SetExpr) -> Option<Vec<Identifier>>,
) -> Option<Result<Vec<Rule>, UnsupportedSet>> {
    let result = match kind {
        StatementKind::Av {
            kind,
            source,
            target,
            classes,
            permissions,
        } => (|| {
            let sources = resolve(source).ok_or(UnsupportedSet)?;
            let targets = resolve(target).ok_or(UnsupportedSet)?;
            let classes = resolve(classes).ok_or(UnsupportedSet)?;
            let perms: PermissionSet = resolve(permissions).ok_or(UnsupportedSet)?.into_iter().collect();
            let mut out = Vec::new();
            for s in &sources {
                for t in &targets {
                    for c in &classes {
                        let rule = AvRule::new(*kind, s.clone(), t.clone(), c.clone(), perms.clone())
                            .map_err(|_| UnsupportedSet)?;
                        out.push(Rule::Av(rule));
                    }
                }
            }
            Ok(out)
        })(),
        StatementKind::TypeTransition {
            source,
            target,
            classes,
            default_type,
            object_name,
        } => (|| {
            let sources = resolve(source).ok_or(UnsupportedSet)?;
            let targets = resolve(target).ok_or(UnsupportedSet)?;
            let classes = resolve(classes).ok_or(UnsupportedSet)?;
            let mut out = Vec::new();
            for s in &sources {
                for t in &targets {
                    for c in &classes {
                        out.push(Rule::Te(TeRule {
                            source: s.clone(),
                            target: t.clone(),
                            class: c.clone(),
                            default_type: default_type.clone(),
                            object_name: object_name.clone(),
                        }));
                    }
                }
            }
            Ok(out)
        })(),
        _ => return None,
    };
    Some(result)
}

/// Names of a brace-free or braced list (nested braces flattened).
/// `None` when the text contains anything else.
fn list_items(text: &str) -> Option<Vec<Identifier>> {
    let tokens = syntax::tokenize(text).ok()?;
    let mut out = Vec::new();
    for tok in tokens {
        match tok.tok {
            syntax::Tok::Word(w) => out.push(Identifier::new(&w).ok()?),
            syntax::Tok::LBrace | syntax::Tok::RBrace => {}
            _ => return None,
        }
    }
    Some(out)
}

/// Classifies a definition as permission set or rule block.
pub fn classify(def: &MacroDefinition, table: &MacroTable) -> MacroKind {
    classify_with_reason(def, table).0
}

fn classify_with_reason(def: &MacroDefinition, table: &MacroTable) -> (MacroKind, Option<String>) {
    if table.is_guard(def.name.as_str()) {
        return (MacroKind::Guard, None);
    }
    if def.arity > 0 {
        return (MacroKind::RuleBlock, None);
    }
    let probe = MacroDefinition {
        kind: MacroKind::RuleBlock,
        ..def.clone()
    };
    let text = match expand_text(&probe, &[], table) {
        Ok(text) => text,
        Err(e) => {
            return (
                MacroKind::RuleBlock,
                Some(format!("macro `{}` could not be expanded: {e}", def.name)),
            )
        }
    };
    if text.contains(';') {
        return (MacroKind::RuleBlock, None);
    }
    let braced = text.trim_start().starts_with('{');
    match list_items(&text) {
        Some(items) if braced || items.len() >= 2 => (MacroKind::PermissionSet, None),
        _ => (
            MacroKind::RuleBlock,
            Some(format!(
                "macro `{}` is neither a permission list nor a rule block; treated as rule block",
                def.name
            )),
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GLOBAL: &str = "\
#####################################
# Common groupings of permissions.
#
define(`r_file_perms', `{ getattr open read ioctl lock }')
define(`r_dir_perms', `{ open getattr read search ioctl }')
dnl a dnl comment
define(`notdevfile_class_set', `{ file lnk_file sock_file fifo_file }')
";

    const TE: &str = "\
# unix_socket_connect(clientdomain, socket, serverdomain)
define(`unix_socket_connect', `
allow $1 $2_socket:sock_file write;
allow $1 $3:unix_stream_socket connectto;
')
define(`x', `allow $1 $2:dir r_dir_perms;')
";

    fn table() -> MacroTable {
        let t = parse_macro_file(GLOBAL, Path::new("global_macros"), MacroTable::new()).unwrap();
        parse_macro_file(TE, Path::new("te_macros"), t).unwrap()
    }

    fn ids(items: &[&str]) -> Vec<Identifier> {
        items.iter().map(|s| Identifier::new(s).unwrap()).collect()
    }

    #[test]
    fn permission_set_macro() {
        let t = table();
        let def = t.get("r_file_perms").unwrap();
        assert_eq!(def.kind, MacroKind::PermissionSet);
        assert_eq!(def.arity, 0);
        assert_eq!(def.origin.line, 4);
        let exp = expand(def, &[], &t).unwrap();
        let want: PermissionSet = ids(&["getattr", "open", "read", "ioctl", "lock"]).into_iter().collect();
        assert_eq!(exp.permissions(), Some(&want));
    }

    #[test]
    fn rule_block_macro_arity() {
        let t = table();
        let x = t.get("x").unwrap();
        assert_eq!(x.kind, MacroKind::RuleBlock);
        assert_eq!(x.arity, 2);
        assert_eq!(t.get("unix_socket_connect").unwrap().arity, 3);
        assert_eq!(classify(t.get("r_dir_perms").unwrap(), &t), MacroKind::PermissionSet);
    }

    #[test]
    fn unix_socket_connect_expansion() {
        let t = table();
        let exp = expand(t.get("unix_socket_connect").unwrap(), &ids(&["a", "b", "c"]), &t).unwrap();
        let text: Vec<String> = exp.rules().iter().map(ToString::to_string).collect();
        assert_eq!(
            text,
            [
                "allow a b_socket:sock_file write;",
                "allow a c:unix_stream_socket connectto;"
            ]
        );
    }

    #[test]
    fn nested_expansion_reaches_fixpoint() {
        let t = table();
        let exp = expand(t.get("x").unwrap(), &ids(&["a", "b"]), &t).unwrap();
        assert_eq!(exp.rules().len(), 1);
        assert_eq!(
            exp.rules()[0].to_string(),
            "allow a b:dir { getattr ioctl open read search };"
        );
        assert!(!exp.text.contains('$'));
    }

    #[test]
    fn class_set_macro_multiplies_rules() {
        let src = "define(`m', `allow $1 $2:notdevfile_class_set r_file_perms;')";
        let t = parse_macro_file(src, Path::new("m"), table()).unwrap();
        let exp = expand(t.get("m").unwrap(), &ids(&["a", "b"]), &t).unwrap();
        assert_eq!(exp.rules().len(), 4);
    }

    #[test]
    fn zero_arity_rule_block() {
        let src = "define(`base_rules', `allow init kernel:process signal;')";
        let t = parse_macro_file(src, Path::new("m"), MacroTable::new()).unwrap();
        assert_eq!(t.get("base_rules").unwrap().kind, MacroKind::RuleBlock);
    }

    #[test]
    fn bare_name_is_rule_block_with_warning() {
        let src = "define(`just_a_type', `system_file')";
        let t = parse_macro_file(src, Path::new("m"), MacroTable::new()).unwrap();
        assert_eq!(t.get("just_a_type").unwrap().kind, MacroKind::RuleBlock);
        assert!(t.warnings().iter().any(|w| w.message.contains("just_a_type")));
    }

    #[test]
    fn unbalanced_backquote_reports_line() {
        let src = "define(`a', `{ read }')\n\ndefine(`b', `{ write }')\ndefine(`broken, `{ x }')\n";
        let err = parse_macro_file(src, Path::new("m"), MacroTable::new()).unwrap_err();
        match err {
            MacroError::Unbalanced { line, .. } => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unbalanced_parenthesis_reports_line() {
        let src = "\ndefine(`a', `{ read }'\n";
        let err = parse_macro_file(src, Path::new("m"), MacroTable::new()).unwrap_err();
        assert_eq!(err, MacroError::Unbalanced { line: 2, what: "parenthesis" });
    }

    #[test]
    fn self_reference_is_a_cycle() {
        let src = "define(`loop', `allow a b:c loop;')";
        let t = parse_macro_file(src, Path::new("m"), MacroTable::new()).unwrap();
        let err = expand(t.get("loop").unwrap(), &[], &t).unwrap_err();
        assert!(matches!(err, MacroError::Cycle { ref cycle } if cycle == &["loop", "loop"]));
    }

    #[test]
    fn mutual_recursion_is_a_cycle() {
        let src = "define(`p', `{ q }')\ndefine(`q', `{ p }')";
        let t = parse_macro_file(src, Path::new("m"), MacroTable::new()).unwrap();
        let err = expand_text(t.get("p").unwrap(), &[], &t).unwrap_err();
        assert!(err.to_string().contains("p -> q -> p"), "{err}");
    }

    #[test]
    fn ifelse_is_rejected_unless_guard() {
        let src = "define(`cond', ifelse(target_build_variant, `eng', $1))";
        let err = parse_macro_file(src, Path::new("m"), MacroTable::new()).unwrap_err();
        assert!(matches!(err, MacroError::Unsupported { ref name, .. } if name == "ifelse"));

        let guard = "define(`userdebug_or_eng', ifelse(target_build_variant, `eng', $1, ifelse(target_build_variant, `userdebug', $1)))";
        let t = parse_macro_file(guard, Path::new("te_macros"), MacroTable::new()).unwrap();
        assert_eq!(t.get("userdebug_or_eng").unwrap().kind, MacroKind::Guard);
    }

    #[test]
    fn top_level_ifdef_rejected() {
        let err = parse_macro_file("ifdef(`x', `y')", Path::new("m"), MacroTable::new()).unwrap_err();
        assert!(matches!(err, MacroError::Unsupported { .. }));
    }

    #[test]
    fn redefinition_warns_and_replaces() {
        let t = parse_macro_file(
            "define(`p', `{ a b }')\ndefine(`p', `{ c d }')",
            Path::new("m"),
            MacroTable::new(),
        )
        .unwrap();
        let exp = expand(t.get("p").unwrap(), &[], &t).unwrap();
        assert!(exp.permissions().unwrap().contains("c"));
        assert!(t.warnings().iter().any(|w| w.message.contains("redefined")));
    }

    #[test]
    fn guard_inside_macro_body() {
        let src = "define(`dbg', `userdebug_or_eng(`allow $1 su:process transition;')')";
        let t = parse_macro_file(src, Path::new("m"), MacroTable::new()).unwrap();
        let exp = expand(t.get("dbg").unwrap(), &ids(&["shell"]), &t).unwrap();
        assert_eq!(exp.rules().len(), 1);
        assert!(matches!(exp.statements[0].kind, StatementKind::Guard { .. }));
    }

    #[test]
    fn wrong_arity_rejected() {
        let t = table();
        let err = expand(t.get("x").unwrap(), &ids(&["a"]), &t).unwrap_err();
        assert!(matches!(err, MacroError::Arity { expected: 2, found: 1, .. }));
    }

    #[test]
    fn macro_argument_cannot_be_a_macro() {
        let src = "define(`inner', `allow $1 b:c d;')\ndefine(`outer', `inner(r_dir_perms)')";
        let t = parse_macro_file(src, Path::new("m"), table()).unwrap();
        let err = expand(t.get("outer").unwrap(), &[], &t).unwrap_err();
        assert!(matches!(err, MacroError::BadArgument { .. }));
    }
}
