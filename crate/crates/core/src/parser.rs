//! Builds a [`Policy`] from an ordered set of source files.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;
use walkdir::WalkDir;

use crate::m4::{self, MacroError, MacroKind, MacroTable};
use crate::model::{
    AttributeOrigin, Diagnostic, Identifier, MacroUsage, MappedRule, MergeError, Policy,
    PermissionSet, Rule, SecurityClass, SourceLocation,
};
use crate::syntax::{self, SetExpr, Statement, StatementKind};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceFile {
    pub path: Arc<Path>,
    pub contents: String,
}

/// Ordered policy sources. Macro files are read before any policy file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SourceSet {
    pub files: Vec<SourceFile>,
    pub macro_files: Vec<SourceFile>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    Policy,
    Macros,
}

/// How a file found in a policy directory is used, by file name.
pub fn classify_source(name: &str) -> Option<SourceKind> {
    if name.starts_with('.') {
        None
    } else if name == "global_macros" || name == "te_macros" || name.ends_with("_macros") {
        Some(SourceKind::Macros)
    } else if DECLARATION_FILES.contains(&name) || name.ends_with(".te") {
        Some(SourceKind::Policy)
    } else {
        None
    }
}

const DECLARATION_FILES: &[&str] = &["security_classes", "access_vectors", "attributes"];

impl SourceSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_policy(mut self, path: impl AsRef<Path>, contents: impl Into<String>) -> Self {
        self.push_policy(path, contents);
        self
    }

    pub fn with_macros(mut self, path: impl AsRef<Path>, contents: impl Into<String>) -> Self {
        self.push_macros(path, contents);
        self
    }

    pub fn push_policy(&mut self, path: impl AsRef<Path>, contents: impl Into<String>) {
        self.files.push(SourceFile {
            path: Arc::from(path.as_ref()),
            contents: contents.into(),
        });
    }

    pub fn push_macros(&mut self, path: impl AsRef<Path>, contents: impl Into<String>) {
        self.macro_files.push(SourceFile {
            path: Arc::from(path.as_ref()),
            contents: contents.into(),
        });
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty() && self.macro_files.is_empty()
    }

    /// Reads the policy sources of each directory in order (AOSP tree
    /// first, then overlays). Within a directory, declaration files
    /// (`security_classes`, `access_vectors`, `attributes`) come first,
    /// then `.te` files by path.
    pub fn from_dirs<P: AsRef<Path>>(dirs: &[P]) -> Result<Self, ParseError> {
        let mut set = SourceSet::new();
        for dir in dirs {
            let dir = dir.as_ref();
            if !dir.is_dir() {
                return Err(ParseError::Io {
                    path: dir.to_path_buf(),
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
                });
            }
            let mut policy = Vec::new();
            for entry in WalkDir::new(dir).sort_by_file_name() {
                let entry = entry.map_err(|e| ParseError::Io {
                    path: e.path().unwrap_or(dir).to_path_buf(),
                    source: e.into(),
                })?;
                if !entry.file_type().is_file() {
                    continue;
                }
                let name = entry.file_name().to_string_lossy();
                let Some(kind) = classify_source(&name) else {
                    continue;
                };
                let path = entry.path().to_path_buf();
                let contents = fs::read_to_string(&path).map_err(|source| ParseError::Io {
                    path: path.clone(),
                    source,
                })?;
                match kind {
                    SourceKind::Macros => set.push_macros(&path, contents),
                    SourceKind::Policy => {
                        let rank = DECLARATION_FILES
                            .iter()
                            .position(|d| *d == name)
                            .unwrap_or(DECLARATION_FILES.len());
                        policy.push((rank, path, contents));
                    }
                }
            }
            policy.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
            for (_, path, contents) in policy {
                set.push_policy(path, contents);
            }
        }
        if set.files.is_empty() {
            let dirs: Vec<String> = dirs.iter().map(|d| d.as_ref().display().to_string()).collect();
            return Err(ParseError::NoSources {
                dirs: dirs.join(", "),
            });
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UndeclaredPolicy {
    #[default]
    Error,
    Warn,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseOptions {
    pub undeclared: UndeclaredPolicy,
    /// Conditional wrapper macros whose definitions are not interpreted.
    pub guard_macros: Vec<String>,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            undeclared: UndeclaredPolicy::Error,
            guard_macros: m4::DEFAULT_GUARDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Macro { path: PathBuf, source: MacroError },
    #[error("{location}: {message}")]
    Syntax {
        location: SourceLocation,
        message: String,
    },
    #[error("{location}: {source}")]
    Expansion {
        location: SourceLocation,
        source: MacroError,
    },
    #[error("{}", undeclared_summary(.items))]
    Undeclared {
        items: Vec<(SourceLocation, Identifier)>,
    },
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error("no policy sources found in {dirs}")]
    NoSources { dirs: String },
}

fn undeclared_summary(items: &[(SourceLocation, Identifier)]) -> String {
    const SHOWN: usize = 5;
    let mut parts: Vec<String> = items
        .iter()
        .take(SHOWN)
        .map(|(loc, id)| format!("`{id}` at {loc}"))
        .collect();
    if items.len() > SHOWN {
        parts.push(format!("and {} more", items.len() - SHOWN));
    }
    format!("undeclared type or attribute: {}", parts.join(", "))
}

/// Parses a source set with default options.
pub fn parse_policy(src: &SourceSet) -> Result<Policy, ParseError> {
    parse_policy_with(src, &ParseOptions::default())
}

pub fn parse_policy_with(src: &SourceSet, opts: &ParseOptions) -> Result<Policy, ParseError> {
    let mut table = MacroTable::with_guards(opts.guard_macros.iter().cloned());
    let mut line_counts = BTreeMap::new();
    for file in &src.macro_files {
        table = m4::parse_macro_file(&file.contents, &file.path, table).map_err(|source| {
            ParseError::Macro {
                path: file.path.to_path_buf(),
                source,
            }
        })?;
        line_counts.insert(file.path.clone(), line_count(&file.contents));
    }

    let parsed = tokenize_files(&src.files, &table)?;

    let mut builder = Builder {
        table: &table,
        perm_cache: HashMap::new(),
        rules: Vec::new(),
        neverallows: Vec::new(),
        types: BTreeSet::new(),
        attributes: BTreeMap::new(),
        memberships: Vec::new(),
        aliases: BTreeMap::new(),
        classes: BTreeMap::new(),
        commons: BTreeMap::new(),
        usages: Vec::new(),
        skipped: BTreeMap::new(),
        complex_sets: 0,
        diagnostics: table.warnings().to_vec(),
    };
    for (file, statements) in src.files.iter().zip(parsed) {
        line_counts.insert(file.path.clone(), line_count(&file.contents));
        let ctx = Context {
            file: &file.path,
            text: &file.contents,
            guard: None,
            usage: None,
        };
        builder.statements(&statements, &ctx)?;
    }
    builder.finish(line_counts, opts)
}

fn line_count(text: &str) -> usize {
    text.lines().count().max(1)
}

fn tokenize_files(files: &[SourceFile], table: &MacroTable) -> Result<Vec<Vec<Statement>>, ParseError> {
    let parse = |file: &SourceFile| {
        syntax::parse_statements(&file.contents, table).map_err(|e| ParseError::Syntax {
            location: SourceLocation::new(file.path.clone(), e.line),
            message: e.message,
        })
    };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(files.len());
    if workers <= 1 {
        return files.iter().map(parse).collect();
    }
    let chunk = files.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = files
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(parse).collect::<Result<Vec<_>, _>>()))
            .collect();
        let mut out = Vec::with_capacity(files.len());
        for handle in handles {
            out.extend(handle.join().expect("tokenizer thread panicked")?);
        }
        Ok(out)
    })
}

struct Context<'a> {
    file: &'a Arc<Path>,
    text: &'a str,
    guard: Option<Identifier>,
    /// Set while processing the statements of a macro expansion.
    usage: Option<(Arc<MacroUsage>, Arc<str>)>,
}

struct Builder<'a> {
    table: &'a MacroTable,
    perm_cache: HashMap<String, PermissionSet>,
    rules: Vec<MappedRule>,
    neverallows: Vec<MappedRule>,
    types: BTreeSet<Identifier>,
    attributes: BTreeMap<Identifier, BTreeSet<Identifier>>,
    memberships: Vec<(Identifier, Identifier, SourceLocation)>,
    aliases: BTreeMap<Identifier, (Identifier, SourceLocation)>,
    classes: BTreeMap<Identifier, (Option<Identifier>, BTreeSet<Identifier>)>,
    commons: BTreeMap<Identifier, BTreeSet<Identifier>>,
    usages: Vec<MacroUsage>,
    skipped: BTreeMap<String, usize>,
    complex_sets: usize,
    diagnostics: Vec<Diagnostic>,
}

impl Builder<'_> {
    fn statements(&mut self, statements: &[Statement], ctx: &Context<'_>) -> Result<(), ParseError> {
        for stmt in statements {
            self.statement(stmt, ctx)?;
        }
        Ok(())
    }

    fn statement(&mut self, stmt: &Statement, ctx: &Context<'_>) -> Result<(), ParseError> {
        let (location, origin) = match &ctx.usage {
            Some((usage, text)) => (usage.location.clone(), text.clone()),
            None => (
                SourceLocation::new(ctx.file.clone(), stmt.line),
                Arc::from(ctx.text[stmt.span.clone()].trim()),
            ),
        };
        match &stmt.kind {
            StatementKind::Av { .. } | StatementKind::TypeTransition { .. } => {
                let mut failure = None;
                let lowered = {
                    let table = self.table;
                    let cache = &mut self.perm_cache;
                    m4::lower_rules(&stmt.kind, &mut |set| {
                        match resolve_set(set, table, cache) {
                            Ok(items) => items,
                            Err(e) => {
                                failure.get_or_insert(e);
                                None
                            }
                        }
                    })
                };
                if let Some(source) = failure {
                    return Err(ParseError::Expansion { location, source });
                }
                match lowered {
                    Some(Ok(rules)) => {
                        for rule in rules {
                            let mut mapped = MappedRule::new(rule, location.clone(), origin.clone());
                            mapped.via_macro = ctx.usage.as_ref().map(|(u, _)| u.clone());
                            mapped.guard = ctx.guard.clone();
                            let is_neverallow = matches!(
                                &mapped.rule,
                                Rule::Av(av) if av.kind == crate::model::AvKind::Neverallow
                            );
                            if is_neverallow {
                                self.neverallows.push(mapped);
                            } else {
                                self.rules.push(mapped);
                            }
                        }
                    }
                    Some(Err(_)) => self.complex_sets += 1,
                    None => {}
                }
            }
            StatementKind::Type {
                name,
                aliases,
                attributes,
            } => {
                self.types.insert(name.clone());
                for alias in aliases {
                    self.aliases.insert(alias.clone(), (name.clone(), location.clone()));
                }
                for attr in attributes {
                    self.memberships.push((name.clone(), attr.clone(), location.clone()));
                }
            }
            StatementKind::Attribute { name } => {
                self.attributes.entry(name.clone()).or_default();
            }
            StatementKind::TypeAttribute { name, attributes } => {
                for attr in attributes {
                    self.memberships.push((name.clone(), attr.clone(), location.clone()));
                }
            }
            StatementKind::TypeAlias { name, aliases } => {
                for alias in aliases {
                    self.aliases.insert(alias.clone(), (name.clone(), location.clone()));
                }
            }
            StatementKind::Class {
                name,
                inherits,
                permissions,
            } => {
                let entry = self.classes.entry(name.clone()).or_default();
                if inherits.is_some() {
                    entry.0 = inherits.clone();
                }
                entry.1.extend(permissions.iter().cloned());
            }
            StatementKind::Common { name, permissions } => {
                self.commons
                    .entry(name.clone())
                    .or_default()
                    .extend(permissions.iter().cloned());
            }
            StatementKind::MacroCall { name, args } => {
                self.macro_call(name, args, location, origin, ctx)?;
            }
            StatementKind::Guard { name, body } => {
                let inner = Context {
                    file: ctx.file,
                    text: ctx.text,
                    guard: ctx.guard.clone().or_else(|| Some(name.clone())),
                    usage: ctx.usage.clone(),
                };
                self.statements(body, &inner)?;
            }
            StatementKind::Ignored { keyword } => {
                if keyword != ";" {
                    *self.skipped.entry(keyword.clone()).or_default() += 1;
                }
            }
        }
        Ok(())
    }

    fn macro_call(
        &mut self,
        name: &Identifier,
        args: &[Identifier],
        location: SourceLocation,
        origin: Arc<str>,
        ctx: &Context<'_>,
    ) -> Result<(), ParseError> {
        let def = self.table.get(name.as_str()).ok_or_else(|| ParseError::Expansion {
            location: location.clone(),
            source: MacroError::Unknown {
                name: name.to_string(),
                from: location.file.display().to_string(),
            },
        })?;
        let expansion = m4::expand(def, args, self.table).map_err(|source| ParseError::Expansion {
            location: location.clone(),
            source,
        })?;
        let usage = MacroUsage {
            name: name.clone(),
            args: args.to_vec(),
            location,
        };
        let inner = Context {
            file: ctx.file,
            text: ctx.text,
            guard: ctx.guard.clone(),
            // a usage nested in another usage's expansion maps to the outer one
            usage: match &ctx.usage {
                Some(outer) => Some(outer.clone()),
                None => {
                    self.usages.push(usage.clone());
                    Some((Arc::new(usage), origin))
                }
            },
        };
        self.statements(&expansion.statements, &inner)
    }

    fn finish(
        mut self,
        line_counts: BTreeMap<Arc<Path>, usize>,
        opts: &ParseOptions,
    ) -> Result<Policy, ParseError> {
        let mut undeclared: Vec<(SourceLocation, Identifier)> = Vec::new();
        let resolve_alias = |id: &Identifier, aliases: &BTreeMap<Identifier, (Identifier, SourceLocation)>| {
            aliases.get(id).map_or_else(|| id.clone(), |(primary, _)| primary.clone())
        };

        for (member, attr, location) in std::mem::take(&mut self.memberships) {
            let member = resolve_alias(&member, &self.aliases);
            if !self.types.contains(&member) {
                undeclared.push((location.clone(), member.clone()));
                continue;
            }
            match self.attributes.get_mut(&attr) {
                Some(members) => {
                    members.insert(member);
                }
                None => undeclared.push((location, attr)),
            }
        }

        let aliases = std::mem::take(&mut self.aliases);
        for mapped in self.rules.iter_mut().chain(self.neverallows.iter_mut()) {
            let source = resolve_alias(mapped.rule.source(), &aliases);
            let target = resolve_alias(mapped.rule.target(), &aliases);
            if &source != mapped.rule.source() || &target != mapped.rule.target() {
                mapped.rule = mapped.rule.with_endpoints(source, target);
            }
            if let Rule::Te(te) = &mut mapped.rule {
                te.default_type = resolve_alias(&te.default_type, &aliases);
            }
        }

        let declared = |id: &Identifier| {
            id.is_self() || self.types.contains(id) || self.attributes.contains_key(id)
        };
        for mapped in self.rules.iter().chain(self.neverallows.iter()) {
            let mut ids = vec![mapped.rule.source(), mapped.rule.target()];
            if let Rule::Te(te) = &mapped.rule {
                ids.push(&te.default_type);
            }
            for id in ids {
                if !declared(id) {
                    undeclared.push((mapped.location.clone(), id.clone()));
                }
            }
        }
        undeclared.sort();
        undeclared.dedup();
        if !undeclared.is_empty() {
            match opts.undeclared {
                UndeclaredPolicy::Error => return Err(ParseError::Undeclared { items: undeclared }),
                UndeclaredPolicy::Warn => {
                    for (location, id) in undeclared {
                        self.diagnostics.push(Diagnostic::new(
                            Some(location),
                            format!("undeclared type or attribute `{id}`"),
                        ));
                    }
                }
            }
        }

        let mut classes = BTreeMap::new();
        for (name, (inherits, own)) in &self.classes {
            let mut known = own.clone();
            if let Some(common) = inherits {
                match self.commons.get(common) {
                    Some(perms) => known.extend(perms.iter().cloned()),
                    None => self.diagnostics.push(Diagnostic::new(
                        None,
                        format!("class `{name}` inherits unknown common `{common}`"),
                    )),
                }
            }
            classes.insert(
                name.clone(),
                SecurityClass {
                    name: name.clone(),
                    known_permissions: known,
                },
            );
        }
        self.check_classes(&classes);

        for (keyword, count) in &self.skipped {
            self.diagnostics.push(Diagnostic::new(
                None,
                format!("skipped {count} unsupported `{keyword}` statement(s)"),
            ));
        }
        if self.complex_sets > 0 {
            self.diagnostics.push(Diagnostic::new(
                None,
                format!(
                    "skipped {} rule statement(s) using `~`, `*` or `-` set expressions",
                    self.complex_sets
                ),
            ));
        }

        let rules = crate::model::merge_rules(self.rules)?;
        let policy = Policy {
            rules,
            expanded_rules: Vec::new(),
            neverallows: self.neverallows,
            types: self.types,
            attributes: self.attributes,
            classes,
            macros: self.table.clone(),
            macro_usages: self.usages,
            diagnostics: self.diagnostics,
            line_counts,
        };
        Ok(expand_attributes(&policy))
    }

    fn check_classes(&mut self, classes: &BTreeMap<Identifier, SecurityClass>) {
        if classes.is_empty() {
            return;
        }
        let mut seen = BTreeSet::new();
        for mapped in &self.rules {
            let class = mapped.rule.class();
            let Some(known) = classes.get(class) else {
                if seen.insert((class.clone(), None)) {
                    self.diagnostics.push(Diagnostic::new(
                        Some(mapped.location.clone()),
                        format!("undeclared class `{class}`"),
                    ));
                }
                continue;
            };
            if known.known_permissions.is_empty() {
                continue;
            }
            if let Some(av) = mapped.rule.as_av() {
                for perm in &av.permissions {
                    if !known.known_permissions.contains(perm)
                        && seen.insert((class.clone(), Some(perm.clone())))
                    {
                        self.diagnostics.push(Diagnostic::new(
                            Some(mapped.location.clone()),
                            format!("permission `{perm}` is not defined for class `{class}`"),
                        ));
                    }
                }
            }
        }
    }
}

/// Resolves a plain set, expanding permission-set macro names in place.
/// `Ok(None)` for sets using `~`, `*` or `-`.
fn resolve_set(
    set: &SetExpr,
    table: &MacroTable,
    cache: &mut HashMap<String, PermissionSet>,
) -> Result<Option<Vec<Identifier>>, MacroError> {
    let Some(items) = set.plain() else {
        return Ok(None);
    };
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        match table.get(item.as_str()) {
            Some(def) if def.kind == MacroKind::PermissionSet => {
                if !cache.contains_key(item.as_str()) {
                    let exp = m4::expand(def, &[], table)?;
                    let perms = exp.permissions().cloned().unwrap_or_default();
                    cache.insert(item.as_str().to_string(), perms);
                }
                out.extend(cache[item.as_str()].iter().cloned());
            }
            _ => out.push(item.clone()),
        }
    }
    Ok(Some(out))
}

/// Recomputes the attribute-expanded view: every rule whose source or
/// target is an attribute is replicated once per member type, keeping its
/// location. The unexpanded view is left as it is.
pub fn expand_attributes(policy: &Policy) -> Policy {
    let mut out = policy.clone();
    let mut expanded = Vec::with_capacity(policy.rules.len());
    let mut empty_warned = BTreeSet::new();
    let members = |id: &Identifier| -> Option<Vec<Identifier>> {
        policy
            .attributes
            .get(id)
            .map(|m| m.iter().cloned().collect())
    };
    for mapped in &policy.rules {
        let source = mapped.rule.source();
        let target = mapped.rule.target();
        let source_members = members(source);
        let target_members = if target.is_self() { None } else { members(target) };
        if source_members.is_none() && target_members.is_none() {
            expanded.push(mapped.clone());
            continue;
        }
        let sources = source_members.unwrap_or_else(|| vec![source.clone()]);
        let targets = target_members.unwrap_or_else(|| vec![target.clone()]);
        if sources.is_empty() || targets.is_empty() {
            for attr in [source, target] {
                if policy.attributes.get(attr).is_some_and(BTreeSet::is_empty)
                    && empty_warned.insert(attr.clone())
                {
                    out.diagnostics.push(Diagnostic::new(
                        Some(mapped.location.clone()),
                        format!("attribute `{attr}` has no members; its rules vanish from the expanded view"),
                    ));
                }
            }
            continue;
        }
        let origin = AttributeOrigin {
            source: source.clone(),
            target: target.clone(),
        };
        for s in &sources {
            for t in &targets {
                let mut replica = mapped.clone();
                replica.rule = mapped.rule.with_endpoints(s.clone(), t.clone());
                replica.attribute_origin = Some(origin.clone());
                expanded.push(replica);
            }
        }
    }
    out.expanded_rules = expanded;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RuleKind;

    const MACROS: &str = "\
define(`r_dir_perms', `{ open getattr read search ioctl }')
define(`unix_socket_connect', `
allow $1 $2_socket:sock_file write;
allow $1 $3:unix_stream_socket connectto;
')
";

    fn decls(types: &[&str]) -> String {
        types.iter().map(|t| format!("type {t};\n")).collect()
    }

    fn parse(te: &str) -> Result<Policy, ParseError> {
        let src = SourceSet::new()
            .with_macros("global_macros", MACROS)
            .with_policy("decls.te", decls(&["logd", "rootfs", "a", "b_socket", "c", "x", "y"]))
            .with_policy("domain.te", te);
        parse_policy(&src)
    }

    #[test]
    fn literal_rule_with_location() {
        let p = parse("\n\nallow logd rootfs:dir { getattr create open read search ioctl };\n").unwrap();
        assert_eq!(p.rules().len(), 1);
        let r = &p.rules()[0];
        assert_eq!(r.location.line, 3);
        assert_eq!(r.location.file.as_ref(), Path::new("domain.te"));
        assert_eq!(r.rule.as_av().unwrap().permissions.len(), 6);
        assert_eq!(
            &*r.origin_text,
            "allow logd rootfs:dir { getattr create open read search ioctl };"
        );
        assert!(r.via_macro.is_none());
    }

    #[test]
    fn macro_usage_maps_rules() {
        let p = parse("unix_socket_connect(a, b, c)\n").unwrap();
        assert_eq!(p.rules().len(), 2);
        for r in p.rules() {
            let usage = r.via_macro.as_ref().unwrap();
            assert_eq!(usage.name.as_str(), "unix_socket_connect");
            assert_eq!(r.location.line, 1);
            assert_eq!(&*r.origin_text, "unix_socket_connect(a, b, c)");
        }
        assert_eq!(p.macro_usages().len(), 1);
    }

    #[test]
    fn permission_macro_in_rule_is_expanded() {
        let p = parse("allow logd rootfs:dir { r_dir_perms create };").unwrap();
        let perms = &p.rules()[0].rule.as_av().unwrap().permissions;
        assert_eq!(perms.len(), 6);
        assert!(perms.contains("create") && perms.contains("search"));
    }

    #[test]
    fn empty_source_set() {
        let p = parse_policy(&SourceSet::new()).unwrap();
        assert!(p.rules().is_empty());
        assert_eq!(p.expanded_rule_count(), 0);
    }

    #[test]
    fn undeclared_reference_is_an_error_or_warning() {
        let err = parse("allow ghost x:file read;").unwrap_err();
        assert!(err.to_string().contains("`ghost` at domain.te:1"), "{err}");

        let src = SourceSet::new().with_policy("a.te", "allow ghost x:file read;");
        let opts = ParseOptions {
            undeclared: UndeclaredPolicy::Warn,
            ..ParseOptions::default()
        };
        let p = parse_policy_with(&src, &opts).unwrap();
        assert_eq!(p.rules().len(), 1);
        assert!(p.diagnostics().iter().any(|d| d.message.contains("ghost")));
    }

    #[test]
    fn wrong_macro_arity_is_an_error() {
        let err = parse("unix_socket_connect(a, b)").unwrap_err();
        assert!(matches!(err, ParseError::Expansion { source: MacroError::Arity { .. }, .. }));
    }

    #[test]
    fn unknown_statements_are_counted() {
        let p = parse("role r;\nrole s;\ngenfscon proc / u:object_r:proc:s0;\nallow x y:file read;").unwrap();
        let msgs: Vec<&str> = p.diagnostics().iter().map(|d| d.message.as_str()).collect();
        assert!(msgs.contains(&"skipped 2 unsupported `role` statement(s)"), "{msgs:?}");
        assert!(msgs.contains(&"skipped 1 unsupported `genfscon` statement(s)"));
    }

    #[test]
    fn duplicates_are_merged() {
        let p = parse("allow x y:file read;\nallow x y:file write;").unwrap();
        assert_eq!(p.rules().len(), 1);
        assert_eq!(p.rules()[0].merged_from[0].line, 2);
    }

    #[test]
    fn attribute_expansion() {
        let src = SourceSet::new().with_policy(
            "a.te",
            "attribute appdomain;\nattribute empty;\ntype a, appdomain;\ntype b;\ntypeattribute b appdomain;\ntype x;\n\
             allow appdomain x:file read;\nallow a x:file write;\nallow empty x:file read;\nallow appdomain self:process fork;\n",
        );
        let p = parse_policy(&src).unwrap();
        assert_eq!(p.rules().len(), 4);
        let expanded: Vec<String> = p.expanded_rules().iter().map(|r| r.rule.to_string()).collect();
        assert_eq!(
            expanded,
            [
                "allow a x:file read;",
                "allow b x:file read;",
                "allow a x:file write;",
                "allow a self:process fork;",
                "allow b self:process fork;",
            ]
        );
        assert_eq!(p.expanded_rules()[0].location.line, 7);
        assert_eq!(
            p.expanded_rules()[0].attribute_origin.as_ref().unwrap().source.as_str(),
            "appdomain"
        );
        assert!(p.diagnostics().iter().any(|d| d.message.contains("`empty` has no members")));
    }

    #[test]
    fn aliases_resolve_to_primary_type() {
        let src = SourceSet::new().with_policy(
            "a.te",
            "type a;\ntype b alias old_b;\ntypealias b alias older_b;\nallow a old_b:file read;\nallow a older_b:file write;",
        );
        let p = parse_policy(&src).unwrap();
        assert_eq!(p.rules().len(), 1);
        assert_eq!(p.rules()[0].rule.target().as_str(), "b");
    }

    #[test]
    fn guard_tags_rules() {
        let src = SourceSet::new()
            .with_policy("a.te", "type su;\ntype shell;\nuserdebug_or_eng(`\n  allow su shell:process transition;\n')\n");
        let p = parse_policy(&src).unwrap();
        assert_eq!(p.rules()[0].guard.as_ref().unwrap().as_str(), "userdebug_or_eng");
        assert_eq!(p.rules()[0].location.line, 4);
    }

    #[test]
    fn neverallows_kept_apart() {
        let p = parse("neverallow x y:file write;\nallow x y:file read;").unwrap();
        assert_eq!(p.rules().len(), 1);
        assert_eq!(p.neverallows().len(), 1);
        assert_eq!(p.rules()[0].rule.kind(), RuleKind::Allow);
    }

    #[test]
    fn class_vocabulary_warnings() {
        let src = SourceSet::new().with_policy(
            "a.te",
            "class file\ncommon file_base { read write }\nclass file inherits file_base { execute_no_trans }\ntype a;\nallow a a:file { read bogus };",
        );
        let p = parse_policy(&src).unwrap();
        assert_eq!(p.classes()["file"].known_permissions.len(), 3);
        assert!(p.diagnostics().iter().any(|d| d.message.contains("`bogus`")));
    }

    #[test]
    fn complex_sets_skipped_with_count() {
        let p = parse("allow { x -y } y:file read;\nallow x ~y:file read;").unwrap();
        assert!(p.rules().is_empty());
        assert!(p.diagnostics().iter().any(|d| d.message.contains("skipped 2 rule statement(s)")));
    }

    #[test]
    fn conflicting_transition_is_an_error() {
        let err = parse("type_transition x y:file a;\ntype_transition x y:file c;").unwrap_err();
        assert!(matches!(err, ParseError::Merge(_)));
    }

    #[test]
    fn deterministic() {
        let te = "allow x y:file read;\nunix_socket_connect(a, b, c)\nallow logd rootfs:dir r_dir_perms;";
        let a = parse(te).unwrap();
        let b = parse(te).unwrap();
        assert_eq!(a.rules(), b.rules());
        assert_eq!(a.expanded_rules(), b.expanded_rules());
    }

    #[test]
    fn source_kinds() {
        assert_eq!(classify_source("global_macros"), Some(SourceKind::Macros));
        assert_eq!(classify_source("ioctl_macros"), Some(SourceKind::Macros));
        assert_eq!(classify_source("domain.te"), Some(SourceKind::Policy));
        assert_eq!(classify_source("attributes"), Some(SourceKind::Policy));
        assert_eq!(classify_source("file_contexts"), None);
    }
}
