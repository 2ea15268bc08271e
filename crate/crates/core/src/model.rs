//! Immutable policy model: identifiers, access-vector and type-transition
//! rules, their mapping back to source text, and the parsed [`Policy`].

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::m4::MacroTable;

/// The literal `self` target token.
pub const SELF: &str = "self";

/// Returns true for characters allowed inside a policy identifier.
pub fn is_identifier_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.')
}

/// Returns true when `s` is a well-formed identifier.
pub fn is_identifier(s: &str) -> bool {
    !s.is_empty() && s.chars().all(is_identifier_char)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid identifier `{0}`")]
pub struct InvalidIdentifier(pub String);

/// A type, attribute, class or permission name.
///
/// Cheap to clone; the name is shared.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Identifier(Arc<str>);

impl Identifier {
    pub fn new(name: &str) -> Result<Self, InvalidIdentifier> {
        if is_identifier(name) {
            Ok(Self(Arc::from(name)))
        } else {
            Err(InvalidIdentifier(name.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_self(&self) -> bool {
        &*self.0 == SELF
    }
}

impl Borrow<str> for Identifier {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl AsRef<str> for Identifier {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Identifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for Identifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", &*self.0)
    }
}

impl TryFrom<&str> for Identifier {
    type Error = InvalidIdentifier;

    fn try_from(value: &str) -> Result<Self, Self::Error> {
        Identifier::new(value)
    }
}

/// Sorted, duplicate-free permission set.
pub type PermissionSet = BTreeSet<Identifier>;

/// An object class and, when access-vector definitions were parsed, the
/// permissions it defines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecurityClass {
    pub name: Identifier,
    pub known_permissions: BTreeSet<Identifier>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AvKind {
    Allow,
    Neverallow,
}

impl AvKind {
    pub fn keyword(self) -> &'static str {
        match self {
            AvKind::Allow => "allow",
            AvKind::Neverallow => "neverallow",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("access-vector rule `{0}` grants no permissions")]
pub struct EmptyPermissions(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AvRule {
    pub kind: AvKind,
    pub source: Identifier,
    pub target: Identifier,
    pub class: Identifier,
    pub permissions: PermissionSet,
}

impl AvRule {
    pub fn new(
        kind: AvKind,
        source: Identifier,
        target: Identifier,
        class: Identifier,
        permissions: PermissionSet,
    ) -> Result<Self, EmptyPermissions> {
        if permissions.is_empty() {
            return Err(EmptyPermissions(format!(
                "{} {} {}:{}",
                kind.keyword(),
                source,
                target,
                class
            )));
        }
        Ok(Self {
            kind,
            source,
            target,
            class,
            permissions,
        })
    }

    /// The type the permissions apply to, with `self` resolved to the source.
    pub fn effective_target(&self) -> &Identifier {
        if self.target.is_self() {
            &self.source
        } else {
            &self.target
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TeRule {
    pub source: Identifier,
    pub target: Identifier,
    pub class: Identifier,
    pub default_type: Identifier,
    /// Optional object name of a named type transition.
    pub object_name: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RuleKind {
    Allow,
    Neverallow,
    TypeTransition,
}

impl RuleKind {
    pub fn keyword(self) -> &'static str {
        match self {
            RuleKind::Allow => "allow",
            RuleKind::Neverallow => "neverallow",
            RuleKind::TypeTransition => "type_transition",
        }
    }
}

impl From<AvKind> for RuleKind {
    fn from(kind: AvKind) -> Self {
        match kind {
            AvKind::Allow => RuleKind::Allow,
            AvKind::Neverallow => RuleKind::Neverallow,
        }
    }
}

/// Canonical matching key: kind, source, target and class.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RuleKey {
    pub kind: RuleKind,
    pub source: Identifier,
    pub target: Identifier,
    pub class: Identifier,
}

impl fmt::Display for RuleKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {}:{}",
            self.kind.keyword(),
            self.source,
            self.target,
            self.class
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rule {
    Av(AvRule),
    Te(TeRule),
}

impl Rule {
    pub fn kind(&self) -> RuleKind {
        match self {
            Rule::Av(av) => av.kind.into(),
            Rule::Te(_) => RuleKind::TypeTransition,
        }
    }

    pub fn source(&self) -> &Identifier {
        match self {
            Rule::Av(av) => &av.source,
            Rule::Te(te) => &te.source,
        }
    }

    pub fn target(&self) -> &Identifier {
        match self {
            Rule::Av(av) => &av.target,
            Rule::Te(te) => &te.target,
        }
    }

    pub fn class(&self) -> &Identifier {
        match self {
            Rule::Av(av) => &av.class,
            Rule::Te(te) => &te.class,
        }
    }

    pub fn key(&self) -> RuleKey {
        RuleKey {
            kind: self.kind(),
            source: self.source().clone(),
            target: self.target().clone(),
            class: self.class().clone(),
        }
    }

    pub fn as_av(&self) -> Option<&AvRule> {
        match self {
            Rule::Av(av) => Some(av),
            Rule::Te(_) => None,
        }
    }

    pub fn as_te(&self) -> Option<&TeRule> {
        match self {
            Rule::Te(te) => Some(te),
            Rule::Av(_) => None,
        }
    }

    /// Returns a copy with source and target replaced.
    pub fn with_endpoints(&self, source: Identifier, target: Identifier) -> Rule {
        match self {
            Rule::Av(av) => Rule::Av(AvRule {
                source,
                target,
                ..av.clone()
            }),
            Rule::Te(te) => Rule::Te(TeRule {
                source,
                target,
                ..te.clone()
            }),
        }
    }
}

/// Canonical statement text, e.g. `allow a b:file { read write };`.
impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::Av(av) => {
                write!(
                    f,
                    "{} {} {}:{} ",
                    av.kind.keyword(),
                    av.source,
                    av.target,
                    av.class
                )?;
                write_permissions(f, av.permissions.iter().map(Identifier::as_str))?;
                f.write_str(";")
            }
            Rule::Te(te) => {
                write!(
                    f,
                    "type_transition {} {}:{} {}",
                    te.source, te.target, te.class, te.default_type
                )?;
                if let Some(name) = &te.object_name {
                    write!(f, " \"{name}\"")?;
                }
                f.write_str(";")
            }
        }
    }
}

/// Writes a permission list: a bare token for one item, braces otherwise.
pub fn write_permissions<'a, W: fmt::Write>(
    out: &mut W,
    items: impl IntoIterator<Item = &'a str>,
) -> fmt::Result {
    let items: Vec<&str> = items.into_iter().collect();
    if items.len() == 1 {
        out.write_str(items[0])
    } else {
        out.write_str("{ ")?;
        for item in items {
            out.write_str(item)?;
            out.write_str(" ")?;
        }
        out.write_str("}")
    }
}

/// Canonical key string (`kind source target:class`) of a rule.
pub fn rule_key(rule: &Rule) -> String {
    rule.key().to_string()
}

/// File and line of an unexpanded statement.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SourceLocation {
    pub file: Arc<Path>,
    pub line: usize,
}

impl SourceLocation {
    pub fn new(file: Arc<Path>, line: usize) -> Self {
        Self { file, line }
    }
}

impl fmt::Display for SourceLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.file.display(), self.line)
    }
}

/// A rule-block macro usage found in the policy sources.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MacroUsage {
    pub name: Identifier,
    pub args: Vec<Identifier>,
    pub location: SourceLocation,
}

impl MacroUsage {
    /// Source form of the usage: `name(a, b)`, or `name` without arguments.
    pub fn call_text(name: &str, args: &[Identifier]) -> String {
        if args.is_empty() {
            return name.to_string();
        }
        let args: Vec<&str> = args.iter().map(Identifier::as_str).collect();
        format!("{}({})", name, args.join(", "))
    }
}

impl fmt::Display for MacroUsage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&Self::call_text(self.name.as_str(), &self.args))
    }
}

/// The original (pre attribute expansion) endpoints of a replicated rule.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AttributeOrigin {
    pub source: Identifier,
    pub target: Identifier,
}

/// A policy rule mapped back to the statement that produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappedRule {
    pub rule: Rule,
    /// Earliest contributing statement.
    pub location: SourceLocation,
    /// Exact unexpanded statement text at `location`.
    pub origin_text: Arc<str>,
    pub via_macro: Option<Arc<MacroUsage>>,
    /// Conditional wrapper macro (e.g. `userdebug_or_eng`) around the statement.
    pub guard: Option<Identifier>,
    /// Later statements merged into this rule.
    pub merged_from: Vec<SourceLocation>,
    pub attribute_origin: Option<AttributeOrigin>,
}

impl MappedRule {
    pub fn new(rule: Rule, location: SourceLocation, origin_text: Arc<str>) -> Self {
        Self {
            rule,
            location,
            origin_text,
            via_macro: None,
            guard: None,
            merged_from: Vec::new(),
            attribute_origin: None,
        }
    }

    /// Every source location contributing to this rule.
    pub fn locations(&self) -> impl Iterator<Item = &SourceLocation> {
        std::iter::once(&self.location).chain(self.merged_from.iter())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MergeError {
    #[error(
        "conflicting type_transition defaults for `{key}`: `{first_default}` at {first} and `{second_default}` at {second}"
    )]
    ConflictingTransition {
        key: String,
        first: SourceLocation,
        first_default: Identifier,
        second: SourceLocation,
        second_default: Identifier,
    },
}

/// Merges access-vector rules sharing a key (and conditional wrapper) by
/// permission union. The merged rule keeps the earliest location and records
/// the others. Type transitions are kept as they are, but two transitions
/// with the same key and object name must agree on the default type.
pub fn merge_rules(rules: Vec<MappedRule>) -> Result<Vec<MappedRule>, MergeError> {
    let mut out: Vec<MappedRule> = Vec::with_capacity(rules.len());
    let mut av_index: HashMap<(RuleKey, Option<Identifier>), usize> = HashMap::new();
    let mut te_index: HashMap<(RuleKey, Option<String>), usize> = HashMap::new();

    for mapped in rules {
        match &mapped.rule {
            Rule::Av(av) => {
                let slot = (mapped.rule.key(), mapped.guard.clone());
                if let Some(&idx) = av_index.get(&slot) {
                    let perms = av.permissions.clone();
                    let existing = &mut out[idx];
                    if let Rule::Av(target) = &mut existing.rule {
                        target.permissions.extend(perms);
                    }
                    existing.merged_from.push(mapped.location.clone());
                    existing.merged_from.extend(mapped.merged_from.iter().cloned());
                } else {
                    av_index.insert(slot, out.len());
                    out.push(mapped);
                }
            }
            Rule::Te(te) => {
                let slot = (mapped.rule.key(), te.object_name.clone());
                if let Some(&idx) = te_index.get(&slot) {
                    let first = &out[idx];
                    let first_te = first.rule.as_te().expect("indexed transition");
                    if first_te.default_type != te.default_type {
                        return Err(MergeError::ConflictingTransition {
                            key: slot.0.to_string(),
                            first: first.location.clone(),
                            first_default: first_te.default_type.clone(),
                            second: mapped.location.clone(),
                            second_default: te.default_type.clone(),
                        });
                    }
                } else {
                    te_index.insert(slot, out.len());
                }
                out.push(mapped);
            }
        }
    }
    Ok(out)
}

/// A non-fatal problem noticed while building or analysing the policy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub location: Option<SourceLocation>,
    pub message: String,
}

impl Diagnostic {
    pub fn new(location: Option<SourceLocation>, message: impl Into<String>) -> Self {
        Self {
            location,
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.location {
            Some(loc) => write!(f, "{}: {}", loc, self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// A parsed, attribute-resolved policy.
///
/// Two rule views are kept: [`Policy::rules`] is the merged, unexpanded view
/// in which rules keep the types and attributes written in the source, and
/// [`Policy::expanded_rules`] replicates every attribute rule per member
/// type.
#[derive(Debug, Clone, Default)]
pub struct Policy {
    pub(crate) rules: Vec<MappedRule>,
    pub(crate) expanded_rules: Vec<MappedRule>,
    pub(crate) neverallows: Vec<MappedRule>,
    pub(crate) types: BTreeSet<Identifier>,
    pub(crate) attributes: BTreeMap<Identifier, BTreeSet<Identifier>>,
    pub(crate) classes: BTreeMap<Identifier, SecurityClass>,
    pub(crate) macros: MacroTable,
    pub(crate) macro_usages: Vec<MacroUsage>,
    pub(crate) diagnostics: Vec<Diagnostic>,
    pub(crate) line_counts: BTreeMap<Arc<Path>, usize>,
}

impl Policy {
    /// Unexpanded, merged view.
    pub fn rules(&self) -> &[MappedRule] {
        &self.rules
    }

    /// Attribute-expanded view.
    pub fn expanded_rules(&self) -> &[MappedRule] {
        &self.expanded_rules
    }

    pub fn neverallows(&self) -> &[MappedRule] {
        &self.neverallows
    }

    pub fn types(&self) -> &BTreeSet<Identifier> {
        &self.types
    }

    pub fn attributes(&self) -> &BTreeMap<Identifier, BTreeSet<Identifier>> {
        &self.attributes
    }

    pub fn classes(&self) -> &BTreeMap<Identifier, SecurityClass> {
        &self.classes
    }

    pub fn macros(&self) -> &MacroTable {
        &self.macros
    }

    pub fn macro_usages(&self) -> &[MacroUsage] {
        &self.macro_usages
    }

    pub fn diagnostics(&self) -> &[Diagnostic] {
        &self.diagnostics
    }

    /// Parsed source files with their line counts.
    pub fn source_files(&self) -> &BTreeMap<Arc<Path>, usize> {
        &self.line_counts
    }

    pub fn expanded_rule_count(&self) -> usize {
        self.expanded_rules.len()
    }

    pub fn is_type(&self, name: &str) -> bool {
        self.types.contains(name)
    }

    pub fn is_attribute(&self, name: &str) -> bool {
        self.attributes.contains_key(name)
    }

    pub fn is_declared(&self, name: &str) -> bool {
        self.is_type(name) || self.is_attribute(name)
    }

    /// Attributes each type belongs to.
    pub fn attributes_by_type(&self) -> BTreeMap<Identifier, BTreeSet<Identifier>> {
        let mut out: BTreeMap<Identifier, BTreeSet<Identifier>> = BTreeMap::new();
        for (attr, members) in &self.attributes {
            for member in members {
                out.entry(member.clone()).or_default().insert(attr.clone());
            }
        }
        out
    }

    /// Every identifier occurring in the policy: declared types and
    /// attributes plus all tokens used by rules.
    pub fn identifier_universe(&self) -> BTreeSet<Identifier> {
        let mut out: BTreeSet<Identifier> = self.types.iter().cloned().collect();
        out.extend(self.attributes.keys().cloned());
        for mapped in &self.rules {
            out.insert(mapped.rule.source().clone());
            out.insert(mapped.rule.target().clone());
            out.insert(mapped.rule.class().clone());
            match &mapped.rule {
                Rule::Av(av) => out.extend(av.permissions.iter().cloned()),
                Rule::Te(te) => {
                    out.insert(te.default_type.clone());
                }
            }
        }
        out
    }

    /// Whether `location` points at a line of a parsed source file.
    pub fn contains_location(&self, location: &SourceLocation) -> bool {
        self.line_counts
            .get(&location.file)
            .is_some_and(|&count| location.line >= 1 && location.line <= count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(s: &str) -> Identifier {
        Identifier::new(s).unwrap()
    }

    fn perms(items: &[&str]) -> PermissionSet {
        items.iter().map(|p| id(p)).collect()
    }

    fn allow(s: &str, t: &str, c: &str, p: &[&str]) -> Rule {
        Rule::Av(AvRule::new(AvKind::Allow, id(s), id(t), id(c), perms(p)).unwrap())
    }

    fn transition(s: &str, t: &str, c: &str, d: &str) -> Rule {
        Rule::Te(TeRule {
            source: id(s),
            target: id(t),
            class: id(c),
            default_type: id(d),
            object_name: None,
        })
    }

    fn at(rule: Rule, line: usize) -> MappedRule {
        let text: Arc<str> = Arc::from(rule.to_string());
        MappedRule::new(rule, SourceLocation::new(Arc::from(Path::new("x.te")), line), text)
    }

    #[test]
    fn identifiers_reject_separators() {
        assert!(Identifier::new("untrusted_app").is_ok());
        assert!(Identifier::new("hal_foo-1.0").is_ok());
        for bad in ["", "a b", "a:b", "a;", "{a", "a}"] {
            assert!(Identifier::new(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn key_examples() {
        let rule = allow(
            "logd",
            "rootfs",
            "dir",
            &["getattr", "create", "open", "read", "search", "ioctl"],
        );
        assert_eq!(rule_key(&rule), "allow logd rootfs:dir");
        assert_eq!(rule_key(&transition("a", "b", "file", "c")), "type_transition a b:file");
        assert_eq!(
            rule_key(&allow("a", "b", "file", &["read"])),
            rule_key(&allow("a", "b", "file", &["write", "open"]))
        );
    }

    #[test]
    fn canonical_text() {
        assert_eq!(
            allow("untrusted_app", "security_file", "dir", &["search", "getattr"]).to_string(),
            "allow untrusted_app security_file:dir { getattr search };"
        );
        assert_eq!(
            allow("untrusted_app", "system_file", "file", &["execute"]).to_string(),
            "allow untrusted_app system_file:file execute;"
        );
        assert_eq!(
            transition("a", "b", "file", "c").to_string(),
            "type_transition a b:file c;"
        );
    }

    #[test]
    fn empty_permissions_rejected() {
        assert!(AvRule::new(AvKind::Allow, id("a"), id("b"), id("c"), PermissionSet::new()).is_err());
    }

    #[test]
    fn merge_unions_permissions() {
        let merged = merge_rules(vec![
            at(allow("a", "b", "file", &["read"]), 1),
            at(allow("a", "b", "file", &["write"]), 2),
        ])
        .unwrap();
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].rule, allow("a", "b", "file", &["read", "write"]));
        assert_eq!(merged[0].location.line, 1);
        assert_eq!(merged[0].merged_from.len(), 1);
        assert_eq!(merged[0].merged_from[0].line, 2);
    }

    #[test]
    fn merge_single_rule_is_identity() {
        let single = vec![at(allow("a", "b", "file", &["read"]), 3)];
        assert_eq!(merge_rules(single.clone()).unwrap(), single);
    }

    #[test]
    fn merge_rejects_conflicting_transitions() {
        let err = merge_rules(vec![
            at(transition("a", "b", "file", "c"), 1),
            at(transition("a", "b", "file", "d"), 2),
        ])
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("x.te:1") && msg.contains("x.te:2"), "{msg}");
    }

    #[test]
    fn merge_keeps_agreeing_transitions_separate() {
        let merged = merge_rules(vec![
            at(transition("a", "b", "file", "c"), 1),
            at(transition("a", "b", "file", "c"), 2),
        ])
        .unwrap();
        assert_eq!(merged.len(), 2);
    }

    #[test]
    fn effective_target_resolves_self() {
        let rule = AvRule::new(AvKind::Allow, id("vold"), id("self"), id("capability"), perms(&["sys_chroot"])).unwrap();
        assert_eq!(rule.effective_target().as_str(), "vold");
    }
}
