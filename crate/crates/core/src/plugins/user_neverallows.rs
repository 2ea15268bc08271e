//! Checks the expanded policy against neverallow rules supplied in the
//! configuration.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::config::{ConfigError, PluginConfig};
use crate::host::{Finding, Plugin, PluginError, PluginOutput, Severity};
use crate::m4::{self, MacroKind};
use crate::model::{write_permissions, AvKind, Identifier, Policy, Rule, SELF};
use crate::syntax::{self, SetExpr, StatementKind};

pub const NAME: &str = "user_neverallows";

/// One configured neverallow, as written.
#[derive(Debug, Clone, PartialEq)]
pub struct NeverallowSpec {
    pub source: SetExpr,
    pub target: SetExpr,
    pub classes: SetExpr,
    pub permissions: SetExpr,
}

impl NeverallowSpec {
    /// Parses one or more `neverallow` statements.
    pub fn parse_all(text: &str) -> Result<Vec<NeverallowSpec>, String> {
        let statements = syntax::parse_statements(text, &syntax::NoMacros)
            .map_err(|e| e.message)?;
        if statements.is_empty() {
            return Err("no statement".into());
        }
        statements
            .into_iter()
            .map(|s| match s.kind {
                StatementKind::Av {
                    kind: AvKind::Neverallow,
                    source,
                    target,
                    classes,
                    permissions,
                } => Ok(NeverallowSpec {
                    source,
                    target,
                    classes,
                    permissions,
                }),
                _ => Err("only neverallow statements are allowed".into()),
            })
            .collect()
    }

    /// Identifiers naming types or attributes, `self` excluded.
    fn type_names(&self) -> impl Iterator<Item = &Identifier> {
        set_items(&self.source)
            .chain(set_items(&self.target))
            .filter(|id| !id.is_self())
    }
}

impl std::fmt::Display for NeverallowSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "neverallow {} {}:{} {};",
            self.source, self.target, self.classes, self.permissions
        )
    }
}

fn set_items(set: &SetExpr) -> Box<dyn Iterator<Item = &Identifier> + '_> {
    match set {
        SetExpr::All => Box::new(std::iter::empty()),
        SetExpr::Items { include, exclude, .. } => Box::new(include.iter().chain(exclude.iter())),
    }
}

/// A resolved set: either the listed names or everything except them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub complement: bool,
    pub names: BTreeSet<Identifier>,
}

impl Selection {
    /// Membership; complements of type sets only admit names of
    /// `universe` when one is given.
    pub fn contains(&self, id: &Identifier, universe: Option<&BTreeSet<Identifier>>) -> bool {
        if self.complement {
            !self.names.contains(id) && universe.is_none_or(|u| u.contains(id))
        } else {
            self.names.contains(id)
        }
    }
}

fn resolve(set: &SetExpr, expand: &dyn Fn(&Identifier) -> Vec<Identifier>) -> Selection {
    match set {
        SetExpr::All => Selection {
            complement: true,
            names: BTreeSet::new(),
        },
        SetExpr::Items {
            complement,
            include,
            exclude,
        } => {
            let exclude: BTreeSet<Identifier> = exclude.iter().flat_map(expand).collect();
            let names = include
                .iter()
                .flat_map(expand)
                .filter(|id| !exclude.contains(id))
                .collect();
            Selection {
                complement: *complement,
                names,
            }
        }
    }
}

/// A spec with attributes and macros replaced by what they stand for.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedSpec {
    pub text: String,
    pub sources: Selection,
    pub targets: Selection,
    /// Spec target includes `self`.
    pub target_self: bool,
    pub classes: Selection,
    pub permissions: Selection,
}

impl ResolvedSpec {
    pub fn resolve(spec: &NeverallowSpec, policy: &Policy) -> ResolvedSpec {
        let attributes = policy.attributes();
        let types = |id: &Identifier| -> Vec<Identifier> {
            match attributes.get(id) {
                Some(members) => members.iter().cloned().collect(),
                None if id.is_self() => Vec::new(),
                None => vec![id.clone()],
            }
        };
        let macros = policy.macros();
        let names = |id: &Identifier| -> Vec<Identifier> {
            match macros.get(id.as_str()) {
                Some(def) if def.kind == MacroKind::PermissionSet => m4::expand(def, &[], macros)
                    .ok()
                    .and_then(|e| e.permissions().map(|p| p.iter().cloned().collect()))
                    .unwrap_or_else(|| vec![id.clone()]),
                _ => vec![id.clone()],
            }
        };
        let target_self = matches!(&spec.target, SetExpr::Items { include, .. } if include.iter().any(Identifier::is_self));
        ResolvedSpec {
            text: spec.to_string(),
            sources: resolve(&spec.source, &types),
            targets: resolve(&spec.target, &types),
            target_self,
            classes: resolve(&spec.classes, &names),
            permissions: resolve(&spec.permissions, &names),
        }
    }

    /// Permissions of `rule` that this spec forbids.
    pub fn forbidden(&self, rule: &Rule, universe: &BTreeSet<Identifier>) -> Vec<Identifier> {
        let Rule::Av(av) = rule else { return Vec::new() };
        if av.kind != AvKind::Allow
            || !self.sources.contains(&av.source, Some(universe))
            || !self.classes.contains(&av.class, None)
        {
            return Vec::new();
        }
        let to_self = av.target.is_self() || av.target == av.source;
        let target_hit = (self.target_self && to_self)
            || self.targets.contains(av.effective_target(), Some(universe));
        if !target_hit {
            return Vec::new();
        }
        av.permissions
            .iter()
            .filter(|p| self.permissions.contains(p, None))
            .cloned()
            .collect()
    }
}

/// One rule of the policy breaking configured neverallows.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Index into `policy.expanded_rules()`.
    pub rule: usize,
    /// Violated spec text and the permissions in conflict.
    pub specs: Vec<(String, Vec<Identifier>)>,
}

/// Every expanded allow rule violating one of `specs`, in policy order.
pub fn find_violations(policy: &Policy, specs: &[ResolvedSpec]) -> Vec<Violation> {
    let rules = policy.expanded_rules();
    let universe = policy.types();
    let mut by_source: HashMap<&Identifier, Vec<usize>> = HashMap::new();
    for (i, m) in rules.iter().enumerate() {
        by_source.entry(m.rule.source()).or_default().push(i);
    }
    let mut hits: BTreeMap<usize, Vec<(String, Vec<Identifier>)>> = BTreeMap::new();
    for spec in specs {
        let candidates: Vec<usize> = if spec.sources.complement {
            (0..rules.len()).collect()
        } else {
            spec.sources
                .names
                .iter()
                .filter_map(|s| by_source.get(s))
                .flatten()
                .copied()
                .collect()
        };
        for i in candidates {
            let perms = spec.forbidden(&rules[i].rule, universe);
            if !perms.is_empty() {
                hits.entry(i).or_default().push((spec.text.clone(), perms));
            }
        }
    }
    hits.into_iter()
        .map(|(rule, specs)| Violation { rule, specs })
        .collect()
}

pub struct UserNeverallows {
    specs: Vec<NeverallowSpec>,
    file: String,
    line: Option<usize>,
}

impl UserNeverallows {
    pub fn new(specs: Vec<NeverallowSpec>) -> Self {
        Self {
            specs,
            file: format!("<{NAME}>"),
            line: None,
        }
    }

    pub fn from_config(cfg: &PluginConfig) -> Result<Self, ConfigError> {
        let mut r = cfg.reader();
        let located = r.error("rules", "");
        let mut specs = Vec::new();
        for text in r.list("rules")?.unwrap_or_default() {
            let parsed = NeverallowSpec::parse_all(&text).map_err(|e| r.error("rules", format!("`{text}`: {e}")))?;
            for spec in &parsed {
                if set_items(&spec.source).any(|id| id.as_str() == SELF) {
                    return Err(r.error("rules", format!("`{text}`: `self` is not a source")));
                }
            }
            specs.extend(parsed);
        }
        r.finish()?;
        Ok(Self {
            specs,
            file: located.file,
            line: located.line,
        })
    }

    pub fn build(cfg: &PluginConfig) -> Result<Box<dyn Plugin>, ConfigError> {
        Ok(Box::new(Self::from_config(cfg)?))
    }

    pub fn specs(&self) -> &[NeverallowSpec] {
        &self.specs
    }

    pub fn check(&self, policy: &Policy) -> Vec<Finding> {
        let resolved: Vec<ResolvedSpec> = self.specs.iter().map(|s| ResolvedSpec::resolve(s, policy)).collect();
        let rules = policy.expanded_rules();
        find_violations(policy, &resolved)
            .into_iter()
            .map(|v| {
                let mapped = &rules[v.rule];
                let lines: Vec<String> = v
                    .specs
                    .iter()
                    .map(|(text, perms)| {
                        let mut p = String::new();
                        let _ = write_permissions(&mut p, perms.iter().map(Identifier::as_str));
                        format!("violates `{text}` (permissions: {p})")
                    })
                    .collect();
                Finding::new(
                    NAME,
                    Severity::Violation,
                    mapped.location.clone(),
                    mapped.rule.to_string(),
                    lines.join("\n"),
                )
            })
            .collect()
    }
}

impl Plugin for UserNeverallows {
    fn name(&self) -> &str {
        NAME
    }

    fn validate(&self, policy: &Policy) -> Result<(), ConfigError> {
        let check_classes = !policy.classes().is_empty();
        for spec in &self.specs {
            let mut unknown: BTreeSet<&str> = spec
                .type_names()
                .filter(|id| !policy.is_declared(id.as_str()))
                .map(Identifier::as_str)
                .collect();
            if check_classes {
                unknown.extend(
                    set_items(&spec.classes)
                        .filter(|c| !policy.classes().contains_key(*c) && policy.macros().get(c.as_str()).is_none())
                        .map(Identifier::as_str),
                );
            }
            if !unknown.is_empty() {
                let names: Vec<&str> = unknown.into_iter().collect();
                return Err(ConfigError::new(
                    &self.file,
                    self.line,
                    format!("`{NAME}.rules`: `{spec}` names unknown identifiers: {}", names.join(", ")),
                ));
            }
        }
        Ok(())
    }

    fn run(&self, policy: &Policy) -> Result<PluginOutput, PluginError> {
        Ok(PluginOutput {
            findings: self.check(policy),
            warnings: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_specs() {
        let specs = NeverallowSpec::parse_all("neverallow untrusted_app security_file:dir *;").unwrap();
        assert_eq!(specs.len(), 1);
        assert_eq!(specs[0].to_string(), "neverallow untrusted_app security_file:dir *;");
    }

    #[test]
    fn rejects_allow() {
        assert!(NeverallowSpec::parse_all("allow a b:file read;").is_err());
    }

    #[test]
    fn rejects_self_source() {
        let cfg = PluginConfig::parse(NAME, "[user_neverallows]\nrules = [\"neverallow self b:file read;\"]\n", "t.conf").unwrap();
        assert!(UserNeverallows::from_config(&cfg).is_err());
    }

    #[test]
    fn selection_complement_respects_universe() {
        let id = |s: &str| Identifier::new(s).unwrap();
        let sel = Selection {
            complement: true,
            names: [id("a")].into_iter().collect(),
        };
        let universe: BTreeSet<Identifier> = [id("a"), id("b")].into_iter().collect();
        assert!(!sel.contains(&id("a"), Some(&universe)));
        assert!(sel.contains(&id("b"), Some(&universe)));
        assert!(!sel.contains(&id("c"), Some(&universe)));
        assert!(sel.contains(&id("c"), None));
    }
}
