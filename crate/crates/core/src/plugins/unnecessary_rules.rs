//! Finds rules that cannot take effect on their own: incomplete rule
//! tuples, debug-only types outside debug guards, and permissions that
//! are useless without a companion permission.

use std::collections::{BTreeSet, HashMap};

use crate::config::{ConfigError, ConfigReader, PluginConfig};
use crate::host::{Finding, Plugin, PluginError, PluginOutput, Severity};
use crate::model::{write_permissions, AvKind, Identifier, MappedRule, Policy, Rule};
use crate::template::{self, Assignment, RuleIndex, TemplateRule};

pub const NAME: &str = "unnecessary_rules";

/// Rules that only make sense together; the first one triggers the check.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleTuple {
    pub name: String,
    pub templates: Vec<TemplateRule>,
}

impl RuleTuple {
    fn arg_name(i: usize) -> String {
        format!("$ARG{i}")
    }

    pub fn display(&self, index: usize) -> String {
        self.templates[index].display_with(&Self::arg_name)
    }
}

/// Permissions of `trigger_class` that need `required_perms` on the same
/// object, or `alternative_perms` on `alternative_class`.
#[derive(Debug, Clone, PartialEq)]
pub struct PermConstraint {
    pub name: String,
    pub trigger_class: Identifier,
    pub trigger_perms: BTreeSet<Identifier>,
    pub required_perms: BTreeSet<Identifier>,
    pub alternative_class: Option<Identifier>,
    pub alternative_perms: BTreeSet<Identifier>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UnnecessaryConfig {
    pub debug_types: BTreeSet<Identifier>,
    pub debug_guards: BTreeSet<Identifier>,
    pub tuples: Vec<RuleTuple>,
    pub constraints: Vec<PermConstraint>,
}

fn id_list(r: &mut ConfigReader<'_>, key: &str) -> Result<BTreeSet<Identifier>, ConfigError> {
    let items = r.list(key)?.unwrap_or_default();
    items
        .iter()
        .map(|s| Identifier::new(s).map_err(|e| r.error(key, e)))
        .collect()
}

fn id_scalar(r: &mut ConfigReader<'_>, key: &str) -> Result<Option<Identifier>, ConfigError> {
    match r.string(key)? {
        None => Ok(None),
        Some(s) => Identifier::new(&s).map(Some).map_err(|e| r.error(key, e)),
    }
}

impl UnnecessaryConfig {
    pub fn from_config(cfg: &PluginConfig) -> Result<Self, ConfigError> {
        let mut r = cfg.reader();
        let debug_types = id_list(&mut r, "debug_types")?;
        let debug_guards = id_list(&mut r, "debug_guards")?;

        let mut tuples = Vec::new();
        for (name, mut sub) in r.sections("tuple")? {
            let lines = sub.list("rules")?.ok_or_else(|| sub.error("rules", "missing"))?;
            let mut templates = Vec::new();
            for line in &lines {
                let parsed = template::parse_placeholder_rules(line)
                    .map_err(|e| sub.error("rules", format!("`{line}`: {}", e.message)))?;
                templates.extend(parsed);
            }
            if templates.len() < 2 {
                return Err(sub.error("rules", "a tuple needs at least two rules"));
            }
            let bound = templates[0].args();
            for t in &templates[1..] {
                if let Some(free) = t.args().difference(&bound).next() {
                    return Err(sub.error(
                        "rules",
                        format!("`$ARG{free}` does not appear in the first rule"),
                    ));
                }
            }
            sub.finish()?;
            tuples.push(RuleTuple { name, templates });
        }

        let mut constraints = Vec::new();
        for (name, mut sub) in r.sections("constraint")? {
            let trigger_class = id_scalar(&mut sub, "trigger_class")?
                .ok_or_else(|| sub.error("trigger_class", "missing"))?;
            let trigger_perms = id_list(&mut sub, "trigger_perms")?;
            let required_perms = id_list(&mut sub, "required_perms")?;
            let alternative_class = id_scalar(&mut sub, "alternative_class")?;
            let alternative_perms = id_list(&mut sub, "alternative_perms")?;
            if trigger_perms.is_empty() {
                return Err(sub.error("trigger_perms", "must not be empty"));
            }
            if required_perms.is_empty() && alternative_perms.is_empty() {
                return Err(sub.error("required_perms", "required_perms and alternative_perms are both empty"));
            }
            if alternative_class.is_some() != !alternative_perms.is_empty() {
                return Err(sub.error(
                    "alternative_class",
                    "alternative_class and alternative_perms go together",
                ));
            }
            sub.finish()?;
            constraints.push(PermConstraint {
                name,
                trigger_class,
                trigger_perms,
                required_perms,
                alternative_class,
                alternative_perms,
            });
        }
        r.finish()?;
        Ok(Self {
            debug_types,
            debug_guards,
            tuples,
            constraints,
        })
    }
}

/// Checks every instance of `tuple` triggered by a rule of `policy`.
/// Returns, per trigger rule (index into `policy.rules()`), the missing
/// rules of each binding.
pub fn tuple_gaps(policy: &Policy, tuple: &RuleTuple) -> Vec<(usize, Vec<Rule>)> {
    let index = RuleIndex::new(policy.rules().iter().map(|m| &m.rule));
    let first = &tuple.templates[0];
    let empty: Assignment = vec![None; 10];
    let accept = |_: &str| true;
    let mut out = Vec::new();
    for (i, mapped) in policy.rules().iter().enumerate() {
        let mut seen = BTreeSet::new();
        for binding in first.match_rule(&mapped.rule, &empty, &accept) {
            if !seen.insert(binding.clone()) {
                continue;
            }
            let missing: Vec<Rule> = tuple.templates[1..]
                .iter()
                .filter_map(|t| t.instantiate(&binding))
                .filter(|r| !index.satisfies(r))
                .collect();
            if !missing.is_empty() {
                out.push((i, missing));
            }
        }
    }
    out
}

/// Whether `rule` grants a trigger permission of `c` without the
/// permissions it needs, given all permissions granted per
/// (source, target, class).
pub fn violates_constraint(
    rule: &Rule,
    c: &PermConstraint,
    granted: &HashMap<(Identifier, Identifier, Identifier), BTreeSet<Identifier>>,
) -> Option<Vec<Identifier>> {
    let Rule::Av(av) = rule else { return None };
    if av.kind != AvKind::Allow || av.class != c.trigger_class {
        return None;
    }
    let triggered: Vec<Identifier> = av.permissions.intersection(&c.trigger_perms).cloned().collect();
    if triggered.is_empty() {
        return None;
    }
    let has_all = |class: &Identifier, perms: &BTreeSet<Identifier>| {
        !perms.is_empty()
            && granted
                .get(&(av.source.clone(), av.target.clone(), class.clone()))
                .is_some_and(|g| perms.is_subset(g))
    };
    let ok = has_all(&c.trigger_class, &c.required_perms)
        || c.alternative_class.as_ref().is_some_and(|ac| has_all(ac, &c.alternative_perms));
    if ok {
        None
    } else {
        Some(triggered)
    }
}

pub fn granted_permissions(
    rules: &[MappedRule],
) -> HashMap<(Identifier, Identifier, Identifier), BTreeSet<Identifier>> {
    let mut out: HashMap<_, BTreeSet<Identifier>> = HashMap::new();
    for m in rules {
        if let Rule::Av(av) = &m.rule {
            if av.kind == AvKind::Allow {
                out.entry((av.source.clone(), av.target.clone(), av.class.clone()))
                    .or_default()
                    .extend(av.permissions.iter().cloned());
            }
        }
    }
    out
}

fn perm_text(perms: &[Identifier]) -> String {
    let mut s = String::new();
    let _ = write_permissions(&mut s, perms.iter().map(Identifier::as_str));
    s
}

pub struct UnnecessaryRules {
    config: UnnecessaryConfig,
}

impl UnnecessaryRules {
    pub fn new(config: UnnecessaryConfig) -> Self {
        Self { config }
    }

    pub fn build(cfg: &PluginConfig) -> Result<Box<dyn Plugin>, ConfigError> {
        Ok(Box::new(Self::new(UnnecessaryConfig::from_config(cfg)?)))
    }

    fn check_tuples(&self, policy: &Policy, out: &mut Vec<Finding>) {
        for tuple in &self.config.tuples {
            for (i, missing) in tuple_gaps(policy, tuple) {
                let mapped = &policy.rules()[i];
                let mut message = format!("rule tuple `{}` is incomplete; missing:", tuple.name);
                for r in &missing {
                    message.push_str(&format!("\n  {r}"));
                }
                out.push(Finding::new(
                    NAME,
                    Severity::Warning,
                    mapped.location.clone(),
                    mapped.rule.to_string(),
                    message,
                ));
            }
        }
    }

    fn check_debug(&self, policy: &Policy, out: &mut Vec<Finding>) {
        if self.config.debug_types.is_empty() {
            return;
        }
        for mapped in policy.expanded_rules() {
            if mapped
                .guard
                .as_ref()
                .is_some_and(|g| self.config.debug_guards.contains(g))
            {
                continue;
            }
            let mut named: Vec<&Identifier> = vec![mapped.rule.source(), mapped.rule.target()];
            if let Some(origin) = &mapped.attribute_origin {
                named.push(&origin.source);
                named.push(&origin.target);
            }
            let hits: BTreeSet<&str> = named
                .into_iter()
                .filter(|t| self.config.debug_types.contains(*t))
                .map(Identifier::as_str)
                .collect();
            if hits.is_empty() {
                continue;
            }
            let hits: Vec<&str> = hits.into_iter().collect();
            out.push(Finding::new(
                NAME,
                Severity::Warning,
                mapped.location.clone(),
                mapped.rule.to_string(),
                format!(
                    "debug-only type {} used outside a debug guard",
                    hits.join(", ")
                ),
            ));
        }
    }

    fn check_constraints(&self, policy: &Policy, out: &mut Vec<Finding>) {
        if self.config.constraints.is_empty() {
            return;
        }
        let granted = granted_permissions(policy.rules());
        for mapped in policy.rules() {
            for c in &self.config.constraints {
                let Some(triggered) = violates_constraint(&mapped.rule, c, &granted) else {
                    continue;
                };
                let mut needs = format!(
                    "{} on {}",
                    perm_text(&c.required_perms.iter().cloned().collect::<Vec<_>>()),
                    c.trigger_class
                );
                if c.required_perms.is_empty() {
                    needs.clear();
                }
                if let Some(ac) = &c.alternative_class {
                    let alt = format!(
                        "{} on {ac}",
                        perm_text(&c.alternative_perms.iter().cloned().collect::<Vec<_>>())
                    );
                    needs = if needs.is_empty() { alt } else { format!("{needs} or {alt}") };
                }
                out.push(Finding::new(
                    NAME,
                    Severity::Warning,
                    mapped.location.clone(),
                    mapped.rule.to_string(),
                    format!(
                        "`{}`: {} has no effect without {needs}",
                        c.name,
                        perm_text(&triggered)
                    ),
                ));
            }
        }
    }
}

impl Plugin for UnnecessaryRules {
    fn name(&self) -> &str {
        NAME
    }

    fn run(&self, policy: &Policy) -> Result<PluginOutput, PluginError> {
        let mut findings = Vec::new();
        self.check_tuples(policy, &mut findings);
        self.check_debug(policy, &mut findings);
        self.check_constraints(policy, &mut findings);
        Ok(PluginOutput {
            findings,
            warnings: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::builtin_config;

    #[test]
    fn builtin_config_loads() {
        let c = UnnecessaryConfig::from_config(&builtin_config(NAME).unwrap()).unwrap();
        assert_eq!(c.tuples.len(), 1);
        assert_eq!(c.tuples[0].templates.len(), 3);
        assert_eq!(c.tuples[0].display(1), "allow $ARG0 $ARG1:dir { search write };");
        assert_eq!(c.constraints.len(), 1);
    }

    #[test]
    fn unbound_placeholder_rejected() {
        let text = "[unnecessary_rules.tuple.t]\nrules = [\"allow $ARG0 $ARG1:dir search;\" \"allow $ARG0 $ARG2:file read;\"]\n";
        let cfg = PluginConfig::parse(NAME, text, "t.conf").unwrap();
        let err = UnnecessaryConfig::from_config(&cfg).unwrap_err();
        assert!(err.to_string().contains("$ARG2"), "{err}");
    }

    #[test]
    fn single_rule_tuple_rejected() {
        let text = "[unnecessary_rules.tuple.t]\nrules = [\"allow $ARG0 $ARG1:dir search;\"]\n";
        let cfg = PluginConfig::parse(NAME, text, "t.conf").unwrap();
        assert!(UnnecessaryConfig::from_config(&cfg).is_err());
    }
}
