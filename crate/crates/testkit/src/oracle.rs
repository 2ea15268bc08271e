//! Brute-force reference implementations.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use selint_core::m4::{self, MacroDefinition};
use selint_core::model::{AvKind, AvRule, Identifier, Policy, Rule, TeRule};
use selint_core::syntax::{parse_statements, NoMacros, SetExpr, StatementKind};

/// All runs of consecutive `_`-separated segments of `token`.
pub fn fragments(token: &str) -> BTreeSet<String> {
    let parts: Vec<&str> = token.split('_').collect();
    let mut out = BTreeSet::new();
    for i in 0..parts.len() {
        for j in i + 1..=parts.len() {
            let joined = parts[i..j].join("_");
            if !joined.is_empty() && !joined.starts_with('_') && !joined.ends_with('_') {
                out.insert(joined);
            }
        }
    }
    out
}

/// Every value a macro argument can take in `policy`: its type,
/// attribute, class and permission names plus their fragments.
pub fn argument_values(policy: &Policy) -> Vec<Identifier> {
    let mut names: BTreeSet<String> = BTreeSet::new();
    let mut add = |id: &Identifier| names.extend(fragments(id.as_str()));
    for t in policy.types() {
        add(t);
    }
    for a in policy.attributes().keys() {
        add(a);
    }
    for m in policy.rules() {
        add(m.rule.source());
        add(m.rule.target());
        add(m.rule.class());
        match &m.rule {
            Rule::Av(av) => av.permissions.iter().for_each(&mut add),
            Rule::Te(te) => add(&te.default_type),
        }
    }
    let macros = policy.macros();
    names
        .into_iter()
        .filter(|n| n != "self" && macros.get(n).is_none() && !macros.is_guard(n))
        .filter_map(|n| Identifier::new(&n).ok())
        .collect()
}

/// Whether the policy (rules and neverallows, access-vector permissions
/// pooled per key) contains `rule`.
pub struct Presence {
    av: HashMap<(AvKind, String, String, String), BTreeSet<String>>,
    te: HashSet<String>,
}

impl Presence {
    pub fn new(policy: &Policy) -> Self {
        let mut av: HashMap<_, BTreeSet<String>> = HashMap::new();
        let mut te = HashSet::new();
        for m in policy.rules().iter().chain(policy.neverallows()) {
            match &m.rule {
                Rule::Av(r) => {
                    av.entry((
                        r.kind,
                        r.source.to_string(),
                        r.target.to_string(),
                        r.class.to_string(),
                    ))
                    .or_default()
                    .extend(r.permissions.iter().map(|p| p.to_string()));
                }
                Rule::Te(_) => {
                    te.insert(m.rule.to_string());
                }
            }
        }
        Self { av, te }
    }

    pub fn contains(&self, rule: &Rule) -> bool {
        match rule {
            Rule::Av(r) => self
                .av
                .get(&(
                    r.kind,
                    r.source.to_string(),
                    r.target.to_string(),
                    r.class.to_string(),
                ))
                .is_some_and(|have| r.permissions.iter().all(|p| have.contains(p.as_str()))),
            Rule::Te(_) => self.te.contains(&rule.to_string()),
        }
    }
}

/// Rules of policy text, lowered by hand: one rule per source, target and
/// class.
pub fn lower_by_hand(text: &str) -> Vec<Rule> {
    let mut out = Vec::new();
    for stmt in parse_statements(text, &NoMacros).unwrap() {
        match stmt.kind {
            StatementKind::Av {
                kind,
                source,
                target,
                classes,
                permissions,
            } => {
                let perms: BTreeSet<Identifier> = permissions.plain().unwrap().iter().cloned().collect();
                for s in source.plain().unwrap() {
                    for t in target.plain().unwrap() {
                        for c in classes.plain().unwrap() {
                            out.push(Rule::Av(
                                AvRule::new(kind, s.clone(), t.clone(), c.clone(), perms.clone()).unwrap(),
                            ));
                        }
                    }
                }
            }
            StatementKind::TypeTransition {
                source,
                target,
                classes,
                default_type,
                object_name,
            } => {
                for s in source.plain().unwrap() {
                    for t in target.plain().unwrap() {
                        for c in classes.plain().unwrap() {
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
            }
            _ => {}
        }
    }
    out
}

/// A binding found by exhaustive enumeration.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct OracleBinding {
    pub args: Vec<Identifier>,
    pub found: usize,
    pub total: usize,
}

/// Expands `def` with every tuple of argument values and keeps those
/// whose rules are present in at least a `threshold` fraction.
pub fn brute_force_bindings(policy: &Policy, def: &MacroDefinition, threshold: f64) -> Vec<OracleBinding> {
    let values = argument_values(policy);
    let presence = Presence::new(policy);
    let n = def.arity;
    let mut out = Vec::new();
    let mut counter = vec![0usize; n];
    if n > 0 && values.is_empty() {
        return out;
    }
    loop {
        let args: Vec<Identifier> = counter.iter().map(|i| values[*i].clone()).collect();
        if let Ok(exp) = m4::expand(def, &args, policy.macros()) {
            let rules = exp.rules();
            if !rules.is_empty() {
                let found = rules.iter().filter(|r| presence.contains(r)).count();
                if found as f64 / rules.len() as f64 >= threshold - 1e-9 {
                    out.push(OracleBinding {
                        args,
                        found,
                        total: rules.len(),
                    });
                }
            }
        }
        // odometer increment
        let mut k = n;
        loop {
            if k == 0 {
                out.sort();
                return out;
            }
            k -= 1;
            counter[k] += 1;
            if counter[k] < values.len() {
                break;
            }
            counter[k] = 0;
        }
    }
}

/// Risk score straight from the table: sum of the two partial scores over
/// twice the maximum, times the permission weight.
pub fn risk(domain: f64, target: f64, weight: f64, max_partial: f64) -> f64 {
    weight * (domain + target) / (2.0 * max_partial)
}

/// Trust score: a `l` position counts the distance from the maximum
/// instead of the score itself.
pub fn trust(kind: &str, domain: f64, target: f64, max_partial: f64) -> f64 {
    let flip = |high: bool, v: f64| if high { v } else { max_partial - v };
    let bytes = kind.as_bytes();
    let d = flip(bytes[0] == b'h', domain);
    let t = flip(bytes[1] == b'h', target);
    (d + t) / (2.0 * max_partial)
}

/// A neverallow spec over concrete names.
#[derive(Debug, Clone)]
pub struct OracleSpec {
    pub source: SetExpr,
    pub target: SetExpr,
    pub classes: SetExpr,
    pub permissions: SetExpr,
}

fn in_set(set: &SetExpr, name: &Identifier, groups: &BTreeMap<Identifier, BTreeSet<Identifier>>) -> bool {
    let named = |list: &[Identifier]| {
        list.iter()
            .any(|x| x == name || groups.get(x).is_some_and(|m| m.contains(name)))
    };
    match set {
        SetExpr::All => true,
        SetExpr::Items {
            complement,
            include,
            exclude,
        } => {
            let listed = named(include) && !named(exclude);
            listed != *complement
        }
    }
}

/// Every (rule, permission) of the expanded allow rules forbidden by
/// `spec`, found by materialising the spec's full cross product first.
pub fn neverallow_hits(policy: &Policy, spec: &OracleSpec) -> BTreeSet<(usize, Identifier)> {
    let types: Vec<&Identifier> = policy.types().iter().collect();
    let groups = policy.attributes().clone();
    let no_groups = BTreeMap::new();
    let mut classes: BTreeSet<Identifier> = policy.classes().keys().cloned().collect();
    let mut perms: BTreeSet<Identifier> = BTreeSet::new();
    for m in policy.expanded_rules() {
        classes.insert(m.rule.class().clone());
        if let Rule::Av(av) = &m.rule {
            perms.extend(av.permissions.iter().cloned());
        }
    }
    let target_self = matches!(&spec.target, SetExpr::Items { include, .. } if include.iter().any(|i| i.as_str() == "self"));

    let mut forbidden: HashSet<(&Identifier, &Identifier, &Identifier, &Identifier)> = HashSet::new();
    for s in &types {
        if !in_set(&spec.source, s, &groups) {
            continue;
        }
        for t in &types {
            let t_hit = in_set(&spec.target, t, &groups) || (target_self && s == t);
            if !t_hit {
                continue;
            }
            for c in &classes {
                if !in_set(&spec.classes, c, &no_groups) {
                    continue;
                }
                for p in &perms {
                    if in_set(&spec.permissions, p, &no_groups) {
                        forbidden.insert((s, t, c, p));
                    }
                }
            }
        }
    }

    let mut out = BTreeSet::new();
    for (i, m) in policy.expanded_rules().iter().enumerate() {
        let Rule::Av(av) = &m.rule else { continue };
        if av.kind != AvKind::Allow {
            continue;
        }
        let target = if av.target.as_str() == "self" { &av.source } else { &av.target };
        for p in &av.permissions {
            if forbidden.contains(&(&av.source, target, &av.class, p)) {
                out.insert((i, p.clone()));
            }
        }
    }
    out
}
