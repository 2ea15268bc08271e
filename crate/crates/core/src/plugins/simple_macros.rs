//! Suggests permission-set macros for rules listing permissions one by one.

use std::collections::{BTreeMap, BTreeSet};

use crate::config::{ConfigError, PluginConfig};
use crate::host::{Finding, Plugin, PluginError, PluginOutput, Severity};
use crate::m4::{self, MacroKind};
use crate::model::{is_identifier_char, write_permissions, AvKind, Diagnostic, Identifier, PermissionSet, Policy, Rule};

pub const NAME: &str = "simple_macros";

const EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct SimpleMacroConfig {
    pub threshold: f64,
    pub ignored_macros: BTreeSet<String>,
    pub ignored_rules: BTreeSet<String>,
}

impl Default for SimpleMacroConfig {
    fn default() -> Self {
        Self {
            threshold: 0.8,
            ignored_macros: BTreeSet::new(),
            ignored_rules: BTreeSet::new(),
        }
    }
}

impl SimpleMacroConfig {
    pub fn from_config(cfg: &PluginConfig) -> Result<Self, ConfigError> {
        let mut r = cfg.reader();
        let mut out = Self::default();
        if let Some(t) = r.number("threshold")? {
            if !(t > 0.0 && t <= 1.0) {
                return Err(r.error("threshold", "must be in (0, 1]"));
            }
            out.threshold = t;
        }
        out.ignored_macros = r.list("ignored_macros")?.unwrap_or_default().into_iter().collect();
        out.ignored_rules = r.list("ignored_rules")?.unwrap_or_default().into_iter().collect();
        r.finish()?;
        Ok(out)
    }
}

/// A macro picked for a rule, with its score against the permissions
/// still uncovered when it was picked.
#[derive(Debug, Clone, PartialEq)]
pub struct Pick {
    pub name: Identifier,
    pub score: f64,
}

/// Outcome of the greedy cover for one permission set.
#[derive(Debug, Clone, PartialEq)]
pub struct Cover {
    pub picks: Vec<Pick>,
    /// Permissions not covered by any pick, sorted.
    pub residual: PermissionSet,
    /// Permissions the picks grant beyond the original set.
    pub added: PermissionSet,
}

impl Cover {
    /// Lowest score among the picks.
    pub fn score(&self) -> f64 {
        self.picks.iter().map(|p| p.score).fold(1.0, f64::min)
    }

    /// `{ m1 m2 p1 }` or a single bare token.
    pub fn permission_text(&self) -> String {
        let mut items: Vec<&str> = self.picks.iter().map(|p| p.name.as_str()).collect();
        items.extend(self.residual.iter().map(Identifier::as_str));
        if items.len() == 1 {
            items[0].to_string()
        } else {
            format!("{{ {} }}", items.join(" "))
        }
    }

    pub fn token_count(&self) -> usize {
        self.picks.len() + self.residual.len()
    }
}

/// Greedy cover of `perms` by `macros`: repeatedly picks the macro with the
/// highest score `|uncovered ∩ m| / |m|` (ties: more permissions, then
/// name) while that score reaches `threshold`.
pub fn greedy_cover(
    perms: &PermissionSet,
    macros: &BTreeMap<Identifier, PermissionSet>,
    threshold: f64,
) -> Cover {
    let mut uncovered = perms.clone();
    let mut picks = Vec::new();
    let mut granted = PermissionSet::new();
    let mut used = BTreeSet::new();
    loop {
        let mut best: Option<(&Identifier, usize, usize)> = None;
        for (name, mperms) in macros {
            if used.contains(name) || mperms.is_empty() {
                continue;
            }
            let hit = mperms.iter().filter(|p| uncovered.contains(*p)).count();
            if hit == 0 || (hit as f64) < threshold * mperms.len() as f64 - EPSILON {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, bhit, blen)) => {
                    // hit/len > bhit/blen, then larger len; names iterate in order
                    let lhs = hit * blen;
                    let rhs = bhit * mperms.len();
                    lhs > rhs || (lhs == rhs && mperms.len() > blen)
                }
            };
            if better {
                best = Some((name, hit, mperms.len()));
            }
        }
        let Some((name, hit, len)) = best else {
            break;
        };
        let mperms = &macros[name];
        used.insert(name.clone());
        picks.push(Pick {
            name: name.clone(),
            score: hit as f64 / len as f64,
        });
        granted.extend(mperms.iter().cloned());
        uncovered.retain(|p| !mperms.contains(p));
    }
    let added = granted.difference(perms).cloned().collect();
    Cover {
        picks,
        residual: uncovered,
        added,
    }
}

pub struct SimpleMacros {
    config: SimpleMacroConfig,
}

impl SimpleMacros {
    pub fn new(config: SimpleMacroConfig) -> Self {
        Self { config }
    }

    pub fn build(cfg: &PluginConfig) -> Result<Box<dyn Plugin>, ConfigError> {
        Ok(Box::new(Self::new(SimpleMacroConfig::from_config(cfg)?)))
    }

    /// Permission-set macros with their expansions.
    fn macro_sets(&self, policy: &Policy, warnings: &mut Vec<Diagnostic>) -> BTreeMap<Identifier, PermissionSet> {
        let table = policy.macros();
        let mut out = BTreeMap::new();
        for def in table.of_kind(MacroKind::PermissionSet) {
            if self.config.ignored_macros.contains(def.name.as_str()) {
                continue;
            }
            match m4::expand(def, &[], table) {
                Ok(exp) => {
                    if let Some(perms) = exp.permissions() {
                        out.insert(def.name.clone(), perms.clone());
                    }
                }
                Err(e) => warnings.push(Diagnostic::new(
                    Some(def.origin.clone()),
                    format!("{NAME}: skipping macro `{}`: {e}", def.name),
                )),
            }
        }
        out
    }

    pub fn suggest(&self, policy: &Policy) -> PluginOutput {
        let mut output = PluginOutput::default();
        let all_macros = self.macro_sets(policy, &mut output.warnings);
        let mut by_class: BTreeMap<&Identifier, BTreeMap<Identifier, PermissionSet>> = BTreeMap::new();

        for mapped in policy.rules() {
            let Rule::Av(av) = &mapped.rule else { continue };
            if av.kind != AvKind::Allow || mapped.via_macro.is_some() {
                continue;
            }
            let key = mapped.rule.key().to_string();
            if self.config.ignored_rules.contains(&key) {
                continue;
            }
            let macros = by_class.entry(&av.class).or_insert_with(|| {
                match policy.classes().get(&av.class) {
                    Some(class) if !class.known_permissions.is_empty() => all_macros
                        .iter()
                        .filter(|(_, perms)| perms.iter().all(|p| class.known_permissions.contains(p)))
                        .map(|(n, p)| (n.clone(), p.clone()))
                        .collect(),
                    _ => all_macros.clone(),
                }
            });
            // macros the statement already uses are not suggested again,
            // and count as one token each
            let written: BTreeSet<&str> = mapped
                .origin_text
                .split(|c: char| !is_identifier_char(c))
                .collect();
            let used: Vec<&PermissionSet> = all_macros
                .iter()
                .filter(|(m, _)| written.contains(m.as_str()))
                .map(|(_, p)| p)
                .collect();
            let unused: BTreeMap<Identifier, PermissionSet>;
            let macros = if used.is_empty() {
                &*macros
            } else {
                unused = macros
                    .iter()
                    .filter(|(m, _)| !written.contains(m.as_str()))
                    .map(|(n, p)| (n.clone(), p.clone()))
                    .collect();
                &unused
            };
            let spelled = av
                .permissions
                .iter()
                .filter(|p| !used.iter().any(|m| m.contains(*p)))
                .count();
            let cost = used.len() + spelled;
            let cover = greedy_cover(&av.permissions, macros, self.config.threshold);
            if cover.picks.is_empty() || cover.token_count() >= cost {
                continue;
            }
            let suggestion = format!(
                "{} {} {}:{} {};",
                av.kind.keyword(),
                av.source,
                av.target,
                av.class,
                cover.permission_text()
            );
            let names: Vec<&str> = cover.picks.iter().map(|p| p.name.as_str()).collect();
            let mut message = format!("permissions can be written with {}", names.join(", "));
            if !cover.added.is_empty() {
                let mut added = String::new();
                let _ = write_permissions(&mut added, cover.added.iter().map(Identifier::as_str));
                message.push_str(&format!("\npartial match: the suggestion also grants {added}"));
            }
            if !mapped.merged_from.is_empty() {
                let others: Vec<String> = mapped.merged_from.iter().map(ToString::to_string).collect();
                message.push_str(&format!("\nmerges statements at {}", others.join(", ")));
            }
            output.findings.push(
                Finding::new(
                    NAME,
                    Severity::Suggestion,
                    mapped.location.clone(),
                    mapped.rule.to_string(),
                    message,
                )
                .with_score(cover.score())
                .with_suggestion(suggestion),
            );
        }
        output
    }
}

impl Plugin for SimpleMacros {
    fn name(&self) -> &str {
        NAME
    }

    fn run(&self, policy: &Policy) -> Result<PluginOutput, PluginError> {
        Ok(self.suggest(policy))
    }
}
