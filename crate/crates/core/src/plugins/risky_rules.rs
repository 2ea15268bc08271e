//! Scores each expanded rule by how dangerous the access it grants is.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::config::{ConfigError, PluginConfig};
use crate::host::{sort_findings, Finding, Plugin, PluginError, PluginOutput, Severity};
use crate::model::{AvKind, Diagnostic, Identifier, Policy, Rule};

pub const NAME: &str = "risky_rules";

pub const TIER_NAMES: [&str; 3] = ["perms_high", "perms_med", "perms_low"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    Risk,
    /// Trust variants: the first letter weights the domain, the second the
    /// type; `h` counts high trust as risky, `l` counts low trust.
    TrustHh,
    TrustHl,
    TrustLh,
    TrustLl,
}

impl Criterion {
    pub const ALL: [Criterion; 5] = [
        Criterion::Risk,
        Criterion::TrustHh,
        Criterion::TrustHl,
        Criterion::TrustLh,
        Criterion::TrustLl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::Risk => "risk",
            Criterion::TrustHh => "trust_hh",
            Criterion::TrustHl => "trust_hl",
            Criterion::TrustLh => "trust_lh",
            Criterion::TrustLl => "trust_ll",
        }
    }

    fn dimension(self) -> Dimension {
        match self {
            Criterion::Risk => Dimension::Risk,
            _ => Dimension::Trust,
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Criterion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown criterion `{s}` (expected risk, trust_hh, trust_hl, trust_lh or trust_ll)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    Risk,
    Trust,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnbinnedPolicy {
    Warn,
    Error,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bin {
    pub name: String,
    pub risk: f64,
    pub trust: f64,
    pub members: BTreeSet<Identifier>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tier {
    pub name: String,
    pub coefficient: f64,
    pub permissions: BTreeSet<Identifier>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskConfig {
    pub criterion: Criterion,
    pub max_partial_score: f64,
    pub capability_score: f64,
    pub capability_classes: BTreeSet<Identifier>,
    pub min_score: f64,
    pub unbinned: UnbinnedPolicy,
    pub bins: Vec<Bin>,
    pub tiers: Vec<Tier>,
}

fn ids(items: Vec<String>, reader: &crate::config::ConfigReader<'_>, key: &str) -> Result<BTreeSet<Identifier>, ConfigError> {
    items
        .iter()
        .map(|s| Identifier::new(s).map_err(|e| reader.error(key, e)))
        .collect()
}

impl RiskConfig {
    pub fn from_config(cfg: &PluginConfig) -> Result<Self, ConfigError> {
        let mut r = cfg.reader();
        let criterion = match r.string("criterion")? {
            None => Criterion::Risk,
            Some(s) => s.parse().map_err(|e: String| r.error("criterion", e))?,
        };
        let max_partial_score = r.number("max_partial_score")?.unwrap_or(30.0);
        if max_partial_score <= 0.0 {
            return Err(r.error("max_partial_score", "must be positive"));
        }
        let in_range = |v: f64| (0.0..=max_partial_score).contains(&v);
        let capability_score = r.number("capability_score")?.unwrap_or(max_partial_score);
        if !in_range(capability_score) {
            return Err(r.error("capability_score", format!("must be in [0, {max_partial_score}]")));
        }
        let capability_classes = ids(r.list("capability_classes")?.unwrap_or_default(), &r, "capability_classes")?;
        let min_score = r.number("min_score")?.unwrap_or(0.0);
        if !(0.0..=1.0).contains(&min_score) {
            return Err(r.error("min_score", "must be in [0, 1]"));
        }
        let unbinned = match r.string("unbinned")?.as_deref() {
            None | Some("warn") => UnbinnedPolicy::Warn,
            Some("error") => UnbinnedPolicy::Error,
            Some(other) => return Err(r.error("unbinned", format!("`{other}` is not `warn` or `error`"))),
        };

        let mut bins = Vec::new();
        let mut seen: BTreeMap<Identifier, String> = BTreeMap::new();
        for (name, mut sub) in r.sections("bin")? {
            let score = |sub: &mut crate::config::ConfigReader<'_>, key: &str| -> Result<f64, ConfigError> {
                let v = sub.number(key)?.ok_or_else(|| sub.error(key, "missing"))?;
                if !in_range(v) {
                    return Err(sub.error(key, format!("must be in [0, {max_partial_score}]")));
                }
                Ok(v)
            };
            let risk = score(&mut sub, "risk")?;
            let trust = score(&mut sub, "trust")?;
            let members = ids(sub.list("members")?.unwrap_or_default(), &sub, "members")?;
            for m in &members {
                if let Some(other) = seen.insert(m.clone(), name.clone()) {
                    return Err(sub.error("members", format!("`{m}` is also in bin `{other}`")));
                }
            }
            sub.finish()?;
            bins.push(Bin { name, risk, trust, members });
        }

        let mut tiers = Vec::new();
        let mut seen: BTreeMap<Identifier, String> = BTreeMap::new();
        for (name, mut sub) in r.sections("tier")? {
            if !TIER_NAMES.contains(&name.as_str()) {
                return Err(r.error(&format!("tier.{name}"), "tiers are perms_high, perms_med and perms_low"));
            }
            let coefficient = sub.number("coefficient")?.ok_or_else(|| sub.error("coefficient", "missing"))?;
            if !(coefficient > 0.0 && coefficient <= 1.0) {
                return Err(sub.error("coefficient", "must be in (0, 1]"));
            }
            let permissions = ids(sub.list("permissions")?.unwrap_or_default(), &sub, "permissions")?;
            for p in &permissions {
                if let Some(other) = seen.insert(p.clone(), name.clone()) {
                    return Err(sub.error("permissions", format!("`{p}` is also in tier `{other}`")));
                }
            }
            sub.finish()?;
            tiers.push(Tier { name, coefficient, permissions });
        }
        let rank = |t: &Tier| TIER_NAMES.iter().position(|n| *n == t.name).unwrap_or(0);
        tiers.sort_by_key(rank);
        for pair in tiers.windows(2) {
            if pair[0].coefficient < pair[1].coefficient {
                return Err(r.error(
                    &format!("tier.{}.coefficient", pair[1].name),
                    format!("must not exceed the coefficient of `{}`", pair[0].name),
                ));
            }
        }
        r.finish()?;
        Ok(Self {
            criterion,
            max_partial_score,
            capability_score,
            capability_classes,
            min_score,
            unbinned,
            bins,
            tiers,
        })
    }

    /// Normalisation constant: twice the highest partial score.
    pub fn normaliser(&self) -> f64 {
        2.0 * self.max_partial_score
    }

    fn bin_of(&self, id: &Identifier) -> Option<&Bin> {
        self.bins.iter().find(|b| b.members.contains(id))
    }

    /// Partial score of a type in one dimension. An unbinned type takes
    /// the highest score among the bins of its attributes; `None` when
    /// neither it nor any of its attributes is binned.
    pub fn partial_score(
        &self,
        id: &Identifier,
        attributes: Option<&BTreeSet<Identifier>>,
        dim: Dimension,
    ) -> Option<f64> {
        let pick = |b: &Bin| match dim {
            Dimension::Risk => b.risk,
            Dimension::Trust => b.trust,
        };
        if let Some(bin) = self.bin_of(id) {
            return Some(pick(bin));
        }
        attributes?
            .iter()
            .filter_map(|a| self.bin_of(a).map(pick))
            .reduce(f64::max)
    }

    /// Highest tier coefficient among `perms`; permissions in no tier
    /// count as 1 and are returned separately.
    pub fn coefficient<'a>(&self, perms: impl IntoIterator<Item = &'a Identifier>) -> (f64, Vec<Identifier>) {
        let mut best: Option<f64> = None;
        let mut untiered = Vec::new();
        for p in perms {
            let c = match self.tiers.iter().find(|t| t.permissions.contains(p)) {
                Some(t) => t.coefficient,
                None => {
                    untiered.push(p.clone());
                    1.0
                }
            };
            best = Some(best.map_or(c, |b: f64| b.max(c)));
        }
        (best.unwrap_or(1.0), untiered)
    }

    fn is_capability(&self, rule: &Rule) -> bool {
        rule.as_av().is_some_and(|av| {
            self.capability_classes.contains(&av.class)
                && (av.target.is_self() || av.target == av.source)
        })
    }
}

/// Score of one rule and the inputs that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleScore {
    pub score: f64,
    pub domain: f64,
    pub target: f64,
    pub coefficient: f64,
    pub capability: bool,
    pub unbinned: Vec<Identifier>,
    pub untiered: Vec<Identifier>,
}

/// `(d + t) / m * c`.
pub fn risk_score(d: f64, t: f64, m: f64, c: f64) -> f64 {
    (d + t) / m * c
}

/// Trust combinations with `h = m / 2` the highest partial score.
pub fn trust_score(criterion: Criterion, d: f64, t: f64, m: f64) -> f64 {
    let h = m / 2.0;
    match criterion {
        Criterion::Risk | Criterion::TrustHh => (d + t) / m,
        Criterion::TrustHl => (d + h - t) / m,
        Criterion::TrustLh => (h - d + t) / m,
        Criterion::TrustLl => (2.0 * h - d - t) / m,
    }
}

/// Scores a concrete rule under `config.criterion`. `attributes` maps
/// types to the attributes they belong to.
pub fn score_rule(
    config: &RiskConfig,
    rule: &Rule,
    attributes: &BTreeMap<Identifier, BTreeSet<Identifier>>,
) -> RuleScore {
    let dim = config.criterion.dimension();
    let mut unbinned = Vec::new();
    let mut partial = |id: &Identifier| {
        config
            .partial_score(id, attributes.get(id), dim)
            .unwrap_or_else(|| {
                unbinned.push(id.clone());
                0.0
            })
    };
    let m = config.normaliser();
    let source = rule.source();
    let target = match rule {
        Rule::Av(av) => av.effective_target(),
        Rule::Te(te) => &te.target,
    };
    let capability = config.is_capability(rule);
    let d = partial(source);
    let (t, coefficient, untiered) = match (config.criterion, rule) {
        (Criterion::Risk, Rule::Av(_)) if capability => (config.capability_score, 1.0, Vec::new()),
        (Criterion::Risk, Rule::Av(av)) => {
            let t = partial(target);
            let (c, untiered) = config.coefficient(&av.permissions);
            (t, c, untiered)
        }
        _ => (partial(target), 1.0, Vec::new()),
    };
    let score = match config.criterion {
        Criterion::Risk => risk_score(d, t, m, coefficient),
        other => trust_score(other, d, t, m),
    };
    RuleScore {
        score,
        domain: d,
        target: t,
        coefficient,
        capability,
        unbinned,
        untiered,
    }
}

pub struct RiskyRules {
    config: RiskConfig,
}

impl RiskyRules {
    pub fn new(config: RiskConfig) -> Self {
        Self { config }
    }

    pub fn build(cfg: &PluginConfig) -> Result<Box<dyn Plugin>, ConfigError> {
        Ok(Box::new(Self::new(RiskConfig::from_config(cfg)?)))
    }

    pub fn config(&self) -> &RiskConfig {
        &self.config
    }

    fn unbinned_types(&self, policy: &Policy) -> BTreeSet<Identifier> {
        let attributes = policy.attributes_by_type();
        let mut out = BTreeSet::new();
        for mapped in policy.expanded_rules() {
            let s = score_rule(&self.config, &mapped.rule, &attributes);
            out.extend(s.unbinned);
        }
        out
    }

    pub fn score_policy(&self, policy: &Policy) -> PluginOutput {
        let attributes = policy.attributes_by_type();
        let mut output = PluginOutput::default();
        let mut unbinned = BTreeSet::new();
        let mut untiered = BTreeSet::new();
        for mapped in policy.expanded_rules() {
            if let Rule::Av(av) = &mapped.rule {
                if av.kind != AvKind::Allow {
                    continue;
                }
            }
            let s = score_rule(&self.config, &mapped.rule, &attributes);
            unbinned.extend(s.unbinned.iter().cloned());
            untiered.extend(s.untiered.iter().cloned());
            if s.score < self.config.min_score {
                continue;
            }
            let message = if self.config.criterion == Criterion::Risk {
                if s.capability {
                    format!(
                        "{}: {} {} + capability {}",
                        self.config.criterion,
                        mapped.rule.source(),
                        s.domain,
                        s.target
                    )
                } else {
                    format!(
                        "{}: {} {} + {} {}, permission weight {}",
                        self.config.criterion,
                        mapped.rule.source(),
                        s.domain,
                        mapped.rule.target(),
                        s.target,
                        s.coefficient
                    )
                }
            } else {
                format!(
                    "{}: {} {} + {} {}",
                    self.config.criterion,
                    mapped.rule.source(),
                    s.domain,
                    mapped.rule.target(),
                    s.target
                )
            };
            output.findings.push(
                Finding::new(
                    NAME,
                    Severity::Info,
                    mapped.location.clone(),
                    mapped.rule.to_string(),
                    message,
                )
                .with_score(s.score),
            );
        }
        for id in unbinned {
            output
                .warnings
                .push(Diagnostic::new(None, format!("{NAME}: `{id}` is in no bin; its partial score is 0")));
        }
        for p in untiered {
            output
                .warnings
                .push(Diagnostic::new(None, format!("{NAME}: permission `{p}` is in no tier; weighted as 1")));
        }
        output
    }
}

impl Plugin for RiskyRules {
    fn name(&self) -> &str {
        NAME
    }

    fn validate(&self, policy: &Policy) -> Result<(), ConfigError> {
        if self.config.unbinned == UnbinnedPolicy::Error {
            let missing = self.unbinned_types(policy);
            if !missing.is_empty() {
                let names: Vec<&str> = missing.iter().map(Identifier::as_str).collect();
                return Err(ConfigError::new(
                    NAME,
                    None,
                    format!("`{NAME}.unbinned = error` and these types are in no bin: {}", names.join(", ")),
                ));
            }
        }
        Ok(())
    }

    fn run(&self, policy: &Policy) -> Result<PluginOutput, PluginError> {
        let mut out = self.score_policy(policy);
        sort_findings(&mut out.findings);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::builtin_config;
    use crate::model::{AvRule, TeRule};

    fn id(s: &str) -> Identifier {
        Identifier::new(s).unwrap()
    }

    fn allow(s: &str, t: &str, c: &str, perms: &[&str]) -> Rule {
        Rule::Av(AvRule::new(AvKind::Allow, id(s), id(t), id(c), perms.iter().map(|p| id(p)).collect()).unwrap())
    }

    fn builtin(criterion: Criterion) -> RiskConfig {
        let mut c = RiskConfig::from_config(&builtin_config(NAME).unwrap()).unwrap();
        c.criterion = criterion;
        c
    }

    #[test]
    fn builtin_config_loads() {
        let c = builtin(Criterion::Risk);
        assert_eq!(c.normaliser(), 60.0);
        assert_eq!(c.tiers.len(), 3);
        assert_eq!(c.bins.len(), 5);
    }

    #[test]
    fn low_tier_rule() {
        let c = builtin(Criterion::Risk);
        let r = allow("untrusted_app", "security_file", "dir", &["getattr", "search"]);
        let s = score_rule(&c, &r, &BTreeMap::new());
        assert!((s.score - 0.5).abs() < 1e-12);
    }

    #[test]
    fn capability_to_self() {
        let c = builtin(Criterion::Risk);
        let r = allow("vold", "self", "capability", &["sys_chroot"]);
        let s = score_rule(&c, &r, &BTreeMap::new());
        assert!(s.capability);
        assert!((s.score - 0.75).abs() < 1e-12);
    }

    #[test]
    fn transition_ignores_permissions() {
        let c = builtin(Criterion::Risk);
        let r = Rule::Te(TeRule {
            source: id("untrusted_app"),
            target: id("device"),
            class: id("file"),
            default_type: id("tee"),
            object_name: None,
        });
        assert!((score_rule(&c, &r, &BTreeMap::new()).score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attribute_fallback_and_unbinned() {
        let c = builtin(Criterion::Risk);
        let attrs: BTreeMap<Identifier, BTreeSet<Identifier>> =
            [(id("my_app"), [id("untrusted_app")].into_iter().collect())].into_iter().collect();
        let r = allow("my_app", "nowhere", "file", &["read"]);
        let s = score_rule(&c, &r, &attrs);
        assert_eq!(s.domain, 30.0);
        assert_eq!(s.unbinned, vec![id("nowhere")]);
    }

    #[test]
    fn trust_variants() {
        assert_eq!(trust_score(Criterion::TrustLh, 15.0, 30.0, 60.0), 0.75);
        assert_eq!(trust_score(Criterion::TrustLl, 0.0, 0.0, 60.0), 1.0);
        assert_eq!(trust_score(Criterion::TrustHl, 30.0, 0.0, 60.0), 1.0);
        assert_eq!(trust_score(Criterion::TrustHh, 30.0, 30.0, 60.0), 1.0);
    }

    #[test]
    fn overlapping_bins_rejected() {
        let text = "[risky_rules.bin.a]\nrisk = 1\ntrust = 1\nmembers = [x]\n[risky_rules.bin.b]\nrisk = 1\ntrust = 1\nmembers = [x]\n";
        let cfg = PluginConfig::parse(NAME, text, "t.conf").unwrap();
        let err = RiskConfig::from_config(&cfg).unwrap_err();
        assert!(err.to_string().contains("also in bin"), "{err}");
    }

    #[test]
    fn bad_tier_order_rejected() {
        let text = "[risky_rules.tier.perms_high]\ncoefficient = 0.2\npermissions = [a]\n[risky_rules.tier.perms_low]\ncoefficient = 0.5\npermissions = [b]\n";
        let cfg = PluginConfig::parse(NAME, text, "t.conf").unwrap();
        assert!(RiskConfig::from_config(&cfg).is_err());
    }

    #[test]
    fn unknown_criterion_rejected() {
        let cfg = PluginConfig::parse(NAME, "[risky_rules]\ncriterion = fear\n", "t.conf").unwrap();
        assert!(RiskConfig::from_config(&cfg).is_err());
    }
}
