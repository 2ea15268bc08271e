//! Finds groups of rules that a rule-block macro could generate and
//! suggests the macro call.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::config::{ConfigError, PluginConfig};
use crate::host::{Finding, Plugin, PluginError, PluginOutput, Severity};
use crate::m4::{MacroDefinition, MacroKind};
use crate::model::{
    write_permissions, Diagnostic, Identifier, MacroUsage, MappedRule, PermissionSet, Policy, Rule,
    RuleKey,
};
use crate::template::{self, Assignment, RuleIndex, TemplateRule};

pub const NAME: &str = "parametrized_macros";

const EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamConfig {
    pub threshold: f64,
    /// Search steps allowed per macro.
    pub binding_cap: u64,
    pub ignored_macros: BTreeSet<String>,
}

impl Default for ParamConfig {
    fn default() -> Self {
        Self {
            threshold: 0.8,
            binding_cap: 10_000_000,
            ignored_macros: BTreeSet::new(),
        }
    }
}

impl ParamConfig {
    pub fn from_config(cfg: &PluginConfig) -> Result<Self, ConfigError> {
        let mut r = cfg.reader();
        let mut out = Self::default();
        if let Some(t) = r.number("threshold")? {
            if !(t > 0.0 && t <= 1.0) {
                return Err(r.error("threshold", "must be in (0, 1]"));
            }
            out.threshold = t;
        }
        if let Some(cap) = r.integer("binding_cap")? {
            if cap == 0 {
                return Err(r.error("binding_cap", "must be positive"));
            }
            out.binding_cap = cap;
        }
        out.ignored_macros = r.list("ignored_macros")?.unwrap_or_default().into_iter().collect();
        r.finish()?;
        Ok(out)
    }
}

/// Argument values for a macro and how many of its rules they reproduce.
#[derive(Debug, Clone, PartialEq)]
pub struct Binding {
    pub args: Vec<Identifier>,
    /// Indices of the templates found in the policy.
    pub found: Vec<usize>,
    pub total: usize,
}

impl Binding {
    pub fn score(&self) -> f64 {
        self.found.len() as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SearchResult {
    /// Sorted by arguments.
    pub bindings: Vec<Binding>,
    pub truncated: bool,
    pub steps: u64,
}

/// The rules of a policy with access-vector permissions combined per key,
/// so that matching one rule is the same as being satisfied by the
/// policy.
pub fn combined_rules(policy: &Policy) -> Vec<Rule> {
    let mut av: BTreeMap<RuleKey, Rule> = BTreeMap::new();
    let mut te: BTreeSet<Rule> = BTreeSet::new();
    for m in policy.rules().iter().chain(policy.neverallows()) {
        match &m.rule {
            Rule::Av(rule) => match av.get_mut(&m.rule.key()) {
                Some(Rule::Av(have)) => have.permissions.extend(rule.permissions.iter().cloned()),
                _ => {
                    av.insert(m.rule.key(), m.rule.clone());
                }
            },
            Rule::Te(_) => {
                te.insert(m.rule.clone());
            }
        }
    }
    av.into_values().chain(te).collect()
}

fn mask_of(args: &[usize], bound: &Assignment) -> u16 {
    args.iter()
        .enumerate()
        .filter(|(_, a)| bound[**a].is_some())
        .fold(0, |m, (i, _)| m | (1 << i))
}

struct Search<'a> {
    templates: &'a [TemplateRule],
    arity: usize,
    index: &'a RuleIndex<'a>,
    universe: &'a [Identifier],
    order: Vec<usize>,
    /// Arguments of each template, ascending.
    args: Vec<Vec<usize>>,
    /// Assignments under which each template is satisfied.
    matches: Vec<Vec<Assignment>>,
    /// (template, mask of its bound arguments) -> values -> matches.
    lookup: HashMap<(usize, u16), HashMap<Vec<Identifier>, Vec<usize>>>,
    skip_budget: usize,
    s_min: usize,
    cap: u64,
    steps: u64,
    truncated: bool,
    seen: HashSet<Vec<Identifier>>,
    found: Vec<Binding>,
}

impl Search<'_> {
    fn tick(&mut self) -> bool {
        self.steps += 1;
        if self.steps > self.cap {
            self.truncated = true;
        }
        !self.truncated
    }

    fn consistent(&mut self, t: usize, bound: &Assignment) -> Vec<usize> {
        let mask = mask_of(&self.args[t], bound);
        let key: Vec<Identifier> = self.args[t]
            .iter()
            .filter_map(|a| bound[*a].clone())
            .collect();
        let (args, matches) = (&self.args[t], &self.matches[t]);
        let table = self.lookup.entry((t, mask)).or_insert_with(|| {
            let mut table: HashMap<Vec<Identifier>, Vec<usize>> = HashMap::new();
            for (i, m) in matches.iter().enumerate() {
                let k: Vec<Identifier> = args
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| mask & (1 << j) != 0)
                    .filter_map(|(_, a)| m[*a].clone())
                    .collect();
                table.entry(k).or_default().push(i);
            }
            table
        });
        table.get(&key).cloned().unwrap_or_default()
    }

    fn dfs(&mut self, depth: usize, bound: &mut Assignment, skips: usize) {
        if !self.tick() {
            return;
        }
        if depth == self.order.len() {
            self.leaf(bound);
            return;
        }
        let t = self.order[depth];
        for i in self.consistent(t, bound) {
            let newly: Vec<usize> = self.args[t]
                .iter()
                .copied()
                .filter(|a| bound[*a].is_none())
                .collect();
            for a in &newly {
                bound[*a] = self.matches[t][i][*a].clone();
            }
            self.dfs(depth + 1, bound, skips);
            for a in &newly {
                bound[*a] = None;
            }
            if self.truncated {
                return;
            }
        }
        if skips < self.skip_budget {
            self.dfs(depth + 1, bound, skips + 1);
        }
    }

    fn leaf(&mut self, bound: &mut Assignment) {
        let free: Vec<usize> = (0..self.arity).filter(|a| bound[*a].is_none()).collect();
        self.fill(&free, bound);
    }

    fn fill(&mut self, free: &[usize], bound: &mut Assignment) {
        let Some((&a, rest)) = free.split_first() else {
            self.consider(bound);
            return;
        };
        for v in self.universe {
            if !self.tick() {
                return;
            }
            bound[a] = Some(v.clone());
            self.fill(rest, bound);
        }
        bound[a] = None;
    }

    fn consider(&mut self, bound: &Assignment) {
        let args: Vec<Identifier> = bound.iter().map(|v| v.clone().expect("all bound")).collect();
        if !self.seen.insert(args.clone()) {
            return;
        }
        let found: Vec<usize> = self
            .templates
            .iter()
            .enumerate()
            .filter(|(_, t)| t.instantiate(bound).is_some_and(|r| self.index.satisfies(&r)))
            .map(|(i, _)| i)
            .collect();
        if found.len() >= self.s_min {
            self.found.push(Binding {
                args,
                found,
                total: self.templates.len(),
            });
        }
    }
}

/// All argument bindings, over `universe`, whose instantiated templates
/// are found in `index` in at least a `threshold` fraction.
pub fn search_bindings(
    templates: &[TemplateRule],
    arity: usize,
    index: &RuleIndex<'_>,
    universe: &BTreeSet<Identifier>,
    threshold: f64,
    cap: u64,
) -> SearchResult {
    let total = templates.len();
    if total == 0 {
        return SearchResult::default();
    }
    let s_min = ((threshold * total as f64 - EPSILON).ceil() as usize).clamp(1, total);
    let accept = |s: &str| universe.contains(s);
    let base: Assignment = vec![None; arity];
    let args: Vec<Vec<usize>> = templates.iter().map(|t| t.args().into_iter().collect()).collect();
    let matches: Vec<Vec<Assignment>> = templates
        .iter()
        .map(|t| {
            let mut set = HashSet::new();
            let mut out = Vec::new();
            for rule in index.candidates(t) {
                for m in t.match_rule(rule, &base, &accept) {
                    if set.insert(m.clone()) {
                        out.push(m);
                    }
                }
            }
            out
        })
        .collect();
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by_key(|i| std::cmp::Reverse(args[*i].len()));
    let universe: Vec<Identifier> = universe.iter().cloned().collect();
    let mut search = Search {
        templates,
        arity,
        index,
        universe: &universe,
        order,
        args,
        matches,
        lookup: HashMap::new(),
        skip_budget: total - s_min,
        s_min,
        cap,
        steps: 0,
        truncated: false,
        seen: HashSet::new(),
        found: Vec::new(),
    };
    let mut bound = base;
    search.dfs(0, &mut bound, 0);
    let mut bindings = search.found;
    bindings.sort_by(|a, b| a.args.cmp(&b.args));
    SearchResult {
        bindings,
        truncated: search.truncated,
        steps: search.steps,
    }
}

pub struct ParametrizedMacros {
    config: ParamConfig,
}

struct MacroResult {
    findings: Vec<Finding>,
    warnings: Vec<Diagnostic>,
}

impl ParametrizedMacros {
    pub fn new(config: ParamConfig) -> Self {
        Self { config }
    }

    pub fn build(cfg: &PluginConfig) -> Result<Box<dyn Plugin>, ConfigError> {
        Ok(Box::new(Self::new(ParamConfig::from_config(cfg)?)))
    }

    fn analyse(
        &self,
        def: &MacroDefinition,
        policy: &Policy,
        index: &RuleIndex<'_>,
        universe: &BTreeSet<Identifier>,
        by_key: &HashMap<RuleKey, Vec<&MappedRule>>,
        existing: &HashSet<(Identifier, Vec<Identifier>)>,
    ) -> MacroResult {
        let mut out = MacroResult {
            findings: Vec::new(),
            warnings: Vec::new(),
        };
        let templates = match template::macro_templates(def, policy.macros()) {
            Ok(t) => t,
            Err(e) => {
                out.warnings.push(Diagnostic::new(
                    Some(def.origin.clone()),
                    format!("{NAME}: skipping macro `{}`: {e}", def.name),
                ));
                return out;
            }
        };
        if templates.is_empty() {
            return out;
        }
        let result = search_bindings(
            &templates,
            def.arity,
            index,
            universe,
            self.config.threshold,
            self.config.binding_cap,
        );
        if result.truncated {
            out.findings.push(Finding::new(
                NAME,
                Severity::Warning,
                def.origin.clone(),
                format!("define(`{}')", def.name),
                format!(
                    "search for `{}` stopped after {} steps (binding_cap); suggestions for it may be incomplete",
                    def.name, self.config.binding_cap
                ),
            ));
        }
        for binding in result.bindings {
            if existing.contains(&(def.name.clone(), binding.args.clone())) {
                continue;
            }
            let values: Assignment = binding.args.iter().cloned().map(Some).collect();
            if let Some(f) = self.describe(def, &templates, &binding, &values, by_key) {
                out.findings.push(f);
            }
        }
        out
    }

    fn describe(
        &self,
        def: &MacroDefinition,
        templates: &[TemplateRule],
        binding: &Binding,
        values: &Assignment,
        by_key: &HashMap<RuleKey, Vec<&MappedRule>>,
    ) -> Option<Finding> {
        let usage = MacroUsage::call_text(def.name.as_str(), &binding.args);
        let mut matched = Vec::new();
        let mut missing = Vec::new();
        let mut residual = Vec::new();
        let mut first: Option<&MappedRule> = None;
        for (i, t) in templates.iter().enumerate() {
            let rule = t.instantiate(values)?;
            if !binding.found.contains(&i) {
                missing.push(rule.to_string());
                continue;
            }
            let sources = by_key.get(&rule.key()).map(Vec::as_slice).unwrap_or(&[]);
            let mut granted = PermissionSet::new();
            for m in sources {
                matched.push(format!("{} ({})", m.rule, m.location));
                if first.is_none_or(|f| m.location < f.location) {
                    first = Some(m);
                }
                if let Rule::Av(av) = &m.rule {
                    granted.extend(av.permissions.iter().cloned());
                }
            }
            if let Rule::Av(av) = &rule {
                let extra: Vec<&str> = granted
                    .difference(&av.permissions)
                    .map(Identifier::as_str)
                    .collect();
                if !extra.is_empty() {
                    let mut p = String::new();
                    let _ = write_permissions(&mut p, extra);
                    residual.push(format!("{}: {p}", rule.key()));
                }
            }
        }
        let first = first?;
        matched.dedup();
        let mut message = format!(
            "{} of {} rules of `{}` found",
            binding.found.len(),
            binding.total,
            def.name
        );
        for m in &matched {
            message.push_str(&format!("\nmatched: {m}"));
        }
        for m in &missing {
            message.push_str(&format!("\nmissing: {m}"));
        }
        for r in &residual {
            message.push_str(&format!("\nkeep: {r}"));
        }
        Some(
            Finding::new(
                NAME,
                Severity::Suggestion,
                first.location.clone(),
                first.rule.to_string(),
                message,
            )
            .with_score(binding.score())
            .with_suggestion(usage),
        )
    }

    pub fn suggest(&self, policy: &Policy) -> PluginOutput {
        let combined = combined_rules(policy);
        let index = RuleIndex::new(combined.iter());
        let universe = template::argument_universe(policy);
        let mut by_key: HashMap<RuleKey, Vec<&MappedRule>> = HashMap::new();
        for m in policy.rules().iter().chain(policy.neverallows()) {
            by_key.entry(m.rule.key()).or_default().push(m);
        }
        let existing: HashSet<(Identifier, Vec<Identifier>)> = policy
            .macro_usages()
            .iter()
            .map(|u| (u.name.clone(), u.args.clone()))
            .collect();
        let defs: Vec<&MacroDefinition> = policy
            .macros()
            .of_kind(MacroKind::RuleBlock)
            .filter(|d| !self.config.ignored_macros.contains(d.name.as_str()))
            .collect();

        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<(usize, MacroResult)>> = Mutex::new(Vec::new());
        let workers = std::thread::available_parallelism()
            .map_or(1, |n| n.get())
            .min(defs.len().max(1));
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(def) = defs.get(i) else { break };
                    let r = self.analyse(def, policy, &index, &universe, &by_key, &existing);
                    results.lock().expect("no poisoned lock").push((i, r));
                });
            }
        });
        let mut results = results.into_inner().expect("no poisoned lock");
        results.sort_by_key(|(i, _)| *i);
        let mut output = PluginOutput::default();
        for (_, r) in results {
            output.findings.extend(r.findings);
            output.warnings.extend(r.warnings);
        }
        output
    }
}

impl Plugin for ParametrizedMacros {
    fn name(&self) -> &str {
        NAME
    }

    fn run(&self, policy: &Policy) -> Result<PluginOutput, PluginError> {
        Ok(self.suggest(policy))
    }
}
