//! Rule templates with argument placeholders, shared by the macro
//! suggestion and rule-tuple checks.
//!
//! A placeholder may sit inside a longer token (`$2_socket`), so every
//! token of a template is a [`Pattern`] of literal and argument pieces.
//! Matching a concrete token against a pattern enumerates every way of
//! splitting it into argument values.

use std::collections::{BTreeSet, HashMap};

use crate::m4::{self, MacroDefinition, MacroError, MacroTable};
use crate::model::{AvKind, Identifier, Policy, Rule, RuleKey, SELF};
use crate::syntax::{self, SyntaxError};

/// Argument values by index; `None` while unbound.
pub type Assignment = Vec<Option<Identifier>>;

const SENTINEL_PREFIX: &str = "SELINTxARG";
const SENTINEL_SUFFIX: &str = "xSELINT";

/// Identifier standing in for argument `index` (0-based) while a template
/// body is expanded and parsed.
pub fn sentinel(index: usize) -> String {
    format!("{SENTINEL_PREFIX}{index}{SENTINEL_SUFFIX}")
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Piece {
    Lit(String),
    Arg(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Pattern(pub Vec<Piece>);

impl Pattern {
    /// Splits a token containing sentinels into pieces.
    pub fn from_token(token: &str) -> Pattern {
        let mut pieces = Vec::new();
        let mut rest = token;
        while let Some(start) = rest.find(SENTINEL_PREFIX) {
            let after = &rest[start + SENTINEL_PREFIX.len()..];
            let digits = after.chars().take_while(char::is_ascii_digit).count();
            let parsed = after[..digits].parse::<usize>().ok();
            match parsed.filter(|_| after[digits..].starts_with(SENTINEL_SUFFIX)) {
                Some(index) => {
                    if start > 0 {
                        pieces.push(Piece::Lit(rest[..start].to_string()));
                    }
                    pieces.push(Piece::Arg(index));
                    rest = &after[digits + SENTINEL_SUFFIX.len()..];
                }
                None => {
                    let keep = start + SENTINEL_PREFIX.len();
                    push_lit(&mut pieces, &rest[..keep]);
                    rest = &rest[keep..];
                }
            }
        }
        if !rest.is_empty() {
            push_lit(&mut pieces, rest);
        }
        Pattern(pieces)
    }

    pub fn literal(&self) -> Option<&str> {
        match self.0.as_slice() {
            [Piece::Lit(s)] => Some(s),
            _ => None,
        }
    }

    pub fn args(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().filter_map(|p| match p {
            Piece::Arg(i) => Some(*i),
            Piece::Lit(_) => None,
        })
    }

    /// The token with every argument substituted; `None` if one is unbound
    /// or the result is not an identifier.
    pub fn instantiate(&self, values: &Assignment) -> Option<Identifier> {
        if let Some(lit) = self.literal() {
            return Identifier::new(lit).ok();
        }
        let mut out = String::new();
        for piece in &self.0 {
            match piece {
                Piece::Lit(s) => out.push_str(s),
                Piece::Arg(i) => out.push_str(values.get(*i)?.as_ref()?.as_str()),
            }
        }
        Identifier::new(&out).ok()
    }

    /// Every extension of `base` under which this pattern spells `token`.
    /// New argument values must satisfy `accept`.
    pub fn decompose(
        &self,
        token: &str,
        base: &Assignment,
        accept: &dyn Fn(&str) -> bool,
    ) -> Vec<Assignment> {
        let mut out = Vec::new();
        let mut current = base.clone();
        decompose_from(&self.0, token, &mut current, accept, &mut out);
        out
    }

    pub fn display_with(&self, name: &dyn Fn(usize) -> String) -> String {
        self.0
            .iter()
            .map(|p| match p {
                Piece::Lit(s) => s.clone(),
                Piece::Arg(i) => name(*i),
            })
            .collect()
    }
}

fn push_lit(pieces: &mut Vec<Piece>, s: &str) {
    if let Some(Piece::Lit(prev)) = pieces.last_mut() {
        prev.push_str(s);
    } else {
        pieces.push(Piece::Lit(s.to_string()));
    }
}

fn decompose_from(
    pieces: &[Piece],
    token: &str,
    current: &mut Assignment,
    accept: &dyn Fn(&str) -> bool,
    out: &mut Vec<Assignment>,
) {
    let Some((first, rest)) = pieces.split_first() else {
        if token.is_empty() {
            out.push(current.clone());
        }
        return;
    };
    match first {
        Piece::Lit(lit) => {
            if let Some(tail) = token.strip_prefix(lit.as_str()) {
                decompose_from(rest, tail, current, accept, out);
            }
        }
        Piece::Arg(i) => {
            if let Some(bound) = current[*i].clone() {
                if let Some(tail) = token.strip_prefix(bound.as_str()) {
                    decompose_from(rest, tail, current, accept, out);
                }
                return;
            }
            // a trailing argument takes the whole remainder
            let ends: Vec<usize> = if rest.is_empty() {
                vec![token.len()]
            } else {
                token
                    .char_indices()
                    .map(|(i, c)| i + c.len_utf8())
                    .collect()
            };
            for end in ends {
                let value = &token[..end];
                if !accept(value) {
                    continue;
                }
                let Ok(id) = Identifier::new(value) else {
                    continue;
                };
                current[*i] = Some(id);
                decompose_from(rest, &token[end..], current, accept, out);
                current[*i] = None;
            }
        }
    }
}

/// A rule with placeholder patterns.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TemplateRule {
    Av {
        kind: AvKind,
        source: Pattern,
        target: Pattern,
        class: Pattern,
        permissions: Vec<Pattern>,
    },
    Te {
        source: Pattern,
        target: Pattern,
        class: Pattern,
        default_type: Pattern,
        object_name: Option<String>,
    },
}

impl TemplateRule {
    /// Template of a rule whose tokens may contain sentinels.
    pub fn from_rule(rule: &Rule) -> TemplateRule {
        let p = |id: &Identifier| Pattern::from_token(id.as_str());
        match rule {
            Rule::Av(av) => TemplateRule::Av {
                kind: av.kind,
                source: p(&av.source),
                target: p(&av.target),
                class: p(&av.class),
                permissions: av.permissions.iter().map(p).collect(),
            },
            Rule::Te(te) => TemplateRule::Te {
                source: p(&te.source),
                target: p(&te.target),
                class: p(&te.class),
                default_type: p(&te.default_type),
                object_name: te.object_name.clone(),
            },
        }
    }

    fn patterns(&self) -> Vec<&Pattern> {
        match self {
            TemplateRule::Av {
                source,
                target,
                class,
                permissions,
                ..
            } => {
                let mut out = vec![source, target, class];
                out.extend(permissions.iter());
                out
            }
            TemplateRule::Te {
                source,
                target,
                class,
                default_type,
                ..
            } => vec![source, target, class, default_type],
        }
    }

    pub fn args(&self) -> BTreeSet<usize> {
        self.patterns().into_iter().flat_map(Pattern::args).collect()
    }

    pub fn class(&self) -> &Pattern {
        match self {
            TemplateRule::Av { class, .. } | TemplateRule::Te { class, .. } => class,
        }
    }

    pub fn is_te(&self) -> bool {
        matches!(self, TemplateRule::Te { .. })
    }

    pub fn av_kind(&self) -> Option<AvKind> {
        match self {
            TemplateRule::Av { kind, .. } => Some(*kind),
            TemplateRule::Te { .. } => None,
        }
    }

    pub fn instantiate(&self, values: &Assignment) -> Option<Rule> {
        match self {
            TemplateRule::Av {
                kind,
                source,
                target,
                class,
                permissions,
            } => {
                let perms = permissions
                    .iter()
                    .map(|p| p.instantiate(values))
                    .collect::<Option<BTreeSet<_>>>()?;
                let rule = crate::model::AvRule::new(
                    *kind,
                    source.instantiate(values)?,
                    target.instantiate(values)?,
                    class.instantiate(values)?,
                    perms,
                )
                .ok()?;
                Some(Rule::Av(rule))
            }
            TemplateRule::Te {
                source,
                target,
                class,
                default_type,
                object_name,
            } => Some(Rule::Te(crate::model::TeRule {
                source: source.instantiate(values)?,
                target: target.instantiate(values)?,
                class: class.instantiate(values)?,
                default_type: default_type.instantiate(values)?,
                object_name: object_name.clone(),
            })),
        }
    }

    /// Every extension of `base` under which this template, instantiated,
    /// is satisfied by `rule` (same key; for access-vector rules `rule`
    /// grants a superset of the permissions, for transitions the default
    /// type and object name are equal).
    pub fn match_rule(
        &self,
        rule: &Rule,
        base: &Assignment,
        accept: &dyn Fn(&str) -> bool,
    ) -> Vec<Assignment> {
        let mut states = vec![base.clone()];
        let step = |states: Vec<Assignment>, pattern: &Pattern, token: &str| -> Vec<Assignment> {
            states
                .iter()
                .flat_map(|s| pattern.decompose(token, s, accept))
                .collect()
        };
        match (self, rule) {
            (
                TemplateRule::Av {
                    kind,
                    source,
                    target,
                    class,
                    permissions,
                },
                Rule::Av(av),
            ) if *kind == av.kind => {
                states = step(states, class, av.class.as_str());
                states = step(states, source, av.source.as_str());
                states = step(states, target, av.target.as_str());
                for perm in permissions {
                    if states.is_empty() {
                        break;
                    }
                    if let Some(lit) = perm.literal() {
                        if !av.permissions.contains(lit) {
                            return Vec::new();
                        }
                        continue;
                    }
                    states = states
                        .iter()
                        .flat_map(|s| {
                            av.permissions
                                .iter()
                                .flat_map(move |p| perm.decompose(p.as_str(), s, accept))
                        })
                        .collect();
                }
            }
            (
                TemplateRule::Te {
                    source,
                    target,
                    class,
                    default_type,
                    object_name,
                },
                Rule::Te(te),
            ) if *object_name == te.object_name => {
                states = step(states, class, te.class.as_str());
                states = step(states, source, te.source.as_str());
                states = step(states, target, te.target.as_str());
                states = step(states, default_type, te.default_type.as_str());
            }
            _ => return Vec::new(),
        }
        states.sort();
        states.dedup();
        states
    }

    pub fn display_with(&self, name: &dyn Fn(usize) -> String) -> String {
        match self {
            TemplateRule::Av {
                kind,
                source,
                target,
                class,
                permissions,
            } => {
                let perms: Vec<String> = permissions.iter().map(|p| p.display_with(name)).collect();
                let perms = if perms.len() == 1 {
                    perms[0].clone()
                } else {
                    format!("{{ {} }}", perms.join(" "))
                };
                format!(
                    "{} {} {}:{} {};",
                    kind.keyword(),
                    source.display_with(name),
                    target.display_with(name),
                    class.display_with(name),
                    perms
                )
            }
            TemplateRule::Te {
                source,
                target,
                class,
                default_type,
                object_name,
            } => {
                let obj = object_name
                    .as_ref()
                    .map(|o| format!(" \"{o}\""))
                    .unwrap_or_default();
                format!(
                    "type_transition {} {}:{} {}{};",
                    source.display_with(name),
                    target.display_with(name),
                    class.display_with(name),
                    default_type.display_with(name),
                    obj
                )
            }
        }
    }
}

/// Templates of a rule-block macro, one per rule of its expansion, in
/// expansion order.
pub fn macro_templates(def: &MacroDefinition, table: &MacroTable) -> Result<Vec<TemplateRule>, MacroError> {
    let args: Vec<Identifier> = (0..def.arity)
        .map(|i| Identifier::new(&sentinel(i)).expect("sentinel is an identifier"))
        .collect();
    let expansion = m4::expand(def, &args, table)?;
    Ok(expansion.rules().iter().map(TemplateRule::from_rule).collect())
}

/// Parses policy statements written with `$ARG0`..`$ARG9` placeholders.
pub fn parse_placeholder_rules(text: &str) -> Result<Vec<TemplateRule>, SyntaxError> {
    let mut substituted = text.to_string();
    for i in (0..10).rev() {
        substituted = substituted.replace(&format!("$ARG{i}"), &sentinel(i));
    }
    let statements = syntax::parse_statements(&substituted, &syntax::NoMacros)?;
    let mut out = Vec::new();
    for stmt in &statements {
        match m4::lower_rules(&stmt.kind, &mut |set| set.plain().map(<[Identifier]>::to_vec)) {
            Some(Ok(rules)) => out.extend(rules.iter().map(TemplateRule::from_rule)),
            Some(Err(_)) => {
                return Err(SyntaxError {
                    line: stmt.line,
                    message: "template rules cannot use `~`, `*` or `-`".into(),
                })
            }
            None => {
                return Err(SyntaxError {
                    line: stmt.line,
                    message: "only allow, neverallow and type_transition rules are allowed in templates".into(),
                })
            }
        }
    }
    Ok(out)
}

/// Lookup of the rules of a policy view by key, answering whether a
/// concrete rule is satisfied.
#[derive(Debug, Default)]
pub struct RuleIndex<'a> {
    by_key: HashMap<RuleKey, Vec<&'a Rule>>,
    by_class: HashMap<(Option<AvKind>, Identifier), Vec<&'a Rule>>,
}

impl<'a> RuleIndex<'a> {
    pub fn new<I: IntoIterator<Item = &'a Rule>>(rules: I) -> Self {
        let mut index = RuleIndex::default();
        for rule in rules {
            index.by_key.entry(rule.key()).or_default().push(rule);
            let kind = rule.as_av().map(|av| av.kind);
            index
                .by_class
                .entry((kind, rule.class().clone()))
                .or_default()
                .push(rule);
        }
        index
    }

    /// Index over the unexpanded view plus the policy's own neverallows.
    pub fn unexpanded(policy: &'a Policy) -> Self {
        Self::new(
            policy
                .rules()
                .iter()
                .chain(policy.neverallows())
                .map(|m| &m.rule),
        )
    }

    /// Whether some indexed rule (or several with the same key, together)
    /// satisfies `rule`.
    pub fn satisfies(&self, rule: &Rule) -> bool {
        let Some(candidates) = self.by_key.get(&rule.key()) else {
            return false;
        };
        match rule {
            Rule::Av(av) => {
                let mut granted = BTreeSet::new();
                for c in candidates {
                    if let Rule::Av(have) = c {
                        granted.extend(have.permissions.iter());
                    }
                }
                av.permissions.iter().all(|p| granted.contains(p))
            }
            Rule::Te(te) => candidates.iter().any(|c| {
                c.as_te().is_some_and(|have| {
                    have.default_type == te.default_type && have.object_name == te.object_name
                })
            }),
        }
    }

    /// Rules that may satisfy `template` (same kind and, when the class is
    /// literal, same class).
    pub fn candidates(&self, template: &TemplateRule) -> Vec<&'a Rule> {
        let kind = template.av_kind();
        match template.class().literal() {
            Some(class) => Identifier::new(class)
                .ok()
                .and_then(|c| self.by_class.get(&(kind, c)))
                .cloned()
                .unwrap_or_default(),
            None => {
                let mut out: Vec<&Rule> = self
                    .by_class
                    .iter()
                    .filter(|((k, _), _)| *k == kind && (kind.is_some() || template.is_te()))
                    .flat_map(|(_, rules)| rules.iter().copied())
                    .collect();
                out.sort_by_key(|r| r.to_string());
                out
            }
        }
    }

    pub fn with_key(&self, key: &RuleKey) -> &[&'a Rule] {
        self.by_key.get(key).map_or(&[], Vec::as_slice)
    }
}

/// Splits `token` into its `_`-separated runs of segments: `a_b_c` gives
/// `a`, `b`, `c`, `a_b`, `b_c` and `a_b_c`.
pub fn underscore_fragments(token: &str) -> Vec<&str> {
    let mut bounds = vec![0];
    for (i, c) in token.char_indices() {
        if c == '_' {
            bounds.push(i);
            bounds.push(i + 1);
        }
    }
    bounds.push(token.len());
    let starts: Vec<usize> = bounds.iter().step_by(2).copied().collect();
    let ends: Vec<usize> = bounds.iter().skip(1).step_by(2).copied().collect();
    let mut out = Vec::new();
    for &s in &starts {
        for &e in &ends {
            if e > s {
                out.push(&token[s..e]);
            }
        }
    }
    out
}

/// Values a macro argument may take: every identifier of the policy plus
/// the `_`-separated fragments of those identifiers, minus macro names and
/// `self`.
pub fn argument_universe(policy: &Policy) -> BTreeSet<Identifier> {
    let mut out = BTreeSet::new();
    for id in policy.identifier_universe() {
        for frag in underscore_fragments(id.as_str()) {
            if let Ok(f) = Identifier::new(frag) {
                out.insert(f);
            }
        }
        out.insert(id);
    }
    let macros = policy.macros();
    out.retain(|id| {
        id.as_str() != SELF && macros.get(id.as_str()).is_none() && !macros.is_guard(id.as_str())
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    fn id(s: &str) -> Identifier {
        Identifier::new(s).unwrap()
    }

    fn any(_: &str) -> bool {
        true
    }

    #[test]
    fn pattern_pieces() {
        let p = Pattern::from_token(&format!("{}_socket", sentinel(1)));
        assert_eq!(p.0, vec![Piece::Arg(1), Piece::Lit("_socket".into())]);
        let p = Pattern::from_token(&format!("pre_{}{}", sentinel(0), sentinel(2)));
        assert_eq!(p.0, vec![Piece::Lit("pre_".into()), Piece::Arg(0), Piece::Arg(2)]);
        assert_eq!(Pattern::from_token("plain").literal(), Some("plain"));
    }

    #[test]
    fn decompose_suffix() {
        let p = Pattern::from_token(&format!("{}_socket", sentinel(1)));
        let got = p.decompose("b_socket", &vec![None, None], &any);
        assert_eq!(got, vec![vec![None, Some(id("b"))]]);
        assert!(p.decompose("socket", &vec![None, None], &any).is_empty());
    }

    #[test]
    fn decompose_all_splits() {
        let p = Pattern::from_token(&format!("{}_{}", sentinel(0), sentinel(1)));
        let got = p.decompose("a_b_c", &vec![None, None], &any);
        assert_eq!(
            got,
            vec![
                vec![Some(id("a")), Some(id("b_c"))],
                vec![Some(id("a_b")), Some(id("c"))]
            ]
        );
        let only_a = p.decompose("a_b_c", &vec![None, None], &|v| v != "a_b");
        assert_eq!(only_a.len(), 1);
    }

    #[test]
    fn decompose_respects_bound_values() {
        let p = Pattern::from_token(&sentinel(0));
        assert!(p.decompose("x", &vec![Some(id("y"))], &any).is_empty());
        assert_eq!(p.decompose("y", &vec![Some(id("y"))], &any).len(), 1);
    }

    #[test]
    fn macro_templates_and_matching() {
        let table = m4::parse_macro_file(
            "define(`unix_socket_connect', `\nallow $1 $2_socket:sock_file write;\nallow $1 $3:unix_stream_socket connectto;\n')",
            Path::new("te_macros"),
            MacroTable::new(),
        )
        .unwrap();
        let def = table.get("unix_socket_connect").unwrap();
        let templates = macro_templates(def, &table).unwrap();
        assert_eq!(templates.len(), 2);
        assert_eq!(
            templates[0].display_with(&|i| format!("${}", i + 1)),
            "allow $1 $2_socket:sock_file write;"
        );
        let rule = Rule::Av(
            crate::model::AvRule::new(
                AvKind::Allow,
                id("a"),
                id("b_socket"),
                id("sock_file"),
                [id("write"), id("read")].into_iter().collect(),
            )
            .unwrap(),
        );
        let got = templates[0].match_rule(&rule, &vec![None; 3], &any);
        assert_eq!(got, vec![vec![Some(id("a")), Some(id("b")), None]]);
        let values = vec![Some(id("a")), Some(id("b")), Some(id("c"))];
        assert_eq!(
            templates[1].instantiate(&values).unwrap().to_string(),
            "allow a c:unix_stream_socket connectto;"
        );
    }

    #[test]
    fn placeholder_rules() {
        let t = parse_placeholder_rules(
            "type_transition $ARG0 $ARG1:file $ARG2;\nallow $ARG0 $ARG1:dir { search write };",
        )
        .unwrap();
        assert_eq!(t.len(), 2);
        assert!(t[0].is_te());
        assert_eq!(t[1].args(), [0, 1].into_iter().collect());
        assert!(parse_placeholder_rules("type $ARG0;").is_err());
    }

    #[test]
    fn fragments() {
        let mut f = underscore_fragments("a_b_c");
        f.sort();
        assert_eq!(f, ["a", "a_b", "a_b_c", "b", "b_c", "c"]);
        assert_eq!(underscore_fragments("x"), ["x"]);
    }

    #[test]
    fn index_satisfaction_is_superset_across_rules() {
        let av = |perms: &[&str]| {
            Rule::Av(
                crate::model::AvRule::new(
                    AvKind::Allow,
                    id("a"),
                    id("b"),
                    id("file"),
                    perms.iter().map(|p| id(p)).collect(),
                )
                .unwrap(),
            )
        };
        let rules = [av(&["read"]), av(&["write"])];
        let index = RuleIndex::new(rules.iter());
        assert!(index.satisfies(&av(&["read", "write"])));
        assert!(!index.satisfies(&av(&["open"])));
    }
}
