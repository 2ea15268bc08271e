use std::collections::BTreeSet;
use std::path::Path;

use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use selint_core::config::{builtin_config, PluginConfig};
use selint_core::host::{Finding, Plugin};
use selint_core::m4::{self, MacroError, MacroTable};
use selint_core::parser::{parse_policy_with, ParseOptions, UndeclaredPolicy};
use selint_core::model::{merge_rules, AvRule, Identifier, Rule};
use selint_core::plugins::parametrized_macros::{self, ParamConfig, ParametrizedMacros};
use selint_core::plugins::risky_rules::{self, score_rule, Criterion, Dimension, RiskConfig};
use selint_core::plugins::simple_macros::{self, greedy_cover};
use selint_core::plugins::unnecessary_rules;
use selint_core::plugins::user_neverallows::{find_violations, NeverallowSpec, ResolvedSpec};
use selint_core::template::{self, RuleIndex};
use selint_testkit::oracle::{self, OracleSpec};
use selint_testkit::{gen, Fixture};

fn id(s: &str) -> Identifier {
    Identifier::new(s).unwrap()
}

fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

const ARG_POOL: [&str; 6] = ["alpha", "beta", "gamma", "delta", "omega", "kappa"];

fn single_macro(body: &str) -> MacroTable {
    m4::parse_macro_file(&format!("define(`m', `{body}')\n"), Path::new("te_macros"), MacroTable::new()).unwrap()
}

fn substitute(body: &str, args: &[&str]) -> String {
    let mut text = body.to_string();
    for (i, a) in args.iter().enumerate().rev() {
        text = text.replace(&format!("${}", i + 1), a);
    }
    text
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn macro_expansion_round_trips(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (body, arity) = gen::random_rule_block(&mut r);
        let table = single_macro(&body);
        let def = table.get("m").unwrap();
        prop_assert_eq!(def.arity, arity);
        let args: Vec<&str> = (0..arity).map(|_| *ARG_POOL.choose(&mut r).unwrap()).collect();
        let ids: Vec<Identifier> = args.iter().map(|a| id(a)).collect();
        let mut produced = m4::expand(def, &ids, &table).unwrap().rules().to_vec();
        let mut by_hand = oracle::lower_by_hand(&substitute(&body, &args));
        produced.sort();
        by_hand.sort();
        prop_assert_eq!(produced, by_hand);
    }

    #[test]
    fn distinct_arguments_give_distinct_rules(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (body, arity) = gen::random_rule_block(&mut r);
        prop_assume!((1..=arity).all(|k| body.contains(&format!("${k}"))));
        let table = single_macro(&body);
        let def = table.get("m").unwrap();
        let pick = |r: &mut StdRng| -> Vec<Identifier> {
            (0..arity).map(|_| id(ARG_POOL.choose(r).unwrap())).collect()
        };
        let (a, b) = (pick(&mut r), pick(&mut r));
        prop_assume!(a != b);
        let ra: BTreeSet<Rule> = m4::expand(def, &a, &table).unwrap().rules().iter().cloned().collect();
        let rb: BTreeSet<Rule> = m4::expand(def, &b, &table).unwrap().rules().iter().cloned().collect();
        prop_assert_ne!(ra, rb);
    }

    #[test]
    fn acyclic_tables_expand_to_a_fixpoint(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.gen_range(1..8);
        let mut text = String::new();
        for i in 0..n {
            let mut body = format!("allow $1 t{i}:file read;\n");
            for _ in 0..r.gen_range(0..3) {
                if i > 0 {
                    let j = r.gen_range(0..i);
                    body.push_str(&format!("m{j}($1)\n"));
                }
            }
            text.push_str(&format!("define(`m{i}', `{body}')\n"));
        }
        let table = m4::parse_macro_file(&text, Path::new("te_macros"), MacroTable::new()).unwrap();
        for i in 0..n {
            let def = table.get(&format!("m{i}")).unwrap();
            let exp = m4::expand(def, &[id("x")], &table);
            prop_assert!(exp.is_ok(), "{:?}", exp.err());
        }
    }
}

#[test]
fn cyclic_table_is_reported() {
    let table = m4::parse_macro_file(
        "define(`a', `b($1)')\ndefine(`b', `a($1)')\n",
        Path::new("te_macros"),
        MacroTable::new(),
    )
    .unwrap();
    let err = m4::expand(table.get("a").unwrap(), &[id("x")], &table).unwrap_err();
    assert!(matches!(err, MacroError::Cycle { .. }), "{err:?}");
}

fn random_policy_fixture(r: &mut StdRng) -> Fixture {
    let types = ["a", "b", "c", "d"];
    let mut body = String::from("attribute g;\ntype a, g;\ntype b, g;\ntype c;\ntype d;\n");
    for _ in 0..r.gen_range(1..40) {
        let n = r.gen_range(1..4);
        let mut perms: Vec<&str> = ["read", "write", "open", "getattr"]
            .choose_multiple(r, n)
            .copied()
            .collect();
        perms.shuffle(r);
        let s = if r.gen_bool(0.2) { "g" } else { types.choose(r).unwrap() };
        let t = if r.gen_bool(0.2) { "g" } else { types.choose(r).unwrap() };
        body.push_str(&format!(
            "allow {s} {t}:{} {{ {} }};\n",
            ["file", "dir"].choose(r).unwrap(),
            perms.join(" ")
        ));
    }
    Fixture::new().file("policy.te", body)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permission_order_does_not_change_keys_or_merge(seed in any::<u64>()) {
        let mut r = rng(seed);
        let fx = random_policy_fixture(&mut r);
        let text = fx.contents("policy.te").unwrap().to_string();
        // reverse every permission list
        let reversed: String = text
            .lines()
            .map(|l| match (l.find('{'), l.find('}')) {
                (Some(a), Some(b)) => {
                    let mut items: Vec<&str> = l[a + 1..b].split_whitespace().collect();
                    items.reverse();
                    format!("{}{{ {} }}{}\n", &l[..a], items.join(" "), &l[b + 1..])
                }
                _ => format!("{l}\n"),
            })
            .collect();
        let p1 = fx.parse().unwrap();
        let p2 = Fixture::new().file("policy.te", reversed).parse().unwrap();
        let rules = |p: &selint_core::model::Policy| -> Vec<(String, String)> {
            p.rules().iter().map(|m| (m.rule.key().to_string(), m.rule.to_string())).collect()
        };
        prop_assert_eq!(rules(&p1), rules(&p2));
    }

    #[test]
    fn merge_is_idempotent(seed in any::<u64>()) {
        let mut r = rng(seed);
        let policy = random_policy_fixture(&mut r).parse().unwrap();
        let once = policy.rules().to_vec();
        let twice = merge_rules(once.clone()).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn parsing_is_deterministic_and_located(seed in any::<u64>()) {
        let mut r = rng(seed);
        let fx = random_policy_fixture(&mut r);
        let p1 = fx.parse().unwrap();
        let p2 = fx.parse().unwrap();
        prop_assert_eq!(format!("{p1:?}"), format!("{p2:?}"));
        for m in p1.rules().iter().chain(p1.expanded_rules()) {
            for loc in m.locations() {
                prop_assert!(p1.contains_location(loc), "{loc}");
            }
        }
    }

    #[test]
    fn expansion_never_shrinks(seed in any::<u64>()) {
        let mut r = rng(seed);
        let policy = random_policy_fixture(&mut r).parse().unwrap();
        prop_assert!(policy.expanded_rules().len() >= policy.rules().len());
        let mentions = policy
            .rules()
            .iter()
            .any(|m| m.rule.source().as_str() == "g" || m.rule.target().as_str() == "g");
        prop_assert_eq!(policy.expanded_rules().len() == policy.rules().len(), !mentions);
    }
}

fn perm_macros() -> Vec<(Identifier, BTreeSet<Identifier>)> {
    let set = |items: &[&str]| items.iter().map(|s| id(s)).collect::<BTreeSet<_>>();
    vec![
        (id("r_perms"), set(&["read", "open", "getattr"])),
        (id("w_perms"), set(&["write", "open", "append"])),
        (id("x_perms"), set(&["execute", "getattr", "map"])),
        (id("big_perms"), set(&["read", "write", "open", "getattr", "append", "lock"])),
    ]
}

const ALL_PERMS: [&str; 8] = ["read", "write", "open", "getattr", "append", "execute", "map", "lock"];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn cover_expands_to_superset_and_lists_additions(
        perms in proptest::sample::subsequence(ALL_PERMS.to_vec(), 1..=8),
        threshold in 0.3f64..=1.0,
    ) {
        let macros = perm_macros().into_iter().collect();
        let p: BTreeSet<Identifier> = perms.iter().map(|s| id(s)).collect();
        let cover = greedy_cover(&p, &macros, threshold);
        let mut expanded: BTreeSet<Identifier> = cover.residual.clone();
        for pick in &cover.picks {
            expanded.extend(macros[&pick.name].iter().cloned());
            prop_assert!(pick.score >= threshold - 1e-9 && pick.score <= 1.0);
        }
        prop_assert!(expanded.is_superset(&p));
        let added: BTreeSet<Identifier> = expanded.difference(&p).cloned().collect();
        prop_assert_eq!(&added, &cover.added);
        if cover.picks.iter().all(|k| k.score == 1.0) {
            prop_assert_eq!(expanded, p);
        }
    }
}

fn simple_findings(fx: &Fixture, threshold: f64) -> Vec<Finding> {
    let cfg = builtin_config(simple_macros::NAME).unwrap().overlay(
        PluginConfig::parse(simple_macros::NAME, &format!("[simple_macros]\nthreshold = {threshold}\n"), "t").unwrap(),
    );
    let policy = fx.parse().unwrap();
    simple_macros::SimpleMacros::build(&cfg).unwrap().run(&policy).unwrap().findings
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn raising_the_threshold_adds_no_findings(seed in any::<u64>(), t in 0.5f64..0.9) {
        let mut r = rng(seed);
        let mut macros = String::new();
        for (name, perms) in perm_macros() {
            let items: Vec<&str> = perms.iter().map(|p| p.as_str()).collect();
            macros.push_str(&format!("define(`{name}', `{{ {} }}')\n", items.join(" ")));
        }
        let mut rules = String::from("type a;\ntype b;\n");
        for i in 0..20 {
            let perms: Vec<&str> = { let n = r.gen_range(1..7); ALL_PERMS.choose_multiple(&mut r, n) }.copied().collect();
            rules.push_str(&format!("allow a b:c{i} {{ {} }};\n", perms.join(" ")));
        }
        let fx = Fixture::new().file("global_macros", macros).file("a.te", rules);
        let low: BTreeSet<String> = simple_findings(&fx, t).into_iter().map(|f| f.rule_text).collect();
        let high: BTreeSet<String> = simple_findings(&fx, t + 0.1).into_iter().map(|f| f.rule_text).collect();
        prop_assert!(high.is_subset(&low));
    }
}

fn param_plugin_bindings(policy: &selint_core::model::Policy, name: &str, threshold: f64) -> Vec<(Vec<String>, usize, usize)> {
    let combined = parametrized_macros::combined_rules(policy);
    let index = RuleIndex::new(combined.iter());
    let def = policy.macros().get(name).unwrap();
    let templates = template::macro_templates(def, policy.macros()).unwrap();
    let universe = template::argument_universe(policy);
    let result = parametrized_macros::search_bindings(&templates, def.arity, &index, &universe, threshold, u64::MAX);
    assert!(!result.truncated);
    result
        .bindings
        .into_iter()
        .map(|b| (b.args.iter().map(|a| a.to_string()).collect(), b.found.len(), b.total))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn parametrized_search_matches_brute_force(seed in any::<u64>()) {
        let mut r = rng(seed);
        let pf = gen::random_param_fixture(&mut r, 120);
        let policy = pf.fixture.parse().unwrap();
        for name in &pf.macros {
            let def = policy.macros().get(name).unwrap();
            let ours = param_plugin_bindings(&policy, name, pf.threshold);
            let brute: Vec<(Vec<String>, usize, usize)> = oracle::brute_force_bindings(&policy, def, pf.threshold)
                .into_iter()
                .map(|b| (b.args.iter().map(|a| a.to_string()).collect(), b.found, b.total))
                .collect();
            prop_assert_eq!(ours, brute);
        }
    }

    #[test]
    fn parametrized_findings_respect_bounds_and_usages(seed in any::<u64>()) {
        let mut r = rng(seed);
        let pf = gen::random_param_fixture(&mut r, 80);
        let mut fx = pf.fixture.clone();
        let policy = fx.parse().unwrap();
        let plugin = ParametrizedMacros::new(ParamConfig { threshold: pf.threshold, ..ParamConfig::default() });
        let findings = plugin.run(&policy).unwrap().findings;
        for f in &findings {
            let s = f.score.unwrap();
            prop_assert!(s >= pf.threshold - 1e-9 && s <= 1.0);
        }
        // writing a suggested usage into the policy suppresses it
        if let Some(usage) = findings.iter().filter_map(|f| f.suggestion.clone()).next() {
            fx.append("rules.te", &format!("{usage}\n"));
            // missing rules may name types the fixture never declares
            let lenient = ParseOptions { undeclared: UndeclaredPolicy::Warn, ..ParseOptions::default() };
            let policy = parse_policy_with(&fx.sources(), &lenient).unwrap();
            let again = plugin.run(&policy).unwrap().findings;
            prop_assert!(!again.iter().any(|f| f.suggestion.as_deref() == Some(usage.as_str())));
        }
    }
}

fn risk_config(criterion: Criterion) -> RiskConfig {
    let mut c = RiskConfig::from_config(&builtin_config(risky_rules::NAME).unwrap()).unwrap();
    c.criterion = criterion;
    c
}

fn binned_config(d: f64, t: f64, criterion: Criterion) -> RiskConfig {
    let text = format!(
        "[risky_rules]\ncriterion = {}\n[risky_rules.bin.dom]\nrisk = {d}\ntrust = {d}\nmembers = [dom]\n[risky_rules.bin.typ]\nrisk = {t}\ntrust = {t}\nmembers = [typ]\n",
        criterion.as_str()
    );
    let over = PluginConfig::parse(risky_rules::NAME, &text, "t").unwrap();
    RiskConfig::from_config(&builtin_config(risky_rules::NAME).unwrap().overlay(over)).unwrap()
}

fn allow(s: &str, t: &str, c: &str, perms: &[&str]) -> Rule {
    Rule::Av(AvRule::new(
        selint_core::model::AvKind::Allow,
        id(s),
        id(t),
        id(c),
        perms.iter().map(|p| id(p)).collect(),
    )
    .unwrap())
}

#[test]
fn risk_range_over_all_partial_scores() {
    let attrs = Default::default();
    let rules = [
        allow("dom", "typ", "file", &["search"]),
        allow("dom", "typ", "file", &["read", "getattr"]),
        allow("dom", "typ", "file", &["write"]),
        allow("dom", "typ", "file", &["made_up"]),
        allow("dom", "self", "capability", &["sys_admin"]),
    ];
    for d in 0..=30 {
        for t in 0..=30 {
            for criterion in Criterion::ALL {
                let cfg = binned_config(d as f64, t as f64, criterion);
                for rule in &rules {
                    let s = score_rule(&cfg, rule, &attrs).score;
                    assert!((0.0..=1.0).contains(&s), "{criterion} {d} {t} {rule}: {s}");
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn trust_scores_are_complementary(d in 0u32..=30, t in 0u32..=30) {
        let attrs = Default::default();
        let rule = allow("dom", "typ", "file", &["read"]);
        let score = |c| score_rule(&binned_config(d as f64, t as f64, c), &rule, &attrs).score;
        prop_assert!((score(Criterion::TrustHh) + score(Criterion::TrustLl) - 1.0).abs() < 1e-12);
        prop_assert!((score(Criterion::TrustHl) + score(Criterion::TrustLh) - 1.0).abs() < 1e-12);
        for (c, k) in [(Criterion::TrustHh, "hh"), (Criterion::TrustHl, "hl"), (Criterion::TrustLh, "lh"), (Criterion::TrustLl, "ll")] {
            prop_assert!((score(c) - oracle::trust(k, d as f64, t as f64, 30.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn adding_a_permission_never_lowers_risk(
        perms in proptest::sample::subsequence(vec!["read", "write", "search", "getattr", "use", "ioctl", "bogus"], 1..=6),
        extra in proptest::sample::select(vec!["read", "write", "search", "getattr", "use", "ioctl", "bogus"]),
    ) {
        let cfg = risk_config(Criterion::Risk);
        let attrs = Default::default();
        let base = allow("untrusted_app", "system_file", "file", &perms);
        let mut more = perms.clone();
        more.push(extra);
        let bigger = allow("untrusted_app", "system_file", "file", &more);
        prop_assert!(score_rule(&cfg, &bigger, &attrs).score >= score_rule(&cfg, &base, &attrs).score);
        let scored = score_rule(&cfg, &base, &attrs);
        let d = cfg.partial_score(&id("untrusted_app"), None, Dimension::Risk).unwrap_or(0.0);
        let t = cfg.partial_score(&id("system_file"), None, Dimension::Risk).unwrap_or(0.0);
        let expect = oracle::risk(d, t, scored.coefficient, cfg.max_partial_score);
        prop_assert!((scored.score - expect).abs() < 1e-12);
    }
}

fn unnecessary(policy: &selint_core::model::Policy) -> Vec<Finding> {
    unnecessary_rules::UnnecessaryRules::build(&builtin_config(unnecessary_rules::NAME).unwrap())
        .unwrap()
        .run(policy)
        .unwrap()
        .findings
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_statements_give_the_same_findings(seed in any::<u64>()) {
        let mut r = rng(seed);
        let decl = "type a;\ntype b;\ntype c;\n";
        let mut whole = String::from(decl);
        let mut split = String::from(decl);
        let types = ["a", "b", "c"];
        for _ in 0..r.gen_range(1..8) {
            let (s, t) = (types.choose(&mut r).unwrap(), types.choose(&mut r).unwrap());
            let class = ["file", "dir", "fd"].choose(&mut r).unwrap();
            let n = r.gen_range(1..5);
            let perms: Vec<&str> = ["read", "write", "open", "use", "search", "create"]
                .choose_multiple(&mut r, n)
                .copied()
                .collect();
            whole.push_str(&format!("allow {s} {t}:{class} {{ {} }};\n", perms.join(" ")));
            split.push_str(&format!("allow {s} {t}:{class} {};\n", perms[0]));
            for p in &perms[1..] {
                split.push_str(&format!("allow {s} {t}:{class} {p};\n"));
            }
            if r.gen_bool(0.3) {
                let line = format!("type_transition {s} {t}:file c;\n");
                whole.push_str(&line);
                split.push_str(&line);
            }
        }
        let fa = unnecessary(&Fixture::new().file("x.te", whole).parse().unwrap());
        let fb = unnecessary(&Fixture::new().file("x.te", split).parse().unwrap());
        // line numbers differ between the two layouts
        let key = |f: &Finding| (f.rule_text.clone(), f.message.clone());
        prop_assert_eq!(fa.iter().map(key).collect::<Vec<_>>(), fb.iter().map(key).collect::<Vec<_>>());
    }

    #[test]
    fn adding_a_missing_tuple_rule_removes_it(seed in any::<u64>()) {
        let mut r = rng(seed);
        let types = ["a", "b", "c", "d"];
        let mut text = String::from("type a;\ntype b;\ntype c;\ntype d;\n");
        for _ in 0..r.gen_range(1..4) {
            let pick = |r: &mut StdRng| *types.choose(r).unwrap();
            let (s, t) = (pick(&mut r), pick(&mut r));
            // one default per (source, target) keeps transitions consistent
            let n = types[(s.as_bytes()[0] + t.as_bytes()[0]) as usize % types.len()];
            text.push_str(&format!("type_transition {s} {t}:file {n};\n"));
            if r.gen_bool(0.5) {
                text.push_str(&format!("allow {s} {t}:dir {{ search write }};\n"));
            }
        }
        let fx = Fixture::new().file("x.te", text.clone());
        let tuple_findings = |fx: &Fixture| -> Vec<Finding> {
            unnecessary(&fx.parse().unwrap())
                .into_iter()
                .filter(|f| f.message.contains("rule tuple"))
                .collect()
        };
        let before = tuple_findings(&fx);
        if let Some(f) = before.first() {
            let missing = f.message.lines().nth(1).unwrap().trim().to_string();
            let fixed = Fixture::new().file("x.te", format!("{text}{missing}\n"));
            let after = tuple_findings(&fixed);
            let target = before.iter().find(|g| g.message == f.message).unwrap();
            let still: Vec<&Finding> = after.iter().filter(|g| g.location == target.location).collect();
            for g in still {
                prop_assert!(!g.message.contains(&missing));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn neverallows_match_the_cross_product(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (fx, specs) = gen::random_neverallow_fixture(&mut r, 3);
        let policy = fx.parse().unwrap();
        for text in &specs {
            let spec = NeverallowSpec::parse_all(text).unwrap().remove(0);
            let resolved = ResolvedSpec::resolve(&spec, &policy);
            let ours: BTreeSet<(usize, Identifier)> = find_violations(&policy, &[resolved])
                .into_iter()
                .flat_map(|v| {
                    let rule = v.rule;
                    v.specs.into_iter().flat_map(move |(_, perms)| perms.into_iter().map(move |p| (rule, p)))
                })
                .collect();
            let o = OracleSpec {
                source: spec.source.clone(),
                target: spec.target.clone(),
                classes: spec.classes.clone(),
                permissions: spec.permissions.clone(),
            };
            prop_assert_eq!(ours, oracle::neverallow_hits(&policy, &o), "{}", text);
        }
    }

    #[test]
    fn removing_a_rule_adds_no_violation(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (fx, specs) = gen::random_neverallow_fixture(&mut r, 2);
        let rules = fx.contents("rules.te").unwrap().to_string();
        let lines: Vec<&str> = rules.lines().collect();
        let drop = r.gen_range(0..lines.len());
        let fewer: String = lines.iter().enumerate().filter(|(i, _)| *i != drop).map(|(_, l)| format!("{l}\n")).collect();
        let resolved = |policy: &selint_core::model::Policy| -> BTreeSet<(String, String, Identifier)> {
            let specs: Vec<ResolvedSpec> = specs
                .iter()
                .flat_map(|s| NeverallowSpec::parse_all(s).unwrap())
                .map(|s| ResolvedSpec::resolve(&s, policy))
                .collect();
            find_violations(policy, &specs)
                .into_iter()
                .flat_map(|v| {
                    let key = policy.expanded_rules()[v.rule].rule.key().to_string();
                    v.specs
                        .into_iter()
                        .flat_map(move |(text, perms)| {
                            let key = key.clone();
                            perms.into_iter().map(move |p| (key.clone(), text.clone(), p))
                        })
                })
                .collect()
        };
        let full = fx.parse().unwrap();
        let reduced = fx.clone().without("rules.te").file("rules.te", fewer).parse().unwrap();
        prop_assert!(resolved(&reduced).is_subset(&resolved(&full)));
    }
}
