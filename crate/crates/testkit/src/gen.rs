//! Random and synthetic policy generators.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::fixtures::Fixture;

fn pick<'a, R: Rng>(rng: &mut R, items: &[&'a str]) -> &'a str {
    items.choose(rng).copied().expect("non-empty choice")
}

fn perm_list<R: Rng>(rng: &mut R, vocab: &[&str], max: usize) -> Vec<String> {
    let n = rng.gen_range(1..=max.min(vocab.len()));
    let mut perms: Vec<String> = vocab.choose_multiple(rng, n).map(|s| s.to_string()).collect();
    perms.sort();
    perms
}

fn braced(items: &[String]) -> String {
    if items.len() == 1 {
        items[0].clone()
    } else {
        format!("{{ {} }}", items.join(" "))
    }
}

/// A macro body of policy rules written with `$n` arguments, and its
/// arity. Tokens mix bare arguments, arguments with literal prefixes or
/// suffixes, and literal names.
pub fn random_rule_block<R: Rng>(rng: &mut R) -> (String, usize) {
    let arity = rng.gen_range(1..=4);
    let token = |rng: &mut R| -> String {
        let k = rng.gen_range(1..=arity);
        match rng.gen_range(0..5) {
            0 => format!("${k}_exec"),
            1 => format!("dev_${k}"),
            2 => pick(rng, &["system_file", "rootfs", "init"]).to_string(),
            _ => format!("${k}"),
        }
    };
    let lines = rng.gen_range(1..=4);
    let mut body = String::from("\n");
    for _ in 0..lines {
        let class = pick(rng, &["file", "dir", "process", "sock_file"]);
        if rng.gen_bool(0.2) {
            let _ = writeln!(body, "type_transition {} {}:{class} {};", token(rng), token(rng), token(rng));
        } else {
            let perms = perm_list(rng, &["read", "write", "open", "getattr", "search", "execute"], 3);
            let kind = if rng.gen_bool(0.9) { "allow" } else { "neverallow" };
            let _ = writeln!(body, "{kind} {} {}:{class} {};", token(rng), token(rng), braced(&perms));
        }
    }
    // make sure every argument up to `arity` appears
    let _ = writeln!(body, "allow ${arity} self:process fork;");
    (body, arity)
}

/// Parameters of a random parametrized-macro fixture.
#[derive(Debug, Clone)]
pub struct ParamFixture {
    pub fixture: Fixture,
    pub macros: Vec<String>,
    pub threshold: f64,
}

/// Source, target, class and permissions of one macro body line.
type TemplateLine = (String, String, String, Vec<String>);

const BASES: [&str; 4] = ["a", "b", "c", "d"];
const SUFFIXES: [&str; 2] = ["exec", "tmp"];
const CLASSES: [&str; 3] = ["file", "dir", "process"];
const PERMS: [&str; 5] = ["read", "write", "open", "transition", "search"];

fn small_types() -> Vec<String> {
    let mut out: Vec<String> = BASES.iter().map(|b| b.to_string()).collect();
    for b in BASES {
        for s in SUFFIXES {
            out.push(format!("{b}_{s}"));
        }
    }
    out
}

/// A policy of at most `max_rules` rules over a small vocabulary, two
/// random rule-block macros, and some partial written-out usages of them.
pub fn random_param_fixture<R: Rng>(rng: &mut R, max_rules: usize) -> ParamFixture {
    let types = small_types();
    let type_refs: Vec<&str> = types.iter().map(String::as_str).collect();
    let mut te_macros = String::new();
    let mut macro_templates: Vec<(String, usize, Vec<TemplateLine>)> = Vec::new();
    for m in 0..2 {
        let name = format!("mac{m}");
        let arity = rng.gen_range(1..=3);
        let count = rng.gen_range(1..=4);
        let mut rules = Vec::new();
        let _ = writeln!(te_macros, "define(`{name}', `");
        for _ in 0..count {
            let tok = |rng: &mut R| -> String {
                let k = rng.gen_range(1..=arity);
                match rng.gen_range(0..6) {
                    0 => format!("${k}_{}", pick(rng, &SUFFIXES)),
                    1 => pick(rng, &BASES).to_string(),
                    _ => format!("${k}"),
                }
            };
            let (s, t) = (tok(rng), tok(rng));
            let class = pick(rng, &CLASSES).to_string();
            let perms = perm_list(rng, &PERMS, 2);
            let _ = writeln!(te_macros, "allow {s} {t}:{class} {};", braced(&perms));
            rules.push((s, t, class, perms));
        }
        let _ = writeln!(te_macros, "')");
        macro_templates.push((name, arity, rules));
    }

    let mut decls = String::new();
    for t in &types {
        let _ = writeln!(decls, "type {t};");
    }
    let mut body = String::new();
    let mut written = 0;
    let budget = rng.gen_range(5..=max_rules.max(5));
    // written-out usages, some rules dropped
    for (_, arity, rules) in &macro_templates {
        for _ in 0..rng.gen_range(1..=3) {
            let args: Vec<&str> = (0..*arity).map(|_| pick(rng, &BASES)).collect();
            for (s, t, class, perms) in rules {
                if rng.gen_bool(0.2) || written >= budget {
                    continue;
                }
                let subst = |tok: &str| {
                    let mut out = tok.to_string();
                    for (i, a) in args.iter().enumerate().rev() {
                        out = out.replace(&format!("${}", i + 1), a);
                    }
                    out
                };
                let mut perms = perms.clone();
                if rng.gen_bool(0.3) {
                    perms.push(pick(rng, &PERMS).to_string());
                    perms.sort();
                    perms.dedup();
                }
                let _ = writeln!(body, "allow {} {}:{class} {};", subst(s), subst(t), braced(&perms));
                written += 1;
            }
        }
    }
    while written < budget {
        let perms = perm_list(rng, &PERMS, 3);
        let _ = writeln!(
            body,
            "allow {} {}:{} {};",
            pick(rng, &type_refs),
            pick(rng, &type_refs),
            pick(rng, &CLASSES),
            braced(&perms)
        );
        written += 1;
    }
    let threshold = *[0.5, 0.8, 1.0].choose(rng).expect("non-empty");
    ParamFixture {
        fixture: Fixture::new()
            .file("te_macros", te_macros)
            .file("types.te", decls)
            .file("rules.te", body),
        macros: macro_templates.into_iter().map(|(n, _, _)| n).collect(),
        threshold,
    }
}

/// A policy over at most 10 types with two attributes, rules to self and
/// attribute rules, and `spec_count` random neverallow statements.
pub fn random_neverallow_fixture<R: Rng>(rng: &mut R, spec_count: usize) -> (Fixture, Vec<String>) {
    let n_types = rng.gen_range(2..=8);
    let types: Vec<String> = (0..n_types).map(|i| format!("t{i}")).collect();
    let attrs = ["g0", "g1"];
    let mut decls = String::from("attribute g0;\nattribute g1;\n");
    for t in &types {
        let mut line = format!("type {t}");
        for a in attrs {
            if rng.gen_bool(0.4) {
                line.push_str(&format!(", {a}"));
            }
        }
        let _ = writeln!(decls, "{line};");
    }
    let names: Vec<&str> = types.iter().map(String::as_str).chain(attrs).collect();
    let classes = ["file", "dir"];
    let perms = ["read", "write", "open"];
    let mut body = String::new();
    for _ in 0..rng.gen_range(1..=30) {
        let s = pick(rng, &names);
        let t = if rng.gen_bool(0.15) { "self" } else { pick(rng, &names) };
        let _ = writeln!(
            body,
            "allow {s} {t}:{} {};",
            pick(rng, &classes),
            braced(&perm_list(rng, &perms, 3))
        );
    }
    let set = |rng: &mut R, allow_self: bool, pool: &[&str]| -> String {
        match rng.gen_range(0..6) {
            0 => "*".to_string(),
            1 => format!("~{}", pick(rng, pool)),
            2 => {
                let a = pick(rng, pool);
                let b = pick(rng, pool);
                if a == b {
                    a.to_string()
                } else {
                    format!("{{ {a} -{b} }}")
                }
            }
            3 if allow_self => format!("{{ self {} }}", pick(rng, pool)),
            _ => {
                let n = rng.gen_range(1..=2);
                let items: Vec<String> = pool.choose_multiple(rng, n).map(|s| s.to_string()).collect();
                braced(&items)
            }
        }
    };
    let specs = (0..spec_count)
        .map(|_| {
            format!(
                "neverallow {} {}:{} {};",
                set(rng, false, &names),
                set(rng, true, &names),
                set(rng, false, &classes),
                set(rng, false, &perms)
            )
        })
        .collect();
    (
        Fixture::new().file("types.te", decls).file("rules.te", body),
        specs,
    )
}

const LARGE_CLASSES: [&str; 4] = ["file", "dir", "sock_file", "chr_file"];
const LARGE_PERMS: [&str; 12] = [
    "read", "write", "open", "getattr", "ioctl", "lock", "search", "execute", "create", "unlink",
    "append", "map",
];

/// A policy of exactly `expanded` expanded rules: direct rules spread
/// over many files plus attribute rules replicated over 50 app domains.
pub fn synthetic_policy<R: Rng>(rng: &mut R, expanded: usize) -> Fixture {
    const DOMAINS: usize = 250;
    const TYPES: usize = 400;
    const APPS: usize = 50;
    let attribute_rules = (expanded / 10 / APPS).min(TYPES);
    let direct = expanded - attribute_rules * APPS;

    let mut fixture = Fixture::new()
        .file(
            "attributes",
            "attribute domain;\nattribute appdomain;\nattribute file_type;\n",
        )
        .file(
            "global_macros",
            "\
define(`r_file_perms', `{ getattr open read ioctl lock map }')
define(`w_file_perms', `{ open append write lock map }')
define(`r_dir_perms', `{ open getattr read search ioctl lock }')
",
        );
    let mut types = String::new();
    for t in 0..TYPES {
        let _ = writeln!(types, "type t{t}, file_type;");
    }
    for a in 0..APPS {
        let _ = writeln!(types, "type app{a}, domain, appdomain;");
    }
    fixture.append("file.te", &types);

    let mut per_domain = vec![String::new(); DOMAINS];
    for (d, text) in per_domain.iter_mut().enumerate() {
        let _ = writeln!(text, "type d{d}, domain;");
    }
    for i in 0..direct {
        let d = i % DOMAINS;
        let t = (i / DOMAINS) % TYPES;
        let class = LARGE_CLASSES[(i / (DOMAINS * TYPES)) % LARGE_CLASSES.len()];
        let perms = if rng.gen_bool(0.1) {
            vec![pick(rng, &["r_file_perms", "w_file_perms", "r_dir_perms"]).to_string()]
        } else {
            perm_list(rng, &LARGE_PERMS, 5)
        };
        let _ = writeln!(per_domain[d], "allow d{d} t{t}:{class} {};", braced(&perms));
    }
    for (d, text) in per_domain.into_iter().enumerate() {
        fixture.append(&format!("d{d}.te"), &text);
    }
    let mut apps = String::new();
    for t in 0..attribute_rules {
        let _ = writeln!(apps, "allow appdomain t{t}:file {{ read open getattr }};");
    }
    fixture.append("app.te", &apps);
    fixture
}

const PARAM_SUFFIXES: [&str; 10] = [
    "exec", "data", "socket", "tmp", "dev", "prop", "log", "cache", "conf", "run",
];
const PARAM_CLASSES: [&str; 6] = ["file", "dir", "sock_file", "process", "unix_stream_socket", "fd"];

/// `rules` rules over 200 domains and 1,100 types, with ten
/// three-argument macros of which `planted` usages are written out.
pub fn synthetic_param_policy<R: Rng>(rng: &mut R, rules: usize, planted: usize) -> Fixture {
    let mut te_macros = String::new();
    let mut shapes = Vec::new();
    for (k, sfx) in PARAM_SUFFIXES.iter().enumerate() {
        let c1 = PARAM_CLASSES[k % PARAM_CLASSES.len()];
        let c2 = PARAM_CLASSES[(k + 2) % PARAM_CLASSES.len()];
        let c3 = PARAM_CLASSES[(k + 4) % PARAM_CLASSES.len()];
        let p1 = perm_list(rng, &LARGE_PERMS, 3);
        let p2 = perm_list(rng, &LARGE_PERMS, 2);
        let p3 = perm_list(rng, &LARGE_PERMS, 2);
        let _ = writeln!(
            te_macros,
            "define(`macro_{sfx}', `\nallow $1 $2_{sfx}:{c1} {};\nallow $1 $3:{c2} {};\nallow $3 $2_{sfx}:{c3} {};\n')",
            braced(&p1),
            braced(&p2),
            braced(&p3)
        );
        shapes.push((*sfx, [(c1, p1), (c2, p2), (c3, p3)]));
    }
    let mut decls = String::from("attribute domain;\nattribute file_type;\n");
    for d in 0..200 {
        let _ = writeln!(decls, "type dom{d}, domain;");
    }
    for n in 0..100 {
        let _ = writeln!(decls, "type nm{n}, file_type;");
        for sfx in PARAM_SUFFIXES {
            let _ = writeln!(decls, "type nm{n}_{sfx}, file_type;");
        }
    }
    let mut body = String::new();
    let mut written = 0;
    for _ in 0..planted {
        let (sfx, rs) = shapes.choose(rng).expect("ten shapes");
        let a1 = format!("dom{}", rng.gen_range(0..200));
        let a2 = format!("nm{}", rng.gen_range(0..100));
        let a3 = format!("dom{}", rng.gen_range(0..200));
        let _ = writeln!(body, "allow {a1} {a2}_{sfx}:{} {};", rs[0].0, braced(&rs[0].1));
        let _ = writeln!(body, "allow {a1} {a3}:{} {};", rs[1].0, braced(&rs[1].1));
        let _ = writeln!(body, "allow {a3} {a2}_{sfx}:{} {};", rs[2].0, braced(&rs[2].1));
        written += 3;
    }
    while written < rules {
        let d = rng.gen_range(0..200);
        let target = if rng.gen_bool(0.5) {
            format!("nm{}_{}", rng.gen_range(0..100), pick(rng, &PARAM_SUFFIXES))
        } else {
            format!("dom{}", rng.gen_range(0..200))
        };
        let _ = writeln!(
            body,
            "allow dom{d} {target}:{} {};",
            pick(rng, &PARAM_CLASSES),
            braced(&perm_list(rng, &LARGE_PERMS, 4))
        );
        written += 1;
    }
    Fixture::new()
        .file("te_macros", te_macros)
        .file("types.te", decls)
        .file("rules.te", body)
}
