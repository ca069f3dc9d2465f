//! Checks shared by the property tests and the acceptance run.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

use shrimp::coverage::{canonical_bundle, sectionize};
use shrimp::repair::{adapt, co_subst, MessageSubstitution};
use shrimp::strand::{candidate_origins, origins, Bundle, Node, NodeId, Sign, StrandKind};
use shrimp::term::{equiv, Atom, Term};
use shrimp::theory::{accepts, Judgment};
use shrimp::verifier::verify;

fn atom(s: &str) -> Term {
    super::t(s)
}

fn key(s: &str) -> Atom {
    super::t(s).as_atom().unwrap().clone()
}

/// Top-level components, written out here rather than borrowed from the
/// library so the oracles stay independent.
fn components(t: &Term) -> Vec<Term> {
    match t {
        Term::Concat(l, r) => {
            let mut out = components(l);
            out.extend(components(r));
            out
        }
        _ => vec![t.clone()],
    }
}

fn subterms(t: &Term, out: &mut BTreeSet<Term>) {
    out.insert(t.clone());
    match t {
        Term::Atom(_) => {}
        Term::Concat(l, r) => {
            subterms(l, out);
            subterms(r, out);
        }
        Term::Encrypt(b, _) => subterms(b, out),
    }
}

fn ciphers_of(t: &Term) -> Vec<Term> {
    let mut all = BTreeSet::new();
    subterms(t, &mut all);
    all.into_iter().filter(Term::is_cipher).collect()
}

fn permutations(items: &[Term]) -> Vec<Vec<Term>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head.clone());
            out.push(p);
        }
    }
    out
}

/// Every way of bracketing `items` into a concatenation tree.
fn bracketings(items: &[Term]) -> Vec<Term> {
    if items.len() == 1 {
        return vec![items[0].clone()];
    }
    let mut out = Vec::new();
    for split in 1..items.len() {
        for l in bracketings(&items[..split]) {
            for r in bracketings(&items[split..]) {
                out.push(Term::pair(l.clone(), r));
            }
        }
    }
    out
}

/// The four-case application of a cipher map, again written out by hand.
fn apply(map: &BTreeMap<Term, Term>, t: &Term) -> Term {
    match t {
        Term::Atom(_) => t.clone(),
        Term::Concat(l, r) => Term::pair(apply(map, l), apply(map, r)),
        Term::Encrypt(b, k) => match map.get(t) {
            Some(Term::Encrypt(b2, k2)) => Term::cipher(apply(map, b2), k2.clone()),
            _ => Term::cipher(apply(map, b), k.clone()),
        },
    }
}

/// All `σ(m)` for `σ` information enhancing wrt. the empty set: each
/// cipher of `m` is either left alone or mapped to a rearrangement of its
/// own components under the same key.
fn enhancing_images(m: &Term) -> BTreeSet<Term> {
    let cs = ciphers_of(m);
    let options: Vec<Vec<Term>> = cs
        .iter()
        .map(|c| {
            let Term::Encrypt(b, k) = c else { unreachable!() };
            let mut opts = BTreeSet::new();
            for p in permutations(&components(b)) {
                for body in bracketings(&p) {
                    opts.insert(Term::cipher(body, k.clone()));
                }
            }
            opts.into_iter().collect()
        })
        .collect();
    let mut out = BTreeSet::new();
    let mut idx = vec![0usize; cs.len()];
    loop {
        let map: BTreeMap<Term, Term> = cs.iter().cloned().zip(idx.iter().zip(&options).map(|(i, o)| o[*i].clone())).collect();
        out.insert(apply(&map, m));
        let mut i = 0;
        loop {
            if i == idx.len() {
                return out;
            }
            idx[i] += 1;
            if idx[i] < options[i].len() {
                break;
            }
            idx[i] = 0;
            i += 1;
        }
    }
}

fn terms_up_to_depth(atoms: &[Term], keys: &[Atom], depth: usize) -> Vec<Term> {
    let mut level: Vec<Term> = atoms.to_vec();
    for _ in 1..depth {
        let mut next = atoms.to_vec();
        for l in &level {
            for r in &level {
                next.push(Term::pair(l.clone(), r.clone()));
            }
            for k in keys {
                next.push(Term::cipher(l.clone(), k.clone()));
            }
        }
        level = next;
    }
    level
}

pub fn equiv_oracle() -> String {
    let atoms = [atom("a:a"), atom("n:n"), atom("k:k"), atom("k:j")];
    let keys = [key("k:k"), key("k:j")];
    let all = terms_up_to_depth(&atoms, &keys, 3);
    assert!(all.iter().all(|t| t.depth() <= 3));
    assert_eq!(all.len(), 844);
    let mut agree = 0usize;
    let mut related = 0usize;
    for m2 in &all {
        let images = enhancing_images(m2);
        for m in &all {
            let oracle = images.contains(m);
            assert_eq!(equiv(m, m2), oracle, "equiv({m}, {m2})");
            agree += 1;
            related += oracle as usize;
        }
    }
    assert_eq!(agree, 844 * 844);
    assert!(related > 844, "only the diagonal is related");
    format!("{agree} pairs, {related} related")
}

const ATOMS: [&str; 5] = ["a:a", "a:b", "n:x", "k:k", "k:j"];

fn arb_term() -> impl Strategy<Value = Term> {
    let leaf = prop::sample::select(&ATOMS[..]).prop_map(atom);
    leaf.prop_recursive(2, 16, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(l, r)| Term::pair(l, r)),
            (inner, prop::sample::select(&["k:k", "k:j"][..])).prop_map(|(b, k)| Term::cipher(b, key(k))),
        ]
    })
}

/// An enhancing image of `c` picked by `choice`: a permutation of its
/// components, possibly with one atom appended.
fn image(c: &Term, choice: u32) -> Term {
    let Term::Encrypt(b, k) = c else { unreachable!() };
    let perms = permutations(&components(b));
    let mut comps = perms[choice as usize % perms.len()].clone();
    let extra = [None, Some("a:a"), Some("n:x"), Some("g:tag")][(choice as usize / 7) % 4];
    if let Some(e) = extra {
        comps.push(atom(e));
    }
    Term::cipher(Term::seq(comps), k.clone())
}

/// Splits the ciphers of `t` into two disjoint domains driven by `picks`.
fn split_domains(t: &Term, picks: &[u32]) -> (MessageSubstitution, MessageSubstitution) {
    let mut d1 = Vec::new();
    let mut d2 = Vec::new();
    for (c, p) in ciphers_of(t).into_iter().zip(picks.iter().cycle()) {
        match p % 3 {
            0 => d1.push((c.clone(), image(&c, p / 3))),
            1 => d2.push((c.clone(), image(&c, p / 3))),
            _ => {}
        }
    }
    (MessageSubstitution::new(d1).unwrap(), MessageSubstitution::new(d2).unwrap())
}

pub fn push_out(cases: u32) -> String {
    let mut runner = TestRunner::new(Config { cases, max_global_rejects: 100_000, failure_persistence: None, ..Config::default() });
    runner
        .run(&(arb_term(), prop::collection::vec(any::<u32>(), 1..6)), |(t, picks)| {
            prop_assume!(t.depth() <= 3);
            let (s1, s2) = split_domains(&t, &picks);
            prop_assume!(s1.domain().count() + s2.domain().count() > 0);
            let mut m = BTreeSet::new();
            subterms(&t, &mut m);
            prop_assume!(s1.is_injective_on(&m) && s2.is_injective_on(&m));
            let (b1, b2) = co_subst(&s1, &s2).unwrap();
            prop_assert_eq!(b1.apply(&s2.apply(&t)), b2.apply(&s1.apply(&t)));
            Ok(())
        })
        .unwrap();
    format!("{cases} cases")
}

/// A bundle grown from a choice tape. Two ciphers carry private marker
/// nonces, so each originates exactly once; everything else is assembled
/// from public atoms and the top-level components a strand has received.
struct Grown {
    b: Bundle,
    origin: [NodeId; 2],
    cipher: [Term; 2],
}

fn grow(tape: &[u8], strands: usize) -> Grown {
    let public = [atom("a:a"), atom("a:b"), atom("n:p")];
    let keys = [key("k:k"), key("k:j")];
    let mut nodes: Vec<Vec<Node>> = vec![Vec::new(); strands];
    let mut seen: Vec<Vec<Term>> = vec![public.to_vec(); strands];
    let mut sent: Vec<NodeId> = Vec::new();
    let mut edges = Vec::new();
    let mut origin: [Option<NodeId>; 2] = [None, None];
    let mut cipher: [Option<Term>; 2] = [None, None];
    let mut it = tape.iter().copied();
    let mut total = 0;

    let pick = |seen: &[Term], x: u8| seen[x as usize % seen.len()].clone();
    let originate = |i: usize, x: u8, y: u8, seen: &[Term]| {
        let marker = atom(&format!("n:m{i}"));
        let mut comps = vec![marker, pick(seen, x)];
        if y.is_multiple_of(2) {
            comps.push(pick(seen, y / 2));
        }
        Term::cipher(Term::seq(comps), keys[i].clone())
    };

    while total < 10 {
        let (Some(op), Some(who), Some(x), Some(y)) = (it.next(), it.next(), it.next(), it.next()) else { break };
        let s = who as usize % strands;
        match op % 4 {
            0 | 3 => {
                let mut comps = vec![pick(&seen[s], x)];
                if y % 3 != 0 {
                    comps.push(pick(&seen[s], y));
                }
                let mut msg = Term::seq(comps);
                if op % 4 == 3 {
                    msg = Term::cipher(msg, keys[y as usize % 2].clone());
                }
                nodes[s].push(Node::send(msg));
                sent.push(NodeId::new(s, nodes[s].len()));
            }
            1 => {
                let from: Vec<NodeId> = sent.iter().copied().filter(|v| v.strand != s).collect();
                if from.is_empty() {
                    continue;
                }
                let u = from[x as usize % from.len()];
                let msg = nodes[u.strand][u.index - 1].msg.clone();
                seen[s].extend(components(&msg));
                nodes[s].push(Node::recv(msg));
                edges.push((u, NodeId::new(s, nodes[s].len())));
            }
            _ => {
                let Some(i) = (0..2).find(|i| origin[*i].is_none()) else { continue };
                let c = originate(i, x, y, &seen[s]);
                let msg = if y % 3 == 0 { Term::pair(pick(&seen[s], x / 2), c.clone()) } else { c.clone() };
                nodes[s].push(Node::send(msg));
                let v = NodeId::new(s, nodes[s].len());
                sent.push(v);
                origin[i] = Some(v);
                cipher[i] = Some(c);
            }
        }
        total += 1;
    }
    for i in 0..2 {
        if origin[i].is_none() {
            let s = i % strands;
            let c = originate(i, i as u8, 1, &seen[s]);
            nodes[s].push(Node::send(c.clone()));
            origin[i] = Some(NodeId::new(s, nodes[s].len()));
            cipher[i] = Some(c);
        }
    }
    let mut b = Bundle::new();
    for (s, ns) in nodes.into_iter().enumerate() {
        let ns = if ns.is_empty() { vec![Node::send(public[0].clone())] } else { ns };
        b.add_strand(StrandKind::Honest, &format!("p{s}"), ns);
    }
    for (u, v) in edges {
        b.add_edge(u, v);
    }
    Grown { b, origin: origin.map(Option::unwrap), cipher: cipher.map(Option::unwrap) }
}

pub fn confluence(cases: u32) -> String {
    let mut runner = TestRunner::new(Config { cases, max_global_rejects: 50_000, failure_persistence: None, ..Config::default() });
    let nontrivial = std::cell::Cell::new(0usize);
    runner
        .run(&(prop::collection::vec(any::<u8>(), 8..48), 2..4usize, any::<u32>(), any::<u32>()), |(tape, n, c1, c2)| {
            let g = grow(&tape, n);
            prop_assert!(g.b.node_ids().count() <= 12);
            for i in 0..2 {
                prop_assert_eq!(origins(&g.b, &g.cipher[i]), vec![g.origin[i]]);
                prop_assert_eq!(g.b.sign(g.origin[i]), Sign::Plus);
            }
            let s1 = MessageSubstitution::single(g.cipher[0].clone(), image(&g.cipher[0], c1)).unwrap();
            let s2 = MessageSubstitution::single(g.cipher[1].clone(), image(&g.cipher[1], c2)).unwrap();
            let mut m = BTreeSet::new();
            for v in g.b.node_ids() {
                subterms(g.b.msg(v), &mut m);
            }
            prop_assume!(s1.is_injective_on(&m) && s2.is_injective_on(&m));
            let (b1, b2) = co_subst(&s1, &s2).unwrap();
            let left = adapt(&adapt(&g.b, g.origin[0], &s1), g.origin[1], &b2);
            let right = adapt(&adapt(&g.b, g.origin[1], &s2), g.origin[0], &b1);
            if left != g.b {
                nontrivial.set(nontrivial.get() + 1);
            }
            prop_assert_eq!(left, right);
            Ok(())
        })
        .unwrap();
    assert!(nontrivial.get() > cases as usize / 2, "{}", nontrivial.get());
    format!("{cases} cases, {} nontrivial", nontrivial.get())
}

/// Replays every successful acceptance between a canonical step and a
/// received message of a corpus attack.
pub fn acceptance_replay() -> String {
    let mut bundles: Vec<(String, shrimp::protocol::Protocol, shrimp::theory::ImplTheory, Bundle)> = Vec::new();
    for g in super::golden_attacks() {
        bundles.push((g.name.to_string(), g.protocol, g.theory, g.bundle));
    }
    for r in super::corpus_runs() {
        let v = verify(&r.protocol, &r.theory, &r.scenario).unwrap();
        let a = v.attack.unwrap_or_else(|| panic!("{}: expected an attack", r.name));
        bundles.push((r.name.to_string(), r.protocol, r.theory, a.bundle));
    }
    let mut successes = 0usize;
    for (name, p, th, b) in &bundles {
        let c = canonical_bundle(p).unwrap();
        let cov = sectionize(b, &c).unwrap();
        for v in b.node_ids() {
            if !b.strand(v).kind.is_honest() || b.sign(v) != Sign::Minus {
                continue;
            }
            let received = b.msg(v);
            let chosen: BTreeSet<Term> = candidate_origins(received)
                .into_iter()
                .filter(|x| origins(b, x).iter().any(|o| !b.strand(*o).kind.is_honest()))
                .collect();
            let beta = cov.beta_of(v.strand).cloned().unwrap_or_default();
            for u in c.bundle.node_ids().filter(|u| c.bundle.sign(*u) == Sign::Minus) {
                let (keys, tk) = c.knowledge(u.strand).before(u.index);
                let rn = |a: &Atom| beta.get(a).cloned().unwrap_or_else(|| a.clone());
                let keys: BTreeSet<Atom> = keys.iter().map(rn).collect();
                let tk: BTreeSet<Atom> = tk.iter().map(rn).collect();
                let expected = c.bundle.msg(u).rename(&beta);
                let mut vars = BTreeSet::new();
                let mut all = BTreeSet::new();
                subterms(&expected, &mut all);
                for x in all {
                    if let Term::Atom(a) = x {
                        if !tk.contains(&a) {
                            vars.insert(a);
                        }
                    }
                }
                if let Some(r) = accepts(&expected, received, &vars, &keys, th, &chosen) {
                    let j = Judgment { vars: &vars, keys: &keys, theory: th, chosen: &chosen };
                    j.check(&r.derivation).unwrap_or_else(|e| panic!("{name} {v} against {u}: {e}"));
                    successes += 1;
                }
            }
        }
    }
    assert!(successes >= bundles.len(), "{successes}");
    format!("{successes} derivations over {} bundles", bundles.len())
}

/// Every corpus protocol under an empty theory file, at the canonical
/// scenario and at two sessions per role.
pub fn free_theory_regression() -> String {
    use shrimp::protocol::parse_protocol;
    use shrimp::strand::PenKind;
    use shrimp::theory::parse_theory;
    use shrimp::verifier::{Scenario, VerifyError};

    let th = parse_theory(include_str!("../../theories/free.thy")).unwrap();
    assert!(th.is_free());
    let mut attacks = 0;
    let mut limits = 0;
    for (name, src) in shrimp::corpus::ALL {
        let p = parse_protocol(src).unwrap();
        let bounded = Scenario { node_cap: 100_000, ..Scenario::default() };
        for sc in [Scenario::canonical(&p), bounded] {
            match verify(&p, &th, &sc) {
                Ok(v) => {
                    if let Some(a) = v.attack {
                        let i = a.bundle.strands.iter().filter(|s| s.kind == StrandKind::Pen(PenKind::I)).count();
                        assert_eq!(i, 0, "{name}");
                        attacks += 1;
                    }
                }
                Err(VerifyError::ResourceLimit { .. }) => limits += 1,
                Err(e) => panic!("{name}: {e}"),
            }
        }
    }
    assert!(attacks >= 3, "{attacks}");
    format!("{attacks} attacks without I-strands, {limits} runs at the state cap")
}
