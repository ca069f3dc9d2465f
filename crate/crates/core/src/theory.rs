//! Implementation theories: which sorts a byte-level implementation may
//! confuse, and the acceptance judgment built on top of them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::term::{atoms, flatten, Atom, Sort, Term};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TheoryError {
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown sort `{sort}`")]
    UnknownSort { line: usize, sort: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SortClass {
    Agent,
    Nonce,
    Timestamp,
    Key,
    Cipher,
}

impl SortClass {
    pub fn of(t: &Term) -> Option<SortClass> {
        match t {
            Term::Atom(a) => match a.sort() {
                Sort::Agent => Some(SortClass::Agent),
                Sort::Nonce => Some(SortClass::Nonce),
                Sort::Timestamp => Some(SortClass::Timestamp),
                Sort::Key => Some(SortClass::Key),
                Sort::Tag => None,
            },
            Term::Encrypt(..) => Some(SortClass::Cipher),
            Term::Concat(..) => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            SortClass::Agent => "agent",
            SortClass::Nonce => "nonce",
            SortClass::Timestamp => "timestamp",
            SortClass::Key => "key",
            SortClass::Cipher => "cipher",
        }
    }

    fn parse(s: &str) -> Option<SortClass> {
        [SortClass::Agent, SortClass::Nonce, SortClass::Timestamp, SortClass::Key, SortClass::Cipher]
            .into_iter()
            .find(|c| c.name() == s)
    }
}

/// A set of unordered sort pairs whose implementations may coincide. The
/// empty theory is the free algebra.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImplTheory {
    confusions: BTreeSet<(SortClass, SortClass)>,
}

fn ordered(a: SortClass, b: SortClass) -> (SortClass, SortClass) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl ImplTheory {
    pub fn free() -> ImplTheory {
        ImplTheory::default()
    }

    pub fn with(pairs: &[(SortClass, SortClass)]) -> ImplTheory {
        ImplTheory { confusions: pairs.iter().map(|&(a, b)| ordered(a, b)).collect() }
    }

    pub fn is_free(&self) -> bool {
        self.confusions.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (SortClass, SortClass)> + '_ {
        self.confusions.iter().copied()
    }

    /// Distinct sorts only: injectivity inside a sort always holds.
    pub fn allows(&self, a: SortClass, b: SortClass) -> bool {
        a != b && self.confusions.contains(&ordered(a, b))
    }

    /// Sorts that `c` may be confused with.
    pub fn partners(&self, c: SortClass) -> Vec<SortClass> {
        self.confusions
            .iter()
            .filter_map(|&(a, b)| if a == c { Some(b) } else if b == c { Some(a) } else { None })
            .filter(|&x| x != c)
            .collect()
    }
}

impl fmt::Display for ImplTheory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (a, b) in &self.confusions {
            writeln!(f, "confuse {} {}", a.name(), b.name())?;
        }
        Ok(())
    }
}

pub fn parse_theory(text: &str) -> Result<ImplTheory, TheoryError> {
    let mut th = ImplTheory::free();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let words: Vec<&str> = body.split_whitespace().collect();
        match words.as_slice() {
            ["confuse", a, b] => {
                let pa = SortClass::parse(a).ok_or_else(|| TheoryError::UnknownSort { line, sort: a.to_string() })?;
                let pb = SortClass::parse(b).ok_or_else(|| TheoryError::UnknownSort { line, sort: b.to_string() })?;
                th.confusions.insert(ordered(pa, pb));
            }
            _ => return Err(TheoryError::Syntax { line, msg: format!("expected `confuse <sort> <sort>`, got `{body}`") }),
        }
    }
    Ok(th)
}

fn chosen_side(t: &Term, chosen: &BTreeSet<Term>) -> bool {
    if chosen.contains(t) {
        return true;
    }
    t.is_cipher() && atoms(t).into_iter().all(|a| chosen.contains(&Term::Atom(a)))
}

/// Sort-level confusability under existential choice: the pair of sorts is
/// declared and one side consists entirely of material in `chosen`.
pub fn atom_confusable(m: &Term, m2: &Term, th: &ImplTheory, chosen: &BTreeSet<Term>) -> bool {
    let (Some(a), Some(b)) = (SortClass::of(m), SortClass::of(m2)) else {
        return false;
    };
    th.allows(a, b) && (chosen_side(m, chosen) || chosen_side(m2, chosen))
}

/// Decide `I(x) = I(y)` from the homomorphism axioms, camouflage pairs
/// already established in `eqs`, and sort-level confusions. Returns the
/// leaf pairs that needed a confusion axiom.
pub fn impl_equal(
    x: &Term,
    y: &Term,
    th: &ImplTheory,
    chosen: &BTreeSet<Term>,
    eqs: &BTreeSet<(Term, Term)>,
) -> Option<BTreeSet<(Term, Term)>> {
    let mut out = BTreeSet::new();
    impl_equal_into(x, y, th, chosen, eqs, &mut out).then_some(out)
}

fn impl_equal_into(
    x: &Term,
    y: &Term,
    th: &ImplTheory,
    chosen: &BTreeSet<Term>,
    eqs: &BTreeSet<(Term, Term)>,
    out: &mut BTreeSet<(Term, Term)>,
) -> bool {
    if x == y || eqs.contains(&(x.clone(), y.clone())) || eqs.contains(&(y.clone(), x.clone())) {
        return true;
    }
    match (x, y) {
        (Term::Concat(..), _) | (_, Term::Concat(..)) => {
            let (fx, fy) = (flatten(x), flatten(y));
            if fx.len() == fy.len() && fx.len() > 1 {
                return fx.iter().zip(&fy).all(|(a, b)| impl_equal_into(a, b, th, chosen, eqs, out));
            }
            false
        }
        (Term::Encrypt(bx, kx), Term::Encrypt(by, ky)) if kx == ky && impl_equal_into(bx, by, th, chosen, eqs, out) => true,
        _ if atom_confusable(x, y, th, chosen) => {
            out.insert((x.clone(), y.clone()));
            true
        }
        _ => false,
    }
}

pub type Renaming = BTreeMap<Atom, Term>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rule {
    Id,
    Sub,
    Seq,
    Enc,
}

/// One node of an acceptance derivation; `sigma` is the renaming produced by
/// this subtree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Derivation {
    pub rule: Rule,
    pub expected: Term,
    pub received: Term,
    pub sigma: Renaming,
    pub obligations: BTreeSet<(Term, Term)>,
    pub premises: Vec<Derivation>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AcceptanceResult {
    pub substitution: Renaming,
    pub obligations: BTreeSet<(Term, Term)>,
    pub derivation: Derivation,
}

/// Inputs shared by every step of an acceptance derivation.
pub struct Judgment<'a> {
    pub vars: &'a BTreeSet<Atom>,
    pub keys: &'a BTreeSet<Atom>,
    pub theory: &'a ImplTheory,
    pub chosen: &'a BTreeSet<Term>,
}

fn compatible(a: &Renaming, b: &Renaming) -> Option<Renaming> {
    let mut out = a.clone();
    for (k, v) in b {
        match out.get(k) {
            Some(w) if w != v => return None,
            _ => {
                out.insert(k.clone(), v.clone());
            }
        }
    }
    Some(out)
}

pub fn apply_renaming(t: &Term, s: &Renaming) -> Term {
    let mut f = BTreeMap::new();
    for (k, v) in s {
        f.insert(Term::Atom(k.clone()), v.clone());
    }
    t.replace_terms(&f)
}

/// `⊢_keys(expected, received, σ)` with `Dom(σ) ⊆ vars`.
pub fn accepts(
    expected: &Term,
    received: &Term,
    vars: &BTreeSet<Atom>,
    keys: &BTreeSet<Atom>,
    th: &ImplTheory,
    chosen: &BTreeSet<Term>,
) -> Option<AcceptanceResult> {
    let j = Judgment { vars, keys, theory: th, chosen };
    let d = j.derive(expected, received, &Renaming::new())?;
    Some(AcceptanceResult { substitution: d.sigma.clone(), obligations: collect_obligations(&d), derivation: d })
}

fn collect_obligations(d: &Derivation) -> BTreeSet<(Term, Term)> {
    let mut out = d.obligations.clone();
    for p in &d.premises {
        out.extend(collect_obligations(p));
    }
    out
}

impl Judgment<'_> {
    /// First derivation found; `ctx` is the renaming fixed by earlier siblings.
    fn derive(&self, m: &Term, r: &Term, ctx: &Renaming) -> Option<Derivation> {
        if m == r {
            return Some(self.leaf(Rule::Id, m, r, Renaming::new(), BTreeSet::new()));
        }
        if let Some(d) = self.sub(m, r, ctx) {
            return Some(d);
        }
        match m {
            Term::Concat(m1, m2) => self.seq(m, m1, m2, r, ctx),
            Term::Encrypt(body, k) if self.keys.contains(&k.inverse()) => self.enc(m, body, k, r, ctx),
            _ => None,
        }
    }

    fn leaf(&self, rule: Rule, m: &Term, r: &Term, sigma: Renaming, obl: BTreeSet<(Term, Term)>) -> Derivation {
        Derivation { rule, expected: m.clone(), received: r.clone(), sigma, obligations: obl, premises: Vec::new() }
    }

    fn sub(&self, m: &Term, r: &Term, ctx: &Renaming) -> Option<Derivation> {
        let opaque = matches!(m, Term::Encrypt(_, k) if !self.keys.contains(&k.inverse()));
        let is_var = matches!(m, Term::Atom(a) if self.vars.contains(a));
        if !opaque && !is_var {
            return None;
        }
        let mut sigma = Renaming::new();
        let mut obl = BTreeSet::new();
        if !self.rename_match(m, r, ctx, &mut sigma, &mut obl) {
            return None;
        }
        Some(self.leaf(Rule::Sub, m, r, sigma, obl))
    }

    /// Match `m` against `r` binding variables to same-sort atoms; mismatched
    /// leaves must be licensed by the theory.
    fn rename_match(
        &self,
        m: &Term,
        r: &Term,
        ctx: &Renaming,
        sigma: &mut Renaming,
        obl: &mut BTreeSet<(Term, Term)>,
    ) -> bool {
        if let Term::Atom(a) = m {
            if self.vars.contains(a) {
                let bound = sigma.get(a).or_else(|| ctx.get(a)).cloned();
                if let Some(b) = bound {
                    return &b == r || self.confuse(&b, r, obl);
                }
                let same_sort = matches!(r, Term::Atom(b) if b.sort() == a.sort());
                if same_sort || self.confuse(m, r, obl) {
                    sigma.insert(a.clone(), r.clone());
                    return true;
                }
                return false;
            }
        }
        match (m, r) {
            _ if m == r => true,
            (Term::Concat(m1, m2), Term::Concat(r1, r2)) => {
                let snapshot = (sigma.clone(), obl.clone());
                if self.rename_match(m1, r1, ctx, sigma, obl) && self.rename_match(m2, r2, ctx, sigma, obl) {
                    return true;
                }
                (*sigma, *obl) = snapshot;
                self.confuse(&apply_renaming(m, sigma), r, obl)
            }
            (Term::Encrypt(bm, km), Term::Encrypt(br, kr)) => {
                let snapshot = (sigma.clone(), obl.clone());
                let km_t = Term::Atom(km.clone());
                let kr_t = Term::Atom(kr.clone());
                if self.rename_match(&km_t, &kr_t, ctx, sigma, obl) && self.rename_match(bm, br, ctx, sigma, obl) {
                    return true;
                }
                (*sigma, *obl) = snapshot;
                self.confuse(&apply_renaming(m, sigma), r, obl)
            }
            _ => self.confuse(&apply_renaming(m, &compatible(ctx, sigma).unwrap_or_default()), r, obl),
        }
    }

    fn confuse(&self, x: &Term, y: &Term, obl: &mut BTreeSet<(Term, Term)>) -> bool {
        if atom_confusable(x, y, self.theory, self.chosen) {
            obl.insert((x.clone(), y.clone()));
            true
        } else {
            false
        }
    }

    fn seq(&self, m: &Term, m1: &Term, m2: &Term, r: &Term, ctx: &Renaming) -> Option<Derivation> {
        let comps = flatten(r);
        for split in 1..comps.len() {
            let r1 = Term::seq(comps[..split].iter().cloned());
            let r2 = Term::seq(comps[split..].iter().cloned());
            let Some(d1) = self.derive(m1, &r1, ctx) else { continue };
            let ctx1 = compatible(ctx, &d1.sigma)?;
            let Some(d2) = self.derive(m2, &r2, &ctx1) else { continue };
            let Some(sigma) = compatible(&d1.sigma, &d2.sigma) else { continue };
            return Some(Derivation {
                rule: Rule::Seq,
                expected: m.clone(),
                received: r.clone(),
                sigma,
                obligations: BTreeSet::new(),
                premises: vec![d1, d2],
            });
        }
        None
    }

    fn enc(&self, m: &Term, body: &Term, k: &Atom, r: &Term, ctx: &Renaming) -> Option<Derivation> {
        let Term::Encrypt(rb, rk) = r else { return None };
        let dk = self.derive(&Term::Atom(k.clone()), &Term::Atom(rk.clone()), ctx)?;
        let ctx1 = compatible(ctx, &dk.sigma)?;
        let db = self.derive(body, rb, &ctx1)?;
        let sigma = compatible(&dk.sigma, &db.sigma)?;
        Some(Derivation {
            rule: Rule::Enc,
            expected: m.clone(),
            received: r.clone(),
            sigma,
            obligations: BTreeSet::new(),
            premises: vec![dk, db],
        })
    }

    /// Replay a derivation against the rule side conditions.
    pub fn check(&self, d: &Derivation) -> Result<(), String> {
        let fail = |why: &str| Err(format!("{:?} at ({}, {}): {why}", d.rule, d.expected, d.received));
        for (x, y) in &d.obligations {
            if !atom_confusable(x, y, self.theory, self.chosen) {
                return fail("obligation not licensed by the theory");
            }
        }
        match d.rule {
            Rule::Id => {
                if d.expected != d.received || !d.sigma.is_empty() || !d.premises.is_empty() {
                    return fail("Id needs equal messages and an empty renaming");
                }
            }
            Rule::Sub => {
                let is_var = matches!(&d.expected, Term::Atom(a) if self.vars.contains(a));
                let opaque = matches!(&d.expected, Term::Encrypt(_, k) if !self.keys.contains(&k.inverse()));
                if !is_var && !opaque {
                    return fail("Sub needs a variable or an opaque cipher");
                }
                let tk = atoms(&d.expected);
                if d.sigma.keys().any(|a| !self.vars.contains(a) || !tk.contains(a)) {
                    return fail("Sub renaming leaves Vars ∩ TK(m)");
                }
                let lhs = apply_renaming(&d.expected, &d.sigma);
                match impl_equal(&lhs, &d.received, self.theory, self.chosen, &BTreeSet::new()) {
                    Some(obl) if obl.is_subset(&d.obligations) => {}
                    _ => return fail("I(σ(m)) = I(m′) not derivable"),
                }
            }
            Rule::Seq => {
                let (Term::Concat(m1, m2), [p1, p2]) = (&d.expected, d.premises.as_slice()) else {
                    return fail("Seq shape");
                };
                if p1.expected != **m1 || p2.expected != **m2 {
                    return fail("Seq premises do not match the expected halves");
                }
                let mut joined = flatten(&p1.received);
                joined.extend(flatten(&p2.received));
                if joined != flatten(&d.received) {
                    return fail("received message is not the concatenation of the premises");
                }
                if compatible(&p1.sigma, &p2.sigma).as_ref() != Some(&d.sigma) {
                    return fail("Seq renamings incompatible");
                }
            }
            Rule::Enc => {
                let (Term::Encrypt(body, k), [pk, pb]) = (&d.expected, d.premises.as_slice()) else {
                    return fail("Enc shape");
                };
                if !self.keys.contains(&k.inverse()) {
                    return fail("Enc needs the inverse key");
                }
                let Term::Atom(rk) = &pk.received else { return fail("received key is not atomic") };
                if pk.expected != Term::Atom(k.clone()) || pb.expected != **body {
                    return fail("Enc premises do not match");
                }
                if d.received != Term::cipher(pb.received.clone(), rk.clone()) {
                    return fail("received cipher differs from the premises");
                }
                if compatible(&pk.sigma, &pb.sigma).as_ref() != Some(&d.sigma) {
                    return fail("Enc renamings incompatible");
                }
            }
        }
        d.premises.iter().try_for_each(|p| self.check(p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Term {
        s.parse().unwrap()
    }
    fn terms(items: &[&str]) -> BTreeSet<Term> {
        items.iter().map(|s| t(s)).collect()
    }
    fn atomset(items: &[&str]) -> BTreeSet<Atom> {
        items.iter().map(|s| t(s).as_atom().unwrap().clone()).collect()
    }

    #[test]
    fn parse_examples() {
        assert_eq!(parse_theory("confuse nonce cipher").unwrap(), ImplTheory::with(&[(SortClass::Nonce, SortClass::Cipher)]));
        assert!(parse_theory("").unwrap().is_free());
        let kp = parse_theory("confuse agent key\nconfuse key cipher").unwrap();
        assert_eq!(kp, ImplTheory::with(&[(SortClass::Agent, SortClass::Key), (SortClass::Key, SortClass::Cipher)]));
        assert_eq!(parse_theory("# comment\n\nconfuse nonce cipher # trailing\n").unwrap().pairs().count(), 1);
        assert_eq!(parse_theory("x\nconfuse a b"), Err(TheoryError::Syntax { line: 1, msg: "expected `confuse <sort> <sort>`, got `x`".into() }));
        assert!(matches!(parse_theory("confuse nonce tag"), Err(TheoryError::UnknownSort { line: 1, .. })));
        assert_eq!(parse_theory(&kp.to_string()).unwrap(), kp);
    }

    #[test]
    fn confusable_examples() {
        let th = parse_theory("confuse nonce cipher").unwrap();
        let nb = t("n:nb");
        let mk = t("{n:m}k:k");
        assert!(atom_confusable(&nb, &mk, &th, &terms(&["n:m", "k:k"])));
        assert!(!atom_confusable(&nb, &mk, &th, &BTreeSet::new()));
        assert!(!atom_confusable(&nb, &t("n:nc"), &th, &terms(&["n:nc"])));
        assert!(!atom_confusable(&nb, &mk, &ImplTheory::free(), &terms(&["n:m", "k:k"])));
    }

    #[test]
    fn accepts_examples() {
        let free = ImplTheory::free();
        let none = BTreeSet::new();
        let r = accepts(
            &t("{n:na; n:nb}k:pk(a)"),
            &t("{n:na; n:nc}k:pk(a)"),
            &atomset(&["n:nb"]),
            &atomset(&["k:sk(a)"]),
            &free,
            &none,
        )
        .unwrap();
        assert_eq!(r.substitution, [(Atom::nonce("nb"), t("n:nc"))].into_iter().collect());
        assert_eq!(r.derivation.rule, Rule::Enc);

        let m = t("{n:m}k:k");
        let r = accepts(&m, &m, &BTreeSet::new(), &BTreeSet::new(), &free, &none).unwrap();
        assert!(r.substitution.is_empty());
        assert_eq!(r.derivation.rule, Rule::Id);

        let th = parse_theory("confuse nonce cipher").unwrap();
        let r = accepts(
            &t("{a:a; a:b; n:nb}k:kas"),
            &t("n:nb"),
            &atomset(&["n:nb", "k:kas"]),
            &BTreeSet::new(),
            &th,
            &terms(&["n:nb"]),
        )
        .unwrap();
        assert_eq!(r.obligations.len(), 1);
        assert!(accepts(&t("{a:a; a:b; n:nb}k:kas"), &t("n:nb"), &BTreeSet::new(), &BTreeSet::new(), &free, &none).is_none());
    }

    #[test]
    fn seq_splits_reassociate() {
        let free = ImplTheory::free();
        let r = accepts(&t("a:a; (a:b; a:c)"), &t("(a:a; a:b); a:c"), &BTreeSet::new(), &BTreeSet::new(), &free, &BTreeSet::new());
        assert!(r.is_some());
        let vars = atomset(&["n:x"]);
        let r = accepts(&t("n:x; a:b"), &t("n:y; a:b"), &vars, &BTreeSet::new(), &free, &BTreeSet::new()).unwrap();
        assert_eq!(r.substitution.get(&Atom::nonce("x")), Some(&t("n:y")));
        assert!(accepts(&t("n:x; n:x"), &t("n:y; n:z"), &vars, &BTreeSet::new(), &free, &BTreeSet::new()).is_none());
    }

    #[test]
    fn derivations_replay() {
        let th = parse_theory("confuse nonce cipher").unwrap();
        let vars = atomset(&["n:nb", "k:kas", "n:x"]);
        let keys = atomset(&["k:kbs"]);
        let chosen = terms(&["n:m", "k:k"]);
        let cases = [
            ("{a:a; a:b; n:x}k:kbs", "{a:a; a:b; n:y}k:kbs"),
            ("{a:a; {a:a; n:nb}k:kas}k:kbs", "{a:a; n:m}k:kbs"),
            ("n:x; {n:nb}k:kas", "{n:m}k:k; {n:q}k:kas"),
        ];
        for (e, r) in cases {
            let res = accepts(&t(e), &t(r), &vars, &keys, &th, &chosen).unwrap_or_else(|| panic!("{e} / {r}"));
            Judgment { vars: &vars, keys: &keys, theory: &th, chosen: &chosen }.check(&res.derivation).unwrap();
        }
    }
}
