//! Symbolic messages: typed atoms closed under pairing and encryption.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TermError {
    #[error("encryption key must be a key atom, got `{0}`")]
    BadKey(String),
    #[error("position {pos} does not resolve in `{term}`")]
    InvalidPosition { pos: Position, term: String },
    #[error("parse error at byte {at}: {msg}")]
    Parse { at: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sort {
    Agent,
    Nonce,
    Timestamp,
    Tag,
    Key,
}

impl Sort {
    pub const ALL: [Sort; 5] = [Sort::Agent, Sort::Nonce, Sort::Timestamp, Sort::Tag, Sort::Key];

    pub fn prefix(self) -> &'static str {
        match self {
            Sort::Agent => "a",
            Sort::Nonce => "n",
            Sort::Timestamp => "t",
            Sort::Tag => "g",
            Sort::Key => "k",
        }
    }

    pub fn from_prefix(s: &str) -> Option<Sort> {
        Sort::ALL.into_iter().find(|x| x.prefix() == s)
    }
}

/// An atomic message. Two atoms are equal iff sort and name agree.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Atom {
    sort: Sort,
    name: Arc<str>,
}

impl Atom {
    pub fn new(sort: Sort, name: impl AsRef<str>) -> Atom {
        Atom { sort, name: Arc::from(name.as_ref()) }
    }
    pub fn agent(name: &str) -> Atom {
        Atom::new(Sort::Agent, name)
    }
    pub fn nonce(name: &str) -> Atom {
        Atom::new(Sort::Nonce, name)
    }
    pub fn timestamp(name: &str) -> Atom {
        Atom::new(Sort::Timestamp, name)
    }
    pub fn tag(name: &str) -> Atom {
        Atom::new(Sort::Tag, name)
    }
    pub fn key(name: &str) -> Atom {
        Atom::new(Sort::Key, name)
    }
    /// Public key of an agent; its inverse is [`Atom::private_key`].
    pub fn public_key(agent: &str) -> Atom {
        Atom::key(&format!("pk({agent})"))
    }
    pub fn private_key(agent: &str) -> Atom {
        Atom::key(&format!("sk({agent})"))
    }

    pub fn sort(&self) -> Sort {
        self.sort
    }
    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn is_key(&self) -> bool {
        self.sort == Sort::Key
    }

    /// Key inverse. `pk(x)` and `sk(x)` are mutually inverse, every other
    /// key is symmetric. Non-key atoms are returned unchanged.
    pub fn inverse(&self) -> Atom {
        if self.sort != Sort::Key {
            return self.clone();
        }
        if let Some(x) = wrapped(&self.name, "pk") {
            Atom::private_key(x)
        } else if let Some(x) = wrapped(&self.name, "sk") {
            Atom::public_key(x)
        } else {
            self.clone()
        }
    }

    /// The agent owning an asymmetric key, if any.
    pub fn key_owner(&self) -> Option<&str> {
        if self.sort != Sort::Key {
            return None;
        }
        wrapped(&self.name, "pk").or_else(|| wrapped(&self.name, "sk"))
    }

    pub fn with_name(&self, name: impl AsRef<str>) -> Atom {
        Atom::new(self.sort, name)
    }
}

fn wrapped<'a>(s: &'a str, f: &str) -> Option<&'a str> {
    s.strip_prefix(f)?.strip_prefix('(')?.strip_suffix(')')
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.sort.prefix(), self.name)
    }
}

impl fmt::Debug for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    Atom(Atom),
    Concat(Arc<Term>, Arc<Term>),
    Encrypt(Arc<Term>, Atom),
}

impl From<Atom> for Term {
    fn from(a: Atom) -> Term {
        Term::Atom(a)
    }
}

impl Term {
    pub fn atom(a: Atom) -> Term {
        Term::Atom(a)
    }

    pub fn pair(l: Term, r: Term) -> Term {
        Term::Concat(Arc::new(l), Arc::new(r))
    }

    /// Right-nested concatenation of a non-empty list.
    pub fn seq(items: impl IntoIterator<Item = Term>) -> Term {
        let mut v: Vec<Term> = items.into_iter().collect();
        let mut acc = v.pop().expect("seq of an empty list");
        while let Some(t) = v.pop() {
            acc = Term::pair(t, acc);
        }
        acc
    }

    /// Encryption under a term that must be a key atom.
    pub fn enc(body: Term, key: Term) -> Result<Term, TermError> {
        match key {
            Term::Atom(k) if k.is_key() => Ok(Term::Encrypt(Arc::new(body), k)),
            other => Err(TermError::BadKey(other.to_string())),
        }
    }

    /// Encryption under a key atom. Panics if `key` is not of sort key.
    pub fn cipher(body: Term, key: Atom) -> Term {
        assert!(key.is_key(), "encryption key must be a key atom, got {key}");
        Term::Encrypt(Arc::new(body), key)
    }

    pub fn as_atom(&self) -> Option<&Atom> {
        match self {
            Term::Atom(a) => Some(a),
            _ => None,
        }
    }

    pub fn is_atom(&self) -> bool {
        matches!(self, Term::Atom(_))
    }

    pub fn is_cipher(&self) -> bool {
        matches!(self, Term::Encrypt(..))
    }

    pub fn cipher_key(&self) -> Option<&Atom> {
        match self {
            Term::Encrypt(_, k) => Some(k),
            _ => None,
        }
    }

    pub fn cipher_body(&self) -> Option<&Term> {
        match self {
            Term::Encrypt(b, _) => Some(b),
            _ => None,
        }
    }

    /// Number of constructor levels; atoms have depth 1.
    pub fn depth(&self) -> usize {
        match self {
            Term::Atom(_) => 1,
            Term::Concat(l, r) => 1 + l.depth().max(r.depth()),
            Term::Encrypt(b, _) => 1 + b.depth().max(1),
        }
    }

    /// `self ⊑ t`: syntactic subterm, keys included.
    pub fn occurs_in(&self, t: &Term) -> bool {
        if self == t {
            return true;
        }
        match t {
            Term::Atom(_) => false,
            Term::Concat(l, r) => self.occurs_in(l) || self.occurs_in(r),
            Term::Encrypt(b, k) => self.occurs_in(b) || matches!(self, Term::Atom(a) if a == k),
        }
    }

    pub fn subterm_at(&self, p: &Position) -> Result<Term, TermError> {
        let mut cur = self.clone();
        for (i, &step) in p.0.iter().enumerate() {
            cur = match (&cur, step) {
                (Term::Concat(l, _), 1) => (**l).clone(),
                (Term::Concat(_, r), 2) => (**r).clone(),
                (Term::Encrypt(b, _), 1) => (**b).clone(),
                (Term::Encrypt(_, k), 2) if i + 1 == p.0.len() => Term::Atom(k.clone()),
                _ => {
                    return Err(TermError::InvalidPosition { pos: p.clone(), term: self.to_string() })
                }
            };
        }
        Ok(cur)
    }

    pub fn replace_at(&self, p: &Position, s: Term) -> Result<Term, TermError> {
        let shown = s.to_string();
        self.replace_from(&p.0, s).ok_or_else(|| {
            if self.subterm_at(p).is_err() {
                TermError::InvalidPosition { pos: p.clone(), term: self.to_string() }
            } else {
                TermError::BadKey(shown)
            }
        })
    }

    fn replace_from(&self, path: &[u8], s: Term) -> Option<Term> {
        let Some((&step, rest)) = path.split_first() else {
            return Some(s);
        };
        match (self, step) {
            (Term::Concat(l, r), 1) => Some(Term::Concat(Arc::new(l.replace_from(rest, s)?), r.clone())),
            (Term::Concat(l, r), 2) => Some(Term::Concat(l.clone(), Arc::new(r.replace_from(rest, s)?))),
            (Term::Encrypt(b, k), 1) => Some(Term::Encrypt(Arc::new(b.replace_from(rest, s)?), k.clone())),
            (Term::Encrypt(b, _), 2) if rest.is_empty() => match s {
                Term::Atom(k) if k.is_key() => Some(Term::Encrypt(b.clone(), k)),
                _ => None,
            },
            _ => None,
        }
    }

    /// All positions, outer before inner, left before right.
    pub fn positions(&self) -> Vec<Position> {
        let mut out = Vec::new();
        self.collect_positions(&mut Vec::new(), &mut out);
        out
    }

    fn collect_positions(&self, path: &mut Vec<u8>, out: &mut Vec<Position>) {
        out.push(Position(path.clone()));
        match self {
            Term::Atom(_) => {}
            Term::Concat(l, r) => {
                path.push(1);
                l.collect_positions(path, out);
                path.pop();
                path.push(2);
                r.collect_positions(path, out);
                path.pop();
            }
            Term::Encrypt(b, _) => {
                path.push(1);
                b.collect_positions(path, out);
                path.pop();
                path.push(2);
                out.push(Position(path.clone()));
                path.pop();
            }
        }
    }

    /// Positions of cipher subterms, maximal (outermost) first.
    pub fn cipher_positions(&self) -> Vec<(Position, Term)> {
        self.positions()
            .into_iter()
            .filter_map(|p| {
                let t = self.subterm_at(&p).ok()?;
                t.is_cipher().then_some((p, t))
            })
            .collect()
    }

    /// Positions at which `sub` occurs.
    pub fn positions_of(&self, sub: &Term) -> Vec<Position> {
        self.positions().into_iter().filter(|p| self.subterm_at(p).ok().as_ref() == Some(sub)).collect()
    }

    /// Apply an atom renaming everywhere; key positions only accept key atoms.
    pub fn rename(&self, f: &BTreeMap<Atom, Atom>) -> Term {
        match self {
            Term::Atom(a) => Term::Atom(f.get(a).cloned().unwrap_or_else(|| a.clone())),
            Term::Concat(l, r) => Term::pair(l.rename(f), r.rename(f)),
            Term::Encrypt(b, k) => {
                let k2 = f.get(k).filter(|k2| k2.is_key()).cloned().unwrap_or_else(|| k.clone());
                Term::Encrypt(Arc::new(b.rename(f)), k2)
            }
        }
    }

    /// Replace every occurrence of whole subterms found in `f`, outermost first.
    pub fn replace_terms(&self, f: &BTreeMap<Term, Term>) -> Term {
        if let Some(t) = f.get(self) {
            return t.clone();
        }
        match self {
            Term::Atom(_) => self.clone(),
            Term::Concat(l, r) => Term::pair(l.replace_terms(f), r.replace_terms(f)),
            Term::Encrypt(b, k) => {
                let k2 = match f.get(&Term::Atom(k.clone())) {
                    Some(Term::Atom(k2)) if k2.is_key() => k2.clone(),
                    _ => k.clone(),
                };
                Term::Encrypt(Arc::new(b.replace_terms(f)), k2)
            }
        }
    }
}

/// Branch path into a term: 1 = left / body, 2 = right / key.
#[derive(Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Position(pub Vec<u8>);

impl Position {
    pub fn root() -> Position {
        Position(Vec::new())
    }
    pub fn child(&self, step: u8) -> Position {
        let mut v = self.0.clone();
        v.push(step);
        Position(v)
    }
    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("ε");
        }
        let parts: Vec<String> = self.0.iter().map(|s| s.to_string()).collect();
        write!(f, "⟨{}⟩", parts.join(","))
    }
}

impl fmt::Debug for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// `Parts_K(t)`: t, concat components, and bodies of ciphers whose key
/// inverse is in `keys`.
pub fn parts(t: &Term, keys: &BTreeSet<Atom>) -> BTreeSet<Term> {
    let mut out = BTreeSet::new();
    let mut todo = vec![t.clone()];
    while let Some(x) = todo.pop() {
        if !out.insert(x.clone()) {
            continue;
        }
        match &x {
            Term::Atom(_) => {}
            Term::Concat(l, r) => {
                todo.push((**l).clone());
                todo.push((**r).clone());
            }
            Term::Encrypt(b, k) => {
                if keys.contains(&k.inverse()) {
                    todo.push((**b).clone());
                }
            }
        }
    }
    out
}

/// `Analz_K(t)`: iterate parts, learning every key atom uncovered on the way.
pub fn analz(t: &Term, keys: &BTreeSet<Atom>) -> BTreeSet<Term> {
    analz_all(std::slice::from_ref(t), keys).0
}

/// Analysis of several terms at once; returns the closure and the final key set.
pub fn analz_all(ts: &[Term], keys: &BTreeSet<Atom>) -> (BTreeSet<Term>, BTreeSet<Atom>) {
    let mut k = keys.clone();
    loop {
        let mut m = BTreeSet::new();
        for t in ts {
            m.extend(parts(t, &k));
        }
        let before = k.len();
        k.extend(m.iter().filter_map(|x| x.as_atom().filter(|a| a.is_key()).cloned()));
        if k.len() == before {
            return (m, k);
        }
    }
}

/// Membership in `Synthz(pool)`.
pub fn can_synthesize(target: &Term, pool: &BTreeSet<Term>) -> bool {
    if pool.contains(target) {
        return true;
    }
    match target {
        Term::Atom(_) => false,
        Term::Concat(l, r) => can_synthesize(l, pool) && can_synthesize(r, pool),
        Term::Encrypt(b, k) => pool.contains(&Term::Atom(k.clone())) && can_synthesize(b, pool),
    }
}

/// Top-level components, left to right: atoms and ciphers.
pub fn flatten(t: &Term) -> Vec<Term> {
    let mut out = Vec::new();
    flatten_into(t, &mut out);
    out
}

fn flatten_into(t: &Term, out: &mut Vec<Term>) {
    match t {
        Term::Concat(l, r) => {
            flatten_into(l, out);
            flatten_into(r, out);
        }
        _ => out.push(t.clone()),
    }
}

/// Every atom of `t`, encryption keys included.
pub fn atoms(t: &Term) -> BTreeSet<Atom> {
    let mut out = BTreeSet::new();
    atoms_into(t, &mut out);
    out
}

fn atoms_into(t: &Term, out: &mut BTreeSet<Atom>) {
    match t {
        Term::Atom(a) => {
            out.insert(a.clone());
        }
        Term::Concat(l, r) => {
            atoms_into(l, out);
            atoms_into(r, out);
        }
        Term::Encrypt(b, k) => {
            atoms_into(b, out);
            out.insert(k.clone());
        }
    }
}

/// `TK(t)`: atoms among the parts of `t` when every cipher is opened.
/// Encryption keys count only where they also occur as components.
pub fn tk(t: &Term) -> BTreeSet<Atom> {
    let mut out = BTreeSet::new();
    let mut todo = vec![t];
    while let Some(x) = todo.pop() {
        match x {
            Term::Atom(a) => {
                out.insert(a.clone());
            }
            Term::Concat(l, r) => {
                todo.push(l);
                todo.push(r);
            }
            Term::Encrypt(b, _) => todo.push(b),
        }
    }
    out
}

#[derive(PartialEq, Eq, PartialOrd, Ord)]
enum Shape {
    Atom(Atom),
    Pair(Box<Shape>, Box<Shape>),
    Cipher(Vec<Shape>, Atom),
}

fn shape(t: &Term) -> Shape {
    match t {
        Term::Atom(a) => Shape::Atom(a.clone()),
        Term::Concat(l, r) => Shape::Pair(Box::new(shape(l)), Box::new(shape(r))),
        Term::Encrypt(b, k) => {
            let mut comps: Vec<Shape> = flatten(b).iter().map(shape).collect();
            comps.sort();
            Shape::Cipher(comps, k.clone())
        }
    }
}

/// `m ≡ m′`: the concatenation skeleton outside ciphers is kept, and the
/// components inside every cipher are compared as a multiset, recursively.
pub fn equiv(m: &Term, m2: &Term) -> bool {
    shape(m) == shape(m2)
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Atom(a) => write!(f, "{a}"),
            Term::Concat(l, r) => {
                if matches!(**l, Term::Concat(..)) {
                    write!(f, "({l}); {r}")
                } else {
                    write!(f, "{l}; {r}")
                }
            }
            Term::Encrypt(b, k) => write!(f, "{{{b}}}{k}"),
        }
    }
}

impl fmt::Debug for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for Term {
    type Err = TermError;
    fn from_str(s: &str) -> Result<Term, TermError> {
        parse_with(s, &mut |tok, at| match tok.split_once(':') {
            Some((p, name)) if !name.is_empty() => match Sort::from_prefix(p) {
                Some(sort) => Ok(Atom::new(sort, name)),
                None => Err(TermError::Parse { at, msg: format!("unknown sort prefix `{p}`") }),
            },
            _ => Err(TermError::Parse { at, msg: format!("expected `sort:name`, got `{tok}`") }),
        })
    }
}

/// Parse the bracket structure of a term, delegating atom tokens to `atom`.
pub fn parse_with(
    s: &str,
    atom: &mut dyn FnMut(&str, usize) -> Result<Atom, TermError>,
) -> Result<Term, TermError> {
    let mut p = TermParser { src: s, pos: 0, atom };
    let t = p.seq()?;
    p.ws();
    if p.pos != s.len() {
        return Err(p.err("trailing input"));
    }
    Ok(t)
}

struct TermParser<'a, 'b> {
    src: &'a str,
    pos: usize,
    atom: &'b mut dyn FnMut(&str, usize) -> Result<Atom, TermError>,
}

impl TermParser<'_, '_> {
    fn err(&self, msg: &str) -> TermError {
        TermError::Parse { at: self.pos, msg: msg.to_string() }
    }

    fn ws(&mut self) {
        while let Some(c) = self.src[self.pos..].chars().next() {
            if !c.is_whitespace() {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.ws();
        self.src[self.pos..].chars().next()
    }

    fn seq(&mut self) -> Result<Term, TermError> {
        let first = self.item()?;
        if self.peek() == Some(';') {
            self.pos += 1;
            let rest = self.seq()?;
            return Ok(Term::pair(first, rest));
        }
        Ok(first)
    }

    fn item(&mut self) -> Result<Term, TermError> {
        match self.peek() {
            Some('(') => {
                self.pos += 1;
                let t = self.seq()?;
                if self.peek() != Some(')') {
                    return Err(self.err("expected `)`"));
                }
                self.pos += 1;
                Ok(t)
            }
            Some('{') => {
                self.pos += 1;
                let body = self.seq()?;
                if self.peek() != Some('}') {
                    return Err(self.err("expected `}`"));
                }
                self.pos += 1;
                let at = self.pos;
                let key = self.token()?;
                if !key.is_key() {
                    return Err(TermError::Parse { at, msg: format!("`{key}` is not a key") });
                }
                Ok(Term::cipher(body, key))
            }
            Some(_) => Ok(Term::Atom(self.token()?)),
            None => Err(self.err("unexpected end of input")),
        }
    }

    fn token(&mut self) -> Result<Atom, TermError> {
        self.ws();
        let start = self.pos;
        let mut depth = 0usize;
        for (i, c) in self.src[start..].char_indices() {
            let stop = match c {
                '(' => {
                    if i == 0 {
                        true
                    } else {
                        depth += 1;
                        false
                    }
                }
                ')' if depth > 0 => {
                    depth -= 1;
                    false
                }
                ')' | ';' | '{' | '}' => true,
                c if c.is_whitespace() => true,
                _ => false,
            };
            if stop {
                self.pos = start + i;
                return self.finish_token(start);
            }
        }
        self.pos = self.src.len();
        self.finish_token(start)
    }

    fn finish_token(&mut self, start: usize) -> Result<Atom, TermError> {
        let tok = &self.src[start..self.pos];
        if tok.is_empty() {
            return Err(self.err("expected an atom"));
        }
        (self.atom)(tok, start)
    }
}

impl FromStr for Atom {
    type Err = TermError;
    fn from_str(s: &str) -> Result<Atom, TermError> {
        match s.parse::<Term>()? {
            Term::Atom(a) => Ok(a),
            other => Err(TermError::Parse { at: 0, msg: format!("`{other}` is not an atom") }),
        }
    }
}

macro_rules! serde_via_text {
    ($ty:ty) => {
        impl Serialize for $ty {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }
        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<$ty, D::Error> {
                let text = String::deserialize(d)?;
                text.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

serde_via_text!(Atom);
serde_via_text!(Term);

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Term {
        s.parse().unwrap()
    }
    fn set(items: &[&str]) -> BTreeSet<Term> {
        items.iter().map(|s| t(s)).collect()
    }
    fn keys(items: &[&str]) -> BTreeSet<Atom> {
        items.iter().map(|s| Atom::key(s)).collect()
    }

    #[test]
    fn text_round_trip() {
        for s in ["{a:alice; n:na}k:kb", "(a:x; a:y); a:z", "{n:succ(nb); a:b}k:pk(a)", "a:x; {{n:m}k:k1}k:k2"] {
            assert_eq!(t(s).to_string(), s);
        }
        assert!("{a:x}a:y".parse::<Term>().is_err());
        assert!("q:x".parse::<Term>().is_err());
        assert!("{a:x".parse::<Term>().is_err());
    }

    #[test]
    fn composed_keys_rejected() {
        assert!(Term::enc(t("a:x"), t("k:k1; k:k2")).is_err());
        assert!(Term::enc(t("a:x"), t("n:n")).is_err());
        assert!(Term::enc(t("a:x"), t("k:k")).is_ok());
    }

    #[test]
    fn key_inverse() {
        let pk = Atom::public_key("b");
        assert_eq!(pk.inverse(), Atom::private_key("b"));
        assert_eq!(pk.inverse().inverse(), pk);
        assert_eq!(Atom::key("kas").inverse(), Atom::key("kas"));
        assert_eq!(pk.key_owner(), Some("b"));
    }

    #[test]
    fn parts_examples() {
        assert_eq!(parts(&t("{a:a; n:n}k:pk(b)"), &BTreeSet::new()), set(&["{a:a; n:n}k:pk(b)"]));
        assert_eq!(
            parts(&t("{a:a; n:n}k:pk(b)"), &keys(&["sk(b)"])),
            set(&["{a:a; n:n}k:pk(b)", "a:a; n:n", "a:a", "n:n"])
        );
        assert_eq!(parts(&t("a:a; {n:n}k:k"), &BTreeSet::new()), set(&["a:a; {n:n}k:k", "a:a", "{n:n}k:k"]));
    }

    #[test]
    fn analz_examples() {
        assert_eq!(analz(&t("n:n"), &BTreeSet::new()), set(&["n:n"]));
        assert_eq!(analz(&t("{n:n}k:k"), &BTreeSet::new()), set(&["{n:n}k:k"]));
        let a = analz(&t("{k:k2}k:k1; {n:n}k:k2"), &keys(&["k1"]));
        assert!(a.contains(&t("n:n")));
        assert!(!parts(&t("{k:k2}k:k1; {n:n}k:k2"), &keys(&["k1"])).contains(&t("n:n")));
    }

    #[test]
    fn synth_examples() {
        assert!(can_synthesize(&t("a:a; n:n"), &set(&["a:a", "n:n"])));
        assert!(can_synthesize(&t("{n:n}k:k"), &set(&["n:n", "k:k"])));
        assert!(!can_synthesize(&t("n:n"), &set(&["{n:n}k:k"])));
    }

    #[test]
    fn flatten_and_atoms() {
        assert_eq!(flatten(&t("{a:a}k:k; a:b; a:c")), vec![t("{a:a}k:k"), t("a:b"), t("a:c")]);
        assert_eq!(flatten(&t("n:n")), vec![t("n:n")]);
        assert_eq!(flatten(&t("{a:a; a:b}k:k")), vec![t("{a:a; a:b}k:k")]);
        let a: Vec<String> = atoms(&t("{a:a; n:n}k:kb")).iter().map(|a| a.to_string()).collect();
        assert_eq!(a, ["a:a", "n:n", "k:kb"]);
        assert_eq!(atoms(&t("{a:a}k:k; {a:a}k:k")).len(), 2);
    }

    #[test]
    fn positions() {
        let p = |v: &[u8]| Position(v.to_vec());
        assert_eq!(t("a:a; a:b").subterm_at(&p(&[2])).unwrap(), t("a:b"));
        assert_eq!(t("{a:a}k:k").replace_at(&p(&[1]), t("a:b")).unwrap(), t("{a:b}k:k"));
        assert!(t("n:n").subterm_at(&p(&[1])).is_err());
        assert_eq!(t("{a:a}k:k").subterm_at(&p(&[2])).unwrap(), t("k:k"));
        assert!(t("{a:a}k:k").replace_at(&p(&[2]), t("a:b")).is_err());
        assert_eq!(t("n:n").replace_at(&Position::root(), t("a:b")).unwrap(), t("a:b"));
        let cps: Vec<Term> = t("{{n:n}k:k}k:k2; {a:a}k:k").cipher_positions().into_iter().map(|x| x.1).collect();
        assert_eq!(cps, vec![t("{{n:n}k:k}k:k2"), t("{n:n}k:k"), t("{a:a}k:k")]);
    }

    #[test]
    fn equiv_examples() {
        assert!(equiv(&t("{a:a; a:b; n:m}k:kas"), &t("{n:m; a:a; a:b}k:kas")));
        assert!(equiv(&t("n:m"), &t("n:m")));
        assert!(!equiv(&t("{a:a}k:k"), &t("{a:b}k:k")));
        assert!(!equiv(&t("{a:a; a:a}k:k"), &t("{a:a}k:k")));
        assert!(!equiv(&t("a:a; a:b"), &t("a:b; a:a")));
        assert!(equiv(&t("{{a:a; a:b}k:k; n:n}k:k2"), &t("{n:n; {a:b; a:a}k:k}k:k2")));
    }
}
