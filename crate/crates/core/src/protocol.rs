//! Protocol descriptions in Alice-and-Bob form, and the roles they induce.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keys::KeyTable;
use crate::strand::{Node, Role};
use crate::term::{atoms, parse_with, Atom, Sort, Term, TermError};
use crate::verifier::Goal;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("line {line}: undeclared atom `{name}`")]
    UndeclaredAtom { line: usize, name: String },
    #[error("fresh atom {atom} does not originate at {agent}")]
    NonOriginatingFresh { atom: Atom, agent: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub from: String,
    pub to: String,
    pub term: Term,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedKey {
    pub a: String,
    pub b: String,
    pub key: Atom,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub name: String,
    pub agents: Vec<String>,
    pub fresh: Vec<(Atom, String)>,
    pub timestamps: Vec<(Atom, String)>,
    pub pk: bool,
    pub shared: Vec<SharedKey>,
    pub msgs: Vec<Step>,
    pub goals: Vec<Goal>,
}

/// `succ(x)` for a nonce, `t+d` for a timestamp: atoms computed from
/// another atom by whoever knows it.
pub fn derived_base(a: &Atom) -> Option<Atom> {
    match a.sort() {
        Sort::Nonce => {
            let inner = a.name().strip_prefix("succ(")?.strip_suffix(')')?;
            Some(Atom::nonce(inner))
        }
        Sort::Timestamp => a.name().strip_suffix("+d").map(Atom::timestamp),
        _ => None,
    }
}

/// Re-derive `derived` from a new base.
pub fn rederive(derived: &Atom, base: &Atom) -> Atom {
    match derived.sort() {
        Sort::Nonce => Atom::nonce(&format!("succ({})", base.name())),
        _ => Atom::timestamp(&format!("{}+d", base.name())),
    }
}

impl Protocol {
    pub fn agent_atoms(&self) -> Vec<Atom> {
        self.agents.iter().map(|a| Atom::agent(a)).collect()
    }

    pub fn key_table(&self) -> KeyTable {
        let mut kt = KeyTable::default();
        if self.pk {
            for a in &self.agents {
                kt.add_public(a);
            }
        }
        for s in &self.shared {
            kt.add_shared(&s.a, &s.b, s.key.clone());
        }
        kt
    }

    /// Names that occur in every shared-key declaration: the trusted server.
    pub fn server(&self) -> Option<&str> {
        let first = self.shared.first()?;
        [first.a.as_str(), first.b.as_str()]
            .into_iter()
            .find(|x| self.shared.iter().all(|s| s.a == *x || s.b == *x) && self.shared.len() > 1)
    }

    pub fn originator(&self, a: &Atom) -> Option<&str> {
        self.fresh
            .iter()
            .chain(&self.timestamps)
            .find(|(x, _)| x == a)
            .map(|(_, who)| who.as_str())
    }

    fn resolve(&self, tok: &str) -> Option<Atom> {
        if let Some((p, name)) = tok.split_once(':') {
            return Sort::from_prefix(p).filter(|_| !name.is_empty()).map(|s| Atom::new(s, name));
        }
        if let Some(x) = tok.strip_prefix("pk(").and_then(|r| r.strip_suffix(')')) {
            return self.agents.iter().any(|a| a == x).then(|| Atom::public_key(x));
        }
        if let Some(x) = tok.strip_prefix("sk(").and_then(|r| r.strip_suffix(')')) {
            return self.agents.iter().any(|a| a == x).then(|| Atom::private_key(x));
        }
        if let Some(x) = tok.strip_prefix("succ(").and_then(|r| r.strip_suffix(')')) {
            return self.resolve(x).filter(|b| b.sort() == Sort::Nonce).map(|b| rederive(&Atom::nonce("_"), &b));
        }
        if let Some(x) = tok.strip_suffix("+d") {
            return self.resolve(x).filter(|b| b.sort() == Sort::Timestamp).map(|b| rederive(&Atom::timestamp("_"), &b));
        }
        if self.agents.iter().any(|a| a == tok) {
            return Some(Atom::agent(tok));
        }
        self.fresh
            .iter()
            .chain(&self.timestamps)
            .map(|(a, _)| a)
            .chain(self.shared.iter().map(|s| &s.key))
            .find(|a| a.name() == tok)
            .cloned()
    }

    /// Surface spelling of an atom: its bare name when that resolves back.
    pub fn surface_atom(&self, a: &Atom) -> String {
        if self.resolve(a.name()).as_ref() == Some(a) {
            a.name().to_string()
        } else {
            a.to_string()
        }
    }

    pub fn surface(&self, t: &Term) -> String {
        match t {
            Term::Atom(a) => self.surface_atom(a),
            Term::Concat(l, r) if matches!(**l, Term::Concat(..)) => format!("({}); {}", self.surface(l), self.surface(r)),
            Term::Concat(l, r) => format!("{}; {}", self.surface(l), self.surface(r)),
            Term::Encrypt(b, k) => format!("{{{}}}{}", self.surface(b), self.surface_atom(k)),
        }
    }

    pub fn parse_term(&self, s: &str) -> Result<Term, ProtocolError> {
        self.parse_term_at(s, 0, 0)
    }

    fn parse_term_at(&self, s: &str, line: usize, col0: usize) -> Result<Term, ProtocolError> {
        let mut undeclared = None;
        let r = parse_with(s, &mut |tok, at| match self.resolve(tok) {
            Some(a) => Ok(a),
            None => {
                undeclared = Some(tok.to_string());
                Err(TermError::Parse { at, msg: format!("undeclared atom `{tok}`") })
            }
        });
        match r {
            Ok(t) => Ok(t),
            Err(_) if undeclared.is_some() => Err(ProtocolError::UndeclaredAtom { line, name: undeclared.unwrap() }),
            Err(TermError::Parse { at, msg }) => Err(ProtocolError::Syntax { line, col: col0 + at + 1, msg }),
            Err(e) => Err(ProtocolError::Syntax { line, col: col0 + 1, msg: e.to_string() }),
        }
    }

    /// One role per agent that sends or receives, in declaration order.
    pub fn roles(&self) -> Vec<Role> {
        let kt = self.key_table();
        let mut out = Vec::new();
        for a in &self.agents {
            let strand: Vec<Node> = self
                .msgs
                .iter()
                .filter_map(|m| {
                    if &m.from == a {
                        Some(Node::send(m.term.clone()))
                    } else if &m.to == a {
                        Some(Node::recv(m.term.clone()))
                    } else {
                        None
                    }
                })
                .collect();
            if strand.is_empty() {
                continue;
            }
            let mut params: BTreeSet<Atom> = strand.iter().flat_map(|n| atoms(&n.msg)).collect();
            params.insert(Atom::agent(a));
            let owners: Vec<Atom> = params
                .iter()
                .filter(|k| k.is_key())
                .flat_map(|k| kt.owners(k))
                .map(|o| Atom::agent(&o))
                .collect();
            params.extend(owners);
            out.push(Role { name: a.clone(), agent: Atom::agent(a), strand, params });
        }
        out
    }

    pub fn role(&self, name: &str) -> Option<Role> {
        self.roles().into_iter().find(|r| r.name == name)
    }

    /// Initial knowledge of a role: the agent names among its parameters,
    /// what it generates itself, and the long-term keys it holds.
    pub fn initial_knowledge(&self, role: &Role) -> (BTreeSet<Atom>, BTreeSet<Atom>) {
        let kt = self.key_table();
        let held = kt.keys_of(role.agent.name());
        let mut at = BTreeSet::new();
        let mut keys = BTreeSet::new();
        for p in &role.params {
            let own = self.originator(p) == Some(role.name.as_str());
            if p.sort() == Sort::Agent || own {
                at.insert(p.clone());
            }
            if p.is_key() && (own || held.contains(p)) {
                keys.insert(p.clone());
            }
        }
        if self.pk {
            keys.insert(Atom::private_key(role.agent.name()));
        }
        loop {
            let extra: Vec<Atom> = role
                .params
                .iter()
                .filter(|p| !at.contains(*p) && derived_base(p).is_some_and(|b| at.contains(&b)))
                .cloned()
                .collect();
            if extra.is_empty() {
                break;
            }
            at.extend(extra);
        }
        at.extend(keys.iter().cloned());
        (at, keys)
    }

    /// Atoms a role generates afresh in each run.
    pub fn generated_by(&self, role: &str) -> Vec<Atom> {
        self.fresh.iter().chain(&self.timestamps).filter(|(_, w)| w == role).map(|(a, _)| a.clone()).collect()
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        for (i, m) in self.msgs.iter().enumerate() {
            if m.index != i + 1 {
                return Err(ProtocolError::Invalid(format!("message steps must be dense from 1, got {}", m.index)));
            }
            for who in [&m.from, &m.to] {
                if !self.agents.contains(who) {
                    return Err(ProtocolError::Invalid(format!("unknown agent `{who}` in message {}", m.index)));
                }
            }
            if m.from == m.to {
                return Err(ProtocolError::Invalid(format!("message {} is sent to its own sender", m.index)));
            }
        }
        for (a, who) in self.fresh.iter().chain(&self.timestamps) {
            let first = self.msgs.iter().find(|m| Term::Atom(a.clone()).occurs_in(&m.term));
            if first.is_some_and(|m| &m.from != who) || !self.agents.contains(who) {
                return Err(ProtocolError::NonOriginatingFresh { atom: a.clone(), agent: who.clone() });
            }
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        render_protocol(self)
    }
}

fn fresh_sort(name: &str) -> Atom {
    if let Some((p, n)) = name.split_once(':') {
        if let Some(s) = Sort::from_prefix(p) {
            return Atom::new(s, n);
        }
    }
    if name.starts_with('k') {
        Atom::key(name)
    } else {
        Atom::nonce(name)
    }
}

pub fn parse_protocol(text: &str) -> Result<Protocol, ProtocolError> {
    let mut p = Protocol::default();
    let mut goal_lines = Vec::new();
    let mut msg_lines = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let body = raw.split('#').next().unwrap_or("").trim_end();
        let trimmed = body.trim_start();
        if trimmed.is_empty() {
            continue;
        }
        let indent = body.len() - trimmed.len();
        let (kw, rest) = trimmed.split_once(char::is_whitespace).unwrap_or((trimmed, ""));
        let syntax = |col: usize, msg: &str| ProtocolError::Syntax { line, col, msg: msg.to_string() };
        match kw {
            "protocol" => p.name = rest.trim().to_string(),
            "agents" => p.agents.extend(rest.split_whitespace().map(String::from)),
            "fresh" | "timestamps" => {
                for item in rest.split_whitespace() {
                    let (name, who) = item.split_once('@').ok_or_else(|| syntax(indent + 1, "expected `atom@agent`"))?;
                    let atom = if kw == "fresh" { fresh_sort(name) } else { Atom::timestamp(name) };
                    let list = if kw == "fresh" { &mut p.fresh } else { &mut p.timestamps };
                    list.push((atom, who.to_string()));
                }
            }
            "keys" => {
                for item in rest.split_whitespace() {
                    if item == "pk" {
                        p.pk = true;
                        continue;
                    }
                    let inner = item
                        .strip_prefix("shared(")
                        .and_then(|r| r.split_once(")="))
                        .ok_or_else(|| syntax(indent + 1, "expected `pk` or `shared(x,y)=name`"))?;
                    let (a, b) = inner.0.split_once(',').ok_or_else(|| syntax(indent + 1, "expected two agents"))?;
                    p.shared.push(SharedKey { a: a.trim().into(), b: b.trim().into(), key: Atom::key(inner.1) });
                }
            }
            "msg" => msg_lines.push((line, indent, rest.to_string(), raw.len() - raw.trim_start().len() + kw.len() + 1)),
            "goal" => goal_lines.push((line, rest.to_string())),
            _ => return Err(syntax(indent + 1, &format!("unknown keyword `{kw}`"))),
        }
    }
    for (line, _, rest, col0) in msg_lines {
        let syntax = |msg: &str| ProtocolError::Syntax { line, col: col0 + 1, msg: msg.to_string() };
        let (head, term) = rest.split_once(':').ok_or_else(|| syntax("expected `msg <i> <from> -> <to> : <term>`"))?;
        let parts: Vec<&str> = head.split_whitespace().collect();
        let [idx, from, "->", to] = parts.as_slice() else {
            return Err(syntax("expected `msg <i> <from> -> <to> : <term>`"));
        };
        let index: usize = idx.parse().map_err(|_| syntax("step index must be a number"))?;
        let term_col = col0 + head.len() + 1;
        let term = p.parse_term_at(term, line, term_col)?;
        p.msgs.push(Step { index, from: from.to_string(), to: to.to_string(), term });
    }
    for (line, rest) in goal_lines {
        p.goals.push(parse_goal(&p, line, &rest)?);
    }
    p.validate()?;
    Ok(p)
}

fn parse_goal(p: &Protocol, line: usize, rest: &str) -> Result<Goal, ProtocolError> {
    let words: Vec<&str> = rest.split_whitespace().collect();
    let atom = |w: &str| p.resolve(w).ok_or_else(|| ProtocolError::UndeclaredAtom { line, name: w.to_string() });
    let bad = || ProtocolError::Syntax { line, col: 1, msg: "expected `secrecy <atom>` or `agree <role> <role> [injective] on <atoms>`".into() };
    match words.as_slice() {
        ["secrecy", a] => Ok(Goal::Secrecy { atom: atom(a)? }),
        ["agree", claimant, partner, tail @ ..] => {
            let (injective, tail) = match tail {
                ["injective", t @ ..] => (true, t),
                t => (false, t),
            };
            let ["on", on @ ..] = tail else { return Err(bad()) };
            let on = on.iter().map(|w| atom(w)).collect::<Result<Vec<_>, _>>()?;
            for r in [claimant, partner] {
                if !p.agents.iter().any(|a| a == r) {
                    return Err(ProtocolError::Invalid(format!("goal names unknown role `{r}`")));
                }
            }
            let (claimant, partner) = (claimant.to_string(), partner.to_string());
            Ok(if injective {
                Goal::InjectiveAgreement { claimant, partner, on }
            } else {
                Goal::NonInjectiveAgreement { claimant, partner, on }
            })
        }
        _ => Err(bad()),
    }
}

fn atom_decl(a: &Atom, who: &str, kw: &str) -> String {
    let inferred = if kw == "fresh" { fresh_sort(a.name()) } else { Atom::timestamp(a.name()) };
    if inferred == *a {
        format!("{}@{who}", a.name())
    } else {
        format!("{a}@{who}")
    }
}

pub fn render_protocol(p: &Protocol) -> String {
    let mut out = String::new();
    writeln!(out, "protocol {}", p.name).unwrap();
    writeln!(out, "agents {}", p.agents.join(" ")).unwrap();
    if !p.fresh.is_empty() {
        let items: Vec<String> = p.fresh.iter().map(|(a, w)| atom_decl(a, w, "fresh")).collect();
        writeln!(out, "fresh {}", items.join(" ")).unwrap();
    }
    if !p.timestamps.is_empty() {
        let items: Vec<String> = p.timestamps.iter().map(|(a, w)| atom_decl(a, w, "timestamps")).collect();
        writeln!(out, "timestamps {}", items.join(" ")).unwrap();
    }
    let mut keys: Vec<String> = Vec::new();
    if p.pk {
        keys.push("pk".into());
    }
    keys.extend(p.shared.iter().map(|s| format!("shared({},{})={}", s.a, s.b, s.key.name())));
    if !keys.is_empty() {
        writeln!(out, "keys {}", keys.join(" ")).unwrap();
    }
    for m in &p.msgs {
        writeln!(out, "msg {} {} -> {} : {}", m.index, m.from, m.to, p.surface(&m.term)).unwrap();
    }
    for g in &p.goals {
        let names = |on: &[Atom]| on.iter().map(|a| p.surface_atom(a)).collect::<Vec<_>>().join(" ");
        match g {
            Goal::Secrecy { atom: a } => writeln!(out, "goal secrecy {}", p.surface_atom(a)),
            Goal::NonInjectiveAgreement { claimant, partner, on } => {
                writeln!(out, "goal agree {claimant} {partner} on {}", names(on))
            }
            Goal::InjectiveAgreement { claimant, partner, on } => {
                writeln!(out, "goal agree {claimant} {partner} injective on {}", names(on))
            }
        }
        .unwrap();
    }
    out
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_protocol(self))
    }
}

/// Strand-form rendering, one role per block.
pub fn render_roles(p: &Protocol) -> String {
    let mut out = String::new();
    for r in p.roles() {
        let nodes: Vec<String> = r.strand.iter().map(|n| format!("{}{}", n.sign, p.surface(&n.msg))).collect();
        writeln!(out, "{}: {}", r.name, nodes.join(" => ")).unwrap();
    }
    out
}

/// Renaming with every parameter mapped to itself.
pub fn identity_on(params: &BTreeSet<Atom>) -> BTreeMap<Atom, Atom> {
    params.iter().map(|a| (a.clone(), a.clone())).collect()
}
