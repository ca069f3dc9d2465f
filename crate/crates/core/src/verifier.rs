//! Bounded Dolev-Yao search for attacks, producing checkable bundles.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coverage::{blobs, shared_key_name};
use crate::protocol::{derived_base, rederive, Protocol};
use crate::strand::{check_bundle, check_penetrator, differing_leaves, Bundle, Node, NodeId, PenKind, Role, RoleInstance, Sign, StrandKind};
use crate::term::{Atom, Sort, Term};
use crate::theory::{ImplTheory, SortClass};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Goal {
    Secrecy { atom: Atom },
    NonInjectiveAgreement { claimant: String, partner: String, on: Vec<Atom> },
    InjectiveAgreement { claimant: String, partner: String, on: Vec<Atom> },
}

impl fmt::Display for Goal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |on: &[Atom]| on.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(" ");
        match self {
            Goal::Secrecy { atom } => write!(f, "secrecy {atom}"),
            Goal::NonInjectiveAgreement { claimant, partner, on } => write!(f, "agree {claimant} {partner} on {}", list(on)),
            Goal::InjectiveAgreement { claimant, partner, on } => {
                write!(f, "agree {claimant} {partner} injective on {}", list(on))
            }
        }
    }
}

/// A role instance with its agent parameters fixed to principals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub role: String,
    pub agents: BTreeMap<String, String>,
}

/// Search bounds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    /// Instances per role when `sessions` is empty.
    pub bound: usize,
    /// Explicit instances, each spawned at most once; empty means every
    /// assignment of principals, up to `bound` per role.
    pub sessions: Vec<Session>,
    /// Nesting bound for messages the intruder composes.
    pub depth: usize,
    /// States explored before giving up.
    pub node_cap: usize,
    /// Hand the intruder the session keys of an earlier run.
    pub lost_key: bool,
    /// Overrides the protocol's goals when non-empty.
    pub goals: Vec<Goal>,
}

impl Default for Scenario {
    fn default() -> Scenario {
        Scenario { bound: 2, sessions: Vec::new(), depth: 12, node_cap: 500_000, lost_key: false, goals: Vec::new() }
    }
}

impl Scenario {
    /// One instance of every role, played by the principals the protocol
    /// names.
    pub fn canonical(p: &Protocol) -> Scenario {
        let sessions = p
            .roles()
            .iter()
            .map(|r| Session {
                role: r.name.clone(),
                agents: r.params.iter().filter(|a| a.sort() == Sort::Agent).map(|a| (a.name().to_string(), a.name().to_string())).collect(),
            })
            .collect();
        Scenario { bound: 1, sessions, ..Scenario::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerifyError {
    #[error("resource-limit: {explored} states explored without exhausting the bound")]
    ResourceLimit { explored: usize },
    #[error("reconstruction: {0}")]
    Reconstruction(String),
    #[error("goal or session names unknown role `{0}`")]
    UnknownRole(String),
    #[error("session for role `{role}` leaves agent `{agent}` unbound")]
    UnboundAgent { role: String, agent: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attack {
    pub goal: Goal,
    pub bundle: Bundle,
    pub spy: String,
    pub penetrator_keys: BTreeSet<Atom>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub attack: Option<Attack>,
    pub explored: usize,
    /// The event sequence behind `attack`.
    #[serde(skip)]
    pub witness: Option<Witness>,
}

/// The search path to a violation, replayable into a bundle.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Witness(Vec<Event>);

impl Witness {
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Replay a witness from the same protocol, theory and scenario.
pub fn reconstruct_bundle(p: &Protocol, th: &ImplTheory, sc: &Scenario, w: &Witness) -> Result<Bundle, VerifyError> {
    Model::new(p, th, sc)?.reconstruct(&w.0)
}

pub fn search_attack(p: &Protocol, th: &ImplTheory, sc: &Scenario) -> Result<Option<Attack>, VerifyError> {
    verify(p, th, sc).map(|v| v.attack)
}

pub fn verify(p: &Protocol, th: &ImplTheory, sc: &Scenario) -> Result<Verdict, VerifyError> {
    let m = Model::new(p, th, sc)?;
    let root = m.initial_state();
    let mut arena: Vec<(Option<usize>, Event)> = Vec::new();
    let mut seen = HashSet::from([root.fingerprint()]);
    let mut frontier = VecDeque::from([(root, None)]);
    while let Some((st, id)) = frontier.pop_front() {
        for ev in m.transitions(&st) {
            let next = m.apply(&st, &ev);
            if !seen.insert(next.fingerprint()) {
                continue;
            }
            if seen.len() > sc.node_cap {
                return Err(VerifyError::ResourceLimit { explored: seen.len() - 1 });
            }
            arena.push((id, ev));
            let nid = arena.len() - 1;
            if let Some(goal) = m.violated(&next) {
                let mut events = Vec::new();
                let mut cur = Some(nid);
                while let Some(i) = cur {
                    events.push(arena[i].1.clone());
                    cur = arena[i].0;
                }
                events.reverse();
                let bundle = m.reconstruct(&events)?;
                let attack = Attack { goal, bundle, spy: m.spy.clone(), penetrator_keys: m.kp.clone() };
                return Ok(Verdict { attack: Some(attack), explored: seen.len() - 1, witness: Some(Witness(events)) });
            }
            frontier.push_back((next, Some(nid)));
        }
    }
    Ok(Verdict { attack: None, explored: seen.len() - 1, witness: None })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
struct Binding {
    atoms: BTreeMap<Atom, Atom>,
    blobs: BTreeMap<Term, Term>,
}

impl Binding {
    fn bind(&mut self, x: &Atom, y: &Atom) -> bool {
        if x.sort() == Sort::Tag {
            return x == y;
        }
        if x.sort() != y.sort() {
            return false;
        }
        match self.atoms.get(x) {
            Some(z) => z == y,
            None => {
                self.atoms.insert(x.clone(), y.clone());
                true
            }
        }
    }

    fn with(&self, x: &Atom, y: &Atom) -> Option<Binding> {
        let mut b = self.clone();
        b.bind(x, y).then_some(b)
    }

    fn with_blob(&self, t: &Term, v: Term) -> Binding {
        let mut b = self.clone();
        b.blobs.insert(t.clone(), v);
        b
    }
}

/// How the intruder produced a message for an honest receiver.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Supply {
    Known(Term),
    Pair(Box<Supply>, Box<Supply>),
    Encrypt(Box<Supply>, Atom),
    /// A known term re-read under the theory as a term of another sort.
    Camouflage { from: Term, to: Term },
    /// A known term rewritten at leaves already identified by a camouflage.
    Spoof { from: Term, to: Term },
}

impl Supply {
    fn term(&self) -> Term {
        match self {
            Supply::Known(t) => t.clone(),
            Supply::Pair(l, r) => Term::pair(l.term(), r.term()),
            Supply::Encrypt(b, k) => Term::cipher(b.term(), k.clone()),
            Supply::Camouflage { to, .. } | Supply::Spoof { to, .. } => to.clone(),
        }
    }

    fn rewrites(&self, out: &mut Vec<(Term, Term)>) {
        match self {
            Supply::Known(_) => {}
            Supply::Pair(l, r) => {
                l.rewrites(out);
                r.rewrites(out);
            }
            Supply::Encrypt(b, _) => b.rewrites(out),
            Supply::Camouflage { from, to } | Supply::Spoof { from, to } => out.push((from.clone(), to.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Event {
    Spawn { slot: usize, role: usize, agents: BTreeMap<Atom, Atom>, recv: Option<(Binding, Supply)> },
    Recv { inst: usize, bind: Binding, supply: Supply },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Learned {
    Initial,
    Sent { inst: usize, index: usize },
    Split { whole: Term, left: bool },
    Decrypt(Term),
    Rewritten(Term),
}

#[derive(Debug, Clone, Default)]
struct Knowledge {
    terms: BTreeSet<Term>,
    sealed: Vec<Term>,
    learned: BTreeMap<Term, Learned>,
    eqs: BTreeSet<(Term, Term)>,
}

impl Knowledge {
    fn knows(&self, t: &Term) -> bool {
        self.terms.contains(t)
    }

    fn knows_key(&self, k: &Atom) -> bool {
        self.terms.contains(&Term::Atom(k.clone()))
    }

    fn learn(&mut self, t: Term, how: Learned) {
        let mut todo = VecDeque::from([(t, how)]);
        while let Some((t, how)) = todo.pop_front() {
            if !self.terms.insert(t.clone()) {
                continue;
            }
            self.learned.insert(t.clone(), how);
            match &t {
                Term::Concat(l, r) => {
                    todo.push_back(((**l).clone(), Learned::Split { whole: t.clone(), left: true }));
                    todo.push_back(((**r).clone(), Learned::Split { whole: t.clone(), left: false }));
                }
                Term::Encrypt(body, k) => {
                    if self.knows_key(&k.inverse()) {
                        todo.push_back(((**body).clone(), Learned::Decrypt(t.clone())));
                    } else {
                        self.sealed.push(t.clone());
                    }
                }
                Term::Atom(a) if a.is_key() => {
                    let (open, keep): (Vec<Term>, Vec<Term>) =
                        self.sealed.drain(..).partition(|c| c.cipher_key().is_some_and(|k| k.inverse() == *a));
                    self.sealed = keep;
                    for c in open {
                        let body = c.cipher_body().expect("sealed terms are ciphers").clone();
                        todo.push_back((body, Learned::Decrypt(c)));
                    }
                }
                Term::Atom(_) => {}
            }
        }
    }

    fn ciphers(&self) -> impl Iterator<Item = &Term> {
        self.terms.iter().filter(|t| t.is_cipher())
    }

    fn of_class(&self, c: SortClass) -> impl Iterator<Item = &Term> {
        self.terms.iter().filter(move |t| SortClass::of(t) == Some(c))
    }

    fn identified(&self, x: &Term, y: &Term) -> bool {
        self.eqs.contains(&(x.clone(), y.clone())) || self.eqs.contains(&(y.clone(), x.clone()))
    }
}

#[derive(Debug, Clone)]
struct Inst {
    role: usize,
    num: usize,
    bind: Binding,
    msgs: Vec<Term>,
}

#[derive(Debug, Clone)]
struct State {
    insts: Vec<Inst>,
    kn: Knowledge,
    spawned: Vec<usize>,
    used: BTreeSet<String>,
}

impl State {
    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for i in &self.insts {
            (i.role, &i.bind, i.msgs.len()).hash(&mut h);
        }
        self.spawned.hash(&mut h);
        self.kn.terms.hash(&mut h);
        self.kn.eqs.hash(&mut h);
        h.finish()
    }
}

struct Model<'a> {
    p: &'a Protocol,
    th: &'a ImplTheory,
    sc: &'a Scenario,
    goals: Vec<Goal>,
    roles: Vec<Role>,
    blobs: Vec<Vec<BTreeSet<Term>>>,
    generated: Vec<Vec<Atom>>,
    honest: Vec<String>,
    server: Option<String>,
    spy: String,
    initial: Knowledge,
    kp: BTreeSet<Atom>,
}

impl<'a> Model<'a> {
    fn new(p: &'a Protocol, th: &'a ImplTheory, sc: &'a Scenario) -> Result<Model<'a>, VerifyError> {
        let roles = p.roles();
        let goals = if sc.goals.is_empty() { p.goals.clone() } else { sc.goals.clone() };
        for g in &goals {
            if let Goal::NonInjectiveAgreement { claimant, partner, .. } | Goal::InjectiveAgreement { claimant, partner, .. } = g {
                for r in [claimant, partner] {
                    if !roles.iter().any(|x| &x.name == r) {
                        return Err(VerifyError::UnknownRole(r.clone()));
                    }
                }
            }
        }
        for sess in &sc.sessions {
            let r = roles.iter().find(|r| r.name == sess.role).ok_or_else(|| VerifyError::UnknownRole(sess.role.clone()))?;
            if let Some(a) = r.params.iter().find(|a| a.sort() == Sort::Agent && !sess.agents.contains_key(a.name())) {
                return Err(VerifyError::UnboundAgent { role: sess.role.clone(), agent: a.name().to_string() });
            }
        }
        let server = p.server().map(str::to_string);
        let honest: Vec<String> = p.agents.iter().filter(|a| Some(*a) != server.as_ref()).cloned().collect();
        let spy = if p.agents.iter().any(|a| a == "c") { "i".to_string() } else { "c".to_string() };
        let mut kp = BTreeSet::new();
        if p.pk {
            for a in p.agents.iter().chain([&spy]) {
                kp.insert(Atom::public_key(a));
            }
            kp.insert(Atom::private_key(&spy));
        }
        for s in &p.shared {
            for (a, b) in [(&s.a, &s.b), (&s.b, &s.a)] {
                if Some(b) == server.as_ref() {
                    let (u, v) = if &s.a == a { (spy.as_str(), b.as_str()) } else { (b.as_str(), spy.as_str()) };
                    kp.insert(shared_key_name(p, u, v));
                } else if server.is_none() {
                    for h in &honest {
                        kp.insert(shared_key_name(p, &spy, h));
                    }
                }
            }
        }
        let generated: Vec<Vec<Atom>> = roles.iter().map(|r| p.generated_by(&r.name)).collect();
        if sc.lost_key {
            for g in generated.iter().flatten().filter(|a| a.is_key()) {
                kp.insert(g.with_name(format!("{}_0", g.name())));
            }
        }
        let mut initial = Knowledge::default();
        let mut seed: Vec<Term> = p.agents.iter().chain([&spy]).map(|a| Term::Atom(Atom::agent(a))).collect();
        seed.push(Term::Atom(Atom::nonce(&format!("n_{spy}"))));
        seed.push(Term::Atom(Atom::timestamp(&format!("t_{spy}"))));
        for r in &roles {
            seed.extend(r.params.iter().filter(|a| a.sort() == Sort::Tag).map(|a| Term::Atom(a.clone())));
        }
        seed.extend(kp.iter().map(|k| Term::Atom(k.clone())));
        for t in seed {
            initial.learn(t, Learned::Initial);
        }
        let blobs = roles.iter().map(|r| blobs(p, r)).collect();
        Ok(Model { p, th, sc, goals, roles, blobs, generated, honest, server, spy, initial, kp })
    }

    fn initial_state(&self) -> State {
        let slots = if self.sc.sessions.is_empty() { self.roles.len() } else { self.sc.sessions.len() };
        State { insts: Vec::new(), kn: self.initial.clone(), spawned: vec![0; slots], used: BTreeSet::new() }
    }

    fn agent_params(&self, role: usize) -> Vec<Atom> {
        let r = &self.roles[role];
        let mut out = vec![r.agent.clone()];
        out.extend(r.params.iter().filter(|a| a.sort() == Sort::Agent && **a != r.agent).cloned());
        out
    }

    /// Principal assignments for a new instance. Honest principals other
    /// than the server are interchangeable, so a new one is only ever the
    /// first not yet used.
    fn agent_bindings(&self, st: &State, role: usize) -> Vec<BTreeMap<Atom, Atom>> {
        let vars = self.agent_params(role);
        let mut out = Vec::new();
        self.assign(&vars, 0, &mut BTreeMap::new(), &mut st.used.clone(), &mut out);
        out
    }

    fn assign(
        &self,
        vars: &[Atom],
        i: usize,
        cur: &mut BTreeMap<Atom, Atom>,
        used: &mut BTreeSet<String>,
        out: &mut Vec<BTreeMap<Atom, Atom>>,
    ) {
        let Some(x) = vars.get(i) else {
            out.push(cur.clone());
            return;
        };
        let mut cands: Vec<String> = Vec::new();
        if Some(x.name()) == self.server.as_deref() {
            cands.push(x.name().to_string());
        } else {
            let fresh = self.honest.iter().find(|h| !used.contains(*h));
            cands.extend(self.honest.iter().filter(|h| used.contains(*h) || Some(*h) == fresh).cloned());
            if i > 0 {
                cands.push(self.spy.clone());
            }
        }
        for c in cands {
            if cur.values().any(|v| v.name() == c) {
                continue;
            }
            let added = self.honest.contains(&c) && used.insert(c.clone());
            cur.insert(x.clone(), Atom::agent(&c));
            self.assign(vars, i + 1, cur, used, out);
            cur.remove(x);
            if added {
                used.remove(&c);
            }
        }
    }

    fn spawn_binding(&self, role: usize, agents: &BTreeMap<Atom, Atom>, num: usize) -> Binding {
        let r = &self.roles[role];
        let mut b = Binding { atoms: agents.clone(), blobs: BTreeMap::new() };
        for g in &self.generated[role] {
            b.atoms.insert(g.clone(), g.with_name(format!("{}_{num}", g.name())));
        }
        for x in &r.params {
            if x.sort() == Sort::Tag {
                b.atoms.insert(x.clone(), x.clone());
            }
            if !x.is_key() || b.atoms.contains_key(x) {
                continue;
            }
            let agent = |n: &str| b.atoms.get(&Atom::agent(n)).map(|a| a.name().to_string());
            let concrete = if let Some(o) = x.key_owner() {
                agent(o).map(|o| if x.name().starts_with("pk") { Atom::public_key(&o) } else { Atom::private_key(&o) })
            } else if let Some(decl) = self.p.shared.iter().find(|s| s.key == *x) {
                agent(&decl.a).zip(agent(&decl.b)).map(|(u, v)| shared_key_name(self.p, &u, &v))
            } else {
                None
            };
            if let Some(k) = concrete {
                b.atoms.insert(x.clone(), k);
            }
        }
        self.settle(role, &mut b);
        b
    }

    fn settle(&self, role: usize, b: &mut Binding) {
        for d in &self.roles[role].params {
            if b.atoms.contains_key(d) {
                continue;
            }
            if let Some(v) = derived_base(d).and_then(|base| b.atoms.get(&base)).map(|v| rederive(d, v)) {
                b.atoms.insert(d.clone(), v);
            }
        }
    }

    fn instantiate(&self, t: &Term, b: &Binding) -> Term {
        if let Some(v) = b.blobs.get(t) {
            return v.clone();
        }
        match t {
            Term::Atom(a) => Term::Atom(b.atoms.get(a).cloned().unwrap_or_else(|| a.clone())),
            Term::Concat(l, r) => Term::pair(self.instantiate(l, b), self.instantiate(r, b)),
            Term::Encrypt(body, k) => {
                Term::cipher(self.instantiate(body, b), b.atoms.get(k).cloned().unwrap_or_else(|| k.clone()))
            }
        }
    }

    fn is_ground(&self, t: &Term, b: &Binding, blobs: &BTreeSet<Term>) -> bool {
        if b.blobs.contains_key(t) {
            return true;
        }
        if blobs.contains(t) {
            return false;
        }
        match t {
            Term::Atom(a) => b.atoms.contains_key(a),
            Term::Concat(l, r) => self.is_ground(l, b, blobs) && self.is_ground(r, b, blobs),
            Term::Encrypt(body, k) => b.atoms.contains_key(k) && self.is_ground(body, b, blobs),
        }
    }

    fn transitions(&self, st: &State) -> Vec<Event> {
        let mut out = Vec::new();
        for (i, inst) in st.insts.iter().enumerate() {
            if self.waiting(inst) {
                for (bind, supply) in self.receive(st, inst) {
                    out.push(Event::Recv { inst: i, bind, supply });
                }
            }
        }
        for (slot, role, agents) in self.spawnable(st) {
            if self.roles[role].strand[0].sign == Sign::Plus {
                out.push(Event::Spawn { slot, role, agents, recv: None });
                continue;
            }
            let num = st.insts.len() + 1;
            let inst = Inst { role, num, bind: self.spawn_binding(role, &agents, num), msgs: Vec::new() };
            for r in self.receive(st, &inst) {
                out.push(Event::Spawn { slot, role, agents: agents.clone(), recv: Some(r) });
            }
        }
        out
    }

    /// `(slot, role, agents)` for every instance that may start next.
    fn spawnable(&self, st: &State) -> Vec<(usize, usize, BTreeMap<Atom, Atom>)> {
        if !self.sc.sessions.is_empty() {
            return self
                .sc
                .sessions
                .iter()
                .enumerate()
                .filter(|(i, _)| st.spawned[*i] == 0)
                .map(|(i, sess)| {
                    let role = self.role_index(&sess.role);
                    let agents = sess.agents.iter().map(|(x, y)| (Atom::agent(x), Atom::agent(y))).collect();
                    (i, role, agents)
                })
                .collect();
        }
        (0..self.roles.len())
            .filter(|r| st.spawned[*r] < self.sc.bound)
            .flat_map(|r| self.agent_bindings(st, r).into_iter().map(move |a| (r, r, a)))
            .collect()
    }

    fn waiting(&self, inst: &Inst) -> bool {
        self.roles[inst.role].strand.get(inst.msgs.len()).is_some_and(|n| n.sign == Sign::Minus)
    }

    fn apply(&self, st: &State, ev: &Event) -> State {
        let mut st = st.clone();
        match ev {
            Event::Spawn { slot, role, agents, recv } => {
                let num = st.insts.len() + 1;
                let bind = self.spawn_binding(*role, agents, num);
                st.insts.push(Inst { role: *role, num, bind, msgs: Vec::new() });
                st.spawned[*slot] += 1;
                st.used.extend(agents.values().map(|a| a.name().to_string()).filter(|a| self.honest.contains(a)));
                if let Some((bind, supply)) = recv {
                    self.deliver(&mut st, num - 1, bind, supply);
                }
            }
            Event::Recv { inst, bind, supply } => self.deliver(&mut st, *inst, bind, supply),
        }
        self.run_sends(&mut st);
        st
    }

    fn deliver(&self, st: &mut State, i: usize, bind: &Binding, supply: &Supply) {
        let mut rw = Vec::new();
        supply.rewrites(&mut rw);
        for (from, to) in rw {
            st.kn.eqs.extend(differing_leaves(&from, &to));
            st.kn.learn(to, Learned::Rewritten(from));
        }
        let inst = &mut st.insts[i];
        inst.bind = bind.clone();
        inst.msgs.push(supply.term());
    }

    fn run_sends(&self, st: &mut State) {
        for i in 0..st.insts.len() {
            loop {
                let inst = &st.insts[i];
                let role = &self.roles[inst.role];
                let idx = inst.msgs.len();
                match role.strand.get(idx) {
                    Some(n) if n.sign == Sign::Plus => {
                        let t = self.instantiate(&n.msg, &inst.bind);
                        st.insts[i].msgs.push(t.clone());
                        st.kn.learn(t, Learned::Sent { inst: i, index: idx });
                    }
                    _ => break,
                }
            }
        }
    }

    fn receive(&self, st: &State, inst: &Inst) -> Vec<(Binding, Supply)> {
        let idx = inst.msgs.len();
        let tpl = &self.roles[inst.role].strand[idx].msg;
        let blobs = &self.blobs[inst.role][idx];
        let mut out: Vec<(Binding, Supply)> = Vec::new();
        let mut seen = HashSet::new();
        for (mut b, s) in self.supply(st, inst, tpl, blobs, &inst.bind, self.sc.depth) {
            self.settle(inst.role, &mut b);
            if seen.insert((b.clone(), s.clone())) {
                out.push((b, s));
            }
        }
        out
    }

    fn placeholder_cipher(&self, inst: &Inst, blob: &Term, blobs: &BTreeSet<Term>) -> Term {
        let h = blobs.iter().position(|x| x == blob).unwrap_or(0);
        Term::cipher(
            Term::Atom(Atom::nonce(&format!("?m{}_{h}", inst.num))),
            Atom::key(&format!("?k{}_{h}", inst.num)),
        )
    }

    fn supply(&self, st: &State, inst: &Inst, t: &Term, blobs: &BTreeSet<Term>, b: &Binding, depth: usize) -> Vec<(Binding, Supply)> {
        if depth == 0 {
            return Vec::new();
        }
        if self.is_ground(t, b, blobs) {
            let g = self.instantiate(t, b);
            return self.supply_ground(&st.kn, &g).map(|s| vec![(b.clone(), s)]).unwrap_or_default();
        }
        let kn = &st.kn;
        let mut out = Vec::new();
        if blobs.contains(t) {
            for c in kn.ciphers() {
                out.push((b.with_blob(t, c.clone()), Supply::Known(c.clone())));
            }
            if let Term::Encrypt(body, k) = t {
                if let Some(kc) = b.atoms.get(k).filter(|kc| kn.knows_key(kc)) {
                    for (b2, s) in self.supply(st, inst, body, blobs, b, depth - 1) {
                        let s = Supply::Encrypt(Box::new(s), kc.clone());
                        out.push((b2.with_blob(t, s.term()), s));
                    }
                }
            }
            for class in self.th.partners(SortClass::Cipher) {
                for y in kn.of_class(class) {
                    let ph = self.placeholder_cipher(inst, t, blobs);
                    out.push((b.with_blob(t, ph.clone()), Supply::Camouflage { from: y.clone(), to: ph }));
                }
            }
            return out;
        }
        match t {
            Term::Atom(x) => {
                for y in kn.terms.iter().filter_map(Term::as_atom).filter(|y| y.sort() == x.sort()) {
                    if let Some(b2) = b.with(x, y) {
                        out.push((b2, Supply::Known(Term::Atom(y.clone()))));
                    }
                }
                if let Some(cx) = SortClass::of(t) {
                    for cy in self.th.partners(cx) {
                        for y in kn.of_class(cy) {
                            let ph = x.with_name(format!("?{}{}", x.name(), inst.num));
                            if let Some(b2) = b.with(x, &ph) {
                                out.push((b2, Supply::Camouflage { from: y.clone(), to: Term::Atom(ph) }));
                            }
                        }
                    }
                }
            }
            Term::Concat(l, r) => {
                for (b1, s1) in self.supply(st, inst, l, blobs, b, depth - 1) {
                    for (b2, s2) in self.supply(st, inst, r, blobs, &b1, depth - 1) {
                        out.push((b2, Supply::Pair(Box::new(s1.clone()), Box::new(s2))));
                    }
                }
            }
            Term::Encrypt(body, k) => {
                for c in kn.ciphers() {
                    let Term::Encrypt(cb, ck) = c else { continue };
                    let Some(mut b2) = b.with(k, ck) else { continue };
                    if self.match_struct(body, cb, blobs, &mut b2) {
                        out.push((b2, Supply::Known(c.clone())));
                    }
                }
                let keys: Vec<Atom> = match b.atoms.get(k) {
                    Some(kc) => kn.knows_key(kc).then(|| kc.clone()).into_iter().collect(),
                    None => kn.terms.iter().filter_map(Term::as_atom).filter(|a| a.is_key()).cloned().collect(),
                };
                for kc in keys {
                    let Some(b2) = b.with(k, &kc) else { continue };
                    for (b3, s) in self.supply(st, inst, body, blobs, &b2, depth - 1) {
                        out.push((b3, Supply::Encrypt(Box::new(s), kc.clone())));
                    }
                }
            }
        }
        out
    }

    fn supply_ground(&self, kn: &Knowledge, g: &Term) -> Option<Supply> {
        if kn.knows(g) {
            return Some(Supply::Known(g.clone()));
        }
        match g {
            Term::Concat(l, r) => {
                Some(Supply::Pair(Box::new(self.supply_ground(kn, l)?), Box::new(self.supply_ground(kn, r)?)))
            }
            Term::Encrypt(body, k) => {
                if kn.knows_key(k) {
                    if let Some(s) = self.supply_ground(kn, body) {
                        return Some(Supply::Encrypt(Box::new(s), k.clone()));
                    }
                }
                kn.ciphers().find_map(|c| {
                    let leaves = differing_leaves(c, g);
                    (c.cipher_key() == Some(k) && !leaves.is_empty() && leaves.iter().all(|(x, y)| kn.identified(x, y)))
                        .then(|| Supply::Spoof { from: c.clone(), to: g.clone() })
                })
            }
            Term::Atom(_) => kn.eqs.iter().find_map(|(x, y)| {
                let other = if y == g { x } else if x == g { y } else { return None };
                kn.knows(other).then(|| Supply::Spoof { from: other.clone(), to: g.clone() })
            }),
        }
    }

    fn match_struct(&self, t: &Term, act: &Term, blobs: &BTreeSet<Term>, b: &mut Binding) -> bool {
        if let Some(v) = b.blobs.get(t) {
            return v == act;
        }
        if blobs.contains(t) {
            if !act.is_cipher() && !self.th.partners(SortClass::Cipher).iter().any(|c| SortClass::of(act) == Some(*c)) {
                return false;
            }
            b.blobs.insert(t.clone(), act.clone());
            return true;
        }
        match (t, act) {
            (Term::Atom(x), Term::Atom(y)) => b.bind(x, y),
            (Term::Concat(l, r), Term::Concat(l2, r2)) => {
                self.match_struct(l, l2, blobs, b) && self.match_struct(r, r2, blobs, b)
            }
            (Term::Encrypt(body, k), Term::Encrypt(body2, k2)) => b.bind(k, k2) && self.match_struct(body, body2, blobs, b),
            _ => false,
        }
    }

    fn complete(&self, inst: &Inst) -> bool {
        inst.msgs.len() == self.roles[inst.role].len()
    }

    fn honest_agents(&self, inst: &Inst) -> bool {
        self.agent_params(inst.role).iter().all(|x| inst.bind.atoms.get(x).is_some_and(|v| v.name() != self.spy))
    }

    fn role_index(&self, name: &str) -> usize {
        self.roles.iter().position(|r| r.name == name).expect("role names are checked up front")
    }

    fn violated(&self, st: &State) -> Option<Goal> {
        self.goals.iter().find(|g| self.goal_fails(st, g)).cloned()
    }

    fn goal_fails(&self, st: &State, g: &Goal) -> bool {
        match g {
            Goal::Secrecy { atom } => st.insts.iter().any(|i| {
                self.complete(i)
                    && self.honest_agents(i)
                    && self.roles[i.role].params.contains(atom)
                    && i.bind.atoms.get(atom).is_some_and(|v| st.kn.knows(&Term::Atom(v.clone())))
            }),
            Goal::NonInjectiveAgreement { claimant, partner, on } | Goal::InjectiveAgreement { claimant, partner, on } => {
                let (cr, pr) = (self.role_index(claimant), self.role_index(partner));
                let claims: Vec<&Inst> =
                    st.insts.iter().filter(|i| i.role == cr && self.complete(i) && self.honest_agents(i)).collect();
                let cands: Vec<Vec<usize>> = claims
                    .iter()
                    .map(|c| {
                        st.insts
                            .iter()
                            .enumerate()
                            .filter(|(_, j)| {
                                j.role == pr
                                    && j.num != c.num
                                    && on.iter().all(|a| matches!((c.bind.atoms.get(a), j.bind.atoms.get(a)), (Some(x), Some(y)) if x == y))
                            })
                            .map(|(k, _)| k)
                            .collect()
                    })
                    .collect();
                if matches!(g, Goal::InjectiveAgreement { .. }) {
                    !distinct_representatives(&cands, 0, &mut BTreeSet::new())
                } else {
                    cands.iter().any(Vec::is_empty)
                }
            }
        }
    }

    fn reconstruct(&self, events: &[Event]) -> Result<Bundle, VerifyError> {
        if events.is_empty() {
            return Err(VerifyError::Reconstruction("empty witness".into()));
        }
        let mut st = self.initial_state();
        let mut receipts = Vec::new();
        for ev in events {
            match ev {
                Event::Spawn { recv: Some((_, s)), .. } => receipts.push((st.insts.len(), 0, s.clone())),
                Event::Recv { inst, supply, .. } => receipts.push((*inst, st.insts[*inst].msgs.len(), supply.clone())),
                Event::Spawn { .. } => {}
            }
            st = self.apply(&st, ev);
        }
        let mut b = Bundle::new();
        for inst in &st.insts {
            let role = &self.roles[inst.role];
            let nodes: Vec<Node> = inst.msgs.iter().zip(&role.strand).map(|(m, n)| Node { sign: n.sign, msg: m.clone() }).collect();
            let alpha = inst.bind.atoms.iter().filter(|(k, _)| role.params.contains(*k)).map(|(k, v)| (k.clone(), v.clone())).collect();
            let owner = inst.bind.atoms[&role.agent].name().to_string();
            b.add_honest(&owner, RoleInstance { role: role.name.clone(), upto: nodes.len(), alpha }, nodes);
        }
        let mut builder = Builder { b, kn: &st.kn, ports: BTreeMap::new(), spy: &self.spy };
        for (inst, idx, s) in &receipts {
            builder.feed(s, NodeId::new(*inst, idx + 1));
        }
        let b = builder.b;
        let mut problems: Vec<String> = check_bundle(&b).iter().map(|v| v.to_string()).collect();
        problems.extend(check_penetrator(&b, self.th, &self.kp).iter().map(|v| v.to_string()));
        if !problems.is_empty() {
            return Err(VerifyError::Reconstruction(problems.join("; ")));
        }
        Ok(b)
    }
}

fn distinct_representatives(cands: &[Vec<usize>], i: usize, taken: &mut BTreeSet<usize>) -> bool {
    let Some(cs) = cands.get(i) else { return true };
    for &c in cs {
        if taken.insert(c) {
            if distinct_representatives(cands, i + 1, taken) {
                return true;
            }
            taken.remove(&c);
        }
    }
    false
}

struct Builder<'k> {
    b: Bundle,
    kn: &'k Knowledge,
    ports: BTreeMap<Term, NodeId>,
    spy: &'k str,
}

impl Builder<'_> {
    fn pen(&mut self, kind: PenKind, nodes: Vec<Node>) -> usize {
        self.b.add_strand(StrandKind::Pen(kind), self.spy, nodes)
    }

    fn feed(&mut self, s: &Supply, to: NodeId) {
        let from = self.produce(s);
        self.b.add_edge(from, to);
    }

    fn feed_term(&mut self, t: &Term, to: NodeId) {
        let from = self.source(t);
        self.b.add_edge(from, to);
    }

    fn produce(&mut self, s: &Supply) -> NodeId {
        match s {
            Supply::Known(t) | Supply::Camouflage { to: t, .. } | Supply::Spoof { to: t, .. } => self.source(t),
            Supply::Pair(l, r) => {
                let i = self.pen(PenKind::C, vec![Node::recv(l.term()), Node::recv(r.term()), Node::send(s.term())]);
                self.feed(l, NodeId::new(i, 1));
                self.feed(r, NodeId::new(i, 2));
                NodeId::new(i, 3)
            }
            Supply::Encrypt(body, k) => {
                let key = Term::Atom(k.clone());
                let i = self.pen(PenKind::E, vec![Node::recv(key.clone()), Node::recv(body.term()), Node::send(s.term())]);
                self.feed_term(&key, NodeId::new(i, 1));
                self.feed(body, NodeId::new(i, 2));
                NodeId::new(i, 3)
            }
        }
    }

    /// A positive node carrying `t` with no outgoing edge yet; a used one is
    /// duplicated through a T strand.
    fn source(&mut self, t: &Term) -> NodeId {
        if let Some(&p) = self.ports.get(t) {
            let Some(pos) = self.b.edges.iter().position(|(f, _)| *f == p) else { return p };
            let i = self.pen(PenKind::T, vec![Node::recv(t.clone()), Node::send(t.clone()), Node::send(t.clone())]);
            let target = self.b.edges[pos].1;
            self.b.edges[pos] = (p, NodeId::new(i, 1));
            self.b.add_edge(NodeId::new(i, 2), target);
            self.ports.insert(t.clone(), NodeId::new(i, 3));
            return NodeId::new(i, 3);
        }
        let how = self.kn.learned.get(t).cloned().unwrap_or(Learned::Initial);
        let p = match how {
            Learned::Initial => {
                let kind = if t.as_atom().is_some_and(Atom::is_key) { PenKind::K } else { PenKind::M };
                NodeId::new(self.pen(kind, vec![Node::send(t.clone())]), 1)
            }
            Learned::Sent { inst, index } => NodeId::new(inst, index + 1),
            Learned::Split { whole, left } => {
                let Term::Concat(l, r) = &whole else { unreachable!("split of a non-pair") };
                let i = self.pen(PenKind::S, vec![Node::recv(whole.clone()), Node::send((**l).clone()), Node::send((**r).clone())]);
                self.feed_term(&whole, NodeId::new(i, 1));
                NodeId::new(i, if left { 2 } else { 3 })
            }
            Learned::Decrypt(c) => {
                let Term::Encrypt(body, k) = &c else { unreachable!("decryption of a non-cipher") };
                let kinv = Term::Atom(k.inverse());
                let i = self.pen(PenKind::D, vec![Node::recv(kinv.clone()), Node::recv(c.clone()), Node::send((**body).clone())]);
                self.feed_term(&kinv, NodeId::new(i, 1));
                self.feed_term(&c, NodeId::new(i, 2));
                NodeId::new(i, 3)
            }
            Learned::Rewritten(from) => {
                let i = self.pen(PenKind::I, vec![Node::recv(from.clone()), Node::send(t.clone())]);
                self.feed_term(&from, NodeId::new(i, 1));
                NodeId::new(i, 2)
            }
        };
        self.ports.insert(t.clone(), p);
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;
    use crate::protocol::parse_protocol;

    fn t(s: &str) -> Term {
        s.parse().unwrap()
    }

    #[test]
    fn closure_opens_ciphers_once_the_key_arrives() {
        let mut kn = Knowledge::default();
        kn.learn(t("{n:x; a:b}k:k"), Learned::Initial);
        assert!(!kn.knows(&t("n:x")));
        kn.learn(t("k:k"), Learned::Initial);
        assert!(kn.knows(&t("n:x")) && kn.knows(&t("a:b")));
        assert_eq!(kn.learned[&t("n:x; a:b")], Learned::Decrypt(t("{n:x; a:b}k:k")));
        kn.learn(t("{n:y}k:pk(b)"), Learned::Initial);
        assert!(!kn.knows(&t("n:y")));
        kn.learn(t("k:sk(b)"), Learned::Initial);
        assert!(kn.knows(&t("n:y")));
    }

    #[test]
    fn spy_starts_with_public_keys_and_its_own() {
        let p = parse_protocol(corpus::NSPK).unwrap();
        let sc = Scenario::default();
        let th = ImplTheory::free();
        let m = Model::new(&p, &th, &sc).unwrap();
        assert_eq!(m.spy, "c");
        let st = m.initial_state();
        for k in ["k:pk(a)", "k:pk(b)", "k:pk(c)", "k:sk(c)", "a:a", "a:b", "n:n_c"] {
            assert!(st.kn.knows(&t(k)), "{k}");
        }
        assert!(!st.kn.knows(&t("k:sk(a)")));
        assert!(m.kp.contains(&Atom::private_key("c")));
    }

    #[test]
    fn fingerprints_ignore_how_knowledge_was_learned() {
        let p = parse_protocol(corpus::NSPK).unwrap();
        let (sc, th) = (Scenario::default(), ImplTheory::free());
        let m = Model::new(&p, &th, &sc).unwrap();
        let a = m.initial_state();
        let mut b = a.clone();
        b.kn.learned.clear();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.kn.learn(t("n:fresh"), Learned::Initial);
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn unknown_session_role_is_rejected() {
        let p = parse_protocol(corpus::NSPK).unwrap();
        let sc = Scenario { sessions: vec![Session { role: "z".into(), agents: BTreeMap::new() }], ..Scenario::default() };
        assert!(matches!(verify(&p, &ImplTheory::free(), &sc), Err(VerifyError::UnknownRole(_))));
        let sc = Scenario { sessions: vec![Session { role: "a".into(), agents: BTreeMap::new() }], ..Scenario::default() };
        assert!(matches!(verify(&p, &ImplTheory::free(), &sc), Err(VerifyError::UnboundAgent { .. })));
    }

    #[test]
    fn tiny_cap_is_a_resource_limit() {
        let p = parse_protocol(corpus::NSPK).unwrap();
        let sc = Scenario { node_cap: 3, ..Scenario::default() };
        assert!(matches!(verify(&p, &ImplTheory::free(), &sc), Err(VerifyError::ResourceLimit { .. })));
    }
}
