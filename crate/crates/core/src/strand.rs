//! Strands, roles and bundles, with origination extended by the equational
//! constraints that I-strands introduce.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::term::{Atom, Sort, Term};
use crate::theory::{impl_equal, ImplTheory};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StrandError {
    #[error("step {index} out of range for role `{role}` of length {len}")]
    BadIndex { role: String, index: usize, len: usize },
    #[error("renaming is not total on the parameters of `{role}`: missing {missing}")]
    PartialRenaming { role: String, missing: Atom },
    #[error("renaming changes the sort of {0}")]
    SortChange(Atom),
    #[error("node {0} is not in the bundle")]
    NodeNotInBundle(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sign {
    #[serde(rename = "+")]
    Plus,
    #[serde(rename = "-")]
    Minus,
}

impl fmt::Display for Sign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sign::Plus => "+",
            Sign::Minus => "-",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Node {
    pub sign: Sign,
    #[serde(rename = "term")]
    pub msg: Term,
}

impl Node {
    pub fn send(msg: Term) -> Node {
        Node { sign: Sign::Plus, msg }
    }
    pub fn recv(msg: Term) -> Node {
        Node { sign: Sign::Minus, msg }
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.sign, self.msg)
    }
}

/// `⟨s, i⟩` with a 1-based index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId {
    pub strand: usize,
    pub index: usize,
}

impl NodeId {
    pub fn new(strand: usize, index: usize) -> NodeId {
        NodeId { strand, index }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{},{}>", self.strand, self.index)
    }
}

/// A role: the node templates of one participant, named after the agent
/// variable that plays it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Role {
    pub name: String,
    pub agent: Atom,
    pub strand: Vec<Node>,
    pub params: BTreeSet<Atom>,
}

impl Role {
    pub fn len(&self) -> usize {
        self.strand.len()
    }
    pub fn is_empty(&self) -> bool {
        self.strand.is_empty()
    }
}

/// `r[i, α]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleInstance {
    pub role: String,
    pub upto: usize,
    pub alpha: BTreeMap<Atom, Atom>,
}

pub fn instantiate(r: &Role, i: usize, alpha: &BTreeMap<Atom, Atom>) -> Result<Vec<Node>, StrandError> {
    if i == 0 || i > r.len() {
        return Err(StrandError::BadIndex { role: r.name.clone(), index: i, len: r.len() });
    }
    if let Some(missing) = r.params.iter().find(|p| !alpha.contains_key(*p)) {
        return Err(StrandError::PartialRenaming { role: r.name.clone(), missing: missing.clone() });
    }
    if let Some((k, _)) = alpha.iter().find(|(k, v)| k.sort() != v.sort()) {
        return Err(StrandError::SortChange(k.clone()));
    }
    Ok(r.strand[..i].iter().map(|n| Node { sign: n.sign, msg: n.msg.rename(alpha) }).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PenKind {
    M,
    K,
    T,
    F,
    C,
    S,
    E,
    D,
    I,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrandKind {
    Honest,
    #[serde(untagged)]
    Pen(PenKind),
}

impl StrandKind {
    pub fn is_honest(self) -> bool {
        self == StrandKind::Honest
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strand {
    pub kind: StrandKind,
    pub agent: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<RoleInstance>,
    pub nodes: Vec<Node>,
}

/// Strands plus communication edges; `⇒` is implicit between consecutive
/// nodes of a strand.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bundle {
    pub strands: Vec<Strand>,
    pub edges: Vec<(NodeId, NodeId)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "kebab-case")]
pub enum Violation {
    UnknownNode { node: NodeId },
    EmptyStrand { strand: usize },
    EdgeSign { from: NodeId, to: NodeId },
    MessageMismatch { from: NodeId, to: NodeId },
    MissingSender { node: NodeId },
    MultipleSenders { node: NodeId },
    Cycle { node: NodeId },
    BadPenetrator { strand: usize, kind: PenKind, reason: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownNode { node } => write!(f, "edge endpoint {node} is not a node"),
            Violation::EmptyStrand { strand } => write!(f, "strand {strand} has no nodes"),
            Violation::EdgeSign { from, to } => write!(f, "edge {from} -> {to} must go from + to -"),
            Violation::MessageMismatch { from, to } => write!(f, "edge {from} -> {to} carries different messages"),
            Violation::MissingSender { node } => write!(f, "missing-sender at {node}"),
            Violation::MultipleSenders { node } => write!(f, "several senders for {node}"),
            Violation::Cycle { node } => write!(f, "cycle through {node}"),
            Violation::BadPenetrator { strand, kind, reason } => write!(f, "{kind:?}-strand {strand}: {reason}"),
        }
    }
}

impl Bundle {
    pub fn new() -> Bundle {
        Bundle::default()
    }

    pub fn add_strand(&mut self, kind: StrandKind, agent: &str, nodes: Vec<Node>) -> usize {
        self.strands.push(Strand { kind, agent: agent.to_string(), role: None, nodes });
        self.strands.len() - 1
    }

    pub fn add_honest(&mut self, agent: &str, role: RoleInstance, nodes: Vec<Node>) -> usize {
        self.strands.push(Strand { kind: StrandKind::Honest, agent: agent.to_string(), role: Some(role), nodes });
        self.strands.len() - 1
    }

    pub fn add_edge(&mut self, from: NodeId, to: NodeId) {
        self.edges.push((from, to));
    }

    pub fn contains(&self, v: NodeId) -> bool {
        v.index >= 1 && self.strands.get(v.strand).is_some_and(|s| v.index <= s.nodes.len())
    }

    pub fn node(&self, v: NodeId) -> &Node {
        &self.strands[v.strand].nodes[v.index - 1]
    }

    pub fn msg(&self, v: NodeId) -> &Term {
        &self.node(v).msg
    }

    pub fn sign(&self, v: NodeId) -> Sign {
        self.node(v).sign
    }

    pub fn strand(&self, v: NodeId) -> &Strand {
        &self.strands[v.strand]
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.strands
            .iter()
            .enumerate()
            .flat_map(|(s, st)| (1..=st.nodes.len()).map(move |i| NodeId::new(s, i)))
    }

    pub fn honest_strands(&self) -> impl Iterator<Item = usize> + '_ {
        self.strands.iter().enumerate().filter(|(_, s)| s.kind.is_honest()).map(|(i, _)| i)
    }

    pub fn sender(&self, v: NodeId) -> Option<NodeId> {
        self.edges.iter().find(|(_, to)| *to == v).map(|(from, _)| *from)
    }

    pub fn receivers(&self, v: NodeId) -> Vec<NodeId> {
        self.edges.iter().filter(|(from, _)| *from == v).map(|(_, to)| *to).collect()
    }

    fn direct_preds(&self, v: NodeId) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = self.edges.iter().filter(|(_, to)| *to == v).map(|(f, _)| *f).collect();
        if v.index > 1 {
            out.push(NodeId::new(v.strand, v.index - 1));
        }
        out
    }

    /// `{ u : u ⪯_B v }`.
    pub fn ancestors(&self, v: NodeId) -> BTreeSet<NodeId> {
        let mut seen = BTreeSet::from([v]);
        let mut todo = vec![v];
        while let Some(x) = todo.pop() {
            for p in self.direct_preds(x) {
                if self.contains(p) && seen.insert(p) {
                    todo.push(p);
                }
            }
        }
        seen
    }

    pub fn precedes_eq(&self, u: NodeId, v: NodeId) -> bool {
        self.ancestors(v).contains(&u)
    }

    /// A topological order of all nodes (stable: by strand then index among
    /// ready nodes), or the first node found on a cycle.
    pub fn topological_order(&self) -> Result<Vec<NodeId>, NodeId> {
        let ids: Vec<NodeId> = self.node_ids().collect();
        let mut indeg: BTreeMap<NodeId, usize> = ids.iter().map(|v| (*v, 0)).collect();
        let mut succ: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for &v in &ids {
            for p in self.direct_preds(v) {
                if indeg.contains_key(&p) {
                    *indeg.get_mut(&v).unwrap() += 1;
                    succ.entry(p).or_default().push(v);
                }
            }
        }
        let mut ready: BTreeSet<NodeId> = indeg.iter().filter(|(_, d)| **d == 0).map(|(v, _)| *v).collect();
        let mut out = Vec::with_capacity(ids.len());
        while let Some(v) = ready.pop_first() {
            out.push(v);
            for w in succ.get(&v).into_iter().flatten() {
                let d = indeg.get_mut(w).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.insert(*w);
                }
            }
        }
        if out.len() == ids.len() {
            Ok(out)
        } else {
            Err(*indeg.iter().find(|(v, d)| **d > 0 && !out.contains(v)).unwrap().0)
        }
    }

    pub fn last(&self, strand: usize) -> NodeId {
        NodeId::new(strand, self.strands[strand].nodes.len())
    }
}

/// Graph conditions: edges between existing nodes, `+ → −` with equal
/// messages, one sender per negative node, acyclicity.
pub fn check_bundle(b: &Bundle) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, s) in b.strands.iter().enumerate() {
        if s.nodes.is_empty() {
            out.push(Violation::EmptyStrand { strand: i });
        }
    }
    let mut senders: BTreeMap<NodeId, usize> = BTreeMap::new();
    for &(from, to) in &b.edges {
        let mut ok = true;
        for v in [from, to] {
            if !b.contains(v) {
                out.push(Violation::UnknownNode { node: v });
                ok = false;
            }
        }
        if !ok {
            continue;
        }
        if b.sign(from) != Sign::Plus || b.sign(to) != Sign::Minus {
            out.push(Violation::EdgeSign { from, to });
        }
        if b.msg(from) != b.msg(to) {
            out.push(Violation::MessageMismatch { from, to });
        }
        *senders.entry(to).or_default() += 1;
    }
    for v in b.node_ids() {
        if b.sign(v) == Sign::Minus {
            match senders.get(&v).copied().unwrap_or(0) {
                0 => out.push(Violation::MissingSender { node: v }),
                1 => {}
                _ => out.push(Violation::MultipleSenders { node: v }),
            }
        }
    }
    if let Err(node) = b.topological_order() {
        out.push(Violation::Cycle { node });
    }
    out
}

fn shape(nodes: &[Node]) -> String {
    nodes.iter().map(|n| n.sign.to_string()).collect()
}

/// Penetrator strands against their templates; I-strands re-validated under
/// `th` with `chosen` taken from what originates at their positive node.
pub fn check_penetrator(b: &Bundle, th: &ImplTheory, penetrator_keys: &BTreeSet<Atom>) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, s) in b.strands.iter().enumerate() {
        let StrandKind::Pen(kind) = s.kind else { continue };
        if let Err(reason) = check_template(b, i, kind, th, penetrator_keys) {
            out.push(Violation::BadPenetrator { strand: i, kind, reason });
        }
    }
    out
}

fn check_template(
    b: &Bundle,
    i: usize,
    kind: PenKind,
    th: &ImplTheory,
    kp: &BTreeSet<Atom>,
) -> Result<(), String> {
    let n = &b.strands[i].nodes;
    let m: Vec<&Term> = n.iter().map(|x| &x.msg).collect();
    let want = match kind {
        PenKind::M | PenKind::K => "+",
        PenKind::T => "-++",
        PenKind::F => "-",
        PenKind::C => "--+",
        PenKind::S => "-++",
        PenKind::E | PenKind::D => "--+",
        PenKind::I => "-+",
    };
    if shape(n) != want {
        return Err(format!("expected sign pattern {want}, got {}", shape(n)));
    }
    let fail = |what: &str| Err(what.to_string());
    match kind {
        PenKind::M => match m[0].as_atom().map(Atom::sort) {
            Some(Sort::Agent | Sort::Nonce | Sort::Timestamp | Sort::Tag) => Ok(()),
            _ => fail("payload must be an agent, nonce, timestamp or tag atom"),
        },
        PenKind::K => match m[0].as_atom() {
            Some(k) if kp.contains(k) => Ok(()),
            _ => fail("key is not a penetrator key"),
        },
        PenKind::T => (m[0] == m[1] && m[1] == m[2]).then_some(()).ok_or("copies differ".into()),
        PenKind::F => Ok(()),
        PenKind::C => (*m[2] == Term::pair(m[0].clone(), m[1].clone())).then_some(()).ok_or("not g;h".into()),
        PenKind::S => (*m[0] == Term::pair(m[1].clone(), m[2].clone())).then_some(()).ok_or("not g;h".into()),
        PenKind::E => match (m[0].as_atom(), m[2]) {
            (Some(k), Term::Encrypt(body, k2)) if k == k2 && **body == *m[1] => Ok(()),
            _ => fail("not <-k, -m, +{m}k>"),
        },
        PenKind::D => match (m[0].as_atom(), m[1]) {
            (Some(kinv), Term::Encrypt(body, k)) if *kinv == k.inverse() && **body == *m[2] => Ok(()),
            _ => fail("not <-k', -{m}k, +m>"),
        },
        PenKind::I => {
            if m[0] == m[1] {
                return fail("camouflaged and spoofed messages are equal");
            }
            let out = NodeId::new(i, 2);
            let chosen: BTreeSet<Term> =
                candidate_origins(m[1]).into_iter().filter(|t| originates(b, out, t)).collect();
            let eqs = eq_constraints_before(b, out);
            match impl_equal(m[0], m[1], th, &chosen, &eqs) {
                Some(_) => Ok(()),
                None => fail("implementations cannot coincide under the theory"),
            }
        }
    }
}

/// Atoms and ciphers occurring in `t`, outermost first.
pub fn candidate_origins(t: &Term) -> Vec<Term> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    let mut todo = VecDeque::from([t.clone()]);
    while let Some(x) = todo.pop_front() {
        match &x {
            Term::Concat(l, r) => {
                todo.push_back((**l).clone());
                todo.push_back((**r).clone());
                continue;
            }
            Term::Encrypt(body, k) => {
                todo.push_back((**body).clone());
                todo.push_back(Term::Atom(k.clone()));
            }
            Term::Atom(_) => {}
        }
        if seen.insert(x.clone()) {
            out.push(x);
        }
    }
    out
}

/// Reduce a camouflage pair to the leaf pairs where the two messages
/// actually differ, descending while their structure agrees.
pub fn differing_leaves(x: &Term, y: &Term) -> Vec<(Term, Term)> {
    let mut out = Vec::new();
    leaves_into(x, y, &mut out);
    out
}

fn leaves_into(x: &Term, y: &Term, out: &mut Vec<(Term, Term)>) {
    if x == y {
        return;
    }
    match (x, y) {
        (Term::Concat(..), Term::Concat(..)) => {
            let (fx, fy) = (crate::term::flatten(x), crate::term::flatten(y));
            if fx.len() == fy.len() {
                for (a, b) in fx.iter().zip(&fy) {
                    leaves_into(a, b, out);
                }
                return;
            }
        }
        (Term::Encrypt(bx, kx), Term::Encrypt(by, ky)) if kx == ky => return leaves_into(bx, by, out),
        _ => {}
    }
    out.push((x.clone(), y.clone()));
}

fn eq_pairs(b: &Bundle, v: NodeId, strict: bool) -> BTreeSet<(Term, Term)> {
    let anc = b.ancestors(v);
    let mut out = BTreeSet::new();
    for (i, s) in b.strands.iter().enumerate() {
        if s.kind != StrandKind::Pen(PenKind::I) || s.nodes.len() != 2 {
            continue;
        }
        let spoof = NodeId::new(i, 2);
        if anc.contains(&spoof) && !(strict && spoof == v) {
            out.extend(differing_leaves(&s.nodes[0].msg, &s.nodes[1].msg));
        }
    }
    out
}

/// `EQ(v)`: camouflage pairs of I-strands whose output precedes or equals
/// `v`, reduced to differing leaves.
pub fn eq_constraints(b: &Bundle, v: NodeId) -> Result<BTreeSet<(Term, Term)>, StrandError> {
    if !b.contains(v) {
        return Err(StrandError::NodeNotInBundle(v));
    }
    Ok(eq_pairs(b, v, false))
}

/// `EQ(v)` without the I-strand that ends at `v` itself.
pub fn eq_constraints_before(b: &Bundle, v: NodeId) -> BTreeSet<(Term, Term)> {
    eq_pairs(b, v, true)
}

/// `m` originates at `v`: positive, occurs, absent from earlier nodes of the
/// strand, and not hidden inside an earlier camouflage pair.
pub fn originates(b: &Bundle, v: NodeId, m: &Term) -> bool {
    if !b.contains(v) || b.sign(v) != Sign::Plus || !m.occurs_in(b.msg(v)) {
        return false;
    }
    if (1..v.index).any(|j| m.occurs_in(b.msg(NodeId::new(v.strand, j)))) {
        return false;
    }
    eq_constraints_before(b, v).iter().all(|(x, y)| !m.occurs_in(x) && !m.occurs_in(y))
}

pub fn origins(b: &Bundle, m: &Term) -> Vec<NodeId> {
    b.node_ids().filter(|v| originates(b, *v, m)).collect()
}

pub fn uniquely_originates(b: &Bundle, m: &Term) -> Option<NodeId> {
    match origins(b, m).as_slice() {
        [v] => Some(*v),
        _ => None,
    }
}
