//! Canonical bundles, protocol sections and optimal coverages.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnosis::{agent_knowledge, AgentKnowledge};
use crate::protocol::{derived_base, identity_on, rederive, Protocol};
use crate::strand::{check_bundle, instantiate, Bundle, Node, NodeId, Role, RoleInstance, Sign, Strand};
use crate::term::{analz_all, Atom, Sort, Term};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoverageError {
    #[error("unmatched-message: {0}")]
    UnmatchedMessage(String),
    #[error("unknown-role: honest strand {strand} matches no role")]
    UnknownRole { strand: usize },
}

/// The intended run: one complete instance of every role, identity renaming.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CanonicalBundle {
    pub protocol: Protocol,
    pub bundle: Bundle,
    pub roles: Vec<Role>,
}

impl CanonicalBundle {
    /// Strand ids coincide with role positions.
    pub fn strand_of(&self, role: &str) -> Option<usize> {
        self.roles.iter().position(|r| r.name == role)
    }

    pub fn role(&self, name: &str) -> Option<&Role> {
        self.roles.iter().find(|r| r.name == name)
    }

    pub fn knowledge(&self, strand: usize) -> AgentKnowledge {
        let role = &self.roles[strand];
        let (tk, keys) = self.protocol.initial_knowledge(role);
        agent_knowledge(&self.bundle.strands[strand].nodes, &tk, &keys)
    }

    /// Every message of the canonical run.
    pub fn messages(&self) -> BTreeSet<Term> {
        self.bundle.strands.iter().flat_map(|s| s.nodes.iter().map(|n| n.msg.clone())).collect()
    }
}

pub fn canonical_bundle(p: &Protocol) -> Result<CanonicalBundle, CoverageError> {
    let roles = p.roles();
    let mut b = Bundle::new();
    for r in &roles {
        let alpha = identity_on(&r.params);
        let nodes = instantiate(r, r.len(), &alpha).map_err(|e| CoverageError::UnmatchedMessage(e.to_string()))?;
        b.add_honest(&r.name, RoleInstance { role: r.name.clone(), upto: r.len(), alpha }, nodes);
    }
    let mut count: BTreeMap<&str, usize> = BTreeMap::new();
    for m in &p.msgs {
        let from = roles.iter().position(|r| r.name == m.from);
        let to = roles.iter().position(|r| r.name == m.to);
        let (Some(f), Some(t)) = (from, to) else {
            return Err(CoverageError::UnmatchedMessage(format!("message {} has no sender or receiver role", m.index)));
        };
        let fi = {
            let c = count.entry(&m.from).or_default();
            *c += 1;
            *c
        };
        let ti = {
            let c = count.entry(&m.to).or_default();
            *c += 1;
            *c
        };
        b.add_edge(NodeId::new(f, fi), NodeId::new(t, ti));
    }
    if let Some(v) = check_bundle(&b).first() {
        return Err(CoverageError::UnmatchedMessage(v.to_string()));
    }
    Ok(CanonicalBundle { protocol: p.clone(), bundle: b, roles })
}

/// Template ciphers the role cannot open where it first meets them; a
/// matching strand may carry anything in their place.
pub(crate) fn blobs(p: &Protocol, role: &Role) -> Vec<BTreeSet<Term>> {
    let (tk, keys) = p.initial_knowledge(role);
    let kn = agent_knowledge(&role.strand, &tk, &keys);
    let mut acc = BTreeSet::new();
    let mut out = Vec::new();
    for (i, n) in role.strand.iter().enumerate() {
        if n.sign == Sign::Minus {
            let (k, _) = kn.before(i + 1);
            let (seen, final_keys) = analz_all(std::slice::from_ref(&n.msg), &k);
            acc.extend(
                seen.into_iter()
                    .filter(|t| matches!(t, Term::Encrypt(_, key) if !final_keys.contains(&key.inverse()))),
            );
        }
        out.push(acc.clone());
    }
    out
}

#[derive(Default, Clone)]
struct Binding {
    atoms: BTreeMap<Atom, Atom>,
    blobs: BTreeMap<Term, Term>,
}

impl Binding {
    fn bind(&mut self, x: &Atom, y: &Atom) -> bool {
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
}

fn match_term(tpl: &Term, act: &Term, blobs: &BTreeSet<Term>, b: &mut Binding) -> bool {
    if blobs.contains(tpl) {
        return match b.blobs.get(tpl) {
            Some(prev) => prev == act,
            None => {
                b.blobs.insert(tpl.clone(), act.clone());
                true
            }
        };
    }
    match (tpl, act) {
        (Term::Atom(x), Term::Atom(y)) if x.sort() == Sort::Tag => x == y,
        (Term::Atom(x), Term::Atom(y)) => b.bind(x, y),
        (Term::Concat(l, r), Term::Concat(l2, r2)) => match_term(l, l2, blobs, b) && match_term(r, r2, blobs, b),
        (Term::Encrypt(body, k), Term::Encrypt(body2, k2)) => b.bind(k, k2) && match_term(body, body2, blobs, b),
        _ => false,
    }
}

/// Agents implied by key bindings: `pk(x) ↦ pk(y)` gives `x ↦ y`, and a
/// shared key given to a pair of principals gives both ends.
fn close_agents(p: &Protocol, role: &Role, b: &mut Binding, principals: &BTreeSet<String>) -> bool {
    let pairs: Vec<(Atom, Atom)> = b.atoms.iter().map(|(x, y)| (x.clone(), y.clone())).collect();
    for (x, y) in pairs {
        if !x.is_key() {
            continue;
        }
        if let (Some(ox), Some(oy)) = (x.key_owner(), y.key_owner()) {
            let same_kind = x.name().starts_with("pk") == y.name().starts_with("pk");
            if !same_kind || !b.bind(&Atom::agent(ox), &Atom::agent(oy)) {
                return false;
            }
            continue;
        }
        if let Some(decl) = p.shared.iter().find(|s| s.key == x) {
            let hit = principals.iter().flat_map(|u| principals.iter().map(move |v| (u, v))).find(|(u, v)| {
                u != v && y == shared_key_name(p, u, v)
            });
            if let Some((u, v)) = hit {
                if !b.bind(&Atom::agent(&decl.a), &Atom::agent(u)) || !b.bind(&Atom::agent(&decl.b), &Atom::agent(v)) {
                    return false;
                }
            }
        }
    }
    for d in &role.params {
        if let (Some(base), Some(got)) = (derived_base(d), b.atoms.get(d).cloned()) {
            if role.params.contains(&base) {
                match b.atoms.get(&base).cloned() {
                    Some(bb) if rederive(d, &bb) != got => return false,
                    Some(_) => {}
                    None => match derived_base(&got) {
                        Some(gb) => {
                            b.atoms.insert(base, gb);
                        }
                        None => return false,
                    },
                }
            }
        }
    }
    true
}

/// Concrete long-term key shared by two principals: the declared name when
/// the pair is declared, `k` followed by both names otherwise.
pub fn shared_key_name(p: &Protocol, u: &str, v: &str) -> Atom {
    p.shared
        .iter()
        .find(|s| (s.a == u && s.b == v) || (s.a == v && s.b == u))
        .map(|s| s.key.clone())
        .unwrap_or_else(|| Atom::key(&format!("k{u}{v}")))
}

fn principals(b: &Bundle) -> BTreeSet<String> {
    let mut out: BTreeSet<String> = b.strands.iter().map(|s| s.agent.clone()).collect();
    for s in &b.strands {
        for n in &s.nodes {
            out.extend(crate::term::atoms(&n.msg).into_iter().filter(|a| a.sort() == Sort::Agent).map(|a| a.name().to_string()));
        }
    }
    out
}

/// Recover the role and renaming behind an honest strand.
pub fn match_role(c: &CanonicalBundle, b: &Bundle, s: &Strand) -> Option<RoleInstance> {
    let principals = principals(b);
    for role in &c.roles {
        if let Some(meta) = &s.role {
            if meta.role != role.name {
                continue;
            }
        }
        if s.nodes.len() > role.len() {
            continue;
        }
        let blobs = blobs(&c.protocol, role);
        let mut bind = Binding::default();
        if let Some(meta) = &s.role {
            bind.atoms = meta.alpha.iter().filter(|(k, _)| role.params.contains(*k)).map(|(k, v)| (k.clone(), v.clone())).collect();
        }
        let ok = bind.bind(&role.agent, &Atom::agent(&s.agent))
            && s.nodes.iter().zip(&role.strand).enumerate().all(|(i, (n, t))| {
                n.sign == t.sign && match_term(&t.msg, &n.msg, &blobs[i], &mut bind)
            })
            && close_agents(&c.protocol, role, &mut bind, &principals);
        if ok {
            bind.atoms.retain(|k, _| role.params.contains(k));
            return Some(RoleInstance { role: role.name.clone(), upto: s.nodes.len(), alpha: bind.atoms });
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolSection {
    pub members: Vec<usize>,
    pub roles: Vec<String>,
    pub beta: BTreeMap<Atom, Atom>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coverage {
    pub sections: Vec<ProtocolSection>,
    pub theta: Vec<(NodeId, NodeId)>,
    pub instances: BTreeMap<usize, RoleInstance>,
    pub optimal: bool,
}

impl Coverage {
    pub fn section_of(&self, strand: usize) -> Option<usize> {
        self.sections.iter().position(|s| s.members.contains(&strand))
    }

    pub fn theta(&self, v: NodeId) -> Option<NodeId> {
        self.theta.iter().find(|(x, _)| *x == v).map(|(_, y)| *y)
    }

    pub fn beta_of(&self, strand: usize) -> Option<&BTreeMap<Atom, Atom>> {
        self.section_of(strand).map(|i| &self.sections[i].beta)
    }
}

fn union(a: &BTreeMap<Atom, Atom>, b: &BTreeMap<Atom, Atom>) -> Option<BTreeMap<Atom, Atom>> {
    let mut out = a.clone();
    for (k, v) in b {
        if out.get(k).is_some_and(|w| w != v) {
            return None;
        }
        out.insert(k.clone(), v.clone());
    }
    Some(out)
}

/// Merge precondition: the renamings agree where both are defined and no
/// role would occur twice.
pub fn compatible(s1: &ProtocolSection, s2: &ProtocolSection) -> bool {
    s1.roles.iter().all(|r| !s2.roles.contains(r)) && union(&s1.beta, &s2.beta).is_some()
}

fn merge(s1: &ProtocolSection, s2: &ProtocolSection) -> ProtocolSection {
    let mut members = s1.members.clone();
    members.extend(&s2.members);
    let mut roles = s1.roles.clone();
    roles.extend(s2.roles.iter().cloned());
    let mut idx: Vec<usize> = (0..members.len()).collect();
    idx.sort_by_key(|&i| members[i]);
    ProtocolSection {
        members: idx.iter().map(|&i| members[i]).collect(),
        roles: idx.iter().map(|&i| roles[i].clone()).collect(),
        beta: union(&s1.beta, &s2.beta).expect("merging incompatible sections"),
    }
}

pub fn sectionize(b: &Bundle, c: &CanonicalBundle) -> Result<Coverage, CoverageError> {
    let order: Vec<usize> = b.honest_strands().collect();
    sectionize_in_order(b, c, &order)
}

/// Greedy merging starting from singletons listed in `order`.
pub fn sectionize_in_order(b: &Bundle, c: &CanonicalBundle, order: &[usize]) -> Result<Coverage, CoverageError> {
    let mut instances = BTreeMap::new();
    for s in b.honest_strands() {
        let inst = match_role(c, b, &b.strands[s]).ok_or(CoverageError::UnknownRole { strand: s })?;
        instances.insert(s, inst);
    }
    let mut sections: Vec<ProtocolSection> = order
        .iter()
        .map(|s| ProtocolSection { members: vec![*s], roles: vec![instances[s].role.clone()], beta: instances[s].alpha.clone() })
        .collect();
    'outer: loop {
        for i in 0..sections.len() {
            for j in i + 1..sections.len() {
                if compatible(&sections[i], &sections[j]) {
                    let merged = merge(&sections[i], &sections[j]);
                    sections[i] = merged;
                    sections.remove(j);
                    continue 'outer;
                }
            }
        }
        break;
    }
    sections.sort_by_key(|s| s.members[0]);
    let mut theta = Vec::new();
    for (s, inst) in &instances {
        let cs = c.strand_of(&inst.role).expect("matched role is canonical");
        for j in 1..=b.strands[*s].nodes.len() {
            theta.push((NodeId::new(*s, j), NodeId::new(cs, j)));
        }
    }
    let optimal = sections.iter().enumerate().all(|(i, x)| sections[i + 1..].iter().all(|y| !compatible(x, y)));
    Ok(Coverage { sections, theta, instances, optimal })
}

/// Re-check the section invariants of a coverage.
pub fn validate_coverage(b: &Bundle, c: &CanonicalBundle, cov: &Coverage) -> Result<(), String> {
    let honest: BTreeSet<usize> = b.honest_strands().collect();
    let mut seen = BTreeSet::new();
    for sec in &cov.sections {
        let mut roles = BTreeSet::new();
        for (m, r) in sec.members.iter().zip(&sec.roles) {
            if !seen.insert(*m) {
                return Err(format!("strand {m} is in two sections"));
            }
            if !roles.insert(r) {
                return Err(format!("role {r} occurs twice in a section"));
            }
            let inst = cov.instances.get(m).ok_or(format!("strand {m} has no instance"))?;
            if inst.alpha.iter().any(|(k, v)| sec.beta.get(k) != Some(v)) {
                return Err(format!("renaming of strand {m} disagrees with its section"));
            }
            let role = c.role(r).ok_or(format!("unknown role {r}"))?;
            let image: Vec<Node> = role.strand[..b.strands[*m].nodes.len()].to_vec();
            for (j, n) in b.strands[*m].nodes.iter().enumerate() {
                let v = NodeId::new(*m, j + 1);
                let w = cov.theta(v).ok_or(format!("theta undefined at {v}"))?;
                if w.index != v.index || c.bundle.sign(w) != n.sign || image[j].sign != n.sign {
                    return Err(format!("theta does not preserve sign and index at {v}"));
                }
            }
        }
    }
    if seen != honest {
        return Err("sections do not partition the honest strands".into());
    }
    Ok(())
}
