//! Locating and classifying confusions in an attack bundle.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::coverage::{CanonicalBundle, Coverage};
use crate::strand::{originates, origins, Bundle, Node, NodeId, PenKind, Sign, StrandKind};
use crate::term::{analz_all, tk, Atom, Position, Term};
use crate::theory::ImplTheory;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Known {
    pub keys: BTreeSet<Atom>,
    pub atoms: BTreeSet<Atom>,
}

/// `K_⟨s,i⟩` and `TK_⟨s,i⟩` along one strand; entries exist for negative
/// nodes only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentKnowledge {
    pub initial: Known,
    pub at: Vec<Option<Known>>,
}

impl AgentKnowledge {
    /// Knowledge at the negative node `i` (1-based), after analysing it.
    pub fn at(&self, i: usize) -> Option<&Known> {
        self.at.get(i.checked_sub(1)?)?.as_ref()
    }

    /// Knowledge at `pred(i)`, or the initial knowledge when no earlier
    /// negative node exists.
    pub fn before(&self, i: usize) -> (BTreeSet<Atom>, BTreeSet<Atom>) {
        let k = (1..i).rev().find_map(|j| self.at(j)).unwrap_or(&self.initial);
        (k.keys.clone(), k.atoms.clone())
    }

    pub fn last(&self) -> &Known {
        self.at.iter().rev().flatten().next().unwrap_or(&self.initial)
    }
}

pub fn agent_knowledge(strand: &[Node], initial_atoms: &BTreeSet<Atom>, initial_keys: &BTreeSet<Atom>) -> AgentKnowledge {
    let initial = Known { keys: initial_keys.clone(), atoms: initial_atoms.clone() };
    let mut cur = initial.clone();
    let mut at = Vec::with_capacity(strand.len());
    for n in strand {
        if n.sign == Sign::Plus {
            at.push(None);
            continue;
        }
        let (seen, _) = analz_all(std::slice::from_ref(&n.msg), &cur.keys);
        let mut next = cur.clone();
        for t in &seen {
            if let Term::Atom(a) = t {
                if a.is_key() {
                    next.keys.insert(a.clone());
                }
            }
            next.atoms.extend(tk(t));
        }
        at.push(Some(next.clone()));
        cur = next;
    }
    AgentKnowledge { initial, at }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConfusionKind {
    CrossProtocol,
    MessageConfusion,
    Both,
}

impl ConfusionKind {
    pub fn is_cross(self) -> bool {
        self != ConfusionKind::MessageConfusion
    }
    pub fn is_message(self) -> bool {
        self != ConfusionKind::CrossProtocol
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub kind: ConfusionKind,
    pub at: NodeId,
    pub cipher: Term,
    pub position: Position,
    pub origin: NodeId,
    /// The cipher as it left its origin; differs from `cipher` when an
    /// I-strand rewrote it on the way.
    pub origin_cipher: Term,
    pub origin_position: Position,
}

/// Where `t`, as received at `v`, was produced by an honest agent. Returns
/// the node, the term as produced there, and its position. `None` when a
/// penetrator strand other than an I-strand made it.
pub fn semantic_origin(b: &Bundle, v: NodeId, t: &Term) -> Option<(NodeId, Term, Position)> {
    let anc = b.ancestors(v);
    let order = b.topological_order().ok()?;
    let mut found = origins(b, t);
    found.retain(|o| anc.contains(o) && *o != v);
    let o = *order.iter().find(|x| found.contains(x))?;
    match b.strand(o).kind {
        StrandKind::Honest => {
            let pos = b.msg(o).positions_of(t).into_iter().next()?;
            Some((o, t.clone(), pos))
        }
        StrandKind::Pen(PenKind::I) => {
            let spoofed = b.msg(o);
            let camouflaged = b.msg(NodeId::new(o.strand, 1));
            spoofed.positions_of(t).into_iter().find_map(|p| {
                let c = camouflaged.subterm_at(&p).ok()?;
                if c == *t {
                    return None;
                }
                semantic_origin(b, NodeId::new(o.strand, 1), &c)
            })
        }
        StrandKind::Pen(_) => None,
    }
}

fn message_confused(c: &CanonicalBundle, cov: &Coverage, v: NodeId, pos: &Position, origin: NodeId, opos: &Position) -> bool {
    let (Some(tv), Some(to)) = (cov.theta(v), cov.theta(origin)) else { return true };
    let Ok(expected) = c.bundle.msg(tv).subterm_at(pos) else { return true };
    let Ok(there) = c.bundle.msg(to).subterm_at(opos) else { return true };
    !(expected.is_cipher() && there == expected && originates(&c.bundle, to, &expected))
}

/// Confusions at negative honest nodes in topological order, ciphers
/// outermost first.
pub fn find_confusions(b: &Bundle, c: &CanonicalBundle, cov: &Coverage, _th: &ImplTheory) -> Vec<Confusion> {
    let Ok(order) = b.topological_order() else { return Vec::new() };
    let mut out = Vec::new();
    for v in order {
        if !b.strand(v).kind.is_honest() || b.sign(v) != Sign::Minus {
            continue;
        }
        for (pos, cipher) in b.msg(v).cipher_positions() {
            let Some((origin, origin_cipher, origin_position)) = semantic_origin(b, v, &cipher) else { continue };
            if !b.strand(origin).kind.is_honest() || b.sign(origin) != Sign::Plus || !origin_cipher.is_cipher() {
                continue;
            }
            let cross = cov.section_of(v.strand) != cov.section_of(origin.strand);
            let message = message_confused(c, cov, v, &pos, origin, &origin_position);
            let kind = match (cross, message) {
                (true, true) => ConfusionKind::Both,
                (true, false) => ConfusionKind::CrossProtocol,
                (false, true) => ConfusionKind::MessageConfusion,
                (false, false) => continue,
            };
            out.push(Confusion { kind, at: v, cipher, position: pos, origin, origin_cipher, origin_position });
        }
    }
    out
}

/// Check a reported confusion from its witness data alone.
pub fn validate_confusion(b: &Bundle, c: &CanonicalBundle, cov: &Coverage, cf: &Confusion) -> Result<(), String> {
    if b.msg(cf.at).subterm_at(&cf.position).ok().as_ref() != Some(&cf.cipher) {
        return Err("cipher is not at the reported position".into());
    }
    if !b.strand(cf.origin).kind.is_honest() || b.sign(cf.origin) != Sign::Plus {
        return Err("origin is not a positive honest node".into());
    }
    if b.msg(cf.origin).subterm_at(&cf.origin_position).ok().as_ref() != Some(&cf.origin_cipher) {
        return Err("origin cipher is not at the reported origin position".into());
    }
    if !originates(b, cf.origin, &cf.origin_cipher) {
        return Err("origin cipher does not originate at the origin".into());
    }
    if !b.precedes_eq(cf.origin, cf.at) {
        return Err("origin does not precede the confused node".into());
    }
    let cross = cov.section_of(cf.at.strand) != cov.section_of(cf.origin.strand);
    let message = message_confused(c, cov, cf.at, &cf.position, cf.origin, &cf.origin_position);
    let expect = match cf.kind {
        ConfusionKind::Both => (true, true),
        ConfusionKind::CrossProtocol => (true, false),
        ConfusionKind::MessageConfusion => (false, true),
    };
    if (cross, message) != expect {
        return Err(format!("classification {:?} does not follow from sections and theta", cf.kind));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;
    use crate::coverage::{canonical_bundle, sectionize};
    use crate::protocol::parse_protocol;

    #[test]
    fn knowledge_grows() {
        let p = parse_protocol(corpus::WMF).unwrap();
        let c = canonical_bundle(&p).unwrap();
        let resp = c.strand_of("b").unwrap();
        let kn = c.knowledge(resp);
        assert!(!kn.initial.keys.contains(&Atom::key("k")));
        assert!(kn.at(1).unwrap().keys.contains(&Atom::key("k")));
        let p = parse_protocol(corpus::NSPK).unwrap();
        let c = canonical_bundle(&p).unwrap();
        let kn = c.knowledge(0);
        assert!(kn.at(2).unwrap().atoms.contains(&Atom::nonce("n'")));
        assert!(kn.at(1).is_none());
        let sends = [Node::send("a:a".parse().unwrap())];
        let kn = agent_knowledge(&sends, &BTreeSet::new(), &BTreeSet::new());
        assert_eq!(kn.last(), &kn.initial);
    }

    #[test]
    fn canonical_is_confusion_free() {
        for (name, src) in corpus::ALL {
            let p = parse_protocol(src).unwrap();
            let c = canonical_bundle(&p).unwrap();
            let cov = sectionize(&c.bundle, &c).unwrap();
            assert!(find_confusions(&c.bundle, &c, &cov, &ImplTheory::free()).is_empty(), "{name}");
        }
    }
}
