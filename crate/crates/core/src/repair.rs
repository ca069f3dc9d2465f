//! Message substitutions, the three patch rules and the repair loop.

use std::collections::{BTreeMap, BTreeSet};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coverage::{canonical_bundle, sectionize, CanonicalBundle, Coverage, CoverageError};
use crate::diagnosis::{find_confusions, Confusion, ConfusionKind};
use crate::protocol::{rederive, Protocol, Step};
use crate::strand::{candidate_origins, origins, Bundle, NodeId};
use crate::term::{atoms, equiv, flatten, Atom, Sort, Term};
use crate::theory::{accepts, ImplTheory};
use crate::verifier::{verify, Attack, Scenario, VerifyError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RepairError {
    #[error("substitution maps {0} which is not a cipher")]
    NotACipher(Term),
    #[error("substitution changes the key of {0}")]
    KeyChange(Term),
    #[error("co-substitution of overlapping domains at {0}")]
    OverlappingDomains(Term),
    #[error("adaptation breaks the edge into {0}")]
    UnsafeAdaptation(NodeId),
    #[error("rule {rule:?} does not apply: {reason}")]
    NotApplicable { rule: PatchRule, reason: String },
    #[error("no candidate encoding passes the patch conditions")]
    NoCandidate,
    #[error("no applicable rule for any confusion in the attack")]
    NoApplicableRule,
    #[error("max-iterations: still attacked after {0} patches")]
    MaxIterations(usize),
    #[error(transparent)]
    Coverage(#[from] CoverageError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error("patched protocol is invalid: {0}")]
    Invalid(String),
}

/// `{t ← t′}` on ciphers, extended to messages. Serialized as a list of
/// `[t, t′]` pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Vec<(Term, Term)>", try_from = "Vec<(Term, Term)>")]
pub struct MessageSubstitution {
    map: BTreeMap<Term, Term>,
}

impl From<MessageSubstitution> for Vec<(Term, Term)> {
    fn from(s: MessageSubstitution) -> Self {
        s.map.into_iter().collect()
    }
}

impl TryFrom<Vec<(Term, Term)>> for MessageSubstitution {
    type Error = RepairError;
    fn try_from(v: Vec<(Term, Term)>) -> Result<Self, RepairError> {
        MessageSubstitution::new(v)
    }
}

impl MessageSubstitution {
    pub fn new(pairs: impl IntoIterator<Item = (Term, Term)>) -> Result<MessageSubstitution, RepairError> {
        let mut map = BTreeMap::new();
        for (t, t2) in pairs {
            for x in [&t, &t2] {
                if !x.is_cipher() {
                    return Err(RepairError::NotACipher(x.clone()));
                }
            }
            if t.cipher_key() != t2.cipher_key() {
                return Err(RepairError::KeyChange(t));
            }
            map.insert(t, t2);
        }
        Ok(MessageSubstitution { map })
    }

    pub fn single(t: Term, t2: Term) -> Result<MessageSubstitution, RepairError> {
        MessageSubstitution::new([(t, t2)])
    }

    pub fn domain(&self) -> impl Iterator<Item = &Term> {
        self.map.keys()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&Term, &Term)> {
        self.map.iter()
    }

    pub fn get(&self, t: &Term) -> Option<&Term> {
        self.map.get(t)
    }

    pub fn apply(&self, m: &Term) -> Term {
        match m {
            Term::Atom(_) => m.clone(),
            Term::Concat(l, r) => Term::pair(self.apply(l), self.apply(r)),
            Term::Encrypt(body, k) => match self.map.get(m) {
                Some(Term::Encrypt(body2, k2)) => Term::cipher(self.apply(body2), k2.clone()),
                _ => Term::cipher(self.apply(body), k.clone()),
            },
        }
    }

    /// Every image keeps its cipher's key and components and adds only
    /// members of `known`.
    pub fn is_info_enhancing(&self, known: &BTreeSet<Term>) -> bool {
        self.map.iter().all(|(t, t2)| match (t, t2) {
            (Term::Encrypt(b, k), Term::Encrypt(b2, k2)) if k == k2 => {
                let mut extra = flatten(b2);
                for x in flatten(b) {
                    match extra.iter().position(|y| *y == x) {
                        Some(i) => {
                            extra.remove(i);
                        }
                        None => return false,
                    }
                }
                extra.iter().all(|x| known.contains(x))
            }
            _ => false,
        })
    }

    pub fn is_injective_on(&self, ms: &BTreeSet<Term>) -> bool {
        let images: BTreeSet<Term> = ms.iter().map(|m| self.apply(m)).collect();
        images.len() == ms.len()
    }
}

/// The co-substitutions `(σ̄₁, σ̄₂)` of a pair with disjoint domains, so
/// that `σ̄₁ ∘ σ₂ = σ̄₂ ∘ σ₁`.
pub fn co_subst(
    s1: &MessageSubstitution,
    s2: &MessageSubstitution,
) -> Result<(MessageSubstitution, MessageSubstitution), RepairError> {
    if let Some(t) = s1.domain().find(|t| s2.map.contains_key(*t)) {
        return Err(RepairError::OverlappingDomains(t.clone()));
    }
    let bar1 = MessageSubstitution::new(s1.pairs().map(|(t, t2)| (s2.apply(t), s2.apply(t2))))?;
    let bar2 = MessageSubstitution::new(s2.pairs().map(|(t, t2)| (s1.apply(t), s1.apply(t2))))?;
    Ok((bar1, bar2))
}

/// `t′` is equivalent to none of `msgs`.
pub fn collision_free<'a>(t: &Term, msgs: impl IntoIterator<Item = &'a Term>) -> bool {
    msgs.into_iter().all(|m| !equiv(t, m))
}

/// `Ad(b, v₀, σ)`: `σ` rewrites every node at or after `v₀`.
pub fn adapt(b: &Bundle, v0: NodeId, s: &MessageSubstitution) -> Bundle {
    for t in s.domain() {
        if !origins(b, t).contains(&v0) {
            warn!("{t} does not originate at {v0}; adaptation may not be safe");
        }
    }
    let mut out = b.clone();
    for v in b.node_ids() {
        if b.precedes_eq(v0, v) {
            let n = &mut out.strands[v.strand].nodes[v.index - 1];
            n.msg = s.apply(&n.msg);
        }
    }
    out
}

/// The adapted canonical bundle read back as a protocol.
pub fn adapt_protocol(c: &CanonicalBundle, v0: NodeId, s: &MessageSubstitution) -> Result<Protocol, RepairError> {
    let msgs = c.messages();
    if !s.is_injective_on(&msgs) {
        return Err(RepairError::Invalid("substitution is not injective on the canonical messages".into()));
    }
    let b = adapt(&c.bundle, v0, s);
    let mut p = c.protocol.clone();
    for (step, (from, to)) in p.msgs.iter_mut().zip(&c.bundle.edges) {
        if b.msg(*from) != b.msg(*to) {
            return Err(RepairError::UnsafeAdaptation(*to));
        }
        step.term = b.msg(*from).clone();
    }
    canonical_bundle(&p)?;
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchRule {
    MessageEncoding,
    AgentNaming,
    SessionBinding,
}

/// Which rule the confusion calls for; the three are mutually exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleChoice {
    Auto,
    Encode,
    Name,
    Bind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Handshake {
    pub initiator: String,
    pub responder: String,
    pub nonce: Atom,
    pub key: Atom,
    pub challenge: Term,
    pub reply: Term,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub rule: PatchRule,
    pub confusion: Confusion,
    /// Canonical node the substitution is anchored at.
    pub anchor: Option<NodeId>,
    pub substitution: Option<MessageSubstitution>,
    pub handshake: Option<Handshake>,
    pub protocol: Protocol,
}

impl Patch {
    /// The canonical bundle of the patched protocol.
    pub fn canonical(&self) -> Result<CanonicalBundle, RepairError> {
        Ok(canonical_bundle(&self.protocol)?)
    }
}

/// Everything the rules look at.
pub struct PatchContext<'a> {
    pub attack: &'a Bundle,
    pub canonical: &'a CanonicalBundle,
    pub coverage: &'a Coverage,
    pub theory: &'a ImplTheory,
}

impl PatchContext<'_> {
    fn theta(&self, v: NodeId, rule: PatchRule) -> Result<NodeId, RepairError> {
        self.coverage
            .theta(v)
            .ok_or_else(|| RepairError::NotApplicable { rule, reason: format!("{v} has no canonical image") })
    }

    fn beta(&self, strand: usize) -> BTreeMap<Atom, Atom> {
        self.coverage.beta_of(strand).cloned().unwrap_or_default()
    }

    /// Agent atoms known at the origin's canonical image on which the two
    /// sections disagree.
    fn disagreeing_agents(&self, cf: &Confusion) -> Result<(NodeId, BTreeSet<Atom>), RepairError> {
        let vo = self.theta(cf.origin, PatchRule::AgentNaming)?;
        let (_, tk) = self.canonical.knowledge(vo.strand).before(vo.index);
        let (b, b2) = (self.beta(cf.at.strand), self.beta(cf.origin.strand));
        let d = tk.into_iter().filter(|m| m.sort() == Sort::Agent && b.get(m) != b2.get(m)).collect();
        Ok((vo, d))
    }

    fn other_messages(&self, t: &Term) -> Vec<Term> {
        self.canonical.messages().into_iter().filter(|m| m != t).collect()
    }
}

pub fn rule_for(ctx: &PatchContext, cf: &Confusion) -> Result<PatchRule, RepairError> {
    if cf.kind.is_message() {
        return Ok(PatchRule::MessageEncoding);
    }
    let (_, d) = ctx.disagreeing_agents(cf)?;
    Ok(if d.is_empty() { PatchRule::SessionBinding } else { PatchRule::AgentNaming })
}

pub fn patch(ctx: &PatchContext, cf: &Confusion, choice: RuleChoice) -> Result<Patch, RepairError> {
    let rule = match choice {
        RuleChoice::Auto => rule_for(ctx, cf)?,
        RuleChoice::Encode => PatchRule::MessageEncoding,
        RuleChoice::Name => PatchRule::AgentNaming,
        RuleChoice::Bind => PatchRule::SessionBinding,
    };
    match rule {
        PatchRule::MessageEncoding => message_encoding(ctx, cf),
        PatchRule::AgentNaming => agent_naming(ctx, cf),
        PatchRule::SessionBinding => session_binding(ctx, cf),
    }
}

/// Permutations in the order of Heap's algorithm, identity first.
pub fn heap_permutations<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    let mut a = items.to_vec();
    let n = a.len();
    let mut out = vec![a.clone()];
    let mut c = vec![0; n];
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            out.push(a.clone());
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

fn fresh_tag(p: &Protocol) -> Atom {
    let used: BTreeSet<Atom> = p.msgs.iter().flat_map(|m| atoms(&m.term)).collect();
    (1..).map(|i| Atom::tag(&format!("tag{i}"))).find(|t| !used.contains(t)).expect("unbounded")
}

/// Re-encode the expected cipher so the attack message no longer passes.
pub fn message_encoding(ctx: &PatchContext, cf: &Confusion) -> Result<Patch, RepairError> {
    let rule = PatchRule::MessageEncoding;
    if !cf.kind.is_message() {
        return Err(RepairError::NotApplicable { rule, reason: "not a message confusion".into() });
    }
    let c = ctx.canonical;
    let tv = ctx.theta(cf.at, rule)?;
    let t = c.bundle.msg(tv).subterm_at(&cf.position).map_err(|e| RepairError::Invalid(e.to_string()))?;
    let Term::Encrypt(body, key) = &t else {
        return Err(RepairError::NotApplicable { rule, reason: format!("{t} is not a cipher") });
    };
    let v2 = *origins(&c.bundle, &t)
        .first()
        .ok_or_else(|| RepairError::NotApplicable { rule, reason: format!("{t} has no canonical origin") })?;
    let tag = fresh_tag(&c.protocol);
    let (_, mut known) = c.knowledge(v2.strand).before(v2.index);
    known.insert(tag.clone());
    let known: BTreeSet<Term> = known.into_iter().map(Term::Atom).collect();
    let others = ctx.other_messages(&t);

    let beta = ctx.beta(cf.at.strand);
    let (keys, tk) = c.knowledge(tv.strand).before(tv.index);
    let rn = |a: &Atom| beta.get(a).cloned().unwrap_or_else(|| a.clone());
    let keys: BTreeSet<Atom> = keys.iter().map(rn).collect();
    let tk: BTreeSet<Atom> = tk.iter().map(rn).collect();
    let received = ctx.attack.msg(cf.at);
    let chosen: BTreeSet<Term> = candidate_origins(received)
        .into_iter()
        .filter(|x| origins(ctx.attack, x).iter().any(|o| !ctx.attack.strand(*o).kind.is_honest()))
        .collect();

    let comps = flatten(body);
    let mut cands: Vec<Term> = Vec::new();
    for perm in heap_permutations(&comps).into_iter().skip(1) {
        let t2 = Term::cipher(Term::seq(perm), key.clone());
        if t2 != t && !cands.contains(&t2) {
            cands.push(t2);
        }
    }
    cands.push(Term::cipher(Term::pair(Term::Atom(tag), (**body).clone()), key.clone()));

    for t2 in cands {
        let s = MessageSubstitution::single(t.clone(), t2.clone())?;
        if !s.is_info_enhancing(&known) || !collision_free(&t2, &others) {
            continue;
        }
        let expected = s.apply(c.bundle.msg(tv)).rename(&beta);
        let vars: BTreeSet<Atom> = atoms(&expected).into_iter().filter(|a| !tk.contains(a)).collect();
        if accepts(&expected, received, &vars, &keys, ctx.theory, &chosen).is_some() {
            continue;
        }
        info!("message encoding: {t} becomes {t2}");
        let protocol = adapt_protocol(c, v2, &s)?;
        return Ok(Patch { rule, confusion: cf.clone(), anchor: Some(v2), substitution: Some(s), handshake: None, protocol });
    }
    Err(RepairError::NoCandidate)
}

/// Append the agents the two sections disagree on to the origin's cipher.
pub fn agent_naming(ctx: &PatchContext, cf: &Confusion) -> Result<Patch, RepairError> {
    let rule = PatchRule::AgentNaming;
    if cf.kind != ConfusionKind::CrossProtocol {
        return Err(RepairError::NotApplicable { rule, reason: "not a pure cross-protocol confusion".into() });
    }
    let c = ctx.canonical;
    let (vo, d) = ctx.disagreeing_agents(cf)?;
    if d.is_empty() {
        return Err(RepairError::NotApplicable { rule, reason: "the sections agree on every known agent".into() });
    }
    let t = c.bundle.msg(vo).subterm_at(&cf.origin_position).map_err(|e| RepairError::Invalid(e.to_string()))?;
    let Term::Encrypt(body, key) = &t else {
        return Err(RepairError::NotApplicable { rule, reason: format!("{t} is not a cipher") });
    };
    let mut comps = flatten(body);
    comps.extend(d.iter().cloned().map(Term::Atom));
    let t2 = Term::cipher(Term::seq(comps), key.clone());
    let s = MessageSubstitution::single(t.clone(), t2.clone())?;
    let known: BTreeSet<Term> = d.into_iter().map(Term::Atom).collect();
    if !s.is_info_enhancing(&known) || !collision_free(&t2, &ctx.other_messages(&t)) {
        return Err(RepairError::NoCandidate);
    }
    info!("agent naming: {t} becomes {t2}");
    let protocol = adapt_protocol(c, vo, &s)?;
    Ok(Patch { rule, confusion: cf.clone(), anchor: Some(vo), substitution: Some(s), handshake: None, protocol })
}

/// Append a nonce handshake between the confused receiver and the earliest
/// agent of the run that produced its message.
pub fn session_binding(ctx: &PatchContext, cf: &Confusion) -> Result<Patch, RepairError> {
    let rule = PatchRule::SessionBinding;
    if cf.kind != ConfusionKind::CrossProtocol {
        return Err(RepairError::NotApplicable { rule, reason: "not a pure cross-protocol confusion".into() });
    }
    if !ctx.disagreeing_agents(cf)?.1.is_empty() {
        return Err(RepairError::NotApplicable { rule, reason: "the sections disagree on agents".into() });
    }
    let c = ctx.canonical;
    let p = &c.protocol;
    let tv = ctx.theta(cf.at, rule)?;
    let s = tv.strand;
    let anc = c.bundle.ancestors(tv);
    let s2 = anc
        .iter()
        .filter(|v| v.strand != s && v.index == 1 && c.bundle.sender(**v).is_none())
        .map(|v| v.strand)
        .min()
        .ok_or_else(|| RepairError::NotApplicable { rule, reason: "no earlier agent to bind with".into() })?;
    let (r, r2) = (&c.roles[s], &c.roles[s2]);
    let (k1, k2) = (c.knowledge(s).last().keys.clone(), c.knowledge(s2).last().keys.clone());
    let shared = k1.intersection(&k2).find(|k| !k.name().starts_with("pk(")).cloned();
    let key = match shared {
        Some(k) => k,
        None if p.pk => Atom::public_key(r2.agent.name()),
        None => return Err(RepairError::NotApplicable { rule, reason: "the two agents share no key".into() }),
    };
    let used: BTreeSet<Atom> = p.msgs.iter().flat_map(|m| atoms(&m.term)).chain(p.fresh.iter().map(|(a, _)| a.clone())).collect();
    let mut name = format!("n{}", r.agent.name());
    while used.contains(&Atom::nonce(&name)) {
        name.push('\'');
    }
    let nonce = Atom::nonce(&name);
    let succ = rederive(&Atom::nonce("succ(_)"), &nonce);
    let challenge = Term::cipher(
        Term::seq([Term::Atom(r2.agent.clone()), Term::Atom(r.agent.clone()), Term::Atom(nonce.clone())]),
        key.clone(),
    );
    let reply = Term::cipher(
        Term::seq([Term::Atom(succ), Term::Atom(r.agent.clone()), Term::Atom(r2.agent.clone())]),
        key.inverse(),
    );
    let mut q = p.clone();
    q.fresh.push((nonce.clone(), r.name.clone()));
    let n = q.msgs.len();
    q.msgs.push(Step { index: n + 1, from: r.name.clone(), to: r2.name.clone(), term: challenge.clone() });
    q.msgs.push(Step { index: n + 2, from: r2.name.clone(), to: r.name.clone(), term: reply.clone() });
    q.validate().map_err(|e| RepairError::Invalid(e.to_string()))?;
    canonical_bundle(&q)?;
    info!("session binding between {} and {} under {key}", r.name, r2.name);
    let handshake = Handshake { initiator: r.name.clone(), responder: r2.name.clone(), nonce, key, challenge, reply };
    Ok(Patch { rule, confusion: cf.clone(), anchor: None, substitution: None, handshake: Some(handshake), protocol: q })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairConfig {
    pub scenario: Scenario,
    pub max_iters: usize,
    pub rule: RuleChoice,
}

impl Default for RepairConfig {
    fn default() -> RepairConfig {
        RepairConfig { scenario: Scenario::default(), max_iters: 8, rule: RuleChoice::Auto }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairStep {
    pub protocol: Protocol,
    pub attack: Attack,
    pub confusions: Vec<Confusion>,
    pub patch: Patch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairTrace {
    pub steps: Vec<RepairStep>,
    pub repaired: Protocol,
    /// States explored by the final, attack-free verification.
    pub explored: usize,
}

/// Diagnose an attack and patch the first confusion some rule handles.
pub fn diagnose_and_patch(
    p: &Protocol,
    attack: &Bundle,
    th: &ImplTheory,
    choice: RuleChoice,
) -> Result<(Vec<Confusion>, Patch), RepairError> {
    let c = canonical_bundle(p)?;
    let cov = sectionize(attack, &c)?;
    let confusions = find_confusions(attack, &c, &cov, th);
    let ctx = PatchContext { attack, canonical: &c, coverage: &cov, theory: th };
    for cf in &confusions {
        match patch(&ctx, cf, choice) {
            Ok(p) => return Ok((confusions, p)),
            Err(e) => info!("confusion at {} not patched: {e}", cf.at),
        }
    }
    Err(RepairError::NoApplicableRule)
}

/// Verify, diagnose, patch, until no attack is found within the bound.
pub fn repair_loop(p: &Protocol, th: &ImplTheory, cfg: &RepairConfig) -> Result<RepairTrace, (RepairError, Vec<RepairStep>)> {
    let mut cur = p.clone();
    let mut steps = Vec::new();
    loop {
        let verdict = match verify(&cur, th, &cfg.scenario) {
            Ok(v) => v,
            Err(e) => return Err((e.into(), steps)),
        };
        let Some(attack) = verdict.attack else {
            return Ok(RepairTrace { steps, repaired: cur, explored: verdict.explored });
        };
        if steps.len() >= cfg.max_iters {
            return Err((RepairError::MaxIterations(steps.len()), steps));
        }
        let (confusions, patch) = match diagnose_and_patch(&cur, &attack.bundle, th, cfg.rule) {
            Ok(x) => x,
            Err(e) => return Err((e, steps)),
        };
        let next = patch.protocol.clone();
        steps.push(RepairStep { protocol: cur, attack, confusions, patch });
        cur = next;
    }
}
