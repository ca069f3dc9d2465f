//! Hand-built attack bundles. Honest strands are written out; the spy's
//! strands are derived from what it has seen.
#![allow(dead_code)]

pub mod props;

use std::collections::{BTreeMap, BTreeSet};

use shrimp::corpus;
use shrimp::protocol::{parse_protocol, Protocol};
use shrimp::strand::{check_bundle, check_penetrator, Bundle, Node, NodeId, PenKind, StrandKind};
use shrimp::term::{Atom, Sort, Term};
use shrimp::theory::{parse_theory, ImplTheory};

pub fn t(s: &str) -> Term {
    s.parse().unwrap_or_else(|e| panic!("{s}: {e:?}"))
}

pub struct Sketch {
    pub b: Bundle,
    kp: BTreeSet<Atom>,
    initial: BTreeSet<Atom>,
    pool: BTreeMap<Term, NodeId>,
    sealed: Vec<Term>,
}

impl Sketch {
    pub fn new(kp: &[&str], initial: &[&str]) -> Sketch {
        let atom = |s: &&str| t(s).as_atom().cloned().expect("atom");
        Sketch {
            b: Bundle::new(),
            kp: kp.iter().map(atom).collect(),
            initial: initial.iter().map(atom).collect(),
            pool: BTreeMap::new(),
            sealed: Vec::new(),
        }
    }

    pub fn honest(&mut self, agent: &str, nodes: &[&str]) -> usize {
        let nodes = nodes
            .iter()
            .map(|s| match s.split_at(1) {
                ("+", m) => Node::send(t(m)),
                ("-", m) => Node::recv(t(m)),
                _ => panic!("node {s} lacks a sign"),
            })
            .collect();
        self.b.add_strand(StrandKind::Honest, agent, nodes)
    }

    fn pen(&mut self, kind: PenKind, nodes: Vec<Node>) -> usize {
        self.b.add_strand(StrandKind::Pen(kind), "spy", nodes)
    }

    pub fn link(&mut self, from: (usize, usize), to: (usize, usize)) {
        self.b.add_edge(NodeId::new(from.0, from.1), NodeId::new(to.0, to.1));
    }

    /// The spy intercepts the message sent at `from`.
    pub fn send(&mut self, from: (usize, usize)) {
        let v = NodeId::new(from.0, from.1);
        self.learn(self.b.msg(v).clone(), v);
    }

    /// The spy delivers the message expected at `to`.
    pub fn recv(&mut self, to: (usize, usize)) {
        let v = NodeId::new(to.0, to.1);
        let from = self.produce(&self.b.msg(v).clone());
        self.b.add_edge(from, v);
    }

    /// An I-strand re-reading `from` as `to`.
    pub fn camouflage(&mut self, from: &str, to: &str) {
        let src = self.produce(&t(from));
        let s = self.pen(PenKind::I, vec![Node::recv(t(from)), Node::send(t(to))]);
        self.b.add_edge(src, NodeId::new(s, 1));
        self.learn(t(to), NodeId::new(s, 2));
    }

    fn has_key(&self, k: &Atom) -> bool {
        self.kp.contains(k) || self.pool.contains_key(&Term::Atom(k.clone()))
    }

    fn learn(&mut self, m: Term, at: NodeId) {
        if self.pool.contains_key(&m) {
            return;
        }
        self.pool.insert(m.clone(), at);
        match &m {
            Term::Concat(l, r) => {
                let s = self.pen(PenKind::S, vec![Node::recv(m.clone()), Node::send((**l).clone()), Node::send((**r).clone())]);
                self.b.add_edge(at, NodeId::new(s, 1));
                self.learn((**l).clone(), NodeId::new(s, 2));
                self.learn((**r).clone(), NodeId::new(s, 3));
            }
            Term::Encrypt(..) => {
                if self.has_key(&m.cipher_key().unwrap().inverse()) {
                    self.decrypt(m, at);
                } else {
                    self.sealed.push(m);
                }
            }
            Term::Atom(a) if a.is_key() => {
                let open: Vec<Term> =
                    self.sealed.iter().filter(|c| c.cipher_key().unwrap().inverse() == *a).cloned().collect();
                self.sealed.retain(|c| !open.contains(c));
                for c in open {
                    let at = self.pool[&c];
                    self.decrypt(c, at);
                }
            }
            Term::Atom(_) => {}
        }
    }

    fn decrypt(&mut self, c: Term, at: NodeId) {
        let kinv = Term::Atom(c.cipher_key().unwrap().inverse());
        let body = c.cipher_body().unwrap().clone();
        let k = self.produce(&kinv);
        let s = self.pen(PenKind::D, vec![Node::recv(kinv), Node::recv(c), Node::send(body.clone())]);
        self.b.add_edge(k, NodeId::new(s, 1));
        self.b.add_edge(at, NodeId::new(s, 2));
        self.learn(body, NodeId::new(s, 3));
    }

    fn produce(&mut self, m: &Term) -> NodeId {
        if let Some(v) = self.pool.get(m) {
            return *v;
        }
        match m {
            Term::Atom(a) if self.kp.contains(a) => NodeId::new(self.pen(PenKind::K, vec![Node::send(m.clone())]), 1),
            Term::Atom(a) if !a.is_key() && (self.initial.contains(a) || a.sort() == Sort::Tag) => {
                NodeId::new(self.pen(PenKind::M, vec![Node::send(m.clone())]), 1)
            }
            Term::Atom(a) => panic!("spy cannot produce {a}"),
            Term::Concat(l, r) => {
                let (x, y) = (self.produce(l), self.produce(r));
                let s = self.pen(PenKind::C, vec![Node::recv((**l).clone()), Node::recv((**r).clone()), Node::send(m.clone())]);
                self.b.add_edge(x, NodeId::new(s, 1));
                self.b.add_edge(y, NodeId::new(s, 2));
                NodeId::new(s, 3)
            }
            Term::Encrypt(body, k) => {
                let kt = Term::Atom(k.clone());
                let (x, y) = (self.produce(&kt), self.produce(body));
                let s = self.pen(PenKind::E, vec![Node::recv(kt), Node::recv((**body).clone()), Node::send(m.clone())]);
                self.b.add_edge(x, NodeId::new(s, 1));
                self.b.add_edge(y, NodeId::new(s, 2));
                NodeId::new(s, 3)
            }
        }
    }

    pub fn finish(self, th: &ImplTheory) -> Bundle {
        let v = check_bundle(&self.b);
        assert!(v.is_empty(), "{v:?}");
        let v = check_penetrator(&self.b, th, &self.kp);
        assert!(v.is_empty(), "{v:?}");
        self.b
    }
}

pub struct Golden {
    pub name: &'static str,
    pub protocol: Protocol,
    pub theory: ImplTheory,
    pub bundle: Bundle,
}

/// Lowe's attack: `a` talks to the spy `c`, who replays to `b`.
pub fn nspk() -> Golden {
    let mut s = Sketch::new(&["k:pk(a)", "k:pk(b)", "k:pk(c)", "k:sk(c)"], &["a:a", "a:b", "a:c"]);
    let init = s.honest("a", &["+{a:a; n:n}k:pk(c)", "-{n:n; n:n'}k:pk(a)", "+{n:n'}k:pk(c)"]);
    let resp = s.honest("b", &["-{a:a; n:n}k:pk(b)", "+{n:n; n:n'}k:pk(a)", "-{n:n'}k:pk(b)"]);
    s.send((init, 1));
    s.recv((resp, 1));
    s.send((resp, 2));
    s.recv((init, 2));
    s.send((init, 3));
    s.recv((resp, 3));
    let theory = ImplTheory::free();
    Golden { name: "nspk", protocol: parse_protocol(corpus::NSPK).unwrap(), bundle: s.finish(&theory), theory }
}

/// The server is skipped and `a`'s request is reflected back to `a` as
/// the responder.
pub fn wmf() -> Golden {
    let mut s = Sketch::new(&[], &["a:a", "a:b"]);
    let init = s.honest("a", &["+a:a; {a:b; t:ta; k:k}k:kas"]);
    let resp = s.honest("a", &["-{a:b; t:ta; k:k}k:kas"]);
    s.send((init, 1));
    s.recv((resp, 1));
    let theory = ImplTheory::free();
    Golden { name: "wmf", protocol: parse_protocol(corpus::WMF).unwrap(), bundle: s.finish(&theory), theory }
}

/// Two I-strands: `n_b` read as a cipher, then the server's reply forged
/// from `b`'s own forwarding message.
pub fn woolam_pi1() -> Golden {
    let theory = parse_theory(corpus::NONCE_CIPHER).unwrap();
    let mut s = Sketch::new(&[], &["a:a", "a:b"]);
    let resp = s.honest(
        "b",
        &[
            "-a:a",
            "+n:nb",
            "-{n:m}k:kx",
            "+{a:a; a:b; {n:m}k:kx}k:kbs",
            "-{a:a; a:b; n:nb}k:kbs",
        ],
    );
    s.recv((resp, 1));
    s.send((resp, 2));
    s.camouflage("n:nb", "{n:m}k:kx");
    s.recv((resp, 3));
    s.send((resp, 4));
    s.camouflage("{a:a; a:b; {n:m}k:kx}k:kbs", "{a:a; a:b; n:nb}k:kbs");
    s.recv((resp, 5));
    Golden { name: "woolam_pi1", protocol: parse_protocol(corpus::WOOLAM_PI1).unwrap(), bundle: s.finish(&theory), theory }
}

/// The ticket for `b` is delivered twice.
pub fn dssk() -> Golden {
    let mut s = Sketch::new(&[], &["a:a", "a:b"]);
    let ticket = "{a:b; k:kab; a:a; t:ts}k:kbs";
    let init = s.honest(
        "a",
        &["+a:a; a:b", &format!("-{{a:b; k:kab; t:ts; {ticket}}}k:kas"), &format!("+{ticket}")],
    );
    let serv = s.honest("s", &["-a:a; a:b", &format!("+{{a:b; k:kab; t:ts; {ticket}}}k:kas")]);
    let r1 = s.honest("b", &[&format!("-{ticket}")]);
    let r2 = s.honest("b", &[&format!("-{ticket}")]);
    s.link((init, 1), (serv, 1));
    s.link((serv, 2), (init, 2));
    s.send((init, 3));
    s.recv((r1, 1));
    s.recv((r2, 1));
    let theory = ImplTheory::free();
    Golden { name: "dssk", protocol: parse_protocol(corpus::DSSK).unwrap(), bundle: s.finish(&theory), theory }
}

/// `a` runs as initiator with the spy `c` and, in parallel, as responder
/// for `c`; the server's answer in the first run feeds the second.
pub fn woolam_auth() -> Golden {
    let mut s = Sketch::new(&["k:kcs"], &["a:a", "a:b", "a:c", "a:s"]);
    let init = s.honest(
        "a",
        &[
            "+a:a; n:n",
            "-a:c; n:n'",
            "+{a:a; a:c; n:n; n:n'}k:kas",
            "-{a:c; n:n; n:n'; k:kac}k:kas; {n:n; n:n'}k:kac",
            "+{n:n'}k:kac",
        ],
    );
    let resp = s.honest(
        "a",
        &[
            "-a:c; n:n",
            "+a:a; n:n'",
            "-{a:c; a:a; n:n; n:n'}k:kcs",
            "+{a:c; a:a; n:n; n:n'}k:kcs; {a:c; a:a; n:n; n:n'}k:kas",
            "-{a:a; n:n; n:n'; k:kac}k:kcs; {a:c; n:n; n:n'; k:kac}k:kas",
            "+{a:a; n:n; n:n'; k:kac}k:kcs; {n:n; n:n'}k:kac",
            "-{n:n'}k:kac",
        ],
    );
    let serv = s.honest(
        "s",
        &[
            "-{a:a; a:c; n:n; n:n'}k:kas; {a:a; a:c; n:n; n:n'}k:kcs",
            "+{a:c; n:n; n:n'; k:kac}k:kas; {a:a; n:n; n:n'; k:kac}k:kcs",
        ],
    );
    s.send((init, 1));
    s.recv((resp, 1));
    s.send((resp, 2));
    s.recv((init, 2));
    s.send((init, 3));
    s.recv((serv, 1));
    s.send((serv, 2));
    s.recv((init, 4));
    s.send((init, 5));
    s.recv((resp, 3));
    s.send((resp, 4));
    s.recv((resp, 5));
    s.send((resp, 6));
    s.recv((resp, 7));
    let theory = ImplTheory::free();
    Golden { name: "woolam_auth", protocol: parse_protocol(corpus::WOOLAM_AUTH).unwrap(), bundle: s.finish(&theory), theory }
}

pub fn golden_attacks() -> Vec<Golden> {
    vec![nspk(), wmf(), woolam_pi1(), dssk()]
}

pub struct Run {
    pub name: &'static str,
    pub protocol: Protocol,
    pub theory: ImplTheory,
    pub scenario: shrimp::verifier::Scenario,
    pub verdict: shrimp::verifier::Verdict,
}

/// The corpus configurations the verifier settles within its cap, each
/// one an attack.
pub fn corpus_runs() -> Vec<Run> {
    use shrimp::verifier::{verify, Scenario};
    let nc = parse_theory(corpus::NONCE_CIPHER).unwrap();
    let free = ImplTheory::free();
    let pi1 = parse_protocol(corpus::WOOLAM_PI1).unwrap();
    let cases = [
        ("nspk", corpus::NSPK, free.clone(), None),
        ("nspk/nonce-cipher", corpus::NSPK, nc.clone(), None),
        ("wmf", corpus::WMF, free.clone(), None),
        ("dssk", corpus::DSSK, free.clone(), None),
        ("woolam_pi1/nonce-cipher", corpus::WOOLAM_PI1, nc.clone(), None),
        ("woolam_pi1/nonce-cipher/canonical", corpus::WOOLAM_PI1, nc, Some(Scenario::canonical(&pi1))),
    ];
    cases
        .into_iter()
        .map(|(name, src, theory, sc)| {
            let protocol = parse_protocol(src).unwrap();
            let scenario = sc.unwrap_or_default();
            let verdict = verify(&protocol, &theory, &scenario).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(verdict.attack.is_some(), "{name}");
            Run { name, protocol, theory, scenario, verdict }
        })
        .collect()
}
