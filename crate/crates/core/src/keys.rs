use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::term::Atom;

/// Long-term key infrastructure and the penetrator's initial keys.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyTable {
    pub public_key: BTreeMap<String, Atom>,
    pub shared_key: BTreeMap<(String, String), Atom>,
    pub penetrator_keys: BTreeSet<Atom>,
}

fn pair(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl KeyTable {
    pub fn inverse(&self, k: &Atom) -> Atom {
        k.inverse()
    }

    pub fn add_public(&mut self, agent: &str) -> Atom {
        let k = Atom::public_key(agent);
        self.public_key.insert(agent.to_string(), k.clone());
        k
    }

    pub fn add_shared(&mut self, a: &str, b: &str, key: Atom) {
        self.shared_key.insert(pair(a, b), key);
    }

    pub fn shared(&self, a: &str, b: &str) -> Option<&Atom> {
        self.shared_key.get(&pair(a, b))
    }

    /// Agents a key belongs to: the owner of a key pair, or both ends of a shared key.
    pub fn owners(&self, k: &Atom) -> Vec<String> {
        if let Some(o) = k.key_owner() {
            return vec![o.to_string()];
        }
        self.shared_key
            .iter()
            .find(|(_, v)| *v == k)
            .map(|((a, b), _)| vec![a.clone(), b.clone()])
            .unwrap_or_default()
    }

    /// Keys an agent holds from the start: its private key, every public key,
    /// and the shared keys it is party to.
    pub fn keys_of(&self, agent: &str) -> BTreeSet<Atom> {
        let mut out: BTreeSet<Atom> = self.public_key.values().cloned().collect();
        if self.public_key.contains_key(agent) {
            out.insert(Atom::private_key(agent));
        }
        for ((a, b), k) in &self.shared_key {
            if a == agent || b == agent {
                out.insert(k.clone());
            }
        }
        out
    }

    /// The table seen from a renamed world: agent names and keys mapped through `f`.
    pub fn renamed(&self, f: &BTreeMap<String, String>) -> KeyTable {
        let m = |s: &String| f.get(s).cloned().unwrap_or_else(|| s.clone());
        let mut out = KeyTable { penetrator_keys: self.penetrator_keys.clone(), ..Default::default() };
        for a in self.public_key.keys() {
            out.add_public(&m(a));
        }
        for ((a, b), k) in &self.shared_key {
            out.add_shared(&m(a), &m(b), k.clone());
        }
        out
    }
}
