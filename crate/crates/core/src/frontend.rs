//! Versioned JSON documents and DOT drawings of bundles.

use std::fmt::Write as _;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::coverage::Coverage;
use crate::diagnosis::Confusion;
use crate::protocol::render_protocol;
use crate::repair::{RepairStep, RepairTrace};
use crate::strand::{Bundle, NodeId, Sign, StrandKind};
use crate::verifier::Attack;

pub const FORMAT: &str = "shrimp/1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrontendError {
    #[error("malformed-json: {0}")]
    MalformedJson(String),
    #[error("unsupported format `{0}`, expected `{FORMAT}`")]
    WrongFormat(String),
    #[error("expected a `{expected}` document, found `{found}`")]
    WrongKind { expected: &'static str, found: String },
}

fn document<T: Serialize>(kind: &str, field: &str, body: &T) -> String {
    let mut v = json!({ "format": FORMAT, "kind": kind });
    v[field] = serde_json::to_value(body).expect("serializable");
    serde_json::to_string_pretty(&v).expect("serializable")
}

fn read_document(text: &str) -> Result<(String, Value), FrontendError> {
    let v: Value = serde_json::from_str(text).map_err(|e| FrontendError::MalformedJson(e.to_string()))?;
    let format = v.get("format").and_then(Value::as_str).unwrap_or("");
    if format != FORMAT {
        return Err(FrontendError::WrongFormat(format.to_string()));
    }
    let kind = v.get("kind").and_then(Value::as_str).unwrap_or("").to_string();
    Ok((kind, v))
}

fn field<T: DeserializeOwned>(v: &Value, name: &str) -> Result<T, FrontendError> {
    let inner = v.get(name).ok_or_else(|| FrontendError::MalformedJson(format!("missing field `{name}`")))?;
    T::deserialize(inner).map_err(|e| FrontendError::MalformedJson(e.to_string()))
}

pub fn bundle_to_json(b: &Bundle) -> String {
    document("bundle", "bundle", b)
}

/// Reads a bundle document, or the bundle inside an attack document.
pub fn bundle_from_json(text: &str) -> Result<Bundle, FrontendError> {
    let (kind, v) = read_document(text)?;
    match kind.as_str() {
        "bundle" => field(&v, "bundle"),
        "attack" => Ok(field::<Attack>(&v, "attack")?.bundle),
        _ => Err(FrontendError::WrongKind { expected: "bundle", found: kind }),
    }
}

pub fn attack_to_json(a: &Attack) -> String {
    document("attack", "attack", a)
}

pub fn attack_from_json(text: &str) -> Result<Attack, FrontendError> {
    let (kind, v) = read_document(text)?;
    match kind.as_str() {
        "attack" => field(&v, "attack"),
        _ => Err(FrontendError::WrongKind { expected: "attack", found: kind }),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub coverage: Coverage,
    pub confusions: Vec<Confusion>,
}

pub fn diagnosis_to_json(d: &Diagnosis) -> String {
    document("diagnosis", "diagnosis", d)
}

pub fn diagnosis_from_json(text: &str) -> Result<Diagnosis, FrontendError> {
    let (kind, v) = read_document(text)?;
    match kind.as_str() {
        "diagnosis" => field(&v, "diagnosis"),
        _ => Err(FrontendError::WrongKind { expected: "diagnosis", found: kind }),
    }
}

fn step_value(s: &RepairStep) -> Value {
    json!({
        "protocol": render_protocol(&s.protocol),
        "goal": s.attack.goal.to_string(),
        "attack": s.attack,
        "confusions": s.confusions,
        "rule": s.patch.rule,
        "confusion": s.patch.confusion,
        "substitution": s.patch.substitution,
        "handshake": s.patch.handshake,
        "verdict": "attack",
    })
}

/// One entry per iteration, protocols in their textual form. `error` is set
/// when the loop stopped without reaching a secure protocol.
pub fn trace_to_json(steps: &[RepairStep], outcome: Result<&RepairTrace, String>) -> String {
    let mut v = json!({
        "format": FORMAT,
        "kind": "repair-trace",
        "iterations": steps.iter().map(step_value).collect::<Vec<_>>(),
    });
    match outcome {
        Ok(t) => {
            v["repaired"] = Value::String(render_protocol(&t.repaired));
            v["verdict"] = json!("secure");
            v["explored"] = json!(t.explored);
        }
        Err(e) => {
            v["verdict"] = json!("failed");
            v["error"] = Value::String(e);
        }
    }
    serde_json::to_string_pretty(&v).expect("serializable")
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

fn node_name(v: NodeId) -> String {
    format!("n{}_{}", v.strand, v.index)
}

/// Honest strands get one column each; penetrator strands share the spy
/// column on the right.
pub fn bundle_to_dot(b: &Bundle) -> String {
    let mut out = String::from("digraph bundle {\n  rankdir=TB;\n  node [shape=box, fontname=\"monospace\"];\n");
    let honest: Vec<usize> = b.honest_strands().collect();
    let spy: Vec<usize> = (0..b.strands.len()).filter(|s| !honest.contains(s)).collect();
    let label = |v: NodeId| {
        let n = b.node(v);
        let sign = if n.sign == Sign::Plus { '+' } else { '-' };
        escape(&format!("{sign}{}", n.msg))
    };
    for &s in &honest {
        let st = &b.strands[s];
        let title = match &st.role {
            Some(r) => format!("{} ({}[{}])", st.agent, r.role, r.upto),
            None => st.agent.clone(),
        };
        let _ = writeln!(out, "  subgraph cluster_{s} {{\n    label=\"{}\";", escape(&title));
        for i in 1..=st.nodes.len() {
            let v = NodeId::new(s, i);
            let _ = writeln!(out, "    {} [label=\"{}\"];", node_name(v), label(v));
        }
        out.push_str("  }\n");
    }
    if !spy.is_empty() {
        out.push_str("  subgraph cluster_spy {\n    label=\"spy\";\n    style=dashed;\n");
        for &s in &spy {
            let StrandKind::Pen(k) = b.strands[s].kind else { continue };
            for i in 1..=b.strands[s].nodes.len() {
                let v = NodeId::new(s, i);
                let _ = writeln!(out, "    {} [label=\"{k:?}: {}\", style=rounded];", node_name(v), label(v));
            }
        }
        out.push_str("  }\n");
    }
    for (s, st) in b.strands.iter().enumerate() {
        for i in 1..st.nodes.len() {
            let _ = writeln!(
                out,
                "  {} -> {} [style=bold, arrowhead=none];",
                node_name(NodeId::new(s, i)),
                node_name(NodeId::new(s, i + 1))
            );
        }
    }
    for (u, v) in &b.edges {
        let _ = writeln!(out, "  {} -> {};", node_name(*u), node_name(*v));
    }
    out.push_str("}\n");
    out
}

/// A plain listing of the bundle, one strand per paragraph.
pub fn bundle_to_text(b: &Bundle) -> String {
    let mut out = String::new();
    for (s, st) in b.strands.iter().enumerate() {
        let kind = match st.kind {
            StrandKind::Honest => match &st.role {
                Some(r) => format!("{}[{}]", r.role, r.upto),
                None => "honest".to_string(),
            },
            StrandKind::Pen(k) => format!("{k:?}"),
        };
        let _ = writeln!(out, "strand {s} {kind} {}", st.agent);
        for (i, n) in st.nodes.iter().enumerate() {
            let v = NodeId::new(s, i + 1);
            let sign = if n.sign == Sign::Plus { '+' } else { '-' };
            let from = b.sender(v).map(|u| format!("  <- {u}")).unwrap_or_default();
            let _ = writeln!(out, "  {} {sign}{}{from}", i + 1, n.msg);
        }
    }
    out
}
