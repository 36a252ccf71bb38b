//! Line-oriented graph text format and dot export.
//!
//! ```text
//! SGRAPH v1
//! node 0 Variable data in=- shape=0,784
//! node 1 Variable fc1_weight in=-
//! node 3 FullyConnected fc1 in=0:0,1:0,2:0 num_hidden=64
//! node 9 _backward fc1_backward in=8:0,0:0,1:0 fwd=3 forward_op=FullyConnected num_hidden=64
//! output 3:0
//! ```

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use crate::error::GraphError;
use crate::graph::{Entry, GNode, Graph};
use crate::ops::OpKind;
use crate::symbol::Symbol;

pub const HEADER: &str = "SGRAPH v1";

pub fn save(sym: &Symbol) -> String {
    save_graph(&sym.to_graph())
}

pub fn load(text: &str) -> Result<Symbol, GraphError> {
    Ok(Symbol::from_graph(&load_graph(text)?))
}

fn entry_list(entries: &[Entry]) -> String {
    if entries.is_empty() {
        return "-".to_string();
    }
    let parts: Vec<String> = entries.iter().map(|e| format!("{}:{}", e.node, e.index)).collect();
    parts.join(",")
}

pub fn save_graph(g: &Graph) -> String {
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    for (i, n) in g.nodes.iter().enumerate() {
        let _ = write!(out, "node {i} {} {} in={}", n.op.name(), n.name, entry_list(&n.inputs));
        if let Some(f) = n.forward {
            let _ = write!(out, " fwd={f}");
        }
        if let Some(h) = &n.shape_hint {
            let dims: Vec<String> = h.iter().map(|d| format!("{d}")).collect();
            let _ = write!(out, " shape={}", dims.join(","));
        }
        for (k, v) in n.op.attrs() {
            let _ = write!(out, " {k}={v}");
        }
        out.push('\n');
    }
    for e in &g.outputs {
        let _ = writeln!(out, "output {}:{}", e.node, e.index);
    }
    out
}

fn parse_err(line: usize, reason: impl Into<String>) -> GraphError {
    GraphError::Parse { line, reason: reason.into() }
}

fn parse_entry(line: usize, s: &str) -> Result<Entry, GraphError> {
    let (a, b) = s.split_once(':').ok_or_else(|| parse_err(line, format!("bad entry `{s}`")))?;
    let node = a.parse().map_err(|_| parse_err(line, format!("bad node index `{a}`")))?;
    let index = b.parse().map_err(|_| parse_err(line, format!("bad output index `{b}`")))?;
    Ok(Entry { node, index })
}

/// Parses the text format. Errors carry 1-based line numbers.
pub fn load_graph(text: &str) -> Result<Graph, GraphError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, HEADER)) => {}
        Some((n, other)) => return Err(parse_err(n, format!("expected `{HEADER}`, got `{other}`"))),
        None => return Err(parse_err(1, "empty input")),
    }
    let mut nodes: Vec<GNode> = Vec::new();
    let mut outputs = Vec::new();
    for (ln, line) in lines {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut words = line.split_whitespace();
        match words.next() {
            Some("node") => {
                if !outputs.is_empty() {
                    return Err(parse_err(ln, "node after output"));
                }
                let idx: usize = words
                    .next()
                    .and_then(|w| w.parse().ok())
                    .ok_or_else(|| parse_err(ln, "missing node index"))?;
                if idx != nodes.len() {
                    return Err(parse_err(ln, format!("expected node {}, got {idx}", nodes.len())));
                }
                let op_name = words.next().ok_or_else(|| parse_err(ln, "missing operator"))?;
                let name = words.next().ok_or_else(|| parse_err(ln, "missing node name"))?;
                let mut inputs = None;
                let mut forward = None;
                let mut shape_hint = None;
                let mut attrs = Vec::new();
                for w in words {
                    let (k, v) = w
                        .split_once('=')
                        .ok_or_else(|| parse_err(ln, format!("expected key=value, got `{w}`")))?;
                    match k {
                        "in" if v == "-" => inputs = Some(Vec::new()),
                        "in" => {
                            let es: Result<Vec<Entry>, GraphError> =
                                v.split(',').map(|s| parse_entry(ln, s)).collect();
                            inputs = Some(es?);
                        }
                        "fwd" => {
                            forward = Some(v.parse().map_err(|_| parse_err(ln, "bad fwd index"))?)
                        }
                        "shape" if op_name == "Variable" => {
                            let dims: Result<Vec<usize>, _> = v.split(',').map(str::parse).collect();
                            shape_hint = Some(dims.map_err(|_| parse_err(ln, "bad shape"))?);
                        }
                        _ => attrs.push((k.to_string(), v.to_string())),
                    }
                }
                let op = OpKind::from_parts(op_name, &attrs).map_err(|e| parse_err(ln, format!("{e}")))?;
                let inputs = inputs.ok_or_else(|| parse_err(ln, "missing in="))?;
                if inputs.len() != op.num_inputs() {
                    return Err(parse_err(
                        ln,
                        format!("{op_name} takes {} inputs, got {}", op.num_inputs(), inputs.len()),
                    ));
                }
                for e in &inputs {
                    if e.node >= idx || e.index >= nodes[e.node].op.num_outputs() {
                        return Err(parse_err(ln, format!("input {}:{} is not an earlier output", e.node, e.index)));
                    }
                }
                nodes.push(GNode { op, name: name.to_string(), inputs, forward, shape_hint });
            }
            Some("output") => {
                let e = parse_entry(ln, words.next().ok_or_else(|| parse_err(ln, "missing entry"))?)?;
                if e.node >= nodes.len() || e.index >= nodes[e.node].op.num_outputs() {
                    return Err(parse_err(ln, format!("output {}:{} does not exist", e.node, e.index)));
                }
                outputs.push(e);
            }
            Some(other) => return Err(parse_err(ln, format!("unknown record `{other}`"))),
            None => {}
        }
    }
    if outputs.is_empty() {
        return Err(parse_err(text.lines().count().max(1), "graph has no outputs"));
    }
    let g = Graph { nodes, outputs };
    g.validate()?;
    Ok(g)
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Dot description: one vertex per node, one edge per data input.
pub fn to_dot(g: &Graph) -> String {
    let mut out = String::from("digraph tessel {\n  rankdir=BT;\n");
    for (i, n) in g.nodes.iter().enumerate() {
        let shape = if n.is_variable() { "ellipse" } else { "box" };
        let _ = writeln!(
            out,
            "  n{i} [label=\"{}\\n{}\", shape={shape}];",
            dot_escape(&n.name),
            n.op.name()
        );
    }
    for (i, n) in g.nodes.iter().enumerate() {
        for e in &n.inputs {
            let _ = writeln!(out, "  n{} -> n{i};", e.node);
        }
    }
    out.push_str("}\n");
    out
}
