//! Graphviz exports of an estimated network.

use std::fmt::Write;

use crate::document::FitDocument;

pub const DEFAULT_CTOL: f64 = 1e-6;

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// Variables as nodes, estimated support as edges.
pub fn full_graph(doc: &FitDocument) -> String {
    let mut out = String::from("graph full {\n  node [shape=circle];\n");
    for (j, name) in doc.variables.iter().enumerate() {
        writeln!(out, "  v{j} [label={}];", quote(name)).unwrap();
    }
    let mut edges = doc.edges.clone();
    edges.sort_unstable();
    for [i, j] in edges {
        writeln!(out, "  v{i} -- v{j};").unwrap();
    }
    out.push_str("}\n");
    out
}

/// Blocks as nodes sized by member count, with an edge wherever
/// `|C_ab| > ctol`.
pub fn aggregated_graph(doc: &FitDocument, ctol: f64) -> String {
    let partition = doc.partition();
    let blocks = partition.blocks();
    let mut out = String::from("graph aggregated {\n  node [shape=circle, fixedsize=true];\n");
    for (b, members) in blocks.iter().enumerate() {
        let names: Vec<&str> = members.iter().map(|&j| doc.variables[j].as_str()).collect();
        let width = 0.5 * (members.len() as f64).sqrt();
        writeln!(
            out,
            "  b{} [label={}, members={}, size={}, width={width:.4}];",
            b + 1,
            quote(&format!("B{}", b + 1)),
            quote(&names.join(",")),
            members.len()
        )
        .unwrap();
    }
    let c = &doc.aggregated.c;
    for a in 0..c.len() {
        for b in (a + 1)..c.len() {
            if c[a][b].abs() > ctol {
                writeln!(out, "  b{} -- b{} [weight={}];", a + 1, b + 1, c[a][b]).unwrap();
            }
        }
    }
    out.push_str("}\n");
    out
}
