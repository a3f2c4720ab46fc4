use std::fmt::Write;

use super::tree::HsdTree;

/// Graphviz digraph of the tree, nodes in id order.
pub fn export_dot(tree: &HsdTree) -> String {
    let mut out = String::from("digraph hsd {\n  node [shape=box];\n");
    for n in tree.nodes() {
        let classes: Vec<String> = n.classes.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(
            out,
            "  n{} [label=\"id={} L={} ch={} C={{{}}}\"];",
            n.id,
            n.id,
            n.layer,
            n.channels.len(),
            classes.join(",")
        );
    }
    for n in tree.nodes() {
        if let Some(p) = n.parent {
            let _ = writeln!(out, "  n{p} -> n{};", n.id);
        }
    }
    out.push_str("}\n");
    out
}
