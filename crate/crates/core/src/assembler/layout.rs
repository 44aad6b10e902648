use std::collections::BTreeMap;

use crate::flow::Flow;

pub const X0: f64 = 80.0;
pub const Y0: f64 = 60.0;
pub const DX: f64 = 350.0;
pub const DY: f64 = 220.0;

/// Longest-path depth of every node from a source. Nodes on a cycle get no
/// depth.
pub fn depths(flow: &Flow) -> BTreeMap<String, usize> {
    let mut depth: BTreeMap<String, usize> = BTreeMap::new();
    let Ok(order) = crate::flow::topological_order(flow) else {
        return depth;
    };
    for id in order {
        let d = flow
            .incoming(&id)
            .filter_map(|e| depth.get(&e.from_node))
            .map(|d| d + 1)
            .max()
            .unwrap_or(0);
        depth.insert(id, d);
    }
    depth
}

/// Left-to-right layered positions: column by depth, row by id order within
/// the column.
pub fn layout(flow: Flow) -> Flow {
    let depth = depths(&flow);
    let mut row_of: BTreeMap<String, usize> = BTreeMap::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    for n in flow.nodes() {
        if let Some(d) = depth.get(&n.id) {
            let r = rows.entry(*d).or_default();
            row_of.insert(n.id.clone(), *r);
            *r += 1;
        }
    }
    let (mut nodes, edges) = flow.clone().into_parts();
    for n in &mut nodes {
        if let (Some(d), Some(r)) = (depth.get(&n.id), row_of.get(&n.id)) {
            n.x = X0 + DX * *d as f64;
            n.y = Y0 + DY * *r as f64;
        }
    }
    flow.with_nodes(nodes).with_edges(edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{Edge, Node, Provenance};
    use chrono::DateTime;

    fn flow(ids: &[&str], edges: &[(&str, &str)]) -> Flow {
        Flow::new(
            "f",
            "f",
            ids.iter().map(|i| Node::text_fields(i, i, vec![])).collect(),
            edges.iter().map(|(a, b)| Edge::new(a, "fields", b, "x")).collect(),
            DateTime::UNIX_EPOCH,
            Provenance::Manual,
        )
    }

    fn positions(f: &Flow) -> Vec<(f64, f64)> {
        f.nodes().iter().map(|n| (n.x, n.y)).collect()
    }

    #[test]
    fn chain() {
        let f = layout(flow(&["a", "b", "c"], &[("a", "b"), ("b", "c")]));
        assert_eq!(positions(&f), vec![(80.0, 60.0), (430.0, 60.0), (780.0, 60.0)]);
    }

    #[test]
    fn two_sources_one_sink() {
        let f = layout(flow(&["a", "b", "s"], &[("a", "s"), ("b", "s")]));
        assert_eq!(positions(&f), vec![(80.0, 60.0), (80.0, 280.0), (430.0, 60.0)]);
    }

    #[test]
    fn longest_path_and_idempotence() {
        let f = layout(flow(&["a", "b", "c"], &[("a", "b"), ("b", "c"), ("a", "c")]));
        assert_eq!(f.node("c").unwrap().x, 780.0);
        assert_eq!(layout(f.clone()), f);
        let empty = flow(&[], &[]);
        assert_eq!(layout(empty.clone()), empty);
    }
}
