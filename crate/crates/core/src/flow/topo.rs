use std::collections::{BTreeMap, BTreeSet};

use super::Flow;

/// Kahn's algorithm, always taking the smallest ready node id, so the order
/// depends only on graph structure. Returns the ids left unordered when the
/// graph has a cycle. Edges to unknown nodes are ignored.
pub fn topological_order(flow: &Flow) -> Result<Vec<String>, Vec<String>> {
    let mut indegree: BTreeMap<&str, usize> =
        flow.nodes().iter().map(|n| (n.id.as_str(), 0)).collect();
    let mut succ: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in flow.edges() {
        if !indegree.contains_key(e.from_node.as_str()) || !indegree.contains_key(e.to_node.as_str())
        {
            continue;
        }
        *indegree.get_mut(e.to_node.as_str()).unwrap() += 1;
        succ.entry(e.from_node.as_str()).or_default().push(e.to_node.as_str());
    }

    let mut ready: BTreeSet<&str> = indegree
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(&id, _)| id)
        .collect();
    let mut order = Vec::with_capacity(indegree.len());
    while let Some(id) = ready.pop_first() {
        order.push(id.to_owned());
        for &next in succ.get(id).into_iter().flatten() {
            let d = indegree.get_mut(next).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.insert(next);
            }
        }
    }

    if order.len() == indegree.len() {
        Ok(order)
    } else {
        let done: BTreeSet<&str> = order.iter().map(String::as_str).collect();
        Err(indegree
            .keys()
            .filter(|id| !done.contains(*id))
            .map(|id| (*id).to_owned())
            .collect())
    }
}
