//! Random flow generators shared by the property suites.

#![allow(dead_code)]

use chrono::DateTime;
use proptest::prelude::*;

use flowsmith_core::flow::{parse_template, Edge, Flow, ModelRef, Node, NodePayload, Provenance};

/// A Prompt node fed by a tree of TextFields nodes. Variable `i` is node
/// `v{i}`; its parent is the Prompt node (`None`) or an earlier variable.
#[derive(Debug, Clone)]
pub struct TreeSpec {
    pub parents: Vec<Option<usize>>,
    /// Per variable, per field: whether the field carries the placeholders of
    /// the variable's children.
    pub masks: Vec<Vec<bool>>,
    pub models: usize,
    pub samples: u32,
}

pub fn tree_spec() -> impl Strategy<Value = TreeSpec> {
    (0usize..=4)
        .prop_flat_map(|n| {
            let parents: Vec<BoxedStrategy<Option<usize>>> =
                (0..n).map(|i| proptest::option::of(0..i.max(1)).prop_map(move |p| p.filter(|_| i > 0)).boxed()).collect();
            let masks = proptest::collection::vec(proptest::collection::vec(any::<bool>(), 1..=3), n);
            (parents, masks, 1usize..=3, 1u32..=3)
        })
        .prop_map(|(parents, mut masks, models, samples)| {
            for (i, m) in masks.iter_mut().enumerate() {
                if parents.contains(&Some(i)) {
                    m[0] = true;
                }
            }
            TreeSpec { parents, masks, models, samples }
        })
}

impl TreeSpec {
    pub fn children(&self, parent: Option<usize>) -> Vec<usize> {
        (0..self.parents.len()).filter(|&i| self.parents[i] == parent).collect()
    }

    fn field_text(&self, var: usize, field: usize) -> String {
        let mut s = format!("f{var}_{field}");
        if self.masks[var][field] {
            for c in self.children(Some(var)) {
                s.push_str(&format!(" {{v{c}}}"));
            }
        }
        s
    }

    fn prompt_text(&self) -> String {
        let mut s = String::from("P");
        for c in self.children(None) {
            s.push_str(&format!(" {{v{c}}}"));
        }
        s
    }

    pub fn flow(&self) -> Flow {
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        for i in 0..self.parents.len() {
            let fields = (0..self.masks[i].len()).map(|k| parse_template(&self.field_text(i, k)).unwrap()).collect();
            nodes.push(Node::text_fields(&format!("v{i}"), &format!("v{i}"), fields));
            let parent = self.parents[i].map_or("p".to_owned(), |p| format!("v{p}"));
            edges.push(Edge::new(&format!("v{i}"), "fields", &parent, &format!("v{i}")));
        }
        let models = (0..self.models).map(|m| ModelRef::new("mock", format!("m{m}"))).collect();
        let mut prompt = Node::prompt("p", "prompt", parse_template(&self.prompt_text()).unwrap(), models);
        if let NodePayload::Prompt(p) = &mut prompt.payload {
            p.samples_per_prompt = self.samples;
        }
        nodes.push(prompt);
        Flow::new("prop", "prop", nodes, edges, DateTime::UNIX_EPOCH, Provenance::Manual)
    }

    /// Brute-force enumeration by plain string substitution, one model.
    pub fn enumerate(&self) -> Vec<String> {
        self.substitute(self.prompt_text(), None)
    }

    fn substitute(&self, text: String, owner: Option<usize>) -> Vec<String> {
        let mut out = vec![text];
        for c in self.children(owner) {
            let placeholder = format!("{{v{c}}}");
            if !out[0].contains(&placeholder) {
                continue;
            }
            let values: Vec<String> =
                (0..self.masks[c].len()).flat_map(|k| self.substitute(self.field_text(c, k), Some(c))).collect();
            let placeholder = &placeholder;
            out = out.iter().flat_map(|s| values.iter().map(move |v| s.replace(placeholder, v))).collect();
        }
        out
    }
}

/// A random DAG of TextFields nodes: an edge `i -> j` (i < j) binds
/// variable `v{i}` in every field of node `n{j}`.
#[derive(Debug, Clone)]
pub struct DagSpec {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
}

pub fn dag_spec() -> impl Strategy<Value = DagSpec> {
    (2usize..=8).prop_flat_map(|n| {
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|j| (0..j).map(move |i| (i, j))).collect();
        let len = pairs.len();
        proptest::collection::vec(any::<bool>(), len).prop_map(move |keep| DagSpec {
            n,
            edges: pairs.iter().zip(&keep).filter(|(_, k)| **k).map(|(p, _)| *p).collect(),
        })
    })
}

impl DagSpec {
    pub fn flow_with(&self, extra: &[(usize, usize)]) -> Flow {
        let all: Vec<(usize, usize)> = self.edges.iter().chain(extra).copied().collect();
        let nodes = (0..self.n)
            .map(|j| {
                let mut text = format!("node {j}");
                for (i, _) in all.iter().filter(|(_, t)| *t == j) {
                    text.push_str(&format!(" {{v{i}}}"));
                }
                Node::text_fields(&format!("n{j}"), &format!("v{j}"), vec![parse_template(&text).unwrap()])
            })
            .collect();
        let edges = all.iter().map(|(i, j)| Edge::new(&format!("n{i}"), "fields", &format!("n{j}"), &format!("v{i}"))).collect();
        Flow::new("dag", "dag", nodes, edges, DateTime::UNIX_EPOCH, Provenance::Manual)
    }

    pub fn flow(&self) -> Flow {
        self.flow_with(&[])
    }

    /// Some pair `(a, b)` with a path from `a` to `b`, if any edge exists.
    pub fn reachable_pair(&self, pick: usize) -> Option<(usize, usize)> {
        if self.edges.is_empty() {
            return None;
        }
        Some(self.edges[pick % self.edges.len()])
    }
}

/// Reorders the node and edge arrays of a serialized flow and moves node
/// positions, leaving the structure alone.
pub fn shuffle_document(bytes: &[u8], seed: u64) -> Vec<u8> {
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    let mut doc: serde_json::Value = serde_json::from_slice(bytes).unwrap();
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    for key in ["nodes", "edges"] {
        doc[key].as_array_mut().unwrap().shuffle(&mut rng);
    }
    for node in doc["nodes"].as_array_mut().unwrap() {
        for axis in ["x", "y"] {
            let v = node[axis].as_f64().unwrap() + rng.random_range(-100.0..100.0);
            node[axis] = serde_json::json!(v);
        }
    }
    serde_json::to_vec(&doc).unwrap()
}
