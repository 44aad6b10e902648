mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;

use common::{dag_spec, shuffle_document, tree_spec};
use flowsmith_core::assembler::layout;
use flowsmith_core::flow::{deserialize, serialize, topological_order, validate, NodeCatalog, Rule};

proptest! {
    #[test]
    fn random_dags_have_no_cycle_violation(spec in dag_spec()) {
        let flow = spec.flow();
        let report = validate(&flow, &NodeCatalog::standard());
        prop_assert!(!report.has(Rule::Cycle));
        prop_assert!(report.is_valid(), "{}", report);

        let order = topological_order(&flow).unwrap();
        prop_assert_eq!(order.len(), spec.n);
        let pos = |id: &str| order.iter().position(|o| o == id).unwrap();
        for e in flow.edges() {
            prop_assert!(pos(&e.from_node) < pos(&e.to_node));
        }
    }

    #[test]
    fn back_edge_adds_exactly_the_cycle(spec in dag_spec(), pick in any::<usize>()) {
        let Some((a, b)) = spec.reachable_pair(pick) else { return Ok(()) };
        let flow = spec.flow_with(&[(b, a)]);
        let rules = validate(&flow, &NodeCatalog::standard()).rules();
        prop_assert_eq!(rules, BTreeSet::from([Rule::Cycle]));
        prop_assert!(topological_order(&flow).is_err());
    }

    #[test]
    fn order_and_report_ignore_document_order(spec in dag_spec(), seed in any::<u64>()) {
        let flow = spec.flow();
        let shuffled = deserialize(&shuffle_document(&serialize(&flow), seed)).unwrap();
        prop_assert_eq!(topological_order(&flow), topological_order(&shuffled));
        let catalog = NodeCatalog::standard();
        prop_assert_eq!(validate(&flow, &catalog), validate(&flow, &catalog));
        prop_assert_eq!(validate(&flow, &catalog), validate(&shuffled, &catalog));
    }

    #[test]
    fn documents_roundtrip(spec in tree_spec()) {
        let flow = spec.flow();
        let bytes = serialize(&flow);
        let back = deserialize(&bytes).unwrap();
        prop_assert_eq!(&back, &flow);
        prop_assert_eq!(serialize(&back), bytes);
    }

    #[test]
    fn layout_is_idempotent(spec in dag_spec()) {
        let once = layout(spec.flow());
        prop_assert_eq!(layout(once.clone()), once);
    }
}
