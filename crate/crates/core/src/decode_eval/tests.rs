use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;
use crate::corpus::{Document, Event, Tlink};

fn scores(n: usize, arc: Option<Vec<f64>>, rel: Vec<f64>, labels: usize) -> ScoreSet<f64> {
    ScoreSet {
        n,
        includes_none: arc.is_none(),
        s_arc: arc,
        s_rel: rel,
        labels,
    }
}

fn tb() -> DatasetProfile {
    DatasetProfile::tbdense()
}

fn id(r: Relation) -> LabelId {
    tb().id_of(r).unwrap()
}

#[test]
fn arc_pred_is_strictly_positive() {
    let s = scores(2, Some(vec![0.0, 0.3, -0.5, 0.0]), vec![0.0; 2 * 2 * 6], 6);
    assert!(arc_pred(&s, 0, 1).unwrap());
    assert!(!arc_pred(&s, 1, 0).unwrap());
    let z = scores(2, Some(vec![0.0; 4]), vec![0.0; 24], 6);
    assert!(!arc_pred(&z, 0, 1).unwrap());
    assert_eq!(arc_pred(&s, 1, 1), Err(DecodeError::SelfPair(1)));
    assert!(matches!(arc_pred(&s, 0, 2), Err(DecodeError::OutOfRange { .. })));
    let no_arc = scores(2, None, vec![0.0; 2 * 2 * 7], 7);
    assert_eq!(arc_pred(&no_arc, 0, 1), Err(DecodeError::NoArcScores));
}

#[test]
fn label_pred_argmax_and_ties() {
    let mut rel = vec![0.0; 2 * 2 * 3];
    rel[3..6].copy_from_slice(&[1.0, 2.0, 0.5]);
    let s = scores(2, None, rel, 3);
    assert_eq!(label_pred(&s, 0, 1).unwrap(), LabelId(1));

    let mut rel = vec![0.0; 2 * 2 * 6];
    rel[6..12].copy_from_slice(&[0.0, 0.1, 3.0, 0.2, 3.0, -1.0]);
    let s = scores(2, None, rel, 6);
    assert_eq!(label_pred(&s, 0, 1).unwrap(), LabelId(2));
    // With an ARC module, slot k is label k + 1.
    let s = scores(2, Some(vec![0.0; 4]), s.s_rel, 6);
    assert_eq!(label_pred(&s, 0, 1).unwrap(), LabelId(3));
    assert!(label_pred(&s, 0, 0).is_err());
}

#[test]
fn decode_examples() {
    // n = 2: arcs both negative → nothing.
    let mut rel = vec![0.0; 2 * 2 * 6];
    rel[6] = 5.0; // (0,1) argmax slot 0 = BEFORE
    let s = scores(2, Some(vec![0.0, -0.5, -1.2, 0.0]), rel.clone(), 6);
    assert!(decode(&s).edges.is_empty());
    let s = scores(2, Some(vec![0.0, 0.4, -1.2, 0.0]), rel.clone(), 6);
    let g = decode(&s);
    assert_eq!(g.edges, BTreeMap::from([((0, 1), id(Relation::Before))]));
    // Only the reverse arc is positive: the pair still gets the upper-triangle label.
    let s = scores(2, Some(vec![0.0, -0.4, 1.2, 0.0]), rel, 6);
    assert_eq!(decode(&s).edges[&(0, 1)], id(Relation::Before));
    assert_eq!(decode(&s).label(1, 0, &tb()).unwrap(), id(Relation::After));
}

#[test]
fn decode_without_arc_skips_none() {
    let mut rel = vec![0.0; 3 * 3 * 7];
    rel[(1) * 7] = 1.0; // (0,1) → NONE
    rel[2 * 7 + 3] = 1.0; // (0,2) → SIMULTANEOUS
    rel[(3 + 2) * 7 + 6] = 1.0; // (1,2) → IS_INCLUDED
    let g = decode(&scores(3, None, rel, 7));
    assert_eq!(
        g.edges,
        BTreeMap::from([
            ((0, 2), id(Relation::Simultaneous)),
            ((1, 2), id(Relation::IsIncluded)),
        ])
    );
    // Ties at slot 0 count as NONE.
    let g = decode(&scores(3, None, vec![0.0; 63], 7));
    assert!(g.edges.is_empty());
}

/// Per-pair evaluation written directly from the definitions.
fn brute_force(s: &ScoreSet<f64>) -> TemporalGraph {
    let mut g = TemporalGraph::new(s.n);
    for i in 0..s.n {
        for j in i + 1..s.n {
            let label = label_pred(s, i, j).unwrap();
            let emit = match s.s_arc {
                Some(_) => {
                    let a = arc_pred(s, i, j).unwrap() as u8 + arc_pred(s, j, i).unwrap() as u8;
                    a > 0
                }
                None => !label.is_none(),
            };
            if emit && !label.is_none() {
                g.edges.insert((i, j), label);
            }
        }
    }
    g
}

fn score_set_strategy() -> impl Strategy<Value = ScoreSet<f64>> {
    (1usize..=12, any::<bool>()).prop_flat_map(|(n, with_arc)| {
        let labels = if with_arc { 6 } else { 7 };
        // Coarse values so that exact ties and zero logits actually occur.
        let cell = prop_oneof![Just(0.0), (-4i32..=4).prop_map(|v| v as f64 * 0.5)];
        (
            proptest::collection::vec(cell.clone(), n * n),
            proptest::collection::vec(cell, n * n * labels),
        )
            .prop_map(move |(a, r)| scores(n, with_arc.then_some(a), r, labels))
    })
}

proptest! {
    #[test]
    fn decode_matches_brute_force(s in score_set_strategy()) {
        let g = decode(&s);
        prop_assert_eq!(&g, &brute_force(&s));
        g.validate(&tb()).unwrap();
    }

    #[test]
    fn argmax_matches_scan(row in proptest::collection::vec(-2i32..=2, 1..8)) {
        let row: Vec<f64> = row.into_iter().map(f64::from).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let first = row.iter().position(|&x| x == max).unwrap();
        prop_assert_eq!(argmax(&row), first);
    }

    #[test]
    fn evaluate_is_direction_invariant(
        pairs in proptest::collection::vec((0u8..5, 0u8..5, 0u8..7, 0u8..7, any::<bool>()), 0..20)
    ) {
        let p = tb();
        let mut gold = PairLabels::new();
        let mut flipped = PairLabels::new();
        let mut pred = PairLabels::new();
        for (a, b, g, q, flip) in pairs {
            if a == b {
                continue;
            }
            let (ea, eb) = (format!("e{a}"), format!("e{b}"));
            gold.insert("d", &ea, &eb, LabelId(g), &p).unwrap();
            if flip {
                flipped.insert("d", &eb, &ea, p.inverse(LabelId(g)).unwrap(), &p).unwrap();
            } else {
                flipped.insert("d", &ea, &eb, LabelId(g), &p).unwrap();
            }
            pred.insert("d", &ea, &eb, LabelId(q), &p).unwrap();
        }
        prop_assert_eq!(&gold, &flipped);
        prop_assert_eq!(evaluate(&pred, &gold, &p).unwrap(), evaluate(&pred, &flipped, &p).unwrap());
        let perfect = evaluate(&gold, &gold, &p).unwrap();
        if perfect.gold > 0 {
            prop_assert_eq!(perfect.micro.f1, 1.0);
            for l in perfect.per_label.iter().filter(|l| l.support > 0) {
                prop_assert_eq!(l.scores.f1, 1.0);
            }
        }
    }
}

#[test]
fn graph_label_and_validation() {
    let p = tb();
    let mut g = TemporalGraph::new(4);
    g.edges.insert((0, 3), id(Relation::Includes));
    assert_eq!(g.label(3, 0, &p).unwrap(), id(Relation::IsIncluded));
    assert_eq!(g.label(1, 2, &p).unwrap(), LabelId::NONE);
    g.validate(&p).unwrap();
    g.edges.insert((2, 1), id(Relation::Before));
    assert!(g.validate(&p).is_err());
    let mut g = TemporalGraph::new(2);
    g.edges.insert((0, 1), LabelId::NONE);
    assert!(g.validate(&p).is_err());
}

#[test]
fn event_level_uses_first_tokens() {
    let p = tb();
    let events = BTreeMap::from([("e1".to_string(), 2), ("e2".to_string(), 7)]);
    let mut g = TemporalGraph::new(9);
    g.edges.insert((2, 7), id(Relation::Before));
    assert_eq!(
        event_level(&g, &events, &p).unwrap(),
        vec![("e1".into(), "e2".into(), id(Relation::Before))]
    );
    let mut g = TemporalGraph::new(9);
    g.edges.insert((3, 7), id(Relation::Before));
    assert_eq!(
        event_level(&g, &events, &p).unwrap(),
        vec![("e1".into(), "e2".into(), LabelId::NONE)]
    );
    // Later event listed first in the map: pairs follow token order.
    let events = BTreeMap::from([("a".to_string(), 5), ("b".to_string(), 1)]);
    let mut g = TemporalGraph::new(6);
    g.edges.insert((1, 5), id(Relation::Includes));
    assert_eq!(
        event_level(&g, &events, &p).unwrap(),
        vec![("b".into(), "a".into(), id(Relation::Includes))]
    );
    let outside = BTreeMap::from([("x".to_string(), 6)]);
    assert!(matches!(
        event_level(&g, &outside, &p),
        Err(DecodeError::EventOutsideWindow { .. })
    ));
}

#[test]
fn single_token_events_map_identically() {
    let p = tb();
    let events: BTreeMap<String, usize> = (0..4).map(|k| (format!("e{k}"), k)).collect();
    let mut g = TemporalGraph::new(4);
    g.edges.insert((0, 2), id(Relation::After));
    g.edges.insert((1, 3), id(Relation::Vague));
    let out = event_level(&g, &events, &p).unwrap();
    assert_eq!(out.len(), 6);
    for (a, b, l) in out {
        let (i, j) = (events[&a], events[&b]);
        assert_eq!(l, g.label(i, j, &p).unwrap());
    }
}

fn labels(entries: &[(&str, &str, Relation)]) -> PairLabels {
    let mut out = PairLabels::new();
    for &(a, b, r) in entries {
        out.insert("d", a, b, id(r), &tb()).unwrap();
    }
    out
}

#[test]
fn evaluate_hand_count() {
    let gold = labels(&[("A", "B", Relation::Before), ("B", "C", Relation::After)]);
    let pred = labels(&[("A", "B", Relation::Before), ("A", "C", Relation::Vague)]);
    let r = evaluate(&pred, &gold, &tb()).unwrap();
    assert_eq!((r.correct, r.predicted, r.gold), (1, 2, 2));
    assert_eq!(r.micro, Scores { precision: 0.5, recall: 0.5, f1: 0.5 });
    let before = &r.per_label[0];
    assert_eq!(before.relation, Relation::Before);
    assert_eq!(before.scores, Scores { precision: 1.0, recall: 1.0, f1: 1.0 });
    let after = &r.per_label[1];
    assert_eq!((after.support, after.predicted, after.scores.f1), (1, 0, 0.0));
}

#[test]
fn evaluate_perfect_and_empty() {
    let gold = labels(&[
        ("A", "B", Relation::Before),
        ("B", "C", Relation::IsIncluded),
        ("A", "C", Relation::Vague),
    ]);
    let r = evaluate(&gold, &gold, &tb()).unwrap();
    assert_eq!(r.micro, Scores { precision: 1.0, recall: 1.0, f1: 1.0 });
    let r = evaluate(&PairLabels::new(), &gold, &tb()).unwrap();
    assert_eq!(r.micro, Scores { precision: 0.0, recall: 0.0, f1: 0.0 });
    // NONE predictions are not predictions.
    let nones = labels(&[("A", "B", Relation::None)]);
    let r = evaluate(&nones, &gold, &tb()).unwrap();
    assert_eq!(r.predicted, 0);
}

#[test]
fn evaluate_rejects_foreign_labels() {
    let p = tb();
    let mut pairs = PairLabels::new();
    assert!(pairs.insert("d", "a", "b", LabelId(7), &p).is_err());
    pairs.insert("d", "a", "b", LabelId(6), &p).unwrap();
    assert!(evaluate(&pairs, &pairs, &DatasetProfile::matres()).is_err());
}

#[test]
fn pair_labels_canonicalize_and_keep_first() {
    let p = tb();
    let mut pairs = PairLabels::new();
    assert!(pairs.insert("d", "e2", "e1", id(Relation::Includes), &p).unwrap());
    assert!(!pairs.insert("d", "e1", "e2", id(Relation::Before), &p).unwrap());
    let key = ("d".to_string(), "e1".to_string(), "e2".to_string());
    assert_eq!(pairs.get(&key), id(Relation::IsIncluded));
    assert_eq!(pairs.len(), 1);
}

#[test]
fn predicted_pairs_take_first_window() {
    let p = tb();
    let events = BTreeMap::from([("e1".to_string(), 0), ("e2".to_string(), 1)]);
    let empty = TemporalGraph::new(2);
    let mut later = TemporalGraph::new(2);
    later.edges.insert((0, 1), id(Relation::Before));
    let pred = predicted_pairs([("d", &empty, &events), ("d", &later, &events)], &p).unwrap();
    assert_eq!(pred.relations().count(), 0);
    assert_eq!(pred.len(), 1);
    let pred = predicted_pairs([("d", &later, &events), ("d", &empty, &events)], &p).unwrap();
    assert_eq!(pred.relations().count(), 1);
}

#[test]
fn gold_pairs_from_documents() {
    let doc = Document {
        doc_id: "d".into(),
        sentences: vec![vec!["a".into()], vec!["b".into()]],
        events: vec![
            Event { id: "e1".into(), sentence: 0, start: 0, end: 1 },
            Event { id: "e2".into(), sentence: 1, start: 0, end: 1 },
        ],
        tlinks: vec![Tlink { src: "e2".into(), dst: "e1".into(), label: Relation::Before }],
    };
    let gold = gold_pairs(&[doc], &tb()).unwrap();
    let key = ("d".to_string(), "e1".to_string(), "e2".to_string());
    assert_eq!(gold.get(&key), id(Relation::After));
}

#[test]
fn report_renders_in_profile_order() {
    let gold = labels(&[("A", "B", Relation::Before)]);
    let r = evaluate(&gold, &gold, &tb()).unwrap();
    let names: Vec<&str> = r.per_label.iter().map(|l| l.relation.name()).collect();
    assert_eq!(
        names,
        ["BEFORE", "AFTER", "SIMULTANEOUS", "VAGUE", "INCLUDES", "IS_INCLUDED"]
    );
    let table = r.to_table();
    assert!(table.lines().nth(1).unwrap().starts_with("BEFORE"));
    assert!(table.lines().last().unwrap().starts_with("micro"));
    let tsv = r.to_tsv();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines[0], report::EVAL_TSV_MAGIC);
    assert_eq!(lines.len(), 2 + 6 + 1);
    assert!(lines[8].starts_with("micro\t1\t1\t1\t1\t1\t1"));
}
