use std::collections::BTreeSet;
use std::path::Path;

use proptest::prelude::*;

use pseudoterm::cluster::{cluster_matches, UtteranceOrder};
use pseudoterm::corpus::{filter_stopwords, split_corpus, tokenize, Corpus, SplitMode, StopwordList, Utterance};
use pseudoterm::eval::{bag, bag_size, corpus_pr, corr_at_k, EvalRecord};
use pseudoterm::features::FeatureMatrix;
use pseudoterm::model1::TranslationTable;
use pseudoterm::translate::translate_utterance;
use pseudoterm::utd::{cosine_similarity_matrix, Match, Segment};

fn utterance(id: String, call: String) -> Utterance {
    Utterance {
        features: format!("{id}.ptft").into(),
        utterance_id: id,
        speaker_id: call.clone(),
        call_id: call,
        audio: None,
        duration_s: 1.0,
        translation: String::new(),
        transcript: None,
        alignment: None,
    }
}

fn corpus_strategy() -> impl Strategy<Value = Corpus> {
    prop::collection::vec(1..6usize, 2..8).prop_map(|sizes| {
        let utts = sizes
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| (0..n).map(move |u| utterance(format!("c{c}_u{u}"), format!("c{c}"))))
            .collect();
        Corpus::new(utts).unwrap()
    })
}

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["a", "b", "c", "the", "and", "car", "ball", "of"]).prop_map(str::to_owned)
}

proptest! {
    #[test]
    fn tokenize_is_a_fixed_point(text in "[A-Za-z ,.!?'-]{0,40}") {
        let once = tokenize(&text);
        prop_assert_eq!(tokenize(&once.join(" ")), once);
    }

    #[test]
    fn stopword_filter_is_idempotent(words in prop::collection::vec(word(), 0..12)) {
        let sw = StopwordList::bundled();
        let once = filter_stopwords(&words, &sw);
        prop_assert_eq!(filter_stopwords(&once, &sw), once.clone());
        prop_assert!(once.iter().all(|w| !sw.contains(w)));
    }

    #[test]
    fn splits_partition_and_repeat(corpus in corpus_strategy(), seed in any::<u64>(), ratio in 0.3f64..0.9) {
        for mode in [SplitMode::Call, SplitMode::Utterance] {
            let Ok(split) = split_corpus(&corpus, mode, ratio, seed) else { continue };
            let again = split_corpus(&corpus, mode, ratio, seed).unwrap();
            prop_assert_eq!(&split, &again);
            let train: BTreeSet<&str> = split.train.iter().map(String::as_str).collect();
            let test: BTreeSet<&str> = split.test.iter().map(String::as_str).collect();
            prop_assert!(train.is_disjoint(&test));
            prop_assert_eq!(train.len() + test.len(), corpus.len());
            prop_assert!(!train.is_empty() && !test.is_empty());
            if mode == SplitMode::Call {
                for ids in corpus.calls().values() {
                    let sides: BTreeSet<bool> = ids.iter().map(|id| train.contains(id.as_str())).collect();
                    prop_assert_eq!(sides.len(), 1, "call split across sides");
                }
            }
        }
    }

    #[test]
    fn corr_is_symmetric_bounded_and_monotone(
        pred in prop::collection::vec(word(), 0..10),
        gold in prop::collection::vec(word(), 0..10),
        extra in word(),
    ) {
        let (p, g) = (bag(pred.clone()), bag(gold));
        let c = corr_at_k(&p, &g);
        prop_assert_eq!(c, corr_at_k(&g, &p));
        prop_assert!(c <= bag_size(&p).min(bag_size(&g)));
        let mut more = pred;
        more.push(extra);
        prop_assert!(corr_at_k(&bag(more), &g) >= c);
    }

    #[test]
    fn corpus_pr_is_bounded_and_perfect_on_identity(
        items in prop::collection::vec((prop::collection::vec(word(), 0..6), prop::collection::vec(word(), 0..6)), 1..6),
    ) {
        let records: Vec<EvalRecord> = items
            .iter()
            .map(|(p, g)| EvalRecord::new("u", bag(p.clone()), bag(g.clone())))
            .collect();
        let pr = corpus_pr(&records).unwrap();
        prop_assert!((0.0..=1.0).contains(&pr.precision) && (0.0..=1.0).contains(&pr.recall));
        let perfect: Vec<EvalRecord> = items
            .iter()
            .filter(|(_, g)| !g.is_empty())
            .map(|(_, g)| EvalRecord::new("u", bag(g.clone()), bag(g.clone())))
            .collect();
        if !perfect.is_empty() {
            let pr = corpus_pr(&perfect).unwrap();
            prop_assert_eq!((pr.precision, pr.recall), (1.0, 1.0));
        }
    }

    #[test]
    fn prediction_size_bound(
        rows in prop::collection::vec(prop::collection::vec(1u32..100, 1..5), 1..4),
        line in prop::collection::vec(0usize..6, 0..8),
        k in 1usize..6,
    ) {
        let mut tsv = String::new();
        for (f, weights) in rows.iter().enumerate() {
            let z: u32 = weights.iter().sum();
            for (e, w) in weights.iter().enumerate() {
                tsv.push_str(&format!("f{f}\tw{e}\t{}\n", f64::from(*w) / f64::from(z)));
            }
        }
        let table = TranslationTable::from_tsv(&tsv, Path::new("t.tsv")).unwrap();
        let line: Vec<String> = line.iter().map(|i| format!("f{i}")).collect();
        let p = translate_utterance(&table, "u", &line, k);
        prop_assert!(p.words.len() <= k * line.len());
        let full = p.oov.is_empty() && line.iter().all(|f| table.row(f).len() >= k);
        prop_assert_eq!(p.words.len() == k * line.len(), full);
        let doubled: Vec<String> = line.iter().chain(&line).cloned().collect();
        let p2 = translate_utterance(&table, "u", &doubled, k);
        prop_assert_eq!(p2.words, [p.words.clone(), p.words].concat());
    }

    #[test]
    fn cosine_similarity_is_symmetric(
        a in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 4), 1..12),
        b in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 4), 1..12),
    ) {
        let fa = FeatureMatrix::from_frames("a", 10.0, &a).unwrap();
        let fb = FeatureMatrix::from_frames("b", 10.0, &b).unwrap();
        let ab = cosine_similarity_matrix(&fa, &fb).unwrap();
        let ba = cosine_similarity_matrix(&fb, &fa).unwrap();
        prop_assert_eq!(ab.transpose(), ba);
        for i in 0..ab.rows() {
            for j in 0..ab.cols() {
                prop_assert!((-1.0..=1.0).contains(&ab.get(i, j)));
            }
        }
    }
}

fn match_strategy() -> impl Strategy<Value = Match> {
    let seg = (0..4usize, 0..20usize, 3..10usize)
        .prop_map(|(u, s, len)| Segment::new(format!("u{u}"), s * 10, s * 10 + len * 10));
    (seg.clone(), seg, 0.85f64..1.0)
        .prop_filter("sides overlap", |(a, b, _)| a.overlap(b) == 0)
        .prop_map(|(a, b, s)| Match::new(a, b, s))
}

proptest! {
    #[test]
    fn clustering_is_a_hard_partition(matches in prop::collection::vec(match_strategy(), 0..25), rho in 0.1f64..1.0) {
        let c = cluster_matches(&matches, rho, &UtteranceOrder::lexical());
        let ids: Vec<usize> = c.occurrences().map(|(_, o)| o.node_id).collect();
        let unique: BTreeSet<usize> = ids.iter().copied().collect();
        prop_assert_eq!(ids.len(), unique.len());
        for (i, cl) in c.clusters.iter().enumerate() {
            prop_assert_eq!(&cl.label, &format!("c{}", i + 1));
            prop_assert!(!cl.occurrences.is_empty());
        }
        // Each match side lies inside an occurrence of one shared cluster.
        for m in &matches {
            let home = |s: &Segment| {
                c.occurrences()
                    .find(|(_, o)| o.segment.utterance_id == s.utterance_id
                        && o.segment.start_frame <= s.start_frame
                        && s.end_frame <= o.segment.end_frame)
                    .map(|(l, _)| l.to_owned())
            };
            prop_assert!(home(&m.a).is_some());
            prop_assert_eq!(home(&m.a), home(&m.b));
        }
    }

    #[test]
    fn clustering_ignores_match_order(matches in prop::collection::vec(match_strategy(), 0..25)) {
        let a = cluster_matches(&matches, 0.5, &UtteranceOrder::lexical());
        let mut rev = matches.clone();
        rev.reverse();
        let b = cluster_matches(&rev, 0.5, &UtteranceOrder::lexical());
        prop_assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn linking_existing_segments_never_adds_clusters(
        matches in prop::collection::vec(match_strategy(), 2..20),
        i in any::<prop::sample::Index>(),
        j in any::<prop::sample::Index>(),
    ) {
        let before = cluster_matches(&matches, 0.5, &UtteranceOrder::lexical());
        let sides: Vec<Segment> = matches.iter().flat_map(|m| [m.a.clone(), m.b.clone()]).collect();
        let (x, y) = (i.get(&sides).clone(), j.get(&sides).clone());
        prop_assume!(x.overlap(&y) == 0);
        let mut more = matches.clone();
        more.push(Match::new(x, y, 0.9));
        let after = cluster_matches(&more, 0.5, &UtteranceOrder::lexical());
        prop_assert!(after.clusters.len() <= before.clusters.len());
    }
}
