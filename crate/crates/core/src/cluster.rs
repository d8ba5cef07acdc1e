//! Hard clustering of discovered segments into pseudoterms.
//!
//! Match sides that overlap enough on the same utterance are merged into one
//! node; every match is then an edge between two nodes, and the connected
//! components of that graph are the pseudoterm clusters `c1..cM`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::utd::{Match, Segment};

#[derive(Debug, Clone)]
pub struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSet {
    pub fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[x] != root {
            let next = self.parent[x];
            self.parent[x] = root;
            x = next;
        }
        root
    }

    pub fn union(&mut self, a: usize, b: usize) -> usize {
        let (mut a, mut b) = (self.find(a), self.find(b));
        if a == b {
            return a;
        }
        if self.rank[a] < self.rank[b] {
            std::mem::swap(&mut a, &mut b);
        }
        self.parent[b] = a;
        if self.rank[a] == self.rank[b] {
            self.rank[a] += 1;
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Occurrence {
    pub node_id: usize,
    pub segment: Segment,
}

/// Maps match side `2 * match_index + {0: a, 1: b}` to a node id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SideMap(Vec<usize>);

impl SideMap {
    pub fn node_of(&self, match_index: usize, side_b: bool) -> usize {
        self.0[2 * match_index + usize::from(side_b)]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Fractional overlap `|x ∩ y| / min(|x|, |y|)`.
pub fn overlap_fraction(x: &Segment, y: &Segment) -> f64 {
    let shorter = x.len().min(y.len());
    if shorter == 0 {
        return 0.0;
    }
    x.overlap(y) as f64 / shorter as f64
}

/// Merges match sides on the same utterance whose overlap fraction is ≥ `rho`,
/// transitively. Node ids follow (utterance id, start, end) order.
pub fn merge_overlapping(matches: &[Match], rho: f64) -> (Vec<Occurrence>, SideMap) {
    let sides: Vec<&Segment> = matches.iter().flat_map(|m| [&m.a, &m.b]).collect();
    let mut order: Vec<usize> = (0..sides.len()).collect();
    order.sort_by(|&x, &y| sides[x].cmp(sides[y]).then(x.cmp(&y)));

    let mut dsu = DisjointSet::new(sides.len());
    let mut active: Vec<usize> = Vec::new();
    for &k in &order {
        let seg = sides[k];
        active.retain(|&p| {
            sides[p].utterance_id == seg.utterance_id && sides[p].end_frame > seg.start_frame
        });
        for &p in &active {
            if overlap_fraction(sides[p], seg) >= rho {
                dsu.union(p, k);
            }
        }
        active.push(k);
    }

    let mut extents: HashMap<usize, Segment> = HashMap::new();
    for (k, seg) in sides.iter().enumerate() {
        let root = dsu.find(k);
        extents
            .entry(root)
            .and_modify(|e| {
                e.start_frame = e.start_frame.min(seg.start_frame);
                e.end_frame = e.end_frame.max(seg.end_frame);
            })
            .or_insert_with(|| (*seg).clone());
    }
    let mut roots: Vec<(usize, Segment)> = extents.into_iter().collect();
    roots.sort_by(|x, y| x.1.cmp(&y.1).then(x.0.cmp(&y.0)));
    let node_of_root: HashMap<usize, usize> =
        roots.iter().enumerate().map(|(id, (root, _))| (*root, id)).collect();
    let nodes = roots
        .into_iter()
        .enumerate()
        .map(|(node_id, (_, segment))| Occurrence { node_id, segment })
        .collect();
    let side_map = (0..sides.len()).map(|k| node_of_root[&dsu.find(k)]).collect();
    (nodes, SideMap(side_map))
}

/// Corpus position of each utterance; unknown ids sort after known ones, by id.
#[derive(Debug, Clone, Default)]
pub struct UtteranceOrder(HashMap<String, usize>);

impl UtteranceOrder {
    pub fn from_corpus(corpus: &Corpus) -> Self {
        UtteranceOrder(
            corpus
                .ids()
                .enumerate()
                .map(|(i, id)| (id.to_owned(), i))
                .collect(),
        )
    }

    /// Orders by utterance id alone.
    pub fn lexical() -> Self {
        Self::default()
    }

    pub fn key<'a>(&self, seg: &'a Segment) -> (usize, &'a str, usize, usize) {
        let pos = self.0.get(&seg.utterance_id).copied().unwrap_or(usize::MAX);
        (pos, seg.utterance_id.as_str(), seg.start_frame, seg.end_frame)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub label: String,
    /// In corpus order, then start frame.
    pub occurrences: Vec<Occurrence>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub clusters: Vec<Cluster>,
    pub overlap_threshold: f64,
    pub score_threshold: Option<f64>,
}

impl Clustering {
    pub fn num_occurrences(&self) -> usize {
        self.clusters.iter().map(|c| c.occurrences.len()).sum()
    }

    pub fn get(&self, label: &str) -> Option<&Cluster> {
        self.clusters.iter().find(|c| c.label == label)
    }

    /// (label, occurrence) over all clusters.
    pub fn occurrences(&self) -> impl Iterator<Item = (&str, &Occurrence)> {
        self.clusters
            .iter()
            .flat_map(|c| c.occurrences.iter().map(move |o| (c.label.as_str(), o)))
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Rec<'a> {
            utt: &'a str,
            start: usize,
            end: usize,
        }
        let map: IndexMap<&str, Vec<Rec>> = self
            .clusters
            .iter()
            .map(|c| {
                let recs = c
                    .occurrences
                    .iter()
                    .map(|o| Rec {
                        utt: &o.segment.utterance_id,
                        start: o.segment.start_frame,
                        end: o.segment.end_frame,
                    })
                    .collect();
                (c.label.as_str(), recs)
            })
            .collect();
        let mut s = serde_json::to_string_pretty(&map).expect("clusters serialize");
        s.push('\n');
        s
    }

    /// Parses a clusters file; node ids are assigned in file order.
    pub fn from_json(text: &str, overlap_threshold: f64) -> std::result::Result<Self, serde_json::Error> {
        #[derive(Deserialize)]
        struct Rec {
            utt: String,
            start: usize,
            end: usize,
        }
        let map: IndexMap<String, Vec<Rec>> = serde_json::from_str(text)?;
        let mut node_id = 0;
        let clusters = map
            .into_iter()
            .map(|(label, recs)| Cluster {
                label,
                occurrences: recs
                    .into_iter()
                    .map(|r| {
                        node_id += 1;
                        Occurrence {
                            node_id: node_id - 1,
                            segment: Segment::new(r.utt, r.start, r.end),
                        }
                    })
                    .collect(),
            })
            .collect();
        Ok(Clustering {
            clusters,
            overlap_threshold,
            score_threshold: None,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, f64::NAN).map_err(|e| Error::parse(path, e.line(), e.to_string()))
    }
}

/// Connected components of the node graph with one edge per match.
pub fn connected_components(
    nodes: &[Occurrence],
    side_map: &SideMap,
    matches: &[Match],
    order: &UtteranceOrder,
    overlap_threshold: f64,
) -> Clustering {
    let mut dsu = DisjointSet::new(nodes.len());
    for m in 0..matches.len() {
        dsu.union(side_map.node_of(m, false), side_map.node_of(m, true));
    }
    let mut by_position: Vec<&Occurrence> = nodes.iter().collect();
    by_position.sort_by(|x, y| order.key(&x.segment).cmp(&order.key(&y.segment)).then(x.node_id.cmp(&y.node_id)));

    let mut label_of_root: HashMap<usize, usize> = HashMap::new();
    let mut clusters: Vec<Cluster> = Vec::new();
    for occ in by_position {
        let root = dsu.find(occ.node_id);
        let idx = *label_of_root.entry(root).or_insert_with(|| {
            clusters.push(Cluster {
                label: format!("c{}", clusters.len() + 1),
                occurrences: Vec::new(),
            });
            clusters.len() - 1
        });
        clusters[idx].occurrences.push(occ.clone());
    }
    Clustering {
        clusters,
        overlap_threshold,
        score_threshold: None,
    }
}

/// Overlap merge followed by connected components.
pub fn cluster_matches(matches: &[Match], rho: f64, order: &UtteranceOrder) -> Clustering {
    let (nodes, side_map) = merge_overlapping(matches, rho);
    connected_components(&nodes, &side_map, matches, order, rho)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(a: (&str, usize, usize), b: (&str, usize, usize)) -> Match {
        Match::new(Segment::new(a.0, a.1, a.2), Segment::new(b.0, b.1, b.2), 0.9)
    }

    #[test]
    fn overlapping_sides_merge_to_union_extent() {
        let matches = vec![m(("u", 10, 60), ("v", 0, 50)), m(("u", 12, 62), ("w", 0, 50))];
        let (nodes, sides) = merge_overlapping(&matches, 0.5);
        assert_eq!(nodes.len(), 3);
        let u_node = sides.node_of(0, false);
        assert_eq!(u_node, sides.node_of(1, false));
        assert_eq!(nodes[u_node].segment, Segment::new("u", 10, 62));
        assert_eq!(sides.len(), 4);
    }

    #[test]
    fn disjoint_sides_stay_apart() {
        let matches = vec![m(("u", 10, 60), ("v", 0, 50)), m(("u", 70, 120), ("w", 0, 50))];
        let (nodes, sides) = merge_overlapping(&matches, 0.5);
        assert_eq!(nodes.len(), 4);
        assert_ne!(sides.node_of(0, false), sides.node_of(1, false));
    }

    #[test]
    fn merging_is_transitive() {
        // A∩B and B∩C overlap enough, A∩C is empty.
        let matches = vec![
            m(("u", 0, 50), ("x", 0, 50)),
            m(("u", 30, 80), ("y", 0, 50)),
            m(("u", 60, 110), ("z", 0, 50)),
        ];
        let (nodes, sides) = merge_overlapping(&matches, 0.3);
        let n = sides.node_of(0, false);
        assert_eq!(n, sides.node_of(1, false));
        assert_eq!(n, sides.node_of(2, false));
        assert_eq!(nodes[n].segment, Segment::new("u", 0, 110));
    }

    #[test]
    fn path_connectivity_and_disjoint_components() {
        let order = UtteranceOrder::lexical();
        let c = cluster_matches(&[m(("x", 0, 50), ("y", 0, 50)), m(("y", 0, 50), ("z", 0, 50))], 0.5, &order);
        assert_eq!(c.clusters.len(), 1);
        assert_eq!(c.clusters[0].occurrences.len(), 3);

        let c = cluster_matches(&[m(("a", 0, 50), ("b", 0, 50)), m(("c", 0, 50), ("d", 0, 50))], 0.5, &order);
        let labels: Vec<&str> = c.clusters.iter().map(|c| c.label.as_str()).collect();
        assert_eq!(labels, ["c1", "c2"]);
        assert!(c.clusters.iter().all(|c| c.occurrences.len() == 2));
    }

    #[test]
    fn wrong_match_pulls_intruder_into_good_cluster() {
        // A and B share c1; C and D are a good pair; a wrong match drags part of B in.
        let matches = vec![
            m(("A", 0, 60), ("B", 0, 60)),
            m(("C", 20, 80), ("D", 40, 100)),
            m(("B", 100, 160), ("C", 22, 82)),
        ];
        let corpus_order = ["A", "B", "C", "D"];
        let order = UtteranceOrder(corpus_order.iter().enumerate().map(|(i, s)| (s.to_string(), i)).collect());
        let c = cluster_matches(&matches, 0.5, &order);
        assert_eq!(c.clusters.len(), 2);
        let c2 = c.get("c2").unwrap();
        let utts: Vec<&str> = c2.occurrences.iter().map(|o| o.segment.utterance_id.as_str()).collect();
        assert_eq!(utts, ["B", "C", "D"]);
    }

    #[test]
    fn labels_follow_corpus_order() {
        let matches = vec![m(("a", 0, 50), ("b", 0, 50)), m(("c", 0, 50), ("d", 0, 50))];
        let order = UtteranceOrder(
            [("c", 0), ("d", 1), ("a", 2), ("b", 3)]
                .iter()
                .map(|(s, i)| (s.to_string(), *i))
                .collect(),
        );
        let c = cluster_matches(&matches, 0.5, &order);
        assert_eq!(c.get("c1").unwrap().occurrences[0].segment.utterance_id, "c");
    }

    #[test]
    fn json_round_trip() {
        let order = UtteranceOrder::lexical();
        let c = cluster_matches(&[m(("a", 0, 50), ("b", 5, 55)), m(("c", 0, 50), ("d", 0, 50))], 0.5, &order);
        let text = c.to_json();
        let back = Clustering::from_json(&text, 0.5).unwrap();
        assert_eq!(back.to_json(), text);
        assert_eq!(back.num_occurrences(), 4);
    }
}
