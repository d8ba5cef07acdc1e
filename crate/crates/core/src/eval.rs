//! Translation metrics (corr@K, corpus precision/recall@K) and term-discovery
//! diagnostics (purity, coverage, OOV rate, match locality, cluster mapping).
//!
//! Diagnostics that need gold words label a segment with the aligned word
//! that overlaps it the most in time (earlier word on ties, none without
//! overlap).

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::cluster::Clustering;
use crate::corpus::{content_tokens, Corpus, StopwordList, WordSpan};
use crate::error::{Error, Result};
use crate::pseudotext::Pseudotext;
use crate::translate::Prediction;
use crate::utd::{Match, Segment};

/// Word multiset.
pub type Bag = BTreeMap<String, usize>;

pub fn bag<I, S>(words: I) -> Bag
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let mut b = Bag::new();
    for w in words {
        *b.entry(w.into()).or_default() += 1;
    }
    b
}

pub fn bag_size(b: &Bag) -> usize {
    b.values().sum()
}

/// Content words of the reference, or all its words when it has none.
pub fn gold_set(translation: &str, stopwords: &StopwordList) -> Bag {
    bag(content_tokens(translation, stopwords))
}

/// `|pred ∩ gold|` under multiset intersection.
pub fn corr_at_k(pred: &Bag, gold: &Bag) -> usize {
    pred.iter()
        .map(|(w, &c)| c.min(gold.get(w).copied().unwrap_or(0)))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub utterance_id: String,
    pub pred_at_k: Bag,
    pub gold: Bag,
    pub corr: usize,
}

impl EvalRecord {
    pub fn new(utterance_id: impl Into<String>, pred_at_k: Bag, gold: Bag) -> Self {
        let corr = corr_at_k(&pred_at_k, &gold);
        EvalRecord {
            utterance_id: utterance_id.into(),
            pred_at_k,
            gold,
            corr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    #[default]
    Micro,
    Macro,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Micro-averaged corpus precision and recall.
pub fn corpus_pr(records: &[EvalRecord]) -> Result<PrecisionRecall> {
    corpus_pr_with(records, Averaging::Micro)
}

/// Macro averaging takes the mean of per-utterance ratios (0 for empty denominators).
pub fn corpus_pr_with(records: &[EvalRecord], averaging: Averaging) -> Result<PrecisionRecall> {
    if records.is_empty() {
        return Err(Error::Empty("no evaluation records".into()));
    }
    Ok(match averaging {
        Averaging::Micro => {
            let corr: usize = records.iter().map(|r| r.corr).sum();
            let pred: usize = records.iter().map(|r| bag_size(&r.pred_at_k)).sum();
            let gold: usize = records.iter().map(|r| bag_size(&r.gold)).sum();
            PrecisionRecall {
                precision: ratio(corr, pred),
                recall: ratio(corr, gold),
            }
        }
        Averaging::Macro => {
            let n = records.len() as f64;
            PrecisionRecall {
                precision: records.iter().map(|r| ratio(r.corr, bag_size(&r.pred_at_k))).sum::<f64>() / n,
                recall: records.iter().map(|r| ratio(r.corr, bag_size(&r.gold))).sum::<f64>() / n,
            }
        }
    })
}

/// One record per prediction, scored against its utterance's reference.
pub fn evaluate_predictions(
    predictions: &[Prediction],
    corpus: &Corpus,
    stopwords: &StopwordList,
) -> Result<Vec<EvalRecord>> {
    predictions
        .iter()
        .map(|p| {
            let utt = corpus
                .get(&p.utterance_id)
                .ok_or_else(|| Error::UnknownUtterance(p.utterance_id.clone()))?;
            Ok(EvalRecord::new(
                p.utterance_id.clone(),
                bag(p.words.iter().cloned()),
                gold_set(&utt.translation, stopwords),
            ))
        })
        .collect()
}

/// Labels segments with gold words from the corpus alignments.
pub struct GoldLabeler<'a> {
    corpus: &'a Corpus,
    frame_shift_s: f64,
}

const TIME_EPS_S: f64 = 1e-9;

/// Word with maximal temporal overlap with `[start_s, end_s)`.
pub fn label_span(start_s: f64, end_s: f64, alignment: &[WordSpan]) -> Option<&str> {
    let mut best: Option<(&str, f64)> = None;
    for w in alignment {
        let ov = end_s.min(w.end_s) - start_s.max(w.start_s);
        // Overlaps equal up to rounding tie, and ties go to the earlier word.
        if ov > TIME_EPS_S && best.is_none_or(|(_, b)| ov > b + TIME_EPS_S) {
            best = Some((&w.word, ov));
        }
    }
    best.map(|(w, _)| w)
}

impl<'a> GoldLabeler<'a> {
    pub fn new(corpus: &'a Corpus, frame_shift_ms: f64) -> Self {
        GoldLabeler {
            corpus,
            frame_shift_s: frame_shift_ms / 1000.0,
        }
    }

    pub fn label(&self, seg: &Segment) -> Result<Option<&'a str>> {
        let utt = self
            .corpus
            .get(&seg.utterance_id)
            .ok_or_else(|| Error::UnknownUtterance(seg.utterance_id.clone()))?;
        let alignment = utt
            .alignment
            .as_deref()
            .ok_or_else(|| Error::MissingAlignment(seg.utterance_id.clone()))?;
        Ok(label_span(
            seg.start_frame as f64 * self.frame_shift_s,
            seg.end_frame as f64 * self.frame_shift_s,
            alignment,
        ))
    }

    /// Distinct aligned words over the whole corpus.
    pub fn gold_types(&self) -> Result<BTreeSet<&'a str>> {
        let mut types = BTreeSet::new();
        for u in self.corpus.utterances() {
            let alignment = u
                .alignment
                .as_deref()
                .ok_or_else(|| Error::MissingAlignment(u.utterance_id.clone()))?;
            types.extend(alignment.iter().map(|w| w.word.as_str()));
        }
        Ok(types)
    }
}

/// Most frequent non-empty label and its count; ties go to the smaller label.
fn plurality<'a>(labels: &[Option<&'a str>]) -> Option<(&'a str, usize)> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels.iter().flatten() {
        *counts.entry(l).or_default() += 1;
    }
    counts
        .into_iter()
        .fold(None, |best: Option<(&str, usize)>, (w, c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((w, c)),
        })
}

fn cluster_labels<'a>(clustering: &Clustering, labeler: &GoldLabeler<'a>) -> Result<Vec<Vec<Option<&'a str>>>> {
    clustering
        .clusters
        .iter()
        .map(|c| c.occurrences.iter().map(|o| labeler.label(&o.segment)).collect())
        .collect()
}

/// Fraction of occurrences whose gold label is their cluster's plurality label.
/// Occurrences without a label never count as pure.
pub fn cluster_purity(clustering: &Clustering, labeler: &GoldLabeler) -> Result<f64> {
    let labels = cluster_labels(clustering, labeler)?;
    let total: usize = labels.iter().map(Vec::len).sum();
    let pure: usize = labels.iter().filter_map(|l| plurality(l)).map(|(_, c)| c).sum();
    Ok(ratio(pure, total))
}

/// Fraction of frames covered by at least one occurrence.
pub fn audio_coverage(clustering: &Clustering, frame_counts: &HashMap<String, usize>) -> f64 {
    let mut per_utt: HashMap<&str, Vec<(usize, usize)>> = HashMap::new();
    for (_, occ) in clustering.occurrences() {
        per_utt
            .entry(occ.segment.utterance_id.as_str())
            .or_default()
            .push((occ.segment.start_frame, occ.segment.end_frame));
    }
    let total: usize = frame_counts.values().sum();
    let mut covered = 0usize;
    for (utt, mut spans) in per_utt {
        let Some(&limit) = frame_counts.get(utt) else {
            continue;
        };
        spans.sort_unstable();
        let mut reach = 0usize;
        for (s, e) in spans {
            let (s, e) = (s.max(reach).min(limit), e.min(limit));
            if e > s {
                covered += e - s;
                reach = e;
            }
        }
    }
    ratio(covered, total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OovStats {
    pub tokens: usize,
    pub total: usize,
    pub rate: f64,
}

/// Test tokens whose type never occurs in the training lines.
pub fn oov_stats(train: &Pseudotext, test: &Pseudotext) -> OovStats {
    let vocab: BTreeSet<&str> = train.lines.values().flatten().map(String::as_str).collect();
    let total = test.num_tokens();
    let tokens = test
        .lines
        .values()
        .flatten()
        .filter(|t| !vocab.contains(t.as_str()))
        .count();
    OovStats {
        tokens,
        total,
        rate: ratio(tokens, total),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Locality {
    WithinUtterance,
    WithinCall,
    CrossCall,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LocalityRow {
    pub count: usize,
    pub match_share: f64,
    /// Fraction of matches whose two sides carry the same gold word.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LocalityTable {
    pub within_utterance: LocalityRow,
    pub within_call: LocalityRow,
    pub cross_call: LocalityRow,
}

impl LocalityTable {
    pub fn rows(&self) -> [(Locality, &LocalityRow); 3] {
        [
            (Locality::WithinUtterance, &self.within_utterance),
            (Locality::WithinCall, &self.within_call),
            (Locality::CrossCall, &self.cross_call),
        ]
    }
}

pub fn classify_match(m: &Match, corpus: &Corpus) -> Result<Locality> {
    if m.a.utterance_id == m.b.utterance_id {
        return Ok(Locality::WithinUtterance);
    }
    let call = |id: &str| {
        corpus
            .get(id)
            .map(|u| u.call_id.as_str())
            .ok_or_else(|| Error::UnknownUtterance(id.to_owned()))
    };
    Ok(if call(&m.a.utterance_id)? == call(&m.b.utterance_id)? {
        Locality::WithinCall
    } else {
        Locality::CrossCall
    })
}

/// Shares of matches within an utterance, within a call and across calls,
/// with per-class accuracy when a labeler is given.
pub fn match_locality(matches: &[Match], corpus: &Corpus, labeler: Option<&GoldLabeler>) -> Result<LocalityTable> {
    let mut counts: BTreeMap<Locality, (usize, usize)> = BTreeMap::new();
    for m in matches {
        let class = classify_match(m, corpus)?;
        let correct = match labeler {
            Some(l) => {
                let (a, b) = (l.label(&m.a)?, l.label(&m.b)?);
                a.is_some() && a == b
            }
            None => false,
        };
        let entry = counts.entry(class).or_default();
        entry.0 += 1;
        entry.1 += usize::from(correct);
    }
    let total = matches.len();
    let row = |class| {
        let (n, ok) = counts.get(&class).copied().unwrap_or_default();
        LocalityRow {
            count: n,
            match_share: ratio(n, total),
            accuracy: labeler.map(|_| ratio(ok, n)),
        }
    };
    Ok(LocalityTable {
        within_utterance: row(Locality::WithinUtterance),
        within_call: row(Locality::WithinCall),
        cross_call: row(Locality::CrossCall),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ClusterCounts {
    pub num_clusters: usize,
    /// Pure clusters whose word no other cluster claims.
    pub one_to_one: usize,
    /// Distinct plurality words over the remaining clusters.
    pub many_to_one_types: usize,
    pub uncovered_gold_types: usize,
}

pub fn cluster_mapping_stats(clustering: &Clustering, labeler: &GoldLabeler) -> Result<ClusterCounts> {
    let gold = labeler.gold_types()?;
    let labels = cluster_labels(clustering, labeler)?;
    let pluralities: Vec<Option<&str>> = labels.iter().map(|l| plurality(l).map(|(w, _)| w)).collect();
    let mut claims: BTreeMap<&str, usize> = BTreeMap::new();
    for w in pluralities.iter().flatten() {
        *claims.entry(w).or_default() += 1;
    }
    let mut one_to_one = 0;
    let mut one_to_one_types = BTreeSet::new();
    let mut many_types = BTreeSet::new();
    for (occ_labels, p) in labels.iter().zip(&pluralities) {
        let Some(w) = *p else { continue };
        let pure = occ_labels.iter().all(|l| *l == Some(w));
        if pure && claims[w] == 1 {
            one_to_one += 1;
            one_to_one_types.insert(w);
        } else {
            many_types.insert(w);
        }
    }
    let covered = one_to_one_types.len() + many_types.len();
    let uncovered = gold
        .iter()
        .filter(|w| !one_to_one_types.contains(*w) && !many_types.contains(*w))
        .count();
    debug_assert!(covered + uncovered >= gold.len());
    Ok(ClusterCounts {
        num_clusters: clustering.clusters.len(),
        one_to_one,
        many_to_one_types: many_types.len(),
        uncovered_gold_types: uncovered,
    })
}

/// Corpus-level scores at one K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationScore {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

pub fn score_records(k: usize, records: &[EvalRecord], averaging: Averaging) -> Result<TranslationScore> {
    let pr = corpus_pr_with(records, averaging)?;
    Ok(TranslationScore {
        k,
        precision: pr.precision,
        recall: pr.recall,
        correct: records.iter().map(|r| r.corr).sum(),
        predicted: records.iter().map(|r| bag_size(&r.pred_at_k)).sum(),
        gold: records.iter().map(|r| bag_size(&r.gold)).sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DiagnosticsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub purity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
    /// Keyed by condition, e.g. `utd` pseudoterms or `oracle` words.
    pub oov: BTreeMap<String, OovStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub locality: Option<LocalityTable>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cluster_counts: Option<ClusterCounts>,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_owned(), |v| format!("{v:.6}"))
}

/// Match shares and accuracy by locality class.
pub fn locality_tsv(t: &LocalityTable) -> String {
    let mut out = String::from("class\tcount\tmatch_share\taccuracy\n");
    for (class, row) in t.rows() {
        let name = serde_json::to_value(class).expect("class serializes");
        out.push_str(&format!(
            "{}\t{}\t{:.6}\t{}\n",
            name.as_str().unwrap_or_default(),
            row.count,
            row.match_share,
            fmt_opt(row.accuracy)
        ));
    }
    out
}

pub fn oov_tsv(oov: &BTreeMap<String, OovStats>) -> String {
    let mut out = String::from("condition\toov_tokens\ttest_tokens\toov_rate\n");
    for (cond, s) in oov {
        out.push_str(&format!("{cond}\t{}\t{}\t{:.6}\n", s.tokens, s.total, s.rate));
    }
    out
}

pub fn scores_tsv(rows: &[(String, TranslationScore)]) -> String {
    let mut out = String::from("condition\tK\tprecision\trecall\tcorrect\tpredicted\tgold\n");
    for (cond, s) in rows {
        out.push_str(&format!(
            "{cond}\t{}\t{:.6}\t{:.6}\t{}\t{}\t{}\n",
            s.k, s.precision, s.recall, s.correct, s.predicted, s.gold
        ));
    }
    out
}
