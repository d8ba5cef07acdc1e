//! Bag-of-words translation model: IBM Model 1 with a Dirichlet prior on each
//! translation distribution, fit by variational Bayes.
//!
//! Source tokens are pseudoterms (or oracle words), targets are translation
//! content words. Every source sentence carries one extra NULL token. There is
//! no positional or diagonal term: each target token picks a source position
//! uniformly.
//!
//! The E-step is the usual Model 1 posterior over alignments. The M-step is
//!
//! ```text
//! t(e|f) ∝ exp(ψ(c(e,f) + α)) / exp(ψ(Σ_e' c(e',f) + α·V_E))
//! ```
//!
//! renormalised over the support of `f`, which is the set of target types that
//! co-occur with `f` (all targets for NULL).
//!
//! Vocabularies are sorted and training pairs are put in a canonical order
//! before counting, so a table never depends on the order of its input pairs.
//! Counts are accumulated in fixed-size chunks that may run in parallel and
//! are summed in chunk order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use statrs::function::gamma::digamma;

use crate::corpus::{content_tokens, write_lines, StopwordList};
use crate::error::{Error, Result};

/// Source type every sentence is padded with.
pub const NULL: &str = "NULL";
const CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelPair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl ParallelPair {
    pub fn new<S: AsRef<str>, T: AsRef<str>>(source: &[S], target: &[T]) -> Self {
        ParallelPair {
            source: source.iter().map(|s| s.as_ref().to_owned()).collect(),
            target: target.iter().map(|t| t.as_ref().to_owned()).collect(),
        }
    }

    pub fn is_usable(&self) -> bool {
        !self.source.is_empty() && !self.target.is_empty()
    }
}

/// Training pair for one utterance: its source line and the content words of
/// its translation, or all of its words when none are content words.
pub fn assemble_pair(source: &[String], translation: &str, stopwords: &StopwordList) -> ParallelPair {
    ParallelPair {
        source: source.to_vec(),
        target: content_tokens(translation, stopwords),
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_sorted(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocab { words, index }
    }

    fn id(&self, w: &str) -> Option<u32> {
        self.index.get(w).copied()
    }

    fn len(&self) -> usize {
        self.words.len()
    }
}

/// Per-source categorical distributions over target words.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslationTable {
    /// Index 0 is NULL; the rest sorted.
    sources: Vocab,
    targets: Vocab,
    /// Per source id: (target id, probability), sorted by target id.
    rows: Vec<Vec<(u32, f64)>>,
    pub alpha: Option<f64>,
    pub target_vocab_size: usize,
}

impl TranslationTable {
    pub fn prob(&self, f: &str, e: &str) -> f64 {
        match (self.sources.id(f), self.targets.id(e)) {
            (Some(fi), Some(ei)) => self.lookup(fi, ei),
            _ => 0.0,
        }
    }

    fn lookup(&self, f: u32, e: u32) -> f64 {
        let row = &self.rows[f as usize];
        row.binary_search_by_key(&e, |&(k, _)| k)
            .map(|k| row[k].1)
            .unwrap_or(0.0)
    }

    pub fn contains_source(&self, f: &str) -> bool {
        self.sources.id(f).is_some()
    }

    /// Source types, NULL first.
    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.sources.words.iter().map(String::as_str)
    }

    /// `(target, probability)` over the support of `f`; empty if `f` is unknown.
    pub fn row(&self, f: &str) -> Vec<(&str, f64)> {
        self.sources
            .id(f)
            .map(|fi| {
                self.rows[fi as usize]
                    .iter()
                    .map(|&(e, p)| (self.targets.words[e as usize].as_str(), p))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn row_sum(&self, f: &str) -> f64 {
        self.row(f).iter().map(|(_, p)| p).sum()
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    /// TSV `f<TAB>e<TAB>prob`, sorted by (f, −prob, e), 9 decimals.
    pub fn to_tsv(&self) -> String {
        self.tsv_lines().into_iter().map(|l| l + "\n").collect()
    }

    fn tsv_lines(&self) -> Vec<String> {
        let mut order: Vec<usize> = (0..self.sources.len()).collect();
        order.sort_by(|&a, &b| self.sources.words[a].cmp(&self.sources.words[b]));
        let mut lines = Vec::new();
        for f in order {
            let mut entries: Vec<(i64, &str)> = self.rows[f]
                .iter()
                .map(|&(e, p)| ((p * 1e9).round() as i64, self.targets.words[e as usize].as_str()))
                .collect();
            // Sort on the printed value so a reloaded table prints identically.
            entries.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(y.1)));
            for (nanos, e) in entries {
                lines.push(format!(
                    "{}\t{}\t{}.{:09}",
                    self.sources.words[f],
                    e,
                    nanos / 1_000_000_000,
                    nanos % 1_000_000_000
                ));
            }
        }
        lines
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_lines(path.as_ref(), self.tsv_lines())
    }

    pub fn from_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut entries: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::parse(path, n + 1, format!("expected 3 columns, got {}", cols.len())));
            }
            let p: f64 = cols[2]
                .parse()
                .ok()
                .filter(|p: &f64| p.is_finite() && *p >= 0.0)
                .ok_or_else(|| Error::parse(path, n + 1, format!("bad probability {:?}", cols[2])))?;
            entries
                .entry(cols[0].to_owned())
                .or_default()
                .insert(cols[1].to_owned(), p);
        }
        let targets: BTreeSet<&String> = entries.values().flat_map(|r| r.keys()).collect();
        let targets = Vocab::from_sorted(targets.into_iter().cloned().collect());
        let mut source_words: Vec<String> = vec![NULL.to_owned()];
        source_words.extend(entries.keys().filter(|f| f.as_str() != NULL).cloned());
        let sources = Vocab::from_sorted(source_words);
        let rows = sources
            .words
            .iter()
            .map(|f| {
                entries
                    .get(f)
                    .map(|r| r.iter().map(|(e, &p)| (targets.id(e).unwrap(), p)).collect())
                    .unwrap_or_default()
            })
            .collect();
        let target_vocab_size = targets.len();
        Ok(TranslationTable {
            sources,
            targets,
            rows,
            alpha: None,
            target_vocab_size,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text, path)
    }
}

/// Pairs encoded against a table's vocabularies; NULL is source position 0.
struct Encoded {
    pairs: Vec<(Vec<u32>, Vec<u32>)>,
}

impl Encoded {
    fn new(pairs: &[ParallelPair], table: &TranslationTable) -> Self {
        let mut encoded: Vec<(Vec<u32>, Vec<u32>)> = pairs
            .iter()
            .filter(|p| p.is_usable())
            .map(|p| {
                let mut src = vec![0u32];
                src.extend(p.source.iter().filter_map(|f| table.sources.id(f)));
                let tgt = p.target.iter().filter_map(|e| table.targets.id(e)).collect();
                (src, tgt)
            })
            .collect();
        encoded.sort_unstable();
        Encoded { pairs: encoded }
    }
}

/// Builds the sparse support and a uniform distribution over it.
pub fn init_uniform(pairs: &[ParallelPair]) -> Result<TranslationTable> {
    let usable: Vec<&ParallelPair> = pairs.iter().filter(|p| p.is_usable()).collect();
    if usable.is_empty() {
        return Err(Error::NoUsablePairs);
    }
    let mut support: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut all_targets: BTreeSet<&str> = BTreeSet::new();
    for p in &usable {
        all_targets.extend(p.target.iter().map(String::as_str));
        for f in &p.source {
            support
                .entry(f.as_str())
                .or_default()
                .extend(p.target.iter().map(String::as_str));
        }
    }
    support.remove(NULL);
    let targets = Vocab::from_sorted(all_targets.iter().map(|s| s.to_string()).collect());
    let mut source_words = vec![NULL.to_owned()];
    source_words.extend(support.keys().map(|s| s.to_string()));
    let sources = Vocab::from_sorted(source_words);

    let uniform = |set: &BTreeSet<&str>| -> Vec<(u32, f64)> {
        let p = 1.0 / set.len() as f64;
        set.iter().map(|e| (targets.id(e).unwrap(), p)).collect()
    };
    let mut rows = vec![uniform(&all_targets)];
    rows.extend(support.values().map(uniform));
    Ok(TranslationTable {
        target_vocab_size: targets.len(),
        sources,
        targets,
        rows,
        alpha: None,
    })
}

/// Expected alignment counts `c(e, f)` from one E-step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExpectedCounts(pub BTreeMap<(String, String), f64>);

impl ExpectedCounts {
    pub fn get(&self, f: &str, e: &str) -> f64 {
        self.0
            .get(&(f.to_owned(), e.to_owned()))
            .copied()
            .unwrap_or(0.0)
    }
}

fn estep_chunk(table: &TranslationTable, chunk: &[(Vec<u32>, Vec<u32>)]) -> Vec<Vec<f64>> {
    let mut counts: Vec<Vec<f64>> = table.rows.iter().map(|r| vec![0.0; r.len()]).collect();
    let mut probs = Vec::new();
    for (src, tgt) in chunk {
        for &e in tgt {
            probs.clear();
            probs.extend(src.iter().map(|&f| table.lookup(f, e)));
            let z: f64 = probs.iter().sum();
            if z <= 0.0 {
                continue;
            }
            for (&f, &p) in src.iter().zip(&probs) {
                if p > 0.0 {
                    let row = &table.rows[f as usize];
                    let k = row.binary_search_by_key(&e, |&(t, _)| t).unwrap();
                    counts[f as usize][k] += p / z;
                }
            }
        }
    }
    counts
}

fn estep(table: &TranslationTable, enc: &Encoded) -> Vec<Vec<f64>> {
    let partials: Vec<Vec<Vec<f64>>> = enc
        .pairs
        .par_chunks(CHUNK)
        .map(|chunk| estep_chunk(table, chunk))
        .collect();
    let mut total: Vec<Vec<f64>> = table.rows.iter().map(|r| vec![0.0; r.len()]).collect();
    for part in partials {
        for (acc, row) in total.iter_mut().zip(part) {
            for (a, c) in acc.iter_mut().zip(row) {
                *a += c;
            }
        }
    }
    total
}

/// E-step only: expected counts of each (source type, target type) link.
/// Source or target tokens unknown to `table` are ignored.
pub fn expected_counts(pairs: &[ParallelPair], table: &TranslationTable) -> ExpectedCounts {
    let counts = estep(table, &Encoded::new(pairs, table));
    let mut out = BTreeMap::new();
    for (f, row) in table.rows.iter().enumerate() {
        for (&(e, _), &c) in row.iter().zip(&counts[f]) {
            out.insert(
                (table.sources.words[f].clone(), table.targets.words[e as usize].clone()),
                c,
            );
        }
    }
    ExpectedCounts(out)
}

fn mstep(table: &TranslationTable, counts: &[Vec<f64>], alpha: f64) -> TranslationTable {
    let ve = table.target_vocab_size as f64;
    let rows = table
        .rows
        .iter()
        .zip(counts)
        .map(|(row, c)| {
            let total: f64 = c.iter().sum::<f64>() + alpha * ve;
            let denom = digamma(total);
            let logs: Vec<f64> = c.iter().map(|&x| digamma(x + alpha) - denom).collect();
            let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logs.iter().map(|l| (l - max).exp()).sum();
            row.iter()
                .zip(&logs)
                .map(|(&(e, _), &l)| (e, ((l - max).exp() / z).max(f64::MIN_POSITIVE)))
                .collect()
        })
        .collect();
    TranslationTable {
        rows,
        alpha: Some(alpha),
        ..table.clone()
    }
}

fn em_encoded(table: &TranslationTable, enc: &Encoded, alpha: f64) -> TranslationTable {
    mstep(table, &estep(table, enc), alpha)
}

/// One EM pass: Model 1 E-step, variational-Bayes M-step with prior `alpha`.
pub fn em_iteration(pairs: &[ParallelPair], table: &TranslationTable, alpha: f64) -> TranslationTable {
    em_encoded(table, &Encoded::new(pairs, table), alpha)
}

fn ll_encoded(table: &TranslationTable, enc: &Encoded) -> f64 {
    let partial: Vec<f64> = enc
        .pairs
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|(src, tgt)| {
                    let norm = (src.len() as f64).ln();
                    tgt.iter()
                        .map(|&e| src.iter().map(|&f| table.lookup(f, e)).sum::<f64>().ln() - norm)
                        .sum::<f64>()
                })
                .sum()
        })
        .collect();
    partial.iter().sum()
}

/// `Σ_pairs Σ_j log( 1/(|f|+1) · Σ_i t(e_j|f_i) )` with NULL among the `f_i`.
pub fn log_likelihood(pairs: &[ParallelPair], table: &TranslationTable) -> f64 {
    ll_encoded(table, &Encoded::new(pairs, table))
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub table: TranslationTable,
    /// Corpus log-likelihood after each iteration.
    pub log_likelihoods: Vec<f64>,
}

pub fn train(pairs: &[ParallelPair], iterations: usize, alpha: f64) -> Result<TrainedModel> {
    if iterations == 0 {
        return Err(Error::InvalidConfig("iterations must be at least 1".into()));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidConfig(format!("alpha must be positive, got {alpha}")));
    }
    let mut table = init_uniform(pairs)?;
    table.alpha = Some(alpha);
    let enc = Encoded::new(pairs, &table);
    let mut log_likelihoods = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        table = em_encoded(&table, &enc, alpha);
        log_likelihoods.push(ll_encoded(&table, &enc));
    }
    Ok(TrainedModel {
        table,
        log_likelihoods,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(src: &[&str], tgt: &[&str]) -> ParallelPair {
        ParallelPair::new(src, tgt)
    }

    #[test]
    fn singleton_support_is_certain() {
        let t = init_uniform(&[pair(&["c1"], &["car"])]).unwrap();
        assert_eq!(t.prob("c1", "car"), 1.0);
        assert_eq!(t.prob(NULL, "car"), 1.0);
    }

    #[test]
    fn init_is_uniform_over_cooccurring_targets() {
        let t = init_uniform(&[pair(&["c1"], &["car", "red"])]).unwrap();
        assert_eq!(t.prob("c1", "car"), 0.5);
        assert_eq!(t.prob("c1", "red"), 0.5);
    }

    #[test]
    fn empty_sources_are_skipped() {
        assert!(matches!(init_uniform(&[pair(&[], &["car"])]), Err(Error::NoUsablePairs)));
        let t = init_uniform(&[pair(&[], &["car"]), pair(&["c1"], &["ball"])]).unwrap();
        assert_eq!(t.prob(NULL, "car"), 0.0);
        assert_eq!(t.prob(NULL, "ball"), 1.0);
    }

    #[test]
    fn single_candidate_converges_in_one_step() {
        let pairs = [pair(&["c1"], &["car"]), pair(&["c1"], &["car"])];
        let t = init_uniform(&pairs).unwrap();
        let t = em_iteration(&pairs, &t, 1e-9);
        assert_eq!(t.prob("c1", "car"), 1.0);
    }

    #[test]
    fn rows_stay_normalised() {
        let pairs = [
            pair(&["c1", "c2"], &["car", "red"]),
            pair(&["c1"], &["ball"]),
            pair(&["c2", "c2", "c3"], &["red", "the"]),
        ];
        let mut t = init_uniform(&pairs).unwrap();
        for _ in 0..4 {
            t = em_iteration(&pairs, &t, 0.01);
            for f in t.sources().collect::<Vec<_>>() {
                assert!((t.row_sum(f) - 1.0).abs() < 1e-9, "{f}");
            }
        }
    }

    #[test]
    fn tsv_round_trip_is_byte_stable() {
        let pairs = [pair(&["c1", "c2"], &["car", "red"]), pair(&["c1"], &["ball"])];
        let t = train(&pairs, 3, 0.01).unwrap().table;
        let text = t.to_tsv();
        let back = TranslationTable::from_tsv(&text, Path::new("m.tsv")).unwrap();
        assert_eq!(back.to_tsv(), text);
        assert!(text.starts_with("NULL\t"));
    }

    #[test]
    fn training_rejects_bad_settings() {
        let pairs = [pair(&["c1"], &["car"])];
        assert!(train(&pairs, 0, 0.01).is_err());
        assert!(train(&pairs, 1, 0.0).is_err());
    }

    #[test]
    fn assembled_pairs_fall_back_to_stopwords() {
        let sw = StopwordList::bundled();
        let src = vec!["c1".to_string()];
        assert_eq!(assemble_pair(&src, "yes well and the car", &sw).target, ["yes", "well", "car"]);
        assert_eq!(assemble_pair(&src, "and the of", &sw).target, ["and", "the", "of"]);
        assert!(assemble_pair(&src, "", &sw).target.is_empty());
    }
}
