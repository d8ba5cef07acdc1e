//! Corpus data model: calls, utterances, translations and the optional gold
//! transcripts used only by the oracle and the diagnostics.
//!
//! A corpus is read from a JSON-lines manifest, one utterance per line:
//!
//! ```text
//! {"utterance_id":"u1","call_id":"A","speaker_id":"s1","features":"feats/u1.ptft",
//!  "duration_s":2.5,"translation":"yes well","transcript":"sí pues",
//!  "alignment":[["sí",0.1,0.4],["pues",0.4,0.9]]}
//! ```
//!
//! Relative `features` and `audio` paths resolve against the manifest's directory.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ALIGNMENT_EPS: f64 = 1e-9;

/// A gold word with its time span, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "(String, f64, f64)", into = "(String, f64, f64)")]
pub struct WordSpan {
    pub word: String,
    pub start_s: f64,
    pub end_s: f64,
}

impl From<(String, f64, f64)> for WordSpan {
    fn from((word, start_s, end_s): (String, f64, f64)) -> Self {
        WordSpan { word, start_s, end_s }
    }
}

impl From<WordSpan> for (String, f64, f64) {
    fn from(w: WordSpan) -> Self {
        (w.word, w.start_s, w.end_s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub utterance_id: String,
    pub call_id: String,
    pub speaker_id: String,
    /// Feature file, as written in the manifest.
    pub features: PathBuf,
    /// Optional mono WAV source for the `features` stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<PathBuf>,
    pub duration_s: f64,
    pub translation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<Vec<WordSpan>>,
}

impl Utterance {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.utterance_id.is_empty() {
            return Err("empty utterance_id".into());
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(format!("duration_s must be positive, got {}", self.duration_s));
        }
        if let Some(alignment) = &self.alignment {
            let mut prev_start = f64::NEG_INFINITY;
            for span in alignment {
                if !(span.start_s >= 0.0
                    && span.start_s < span.end_s
                    && span.end_s <= self.duration_s + ALIGNMENT_EPS)
                {
                    return Err(format!(
                        "alignment span {:?} [{}, {}) outside [0, {}] or empty",
                        span.word, span.start_s, span.end_s, self.duration_s
                    ));
                }
                if span.start_s < prev_start {
                    return Err(format!("alignment not sorted at {:?}", span.word));
                }
                prev_start = span.start_s;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    utterances: Vec<Utterance>,
    index: HashMap<String, usize>,
    calls: BTreeMap<String, Vec<String>>,
    base_dir: PathBuf,
}

impl Corpus {
    pub fn new(utterances: Vec<Utterance>) -> Result<Self> {
        Self::with_base_dir(utterances, PathBuf::new())
    }

    pub fn with_base_dir(utterances: Vec<Utterance>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut index = HashMap::with_capacity(utterances.len());
        let mut calls: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (pos, utt) in utterances.iter().enumerate() {
            utt.validate().map_err(|message| Error::InvalidUtterance {
                id: utt.utterance_id.clone(),
                message,
            })?;
            if index.insert(utt.utterance_id.clone(), pos).is_some() {
                return Err(Error::DuplicateUtterance(utt.utterance_id.clone()));
            }
            calls
                .entry(utt.call_id.clone())
                .or_default()
                .push(utt.utterance_id.clone());
        }
        Ok(Corpus {
            utterances,
            index,
            calls,
            base_dir: base_dir.into(),
        })
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn get(&self, utterance_id: &str) -> Option<&Utterance> {
        self.index.get(utterance_id).map(|&i| &self.utterances[i])
    }

    /// Manifest position of an utterance.
    pub fn position(&self, utterance_id: &str) -> Option<usize> {
        self.index.get(utterance_id).copied()
    }

    pub fn calls(&self) -> &BTreeMap<String, Vec<String>> {
        &self.calls
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn feature_path(&self, utt: &Utterance) -> PathBuf {
        self.resolve(&utt.features)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.utterances.iter().map(|u| u.utterance_id.as_str())
    }

    pub fn has_transcripts(&self) -> bool {
        self.utterances.iter().all(|u| u.transcript.is_some())
    }

    pub fn has_alignments(&self) -> bool {
        self.utterances.iter().all(|u| u.alignment.is_some())
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut utterances = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let utt: Utterance =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        if !seen.insert(utt.utterance_id.clone()) {
            return Err(Error::parse(
                path,
                lineno,
                format!("duplicate utterance id {:?}", utt.utterance_id),
            ));
        }
        utt.validate()
            .map_err(|message| Error::parse(path, lineno, message))?;
        utterances.push(utt);
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Corpus::with_base_dir(utterances, base)
}

pub fn save_manifest(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for utt in corpus.utterances() {
        out.push_str(&serde_json::to_string(utt).expect("utterance serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Lowercase, split on whitespace, strip punctuation from token edges.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopwordList {
    words: HashSet<String>,
}

const BUNDLED_STOPWORDS: &str = include_str!("../data/stopwords_en.txt");

impl StopwordList {
    /// The classic 127-word English list.
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_STOPWORDS)
    }

    /// One word per line; `#` starts a comment.
    pub fn parse(text: &str) -> Self {
        let words = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim().to_lowercase())
            .filter(|w| !w.is_empty())
            .collect();
        StopwordList { words }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        StopwordList {
            words: words
                .into_iter()
                .map(|w| w.as_ref().trim().to_lowercase())
                .filter(|w| !w.is_empty())
                .collect(),
        }
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Words in sorted order.
    pub fn sorted(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.words.iter().map(String::as_str).collect();
        v.sort_unstable();
        v
    }
}

pub fn filter_stopwords(tokens: &[String], stopwords: &StopwordList) -> Vec<String> {
    tokens
        .iter()
        .filter(|t| !stopwords.contains(t))
        .cloned()
        .collect()
}

/// Content words of `text`; all of its words when it has no content words.
pub fn content_tokens(text: &str, stopwords: &StopwordList) -> Vec<String> {
    let tokens = tokenize(text);
    let content = filter_stopwords(&tokens, stopwords);
    if content.is_empty() {
        tokens
    } else {
        content
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Call,
    Utterance,
}

impl std::str::FromStr for SplitMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "call" => Ok(SplitMode::Call),
            "utterance" => Ok(SplitMode::Utterance),
            other => Err(format!("unknown split mode {other:?}")),
        }
    }
}

/// Train/test partition. Both id lists are kept in manifest order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub mode: SplitMode,
    pub ratio: f64,
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn train_set(&self) -> HashSet<&str> {
        self.train.iter().map(String::as_str).collect()
    }

    pub fn test_set(&self) -> HashSet<&str> {
        self.test.iter().map(String::as_str).collect()
    }

    /// Checks disjointness, coverage and, in call mode, call wholeness.
    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        let train = self.train_set();
        let test = self.test_set();
        if train.len() != self.train.len() || test.len() != self.test.len() {
            return Err(Error::InvalidSplit("duplicate ids".into()));
        }
        if let Some(id) = train.intersection(&test).next() {
            return Err(Error::InvalidSplit(format!("{id:?} on both sides")));
        }
        if train.len() + test.len() != corpus.len() {
            return Err(Error::InvalidSplit("split does not cover the corpus".into()));
        }
        for id in train.iter().chain(test.iter()) {
            if corpus.get(id).is_none() {
                return Err(Error::UnknownUtterance((*id).to_owned()));
            }
        }
        if self.mode == SplitMode::Call {
            for (call, ids) in corpus.calls() {
                let in_train = ids.iter().filter(|id| train.contains(id.as_str())).count();
                if in_train != 0 && in_train != ids.len() {
                    return Err(Error::InvalidSplit(format!("call {call:?} straddles the split")));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("split serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
    }
}

pub fn split_corpus(corpus: &Corpus, mode: SplitMode, ratio: f64, seed: u64) -> Result<Split> {
    if corpus.is_empty() {
        return Err(Error::InvalidSplit("empty corpus".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidSplit(format!("ratio must be in (0,1), got {ratio}")));
    }
    let n = corpus.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train: HashSet<String> = match mode {
        SplitMode::Utterance => {
            let n_train = (ratio * n as f64).round() as usize;
            if n_train == 0 || n_train == n {
                return Err(Error::InvalidSplit(format!(
                    "ratio {ratio} on {n} utterances leaves one side empty"
                )));
            }
            let mut ids: Vec<&str> = corpus.ids().collect();
            ids.shuffle(&mut rng);
            ids[..n_train].iter().map(|s| (*s).to_owned()).collect()
        }
        SplitMode::Call => {
            if corpus.calls().len() < 2 {
                return Err(Error::InvalidSplit(
                    "call-level split needs at least two calls".into(),
                ));
            }
            let target = (ratio * n as f64).ceil() as usize;
            let mut calls: Vec<(&String, &Vec<String>)> = corpus.calls().iter().collect();
            calls.shuffle(&mut rng);
            let mut train = HashSet::new();
            // The last shuffled call always stays on the test side.
            for (_, ids) in &calls[..calls.len() - 1] {
                if train.len() >= target {
                    break;
                }
                train.extend(ids.iter().cloned());
            }
            train
        }
    };
    let (train_ids, test_ids): (Vec<String>, Vec<String>) = corpus
        .ids()
        .map(str::to_owned)
        .partition(|id| train.contains(id));
    Ok(Split {
        mode,
        ratio,
        seed,
        train: train_ids,
        test: test_ids,
    })
}

/// Writes `lines` as UTF-8 with a trailing newline per line.
pub(crate) fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for line in lines {
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
