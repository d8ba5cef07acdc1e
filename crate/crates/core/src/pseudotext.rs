//! Per-utterance pseudoterm sequences, from UTD clusters or from gold
//! transcripts (the oracle).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::cluster::Clustering;
use crate::corpus::{tokenize, write_lines, Corpus};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PseudotextSource {
    Utd,
    Oracle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pseudotext {
    /// utterance id → labels, in corpus order.
    pub lines: IndexMap<String, Vec<String>>,
    pub source: PseudotextSource,
}

impl Pseudotext {
    pub fn line(&self, utterance_id: &str) -> Option<&[String]> {
        self.lines.get(utterance_id).map(Vec::as_slice)
    }

    pub fn num_tokens(&self) -> usize {
        self.lines.values().map(Vec::len).sum()
    }

    /// Lines for `ids`, in the given order; ids without a line are skipped.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a String>) -> Pseudotext {
        let lines = ids
            .into_iter()
            .filter_map(|id| self.lines.get(id).map(|l| (id.clone(), l.clone())))
            .collect();
        Pseudotext {
            lines,
            source: self.source,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, labels) in &self.lines {
            out.push_str(id);
            out.push('\t');
            out.push_str(&labels.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let lines = self
            .lines
            .iter()
            .map(|(id, labels)| format!("{id}\t{}", labels.join(" ")));
        write_lines(path.as_ref(), lines)
    }

    /// `utterance_id<TAB>label label …` per line.
    pub fn parse(text: &str, source: PseudotextSource, path: &Path) -> Result<Self> {
        let mut lines = IndexMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (id, rest) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, n + 1, "expected utterance_id<TAB>labels"))?;
            let labels = rest.split_whitespace().map(str::to_owned).collect();
            if lines.insert(id.to_owned(), labels).is_some() {
                return Err(Error::parse(path, n + 1, format!("duplicate utterance id {id:?}")));
            }
        }
        Ok(Pseudotext { lines, source })
    }

    pub fn load(path: impl AsRef<Path>, source: PseudotextSource) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, source, path)
    }
}

/// Replaces every clustered segment by its label; occurrences are ordered by
/// start frame, then end frame, then label index.
pub fn generate_pseudotext(clustering: &Clustering, corpus: &Corpus) -> Result<Pseudotext> {
    let mut per_utt: HashMap<&str, Vec<(usize, usize, usize)>> = HashMap::new();
    for (label_idx, cluster) in clustering.clusters.iter().enumerate() {
        for occ in &cluster.occurrences {
            let id = occ.segment.utterance_id.as_str();
            if corpus.get(id).is_none() {
                return Err(Error::UnknownUtterance(id.to_owned()));
            }
            per_utt
                .entry(id)
                .or_default()
                .push((occ.segment.start_frame, occ.segment.end_frame, label_idx));
        }
    }
    let lines = corpus
        .ids()
        .map(|id| {
            let mut occs = per_utt.remove(id).unwrap_or_default();
            occs.sort_unstable();
            let labels = occs
                .into_iter()
                .map(|(_, _, k)| clustering.clusters[k].label.clone())
                .collect();
            (id.to_owned(), labels)
        })
        .collect();
    Ok(Pseudotext {
        lines,
        source: PseudotextSource::Utd,
    })
}

/// A perfect term discoverer: each transcript word is its own pure pseudoterm.
pub fn generate_oracle_pseudotext(corpus: &Corpus) -> Result<Pseudotext> {
    let lines = corpus
        .utterances()
        .iter()
        .map(|u| {
            let transcript = u
                .transcript
                .as_deref()
                .ok_or_else(|| Error::MissingTranscript(u.utterance_id.clone()))?;
            Ok((u.utterance_id.clone(), tokenize(transcript)))
        })
        .collect::<Result<_>>()?;
    Ok(Pseudotext {
        lines,
        source: PseudotextSource::Oracle,
    })
}
