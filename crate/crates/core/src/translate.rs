//! Top-K keyword translation of pseudotext lines.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::write_lines;
use crate::error::{Error, Result};
use crate::model1::{TranslationTable, NULL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub utterance_id: String,
    #[serde(rename = "K")]
    pub k: usize,
    /// K guesses per in-vocabulary source token, duplicates kept.
    pub words: Vec<String>,
    /// Source types absent from the table, in line order.
    pub oov: Vec<String>,
}

/// The `k` most probable targets of `f`, ties broken lexicographically.
pub fn topk<'t>(table: &'t TranslationTable, f: &str, k: usize) -> Vec<&'t str> {
    let mut row = table.row(f);
    row.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
    row.into_iter().take(k).map(|(e, _)| e).collect()
}

pub fn translate_utterance(
    table: &TranslationTable,
    utterance_id: &str,
    line: &[String],
    k: usize,
) -> Prediction {
    let mut words = Vec::new();
    let mut oov = Vec::new();
    for f in line {
        if f == NULL {
            continue;
        }
        if table.contains_source(f) {
            words.extend(topk(table, f, k).into_iter().map(str::to_owned));
        } else {
            oov.push(f.clone());
        }
    }
    Prediction {
        utterance_id: utterance_id.to_owned(),
        k,
        words,
        oov,
    }
}

pub fn save_predictions(preds: &[Prediction], path: impl AsRef<Path>) -> Result<()> {
    write_lines(
        path.as_ref(),
        preds
            .iter()
            .map(|p| serde_json::to_string(p).expect("prediction serializes")),
    )
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(path, n + 1, e.to_string()))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model1::{init_uniform, train, ParallelPair};

    fn table(rows: &str) -> TranslationTable {
        TranslationTable::from_tsv(rows, Path::new("t.tsv")).unwrap()
    }

    fn line(tokens: &[&str]) -> Vec<String> {
        tokens.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn argmax_and_support_exhaustion() {
        let t = table("c1\tcar\t0.7\nc1\tball\t0.3\n");
        assert_eq!(topk(&t, "c1", 1), ["car"]);
        assert_eq!(topk(&t, "c1", 5), ["car", "ball"]);
        assert!(topk(&t, "c9", 3).is_empty());
    }

    #[test]
    fn ties_are_lexicographic() {
        let t = table("c1\tb\t0.5\nc1\ta\t0.5\n");
        assert_eq!(topk(&t, "c1", 1), ["a"]);
    }

    #[test]
    fn work_is_learned_from_c2() {
        let pairs = vec![
            ParallelPair::new(&["c1"], &["yes", "well", "car"]),
            ParallelPair::new(&["c1", "c2"], &["yes", "well", "hows", "going"]),
            ParallelPair::new(&["c2"], &["work"]),
            ParallelPair::new(&["c2"], &["call", "work"]),
        ];
        let t = train(&pairs, 5, 0.01).unwrap().table;
        let p = translate_utterance(&t, "C", &line(&["c2"]), 1);
        assert_eq!(p.words, ["work"]);
    }

    #[test]
    fn empty_and_oov_lines() {
        let t = init_uniform(&[ParallelPair::new(&["c1"], &["car"])]).unwrap();
        let p = translate_utterance(&t, "u", &[], 1);
        assert!(p.words.is_empty() && p.oov.is_empty());
        let p = translate_utterance(&t, "u", &line(&["c9"]), 1);
        assert!(p.words.is_empty());
        assert_eq!(p.oov, ["c9"]);
    }

    #[test]
    fn repeated_tokens_double_the_guesses() {
        let t = table("c1\tcar\t0.6\nc1\tball\t0.4\n");
        let once = translate_utterance(&t, "u", &line(&["c1"]), 2);
        let twice = translate_utterance(&t, "u", &line(&["c1", "c1"]), 2);
        assert_eq!(twice.words, [once.words.clone(), once.words].concat());
    }

    #[test]
    fn predictions_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.jsonl");
        let preds = vec![Prediction {
            utterance_id: "u1".into(),
            k: 5,
            words: line(&["school", "going"]),
            oov: line(&["c7"]),
        }];
        save_predictions(&preds, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"K\":5"));
        assert_eq!(load_predictions(&p).unwrap(), preds);
    }
}
