use std::cell::RefCell;
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use tempfile::TempDir;

use pseudoterm::corpus::{load_manifest, split_corpus, Corpus, SplitMode, StopwordList};
use pseudoterm::pipeline::{
    run_all, train_model, translate_test, LineSource, RunConfig, Stage, TranslationSource, CLUSTERS_FILE, MATCHES_FILE,
    MODEL_FILE, PSEUDOTEXT_FILE, REPORT_FILE,
};
use pseudoterm::pseudotext::{generate_oracle_pseudotext, Pseudotext};
use pseudoterm::synth::{generate_corpus, SynthConfig};

fn small_config(seed: u64) -> SynthConfig {
    SynthConfig {
        num_source_types: 8,
        num_calls: 4,
        utterances_per_call: 3,
        words_per_utterance: (2, 3),
        seed,
        ..SynthConfig::default()
    }
}

fn write_corpus(dir: &Path, seed: u64) -> Corpus {
    let synth = generate_corpus(&small_config(seed)).unwrap();
    let manifest = synth.write(dir).unwrap();
    load_manifest(manifest).unwrap()
}

struct RecordingLines<'a> {
    inner: &'a Pseudotext,
    seen: RefCell<BTreeSet<String>>,
}

impl LineSource for RecordingLines<'_> {
    fn line(&self, id: &str) -> Option<&[String]> {
        self.seen.borrow_mut().insert(id.to_owned());
        self.inner.line(id)
    }
}

struct RecordingTranslations<'a> {
    inner: &'a Corpus,
    seen: RefCell<BTreeSet<String>>,
}

impl TranslationSource for RecordingTranslations<'_> {
    fn translation(&self, id: &str) -> Option<&str> {
        self.seen.borrow_mut().insert(id.to_owned());
        self.inner.translation(id)
    }
}

#[test]
fn training_reads_only_train_utterances_and_translation_only_test_lines() {
    let dir = TempDir::new().unwrap();
    let corpus = write_corpus(dir.path(), 1);
    let pt = generate_oracle_pseudotext(&corpus).unwrap();
    let split = split_corpus(&corpus, SplitMode::Call, 0.5, 0).unwrap();
    let train: BTreeSet<String> = split.train.iter().cloned().collect();
    let test: BTreeSet<String> = split.test.iter().cloned().collect();

    let lines = RecordingLines { inner: &pt, seen: RefCell::default() };
    let translations = RecordingTranslations { inner: &corpus, seen: RefCell::default() };
    let (model, _) = train_model(&lines, &translations, &split, &StopwordList::bundled(), 3, 0.01).unwrap();
    assert_eq!(lines.seen.borrow().clone(), train);
    assert_eq!(translations.seen.borrow().clone(), train);

    let lines = RecordingLines { inner: &pt, seen: RefCell::default() };
    translate_test(&model.table, &lines, &split, 1).unwrap();
    assert_eq!(lines.seen.borrow().clone(), test);
}

#[test]
fn discovery_never_looks_at_text() {
    let dir = TempDir::new().unwrap();
    let corpus = write_corpus(dir.path(), 2);
    let mut scrambled: Vec<_> = corpus.utterances().to_vec();
    let n = scrambled.len();
    for (i, u) in scrambled.iter_mut().enumerate() {
        u.translation = format!("nonsense{} words", (i * 7) % n);
        u.transcript = None;
        u.alignment = None;
    }
    let scrambled = Corpus::with_base_dir(scrambled, corpus.base_dir()).unwrap();

    let sw = StopwordList::bundled();
    let config = RunConfig::default();
    let (a, b) = (dir.path().join("run_a"), dir.path().join("run_b"));
    run_all(&corpus, &sw, &config, &a).unwrap();
    run_all(&scrambled, &sw, &config, &b).unwrap();
    for file in [MATCHES_FILE, CLUSTERS_FILE, PSEUDOTEXT_FILE] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file} differs");
    }
}

#[test]
fn oracle_without_transcripts_fails_in_the_pseudotext_stage() {
    let dir = TempDir::new().unwrap();
    let corpus = write_corpus(dir.path(), 3);
    let mut utts = corpus.utterances().to_vec();
    utts[4].transcript = None;
    let corpus = Corpus::with_base_dir(utts, corpus.base_dir()).unwrap();
    let config = RunConfig { oracle: true, ..RunConfig::default() };
    let err = run_all(&corpus, &StopwordList::bundled(), &config, &dir.path().join("out")).unwrap_err();
    assert_eq!(err.stage, Stage::Pseudotext);
    assert!(err.to_string().contains("oracle requires transcripts"), "{err}");
}

#[test]
fn repeated_runs_are_identical_and_reports_are_consistent() {
    let dir = TempDir::new().unwrap();
    let corpus = write_corpus(dir.path(), 4);
    let sw = StopwordList::bundled();
    let config = RunConfig::default();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let report = run_all(&corpus, &sw, &config, &a).unwrap();
    run_all(&corpus, &sw, &config, &b).unwrap();
    for file in [MATCHES_FILE, CLUSTERS_FILE, PSEUDOTEXT_FILE, MODEL_FILE, REPORT_FILE] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file} differs");
    }

    assert_eq!(report.translation.len(), 2);
    for score in &report.translation {
        assert!((0.0..=1.0).contains(&score.precision) && (0.0..=1.0).contains(&score.recall));
        assert!(score.correct <= score.predicted.min(score.gold));
    }
    assert!(report.recall_at(5).unwrap() >= report.recall_at(1).unwrap());
    let locality = report.diagnostics.locality.as_ref().unwrap();
    let total: usize = locality.rows().iter().map(|(_, r)| r.count).sum();
    assert_eq!(total, report.discovery.as_ref().unwrap().num_matches);
    if total > 0 {
        let share: f64 = locality.rows().iter().map(|(_, r)| r.match_share).sum();
        assert!((share - 1.0).abs() < 1e-12);
    }
    if let Some(purity) = report.diagnostics.purity {
        assert!((0.0..=1.0).contains(&purity));
    }
}
