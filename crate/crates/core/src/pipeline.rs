//! Pipeline stages and the end-to-end run.
//!
//! Term discovery runs over the audio of train and test utterances alike but
//! only ever sees feature matrices. Training reads pseudotext lines and
//! translations of train utterances only; translation and scoring use the
//! test side.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::{cluster_matches, Clustering, UtteranceOrder};
use crate::corpus::{split_corpus, Corpus, SplitMode, Split, StopwordList};
use crate::error::{Error, Result};
use crate::eval::{
    audio_coverage, cluster_mapping_stats, cluster_purity, evaluate_predictions, match_locality, oov_stats,
    score_records, Averaging, DiagnosticsReport, GoldLabeler, TranslationScore,
};
use crate::features::{compute_mfcc, load_features, load_features_as, read_wav, save_features, FeatureConfig, FeatureMatrix};
use crate::model1::{assemble_pair, train, ParallelPair, TrainedModel, TranslationTable};
use crate::pseudotext::{generate_oracle_pseudotext, generate_pseudotext, Pseudotext};
use crate::translate::{save_predictions, translate_utterance, Prediction};
use crate::utd::{discover_matches, save_matches, Match, UtdParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Synth,
    Features,
    Discover,
    Cluster,
    Pseudotext,
    Split,
    Train,
    Translate,
    Evaluate,
    Diagnose,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Synth => "synth",
            Stage::Features => "features",
            Stage::Discover => "discover",
            Stage::Cluster => "cluster",
            Stage::Pseudotext => "pseudotext",
            Stage::Split => "split",
            Stage::Train => "train",
            Stage::Translate => "translate",
            Stage::Evaluate => "evaluate",
            Stage::Diagnose => "diagnose",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed: {error}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub error: Error,
}

pub trait InStage<T> {
    fn stage(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> InStage<T> for Result<T> {
    fn stage(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { stage, error })
    }
}

/// Where discovery gets its input: feature matrices and nothing else.
pub trait FeatureSource {
    fn load_all(&self) -> Result<Vec<FeatureMatrix>>;
}

/// Every `*.ptft` file of a directory, in file-name order, named by file stem.
pub struct FeatureDir(pub PathBuf);

impl FeatureSource for FeatureDir {
    fn load_all(&self) -> Result<Vec<FeatureMatrix>> {
        let dir = &self.0;
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|x| x == "ptft"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Empty(format!("no .ptft files in {}", dir.display())));
        }
        paths.iter().map(load_features).collect()
    }
}

/// The feature files a manifest points at, named by utterance id.
pub struct ManifestFeatures {
    files: Vec<(String, PathBuf)>,
}

impl ManifestFeatures {
    pub fn new(corpus: &Corpus) -> Self {
        ManifestFeatures {
            files: corpus
                .utterances()
                .iter()
                .map(|u| (u.utterance_id.clone(), corpus.feature_path(u)))
                .collect(),
        }
    }
}

impl FeatureSource for ManifestFeatures {
    fn load_all(&self) -> Result<Vec<FeatureMatrix>> {
        self.files.iter().map(|(id, p)| load_features_as(p, id.clone())).collect()
    }
}

/// Pseudotext lines as seen by the trainer.
pub trait LineSource {
    fn line(&self, utterance_id: &str) -> Option<&[String]>;
}

impl LineSource for Pseudotext {
    fn line(&self, utterance_id: &str) -> Option<&[String]> {
        Pseudotext::line(self, utterance_id)
    }
}

/// Reference translations as seen by the trainer.
pub trait TranslationSource {
    fn translation(&self, utterance_id: &str) -> Option<&str>;
}

impl TranslationSource for Corpus {
    fn translation(&self, utterance_id: &str) -> Option<&str> {
        self.get(utterance_id).map(|u| u.translation.as_str())
    }
}

/// Computes MFCCs for every utterance with an `audio` entry and writes
/// `<out_dir>/<utterance_id>.ptft`.
pub fn extract_features(corpus: &Corpus, config: &FeatureConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for u in corpus.utterances() {
        let audio = u
            .audio
            .as_ref()
            .ok_or_else(|| Error::InvalidUtterance {
                id: u.utterance_id.clone(),
                message: "no audio path in manifest".into(),
            })?;
        let (samples, rate) = read_wav(corpus.resolve(audio))?;
        if rate != config.sample_rate_hz {
            return Err(Error::InvalidConfig(format!(
                "{} has sample rate {rate}, config expects {}",
                u.utterance_id, config.sample_rate_hz
            )));
        }
        let fm = compute_mfcc(&u.utterance_id, &samples, config)?;
        let path = out_dir.join(format!("{}.ptft", u.utterance_id));
        save_features(&fm, &path)?;
        written.push(path);
    }
    Ok(written)
}

pub fn discover(source: &dyn FeatureSource, params: &UtdParams) -> Result<(Vec<Match>, Vec<FeatureMatrix>)> {
    let features = source.load_all()?;
    let matches = discover_matches(&features, params)?;
    Ok((matches, features))
}

/// Training pairs for the train side of `split`, in split order.
pub fn training_pairs(
    lines: &dyn LineSource,
    translations: &dyn TranslationSource,
    split: &Split,
    stopwords: &StopwordList,
) -> Result<Vec<ParallelPair>> {
    split
        .train
        .iter()
        .map(|id| {
            let translation = translations
                .translation(id)
                .ok_or_else(|| Error::UnknownUtterance(id.clone()))?;
            let line = lines.line(id).unwrap_or(&[]);
            Ok(assemble_pair(line, translation, stopwords))
        })
        .collect()
}

pub fn train_model(
    lines: &dyn LineSource,
    translations: &dyn TranslationSource,
    split: &Split,
    stopwords: &StopwordList,
    iterations: usize,
    alpha: f64,
) -> Result<(TrainedModel, usize)> {
    let pairs = training_pairs(lines, translations, split, stopwords)?;
    let usable = pairs.iter().filter(|p| p.is_usable()).count();
    Ok((train(&pairs, iterations, alpha)?, usable))
}

/// One prediction per test utterance, in split order; missing lines are empty.
pub fn translate_test(table: &TranslationTable, lines: &dyn LineSource, split: &Split, k: usize) -> Result<Vec<Prediction>> {
    if k == 0 {
        return Err(Error::InvalidConfig("K must be at least 1".into()));
    }
    Ok(split
        .test
        .iter()
        .map(|id| translate_utterance(table, id, lines.line(id).unwrap_or(&[]), k))
        .collect())
}

/// Diagnostics computable from what is available: UTD statistics need
/// matches and clusters, gold statistics need alignments, and the oracle OOV
/// row needs transcripts.
pub fn diagnose(
    corpus: &Corpus,
    split: &Split,
    pseudotext: &Pseudotext,
    utd: Option<(&[Match], &Clustering)>,
    frame_counts: Option<&HashMap<String, usize>>,
    frame_shift_ms: f64,
) -> Result<DiagnosticsReport> {
    let mut report = DiagnosticsReport::default();
    let condition = match pseudotext.source {
        crate::pseudotext::PseudotextSource::Utd => "utd",
        crate::pseudotext::PseudotextSource::Oracle => "oracle",
    };
    report.oov.insert(
        condition.to_owned(),
        oov_stats(&pseudotext.subset(&split.train), &pseudotext.subset(&split.test)),
    );
    if condition == "utd" && corpus.has_transcripts() {
        let oracle = generate_oracle_pseudotext(corpus)?;
        report
            .oov
            .insert("oracle".into(), oov_stats(&oracle.subset(&split.train), &oracle.subset(&split.test)));
    }
    if let Some((matches, clustering)) = utd {
        let labeler = corpus.has_alignments().then(|| GoldLabeler::new(corpus, frame_shift_ms));
        report.locality = Some(match_locality(matches, corpus, labeler.as_ref())?);
        if let Some(l) = &labeler {
            report.purity = Some(cluster_purity(clustering, l)?);
            report.cluster_counts = Some(cluster_mapping_stats(clustering, l)?);
        }
        if let Some(fc) = frame_counts {
            report.coverage = Some(audio_coverage(clustering, fc));
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub oracle: bool,
    pub split_mode: SplitMode,
    pub split_ratio: f64,
    pub seed: u64,
    pub utd: UtdParams,
    pub overlap: f64,
    pub iterations: usize,
    pub alpha: f64,
    pub ks: Vec<usize>,
    pub averaging: Averaging,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            oracle: false,
            split_mode: SplitMode::Call,
            split_ratio: 0.8,
            seed: 0,
            utd: UtdParams::default(),
            overlap: 0.5,
            iterations: 5,
            alpha: 0.01,
            ks: vec![1, 5],
            averaging: Averaging::Micro,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub mode: SplitMode,
    pub ratio: f64,
    pub seed: u64,
    pub train_utterances: usize,
    pub test_utterances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoverySummary {
    pub num_matches: usize,
    pub num_clusters: usize,
    pub num_occurrences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub usable_pairs: usize,
    pub source_types: usize,
    pub log_likelihoods: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub condition: String,
    pub config: RunConfig,
    pub split: SplitSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discovery: Option<DiscoverySummary>,
    pub training: TrainingSummary,
    pub translation: Vec<TranslationScore>,
    pub diagnostics: DiagnosticsReport,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.translation.iter().find(|s| s.k == k).map(|s| s.recall)
    }

    pub fn precision_at(&self, k: usize) -> Option<f64> {
        self.translation.iter().find(|s| s.k == k).map(|s| s.precision)
    }
}

pub const MATCHES_FILE: &str = "matches.tsv";
pub const CLUSTERS_FILE: &str = "clusters.json";
pub const PSEUDOTEXT_FILE: &str = "pseudotext.txt";
pub const SPLIT_FILE: &str = "split.json";
pub const MODEL_FILE: &str = "model.tsv";
pub const REPORT_FILE: &str = "report.json";

pub fn predictions_file(k: usize) -> String {
    format!("predictions_k{k}.jsonl")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs every stage and writes the stage outputs and `report.json` into `out_dir`.
pub fn run_all(
    corpus: &Corpus,
    stopwords: &StopwordList,
    config: &RunConfig,
    out_dir: &Path,
) -> std::result::Result<Report, StageError> {
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(out_dir, e))
        .stage(Stage::Split)?;
    if config.ks.is_empty() || config.ks.contains(&0) {
        return Err(Error::InvalidConfig("K values must be positive".into())).stage(Stage::Translate);
    }

    let mut discovery = None;
    let mut utd_outputs = None;
    let mut frame_counts = None;
    let mut frame_shift_ms = 10.0;
    let pseudotext = if config.oracle {
        generate_oracle_pseudotext(corpus).stage(Stage::Pseudotext)?
    } else {
        let (matches, features) = discover(&ManifestFeatures::new(corpus), &config.utd).stage(Stage::Discover)?;
        save_matches(&matches, out_dir.join(MATCHES_FILE)).stage(Stage::Discover)?;
        if let Some(first) = features.first() {
            frame_shift_ms = f64::from(first.frame_shift_ms);
        }
        frame_counts = Some(
            features
                .iter()
                .map(|f| (f.utterance_id.clone(), f.num_frames()))
                .collect::<HashMap<_, _>>(),
        );
        drop(features);
        if !(0.0..=1.0).contains(&config.overlap) {
            return Err(Error::InvalidConfig(format!("overlap {} outside [0, 1]", config.overlap)))
                .stage(Stage::Cluster);
        }
        let clustering = cluster_matches(&matches, config.overlap, &UtteranceOrder::from_corpus(corpus));
        clustering.save(out_dir.join(CLUSTERS_FILE)).stage(Stage::Cluster)?;
        discovery = Some(DiscoverySummary {
            num_matches: matches.len(),
            num_clusters: clustering.clusters.len(),
            num_occurrences: clustering.num_occurrences(),
        });
        let pt = generate_pseudotext(&clustering, corpus).stage(Stage::Pseudotext)?;
        utd_outputs = Some((matches, clustering));
        pt
    };
    pseudotext.save(out_dir.join(PSEUDOTEXT_FILE)).stage(Stage::Pseudotext)?;

    let split = split_corpus(corpus, config.split_mode, config.split_ratio, config.seed).stage(Stage::Split)?;
    split.save(out_dir.join(SPLIT_FILE)).stage(Stage::Split)?;

    let (model, usable_pairs) = train_model(&pseudotext, corpus, &split, stopwords, config.iterations, config.alpha)
        .stage(Stage::Train)?;
    model.table.save(out_dir.join(MODEL_FILE)).stage(Stage::Train)?;

    let mut translation = Vec::new();
    for &k in &config.ks {
        let preds = translate_test(&model.table, &pseudotext, &split, k).stage(Stage::Translate)?;
        save_predictions(&preds, out_dir.join(predictions_file(k))).stage(Stage::Translate)?;
        let records = evaluate_predictions(&preds, corpus, stopwords).stage(Stage::Evaluate)?;
        translation.push(score_records(k, &records, config.averaging).stage(Stage::Evaluate)?);
    }

    let diagnostics = diagnose(
        corpus,
        &split,
        &pseudotext,
        utd_outputs.as_ref().map(|(m, c)| (m.as_slice(), c)),
        frame_counts.as_ref(),
        frame_shift_ms,
    )
    .stage(Stage::Diagnose)?;

    let report = Report {
        condition: if config.oracle { "oracle" } else { "utd" }.into(),
        config: config.clone(),
        split: SplitSummary {
            mode: split.mode,
            ratio: split.ratio,
            seed: split.seed,
            train_utterances: split.train.len(),
            test_utterances: split.test.len(),
        },
        discovery,
        training: TrainingSummary {
            usable_pairs,
            source_types: model.table.num_sources(),
            log_likelihoods: model.log_likelihoods.clone(),
        },
        translation,
        diagnostics,
    };
    write_text(&out_dir.join(REPORT_FILE), &report.to_json()).stage(Stage::Evaluate)?;
    Ok(report)
}
