use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use pseudoterm::cluster::{cluster_matches, Clustering, UtteranceOrder};
use pseudoterm::corpus::{load_manifest, split_corpus, Corpus, Split, SplitMode, StopwordList};
use pseudoterm::eval::{evaluate_predictions, locality_tsv, oov_tsv, score_records, scores_tsv, Averaging};
use pseudoterm::features::{read_feature_header, FeatureConfig};
use pseudoterm::model1::TranslationTable;
use pseudoterm::pipeline::{
    diagnose, discover, extract_features, run_all, train_model, translate_test, FeatureDir, InStage, RunConfig,
    Stage, StageError,
};
use pseudoterm::pseudotext::{generate_oracle_pseudotext, generate_pseudotext, Pseudotext, PseudotextSource};
use pseudoterm::synth::{generate_corpus, SynthConfig};
use pseudoterm::translate::{load_predictions, save_predictions};
use pseudoterm::utd::{load_matches, save_matches, UtdParams};
use pseudoterm::{Error, Result};

#[derive(Parser)]
#[command(name = "pseudoterm", version, about = "Keyword translation of untranscribed speech through discovered pseudoterms")]
struct Cli {
    /// Directory for stage outputs.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Random seed for splitting and synthesis.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with a planted lexicon.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compute MFCC feature files from the manifest's audio.
    Features {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Find repeated segments among all feature files of a directory.
    Discover {
        #[arg(long)]
        features_dir: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Group matched segments into pseudoterm clusters.
    Cluster {
        #[arg(long)]
        matches: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        overlap: f64,
        /// Number clusters in manifest order instead of by utterance id.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-utterance pseudoterm lines.
    Pseudotext {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
        clusters: Option<PathBuf>,
        /// Use gold transcripts instead of clusters.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split utterances into train and test sides.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Call)]
        mode: ModeArg,
        #[arg(long, default_value_t = 0.8)]
        ratio: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the translation table on the train side.
    Train {
        #[arg(long)]
        pseudotext: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, default_value_t = 5)]
        iters: usize,
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
        #[arg(long)]
        stopwords: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict keywords for the test side.
    Translate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pseudotext: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score prediction files against reference translations.
    Evaluate {
        #[arg(long, required = true, num_args = 1..)]
        predictions: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        stopwords: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = AveragingArg::Micro)]
        averaging: AveragingArg,
        #[command(flatten)]
        format: FormatArgs,
    },
    /// Purity, coverage, OOV and match-locality statistics.
    Diagnose {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        pseudotext: PathBuf,
        /// The pseudotext came from gold transcripts.
        #[arg(long)]
        oracle: bool,
        #[arg(long, requires = "clusters")]
        matches: Option<PathBuf>,
        #[arg(long, requires = "matches")]
        clusters: Option<PathBuf>,
        #[command(flatten)]
        format: FormatArgs,
    },
    /// Run every stage into the output directory.
    RunAll(RunAllArgs),
}

#[derive(Args)]
struct RunAllArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    oracle: bool,
    #[arg(long, value_enum, default_value_t = ModeArg::Call)]
    split_mode: ModeArg,
    #[arg(long, default_value_t = 0.8)]
    ratio: f64,
    /// Predictions per pseudoterm; repeat or comma-separate.
    #[arg(long = "k", value_delimiter = ',', default_values_t = [1, 5])]
    ks: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    iters: usize,
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    stopwords: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = AveragingArg::Micro)]
    averaging: AveragingArg,
}

#[derive(Args)]
struct FormatArgs {
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Output file for JSON; TSV tables go to the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Call,
    Utterance,
}

impl From<ModeArg> for SplitMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Call => SplitMode::Call,
            ModeArg::Utterance => SplitMode::Utterance,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AveragingArg {
    Micro,
    Macro,
}

impl From<AveragingArg> for Averaging {
    fn from(a: AveragingArg) -> Self {
        match a {
            AveragingArg::Micro => Averaging::Micro,
            AveragingArg::Macro => Averaging::Macro,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Tsv,
}

type StageResult<T> = std::result::Result<T, StageError>;

fn out_path(out_dir: &Path, explicit: Option<PathBuf>, default_name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| out_dir.join(default_name))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_owned(),
        source: e,
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

fn stopwords(path: Option<&Path>) -> Result<StopwordList> {
    path.map_or_else(|| Ok(StopwordList::bundled()), StopwordList::from_file)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

#[derive(Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'static str,
    version: &'static str,
    jobs: usize,
    config: &'a RunConfig,
    manifest: InputDigest,
    stopwords: Option<InputDigest>,
    /// Digest over `utterance_id<TAB>sha256` lines of all feature files, in manifest order.
    features_sha256: Option<String>,
    num_utterances: usize,
}

fn features_digest(corpus: &Corpus) -> Result<String> {
    let mut h = Sha256::new();
    for u in corpus.utterances() {
        let d = sha256_file(&corpus.feature_path(u))?;
        h.update(format!("{}\t{d}\n", u.utterance_id));
    }
    Ok(format!("{:x}", h.finalize()))
}

fn frame_info(corpus: &Corpus) -> Result<(HashMap<String, usize>, f64)> {
    let mut counts = HashMap::new();
    let mut shift = 10.0;
    for u in corpus.utterances() {
        let h = read_feature_header(corpus.feature_path(u))?;
        counts.insert(u.utterance_id.clone(), h.num_frames as usize);
        shift = f64::from(h.frame_shift_ms);
    }
    Ok((counts, shift))
}

fn run(cli: Cli) -> StageResult<()> {
    let out_dir = cli.out_dir;
    match cli.command {
        Command::Synth { config } => {
            let mut cfg = match config {
                Some(p) => SynthConfig::load(p).stage(Stage::Synth)?,
                None => SynthConfig::default(),
            };
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let synth = generate_corpus(&cfg).stage(Stage::Synth)?;
            let manifest = synth.write(&out_dir).stage(Stage::Synth)?;
            println!("wrote {} utterances to {}", synth.corpus.len(), manifest.display());
        }
        Command::Features { manifest, config } => {
            let corpus = load_manifest(&manifest).stage(Stage::Features)?;
            let cfg = match config {
                Some(p) => {
                    let text = fs::read_to_string(&p)
                        .map_err(|e| Error::Io { path: p.clone(), source: e })
                        .stage(Stage::Features)?;
                    serde_json::from_str(&text)
                        .map_err(|e| Error::Parse { path: p, line: e.line(), message: e.to_string() })
                        .stage(Stage::Features)?
                }
                None => FeatureConfig::default(),
            };
            let written = extract_features(&corpus, &cfg, &out_dir).stage(Stage::Features)?;
            println!("wrote {} feature files to {}", written.len(), out_dir.display());
        }
        Command::Discover { features_dir, params, out } => {
            let params = match params {
                Some(p) => UtdParams::load(p).stage(Stage::Discover)?,
                None => UtdParams::default(),
            };
            let (matches, _) = discover(&FeatureDir(features_dir), &params).stage(Stage::Discover)?;
            let path = out_path(&out_dir, out, "matches.tsv");
            create_dir(&out_dir).stage(Stage::Discover)?;
            save_matches(&matches, &path).stage(Stage::Discover)?;
            println!("{} matches → {}", matches.len(), path.display());
        }
        Command::Cluster { matches, overlap, manifest, out } => {
            if !(0.0..=1.0).contains(&overlap) {
                return Err(Error::InvalidConfig(format!("overlap {overlap} outside [0, 1]"))).stage(Stage::Cluster);
            }
            let matches = load_matches(matches).stage(Stage::Cluster)?;
            let order = match manifest {
                Some(m) => UtteranceOrder::from_corpus(&load_manifest(m).stage(Stage::Cluster)?),
                None => UtteranceOrder::lexical(),
            };
            let clustering = cluster_matches(&matches, overlap, &order);
            let path = out_path(&out_dir, out, "clusters.json");
            create_dir(&out_dir).stage(Stage::Cluster)?;
            clustering.save(&path).stage(Stage::Cluster)?;
            println!("{} clusters → {}", clustering.clusters.len(), path.display());
        }
        Command::Pseudotext { manifest, clusters, oracle, out } => {
            let corpus = load_manifest(manifest).stage(Stage::Pseudotext)?;
            let pt = if oracle {
                generate_oracle_pseudotext(&corpus)
            } else {
                let clusters = clusters.expect("clap enforces --clusters or --oracle");
                Clustering::load(clusters).and_then(|c| generate_pseudotext(&c, &corpus))
            }
            .stage(Stage::Pseudotext)?;
            let path = out_path(&out_dir, out, "pseudotext.txt");
            create_dir(&out_dir).stage(Stage::Pseudotext)?;
            pt.save(&path).stage(Stage::Pseudotext)?;
            println!("{} lines, {} tokens → {}", pt.lines.len(), pt.num_tokens(), path.display());
        }
        Command::Split { manifest, mode, ratio, out } => {
            let corpus = load_manifest(manifest).stage(Stage::Split)?;
            let split = split_corpus(&corpus, mode.into(), ratio, cli.seed.unwrap_or(0)).stage(Stage::Split)?;
            let path = out_path(&out_dir, out, "split.json");
            create_dir(&out_dir).stage(Stage::Split)?;
            split.save(&path).stage(Stage::Split)?;
            println!("{} train / {} test → {}", split.train.len(), split.test.len(), path.display());
        }
        Command::Train { pseudotext, manifest, split, iters, alpha, stopwords: sw, out } => {
            let corpus = load_manifest(manifest).stage(Stage::Train)?;
            let split = Split::load(split).stage(Stage::Train)?;
            split.validate(&corpus).stage(Stage::Train)?;
            let pt = Pseudotext::load(pseudotext, PseudotextSource::Utd).stage(Stage::Train)?;
            let sw = stopwords(sw.as_deref()).stage(Stage::Train)?;
            let (model, usable) = train_model(&pt, &corpus, &split, &sw, iters, alpha).stage(Stage::Train)?;
            let path = out_path(&out_dir, out, "model.tsv");
            create_dir(&out_dir).stage(Stage::Train)?;
            model.table.save(&path).stage(Stage::Train)?;
            let ll = model.log_likelihoods.last().copied().unwrap_or(f64::NAN);
            println!("trained on {usable} pairs, log-likelihood {ll:.4} → {}", path.display());
        }
        Command::Translate { model, pseudotext, split, k, out } => {
            let table = TranslationTable::load(model).stage(Stage::Translate)?;
            let pt = Pseudotext::load(pseudotext, PseudotextSource::Utd).stage(Stage::Translate)?;
            let split = Split::load(split).stage(Stage::Translate)?;
            let preds = translate_test(&table, &pt, &split, k).stage(Stage::Translate)?;
            let path = out_path(&out_dir, out, &format!("predictions_k{k}.jsonl"));
            create_dir(&out_dir).stage(Stage::Translate)?;
            save_predictions(&preds, &path).stage(Stage::Translate)?;
            println!("{} predictions → {}", preds.len(), path.display());
        }
        Command::Evaluate { predictions, manifest, stopwords: sw, averaging, format } => {
            let corpus = load_manifest(manifest).stage(Stage::Evaluate)?;
            let sw = stopwords(sw.as_deref()).stage(Stage::Evaluate)?;
            let mut scores = Vec::new();
            for p in &predictions {
                let preds = load_predictions(p).stage(Stage::Evaluate)?;
                let k = preds.first().map_or(0, |p| p.k);
                if preds.iter().any(|p| p.k != k) {
                    return Err(Error::InvalidConfig(format!("{} mixes K values", p.display()))).stage(Stage::Evaluate);
                }
                let records = evaluate_predictions(&preds, &corpus, &sw).stage(Stage::Evaluate)?;
                scores.push(score_records(k, &records, averaging.into()).stage(Stage::Evaluate)?);
            }
            match format.format {
                Format::Json => {
                    let text = to_json(&scores);
                    match format.out {
                        Some(path) => write_file(&path, &text).stage(Stage::Evaluate)?,
                        None => print!("{text}"),
                    }
                }
                Format::Tsv => {
                    let rows: Vec<(String, _)> = scores.into_iter().map(|s| ("system".to_owned(), s)).collect();
                    let path = out_path(&out_dir, format.out, "translation.tsv");
                    write_file(&path, &scores_tsv(&rows)).stage(Stage::Evaluate)?;
                }
            }
        }
        Command::Diagnose { manifest, split, pseudotext, oracle, matches, clusters, format } => {
            let corpus = load_manifest(manifest).stage(Stage::Diagnose)?;
            let split = Split::load(split).stage(Stage::Diagnose)?;
            let source = if oracle { PseudotextSource::Oracle } else { PseudotextSource::Utd };
            let pt = Pseudotext::load(pseudotext, source).stage(Stage::Diagnose)?;
            let utd = match (matches, clusters) {
                (Some(m), Some(c)) => Some((
                    load_matches(m).stage(Stage::Diagnose)?,
                    Clustering::load(c).stage(Stage::Diagnose)?,
                )),
                _ => None,
            };
            let (counts, shift) = match &utd {
                Some(_) => {
                    let (c, s) = frame_info(&corpus).stage(Stage::Diagnose)?;
                    (Some(c), s)
                }
                None => (None, 10.0),
            };
            let report = diagnose(
                &corpus,
                &split,
                &pt,
                utd.as_ref().map(|(m, c)| (m.as_slice(), c)),
                counts.as_ref(),
                shift,
            )
            .stage(Stage::Diagnose)?;
            match format.format {
                Format::Json => {
                    let text = to_json(&report);
                    match format.out {
                        Some(path) => write_file(&path, &text).stage(Stage::Diagnose)?,
                        None => print!("{text}"),
                    }
                }
                Format::Tsv => {
                    if let Some(t) = &report.locality {
                        write_file(&out_dir.join("locality.tsv"), &locality_tsv(t)).stage(Stage::Diagnose)?;
                    }
                    write_file(&out_dir.join("oov.tsv"), &oov_tsv(&report.oov)).stage(Stage::Diagnose)?;
                }
            }
        }
        Command::RunAll(args) => run_all_command(args, &out_dir, cli.seed, cli.jobs)?,
    }
    Ok(())
}

fn run_all_command(args: RunAllArgs, out_dir: &Path, seed: Option<u64>, jobs: usize) -> StageResult<()> {
    let corpus = load_manifest(&args.manifest).stage(Stage::Split)?;
    let sw = stopwords(args.stopwords.as_deref()).stage(Stage::Train)?;
    let utd = match &args.params {
        Some(p) => UtdParams::load(p).stage(Stage::Discover)?,
        None => UtdParams::default(),
    };
    let config = RunConfig {
        oracle: args.oracle,
        split_mode: args.split_mode.into(),
        split_ratio: args.ratio,
        seed: seed.unwrap_or(0),
        utd,
        overlap: args.overlap,
        iterations: args.iters,
        alpha: args.alpha,
        ks: args.ks,
        averaging: args.averaging.into(),
    };
    let report = run_all(&corpus, &sw, &config, out_dir)?;

    let features_sha256 = if args.oracle {
        None
    } else {
        Some(features_digest(&corpus).stage(Stage::Discover)?)
    };
    let record = RunRecord {
        command: "run-all",
        version: env!("CARGO_PKG_VERSION"),
        jobs,
        config: &config,
        manifest: InputDigest {
            path: args.manifest.display().to_string(),
            sha256: sha256_file(&args.manifest).stage(Stage::Split)?,
        },
        stopwords: match &args.stopwords {
            Some(p) => Some(InputDigest {
                path: p.display().to_string(),
                sha256: sha256_file(p).stage(Stage::Train)?,
            }),
            None => None,
        },
        features_sha256,
        num_utterances: corpus.len(),
    };
    write_file(&out_dir.join("run.json"), &to_json(&record)).stage(Stage::Evaluate)?;

    let rows: Vec<(String, _)> = report
        .translation
        .iter()
        .map(|s| (report.condition.clone(), s.clone()))
        .collect();
    write_file(&out_dir.join("translation.tsv"), &scores_tsv(&rows)).stage(Stage::Evaluate)?;
    for s in &report.translation {
        println!("{} P@{k} {:.4} R@{k} {:.4}", report.condition, s.precision, s.recall, k = s.k);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.jobs > 0 {
        // Only fails if a global pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
