//! Synthetic corpora with planted acoustic "words".
//!
//! Each source word type is a fixed random trajectory on the unit sphere.
//! A call has one speaker whose frames pass through `I + κG`; utterances are
//! word sequences separated by near-silent gaps, with exact alignments and a
//! keyword translation through the lexicon.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{save_manifest, Corpus, StopwordList, Utterance, WordSpan};
use crate::error::{Error, Result};
use crate::features::{save_features, FeatureMatrix};
use crate::utd::Segment;

pub const FRAME_SHIFT_MS: f32 = 10.0;
const SILENCE_LEVEL: f64 = 1e-3;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const LEXICON_FILE: &str = "lexicon.json";

/// Inclusive integer range, written as `[lo, hi]`.
pub type IntRange = (usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_source_types: usize,
    pub num_calls: usize,
    pub utterances_per_call: usize,
    pub words_per_utterance: IntRange,
    pub dim: usize,
    pub frames_per_word: IntRange,
    pub speaker_distortion: f64,
    pub noise_sigma: f64,
    pub silence_gap_frames: IntRange,
    pub seed: u64,
    /// Source type → target word; a random bijection when absent.
    pub lexicon: Option<BTreeMap<String, String>>,
    pub stopword_insert_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_source_types: 30,
            num_calls: 40,
            utterances_per_call: 10,
            words_per_utterance: (2, 5),
            dim: 24,
            frames_per_word: (55, 80),
            speaker_distortion: 0.4,
            noise_sigma: 0.05,
            silence_gap_frames: (10, 30),
            seed: 0,
            lexicon: None,
            stopword_insert_rate: 0.3,
        }
    }
}

fn check_range(name: &str, r: IntRange, min: usize) -> Result<()> {
    if r.0 > r.1 || r.0 < min {
        return Err(Error::InvalidConfig(format!("{name} range [{}, {}] (minimum {min})", r.0, r.1)));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_source_types == 0 || self.num_calls == 0 || self.utterances_per_call == 0 {
            return bad("source types, calls and utterances per call must be positive".into());
        }
        if self.dim < 2 {
            return bad(format!("dim must be at least 2, got {}", self.dim));
        }
        check_range("words_per_utterance", self.words_per_utterance, 1)?;
        check_range("frames_per_word", self.frames_per_word, 1)?;
        check_range("silence_gap_frames", self.silence_gap_frames, 0)?;
        if !(self.speaker_distortion >= 0.0 && self.speaker_distortion.is_finite()) {
            return bad(format!("speaker_distortion {}", self.speaker_distortion));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {}", self.noise_sigma));
        }
        if !(0.0..1.0).contains(&self.stopword_insert_rate) {
            return bad(format!("stopword_insert_rate {} outside [0, 1)", self.stopword_insert_rate));
        }
        if let Some(lex) = &self.lexicon {
            if lex.len() != self.num_source_types {
                return bad(format!(
                    "lexicon has {} entries for {} source types",
                    lex.len(),
                    self.num_source_types
                ));
            }
            for (f, e) in lex {
                let ok = |w: &str| !w.is_empty() && w.chars().all(char::is_alphanumeric) && w == w.to_lowercase();
                if !ok(f) || !ok(e) {
                    return bad(format!("lexicon entry {f:?} → {e:?} is not a lowercase alphanumeric word"));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: SynthConfig = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Generated corpus: manifest entries (feature paths relative to the output
/// directory), matching features, and the planted lexicon.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub features: Vec<FeatureMatrix>,
    pub lexicon: BTreeMap<String, String>,
}

impl SynthCorpus {
    /// Writes `manifest.jsonl`, `features/<utterance>.ptft` and `lexicon.json`.
    pub fn write(&self, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
        let out_dir = out_dir.as_ref();
        let feat_dir = out_dir.join("features");
        fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
        for (utt, fm) in self.corpus.utterances().iter().zip(&self.features) {
            save_features(fm, out_dir.join(&utt.features))?;
        }
        let lex_path = out_dir.join(LEXICON_FILE);
        let mut lex = serde_json::to_string_pretty(&self.lexicon).expect("lexicon serializes");
        lex.push('\n');
        fs::write(&lex_path, lex).map_err(|e| Error::io(&lex_path, e))?;
        let manifest = out_dir.join(MANIFEST_FILE);
        save_manifest(&self.corpus, &manifest)?;
        Ok(manifest)
    }
}

pub fn load_lexicon(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Unit-normalized cumulative sum of Gaussian steps.
pub fn random_template(rng: &mut ChaCha8Rng, frames: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut pos = vec![0.0; dim];
    (0..frames)
        .map(|_| {
            pos.iter_mut().for_each(|x| *x += gaussian(rng));
            let mut frame = pos.clone();
            normalize(&mut frame);
            frame
        })
        .collect()
}

/// `I + κG` with `G` entries drawn from N(0, 1/dim).
#[derive(Debug, Clone)]
pub struct SpeakerTransform {
    dim: usize,
    matrix: Vec<f64>,
}

impl SpeakerTransform {
    pub fn sample(rng: &mut ChaCha8Rng, dim: usize, distortion: f64) -> Self {
        let scale = distortion / (dim as f64).sqrt();
        let mut matrix: Vec<f64> = (0..dim * dim).map(|_| scale * gaussian(rng)).collect();
        for i in 0..dim {
            matrix[i * dim + i] += 1.0;
        }
        SpeakerTransform { dim, matrix }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matrix
            .chunks_exact(self.dim)
            .map(|row| row.iter().zip(x).map(|(m, v)| m * v).sum())
            .collect()
    }
}

fn render(
    template: &[Vec<f64>],
    speaker: &SpeakerTransform,
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    template
        .iter()
        .map(|x| {
            let mut y = speaker.apply(x);
            for v in &mut y {
                // Always draw, so the noise stream does not depend on sigma.
                *v += noise_sigma * gaussian(rng);
            }
            y
        })
        .collect()
}

fn silence(rng: &mut ChaCha8Rng, frames: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..frames)
        .map(|_| (0..dim).map(|_| SILENCE_LEVEL * gaussian(rng)).collect())
        .collect()
}

fn to_matrix(id: &str, frames: &[Vec<f64>]) -> Result<FeatureMatrix> {
    let dim = frames.first().map_or(0, Vec::len);
    let data = frames.iter().flatten().map(|&v| v as f32).collect();
    FeatureMatrix::new(id, FRAME_SHIFT_MS, dim, data)
}

fn frame_time(frame: usize) -> f64 {
    frame as f64 * f64::from(FRAME_SHIFT_MS) / 1000.0
}

fn sample_range(rng: &mut ChaCha8Rng, r: IntRange) -> usize {
    rng.random_range(r.0..=r.1)
}

/// Independent generator streams, so that e.g. changing the noise level
/// leaves word sequences and templates untouched.
mod stream {
    pub const TEMPLATES: u64 = 0;
    pub const LEXICON: u64 = 1;
    pub const SPEAKERS: u64 = 2;
    pub const WORDS: u64 = 3;
    pub const NOISE: u64 = 4;
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn default_lexicon(n: usize, rng: &mut ChaCha8Rng) -> BTreeMap<String, String> {
    let mut targets: Vec<usize> = (0..n).collect();
    targets.shuffle(rng);
    (0..n)
        .map(|i| (source_type_name(i), format!("w{:03}", targets[i])))
        .collect()
}

fn source_type_name(i: usize) -> String {
    format!("s{i:03}")
}

pub fn generate_corpus(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let dim = config.dim;
    let mut lex_rng = rng_for(config.seed, stream::LEXICON);
    let lexicon = match &config.lexicon {
        Some(l) => l.clone(),
        None => default_lexicon(config.num_source_types, &mut lex_rng),
    };
    let types: Vec<&String> = lexicon.keys().collect();

    let mut tpl_rng = rng_for(config.seed, stream::TEMPLATES);
    let templates: Vec<Vec<Vec<f64>>> = types
        .iter()
        .map(|_| {
            let len = sample_range(&mut tpl_rng, config.frames_per_word);
            random_template(&mut tpl_rng, len, dim)
        })
        .collect();

    let stopwords = StopwordList::bundled();
    let stopwords = stopwords.sorted();
    let mut spk_rng = rng_for(config.seed, stream::SPEAKERS);
    let mut word_rng = rng_for(config.seed, stream::WORDS);
    let mut noise_rng = rng_for(config.seed, stream::NOISE);

    let mut utterances = Vec::new();
    let mut features = Vec::new();
    for c in 0..config.num_calls {
        let call_id = format!("call{c:03}");
        let speaker_id = format!("spk{c:03}");
        let speaker = SpeakerTransform::sample(&mut spk_rng, dim, config.speaker_distortion);
        for u in 0..config.utterances_per_call {
            let utterance_id = format!("{call_id}_u{u:02}");
            let n_words = sample_range(&mut word_rng, config.words_per_utterance);
            let mut frames = Vec::new();
            let mut alignment = Vec::new();
            let mut translation = Vec::new();
            for _ in 0..n_words {
                let gap = sample_range(&mut word_rng, config.silence_gap_frames);
                frames.extend(silence(&mut noise_rng, gap, dim));
                let k = word_rng.random_range(0..types.len());
                let start = frames.len();
                frames.extend(render(&templates[k], &speaker, config.noise_sigma, &mut noise_rng));
                alignment.push(WordSpan {
                    word: types[k].clone(),
                    start_s: frame_time(start),
                    end_s: frame_time(frames.len()),
                });
                if word_rng.random_bool(config.stopword_insert_rate) {
                    translation.push(stopwords.choose(&mut word_rng).expect("stopwords").to_string());
                }
                translation.push(lexicon[types[k]].clone());
            }
            let gap = sample_range(&mut word_rng, config.silence_gap_frames);
            frames.extend(silence(&mut noise_rng, gap, dim));
            let transcript = alignment.iter().map(|w| w.word.as_str()).collect::<Vec<_>>().join(" ");
            features.push(to_matrix(&utterance_id, &frames)?);
            utterances.push(Utterance {
                features: PathBuf::from("features").join(format!("{utterance_id}.ptft")),
                utterance_id,
                call_id: call_id.clone(),
                speaker_id: speaker_id.clone(),
                audio: None,
                duration_s: frame_time(frames.len()),
                translation: translation.join(" "),
                transcript: Some(transcript),
                alignment: Some(alignment),
            });
        }
    }
    Ok(SynthCorpus {
        corpus: Corpus::new(utterances)?,
        features,
        lexicon,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    pub num_pairs: usize,
    pub dim: usize,
    pub pattern_frames: usize,
    /// Unrelated material before and after the pattern.
    pub context_frames: IntRange,
    pub noise_sigma: f64,
    pub speaker_distortion: f64,
    /// Render the two sides of a pair with different speakers.
    pub cross_speaker: bool,
    pub seed: u64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig {
            num_pairs: 20,
            dim: 24,
            pattern_frames: 60,
            context_frames: (30, 90),
            noise_sigma: 0.05,
            speaker_distortion: 0.0,
            cross_speaker: false,
            seed: 0,
        }
    }
}

/// Two utterances sharing one pattern at known frames.
#[derive(Debug, Clone)]
pub struct PlantedPair {
    pub a: FeatureMatrix,
    pub b: FeatureMatrix,
    pub span_a: Segment,
    pub span_b: Segment,
}

/// Pairs `p{i}a`/`p{i}b`; the shared pattern and all context are fresh per pair.
pub fn plant_pairs(config: &PlantConfig) -> Result<Vec<PlantedPair>> {
    if config.dim < 2 || config.pattern_frames == 0 {
        return Err(Error::InvalidConfig("dim ≥ 2 and a non-empty pattern required".into()));
    }
    check_range("context_frames", config.context_frames, 0)?;
    let mut tpl_rng = rng_for(config.seed, stream::TEMPLATES);
    let mut spk_rng = rng_for(config.seed, stream::SPEAKERS);
    let mut noise_rng = rng_for(config.seed, stream::NOISE);
    let mut pairs = Vec::with_capacity(config.num_pairs);
    for i in 0..config.num_pairs {
        let pattern = random_template(&mut tpl_rng, config.pattern_frames, config.dim);
        let spk_a = SpeakerTransform::sample(&mut spk_rng, config.dim, config.speaker_distortion);
        let spk_b = SpeakerTransform::sample(&mut spk_rng, config.dim, config.speaker_distortion);
        let spk_b = if config.cross_speaker { spk_b } else { spk_a.clone() };
        let mut side = |name: String, speaker: &SpeakerTransform| -> Result<(FeatureMatrix, Segment)> {
            let before = sample_range(&mut tpl_rng, config.context_frames);
            let after = sample_range(&mut tpl_rng, config.context_frames);
            let ctx_before = random_template(&mut tpl_rng, before, config.dim);
            let ctx_after = random_template(&mut tpl_rng, after, config.dim);
            let mut frames = render(&ctx_before, speaker, config.noise_sigma, &mut noise_rng);
            frames.extend(render(&pattern, speaker, config.noise_sigma, &mut noise_rng));
            frames.extend(render(&ctx_after, speaker, config.noise_sigma, &mut noise_rng));
            let span = Segment::new(name.clone(), before, before + config.pattern_frames);
            Ok((to_matrix(&name, &frames)?, span))
        };
        let (a, span_a) = side(format!("p{i:02}a"), &spk_a)?;
        let (b, span_b) = side(format!("p{i:02}b"), &spk_b)?;
        pairs.push(PlantedPair { a, b, span_a, span_b });
    }
    Ok(pairs)
}

/// Utterances of i.i.d. Gaussian frames.
pub fn noise_utterances(n: usize, frames: IntRange, dim: usize, seed: u64) -> Result<Vec<FeatureMatrix>> {
    check_range("frames", frames, 1)?;
    let mut rng = rng_for(seed, stream::NOISE);
    (0..n)
        .map(|i| {
            let len = sample_range(&mut rng, frames);
            let fr: Vec<Vec<f64>> = (0..len).map(|_| (0..dim).map(|_| gaussian(&mut rng)).collect()).collect();
            to_matrix(&format!("n{i:02}"), &fr)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::load_features;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            num_source_types: 5,
            num_calls: 2,
            utterances_per_call: 3,
            seed,
            ..SynthConfig::default()
        }
    }

    fn cos(x: &[f32], y: &[f32]) -> f64 {
        let dot: f64 = x.iter().zip(y).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
        let n = |v: &[f32]| v.iter().map(|a| f64::from(*a).powi(2)).sum::<f64>().sqrt();
        dot / (n(x) * n(y))
    }

    #[test]
    fn deterministic_files() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_corpus(&small(7)).unwrap().write(d1.path()).unwrap();
        generate_corpus(&small(7)).unwrap().write(d2.path()).unwrap();
        for f in [MANIFEST_FILE, LEXICON_FILE, "features/call001_u02.ptft"] {
            assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap(), "{f}");
        }
        let s = generate_corpus(&small(7)).unwrap();
        let back = load_features(d1.path().join("features/call000_u00.ptft")).unwrap();
        assert_eq!(back, s.features[0]);
        assert_ne!(generate_corpus(&small(8)).unwrap().features, s.features);
    }

    #[test]
    fn zero_noise_occurrences_are_identical_across_calls() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            speaker_distortion: 0.0,
            num_calls: 6,
            ..small(3)
        };
        let s = generate_corpus(&cfg).unwrap();
        let mut seen: BTreeMap<String, (String, Vec<f32>)> = BTreeMap::new();
        let mut compared = 0;
        for (u, fm) in s.corpus.utterances().iter().zip(&s.features) {
            for w in u.alignment.as_ref().unwrap() {
                let (s0, s1) = ((w.start_s * 100.0).round() as usize, (w.end_s * 100.0).round() as usize);
                let frames = fm.as_slice()[s0 * fm.dim()..s1 * fm.dim()].to_vec();
                match seen.get(&w.word) {
                    Some((call, prev)) if *call != u.call_id => {
                        assert_eq!(*prev, frames);
                        compared += 1;
                    }
                    Some(_) => {}
                    None => {
                        seen.insert(w.word.clone(), (u.call_id.clone(), frames));
                    }
                }
            }
        }
        assert!(compared > 0);
    }

    #[test]
    fn alignment_tiles_non_silence_frames() {
        let s = generate_corpus(&small(11)).unwrap();
        for (u, fm) in s.corpus.utterances().iter().zip(&s.features) {
            let mut in_word = vec![false; fm.num_frames()];
            for w in u.alignment.as_ref().unwrap() {
                let (s0, s1) = ((w.start_s * 100.0).round() as usize, (w.end_s * 100.0).round() as usize);
                assert!(in_word[s0..s1].iter().all(|x| !x));
                in_word[s0..s1].iter_mut().for_each(|x| *x = true);
            }
            for (t, frame) in fm.frames().enumerate() {
                let norm = frame.iter().map(|v| v * v).sum::<f32>().sqrt();
                assert_eq!(norm > 0.1, in_word[t], "{} frame {t}", u.utterance_id);
            }
            assert!((u.duration_s - fm.num_frames() as f64 / 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn translations_follow_the_lexicon() {
        let s = generate_corpus(&small(5)).unwrap();
        let sw = StopwordList::bundled();
        let targets: Vec<&String> = s.lexicon.values().collect();
        let mut sorted = targets.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), targets.len());
        for u in s.corpus.utterances() {
            let content: Vec<&str> = u.translation.split(' ').filter(|w| !sw.contains(w)).collect();
            let expected: Vec<&str> = u.transcript.as_ref().unwrap().split(' ').map(|f| s.lexicon[f].as_str()).collect();
            assert_eq!(content, expected);
        }
    }

    #[test]
    fn same_type_cosine_is_high_without_distortion() {
        let cfg = SynthConfig {
            noise_sigma: 0.01,
            speaker_distortion: 0.0,
            ..small(2)
        };
        let s = generate_corpus(&cfg).unwrap();
        let mut first: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for (ui, u) in s.corpus.utterances().iter().enumerate() {
            for w in u.alignment.as_ref().unwrap() {
                let s0 = (w.start_s * 100.0).round() as usize;
                if let Some(&(uj, t0)) = first.get(w.word.as_str()) {
                    let len = ((w.end_s - w.start_s) * 100.0).round() as usize;
                    for t in 0..len {
                        assert!(cos(s.features[uj].frame(t0 + t), s.features[ui].frame(s0 + t)) >= 0.99);
                    }
                } else {
                    first.insert(&w.word, (ui, s0));
                }
            }
        }
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            SynthConfig { dim: 1, ..small(0) },
            SynthConfig { frames_per_word: (10, 5), ..small(0) },
            SynthConfig { stopword_insert_rate: 1.0, ..small(0) },
            SynthConfig { noise_sigma: -0.1, ..small(0) },
            SynthConfig { num_calls: 0, ..small(0) },
        ] {
            assert!(matches!(generate_corpus(&cfg), Err(Error::InvalidConfig(_))), "{cfg:?}");
        }
        let mut lex = BTreeMap::new();
        lex.insert("a".to_string(), "b".to_string());
        assert!(generate_corpus(&SynthConfig { lexicon: Some(lex), ..small(0) }).is_err());
    }

    #[test]
    fn explicit_lexicon_is_used() {
        let lex: BTreeMap<String, String> = [("gato", "cat"), ("perro", "dog")]
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        let cfg = SynthConfig {
            num_source_types: 2,
            lexicon: Some(lex.clone()),
            ..small(1)
        };
        let s = generate_corpus(&cfg).unwrap();
        assert_eq!(s.lexicon, lex);
        assert!(s.corpus.utterances()[0].transcript.as_ref().unwrap().split(' ').all(|w| lex.contains_key(w)));
    }

    #[test]
    fn planted_spans() {
        let pairs = plant_pairs(&PlantConfig { num_pairs: 3, noise_sigma: 0.0, ..PlantConfig::default() }).unwrap();
        for p in &pairs {
            assert_eq!(p.span_a.len(), 60);
            for t in 0..60 {
                assert_eq!(p.a.frame(p.span_a.start_frame + t), p.b.frame(p.span_b.start_frame + t));
            }
        }
        let noise = noise_utterances(4, (50, 60), 8, 1).unwrap();
        assert_eq!(noise.len(), 4);
        assert!(noise.iter().all(|n| (50..=60).contains(&n.num_frames()) && n.dim() == 8));
    }
}
