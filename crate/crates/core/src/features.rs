//! Acoustic front end and feature-file I/O.
//!
//! Everything downstream of this module consumes [`FeatureMatrix`] only.
//! The MFCC chain is the usual one: per-frame pre-emphasis, Hamming window,
//! magnitude spectrum, triangular mel filterbank, floored log, DCT-II, and
//! optional ±2-frame regression deltas.
//!
//! Feature files are little-endian: magic `PTFT`, `u32` version (1), `u32` dim,
//! `u32` frame count, `f32` frame shift in ms, then the frames row-major as `f32`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"PTFT";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;
const LOG_FLOOR: f64 = 1e-10;
const DELTA_WINDOW: usize = 2;

/// Per-utterance sequence of fixed-dimension acoustic frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub utterance_id: String,
    pub frame_shift_ms: f32,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(
        utterance_id: impl Into<String>,
        frame_shift_ms: f32,
        dim: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::DimensionMismatch("dim must be positive".into()));
        }
        if data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch(format!(
                "{} values do not form whole frames of dim {dim}",
                data.len()
            )));
        }
        if !(frame_shift_ms.is_finite() && frame_shift_ms > 0.0) {
            return Err(Error::InvalidConfig(format!("frame shift {frame_shift_ms}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite feature value".into()));
        }
        Ok(FeatureMatrix {
            utterance_id: utterance_id.into(),
            frame_shift_ms,
            dim,
            data,
        })
    }

    pub fn from_frames(
        utterance_id: impl Into<String>,
        frame_shift_ms: f32,
        frames: &[Vec<f32>],
    ) -> Result<Self> {
        let dim = frames.first().map(Vec::len).unwrap_or(0);
        if frames.iter().any(|f| f.len() != dim) {
            return Err(Error::DimensionMismatch("ragged frames".into()));
        }
        Self::new(utterance_id, frame_shift_ms, dim, frames.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_frames(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_frames() as u32).to_le_bytes());
        out.extend_from_slice(&self.frame_shift_ms.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(utterance_id: impl Into<String>, bytes: &[u8], path: &Path) -> Result<Self> {
        let header = parse_header(bytes, path)?;
        let expected = header.num_frames as usize * header.dim as usize;
        let body = &bytes[HEADER_LEN..];
        if body.len() < 4 * expected {
            return Err(Error::Truncated(path.to_path_buf()));
        }
        if body.len() > 4 * expected {
            return Err(Error::DimensionMismatch(format!(
                "{}: {} trailing bytes after {}x{} frames",
                path.display(),
                body.len() - 4 * expected,
                header.num_frames,
                header.dim
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(utterance_id, header.frame_shift_ms, header.dim as usize, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureHeader {
    pub dim: u32,
    pub num_frames: u32,
    pub frame_shift_ms: f32,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<FeatureHeader> {
    if bytes.len() < FEATURE_MAGIC.len() {
        return Err(Error::Truncated(path.to_path_buf()));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated(path.to_path_buf()));
    }
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let version = u32_at(4);
    if version != FEATURE_VERSION {
        return Err(Error::parse(path, 0, format!("unsupported feature file version {version}")));
    }
    let header = FeatureHeader {
        dim: u32_at(8),
        num_frames: u32_at(12),
        frame_shift_ms: f32::from_le_bytes([bytes[16], bytes[17], bytes[18], bytes[19]]),
    };
    if header.dim == 0 || header.num_frames == 0 {
        return Err(Error::DimensionMismatch(format!(
            "{}: header declares {}x{} frames",
            path.display(),
            header.num_frames,
            header.dim
        )));
    }
    Ok(header)
}

pub fn save_features(fm: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, fm.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Loads a feature file; the utterance id is taken from the file stem.
pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    load_features_as(path, id)
}

pub fn load_features_as(path: impl AsRef<Path>, utterance_id: impl Into<String>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureMatrix::from_bytes(utterance_id, &bytes, path)
}

/// Reads only the 20-byte header.
pub fn read_feature_header(path: impl AsRef<Path>) -> Result<FeatureHeader> {
    use std::io::Read;
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(HEADER_LEN);
    fs::File::open(path)
        .and_then(|f| f.take(HEADER_LEN as u64).read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    parse_header(&buf, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub sample_rate_hz: u32,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub num_mel_filters: usize,
    pub num_cepstra: usize,
    pub preemphasis: f64,
    pub append_deltas: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate_hz: 16_000,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            num_mel_filters: 23,
            num_cepstra: 13,
            preemphasis: 0.97,
            append_deltas: true,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.sample_rate_hz == 0 {
            return bad("sample_rate_hz must be positive".into());
        }
        if !(self.frame_length_ms > 0.0 && self.frame_shift_ms > 0.0) {
            return bad("frame length and shift must be positive".into());
        }
        if self.frame_shift_ms > self.frame_length_ms {
            return bad(format!(
                "frame_shift_ms {} exceeds frame_length_ms {}",
                self.frame_shift_ms, self.frame_length_ms
            ));
        }
        if self.num_cepstra == 0 || self.num_cepstra > self.num_mel_filters {
            return bad(format!(
                "num_cepstra {} must be in 1..={}",
                self.num_cepstra, self.num_mel_filters
            ));
        }
        if !(0.0..1.0).contains(&self.preemphasis) {
            return bad(format!("preemphasis {} outside [0,1)", self.preemphasis));
        }
        if self.frame_length_samples() < 2 || self.frame_shift_samples() == 0 {
            return bad("frame shorter than two samples".into());
        }
        Ok(())
    }

    pub fn frame_length_samples(&self) -> usize {
        (self.sample_rate_hz as f64 * self.frame_length_ms / 1000.0).round() as usize
    }

    pub fn frame_shift_samples(&self) -> usize {
        (self.sample_rate_hz as f64 * self.frame_shift_ms / 1000.0).round() as usize
    }

    pub fn fft_size(&self) -> usize {
        self.frame_length_samples().next_power_of_two()
    }

    pub fn output_dim(&self) -> usize {
        if self.append_deltas {
            2 * self.num_cepstra
        } else {
            self.num_cepstra
        }
    }

    /// Frames produced for `num_samples` input samples, 0 if shorter than one frame.
    pub fn num_frames(&self, num_samples: usize) -> usize {
        let len = self.frame_length_samples();
        if num_samples < len {
            0
        } else {
            (num_samples - len) / self.frame_shift_samples() + 1
        }
    }
}

/// Reusable MFCC extractor; the filterbank, window and FFT plan are built once.
pub struct Mfcc {
    config: FeatureConfig,
    window: Vec<f64>,
    filterbank: Vec<Vec<(usize, f64)>>,
    dct: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl Mfcc {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        config.validate()?;
        let n = config.frame_length_samples();
        let fft_size = config.fft_size();
        let window = (0..n)
            .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
            .collect();
        let filterbank = mel_filterbank(config.num_mel_filters, fft_size, config.sample_rate_hz as f64);
        let dct = dct_matrix(config.num_cepstra, config.num_mel_filters);
        let fft = FftPlanner::new().plan_fft_forward(fft_size);
        Ok(Mfcc {
            config,
            window,
            filterbank,
            dct,
            fft,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    fn cepstra(&self, frame: &[f64], buf: &mut Vec<Complex<f64>>) -> Vec<f64> {
        let a = self.config.preemphasis;
        buf.clear();
        buf.extend(frame.iter().enumerate().map(|(i, &x)| {
            let prev = if i == 0 { x } else { frame[i - 1] };
            Complex::new((x - a * prev) * self.window[i], 0.0)
        }));
        buf.resize(self.config.fft_size(), Complex::new(0.0, 0.0));
        self.fft.process(buf);
        let log_mel: Vec<f64> = self
            .filterbank
            .iter()
            .map(|filter| {
                let e: f64 = filter.iter().map(|&(k, w)| w * buf[k].norm()).sum();
                e.max(LOG_FLOOR).ln()
            })
            .collect();
        self.dct
            .iter()
            .map(|row| row.iter().zip(&log_mel).map(|(c, x)| c * x).sum())
            .collect()
    }

    pub fn compute(&self, utterance_id: &str, samples: &[f32]) -> Result<FeatureMatrix> {
        let len = self.config.frame_length_samples();
        let shift = self.config.frame_shift_samples();
        let t = self.config.num_frames(samples.len());
        if t == 0 {
            return Err(Error::TooShort(format!(
                "{} samples, need at least {len} for one frame",
                samples.len()
            )));
        }
        let mut buf = Vec::with_capacity(self.config.fft_size());
        let mut frame = vec![0.0f64; len];
        let cepstra: Vec<Vec<f64>> = (0..t)
            .map(|i| {
                for (dst, &src) in frame.iter_mut().zip(&samples[i * shift..i * shift + len]) {
                    *dst = src as f64;
                }
                self.cepstra(&frame, &mut buf)
            })
            .collect();
        let rows: Vec<Vec<f32>> = if self.config.append_deltas {
            let deltas = deltas(&cepstra);
            cepstra
                .iter()
                .zip(&deltas)
                .map(|(c, d)| c.iter().chain(d).map(|&v| v as f32).collect())
                .collect()
        } else {
            cepstra
                .iter()
                .map(|c| c.iter().map(|&v| v as f32).collect())
                .collect()
        };
        FeatureMatrix::from_frames(utterance_id, self.config.frame_shift_ms as f32, &rows)
    }
}

pub fn compute_mfcc(utterance_id: &str, samples: &[f32], config: &FeatureConfig) -> Result<FeatureMatrix> {
    Mfcc::new(config.clone())?.compute(utterance_id, samples)
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

/// Triangular filters equally spaced on the mel scale over [0, Nyquist],
/// stored sparsely as (bin, weight).
fn mel_filterbank(num_filters: usize, fft_size: usize, sample_rate: f64) -> Vec<Vec<(usize, f64)>> {
    let num_bins = fft_size / 2 + 1;
    let mel_max = hz_to_mel(sample_rate / 2.0);
    let centers: Vec<f64> = (0..num_filters + 2)
        .map(|i| mel_max * i as f64 / (num_filters + 1) as f64)
        .collect();
    (0..num_filters)
        .map(|m| {
            let (left, center, right) = (centers[m], centers[m + 1], centers[m + 2]);
            (0..num_bins)
                .filter_map(|k| {
                    let mel = hz_to_mel(k as f64 * sample_rate / fft_size as f64);
                    let w = if mel > left && mel <= center {
                        (mel - left) / (center - left)
                    } else if mel > center && mel < right {
                        (right - mel) / (right - center)
                    } else {
                        0.0
                    };
                    (w > 0.0).then_some((k, w))
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II rows 0..num_cepstra.
fn dct_matrix(num_cepstra: usize, n: usize) -> Vec<Vec<f64>> {
    (0..num_cepstra)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            (0..n)
                .map(|m| scale * (PI * k as f64 * (m as f64 + 0.5) / n as f64).cos())
                .collect()
        })
        .collect()
}

/// First-order regression deltas over ±2 frames, edges replicated.
fn deltas(frames: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let t = frames.len() as isize;
    let denom: f64 = 2.0 * (1..=DELTA_WINDOW).map(|n| (n * n) as f64).sum::<f64>();
    let at = |i: isize| &frames[i.clamp(0, t - 1) as usize];
    (0..t)
        .map(|i| {
            let dim = frames[0].len();
            (0..dim)
                .map(|d| {
                    (1..=DELTA_WINDOW as isize)
                        .map(|n| n as f64 * (at(i + n)[d] - at(i - n)[d]))
                        .sum::<f64>()
                        / denom
                })
                .collect()
        })
        .collect()
}

/// Reads a mono WAV file as samples in [-1, 1] plus its sample rate.
pub fn read_wav(path: impl AsRef<Path>) -> Result<(Vec<f32>, u32)> {
    let path = path.as_ref();
    let wav_err = |message: String| Error::Wav {
        path: path.to_path_buf(),
        message,
    };
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(wav_err(format!("expected mono audio, found {} channels", spec.channels)));
    }
    let samples: std::result::Result<Vec<f32>, hound::Error> = match spec.sample_format {
        hound::SampleFormat::Float => reader.into_samples::<f32>().collect(),
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect()
        }
    };
    Ok((samples.map_err(|e| wav_err(e.to_string()))?, spec.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, seconds: f64, sr: u32) -> Vec<f32> {
        let n = (seconds * sr as f64) as usize;
        (0..n)
            .map(|i| (0.5 * (2.0 * PI * freq * i as f64 / sr as f64).sin()) as f32)
            .collect()
    }

    fn mean_frame(fm: &FeatureMatrix) -> Vec<f64> {
        let mut acc = vec![0.0; fm.dim()];
        for f in fm.frames() {
            for (a, &v) in acc.iter_mut().zip(f) {
                *a += v as f64;
            }
        }
        acc.iter().map(|a| a / fm.num_frames() as f64).collect()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn silence_gives_closed_form_count_and_constant_frames() {
        let cfg = FeatureConfig::default();
        let fm = compute_mfcc("sil", &vec![0.0; 16_000], &cfg).unwrap();
        assert_eq!(fm.num_frames(), (1000 - 25) / 10 + 1);
        assert_eq!(fm.num_frames(), 98);
        assert_eq!(fm.dim(), 26);
        let first = fm.frame(0).to_vec();
        assert!(fm.frames().all(|f| f == first.as_slice()));
    }

    #[test]
    fn constant_nonzero_input_gives_constant_frames() {
        let cfg = FeatureConfig::default();
        let fm = compute_mfcc("dc", &vec![0.25; 8_000], &cfg).unwrap();
        let first = fm.frame(0).to_vec();
        assert!(fm.frames().all(|f| f == first.as_slice()));
        assert!(fm.frame(0)[13..].iter().all(|&d| d == 0.0));
    }

    #[test]
    fn tones_are_distinguishable() {
        let cfg = FeatureConfig::default();
        let a = mean_frame(&compute_mfcc("a", &tone(440.0, 0.5, 16_000), &cfg).unwrap());
        let a2 = mean_frame(&compute_mfcc("a2", &tone(440.0, 0.5, 16_000), &cfg).unwrap());
        let b = mean_frame(&compute_mfcc("b", &tone(880.0, 0.5, 16_000), &cfg).unwrap());
        assert!(cosine(&a, &b) < cosine(&a, &a2));
    }

    #[test]
    fn invalid_configs_rejected() {
        let cfg = FeatureConfig {
            frame_shift_ms: 30.0,
            ..FeatureConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        let cfg = FeatureConfig {
            num_cepstra: 30,
            ..FeatureConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(matches!(
            compute_mfcc("x", &[0.0; 100], &FeatureConfig::default()),
            Err(Error::TooShort(_))
        ));
    }

    #[test]
    fn frame_count_formula() {
        let cfg = FeatureConfig::default();
        for n in [400usize, 401, 559, 560, 16_000, 16_159] {
            let fm = compute_mfcc("x", &vec![0.1; n], &cfg).unwrap();
            assert_eq!(fm.num_frames(), (n - 400) / 160 + 1);
        }
    }

    #[test]
    fn fft_size_is_next_power_of_two() {
        assert_eq!(FeatureConfig::default().fft_size(), 512);
    }

    #[test]
    fn bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ptft");
        fs::write(&p, b"").unwrap();
        assert!(matches!(load_features(&p), Err(Error::Truncated(_))));
        fs::write(&p, b"NOPE\x01\x00\x00\x00").unwrap();
        let err = load_features(&p).unwrap_err();
        assert!(err.to_string().contains("bad magic"));

        let fm = FeatureMatrix::new("x", 10.0, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = fm.to_bytes();
        bytes.pop();
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_features(&p), Err(Error::Truncated(_))));
        let mut bytes = fm.to_bytes();
        bytes.extend_from_slice(&[0; 4]);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_features(&p), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn header_only_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u7.ptft");
        let fm = FeatureMatrix::new("u7", 10.0, 3, vec![0.5; 12]).unwrap();
        save_features(&fm, &p).unwrap();
        let h = read_feature_header(&p).unwrap();
        assert_eq!((h.dim, h.num_frames, h.frame_shift_ms), (3, 4, 10.0));
        assert_eq!(load_features(&p).unwrap(), fm);
    }

    #[test]
    fn wav_roundtrip_into_mfcc() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        for s in tone(300.0, 0.3, 16_000) {
            w.write_sample((s * 32767.0) as i16).unwrap();
        }
        w.finalize().unwrap();
        let (samples, sr) = read_wav(&p).unwrap();
        assert_eq!(sr, 16_000);
        assert_eq!(samples.len(), 4800);
        assert!(samples.iter().all(|s| s.abs() <= 1.0));
        let fm = compute_mfcc("t", &samples, &FeatureConfig::default()).unwrap();
        assert_eq!(fm.num_frames(), (4800 - 400) / 160 + 1);
    }
}
