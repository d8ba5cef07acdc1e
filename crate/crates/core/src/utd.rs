//! Unsupervised term discovery: find pairs of acoustically similar segments.
//!
//! For every unordered utterance pair (each utterance also against itself) we
//! build the frame-level cosine similarity matrix, look for long near-diagonal
//! runs of high similarity ("seeds"), and refine each seed with a banded DTW
//! that grows the segment boundaries outward block by block. Surviving pairs
//! become [`Match`]es.
//!
//! The search is exhaustive, O(N² T² d) for N utterances of T frames. Pairs are
//! independent and evaluated on the current rayon pool; results are merged and
//! sorted canonically, so output does not depend on the thread count.

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::write_lines;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

/// Frames added per boundary-extension step.
const EXTEND_STEP: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Segment {
    pub utterance_id: String,
    pub start_frame: usize,
    /// Exclusive.
    pub end_frame: usize,
}

impl Segment {
    pub fn new(utterance_id: impl Into<String>, start_frame: usize, end_frame: usize) -> Self {
        Segment {
            utterance_id: utterance_id.into(),
            start_frame,
            end_frame,
        }
    }

    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame
    }

    pub fn is_empty(&self) -> bool {
        self.end_frame <= self.start_frame
    }

    /// Frames shared with `other`, 0 on different utterances.
    pub fn overlap(&self, other: &Segment) -> usize {
        if self.utterance_id != other.utterance_id {
            return 0;
        }
        self.end_frame
            .min(other.end_frame)
            .saturating_sub(self.start_frame.max(other.start_frame))
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{},{})", self.utterance_id, self.start_frame, self.end_frame)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub a: Segment,
    pub b: Segment,
    pub score: f64,
}

impl Match {
    /// Builds a match with its sides in canonical (lexicographic) order.
    pub fn new(a: Segment, b: Segment, score: f64) -> Self {
        if b < a {
            Match { a: b, b: a, score }
        } else {
            Match { a, b, score }
        }
    }

    fn sort_key(&self) -> (&str, usize, &str, usize, usize, usize) {
        (
            &self.a.utterance_id,
            self.a.start_frame,
            &self.b.utterance_id,
            self.b.start_frame,
            self.a.end_frame,
            self.b.end_frame,
        )
    }

    /// Canonical output order: (a.utt, a.start, b.utt, b.start), then ends.
    pub fn canonical_cmp(&self, other: &Match) -> Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UtdParams {
    /// Seed cell threshold δ on frame cosine similarity.
    pub sim_threshold: f64,
    pub min_seed_frames: usize,
    pub max_gap_frames: usize,
    pub band_radius_frames: usize,
    /// Acceptance threshold σ on the DTW path-mean similarity.
    pub dtw_score_threshold: f64,
    pub min_match_frames: usize,
    pub max_match_frames: usize,
}

impl Default for UtdParams {
    fn default() -> Self {
        UtdParams {
            sim_threshold: 0.80,
            min_seed_frames: 30,
            max_gap_frames: 5,
            band_radius_frames: 10,
            dtw_score_threshold: 0.85,
            min_match_frames: 50,
            max_match_frames: 300,
        }
    }
}

impl UtdParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.sim_threshold > 0.0 && self.sim_threshold <= 1.0) {
            return bad("sim_threshold must be in (0,1]");
        }
        if !(self.dtw_score_threshold > 0.0 && self.dtw_score_threshold <= 1.0) {
            return bad("dtw_score_threshold must be in (0,1]");
        }
        if self.min_seed_frames == 0 {
            return bad("min_seed_frames must be positive");
        }
        if !(self.min_seed_frames <= self.min_match_frames
            && self.min_match_frames <= self.max_match_frames)
        {
            return bad("need min_seed_frames <= min_match_frames <= max_match_frames");
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let params: UtdParams =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
        params.validate()?;
        Ok(params)
    }
}

/// Dense row-major similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl SimilarityMatrix {
    /// Values are stored in single precision.
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j) as f32);
            }
        }
        SimilarityMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        f64::from(self.data[i * self.cols + j])
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }
}

/// Unit-normalised copy of a feature matrix; zero frames stay zero.
struct UnitFrames {
    dim: usize,
    data: Vec<f32>,
}

impl UnitFrames {
    fn new(fm: &FeatureMatrix) -> Self {
        let mut data = Vec::with_capacity(fm.as_slice().len());
        for frame in fm.frames() {
            let norm = frame.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            let scale = if norm > 0.0 { 1.0 / norm } else { 0.0 };
            data.extend(frame.iter().map(|&v| (v as f64 * scale) as f32));
        }
        UnitFrames { dim: fm.dim(), data }
    }

    fn len(&self) -> usize {
        self.data.len() / self.dim
    }
}

/// Dot product in fixed-width lanes so it vectorizes.
fn dot(x: &[f32], y: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let tail: f32 = xc.remainder().iter().zip(yc.remainder()).map(|(p, q)| p * q).sum();
    for (p, q) in xc.zip(yc) {
        let p: &[f32; 8] = p.try_into().expect("chunk of 8");
        let q: &[f32; 8] = q.try_into().expect("chunk of 8");
        for k in 0..8 {
            acc[k] += p[k] * q[k];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn similarity(a: &UnitFrames, b: &UnitFrames) -> SimilarityMatrix {
    let (rows, cols) = (a.len(), b.len());
    let mut data = Vec::with_capacity(rows * cols);
    for x in a.data.chunks_exact(a.dim) {
        data.extend(b.data.chunks_exact(b.dim).map(|y| dot(x, y).clamp(-1.0, 1.0)));
    }
    SimilarityMatrix { rows, cols, data }
}

fn check_dims(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{} has dim {}, {} has dim {}",
            a.utterance_id,
            a.dim(),
            b.utterance_id,
            b.dim()
        )));
    }
    Ok(())
}

/// `S[i][j]` = cosine of frame i of `a` and frame j of `b`; 0 if either is a zero vector.
pub fn cosine_similarity_matrix(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<SimilarityMatrix> {
    check_dims(a, b)?;
    Ok(similarity(&UnitFrames::new(a), &UnitFrames::new(b)))
}

/// A near-diagonal run of high similarity: cells `(i, i + offset)` for
/// `i in i_start..i_end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seed {
    pub offset: isize,
    pub i_start: usize,
    pub i_end: usize,
}

impl Seed {
    pub fn len(&self) -> usize {
        self.i_end - self.i_start
    }

    pub fn is_empty(&self) -> bool {
        self.i_end <= self.i_start
    }

    fn j(&self, i: usize) -> usize {
        (i as isize + self.offset) as usize
    }
}

/// Seeds on every diagonal, sorted by (offset, i_start).
pub fn find_diagonal_seeds(s: &SimilarityMatrix, params: &UtdParams) -> Vec<Seed> {
    seeds_from_offset(s, params, 1 - s.rows() as isize)
}

fn seeds_from_offset(s: &SimilarityMatrix, params: &UtdParams, min_offset: isize) -> Vec<Seed> {
    let mut seeds = Vec::new();
    if s.rows() == 0 || s.cols() == 0 {
        return seeds;
    }
    let first = min_offset.max(1 - s.rows() as isize);
    for offset in first..s.cols() as isize {
        let i_lo = (-offset).max(0) as usize;
        let i_hi = (s.rows() as isize).min(s.cols() as isize - offset) as usize;
        let mut run: Option<(usize, usize)> = None;
        let close = |run: (usize, usize), seeds: &mut Vec<Seed>| {
            let len = run.1 - run.0 + 1;
            if len >= params.min_seed_frames {
                seeds.push(Seed {
                    offset,
                    i_start: run.0,
                    i_end: run.1 + 1,
                });
            }
        };
        for i in i_lo..i_hi {
            let j = (i as isize + offset) as usize;
            if s.get(i, j) < params.sim_threshold {
                continue;
            }
            run = match run {
                Some((start, last)) if i - last - 1 <= params.max_gap_frames => Some((start, i)),
                Some(done) => {
                    close(done, &mut seeds);
                    Some((i, i))
                }
                None => Some((i, i)),
            };
        }
        if let Some(done) = run {
            close(done, &mut seeds);
        }
    }
    seeds
}

/// Min-cost monotone path from `(a0, b0)` to `(a1 - 1, b1 - 1)` with steps
/// (1,1), (1,0), (0,1) and cost 1 − S, restricted to `|(j − i) − offset| ≤ radius`.
/// Returns (sum of similarities along the path, path length), or `None` if
/// either corner is outside the band.
fn banded_dtw(
    s: &SimilarityMatrix,
    (a0, a1): (usize, usize),
    (b0, b1): (usize, usize),
    offset: isize,
    radius: usize,
) -> Option<(f64, usize)> {
    let in_band = |i: usize, j: usize| ((j as isize - i as isize) - offset).unsigned_abs() <= radius;
    if a1 <= a0 || b1 <= b0 || !in_band(a0, b0) || !in_band(a1 - 1, b1 - 1) {
        return None;
    }
    let (h, w) = (a1 - a0, b1 - b0);
    // (cost, length, similarity sum) per cell
    let mut dp = vec![(f64::INFINITY, 0usize, 0.0f64); h * w];
    for di in 0..h {
        for dj in 0..w {
            let (i, j) = (a0 + di, b0 + dj);
            if !in_band(i, j) {
                continue;
            }
            let sim = s.get(i, j);
            let cost = 1.0 - sim;
            if di == 0 && dj == 0 {
                dp[0] = (cost, 1, sim);
                continue;
            }
            // Diagonal first so it wins ties.
            let mut best = (f64::INFINITY, 0usize, 0.0f64);
            let candidates = [
                (di > 0 && dj > 0).then(|| dp[(di - 1) * w + dj - 1]),
                (di > 0).then(|| dp[(di - 1) * w + dj]),
                (dj > 0).then(|| dp[di * w + dj - 1]),
            ];
            for prev in candidates.into_iter().flatten() {
                if prev.0 < best.0 {
                    best = prev;
                }
            }
            if best.0.is_finite() {
                dp[di * w + dj] = (best.0 + cost, best.1 + 1, best.2 + sim);
            }
        }
    }
    let (cost, len, sim_sum) = dp[h * w - 1];
    cost.is_finite().then_some((sim_sum, len))
}

/// Refines a seed into a match, or rejects it.
///
/// Starting from the seed's rectangle, both ends are pushed outward in blocks
/// of a few frames; a block is kept when the DTW path through it has mean
/// similarity ≥ σ. The final rectangle is aligned once more and accepted if its
/// path-mean similarity is ≥ σ and both sides are within the duration bounds.
pub fn refine_match_dtw(
    a: &FeatureMatrix,
    b: &FeatureMatrix,
    seed: &Seed,
    params: &UtdParams,
) -> Option<Match> {
    let s = cosine_similarity_matrix(a, b).ok()?;
    refine(&s, &a.utterance_id, &b.utterance_id, seed, params)
}

fn refine(s: &SimilarityMatrix, utt_a: &str, utt_b: &str, seed: &Seed, params: &UtdParams) -> Option<Match> {
    if seed.is_empty() || seed.i_end > s.rows() || seed.j(seed.i_end - 1) >= s.cols() {
        return None;
    }
    let same = utt_a == utt_b;
    let (d, r) = (seed.offset, params.band_radius_frames);
    let sigma = params.dtw_score_threshold;
    let max_len = params.max_match_frames;
    let (mut a0, mut a1) = (seed.i_start, seed.i_end);
    let (mut b0, mut b1) = (seed.j(seed.i_start), seed.j(seed.i_end - 1) + 1);
    if same && a1 > b0 {
        return None;
    }

    // forward
    loop {
        let mut na1 = (a1 + EXTEND_STEP).min(s.rows()).min(a0 + max_len);
        let nb1 = (b1 + EXTEND_STEP).min(s.cols()).min(b0 + max_len);
        if same {
            na1 = na1.min(b0);
        }
        if na1 == a1 && nb1 == b1 {
            break;
        }
        let corner = s.get(a1 - 1, b1 - 1);
        match banded_dtw(s, (a1 - 1, na1), (b1 - 1, nb1), d, r) {
            Some((sum, len)) if len > 1 && (sum - corner) / (len - 1) as f64 >= sigma => {
                a1 = na1;
                b1 = nb1;
            }
            _ => break,
        }
    }
    // backward
    loop {
        let floor_a = a1.saturating_sub(max_len);
        let floor_b = b1.saturating_sub(max_len);
        let na0 = a0.saturating_sub(EXTEND_STEP).max(floor_a);
        let mut nb0 = b0.saturating_sub(EXTEND_STEP).max(floor_b);
        if same {
            nb0 = nb0.max(a1);
        }
        if na0 == a0 && nb0 == b0 {
            break;
        }
        let corner = s.get(a0, b0);
        match banded_dtw(s, (na0, a0 + 1), (nb0, b0 + 1), d, r) {
            Some((sum, len)) if len > 1 && (sum - corner) / (len - 1) as f64 >= sigma => {
                a0 = na0;
                b0 = nb0;
            }
            _ => break,
        }
    }

    let (sum, len) = banded_dtw(s, (a0, a1), (b0, b1), d, r)?;
    let score = (sum / len as f64).clamp(0.0, 1.0);
    let ok_len = |n: usize| n >= params.min_match_frames && n <= max_len;
    if score < sigma || !ok_len(a1 - a0) || !ok_len(b1 - b0) {
        return None;
    }
    let sa = Segment::new(utt_a, a0, a1);
    let sb = Segment::new(utt_b, b0, b1);
    if sa.overlap(&sb) > 0 {
        return None;
    }
    Some(Match::new(sa, sb, score))
}

fn seed_mean(s: &SimilarityMatrix, seed: &Seed) -> f64 {
    (seed.i_start..seed.i_end).map(|i| s.get(i, seed.j(i))).sum::<f64>() / seed.len() as f64
}

/// All matches between two utterances (or one utterance with itself).
fn match_pair(a: &UnitFrames, b: &UnitFrames, utt_a: &str, utt_b: &str, params: &UtdParams) -> Vec<Match> {
    let same = utt_a == utt_b;
    let s = similarity(a, b);
    // Against itself only the strict upper triangle is searched.
    let seeds = seeds_from_offset(&s, params, if same { 1 } else { isize::MIN / 2 });
    // Strongest seeds first so weaker parallel diagonals get suppressed.
    let means: Vec<f64> = seeds.iter().map(|sd| seed_mean(&s, sd)).collect();
    let mut order: Vec<usize> = (0..seeds.len()).collect();
    order.sort_by(|&x, &y| {
        means[y]
            .total_cmp(&means[x])
            .then((seeds[x].offset, seeds[x].i_start).cmp(&(seeds[y].offset, seeds[y].i_start)))
    });
    let seeds: Vec<Seed> = order.into_iter().map(|k| seeds[k]).collect();
    let mut accepted: Vec<(Match, (usize, usize, usize, usize))> = Vec::new();
    for seed in &seeds {
        let (i0, i1) = (seed.i_start, seed.i_end - 1);
        let (j0, j1) = (seed.j(i0), seed.j(i1));
        let covered = accepted.iter().any(|(_, (a0, a1, b0, b1))| {
            (*a0..*a1).contains(&i0) && (*a0..*a1).contains(&i1) && (*b0..*b1).contains(&j0) && (*b0..*b1).contains(&j1)
        });
        if covered {
            continue;
        }
        if let Some(m) = refine(&s, utt_a, utt_b, seed, params) {
            // Rectangle in (row, col) coordinates of this similarity matrix.
            let (ra, rb) = if m.a.utterance_id == utt_a && (!same || m.a.start_frame < m.b.start_frame) {
                (&m.a, &m.b)
            } else {
                (&m.b, &m.a)
            };
            let rect = (ra.start_frame, ra.end_frame, rb.start_frame, rb.end_frame);
            accepted.push((m, rect));
        }
    }
    accepted.into_iter().map(|(m, _)| m).collect()
}

/// Discovers matches across all utterance pairs of `db`, each utterance
/// included with itself. Runs on the current rayon pool.
pub fn discover_matches(db: &[FeatureMatrix], params: &UtdParams) -> Result<Vec<Match>> {
    params.validate()?;
    if let Some(first) = db.first() {
        for fm in &db[1..] {
            check_dims(first, fm)?;
        }
    }
    let units: Vec<UnitFrames> = db.par_iter().map(UnitFrames::new).collect();
    let pairs: Vec<(usize, usize)> = (0..db.len())
        .flat_map(|i| (i..db.len()).map(move |j| (i, j)))
        .collect();
    let found: Vec<Vec<Match>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            match_pair(
                &units[i],
                &units[j],
                &db[i].utterance_id,
                &db[j].utterance_id,
                params,
            )
        })
        .collect();
    let mut matches: Vec<Match> = found.into_iter().flatten().collect();
    matches.sort_by(|x, y| x.canonical_cmp(y).then(y.score.total_cmp(&x.score)));
    matches.dedup_by(|later, kept| later.a == kept.a && later.b == kept.b);
    Ok(matches)
}

/// [`discover_matches`] on a dedicated pool of `jobs` threads.
pub fn discover_matches_with_jobs(db: &[FeatureMatrix], params: &UtdParams, jobs: usize) -> Result<Vec<Match>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    pool.install(|| discover_matches(db, params))
}

pub const MATCH_HEADER: &str = "utt_a\tstart_a\tend_a\tutt_b\tstart_b\tend_b\tscore";

pub fn match_to_tsv(m: &Match) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{:.6}",
        m.a.utterance_id, m.a.start_frame, m.a.end_frame, m.b.utterance_id, m.b.start_frame, m.b.end_frame, m.score
    )
}

pub fn save_matches(matches: &[Match], path: impl AsRef<Path>) -> Result<()> {
    let lines = std::iter::once(MATCH_HEADER.to_owned()).chain(matches.iter().map(match_to_tsv));
    write_lines(path.as_ref(), lines)
}

/// Reads a match TSV. Sides are re-oriented canonically; order is preserved.
pub fn load_matches(path: impl AsRef<Path>) -> Result<Vec<Match>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = n + 1;
        if n == 0 {
            if line.trim_end() != MATCH_HEADER {
                return Err(Error::parse(path, lineno, "missing match TSV header"));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 7 {
            return Err(Error::parse(path, lineno, format!("expected 7 columns, got {}", cols.len())));
        }
        let num = |k: usize| -> Result<usize> {
            cols[k]
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad frame index {:?}", cols[k])))
        };
        let score: f64 = cols[6]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad score {:?}", cols[6])))?;
        let a = Segment::new(cols[0], num(1)?, num(2)?);
        let b = Segment::new(cols[3], num(4)?, num(5)?);
        if a.is_empty() || b.is_empty() {
            return Err(Error::parse(path, lineno, "empty segment"));
        }
        out.push(Match::new(a, b, score));
    }
    Ok(out)
}
