//! Cosine trial scoring, face-frame aggregation and recognizability.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::numfmt::g17;
use crate::protocol::{ProtocolError, Trial, TrialSet};
use crate::embeddings::EmbeddingSet;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoringError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("zero-length vector")]
    ZeroVector,
    #[error("no embedding for id `{0}`")]
    MissingEmbedding(String),
    #[error("trial has no frames")]
    NoFrames,
    #[error("every frame falls below the recognizability threshold")]
    AllFramesUnrecognizable,
    #[error("{0} scores for {1} trials")]
    LengthMismatch(usize, usize),
    #[error("non-finite score at trial {0}")]
    NonFinite(usize),
    #[error("line {0}: malformed line")]
    MalformedLine(usize),
    #[error("line {0}: bad score value")]
    BadScore(usize),
    #[error("frame list for `{test}` has a duplicate frame index {index}")]
    DuplicateFrame { test: String, index: u64 },
    #[error("invalid recognizability parameters: {0}")]
    BadParams(&'static str),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Processing stage a score set has reached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Raw,
    Snorm,
    Chnorm,
    Calibrated,
    Fused,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Raw => "raw",
            Stage::Snorm => "snorm",
            Stage::Chnorm => "chnorm",
            Stage::Calibrated => "calibrated",
            Stage::Fused => "fused",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "raw" => Stage::Raw,
            "snorm" => Stage::Snorm,
            "chnorm" => Stage::Chnorm,
            "calibrated" => Stage::Calibrated,
            "fused" => Stage::Fused,
            _ => return Err(()),
        })
    }
}

/// Per-trial scores aligned with a trial list.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    trials: TrialSet,
    scores: Vec<f64>,
    stage: Stage,
}

impl ScoreSet {
    pub fn new(trials: TrialSet, scores: Vec<f64>, stage: Stage) -> Result<Self, ScoringError> {
        if trials.len() != scores.len() {
            return Err(ScoringError::LengthMismatch(scores.len(), trials.len()));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(ScoringError::NonFinite(i));
        }
        Ok(ScoreSet { trials, scores, stage })
    }

    pub fn trials(&self) -> &TrialSet {
        &self.trials
    }

    pub fn trials_mut(&mut self) -> &mut TrialSet {
        &mut self.trials
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Same trials, new scores and stage.
    pub fn with_scores(&self, scores: Vec<f64>, stage: Stage) -> Result<Self, ScoringError> {
        ScoreSet::new(self.trials.clone(), scores, stage)
    }

    /// `enroll_id<TAB>test_id<TAB>score`, 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.len() * 48);
        for (t, s) in self.trials.iter().zip(&self.scores) {
            out.push_str(&t.enroll_id);
            out.push('\t');
            out.push_str(&t.test_id);
            out.push('\t');
            out.push_str(&g17(*s));
            out.push('\n');
        }
        out
    }

    /// Parses a score file. Labels and channel pairs are attached separately.
    pub fn parse(text: &str, stage: Stage) -> Result<Self, ScoringError> {
        let mut trials = Vec::new();
        let mut scores = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let mut cols = line.split('\t');
            let (Some(e), Some(t), Some(s), None) = (cols.next(), cols.next(), cols.next(), cols.next()) else {
                return Err(ScoringError::MalformedLine(i + 1));
            };
            let score: f64 = s.parse().map_err(|_| ScoringError::BadScore(i + 1))?;
            if !score.is_finite() {
                return Err(ScoringError::BadScore(i + 1));
            }
            trials.push(Trial::new(e, t));
            scores.push(score);
        }
        ScoreSet::new(TrialSet::new(trials)?, scores, stage)
    }
}

const LANES: usize = 8;

/// Dot product summed in eight interleaved lanes. Every cosine in the crate
/// goes through this kernel so that all of them round identically.
#[inline]
pub(crate) fn lane_dot<A, B>(a: &[A], b: &[B]) -> f64
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    let mut acc = [0.0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let mut tail = 0.0;
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x.into() * y.into();
    }
    for (x, y) in ca.zip(cb) {
        for k in 0..LANES {
            acc[k] += x[k].into() * y[k].into();
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// `‖x‖` with the same summation as [`lane_dot`].
#[inline]
pub(crate) fn lane_norm<A: Copy + Into<f64>>(x: &[A]) -> f64 {
    lane_dot(x, x).sqrt()
}

/// Cosine similarity `x1ᵀx2 / (‖x1‖‖x2‖)`, clamped to `[-1, 1]`.
pub fn cosine<A, B>(x1: &[A], x2: &[B]) -> Result<f64, ScoringError>
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    if x1.len() != x2.len() {
        return Err(ScoringError::DimMismatch(x1.len(), x2.len()));
    }
    let (na, nb) = (lane_norm(x1), lane_norm(x2));
    if na == 0.0 || nb == 0.0 {
        return Err(ScoringError::ZeroVector);
    }
    Ok((lane_dot(x1, x2) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine-scores every trial, in trial order.
pub fn score_trials(trials: &TrialSet, enroll: &EmbeddingSet, test: &EmbeddingSet) -> Result<ScoreSet, ScoringError> {
    let scores = trials
        .trials()
        .par_iter()
        .map(|t| {
            let e = enroll
                .get(&t.enroll_id)
                .ok_or_else(|| ScoringError::MissingEmbedding(t.enroll_id.clone()))?;
            let x = test
                .get(&t.test_id)
                .ok_or_else(|| ScoringError::MissingEmbedding(t.test_id.clone()))?;
            cosine(e, x)
        })
        .collect::<Result<Vec<_>, _>>()?;
    ScoreSet::new(trials.clone(), scores, Stage::Raw)
}

/// Constants of the recognizability score and the WATE frame filter.
#[derive(Debug, Clone, PartialEq)]
pub struct RecognizabilityParams {
    /// Centroid embedding of the "unrecognizable identity".
    pub ui_embedding: Vec<f64>,
    pub offset: f64,
    pub scale: f64,
    pub wate_threshold: f64,
}

impl RecognizabilityParams {
    pub const OFFSET: f64 = 0.35;
    pub const SCALE: f64 = 0.89;
    pub const WATE_THRESHOLD: f64 = 0.65;

    pub fn new(ui_embedding: Vec<f64>) -> Self {
        RecognizabilityParams {
            ui_embedding,
            offset: Self::OFFSET,
            scale: Self::SCALE,
            wate_threshold: Self::WATE_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<(), ScoringError> {
        if !(self.scale > 0.0) {
            return Err(ScoringError::BadParams("scale must be positive"));
        }
        if !(0.0..=1.0).contains(&self.wate_threshold) {
            return Err(ScoringError::BadParams("threshold must lie in [0, 1]"));
        }
        Ok(())
    }

    /// `((1 − c) − offset) / scale` for a cosine `c` against the centroid.
    pub fn from_cosine(&self, c: f64) -> f64 {
        ((1.0 - c) - self.offset) / self.scale
    }
}

/// Recognizability of a test embedding. Not clamped: values outside `[0, 1]`
/// are returned as computed.
pub fn recognizability<T: Copy + Into<f64>>(x_t: &[T], params: &RecognizabilityParams) -> Result<f64, ScoringError> {
    Ok(params.from_cosine(cosine(x_t, &params.ui_embedding)?))
}

/// How several test frames are reduced to one trial score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationMethod {
    /// Maximum frame score.
    Ms,
    /// Score against the mean of length-normalized frames.
    Ate,
    /// Score against the recognizability-weighted mean of the frames at or
    /// above the threshold.
    Wate,
    /// Score against the single most recognizable frame.
    Mrs,
}

impl FromStr for AggregationMethod {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "ms" => AggregationMethod::Ms,
            "ate" => AggregationMethod::Ate,
            "wate" => AggregationMethod::Wate,
            "mrs" => AggregationMethod::Mrs,
            _ => return Err(()),
        })
    }
}

fn unit<T: Copy + Into<f64>>(v: &[T]) -> Result<Vec<f64>, ScoringError> {
    let norm = v.iter().map(|&x| { let x: f64 = x.into(); x * x }).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(ScoringError::ZeroVector);
    }
    Ok(v.iter().map(|&x| x.into() / norm).collect())
}

/// Aggregated score of one enrollment embedding against several test frames.
pub fn aggregate_test<T, F>(
    enroll: &[T],
    frames: &[F],
    method: AggregationMethod,
    params: &RecognizabilityParams,
) -> Result<f64, ScoringError>
where
    T: Copy + Into<f64>,
    F: AsRef<[T]>,
{
    if frames.is_empty() {
        return Err(ScoringError::NoFrames);
    }
    let dim = enroll.len();
    if let Some(f) = frames.iter().find(|f| f.as_ref().len() != dim) {
        return Err(ScoringError::DimMismatch(dim, f.as_ref().len()));
    }
    match method {
        AggregationMethod::Ms => {
            let mut best = f64::NEG_INFINITY;
            for f in frames {
                best = best.max(cosine(enroll, f.as_ref())?);
            }
            Ok(best)
        }
        AggregationMethod::Ate => {
            let mut mean = vec![0.0; dim];
            for f in frames {
                for (m, u) in mean.iter_mut().zip(unit(f.as_ref())?) {
                    *m += u;
                }
            }
            let n = frames.len() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            cosine(enroll, &mean)
        }
        AggregationMethod::Wate => {
            params.validate()?;
            let mut acc = vec![0.0; dim];
            let mut total = 0.0;
            for f in frames {
                let rs = recognizability(f.as_ref(), params)?;
                if rs < params.wate_threshold {
                    continue;
                }
                for (a, u) in acc.iter_mut().zip(unit(f.as_ref())?) {
                    *a += rs * u;
                }
                total += rs;
            }
            if total <= 0.0 {
                return Err(ScoringError::AllFramesUnrecognizable);
            }
            acc.iter_mut().for_each(|a| *a /= total);
            cosine(enroll, &acc)
        }
        AggregationMethod::Mrs => {
            let mut best: Option<(f64, usize)> = None;
            for (i, f) in frames.iter().enumerate() {
                let rs = recognizability(f.as_ref(), params)?;
                if best.is_none_or(|(b, _)| rs > b) {
                    best = Some((rs, i));
                }
            }
            let (_, i) = best.expect("at least one frame");
            cosine(enroll, frames[i].as_ref())
        }
    }
}

/// Test id to its frame embedding ids, ordered by frame index.
pub type FrameList = BTreeMap<String, Vec<String>>;

/// Parses `test_id<TAB>frame_index<TAB>embedding_id` lines.
pub fn parse_frame_list(text: &str) -> Result<FrameList, ScoringError> {
    let mut staged: BTreeMap<String, BTreeMap<u64, String>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        let [test, index, emb] = cols.as_slice() else {
            return Err(ScoringError::MalformedLine(i + 1));
        };
        if test.is_empty() || emb.is_empty() {
            return Err(ScoringError::MalformedLine(i + 1));
        }
        let index: u64 = index.parse().map_err(|_| ScoringError::MalformedLine(i + 1))?;
        let frames = staged.entry(test.to_string()).or_default();
        if frames.insert(index, emb.to_string()).is_some() {
            return Err(ScoringError::DuplicateFrame {
                test: test.to_string(),
                index,
            });
        }
    }
    Ok(staged
        .into_iter()
        .map(|(k, v)| (k, v.into_values().collect()))
        .collect())
}

/// Scores every trial by aggregating its test frames.
pub fn score_trials_multiframe(
    trials: &TrialSet,
    enroll: &EmbeddingSet,
    frames: &EmbeddingSet,
    frame_list: &FrameList,
    method: AggregationMethod,
    params: &RecognizabilityParams,
) -> Result<ScoreSet, ScoringError> {
    let scores = trials
        .trials()
        .par_iter()
        .map(|t| {
            let e = enroll
                .get(&t.enroll_id)
                .ok_or_else(|| ScoringError::MissingEmbedding(t.enroll_id.clone()))?;
            let ids = frame_list
                .get(&t.test_id)
                .ok_or_else(|| ScoringError::MissingEmbedding(t.test_id.clone()))?;
            let vecs = ids
                .iter()
                .map(|id| frames.get(id).ok_or_else(|| ScoringError::MissingEmbedding(id.clone())))
                .collect::<Result<Vec<&[f32]>, _>>()?;
            aggregate_test(e, &vecs, method, params)
        })
        .collect::<Result<Vec<_>, _>>()?;
    ScoreSet::new(trials.clone(), scores, Stage::Raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::EmbeddingRecord;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params_ui(ui: Vec<f64>) -> RecognizabilityParams {
        RecognizabilityParams::new(ui)
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[2.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(cosine(&[1.0], &[1.0, 2.0]), Err(ScoringError::DimMismatch(1, 2)));
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), Err(ScoringError::ZeroVector));
    }

    #[test]
    fn score_trials_examples() {
        let e = EmbeddingSet::from_records([EmbeddingRecord::new("e", vec![0.3, -0.2, 0.9])]).unwrap();
        let t = EmbeddingSet::from_records([EmbeddingRecord::new("t", vec![0.3, -0.2, 0.9])]).unwrap();
        let ts = TrialSet::new(vec![Trial::new("e", "t")]).unwrap();
        let s = score_trials(&ts, &e, &t).unwrap();
        assert!((s.scores()[0] - 1.0).abs() < 1e-15);
        assert_eq!(s.stage(), Stage::Raw);
        let missing = TrialSet::new(vec![Trial::new("e", "nope")]).unwrap();
        assert_eq!(score_trials(&missing, &e, &t), Err(ScoringError::MissingEmbedding("nope".into())));
    }

    #[test]
    fn score_trials_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mk = |rng: &mut ChaCha8Rng, p: &str| {
            EmbeddingSet::from_records((0..20).map(|i| {
                EmbeddingRecord::new(format!("{p}{i}"), (0..32).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            }))
            .unwrap()
        };
        let enroll = mk(&mut rng, "e");
        let test = mk(&mut rng, "t");
        let mut trials = Vec::new();
        let mut seen = std::collections::HashSet::new();
        while trials.len() < 100 {
            let (a, b) = (rng.random_range(0..20), rng.random_range(0..20));
            if seen.insert((a, b)) {
                trials.push(Trial::new(format!("e{a}"), format!("t{b}")));
            }
        }
        let ts = TrialSet::new(trials).unwrap();
        let got = score_trials(&ts, &enroll, &test).unwrap();
        for (t, s) in ts.iter().zip(got.scores()) {
            let x = enroll.get(&t.enroll_id).unwrap();
            let y = test.get(&t.test_id).unwrap();
            let mut dot = 0.0f64;
            let mut nx = 0.0f64;
            let mut ny = 0.0f64;
            for i in 0..x.len() {
                dot += x[i] as f64 * y[i] as f64;
                nx += (x[i] as f64).powi(2);
                ny += (y[i] as f64).powi(2);
            }
            assert!((s - dot / (nx.sqrt() * ny.sqrt())).abs() < 1e-14);
        }
    }

    #[test]
    fn recognizability_values() {
        let p = params_ui(vec![1.0, 0.0]);
        assert!(p.from_cosine(0.65).abs() < 1e-15);
        assert!((p.from_cosine(-0.24) - 1.0).abs() < 1e-15);
        // (0.8 - 0.35) / 0.89 = 0.45 / 0.89
        assert!((p.from_cosine(0.2) - 0.505_617_977_528_089_9).abs() < 1e-15);
        assert!((recognizability(&[0.0, 1.0], &p).unwrap() - 0.65 / 0.89).abs() < 1e-15);
        assert_eq!(recognizability(&[0.0, 0.0], &p), Err(ScoringError::ZeroVector));
    }

    #[test]
    fn recognizability_not_clamped() {
        let p = params_ui(vec![1.0, 0.0]);
        assert!(p.from_cosine(1.0) < 0.0);
        assert!(p.from_cosine(-1.0) > 1.0);
    }

    #[test]
    fn ms_takes_maximum() {
        let enroll = [1.0, 0.0];
        let frames: Vec<Vec<f64>> = [0.2f64, 0.7, 0.5]
            .iter()
            .map(|c| vec![*c, (1.0 - c * c).sqrt()])
            .collect();
        let p = params_ui(vec![0.0, 1.0]);
        let ms = aggregate_test(&enroll, &frames, AggregationMethod::Ms, &p).unwrap();
        assert!((ms - 0.7).abs() < 1e-15);
    }

    #[test]
    fn ate_hand_checked() {
        let p = params_ui(vec![0.0, 0.0, 1.0]);
        let frames = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let ate = aggregate_test(&[1.0, 0.0, 0.0], &frames, AggregationMethod::Ate, &p).unwrap();
        assert!((ate - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn single_frame_all_methods_agree() {
        // ui orthogonal to the frame gives RS = 0.65/0.89 above threshold
        let p = params_ui(vec![0.0, 0.0, 1.0]);
        let frames = vec![vec![0.4, 0.9, 0.0]];
        let enroll = [0.7, -0.2, 0.3];
        let vals: Vec<f64> = [AggregationMethod::Ms, AggregationMethod::Ate, AggregationMethod::Wate, AggregationMethod::Mrs]
            .iter()
            .map(|m| aggregate_test(&enroll, &frames, *m, &p).unwrap())
            .collect();
        for v in &vals {
            assert!((v - vals[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation_errors() {
        let p = params_ui(vec![1.0, 0.0]);
        let none: Vec<Vec<f64>> = vec![];
        assert_eq!(aggregate_test(&[1.0, 0.0], &none, AggregationMethod::Ms, &p), Err(ScoringError::NoFrames));
        // frame parallel to ui: RS = (0 - 0.35)/0.89 < threshold
        let frames = vec![vec![2.0, 0.0]];
        assert_eq!(
            aggregate_test(&[1.0, 0.0], &frames, AggregationMethod::Wate, &p),
            Err(ScoringError::AllFramesUnrecognizable)
        );
        assert!(aggregate_test(&[1.0, 0.0], &frames, AggregationMethod::Mrs, &p).is_ok());
        assert_eq!(
            aggregate_test(&[1.0, 0.0], &[vec![1.0]], AggregationMethod::Ms, &p),
            Err(ScoringError::DimMismatch(2, 1))
        );
    }

    #[test]
    fn wate_excludes_low_frames() {
        let p = params_ui(vec![1.0, 0.0, 0.0]);
        // frame 0 is close to ui (RS < 0.65), frames 1 and 2 are not
        let frames = vec![vec![0.9, 0.1, 0.0], vec![0.0, 1.0, 0.2], vec![-0.3, 0.2, 1.0]];
        let enroll = [0.1, 0.5, 0.5];
        let rs: Vec<f64> = frames.iter().map(|f| recognizability(f, &p).unwrap()).collect();
        assert!(rs[0] < 0.65 && rs[1] >= 0.65 && rs[2] >= 0.65);
        let mut mean = vec![0.0; 3];
        for i in 1..3 {
            let n = frames[i].iter().map(|x| x * x).sum::<f64>().sqrt();
            for d in 0..3 {
                mean[d] += rs[i] * frames[i][d] / n;
            }
        }
        let expect = cosine(&enroll, &mean).unwrap();
        let got = aggregate_test(&enroll, &frames, AggregationMethod::Wate, &p).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn mrs_picks_most_recognizable() {
        let p = params_ui(vec![1.0, 0.0]);
        let frames = vec![vec![1.0, 0.1], vec![-1.0, 0.2], vec![0.0, 1.0]];
        let got = aggregate_test(&[0.0, 1.0], &frames, AggregationMethod::Mrs, &p).unwrap();
        assert!((got - cosine(&[0.0, 1.0], &frames[1]).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn frame_list_parsing() {
        let fl = parse_frame_list("t1\t10\tf10\nt1\t0\tf0\nt2\t3\tg3\n").unwrap();
        assert_eq!(fl["t1"], vec!["f0", "f10"]);
        assert_eq!(fl["t2"], vec!["g3"]);
        assert_eq!(parse_frame_list("t1\tx\tf\n"), Err(ScoringError::MalformedLine(1)));
        assert!(matches!(parse_frame_list("t1\t1\ta\nt1\t1\tb\n"), Err(ScoringError::DuplicateFrame { .. })));
    }

    #[test]
    fn score_file_round_trip() {
        let ts = TrialSet::new(vec![Trial::new("a", "b"), Trial::new("c", "d")]).unwrap();
        let s = ScoreSet::new(ts, vec![0.1, -3.25e-9], Stage::Snorm).unwrap();
        let back = ScoreSet::parse(&s.to_text(), Stage::Snorm).unwrap();
        assert_eq!(back, s);
        assert_eq!(ScoreSet::parse("a\tb\n", Stage::Raw), Err(ScoringError::MalformedLine(1)));
        assert_eq!(ScoreSet::parse("a\tb\tx\n", Stage::Raw), Err(ScoringError::BadScore(1)));
    }

    fn vecs(dim: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (
            proptest::collection::vec(-10.0f64..10.0, dim),
            proptest::collection::vec(-10.0f64..10.0, dim),
        )
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant((a, b) in (1usize..40).prop_flat_map(vecs), al in 0.01f64..100.0, be in 0.01f64..100.0) {
            prop_assume!(a.iter().any(|x| *x != 0.0) && b.iter().any(|x| *x != 0.0));
            let c = cosine(&a, &b).unwrap();
            prop_assert!((c - cosine(&b, &a).unwrap()).abs() <= 1e-15);
            let sa: Vec<f64> = a.iter().map(|x| x * al).collect();
            let sb: Vec<f64> = b.iter().map(|x| x * be).collect();
            prop_assert!((c - cosine(&sa, &sb).unwrap()).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&c));
        }

        #[test]
        fn ms_dominates_all_methods((enroll, _) in vecs(4), frames in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 4), 1..6)) {
            prop_assume!(enroll.iter().any(|x| x.abs() > 1e-3));
            prop_assume!(frames.iter().all(|f| f.iter().any(|x| x.abs() > 1e-3)));
            let p = RecognizabilityParams { wate_threshold: 0.0, ..params_ui(vec![1.0, 1.0, 1.0, 1.0]) };
            let ms = aggregate_test(&enroll, &frames, AggregationMethod::Ms, &p).unwrap();
            let mrs = aggregate_test(&enroll, &frames, AggregationMethod::Mrs, &p).unwrap();
            prop_assert!(ms >= mrs);
            for f in &frames {
                prop_assert!(ms >= cosine(&enroll, f).unwrap());
            }
        }

        #[test]
        fn recognizability_is_affine_decreasing(c1 in -1.0f64..1.0, c2 in -1.0f64..1.0) {
            let p = params_ui(vec![1.0]);
            let (r1, r2) = (p.from_cosine(c1), p.from_cosine(c2));
            if c1 < c2 { prop_assert!(r1 >= r2); }
            if (c1 - c2).abs() > 1e-6 {
                prop_assert!(((r1 - r2) / (c1 - c2) + 1.0 / 0.89).abs() < 1e-6);
            }
        }
    }
}
