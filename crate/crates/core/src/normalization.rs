//! Adaptive s-norm against a top-n impostor cohort, and per-channel-pair
//! score normalization.
//!
//! Standard deviations are population deviations (divide by N) throughout.
//! A zero deviation is an error; it is never patched with an epsilon.
//!
//! When both are used, s-norm runs first and channel normalization second.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use thiserror::Error;

use crate::embeddings::EmbeddingSet;
use crate::numfmt::g17;
use crate::protocol::ChannelPair;
use crate::scoring::{lane_dot, lane_norm, ScoreSet, ScoringError, Stage};
use crate::stats::mean_std;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NormalizationError {
    #[error("cohort has {have} members, top-n of {want} requested")]
    CohortTooSmall { have: usize, want: usize },
    #[error("cohort depth must be positive")]
    ZeroDepth,
    #[error("zero-length vector")]
    ZeroVector,
    #[error("cohort dimension {cohort} does not match embedding dimension {embedding}")]
    DimMismatch { cohort: usize, embedding: usize },
    #[error("no embedding for id `{0}`")]
    MissingEmbedding(String),
    #[error("zero cohort deviation for trial {index} ({enroll}, {test})")]
    DegenerateCohort { index: usize, enroll: String, test: String },
    #[error("trial {0} has no channel pair")]
    MissingChannelPair(usize),
    #[error("no channel statistics for pair {0}")]
    MissingPairStats(ChannelPair),
    #[error("degenerate deviation for pair {0}")]
    DegenerateSigma(ChannelPair),
    #[error("line {0}: malformed channel-stats line")]
    MalformedLine(usize),
    #[error("duplicate stats for pair {0}")]
    DuplicatePair(ChannelPair),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

/// Mean and deviation of the top-n cohort scores for one embedding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CohortStats {
    pub mu: f64,
    pub sigma: f64,
    pub n: usize,
}

/// Cohort members widened to f64 and laid out contiguously in id order,
/// with their norms. Scores round exactly like [`cosine`](crate::scoring::cosine).
pub struct Cohort {
    dim: usize,
    rows: Vec<f64>,
    norms: Vec<f64>,
}

impl Cohort {
    pub fn new(cohort: &EmbeddingSet) -> Result<Self, NormalizationError> {
        let dim = cohort.dim();
        let mut rows = Vec::with_capacity(cohort.len() * dim);
        let mut norms = Vec::with_capacity(cohort.len());
        for r in cohort.records() {
            let norm = lane_norm(&r.vector);
            if norm == 0.0 {
                return Err(NormalizationError::ZeroVector);
            }
            norms.push(norm);
            rows.extend(r.vector.iter().map(|&x| f64::from(x)));
        }
        Ok(Cohort { dim, rows, norms })
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    /// Cosine of `x` against every member, in cohort id order.
    pub fn scores(&self, x: &[f32]) -> Result<Vec<f64>, NormalizationError> {
        if x.len() != self.dim {
            return Err(NormalizationError::DimMismatch {
                cohort: self.dim,
                embedding: x.len(),
            });
        }
        let norm = lane_norm(x);
        if norm == 0.0 {
            return Err(NormalizationError::ZeroVector);
        }
        let xf: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
        Ok(self
            .rows
            .chunks_exact(self.dim)
            .zip(&self.norms)
            .map(|(row, &n)| (lane_dot(&xf, row) / (norm * n)).clamp(-1.0, 1.0))
            .collect())
    }

    /// Stats of the `n` best-scoring members. Boundary ties go to the lower
    /// cohort index (ascending id).
    pub fn top_n(&self, x: &[f32], n: usize) -> Result<CohortStats, NormalizationError> {
        if n == 0 {
            return Err(NormalizationError::ZeroDepth);
        }
        if n > self.len() {
            return Err(NormalizationError::CohortTooSmall {
                have: self.len(),
                want: n,
            });
        }
        let scores = self.scores(x)?;
        let mut ranked: Vec<(f64, usize)> = scores.into_iter().enumerate().map(|(i, s)| (s, i)).collect();
        let by_rank = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if n < ranked.len() {
            ranked.select_nth_unstable_by(n - 1, by_rank);
            ranked.truncate(n);
        }
        ranked.sort_unstable_by(by_rank);
        let top: Vec<f64> = ranked.iter().map(|p| p.0).collect();
        let (mu, sigma) = mean_std(&top);
        Ok(CohortStats { mu, sigma, n })
    }
}

/// Top-n cohort statistics of a single embedding.
pub fn topn_stats(x: &[f32], cohort: &EmbeddingSet, n: usize) -> Result<CohortStats, NormalizationError> {
    Cohort::new(cohort)?.top_n(x, n)
}

/// Cohort statistics for every id of `set` that `ids` names, each scored
/// against the cohort once.
fn stats_for_ids<'a>(
    ids: impl Iterator<Item = &'a str>,
    set: &EmbeddingSet,
    cohort: &Cohort,
    n: usize,
) -> Result<HashMap<&'a str, CohortStats>, NormalizationError> {
    let mut unique: Vec<&str> = ids.collect();
    unique.sort_unstable();
    unique.dedup();
    unique
        .par_iter()
        .map(|&id| {
            let v = set
                .get(id)
                .ok_or_else(|| NormalizationError::MissingEmbedding(id.to_string()))?;
            Ok((id, cohort.top_n(v, n)?))
        })
        .collect()
}

/// `Ŝ = (S − μ₁)/σ₁ + (S − μ₂)/σ₂` with enroll-side and test-side cohort
/// statistics.
#[inline]
pub fn snorm_score(s: f64, enroll: &CohortStats, test: &CohortStats) -> f64 {
    (s - enroll.mu) / enroll.sigma + (s - test.mu) / test.sigma
}

/// Adaptive s-norm of raw cosine scores.
pub fn adaptive_snorm(
    scores: &ScoreSet,
    enroll: &EmbeddingSet,
    test: &EmbeddingSet,
    cohort: &EmbeddingSet,
    n: usize,
) -> Result<ScoreSet, NormalizationError> {
    let cohort = Cohort::new(cohort)?;
    if n == 0 {
        return Err(NormalizationError::ZeroDepth);
    }
    if n > cohort.len() {
        return Err(NormalizationError::CohortTooSmall {
            have: cohort.len(),
            want: n,
        });
    }
    let trials = scores.trials();
    let enroll_stats = stats_for_ids(trials.iter().map(|t| t.enroll_id.as_str()), enroll, &cohort, n)?;
    let test_stats = stats_for_ids(trials.iter().map(|t| t.test_id.as_str()), test, &cohort, n)?;
    let mut out = Vec::with_capacity(scores.len());
    for (i, (t, &s)) in trials.iter().zip(scores.scores()).enumerate() {
        let e = &enroll_stats[t.enroll_id.as_str()];
        let x = &test_stats[t.test_id.as_str()];
        if e.sigma == 0.0 || x.sigma == 0.0 {
            return Err(NormalizationError::DegenerateCohort {
                index: i,
                enroll: t.enroll_id.clone(),
                test: t.test_id.clone(),
            });
        }
        out.push(snorm_score(s, e, x));
    }
    Ok(scores.with_scores(out, Stage::Snorm)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairStat {
    pub mu: f64,
    pub sigma: f64,
    pub count: usize,
}

impl PairStat {
    /// Fewer than two trials or zero spread; cannot be applied.
    pub fn is_degenerate(&self) -> bool {
        self.count < 2 || !(self.sigma > 0.0)
    }
}

/// Per channel-pair score statistics. Pairs absent from the estimation set
/// are absent here.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChannelPairStats {
    pub pairs: BTreeMap<ChannelPair, PairStat>,
}

impl ChannelPairStats {
    pub fn get(&self, pair: ChannelPair) -> Option<&PairStat> {
        self.pairs.get(&pair)
    }

    /// `pair<TAB>mu<TAB>sigma<TAB>count`, one line per present pair.
    pub fn to_text(&self) -> String {
        self.pairs
            .iter()
            .map(|(p, s)| format!("{}\t{}\t{}\t{}\n", p, g17(s.mu), g17(s.sigma), s.count))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self, NormalizationError> {
        let mut pairs = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let bad = || NormalizationError::MalformedLine(i + 1);
            let cols: Vec<&str> = line.split('\t').collect();
            let [pair, mu, sigma, count] = cols.as_slice() else {
                return Err(bad());
            };
            let pair: ChannelPair = pair.parse().map_err(|_| bad())?;
            let stat = PairStat {
                mu: mu.parse().map_err(|_| bad())?,
                sigma: sigma.parse().map_err(|_| bad())?,
                count: count.parse().map_err(|_| bad())?,
            };
            if !stat.mu.is_finite() || !stat.sigma.is_finite() || stat.sigma < 0.0 {
                return Err(bad());
            }
            if pairs.insert(pair, stat).is_some() {
                return Err(NormalizationError::DuplicatePair(pair));
            }
        }
        Ok(ChannelPairStats { pairs })
    }
}

fn pairs_of(scores: &ScoreSet) -> Result<Vec<ChannelPair>, NormalizationError> {
    scores
        .trials()
        .iter()
        .enumerate()
        .map(|(i, t)| t.channel_pair.ok_or(NormalizationError::MissingChannelPair(i)))
        .collect()
}

/// Population mean and deviation of the scores of each channel pair.
pub fn estimate_channel_stats(scores: &ScoreSet) -> Result<ChannelPairStats, NormalizationError> {
    let pairs = pairs_of(scores)?;
    let mut grouped: BTreeMap<ChannelPair, Vec<f64>> = BTreeMap::new();
    for (p, &s) in pairs.iter().zip(scores.scores()) {
        grouped.entry(*p).or_default().push(s);
    }
    Ok(ChannelPairStats {
        pairs: grouped
            .into_iter()
            .map(|(p, v)| {
                let (mu, sigma) = mean_std(&v);
                (p, PairStat { mu, sigma, count: v.len() })
            })
            .collect(),
    })
}

/// `Ŝ = (S − μ_ch)/σ_ch` using each trial's own channel pair.
pub fn channel_norm(scores: &ScoreSet, stats: &ChannelPairStats) -> Result<ScoreSet, NormalizationError> {
    let pairs = pairs_of(scores)?;
    let out = pairs
        .iter()
        .zip(scores.scores())
        .map(|(p, &s)| {
            let st = stats.get(*p).ok_or(NormalizationError::MissingPairStats(*p))?;
            if st.is_degenerate() {
                return Err(NormalizationError::DegenerateSigma(*p));
            }
            Ok((s - st.mu) / st.sigma)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(scores.with_scores(out, Stage::Chnorm)?)
}

/// Inputs of the s-norm stage.
#[derive(Clone, Copy)]
pub struct SnormInputs<'a> {
    pub enroll: &'a EmbeddingSet,
    pub test: &'a EmbeddingSet,
    pub cohort: &'a EmbeddingSet,
    pub top_n: usize,
}

/// Where channel statistics come from.
#[derive(Clone, Copy)]
pub enum ChannelStatsSource<'a> {
    /// Estimate on the scores being normalized (after s-norm, if enabled).
    Estimate,
    /// Apply stats estimated elsewhere, e.g. on a development set.
    Fixed(&'a ChannelPairStats),
}

/// Runs the enabled stages in fixed order: s-norm, then channel norm.
/// With neither enabled the scores are returned unchanged.
pub fn normalize_pipeline(
    scores: &ScoreSet,
    snorm: Option<SnormInputs<'_>>,
    chnorm: Option<ChannelStatsSource<'_>>,
) -> Result<ScoreSet, NormalizationError> {
    let mut current = match snorm {
        Some(inp) => adaptive_snorm(scores, inp.enroll, inp.test, inp.cohort, inp.top_n)?,
        None => scores.clone(),
    };
    if let Some(src) = chnorm {
        current = match src {
            ChannelStatsSource::Estimate => {
                let stats = estimate_channel_stats(&current)?;
                channel_norm(&current, &stats)?
            }
            ChannelStatsSource::Fixed(stats) => channel_norm(&current, stats)?,
        };
    }
    Ok(current)
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::embeddings::EmbeddingRecord;
    use crate::protocol::{Trial, TrialSet};
    use crate::scoring::score_trials;
    use proptest::prelude::*;

    fn set(prefix: &str, rows: &[Vec<f32>]) -> EmbeddingSet {
        EmbeddingSet::from_records(rows.iter().enumerate().map(|(i, v)| EmbeddingRecord::new(format!("{prefix}{i}"), v.clone()))).unwrap()
    }

    fn rows(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vec<f32>>> {
        proptest::collection::vec(proptest::collection::vec(0.05f32..1.0, 6), n)
    }

    fn paired_scores() -> impl Strategy<Value = ScoreSet> {
        proptest::collection::vec((-3.0f64..3.0, 0usize..4), 8..120).prop_map(|v| {
            let trials = v
                .iter()
                .enumerate()
                .map(|(i, (_, p))| Trial::new(format!("e{i}"), "t").with_pair(ChannelPair::ALL[*p]))
                .collect();
            ScoreSet::new(TrialSet::new(trials).unwrap(), v.iter().map(|x| x.0).collect(), Stage::Raw).unwrap()
        })
    }

    proptest! {
        #[test]
        fn snorm_symmetric_in_sides(a in rows(1..3), cohort in rows(3..20), n in 2usize..3) {
            // Scoring (x1, x2) and (x2, x1) against the same set gives the same Ŝ.
            let all = set("x", &a.iter().chain(std::iter::once(&vec![0.3f32, 0.9, 0.1, 0.5, 0.2, 0.7])).cloned().collect::<Vec<_>>());
            let ids: Vec<String> = all.ids().map(str::to_string).collect();
            let (x1, x2) = (&ids[0], &ids[ids.len() - 1]);
            let trials = TrialSet::new(vec![Trial::new(x1.clone(), x2.clone()), Trial::new(x2.clone(), x1.clone())]).unwrap();
            let cohort = set("c", &cohort);
            let raw = score_trials(&trials, &all, &all).unwrap();
            match adaptive_snorm(&raw, &all, &all, &cohort, n) {
                Ok(out) => prop_assert_eq!(out.scores()[0], out.scores()[1]),
                Err(e) => prop_assert!(matches!(e, NormalizationError::DegenerateCohort { .. }), "{e:?}"),
            }
        }

        #[test]
        fn chnorm_preserves_order_within_pair(s in paired_scores()) {
            let Ok(stats) = estimate_channel_stats(&s) else { return Ok(()) };
            let Ok(out) = channel_norm(&s, &stats) else { return Ok(()) };
            let pairs = s.trials().channel_pairs().unwrap();
            for i in 0..s.len() {
                for j in 0..s.len() {
                    if pairs[i] == pairs[j] && s.scores()[i] < s.scores()[j] {
                        prop_assert!(out.scores()[i] < out.scores()[j]);
                    }
                }
            }
        }

        #[test]
        fn pipeline_is_chnorm_after_snorm(e in rows(3..6), t in rows(3..6), cohort in rows(4..30), n in 2usize..4) {
            let (enroll, test, cohort) = (set("e", &e), set("t", &t), set("c", &cohort));
            let mut trials = Vec::new();
            for i in 0..e.len() {
                for j in 0..t.len() {
                    trials.push(Trial::new(format!("e{i}"), format!("t{j}")).with_pair(ChannelPair::ALL[(i + j) % 2]));
                }
            }
            let raw = score_trials(&TrialSet::new(trials).unwrap(), &enroll, &test).unwrap();
            let Ok(sn) = adaptive_snorm(&raw, &enroll, &test, &cohort, n) else { return Ok(()) };
            let Ok(stats) = estimate_channel_stats(&sn) else { return Ok(()) };
            let Ok(want) = channel_norm(&sn, &stats) else { return Ok(()) };
            let inputs = SnormInputs { enroll: &enroll, test: &test, cohort: &cohort, top_n: n };
            let got = normalize_pipeline(&raw, Some(inputs), Some(ChannelStatsSource::Estimate)).unwrap();
            prop_assert_eq!(got.scores(), want.scores());
            // Skipping s-norm gives something else unless s-norm was a no-op
            // (every pair holds at least four trials, so z-scores can differ).
            if sn.scores() != raw.scores() {
                if let Ok(ch_only) = normalize_pipeline(&raw, None, Some(ChannelStatsSource::Estimate)) {
                    prop_assert_ne!(ch_only.scores(), got.scores());
                }
            }
        }
    }
}
