//! Detection metrics: DET operating points, EER, minDCF and actDCF, plus
//! per-channel score distribution summaries.
//!
//! Conventions at a threshold `t`:
//!
//! - `p_miss(t) = #{targets < t} / #targets`
//! - `p_fa(t)   = #{nontargets ≥ t} / #nontargets`
//!
//! Detection costs are normalized by `min(c_miss·p_target, c_fa·(1−p_target))`,
//! the cost of the better of the two trivial (accept-all, reject-all) systems.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::numfmt::g17;
use crate::protocol::{ChannelPair, Label};
use crate::scoring::{ScoreSet, Stage};
use crate::stats::mean_std;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("need at least one target and one nontarget trial")]
    OneClassOnly,
    #[error("{0} scores but {1} labels")]
    LengthMismatch(usize, usize),
    #[error("invalid cost parameters: {0}")]
    BadParams(&'static str),
    #[error("trial {0} has no label")]
    MissingLabel(usize),
    #[error("trial {0} has no channel pair")]
    MissingChannelPair(usize),
    #[error("non-finite score at trial {0}")]
    NonFinite(usize),
}

/// One detection-cost operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        DcfParams {
            p_target: 0.05,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfParams {
    pub fn new(p_target: f64, c_miss: f64, c_fa: f64) -> Result<Self, MetricsError> {
        let p = DcfParams { p_target, c_miss, c_fa };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(MetricsError::BadParams("p_target must lie in (0, 1)"));
        }
        if !(self.c_miss > 0.0 && self.c_miss.is_finite()) || !(self.c_fa > 0.0 && self.c_fa.is_finite()) {
            return Err(MetricsError::BadParams("costs must be positive and finite"));
        }
        Ok(())
    }

    pub fn normalizer(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }

    /// Bayes decision threshold on log-likelihood ratios.
    pub fn bayes_threshold(&self) -> f64 {
        (self.c_fa * (1.0 - self.p_target) / (self.c_miss * self.p_target)).ln()
    }

    /// Prior at which a cost-1/cost-1 decision is equivalent to this point.
    pub fn effective_prior(&self) -> f64 {
        let t = self.c_miss * self.p_target;
        t / (t + self.c_fa * (1.0 - self.p_target))
    }

    /// Normalized detection cost of an operating point.
    pub fn normalized_cost(&self, p_miss: f64, p_fa: f64) -> f64 {
        (self.c_miss * self.p_target * p_miss + self.c_fa * (1.0 - self.p_target) * p_fa) / self.normalizer()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Step-function DET curve. The last point has threshold `+∞`
/// (reject everything).
#[derive(Debug, Clone, PartialEq)]
pub struct DetCurve {
    pub points: Vec<OperatingPoint>,
    pub n_target: usize,
    pub n_nontarget: usize,
}

fn check_len(scores: &[f64], labels: &[Label]) -> Result<(), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(MetricsError::NonFinite(i));
    }
    Ok(())
}

fn class_counts(labels: &[Label]) -> Result<(usize, usize), MetricsError> {
    let nt = labels.iter().filter(|l| l.is_target()).count();
    let nn = labels.len() - nt;
    if nt == 0 || nn == 0 {
        return Err(MetricsError::OneClassOnly);
    }
    Ok((nt, nn))
}

/// Exact operating points at every distinct score and at `+∞`.
pub fn det_curve(scores: &[f64], labels: &[Label]) -> Result<DetCurve, MetricsError> {
    check_len(scores, labels)?;
    let (nt, nn) = class_counts(labels)?;
    let mut order: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().map(|l| l.is_target())).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut points = Vec::with_capacity(order.len() + 1);
    let (mut targets_below, mut nontargets_below) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = order[i].0;
        points.push(OperatingPoint {
            threshold: t,
            p_miss: targets_below as f64 / nt as f64,
            p_fa: (nn - nontargets_below) as f64 / nn as f64,
        });
        while i < order.len() && order[i].0 == t {
            if order[i].1 {
                targets_below += 1;
            } else {
                nontargets_below += 1;
            }
            i += 1;
        }
    }
    points.push(OperatingPoint {
        threshold: f64::INFINITY,
        p_miss: 1.0,
        p_fa: 0.0,
    });
    Ok(DetCurve {
        points,
        n_target: nt,
        n_nontarget: nn,
    })
}

/// Equal error rate: the crossing of `p_miss = p_fa` on the linearly
/// interpolated curve.
pub fn eer(curve: &DetCurve) -> f64 {
    let pts = &curve.points;
    let gap = |p: &OperatingPoint| p.p_miss - p.p_fa;
    let i = pts
        .iter()
        .position(|p| gap(p) >= 0.0)
        .expect("curve ends at (p_fa, p_miss) = (0, 1)");
    if i == 0 || gap(&pts[i]) == 0.0 {
        return pts[i].p_miss;
    }
    let (a, b) = (&pts[i - 1], &pts[i]);
    let lambda = -gap(a) / (gap(b) - gap(a));
    a.p_miss + lambda * (b.p_miss - a.p_miss)
}

/// Minimum normalized detection cost over all operating points.
pub fn min_dcf(curve: &DetCurve, params: &DcfParams) -> f64 {
    curve
        .points
        .iter()
        .map(|p| params.normalized_cost(p.p_miss, p.p_fa))
        .fold(f64::INFINITY, f64::min)
}

/// Error rates when accepting every score `≥ threshold`.
pub fn error_rates_at(scores: &[f64], labels: &[Label], threshold: f64) -> Result<(f64, f64), MetricsError> {
    check_len(scores, labels)?;
    let (nt, nn) = class_counts(labels)?;
    let mut miss = 0usize;
    let mut fa = 0usize;
    for (&s, l) in scores.iter().zip(labels) {
        match l {
            Label::Target if s < threshold => miss += 1,
            Label::Nontarget if s >= threshold => fa += 1,
            _ => {}
        }
    }
    Ok((miss as f64 / nt as f64, fa as f64 / nn as f64))
}

/// Normalized cost of calibrated LLRs at the Bayes threshold.
pub fn act_dcf(llr: &[f64], labels: &[Label], params: &DcfParams) -> Result<f64, MetricsError> {
    let (p_miss, p_fa) = error_rates_at(llr, labels, params.bayes_threshold())?;
    Ok(params.normalized_cost(p_miss, p_fa))
}

fn require_params(params: &[DcfParams]) -> Result<(), MetricsError> {
    if params.is_empty() {
        return Err(MetricsError::BadParams("at least one operating point required"));
    }
    params.iter().try_for_each(DcfParams::validate)
}

/// minDCF averaged over several operating points.
pub fn mean_min_dcf(curve: &DetCurve, params: &[DcfParams]) -> Result<f64, MetricsError> {
    require_params(params)?;
    Ok(params.iter().map(|p| min_dcf(curve, p)).sum::<f64>() / params.len() as f64)
}

/// actDCF averaged over several operating points.
pub fn mean_act_dcf(llr: &[f64], labels: &[Label], params: &[DcfParams]) -> Result<f64, MetricsError> {
    require_params(params)?;
    let mut total = 0.0;
    for p in params {
        total += act_dcf(llr, labels, p)?;
    }
    Ok(total / params.len() as f64)
}

/// Metrics of one score set, optionally broken down by channel pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub stage: Stage,
    pub eer: f64,
    /// Mean over the configured operating points.
    pub min_dcf: f64,
    /// Mean over the configured operating points.
    pub act_dcf: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
    pub per_channel: BTreeMap<ChannelPair, MetricsReport>,
}

pub fn evaluate_scores(
    scores: &[f64],
    labels: &[Label],
    params: &[DcfParams],
    stage: Stage,
) -> Result<MetricsReport, MetricsError> {
    let curve = det_curve(scores, labels)?;
    Ok(MetricsReport {
        stage,
        eer: eer(&curve),
        min_dcf: mean_min_dcf(&curve, params)?,
        act_dcf: mean_act_dcf(scores, labels, params)?,
        n_target: curve.n_target,
        n_nontarget: curve.n_nontarget,
        per_channel: BTreeMap::new(),
    })
}

fn labels_of(scores: &ScoreSet) -> Result<Vec<Label>, MetricsError> {
    scores
        .trials()
        .iter()
        .enumerate()
        .map(|(i, t)| t.label.ok_or(MetricsError::MissingLabel(i)))
        .collect()
}

/// Pooled report; with `by_channel`, adds a sub-report for every channel
/// pair that has both classes.
pub fn evaluate(scores: &ScoreSet, params: &[DcfParams], by_channel: bool) -> Result<MetricsReport, MetricsError> {
    let labels = labels_of(scores)?;
    let mut report = evaluate_scores(scores.scores(), &labels, params, scores.stage())?;
    if by_channel {
        let mut groups: BTreeMap<ChannelPair, (Vec<f64>, Vec<Label>)> = BTreeMap::new();
        for (i, (t, &s)) in scores.trials().iter().zip(scores.scores()).enumerate() {
            let pair = t.channel_pair.ok_or(MetricsError::MissingChannelPair(i))?;
            let g = groups.entry(pair).or_default();
            g.0.push(s);
            g.1.push(labels[i]);
        }
        for (pair, (s, l)) in groups {
            match evaluate_scores(&s, &l, params, scores.stage()) {
                Ok(r) => {
                    report.per_channel.insert(pair, r);
                }
                Err(MetricsError::OneClassOnly) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(report)
}

impl MetricsReport {
    fn row(&self, out: &mut String, scope: &str) {
        let _ = writeln!(
            out,
            "{scope}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.stage,
            self.n_target,
            self.n_nontarget,
            g17(self.eer),
            g17(self.min_dcf),
            g17(self.act_dcf)
        );
    }

    pub const TSV_HEADER: &'static str = "scope\tstage\tn_target\tn_nontarget\teer\tmin_dcf\tact_dcf";

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str(Self::TSV_HEADER);
        out.push('\n');
        self.row(&mut out, "all");
        for (pair, r) in &self.per_channel {
            r.row(&mut out, &pair.to_string());
        }
        out
    }
}

pub const HISTOGRAM_BINS: usize = 60;

/// Histogram and summary of one (channel pair, class) group.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGroup {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub histogram: Vec<usize>,
}

/// Score distributions per channel pair and class over a shared binning.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionReport {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
    pub groups: BTreeMap<(ChannelPair, Label), ScoreGroup>,
}

impl DistributionReport {
    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.bins as f64
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.bin_width()
    }

    /// Mean estimated from the histogram (bin centers).
    pub fn histogram_mean(&self, group: &ScoreGroup) -> f64 {
        let total: usize = group.histogram.iter().sum();
        group
            .histogram
            .iter()
            .enumerate()
            .map(|(i, &c)| c as f64 * self.bin_center(i))
            .sum::<f64>()
            / total as f64
    }

    /// `pair  class  count  mean  std  h0,h1,...` after a `#range` line.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("#range\t{}\t{}\t{}\n", g17(self.lo), g17(self.hi), self.bins);
        out.push_str("pair\tclass\tcount\tmean\tstd\thistogram\n");
        for ((pair, label), g) in &self.groups {
            let hist: Vec<String> = g.histogram.iter().map(usize::to_string).collect();
            let _ = writeln!(
                out,
                "{pair}\t{}\t{}\t{}\t{}\t{}",
                label.as_str(),
                g.count,
                g17(g.mean),
                g17(g.std),
                hist.join(",")
            );
        }
        out
    }
}

/// Target and impostor score distributions for every channel pair, with
/// 60 uniform bins spanning the pooled score range.
pub fn distribution_report(scores: &ScoreSet) -> Result<DistributionReport, MetricsError> {
    let labels = labels_of(scores)?;
    let mut grouped: BTreeMap<(ChannelPair, Label), Vec<f64>> = BTreeMap::new();
    for (i, (t, &s)) in scores.trials().iter().zip(scores.scores()).enumerate() {
        let pair = t.channel_pair.ok_or(MetricsError::MissingChannelPair(i))?;
        grouped.entry((pair, labels[i])).or_default().push(s);
    }
    let lo = scores.scores().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.scores().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bins = HISTOGRAM_BINS;
    let width = (hi - lo) / bins as f64;
    let bin_of = |s: f64| {
        if width > 0.0 {
            (((s - lo) / width) as usize).min(bins - 1)
        } else {
            0
        }
    };
    let groups = grouped
        .into_iter()
        .map(|(k, v)| {
            let mut histogram = vec![0usize; bins];
            for &s in &v {
                histogram[bin_of(s)] += 1;
            }
            let (mean, std) = mean_std(&v);
            (
                k,
                ScoreGroup {
                    count: v.len(),
                    mean,
                    std,
                    histogram,
                },
            )
        })
        .collect();
    Ok(DistributionReport { lo, hi, bins, groups })
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<Label>)> {
        proptest::collection::vec((-5.0f64..5.0, any::<bool>()), 2..200).prop_map(|mut v| {
            v[0].1 = true;
            let last = v.len() - 1;
            v[last].1 = false;
            let labels = v.iter().map(|p| if p.1 { Label::Target } else { Label::Nontarget }).collect();
            (v.into_iter().map(|p| p.0).collect(), labels)
        })
    }

    fn params() -> impl Strategy<Value = DcfParams> {
        (0.001f64..0.999, 0.1f64..10.0, 0.1f64..10.0).prop_map(|(p, m, f)| DcfParams::new(p, m, f).unwrap())
    }

    proptest! {
        #[test]
        fn min_never_exceeds_act((s, l) in scored_labels(), p in params()) {
            let c = det_curve(&s, &l).unwrap();
            prop_assert!(min_dcf(&c, &p) <= act_dcf(&s, &l, &p).unwrap());
        }

        #[test]
        fn ranges((s, l) in scored_labels(), p in params()) {
            let c = det_curve(&s, &l).unwrap();
            let e = eer(&c);
            let m = min_dcf(&c, &p);
            prop_assert!((0.0..=1.0).contains(&e));
            prop_assert!((0.0..=1.0).contains(&m));
        }

        #[test]
        fn permutation_invariant((s, l) in scored_labels(), p in params(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut idx: Vec<usize> = (0..s.len()).collect();
            idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let s2: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
            let l2: Vec<Label> = idx.iter().map(|&i| l[i]).collect();
            let (a, b) = (det_curve(&s, &l).unwrap(), det_curve(&s2, &l2).unwrap());
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(eer(&a), eer(&b));
            prop_assert_eq!(act_dcf(&s, &l, &p).unwrap(), act_dcf(&s2, &l2, &p).unwrap());
        }

        #[test]
        fn monotone_invariance((s, l) in scored_labels(), p in params(), k in 0.1f64..10.0, c in -10.0f64..10.0) {
            let t: Vec<f64> = s.iter().map(|x| (k * x + c).exp()).collect();
            let (a, b) = (det_curve(&s, &l).unwrap(), det_curve(&t, &l).unwrap());
            prop_assert_eq!(eer(&a), eer(&b));
            prop_assert_eq!(min_dcf(&a, &p), min_dcf(&b, &p));
        }

        #[test]
        fn informative_eer_at_most_half(n in 20usize..300, seed in any::<u64>()) {
            // Targets strictly above every nontarget in expectation: EER ≤ 0.5.
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let l: Vec<Label> = (0..n).map(|i| if i % 3 == 0 { Label::Target } else { Label::Nontarget }).collect();
            let s: Vec<f64> = l.iter().map(|x| rng.random_range(0.0..1.0) + if x.is_target() { 0.5 } else { 0.0 }).collect();
            prop_assert!(eer(&det_curve(&s, &l).unwrap()) <= 0.5 + 1e-12);
        }
    }
}
