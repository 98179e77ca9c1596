//! Logistic score calibration, linear score fusion, greedy system selection
//! and the calibrate/fuse/fuse/calibrate submission pipeline.
//!
//! Calibration and fusion minimize the prior-weighted logistic loss
//!
//! ```text
//! C(w, b) = π/Nt · Σ_targets    log(1 + exp(−(w·s + b + logit π)))
//!         + (1−π)/Nn · Σ_nontargets log(1 + exp(  w·s + b + logit π))
//! ```
//!
//! so that `w·s + b` is a log-likelihood ratio. The objective is convex; it is
//! solved with damped Newton steps and a backtracking line search from
//! `w = 1/k`, `b = 0`.

use rayon::prelude::*;
use thiserror::Error;

use crate::metrics::{mean_act_dcf, DcfParams, MetricsError};
use crate::numfmt::g17;
use crate::protocol::Label;

/// Gradient-norm stopping tolerance of the Newton solver.
pub const GRADIENT_TOLERANCE: f64 = 1e-8;
/// Minimum dev actDCF gain for greedy fusion to keep adding systems.
pub const GREEDY_MIN_IMPROVEMENT: f64 = 1e-6;
const MAX_ITERATIONS: usize = 200;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibError {
    #[error("need at least one target and one nontarget trial")]
    OneClassOnly,
    #[error("no convergence after {0} iterations")]
    NoConvergence(usize),
    #[error("system {index} has {got} scores, expected {expected}")]
    LengthMismatch { index: usize, got: usize, expected: usize },
    #[error("no input systems")]
    NoSystems,
    #[error("duplicate system name `{0}`")]
    DuplicateSystem(String),
    #[error("effective prior must lie in (0, 1)")]
    BadPrior,
    #[error("non-finite score in system {0}")]
    NonFinite(usize),
    #[error("line {0}: malformed model file")]
    MalformedModel(usize),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// LLR calibration `s ↦ a·s + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineCalibration {
    pub a: f64,
    pub b: f64,
}

impl AffineCalibration {
    pub const IDENTITY: AffineCalibration = AffineCalibration { a: 1.0, b: 0.0 };

    pub fn apply(&self, s: f64) -> f64 {
        self.a * s + self.b
    }

    pub fn apply_all(&self, scores: &[f64]) -> Vec<f64> {
        scores.iter().map(|&s| self.apply(s)).collect()
    }

    pub fn as_fusion(&self) -> LinearFusion {
        LinearFusion {
            weights: vec![self.a],
            offset: self.b,
        }
    }
}

/// Linear score fusion `Σ wᵢ·sᵢ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFusion {
    pub weights: Vec<f64>,
    pub offset: f64,
}

impl LinearFusion {
    pub fn apply(&self, systems: &[&[f64]]) -> Vec<f64> {
        assert_eq!(systems.len(), self.weights.len(), "one score column per weight");
        let n = systems.first().map_or(0, |s| s.len());
        (0..n)
            .map(|i| {
                self.weights
                    .iter()
                    .zip(systems)
                    .fold(self.offset, |acc, (w, s)| acc + w * s[i])
            })
            .collect()
    }

    /// Model file: a `#systems` header naming the inputs in order, then
    /// `w1,...,wk<TAB>b`.
    pub fn to_tsv(&self, names: &[String]) -> String {
        let weights: Vec<String> = self.weights.iter().map(|w| g17(*w)).collect();
        let mut out = String::from("#systems");
        for n in names {
            out.push('\t');
            out.push_str(n);
        }
        out.push('\n');
        out.push_str(&weights.join(","));
        out.push('\t');
        out.push_str(&g17(self.offset));
        out.push('\n');
        out
    }

    pub fn parse_tsv(text: &str) -> Result<(Vec<String>, LinearFusion), CalibError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(CalibError::MalformedModel(1))?;
        let names: Vec<String> = header
            .strip_prefix("#systems")
            .ok_or(CalibError::MalformedModel(1))?
            .split('\t')
            .skip(1)
            .map(str::to_string)
            .collect();
        let body = lines.next().ok_or(CalibError::MalformedModel(2))?;
        let (w, b) = body.split_once('\t').ok_or(CalibError::MalformedModel(2))?;
        let weights = w
            .split(',')
            .map(str::parse::<f64>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| CalibError::MalformedModel(2))?;
        let offset = b.parse().map_err(|_| CalibError::MalformedModel(2))?;
        if names.len() != weights.len() || lines.next().is_some() {
            return Err(CalibError::MalformedModel(2));
        }
        Ok((names, LinearFusion { weights, offset }))
    }
}

/// Prior-weighted logistic objective over `k` aligned score columns.
pub struct LogisticObjective<'a> {
    systems: Vec<&'a [f64]>,
    is_target: Vec<bool>,
    target_weight: f64,
    nontarget_weight: f64,
    prior_offset: f64,
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'a> LogisticObjective<'a> {
    pub fn new(systems: &[&'a [f64]], labels: &[Label], effective_prior: f64) -> Result<Self, CalibError> {
        if systems.is_empty() {
            return Err(CalibError::NoSystems);
        }
        if !(effective_prior > 0.0 && effective_prior < 1.0) {
            return Err(CalibError::BadPrior);
        }
        for (i, s) in systems.iter().enumerate() {
            if s.len() != labels.len() {
                return Err(CalibError::LengthMismatch {
                    index: i,
                    got: s.len(),
                    expected: labels.len(),
                });
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(CalibError::NonFinite(i));
            }
        }
        let is_target: Vec<bool> = labels.iter().map(|l| l.is_target()).collect();
        let nt = is_target.iter().filter(|t| **t).count();
        let nn = is_target.len() - nt;
        if nt == 0 || nn == 0 {
            return Err(CalibError::OneClassOnly);
        }
        Ok(LogisticObjective {
            systems: systems.to_vec(),
            is_target,
            target_weight: effective_prior / nt as f64,
            nontarget_weight: (1.0 - effective_prior) / nn as f64,
            prior_offset: (effective_prior / (1.0 - effective_prior)).ln(),
        })
    }

    /// Number of parameters: one weight per system plus the offset.
    pub fn dim(&self) -> usize {
        self.systems.len() + 1
    }

    #[inline]
    fn logit(&self, theta: &[f64], i: usize) -> f64 {
        let k = self.systems.len();
        let mut z = theta[k] + self.prior_offset;
        for (w, s) in theta[..k].iter().zip(&self.systems) {
            z += w * s[i];
        }
        z
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        let mut t = 0.0;
        let mut n = 0.0;
        for (i, &target) in self.is_target.iter().enumerate() {
            let z = self.logit(theta, i);
            if target {
                t += softplus(-z);
            } else {
                n += softplus(z);
            }
        }
        self.target_weight * t + self.nontarget_weight * n
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        self.gradient_hessian(theta, false).0
    }

    /// Row-major `dim × dim` Hessian.
    pub fn hessian(&self, theta: &[f64]) -> Vec<f64> {
        self.gradient_hessian(theta, true).1
    }

    fn gradient_hessian(&self, theta: &[f64], with_hessian: bool) -> (Vec<f64>, Vec<f64>) {
        let k = self.systems.len();
        let d = k + 1;
        let mut g = vec![0.0; d];
        let mut h = if with_hessian { vec![0.0; d * d] } else { Vec::new() };
        let mut x = vec![0.0; d];
        x[k] = 1.0;
        for (i, &target) in self.is_target.iter().enumerate() {
            for (xj, s) in x.iter_mut().zip(&self.systems) {
                *xj = s[i];
            }
            let z = self.logit(theta, i);
            let p = sigmoid(z);
            let (dz, c) = if target {
                (-(1.0 - p) * self.target_weight, self.target_weight)
            } else {
                (p * self.nontarget_weight, self.nontarget_weight)
            };
            for j in 0..d {
                g[j] += dz * x[j];
            }
            if with_hessian {
                let curv = c * p * (1.0 - p);
                for r in 0..d {
                    for col in 0..d {
                        h[r * d + col] += curv * x[r] * x[col];
                    }
                }
            }
        }
        (g, h)
    }

    /// Minimizes the objective; returns the parameters `(w₁..w_k, b)`.
    pub fn minimize(&self) -> Result<Vec<f64>, CalibError> {
        let k = self.systems.len();
        let d = self.dim();
        let mut theta = vec![1.0 / k as f64; d];
        theta[k] = 0.0;
        let mut f = self.value(&theta);
        for iter in 0..MAX_ITERATIONS {
            let (g, h) = self.gradient_hessian(&theta, true);
            let gnorm = norm(&g);
            if gnorm <= GRADIENT_TOLERANCE {
                return Ok(self.polish(theta, gnorm));
            }
            let step = newton_direction(&h, &g, d);
            let slope: f64 = g.iter().zip(&step).map(|(a, b)| a * b).sum();
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let cand: Vec<f64> = theta.iter().zip(&step).map(|(x, s)| x + t * s).collect();
                let fc = self.value(&cand);
                if fc <= f + 1e-4 * t * slope {
                    accepted = Some((cand, fc));
                    break;
                }
                t *= 0.5;
            }
            match accepted {
                Some((cand, fc)) => {
                    theta = cand;
                    f = fc;
                }
                None => {
                    // Near the optimum the decrease drops below rounding in
                    // the objective; take the full step if it shrinks the gradient.
                    let cand: Vec<f64> = theta.iter().zip(&step).map(|(x, s)| x + s).collect();
                    if norm(&self.gradient(&cand)) < gnorm {
                        f = self.value(&cand);
                        theta = cand;
                    } else {
                        return Err(CalibError::NoConvergence(iter + 1));
                    }
                }
            }
        }
        if norm(&self.gradient(&theta)) <= GRADIENT_TOLERANCE {
            Ok(theta)
        } else {
            Err(CalibError::NoConvergence(MAX_ITERATIONS))
        }
    }
}

impl LogisticObjective<'_> {
    /// A few extra full Newton steps past the tolerance, kept while they
    /// shrink the gradient. Quadratic convergence takes the optimum to
    /// rounding level, so equivalent problems land on equal outputs.
    fn polish(&self, mut theta: Vec<f64>, mut gnorm: f64) -> Vec<f64> {
        let d = self.dim();
        for _ in 0..4 {
            let (g, h) = self.gradient_hessian(&theta, true);
            let step = newton_direction(&h, &g, d);
            let cand: Vec<f64> = theta.iter().zip(&step).map(|(x, s)| x + s).collect();
            let gc = norm(&self.gradient(&cand));
            if !(gc < gnorm) {
                break;
            }
            theta = cand;
            gnorm = gc;
        }
        theta
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Solves `(H + λI) d = −g`, raising the ridge `λ` until the Cholesky
/// factorization succeeds. The starting ridge is tiny relative to `H`, so
/// collinear inputs still get near-Newton steps along the identifiable
/// directions.
fn newton_direction(h: &[f64], g: &[f64], d: usize) -> Vec<f64> {
    let scale = (0..d).map(|i| h[i * d + i]).fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    let mut ridge = scale * 1e-12;
    loop {
        let mut a = h.to_vec();
        for i in 0..d {
            a[i * d + i] += ridge;
        }
        if let Some(l) = cholesky(&a, d) {
            let rhs: Vec<f64> = g.iter().map(|x| -x).collect();
            return cholesky_solve(&l, &rhs, d);
        }
        ridge *= 10.0;
    }
}

fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * d + k] * y[k];
        }
        y[i] = s / l[i * d + i];
    }
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut s = y[i];
        for k in i + 1..d {
            s -= l[k * d + i] * x[k];
        }
        x[i] = s / l[i * d + i];
    }
    x
}

/// Trains `Σ wᵢ·sᵢ + b` on aligned score columns.
pub fn train_linear_fusion(systems: &[&[f64]], labels: &[Label], effective_prior: f64) -> Result<LinearFusion, CalibError> {
    let objective = LogisticObjective::new(systems, labels, effective_prior)?;
    let theta = objective.minimize()?;
    let k = systems.len();
    Ok(LinearFusion {
        weights: theta[..k].to_vec(),
        offset: theta[k],
    })
}

/// Trains a single-system affine calibration.
pub fn train_calibration(scores: &[f64], labels: &[Label], effective_prior: f64) -> Result<AffineCalibration, CalibError> {
    let fusion = train_linear_fusion(&[scores], labels, effective_prior)?;
    let cal = AffineCalibration {
        a: fusion.weights[0],
        b: fusion.offset,
    };
    if cal.a <= 0.0 {
        log::warn!("calibration scale {} is not positive; scores may be anti-correlated with labels", cal.a);
    }
    Ok(cal)
}

pub fn apply_calibration(cal: &AffineCalibration, scores: &[f64]) -> Vec<f64> {
    cal.apply_all(scores)
}

/// Training prior used for a list of operating points: the effective prior
/// of the first one.
pub fn training_prior(params: &[DcfParams]) -> Result<f64, CalibError> {
    params
        .first()
        .map(DcfParams::effective_prior)
        .ok_or(CalibError::Metrics(MetricsError::BadParams("at least one operating point required")))
}

/// A named score column aligned with the shared trial list.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedScores {
    pub name: String,
    pub scores: Vec<f64>,
}

impl NamedScores {
    pub fn new(name: impl Into<String>, scores: Vec<f64>) -> Self {
        NamedScores {
            name: name.into(),
            scores,
        }
    }
}

/// Outcome of greedy forward selection.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedySelection {
    /// Selected systems, in the order they were added.
    pub systems: Vec<String>,
    /// Dev actDCF after each addition; strictly decreasing.
    pub trace: Vec<f64>,
    /// Fusion over `systems`, in the same order.
    pub fusion: LinearFusion,
}

impl GreedySelection {
    /// Fused scores of the selected systems.
    pub fn apply(&self, systems: &[NamedScores]) -> Vec<f64> {
        let cols: Vec<&[f64]> = self
            .systems
            .iter()
            .map(|name| {
                systems
                    .iter()
                    .find(|s| &s.name == name)
                    .map(|s| s.scores.as_slice())
                    .expect("selected system present")
            })
            .collect();
        self.fusion.apply(&cols)
    }

    pub fn trace_tsv(&self) -> String {
        let mut out = String::from("step\tsystem\tact_dcf\n");
        for (i, (s, a)) in self.systems.iter().zip(&self.trace).enumerate() {
            out.push_str(&format!("{}\t{}\t{}\n", i + 1, s, g17(*a)));
        }
        out
    }
}

fn check_systems(systems: &[NamedScores], labels: &[Label]) -> Result<(), CalibError> {
    if systems.is_empty() {
        return Err(CalibError::NoSystems);
    }
    let mut names: Vec<&str> = systems.iter().map(|s| s.name.as_str()).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(CalibError::DuplicateSystem(w[0].to_string()));
    }
    for (i, s) in systems.iter().enumerate() {
        if s.scores.len() != labels.len() {
            return Err(CalibError::LengthMismatch {
                index: i,
                got: s.scores.len(),
                expected: labels.len(),
            });
        }
    }
    Ok(())
}

/// Greedy forward selection by dev actDCF.
///
/// Starts from the single calibrated system with the lowest actDCF. Each
/// step retrains the fusion on the selection plus every unused candidate
/// and keeps the candidate with the lowest actDCF, as long as it improves
/// by more than [`GREEDY_MIN_IMPROVEMENT`]. Ties go to the
/// lexicographically smallest name. With several operating points the
/// criterion is the mean actDCF over them.
pub fn greedy_fuse(systems: &[NamedScores], labels: &[Label], params: &[DcfParams]) -> Result<GreedySelection, CalibError> {
    check_systems(systems, labels)?;
    let prior = training_prior(params)?;
    let mut pool: Vec<&NamedScores> = systems.iter().collect();
    pool.sort_by(|a, b| a.name.cmp(&b.name));

    let mut selected: Vec<&NamedScores> = Vec::new();
    let mut trace: Vec<f64> = Vec::new();
    let mut fusion: Option<LinearFusion> = None;
    loop {
        let candidates: Vec<&NamedScores> = pool
            .iter()
            .copied()
            .filter(|c| !selected.iter().any(|s| s.name == c.name))
            .collect();
        if candidates.is_empty() {
            break;
        }
        let evaluated = candidates
            .par_iter()
            .map(|cand| {
                let cols: Vec<&[f64]> = selected
                    .iter()
                    .chain(std::iter::once(cand))
                    .map(|s| s.scores.as_slice())
                    .collect();
                let f = train_linear_fusion(&cols, labels, prior)?;
                let act = mean_act_dcf(&f.apply(&cols), labels, params)?;
                Ok((act, f))
            })
            .collect::<Result<Vec<(f64, LinearFusion)>, CalibError>>()?;
        let (best_idx, (best_act, _)) = evaluated
            .iter()
            .enumerate()
            .fold(None::<(usize, &(f64, LinearFusion))>, |best, (i, e)| match best {
                Some((_, b)) if b.0 <= e.0 => best,
                _ => Some((i, e)),
            })
            .expect("at least one candidate");
        let improves = trace.last().is_none_or(|last| last - best_act > GREEDY_MIN_IMPROVEMENT);
        if !improves {
            break;
        }
        trace.push(*best_act);
        selected.push(candidates[best_idx]);
        fusion = Some(evaluated[best_idx].1.clone());
        log::info!("greedy step {}: +{} actDCF {}", trace.len(), candidates[best_idx].name, best_act);
    }
    Ok(GreedySelection {
        systems: selected.iter().map(|s| s.name.clone()).collect(),
        trace,
        fusion: fusion.expect("first step always selects a system"),
    })
}

/// Every stage of the submission pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    /// Step 1: per-system calibrations, audio systems first.
    pub system_calibrations: Vec<(String, AffineCalibration)>,
    /// Step 2: greedy selection per modality.
    pub audio: Option<GreedySelection>,
    pub video: Option<GreedySelection>,
    /// Step 3: cross-modal fusion, present only when both modalities are.
    pub cross_modal: Option<LinearFusion>,
    /// Step 4: final calibration.
    pub final_calibration: AffineCalibration,
    /// Final calibrated scores.
    pub scores: Vec<f64>,
}

/// Per-system calibration, greedy fusion per modality, audio-visual
/// fusion, then a final calibration. Everything is trained on `labels`.
pub fn submission_pipeline(
    audio: &[NamedScores],
    video: &[NamedScores],
    labels: &[Label],
    params: &[DcfParams],
) -> Result<PipelineOutput, CalibError> {
    if audio.is_empty() && video.is_empty() {
        return Err(CalibError::NoSystems);
    }
    let all: Vec<NamedScores> = audio.iter().chain(video).cloned().collect();
    check_systems(&all, labels)?;
    let prior = training_prior(params)?;

    let mut system_calibrations = Vec::with_capacity(all.len());
    let mut calibrate_modality = |systems: &[NamedScores]| -> Result<Vec<NamedScores>, CalibError> {
        systems
            .iter()
            .map(|s| {
                let cal = train_calibration(&s.scores, labels, prior)?;
                system_calibrations.push((s.name.clone(), cal));
                Ok(NamedScores::new(s.name.clone(), cal.apply_all(&s.scores)))
            })
            .collect()
    };
    let audio_cal = calibrate_modality(audio)?;
    let video_cal = calibrate_modality(video)?;

    let fuse_modality = |systems: &[NamedScores]| -> Result<Option<(GreedySelection, Vec<f64>)>, CalibError> {
        if systems.is_empty() {
            return Ok(None);
        }
        let sel = greedy_fuse(systems, labels, params)?;
        let fused = sel.apply(systems);
        Ok(Some((sel, fused)))
    };
    let audio_fused = fuse_modality(&audio_cal)?;
    let video_fused = fuse_modality(&video_cal)?;

    let (cross_modal, combined) = match (&audio_fused, &video_fused) {
        (Some((_, a)), Some((_, v))) => {
            let cols = [a.as_slice(), v.as_slice()];
            let f = train_linear_fusion(&cols, labels, prior)?;
            let out = f.apply(&cols);
            (Some(f), out)
        }
        (Some((_, a)), None) => (None, a.clone()),
        (None, Some((_, v))) => (None, v.clone()),
        (None, None) => unreachable!("at least one modality"),
    };

    let final_calibration = train_calibration(&combined, labels, prior)?;
    Ok(PipelineOutput {
        system_calibrations,
        audio: audio_fused.map(|x| x.0),
        video: video_fused.map(|x| x.0),
        cross_modal,
        scores: final_calibration.apply_all(&combined),
        final_calibration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Nontarget as N, Target as T};

    fn gaussian_like(n: usize, mean: f64, seed: u64) -> Vec<f64> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(mean, 1.0).unwrap();
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    fn two_class(nt: usize, nn: usize, sep: f64, seed: u64) -> (Vec<f64>, Vec<Label>) {
        let mut s = gaussian_like(nt, sep, seed);
        s.extend(gaussian_like(nn, 0.0, seed + 1));
        let mut l = vec![T; nt];
        l.extend(vec![N; nn]);
        (s, l)
    }

    #[test]
    fn apply_examples() {
        assert_eq!(AffineCalibration::IDENTITY.apply_all(&[0.3, -2.0]), vec![0.3, -2.0]);
        assert_eq!(AffineCalibration { a: 2.0, b: -1.0 }.apply(0.5), 0.0);
    }

    #[test]
    fn identical_classes_give_zero_map() {
        let s = gaussian_like(300, 0.0, 5);
        let mut scores = s.clone();
        scores.extend(&s);
        let mut labels = vec![T; 300];
        labels.extend(vec![N; 300]);
        let cal = train_calibration(&scores, &labels, 0.3).unwrap();
        assert!(cal.a.abs() <= 1e-6 && cal.b.abs() <= 1e-6, "{cal:?}");
    }

    #[test]
    fn converges_to_tolerance() {
        let (s, l) = two_class(200, 800, 2.0, 9);
        let obj = LogisticObjective::new(&[&s], &l, 0.05).unwrap();
        let theta = obj.minimize().unwrap();
        assert!(norm(&obj.gradient(&theta)) <= GRADIENT_TOLERANCE);
    }

    #[test]
    fn errors() {
        assert_eq!(train_calibration(&[1.0, 2.0], &[T, T], 0.5), Err(CalibError::OneClassOnly));
        assert_eq!(train_calibration(&[1.0, 2.0], &[T, N], 1.0), Err(CalibError::BadPrior));
        assert!(matches!(train_linear_fusion(&[&[1.0]], &[T, N], 0.5), Err(CalibError::LengthMismatch { .. })));
        assert_eq!(train_linear_fusion(&[], &[T, N], 0.5), Err(CalibError::NoSystems));
        let sys = vec![NamedScores::new("a", vec![0.0, 1.0]), NamedScores::new("a", vec![0.0, 1.0])];
        assert_eq!(greedy_fuse(&sys, &[N, T], &[DcfParams::default()]), Err(CalibError::DuplicateSystem("a".into())));
        assert_eq!(submission_pipeline(&[], &[], &[N, T], &[DcfParams::default()]), Err(CalibError::NoSystems));
    }

    #[test]
    fn model_file_round_trip() {
        let f = LinearFusion {
            weights: vec![0.25, -1.5e-3],
            offset: 3.0,
        };
        let names = vec!["sysA".to_string(), "sysB".to_string()];
        let text = f.to_tsv(&names);
        assert_eq!(text, "#systems\tsysA\tsysB\n0.25,-0.0015\t3\n");
        assert_eq!(LinearFusion::parse_tsv(&text).unwrap(), (names, f));
        assert_eq!(LinearFusion::parse_tsv("0.1\t2\n"), Err(CalibError::MalformedModel(1)));
        assert_eq!(LinearFusion::parse_tsv("#systems\ta\n0.1,0.2\t2\n"), Err(CalibError::MalformedModel(2)));
    }

    #[test]
    fn single_system_greedy() {
        let (s, l) = two_class(100, 400, 2.0, 4);
        let sel = greedy_fuse(&[NamedScores::new("only", s)], &l, &[DcfParams::default()]).unwrap();
        assert_eq!(sel.systems, vec!["only"]);
        assert_eq!(sel.trace.len(), 1);
    }

    #[test]
    fn cholesky_solves_spd() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let l = cholesky(&a, 2).unwrap();
        let x = cholesky_solve(&l, &[2.0, 1.0], 2);
        assert!((4.0 * x[0] + 2.0 * x[1] - 2.0).abs() < 1e-14);
        assert!((2.0 * x[0] + 3.0 * x[1] - 1.0).abs() < 1e-14);
        assert!(cholesky(&[1.0, 1.0, 1.0, 1.0], 2).is_none() || cholesky(&[0.0, 0.0, 0.0, 0.0], 2).is_none());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::metrics::{det_curve, eer, min_dcf};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, StandardNormal};

    fn data(seed: u64, n: usize, systems: usize) -> (Vec<Vec<f64>>, Vec<Label>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<Label> = (0..n).map(|i| if i % 4 == 0 { Label::Target } else { Label::Nontarget }).collect();
        let cols = (0..systems)
            .map(|_| {
                let d = rng.random_range(0.3..2.5);
                let scale = rng.random_range(0.2..3.0);
                labels
                    .iter()
                    .map(|l| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        scale * (z + if l.is_target() { d } else { 0.0 })
                    })
                    .collect()
            })
            .collect();
        (cols, labels)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn optimum_is_not_improved_by_perturbation(seed in any::<u64>(), prior in 0.02f64..0.9) {
            let (cols, l) = data(seed, 400, 2);
            let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
            let obj = LogisticObjective::new(&refs, &l, prior).unwrap();
            let theta = obj.minimize().unwrap();
            let best = obj.value(&theta);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            for _ in 0..100 {
                let d: Vec<f64> = (0..theta.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n = norm(&d);
                let moved: Vec<f64> = theta.iter().zip(&d).map(|(t, x)| t + 1e-3 * x / n).collect();
                prop_assert!(obj.value(&moved) >= best);
            }
        }

        #[test]
        fn calibration_keeps_rank_metrics(seed in any::<u64>()) {
            let (cols, l) = data(seed, 300, 1);
            let cal = train_calibration(&cols[0], &l, 0.1).unwrap();
            prop_assume!(cal.a > 0.0);
            let (a, b) = (det_curve(&cols[0], &l).unwrap(), det_curve(&cal.apply_all(&cols[0]), &l).unwrap());
            let p = DcfParams::default();
            prop_assert_eq!(eer(&a), eer(&b));
            prop_assert_eq!(min_dcf(&a, &p), min_dcf(&b, &p));
        }

        #[test]
        fn one_column_fusion_is_calibration(seed in any::<u64>()) {
            let (cols, l) = data(seed, 300, 1);
            let cal = train_calibration(&cols[0], &l, 0.2).unwrap();
            let fus = train_linear_fusion(&[&cols[0]], &l, 0.2).unwrap();
            for (x, y) in cal.apply_all(&cols[0]).iter().zip(fus.apply(&[&cols[0]])) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }

        #[test]
        fn duplicated_column_changes_nothing(seed in any::<u64>()) {
            let (cols, l) = data(seed, 300, 1);
            let single = train_linear_fusion(&[&cols[0]], &l, 0.2).unwrap().apply(&[&cols[0]]);
            let double = train_linear_fusion(&[&cols[0], &cols[0]], &l, 0.2).unwrap().apply(&[&cols[0], &cols[0]]);
            for (x, y) in single.iter().zip(&double) {
                prop_assert!((x - y).abs() <= 1e-9, "{} vs {}", x, y);
            }
        }

        #[test]
        fn greedy_trace_shape(seed in any::<u64>(), k in 1usize..5) {
            let (cols, l) = data(seed, 400, k);
            let systems: Vec<NamedScores> = cols.into_iter().enumerate().map(|(i, c)| NamedScores::new(format!("s{i}"), c)).collect();
            let sel = greedy_fuse(&systems, &l, &[DcfParams::default()]).unwrap();
            prop_assert!(sel.trace.len() <= k);
            prop_assert_eq!(sel.trace.len(), sel.systems.len());
            for w in sel.trace.windows(2) {
                prop_assert!(w[1] < w[0]);
            }
        }
    }

    #[test]
    fn complementary_systems_fuse_better() {
        // Each system sees the target offset on a different half of the trials.
        let n = 2000;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let labels: Vec<Label> = (0..n).map(|i| if i % 5 == 0 { Label::Target } else { Label::Nontarget }).collect();
        let mk = |rng: &mut rand_chacha::ChaCha8Rng, half: usize| -> Vec<f64> {
            labels
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    let z: f64 = StandardNormal.sample(rng);
                    z + if l.is_target() && (i / 5) % 2 == half { 3.0 } else if l.is_target() { 0.8 } else { 0.0 }
                })
                .collect()
        };
        let a = mk(&mut rng, 0);
        let b = mk(&mut rng, 1);
        let p = DcfParams::default();
        let f = train_linear_fusion(&[&a, &b], &labels, p.effective_prior()).unwrap();
        let fused = min_dcf(&det_curve(&f.apply(&[&a, &b]), &labels).unwrap(), &p);
        let single = min_dcf(&det_curve(&a, &labels).unwrap(), &p).min(min_dcf(&det_curve(&b, &labels).unwrap(), &p));
        assert!(fused <= single, "{fused} > {single}");
    }

    #[test]
    fn pipeline_examples() {
        let (cols, l) = data(11, 600, 3);
        let params = [DcfParams::default()];
        let audio = vec![NamedScores::new("a0", cols[0].clone())];
        let video = vec![NamedScores::new("v0", cols[1].clone()), NamedScores::new("v1", cols[2].clone())];

        // Audio only, one system: an affine map of the input.
        let out = submission_pipeline(&audio, &[], &l, &params).unwrap();
        let (x0, x1) = (cols[0][0], cols[0][1]);
        let slope = (out.scores[1] - out.scores[0]) / (x1 - x0);
        for (x, y) in cols[0].iter().zip(&out.scores) {
            assert!((out.scores[0] + slope * (x - x0) - y).abs() <= 1e-9);
        }
        assert!(out.cross_modal.is_none());

        // Empty audio equals the video-only pipeline.
        let v_only = submission_pipeline(&[], &video, &l, &params).unwrap();
        let v_again = submission_pipeline(&[], &video, &l, &params).unwrap();
        assert_eq!(v_only, v_again);
        assert!(v_only.audio.is_none());

        // One audio plus one video: no worse than the weaker modality.
        let av = submission_pipeline(&audio, &video[..1], &l, &params).unwrap();
        let act = |s: &[f64]| crate::metrics::act_dcf(s, &l, &params[0]).unwrap();
        let a_only = submission_pipeline(&audio, &[], &l, &params).unwrap();
        let v1 = submission_pipeline(&[], &video[..1], &l, &params).unwrap();
        assert!(act(&av.scores) <= act(&a_only.scores).max(act(&v1.scores)));
        assert!(av.cross_modal.is_some());
    }
}
