//! `verikit` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::calib_fusion::{
    greedy_fuse, submission_pipeline, train_calibration, train_linear_fusion, training_prior, AffineCalibration, CalibError,
    LinearFusion, NamedScores,
};
use crate::embeddings::{
    filter_classes, fuse_cl, parse_class_labels, read_embeddings, top_informative_classes, write_embeddings, ClLogitSet, Codec,
    EmbeddingError, EmbeddingSet,
};
use crate::metrics::{det_curve, distribution_report, evaluate, DcfParams, MetricsError};
use crate::normalization::{
    adaptive_snorm, channel_norm, estimate_channel_stats, normalize_pipeline, ChannelPairStats, ChannelStatsSource,
    NormalizationError, SnormInputs,
};
use crate::plot::{det_svg, histogram_svg};
use crate::protocol::{parse_segment_meta, parse_trials, parse_trials_detect, Label, MetaMap, ProtocolError, TrialSet};
use crate::scoring::{
    parse_frame_list, score_trials, score_trials_multiframe, AggregationMethod, RecognizabilityParams, ScoreSet, ScoringError, Stage,
};
use crate::synth::{generate, write_fixture, SynthConfig};

/// Environment variable capping worker threads; `--threads` overrides it.
pub const THREADS_ENV: &str = "VERIKIT_THREADS";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn data(path: &Path, err: impl Display) -> CliError {
    CliError::Data(format!("{}: {err}", path.display()))
}

fn protocol(path: &Path, err: ProtocolError) -> CliError {
    match err.line() {
        Some(line) => CliError::Data(format!("{}:{line}: {err}", path.display())),
        None => data(path, err),
    }
}

impl From<NormalizationError> for CliError {
    fn from(e: NormalizationError) -> Self {
        match e {
            NormalizationError::DegenerateCohort { .. } | NormalizationError::DegenerateSigma(_) => CliError::Numerical(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<CalibError> for CliError {
    fn from(e: CalibError) -> Self {
        match e {
            CalibError::NoConvergence(_) => CliError::Numerical(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ScoringError> for CliError {
    fn from(e: ScoringError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EmbeddingError> for CliError {
    fn from(e: EmbeddingError) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "verikit", version, about = "Verification scoring back-end")]
struct Cli {
    /// Worker threads (overrides VERIKIT_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct CostArgs {
    /// Target priors, comma separated; DCFs are averaged over them.
    #[arg(long, value_delimiter = ',', default_value = "0.05")]
    p_target: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    c_miss: f64,
    #[arg(long, default_value_t = 1.0)]
    c_fa: f64,
}

impl CostArgs {
    fn params(&self) -> CliResult<Vec<DcfParams>> {
        self.p_target
            .iter()
            .map(|&p| DcfParams::new(p, self.c_miss, self.c_fa).map_err(|e| CliError::Usage(e.to_string())))
            .collect()
    }
}

#[derive(Args, Debug, Clone)]
struct SnormArgs {
    /// Enrollment embeddings.
    #[arg(long)]
    enroll: Option<PathBuf>,
    /// Test embeddings.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Impostor cohort embeddings.
    #[arg(long)]
    cohort: Option<PathBuf>,
    /// Number of best-scoring cohort members (no default).
    #[arg(long)]
    top_n: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct ChnormArgs {
    /// Segment channel metadata.
    #[arg(long)]
    meta: Option<PathBuf>,
    /// Apply channel stats from this file instead of estimating them.
    #[arg(long)]
    stats_in: Option<PathBuf>,
    /// Write the channel stats used.
    #[arg(long)]
    stats_out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cosine-score a trial list.
    Score {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        enroll: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score multi-frame face tests.
    Aggregate {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        enroll: PathBuf,
        /// Frame embeddings.
        #[arg(long)]
        frames: PathBuf,
        /// test_id<TAB>frame_index<TAB>embedding_id
        #[arg(long)]
        frame_list: PathBuf,
        /// Single-record file holding the unrecognizable-identity embedding.
        #[arg(long)]
        ui: PathBuf,
        /// ms, ate, wate or mrs.
        #[arg(long)]
        method: String,
        #[arg(long, default_value_t = RecognizabilityParams::WATE_THRESHOLD)]
        wate_threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adaptive s-norm.
    Snorm {
        #[arg(long)]
        scores: PathBuf,
        #[command(flatten)]
        snorm: SnormArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Channel-pair normalization.
    Chnorm {
        #[arg(long)]
        scores: PathBuf,
        #[command(flatten)]
        chnorm: ChnormArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// S-norm and/or channel normalization, in that order.
    Normalize {
        #[arg(long)]
        scores: PathBuf,
        /// Enable adaptive s-norm.
        #[arg(long = "snorm")]
        apply_snorm: bool,
        /// Enable channel normalization.
        #[arg(long = "chnorm")]
        apply_chnorm: bool,
        #[command(flatten)]
        snorm: SnormArgs,
        #[command(flatten)]
        chnorm: ChnormArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Weighted fusion of class-logit embeddings, with optional class filtering.
    FuseCl {
        #[arg(long, value_delimiter = ',', required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        weights: Vec<f64>,
        /// Class label files, one per input.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<PathBuf>,
        /// Keep only the K most informative classes.
        #[arg(long)]
        keep_top: Option<usize>,
        /// Pool used to rank classes (defaults to the fused set).
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        out_classes: Option<PathBuf>,
    },
    /// Train or apply an affine calibration.
    Calibrate {
        #[arg(long)]
        scores: PathBuf,
        /// Key to train on; omit with --model-in to only apply.
        #[arg(long)]
        key: Option<PathBuf>,
        #[arg(long)]
        model_in: Option<PathBuf>,
        #[arg(long)]
        model_out: Option<PathBuf>,
        #[command(flatten)]
        cost: CostArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train or apply a linear fusion of several score files.
    FuseLinear {
        #[arg(long, value_delimiter = ',', required = true)]
        systems: Vec<PathBuf>,
        #[arg(long)]
        key: Option<PathBuf>,
        #[arg(long)]
        model_in: Option<PathBuf>,
        #[arg(long)]
        model_out: Option<PathBuf>,
        #[command(flatten)]
        cost: CostArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy forward fusion.
    FuseGreedy {
        #[arg(long, value_delimiter = ',', required = true)]
        systems: Vec<PathBuf>,
        #[arg(long)]
        key: PathBuf,
        /// Selection criterion; only actdcf is supported.
        #[arg(long, default_value = "actdcf")]
        criterion: String,
        #[command(flatten)]
        cost: CostArgs,
        #[arg(long)]
        model_out: Option<PathBuf>,
        #[arg(long)]
        trace_out: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Calibrate, greedy-fuse per modality, fuse modalities, calibrate.
    Pipeline {
        #[arg(long, value_delimiter = ',')]
        audio: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        video: Vec<PathBuf>,
        #[arg(long)]
        key: PathBuf,
        #[command(flatten)]
        cost: CostArgs,
        #[arg(long)]
        out: PathBuf,
        /// Summary of every stage.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// EER / minDCF / actDCF report.
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        key: PathBuf,
        /// Adds per-channel-pair rows and distribution outputs.
        #[arg(long)]
        meta: Option<PathBuf>,
        #[command(flatten)]
        cost: CostArgs,
        /// Stage recorded in the report.
        #[arg(long, default_value = "raw")]
        stage: String,
        /// Report TSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for det.svg, distribution.tsv and per-pair histograms.
        #[arg(long)]
        svg_dir: Option<PathBuf>,
    },
    /// DET plot of one or more score files.
    Det {
        #[arg(long, value_delimiter = ',', required = true)]
        scores: Vec<PathBuf>,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded synthetic fixture.
    Synth {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = SynthConfig::default().n_speakers)]
        speakers: usize,
        #[arg(long, default_value_t = SynthConfig::default().cohort_size)]
        cohort: usize,
        #[arg(long, default_value_t = SynthConfig::default().dim)]
        dim: usize,
        #[arg(long, default_value_t = SynthConfig::default().channel_shift)]
        channel_shift: f64,
    },
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let threads = cli
        .threads
        .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()))
        .unwrap_or(0);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| data(path, e))
}

fn write_text(path: &Path, text: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, text).map_err(|e| data(path, e))
}

fn load_embeddings(path: &Path) -> CliResult<EmbeddingSet> {
    read_embeddings(path, Codec::for_path(path)).map_err(|e| data(path, e))
}

fn load_meta(path: &Path) -> CliResult<MetaMap> {
    parse_segment_meta(&read_text(path)?).map_err(|e| protocol(path, e))
}

fn load_key(path: &Path) -> CliResult<TrialSet> {
    parse_trials(&read_text(path)?, true, None).map_err(|e| protocol(path, e))
}

fn load_scores(path: &Path, stage: Stage) -> CliResult<ScoreSet> {
    ScoreSet::parse(&read_text(path)?, stage).map_err(|e| data(path, e))
}

fn require<'a, T>(v: &'a Option<T>, flag: &str) -> CliResult<&'a T> {
    v.as_ref().ok_or_else(|| CliError::Usage(format!("--{flag} is required here")))
}

/// Scores re-ordered to the key's trial order, labels attached.
fn align_to_key(path: &Path, scores: &ScoreSet, key: &TrialSet) -> CliResult<Vec<f64>> {
    let index: std::collections::HashMap<(&str, &str), f64> = scores
        .trials()
        .iter()
        .zip(scores.scores())
        .map(|(t, &s)| ((t.enroll_id.as_str(), t.test_id.as_str()), s))
        .collect();
    if index.len() != key.len() {
        return Err(data(path, format!("{} scores for {} key trials", index.len(), key.len())));
    }
    key.iter()
        .map(|t| {
            index
                .get(&(t.enroll_id.as_str(), t.test_id.as_str()))
                .copied()
                .ok_or_else(|| data(path, format!("no score for trial ({}, {})", t.enroll_id, t.test_id)))
        })
        .collect()
}

fn key_labels(key: &TrialSet) -> Vec<Label> {
    key.labels().expect("keys are parsed with labels")
}

fn system_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}

fn load_systems(paths: &[PathBuf], key: &TrialSet) -> CliResult<Vec<NamedScores>> {
    paths
        .iter()
        .map(|p| {
            let s = load_scores(p, Stage::Raw)?;
            Ok(NamedScores::new(system_name(p), align_to_key(p, &s, key)?))
        })
        .collect()
}

fn key_scores(key: &TrialSet, scores: Vec<f64>, stage: Stage) -> CliResult<ScoreSet> {
    Ok(ScoreSet::new(key.clone(), scores, stage)?)
}

fn attach_meta(scores: &mut ScoreSet, meta_path: &Path) -> CliResult<()> {
    let meta = load_meta(meta_path)?;
    scores.trials_mut().attach_meta(&meta).map_err(|e| protocol(meta_path, e))
}

fn snorm_step(scores: &ScoreSet, args: &SnormArgs) -> CliResult<ScoreSet> {
    let enroll = load_embeddings(require(&args.enroll, "enroll")?)?;
    let test = load_embeddings(require(&args.test, "test")?)?;
    let cohort = load_embeddings(require(&args.cohort, "cohort")?)?;
    let n = *require(&args.top_n, "top-n")?;
    Ok(adaptive_snorm(scores, &enroll, &test, &cohort, n)?)
}

fn chnorm_step(mut scores: ScoreSet, args: &ChnormArgs) -> CliResult<ScoreSet> {
    attach_meta(&mut scores, require(&args.meta, "meta")?)?;
    let stats = match &args.stats_in {
        Some(p) => ChannelPairStats::parse(&read_text(p)?).map_err(|e| data(p, e))?,
        None => estimate_channel_stats(&scores)?,
    };
    if let Some(p) = &args.stats_out {
        write_text(p, stats.to_text())?;
    }
    Ok(channel_norm(&scores, &stats)?)
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Score { trials, enroll, test, out } => {
            let ts = parse_trials_detect(&read_text(&trials)?, None).map_err(|e| protocol(&trials, e))?;
            let scores = score_trials(&ts, &load_embeddings(&enroll)?, &load_embeddings(&test)?)?;
            write_text(&out, scores.to_text())
        }
        Command::Aggregate {
            trials,
            enroll,
            frames,
            frame_list,
            ui,
            method,
            wate_threshold,
            out,
        } => {
            let method: AggregationMethod = method
                .parse()
                .map_err(|_| CliError::Usage(format!("unknown aggregation method `{method}`")))?;
            let ts = parse_trials_detect(&read_text(&trials)?, None).map_err(|e| protocol(&trials, e))?;
            let ui_set = load_embeddings(&ui)?;
            let ui_vec = match ui_set.records().next() {
                Some(r) if ui_set.len() == 1 => r.vector.iter().map(|&x| f64::from(x)).collect(),
                _ => return Err(data(&ui, "expected exactly one embedding")),
            };
            let params = RecognizabilityParams {
                wate_threshold,
                ..RecognizabilityParams::new(ui_vec)
            };
            params.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let fl = parse_frame_list(&read_text(&frame_list)?).map_err(|e| data(&frame_list, e))?;
            let scores = score_trials_multiframe(&ts, &load_embeddings(&enroll)?, &load_embeddings(&frames)?, &fl, method, &params)?;
            write_text(&out, scores.to_text())
        }
        Command::Snorm { scores, snorm, out } => {
            let s = load_scores(&scores, Stage::Raw)?;
            write_text(&out, snorm_step(&s, &snorm)?.to_text())
        }
        Command::Chnorm { scores, chnorm, out } => {
            let s = load_scores(&scores, Stage::Raw)?;
            write_text(&out, chnorm_step(s, &chnorm)?.to_text())
        }
        Command::Normalize {
            scores,
            apply_snorm,
            apply_chnorm,
            snorm,
            chnorm,
            out,
        } => {
            let mut s = load_scores(&scores, Stage::Raw)?;
            let loaded = if apply_snorm {
                Some((
                    load_embeddings(require(&snorm.enroll, "enroll")?)?,
                    load_embeddings(require(&snorm.test, "test")?)?,
                    load_embeddings(require(&snorm.cohort, "cohort")?)?,
                    *require(&snorm.top_n, "top-n")?,
                ))
            } else {
                None
            };
            let fixed = match (&chnorm.stats_in, apply_chnorm) {
                (Some(p), true) => Some(ChannelPairStats::parse(&read_text(p)?).map_err(|e| data(p, e))?),
                _ => None,
            };
            if apply_chnorm {
                attach_meta(&mut s, require(&chnorm.meta, "meta")?)?;
            }
            let snorm_inputs = loaded.as_ref().map(|(enroll, test, cohort, top_n)| SnormInputs {
                enroll,
                test,
                cohort,
                top_n: *top_n,
            });
            let source = apply_chnorm.then_some(match &fixed {
                Some(st) => ChannelStatsSource::Fixed(st),
                None => ChannelStatsSource::Estimate,
            });
            if let (true, Some(p), None) = (apply_chnorm, &chnorm.stats_out, &fixed) {
                let pre = match &snorm_inputs {
                    Some(inp) => adaptive_snorm(&s, inp.enroll, inp.test, inp.cohort, inp.top_n)?,
                    None => s.clone(),
                };
                write_text(p, estimate_channel_stats(&pre)?.to_text())?;
            }
            let result = normalize_pipeline(&s, snorm_inputs, source)?;
            write_text(&out, result.to_text())
        }
        Command::FuseCl {
            inputs,
            weights,
            classes,
            keep_top,
            pool,
            out,
            out_classes,
        } => {
            if !classes.is_empty() && classes.len() != inputs.len() {
                return Err(CliError::Usage("--classes needs one file per input".into()));
            }
            let sets = inputs
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let labels = match classes.get(i) {
                        Some(c) => Some(parse_class_labels(&read_text(c)?)),
                        None => None,
                    };
                    ClLogitSet::new(load_embeddings(p)?, labels).map_err(|e| data(p, e))
                })
                .collect::<CliResult<Vec<_>>>()?;
            let refs: Vec<&ClLogitSet> = sets.iter().collect();
            let mut fused = fuse_cl(&refs, &weights)?;
            if let Some(k) = keep_top {
                let pool_set = match &pool {
                    Some(p) => ClLogitSet::new(load_embeddings(p)?, fused.class_labels.clone()).map_err(|e| data(p, e))?,
                    None => fused.clone(),
                };
                let keep = top_informative_classes(&pool_set, k)?;
                fused = filter_classes(&fused, &keep)?;
            }
            write_embeddings(&out, &fused.set, Codec::for_path(&out)).map_err(|e| data(&out, e))?;
            if let (Some(p), Some(labels)) = (&out_classes, &fused.class_labels) {
                write_text(p, labels.iter().map(|l| format!("{l}\n")).collect::<String>())?;
            }
            Ok(())
        }
        Command::Calibrate {
            scores,
            key,
            model_in,
            model_out,
            cost,
            out,
        } => {
            let s = load_scores(&scores, Stage::Raw)?;
            let cal = match (&model_in, &key) {
                (Some(m), _) => {
                    let (_, f) = LinearFusion::parse_tsv(&read_text(m)?).map_err(|e| data(m, e))?;
                    if f.weights.len() != 1 {
                        return Err(data(m, "calibration model must have exactly one weight"));
                    }
                    AffineCalibration {
                        a: f.weights[0],
                        b: f.offset,
                    }
                }
                (None, Some(k)) => {
                    let key = load_key(k)?;
                    let aligned = align_to_key(&scores, &s, &key)?;
                    train_calibration(&aligned, &key_labels(&key), training_prior(&cost.params()?)?)?
                }
                (None, None) => return Err(CliError::Usage("calibrate needs --key or --model-in".into())),
            };
            if let Some(m) = &model_out {
                write_text(m, cal.as_fusion().to_tsv(&[system_name(&scores)]))?;
            }
            if let Some(o) = &out {
                write_text(o, s.with_scores(cal.apply_all(s.scores()), Stage::Calibrated)?.to_text())?;
            }
            Ok(())
        }
        Command::FuseLinear {
            systems,
            key,
            model_in,
            model_out,
            cost,
            out,
        } => {
            let names: Vec<String> = systems.iter().map(|p| system_name(p)).collect();
            let (reference, cols) = match &key {
                Some(k) => {
                    let key = load_key(k)?;
                    let sys = load_systems(&systems, &key)?;
                    (key, sys.into_iter().map(|s| s.scores).collect::<Vec<_>>())
                }
                None => {
                    let first = load_scores(&systems[0], Stage::Raw)?;
                    let reference = first.trials().clone();
                    let cols = systems
                        .iter()
                        .map(|p| align_to_key(p, &load_scores(p, Stage::Raw)?, &reference))
                        .collect::<CliResult<Vec<_>>>()?;
                    (reference, cols)
                }
            };
            let col_refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
            let fusion = match (&model_in, &key) {
                (Some(m), _) => {
                    let (_, f) = LinearFusion::parse_tsv(&read_text(m)?).map_err(|e| data(m, e))?;
                    if f.weights.len() != cols.len() {
                        return Err(data(m, format!("model has {} weights for {} systems", f.weights.len(), cols.len())));
                    }
                    f
                }
                (None, Some(_)) => {
                    train_linear_fusion(&col_refs, &key_labels(&reference), training_prior(&cost.params()?)?)?
                }
                (None, None) => return Err(CliError::Usage("fuse-linear needs --key or --model-in".into())),
            };
            if let Some(m) = &model_out {
                write_text(m, fusion.to_tsv(&names))?;
            }
            if let Some(o) = &out {
                let unlabelled = strip_labels(&reference);
                write_text(o, key_scores(&unlabelled, fusion.apply(&col_refs), Stage::Fused)?.to_text())?;
            }
            Ok(())
        }
        Command::FuseGreedy {
            systems,
            key,
            criterion,
            cost,
            model_out,
            trace_out,
            out,
        } => {
            if criterion != "actdcf" {
                return Err(CliError::Usage(format!("unsupported criterion `{criterion}`")));
            }
            let key_set = load_key(&key)?;
            let sys = load_systems(&systems, &key_set)?;
            let sel = greedy_fuse(&sys, &key_labels(&key_set), &cost.params()?)?;
            if let Some(m) = &model_out {
                write_text(m, sel.fusion.to_tsv(&sel.systems))?;
            }
            if let Some(t) = &trace_out {
                write_text(t, sel.trace_tsv())?;
            }
            if let Some(o) = &out {
                write_text(o, key_scores(&strip_labels(&key_set), sel.apply(&sys), Stage::Fused)?.to_text())?;
            }
            Ok(())
        }
        Command::Pipeline {
            audio,
            video,
            key,
            cost,
            out,
            report,
        } => {
            if audio.is_empty() && video.is_empty() {
                return Err(CliError::Usage("pipeline needs --audio and/or --video".into()));
            }
            let key_set = load_key(&key)?;
            let a = load_systems(&audio, &key_set)?;
            let v = load_systems(&video, &key_set)?;
            let result = submission_pipeline(&a, &v, &key_labels(&key_set), &cost.params()?)?;
            write_text(&out, key_scores(&strip_labels(&key_set), result.scores.clone(), Stage::Calibrated)?.to_text())?;
            if let Some(r) = &report {
                write_text(r, pipeline_report(&result))?;
            }
            Ok(())
        }
        Command::Evaluate {
            scores,
            key,
            meta,
            cost,
            stage,
            out,
            svg_dir,
        } => {
            let stage: Stage = stage.parse().map_err(|_| CliError::Usage(format!("unknown stage `{stage}`")))?;
            let params = cost.params()?;
            let key_set = load_key(&key)?;
            let raw = load_scores(&scores, stage)?;
            let aligned = align_to_key(&scores, &raw, &key_set)?;
            let mut s = key_scores(&key_set, aligned, stage)?;
            if let Some(m) = &meta {
                attach_meta(&mut s, m)?;
            }
            let report = evaluate(&s, &params, meta.is_some())?;
            match &out {
                Some(o) => write_text(o, report.to_tsv())?,
                None => print!("{}", report.to_tsv()),
            }
            if let Some(dir) = &svg_dir {
                fs::create_dir_all(dir).map_err(|e| data(dir, e))?;
                let labels = key_labels(&key_set);
                let curve = det_curve(s.scores(), &labels)?;
                write_text(&dir.join("det.svg"), det_svg(&[(system_name(&scores), &curve)]))?;
                if meta.is_some() {
                    let dist = distribution_report(&s)?;
                    write_text(&dir.join("distribution.tsv"), dist.to_tsv())?;
                    let pairs: std::collections::BTreeSet<_> = dist.groups.keys().map(|k| k.0).collect();
                    for pair in pairs {
                        write_text(&dir.join(format!("hist_{pair}.svg")), histogram_svg(&dist, pair))?;
                    }
                }
            }
            Ok(())
        }
        Command::Det { scores, key, out } => {
            let key_set = load_key(&key)?;
            let labels = key_labels(&key_set);
            let mut curves = Vec::new();
            for p in &scores {
                let s = load_scores(p, Stage::Raw)?;
                curves.push((system_name(p), det_curve(&align_to_key(p, &s, &key_set)?, &labels)?));
            }
            let named: Vec<(String, &crate::metrics::DetCurve)> = curves.iter().map(|(n, c)| (n.clone(), c)).collect();
            write_text(&out, det_svg(&named))
        }
        Command::Synth {
            seed,
            out_dir,
            speakers,
            cohort,
            dim,
            channel_shift,
        } => {
            if speakers < 2 || cohort == 0 || dim == 0 {
                return Err(CliError::Usage("synth needs ≥2 speakers, a non-empty cohort and dim > 0".into()));
            }
            let cfg = SynthConfig {
                seed,
                n_speakers: speakers,
                cohort_size: cohort,
                dim,
                channel_shift,
                nontargets_per_enroll: SynthConfig::default().nontargets_per_enroll.min((speakers - 1) * SynthConfig::default().tests_per_speaker),
                ..SynthConfig::default()
            };
            write_fixture(&generate(&cfg), &out_dir).map_err(|e| data(&out_dir, e))
        }
    }
}

fn strip_labels(key: &TrialSet) -> TrialSet {
    TrialSet::new(
        key.iter()
            .map(|t| crate::protocol::Trial::new(t.enroll_id.clone(), t.test_id.clone()))
            .collect(),
    )
    .expect("subset of a valid trial set")
}

fn pipeline_report(p: &crate::calib_fusion::PipelineOutput) -> String {
    use crate::numfmt::g17;
    let mut out = String::from("step\titem\tvalue\n");
    for (name, cal) in &p.system_calibrations {
        out.push_str(&format!("calibration\t{name}\t{},{}\n", g17(cal.a), g17(cal.b)));
    }
    for (modality, sel) in [("audio", &p.audio), ("video", &p.video)] {
        if let Some(sel) = sel {
            for (s, a) in sel.systems.iter().zip(&sel.trace) {
                out.push_str(&format!("greedy-{modality}\t{s}\t{}\n", g17(*a)));
            }
        }
    }
    if let Some(f) = &p.cross_modal {
        let w: Vec<String> = f.weights.iter().map(|x| g17(*x)).collect();
        out.push_str(&format!("cross-modal\tweights\t{}\n", w.join(",")));
        out.push_str(&format!("cross-modal\toffset\t{}\n", g17(f.offset)));
    }
    out.push_str(&format!(
        "final\tcalibration\t{},{}\n",
        g17(p.final_calibration.a),
        g17(p.final_calibration.b)
    ));
    out
}
