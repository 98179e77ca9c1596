//! Seeded synthetic fixtures: speaker embeddings with channel offsets and
//! per-segment bias, matching class-logit embeddings, channel metadata and
//! a key.
//!
//! Each segment embedding is
//!
//! ```text
//! x = identity(speaker) + offset(channel) + bias_seg · hub + noise
//! ```
//!
//! The channel offsets shift scores per channel pair; the per-segment hub
//! bias inflates every score of a segment by a segment-specific amount,
//! which cohort normalization can remove. Class logits are a fixed random
//! linear map of `x` onto `n_classes` training-class prototypes.

use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embeddings::{encode_binary, ClLogitSet, EmbeddingRecord, EmbeddingSet};
use crate::protocol::{meta_to_text, Label, MetaMap, SegmentMeta, SourceType, Trial, TrialSet};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub dim: usize,
    pub n_speakers: usize,
    pub tests_per_speaker: usize,
    pub nontargets_per_enroll: usize,
    pub cohort_size: usize,
    pub n_classes: usize,
    /// Length of each channel's offset vector.
    pub channel_shift: f64,
    /// Scale of the per-segment bias along the shared hub direction.
    pub hub_strength: f64,
    pub noise: f64,
    /// Probability that a segment is telephone.
    pub p_tel: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            dim: 64,
            n_speakers: 150,
            tests_per_speaker: 4,
            nontargets_per_enroll: 60,
            cohort_size: 400,
            n_classes: 96,
            channel_shift: 0.9,
            hub_strength: 0.9,
            noise: 0.9,
            p_tel: 0.5,
        }
    }
}

pub struct Fixture {
    pub enroll: EmbeddingSet,
    pub test: EmbeddingSet,
    pub cohort: EmbeddingSet,
    pub enroll_cl: ClLogitSet,
    pub test_cl: ClLogitSet,
    pub cohort_cl: ClLogitSet,
    pub meta: MetaMap,
    pub key: TrialSet,
}

struct Generator {
    rng: ChaCha8Rng,
    cfg: SynthConfig,
    channel: [Vec<f64>; 2],
    hub: Vec<f64>,
    projection: Vec<Vec<f64>>,
}

impl Generator {
    fn gaussian(&mut self, n: usize, scale: f64) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * scale
            })
            .collect()
    }

    fn unit(&mut self, n: usize) -> Vec<f64> {
        let v = self.gaussian(n, 1.0);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    }

    fn source(&mut self) -> SourceType {
        if self.rng.random_bool(self.cfg.p_tel) {
            SourceType::Tel
        } else {
            SourceType::Mic
        }
    }

    fn segment(&mut self, identity: &[f64], source: SourceType) -> Vec<f64> {
        let dim = self.cfg.dim;
        let per_dim = (dim as f64).sqrt().recip();
        let noise = self.gaussian(dim, self.cfg.noise * per_dim);
        let bias: f64 = self.rng.random::<f64>() * self.cfg.hub_strength;
        let ch = &self.channel[source as usize];
        (0..dim)
            .map(|i| identity[i] + ch[i] + bias * self.hub[i] + noise[i])
            .collect()
    }

    fn logits(&self, x: &[f64]) -> Vec<f32> {
        self.projection
            .iter()
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() as f32)
            .collect()
    }
}

pub fn generate(cfg: &SynthConfig) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = cfg.dim;
    let mut g = Generator {
        rng: ChaCha8Rng::seed_from_u64(rng.random()),
        cfg: cfg.clone(),
        channel: [Vec::new(), Vec::new()],
        hub: Vec::new(),
        projection: Vec::new(),
    };
    g.channel = [
        g.unit(dim).into_iter().map(|x| x * cfg.channel_shift).collect(),
        g.unit(dim).into_iter().map(|x| x * cfg.channel_shift).collect(),
    ];
    g.hub = g.unit(dim);
    let proj_scale = (dim as f64).sqrt().recip();
    g.projection = (0..cfg.n_classes).map(|_| g.gaussian(dim, proj_scale)).collect();

    let mut meta = MetaMap::new();
    let mut enroll = Vec::new();
    let mut test = Vec::new();
    let mut test_owner = Vec::new();
    for s in 0..cfg.n_speakers {
        let identity = g.unit(dim);
        let src = g.source();
        let id = format!("enr{s:04}");
        meta.insert(id.clone(), SegmentMeta { segment_id: id.clone(), source_type: src });
        enroll.push((id, g.segment(&identity, src)));
        for k in 0..cfg.tests_per_speaker {
            let src = g.source();
            let id = format!("tst{s:04}_{k}");
            meta.insert(id.clone(), SegmentMeta { segment_id: id.clone(), source_type: src });
            test.push((id, g.segment(&identity, src)));
            test_owner.push(s);
        }
    }
    let mut cohort = Vec::new();
    for c in 0..cfg.cohort_size {
        let identity = g.unit(dim);
        let src = g.source();
        cohort.push((format!("coh{c:04}"), g.segment(&identity, src)));
    }

    let mut trials = Vec::new();
    for (s, (eid, _)) in enroll.iter().enumerate() {
        for (j, (tid, _)) in test.iter().enumerate() {
            if test_owner[j] == s {
                trials.push(Trial::new(eid.clone(), tid.clone()).with_label(Label::Target));
            }
        }
        let mut others: Vec<usize> = (0..test.len()).filter(|&j| test_owner[j] != s).collect();
        others.shuffle(&mut g.rng);
        others.truncate(cfg.nontargets_per_enroll);
        others.sort_unstable();
        for j in others {
            trials.push(Trial::new(eid.clone(), test[j].0.clone()).with_label(Label::Nontarget));
        }
    }
    let mut key = TrialSet::new(trials).expect("generated trials are unique");
    key.attach_meta(&meta).expect("every segment has metadata");

    let to_set = |rows: &[(String, Vec<f64>)]| {
        EmbeddingSet::from_records(rows.iter().map(|(id, v)| EmbeddingRecord::new(id.clone(), v.iter().map(|&x| x as f32).collect())))
            .expect("generated embeddings are valid")
    };
    let labels: Vec<String> = (0..cfg.n_classes).map(|k| format!("spk{k:04}")).collect();
    let to_cl = |rows: &[(String, Vec<f64>)]| {
        let set = EmbeddingSet::from_records(rows.iter().map(|(id, v)| EmbeddingRecord::new(id.clone(), g.logits(v))))
            .expect("generated logits are valid");
        ClLogitSet::new(set, Some(labels.clone())).expect("label count matches")
    };
    Fixture {
        enroll: to_set(&enroll),
        test: to_set(&test),
        cohort: to_set(&cohort),
        enroll_cl: to_cl(&enroll),
        test_cl: to_cl(&test),
        cohort_cl: to_cl(&cohort),
        meta,
        key,
    }
}

/// Writes the fixture files into `dir`.
pub fn write_fixture(fx: &Fixture, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let bin = |set: &EmbeddingSet| encode_binary(set).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()));
    fs::write(dir.join("enroll.emb"), bin(&fx.enroll)?)?;
    fs::write(dir.join("test.emb"), bin(&fx.test)?)?;
    fs::write(dir.join("cohort.emb"), bin(&fx.cohort)?)?;
    fs::write(dir.join("enroll_cl.emb"), bin(&fx.enroll_cl.set)?)?;
    fs::write(dir.join("test_cl.emb"), bin(&fx.test_cl.set)?)?;
    fs::write(dir.join("cohort_cl.emb"), bin(&fx.cohort_cl.set)?)?;
    if let Some(labels) = &fx.enroll_cl.class_labels {
        fs::write(dir.join("classes.txt"), labels.iter().map(|l| format!("{l}\n")).collect::<String>())?;
    }
    fs::write(dir.join("meta.tsv"), meta_to_text(&fx.meta))?;
    fs::write(dir.join("key.tsv"), fx.key.to_text())?;
    let mut unlabelled = fx.key.clone();
    let trials: Vec<Trial> = unlabelled
        .iter()
        .map(|t| Trial::new(t.enroll_id.clone(), t.test_id.clone()))
        .collect();
    unlabelled = TrialSet::new(trials).expect("unique");
    fs::write(dir.join("trials.tsv"), unlabelled.to_text())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig {
            n_speakers: 10,
            cohort_size: 20,
            ..SynthConfig::default()
        };
        let a = generate(&cfg);
        let b = generate(&cfg);
        assert_eq!(a.enroll, b.enroll);
        assert_eq!(a.key, b.key);
        let c = generate(&SynthConfig { seed: 2, ..cfg });
        assert_ne!(a.enroll, c.enroll);
    }

    #[test]
    fn shapes() {
        let cfg = SynthConfig {
            n_speakers: 12,
            tests_per_speaker: 3,
            nontargets_per_enroll: 5,
            cohort_size: 30,
            ..SynthConfig::default()
        };
        let fx = generate(&cfg);
        assert_eq!(fx.enroll.len(), 12);
        assert_eq!(fx.test.len(), 36);
        assert_eq!(fx.cohort.len(), 30);
        assert_eq!(fx.key.len(), 12 * (3 + 5));
        assert_eq!(fx.enroll_cl.num_classes(), cfg.n_classes);
        assert!(fx.key.channel_pairs().is_some());
        let targets = fx.key.iter().filter(|t| t.label == Some(Label::Target)).count();
        assert_eq!(targets, 36);
    }
}
