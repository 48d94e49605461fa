//! Synthetic corpus with group-structured classes and "speakers" that apply
//! an affine distortion to the features.
//!
//! Class `j` belongs to group `j * S / J`. Class means are
//! `scale * (group_center + within_group_ratio * offset_j)` with standard
//! normal centers and offsets; frames add unit Gaussian noise. A speaker maps
//! each frame `x` to `R x + b + noise`, where `R` is within `strength` of the
//! identity entry-wise.

use std::io::Write;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{argmax, Matrix};
use crate::net::{LabeledFrameSet, Network};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub feature_dim: usize,
    pub class_count: usize,
    pub group_count: usize,
    pub frames_per_class: usize,
    pub dev_frames_per_class: usize,
    pub class_mean_scale: f64,
    /// Spread of class means around their group center, relative to the
    /// spread of group centers.
    pub within_group_ratio: f64,
    pub rng_seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            class_count: 40,
            group_count: 8,
            frames_per_class: 100,
            dev_frames_per_class: 25,
            class_mean_scale: 2.0,
            within_group_ratio: 0.6,
            rng_seed: 2015,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0
            || self.class_count == 0
            || self.group_count == 0
            || self.frames_per_class == 0
            || self.dev_frames_per_class == 0
        {
            return Err(Error::config("corpus counts must all be at least 1"));
        }
        if self.group_count > self.class_count {
            return Err(Error::config("group_count must not exceed class_count"));
        }
        if !(self.class_mean_scale > 0.0) || !(self.within_group_ratio >= 0.0) {
            return Err(Error::config("class_mean_scale must be positive"));
        }
        Ok(())
    }

    pub fn group_of(&self, class: usize) -> usize {
        class * self.group_count / self.class_count
    }

    pub fn groups(&self) -> Vec<usize> {
        (0..self.class_count).map(|j| self.group_of(j)).collect()
    }
}

/// Parameters of the speaker-mismatch family and of the per-speaker sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftSpec {
    /// Entry-wise bound on `|R - I|`.
    pub strength: f64,
    pub bias_scale: f64,
    pub noise_scale: f64,
    /// Frames per adaptation "sentence".
    pub sentence_frames: usize,
    /// Consecutive frames sharing one class inside a sentence.
    pub segment_frames: usize,
    pub test_frames_per_class: usize,
    /// Zipf exponent of a speaker's class frequencies in adaptation
    /// sentences; 0 draws covered classes uniformly. Each speaker ranks the
    /// classes in its own random order.
    pub class_skew: f64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self {
            strength: 0.1,
            bias_scale: 0.3,
            noise_scale: 0.3,
            sentence_frames: 50,
            segment_frames: 5,
            test_frames_per_class: 20,
            class_skew: 0.5,
        }
    }
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sentence_frames == 0 || self.segment_frames == 0 || self.test_frames_per_class == 0
        {
            return Err(Error::config(
                "sentence, segment and test sizes must be positive",
            ));
        }
        if !(self.strength >= 0.0
            && self.bias_scale >= 0.0
            && self.noise_scale >= 0.0
            && self.class_skew >= 0.0)
        {
            return Err(Error::config("shift strengths must be non-negative"));
        }
        Ok(())
    }
}

/// One speaker's feature distortion.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerShift {
    pub rotation: Matrix,
    pub bias_shift: Vec<f64>,
    pub noise_scale: f64,
    pub seed: u64,
}

impl SpeakerShift {
    pub fn identity(dim: usize, seed: u64) -> Self {
        Self {
            rotation: Matrix::identity(dim),
            bias_shift: vec![0.0; dim],
            noise_scale: 0.0,
            seed,
        }
    }

    pub fn sample(dim: usize, spec: &ShiftSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "shift", 0));
        let mut rotation = Matrix::identity(dim);
        for v in rotation.as_mut_slice() {
            if spec.strength > 0.0 {
                *v += rng.random_range(-spec.strength..=spec.strength);
            }
        }
        let bias_shift = (0..dim)
            .map(|_| spec.bias_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            rotation,
            bias_shift,
            noise_scale: spec.noise_scale,
            seed,
        }
    }

    /// Largest entry of `|R - I|`.
    pub fn distance_from_identity(&self) -> f64 {
        let n = self.rotation.rows();
        let mut d: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let id = if i == j { 1.0 } else { 0.0 };
                d = d.max((self.rotation.get(i, j) - id).abs());
            }
        }
        d
    }

    fn apply<R: Rng>(&self, x: &[f64], rng: &mut R, out: &mut Vec<f64>) {
        out.clear();
        for (i, b) in self.bias_shift.iter().enumerate() {
            let mut v = b + crate::linalg::dot(self.rotation.row(i), x);
            if self.noise_scale > 0.0 {
                v += self.noise_scale * rng.sample::<f64, _>(StandardNormal);
            }
            out.push(v);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdaptationBudget {
    pub sentences: usize,
    /// Sorted, non-empty.
    pub covered_classes: Vec<usize>,
}

impl AdaptationBudget {
    pub fn new(sentences: usize, mut covered_classes: Vec<usize>) -> Result<Self> {
        if sentences == 0 {
            return Err(Error::config("budget needs at least one sentence"));
        }
        if covered_classes.is_empty() {
            return Err(Error::config("budget must cover at least one class"));
        }
        covered_classes.sort_unstable();
        covered_classes.dedup();
        Ok(Self {
            sentences,
            covered_classes,
        })
    }

    pub fn full(sentences: usize, class_count: usize) -> Result<Self> {
        Self::new(sentences, (0..class_count).collect())
    }
}

/// `round(fraction * J)` classes (at least one), chosen by `seed`, sorted.
pub fn choose_covered(class_count: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let k =
        ((fraction.clamp(0.0, 1.0) * class_count as f64).round() as usize).clamp(1, class_count);
    if k == class_count {
        return (0..class_count).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "coverage", 0));
    let mut all: Vec<usize> = (0..class_count).collect();
    all.shuffle(&mut rng);
    let mut chosen = all[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Generated class structure plus the base training and dev sets.
#[derive(Debug, Clone)]
pub struct BaseCorpus {
    pub spec: CorpusSpec,
    pub class_means: Matrix,
    pub train: LabeledFrameSet,
    pub dev: LabeledFrameSet,
}

impl BaseCorpus {
    fn sample_frame<R: Rng>(&self, class: usize, rng: &mut R, out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.class_means
                .row(class)
                .iter()
                .map(|m| m + rng.sample::<f64, _>(StandardNormal)),
        );
    }
}

fn class_means(spec: &CorpusSpec) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(spec.rng_seed, "means", 0));
    let f = spec.feature_dim;
    let centers: Vec<Vec<f64>> = (0..spec.group_count)
        .map(|_| (0..f).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let mut means = Matrix::zeros(spec.class_count, f);
    for j in 0..spec.class_count {
        let c = &centers[spec.group_of(j)];
        for (k, m) in means.row_mut(j).iter_mut().enumerate() {
            let offset: f64 = rng.sample(StandardNormal);
            *m = spec.class_mean_scale * (c[k] + spec.within_group_ratio * offset);
        }
    }
    means
}

fn balanced_set(
    corpus_means: &BaseCorpus,
    per_class: usize,
    seed: u64,
    condition: u32,
    shift: Option<&SpeakerShift>,
) -> Result<LabeledFrameSet> {
    let spec = &corpus_means.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(spec.class_count * per_class * spec.feature_dim);
    let mut targets = Vec::with_capacity(spec.class_count * per_class);
    let mut x = Vec::with_capacity(spec.feature_dim);
    let mut y = Vec::with_capacity(spec.feature_dim);
    for _ in 0..per_class {
        for j in 0..spec.class_count {
            corpus_means.sample_frame(j, &mut rng, &mut x);
            match shift {
                Some(s) => {
                    s.apply(&x, &mut rng, &mut y);
                    data.extend_from_slice(&y);
                }
                None => data.extend_from_slice(&x),
            }
            targets.push(j);
        }
    }
    let n = targets.len();
    LabeledFrameSet::new(
        Matrix::from_vec(n, spec.feature_dim, data)?,
        targets,
        spec.class_count,
        vec![condition; n],
    )
}

/// Base training and dev sets, deterministic in `spec.rng_seed`.
pub fn gen_base_corpus(spec: &CorpusSpec) -> Result<BaseCorpus> {
    spec.validate()?;
    let placeholder = LabeledFrameSet::single(
        Matrix::zeros(1, spec.feature_dim),
        vec![0],
        spec.class_count,
    )?;
    let mut corpus = BaseCorpus {
        spec: spec.clone(),
        class_means: class_means(spec),
        train: placeholder.clone(),
        dev: placeholder,
    };
    corpus.train = balanced_set(
        &corpus,
        spec.frames_per_class,
        seeds::derive(spec.rng_seed, "train", 0),
        0,
        None,
    )?;
    corpus.dev = balanced_set(
        &corpus,
        spec.dev_frames_per_class,
        seeds::derive(spec.rng_seed, "dev", 0),
        0,
        None,
    )?;
    Ok(corpus)
}

/// Relative class frequencies `1 / (rank + 1)^skew` under a per-speaker
/// random ranking.
fn class_weights(class_count: usize, skew: f64, seed: u64) -> Vec<f64> {
    let mut rank: Vec<usize> = (0..class_count).collect();
    if skew > 0.0 {
        rank.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds::derive(
            seed, "skew", 0,
        )));
    }
    let mut w = vec![0.0; class_count];
    for (r, &c) in rank.iter().enumerate() {
        w[c] = ((r + 1) as f64).powf(-skew);
    }
    w
}

/// One speaker's adaptation and test material.
#[derive(Debug, Clone)]
pub struct SpeakerData {
    pub adapt: LabeledFrameSet,
    pub test: LabeledFrameSet,
}

/// Generates a speaker's adaptation set (restricted to the budget's sentence
/// count and covered classes) and a class-balanced test set.
///
/// Sentences are drawn in order from one stream, so a smaller budget yields a
/// prefix of a larger one for the same speaker and coverage.
pub fn gen_speaker(
    corpus: &BaseCorpus,
    shift_spec: &ShiftSpec,
    shift: &SpeakerShift,
    budget: &AdaptationBudget,
    condition: u32,
) -> Result<SpeakerData> {
    shift_spec.validate()?;
    let spec = &corpus.spec;
    if shift.bias_shift.len() != spec.feature_dim {
        return Err(Error::Dimension {
            what: "speaker shift",
            expected: spec.feature_dim,
            got: shift.bias_shift.len(),
        });
    }
    if let Some(&bad) = budget
        .covered_classes
        .iter()
        .find(|&&c| c >= spec.class_count)
    {
        return Err(Error::config(format!("covered class {bad} out of range")));
    }

    let weights = class_weights(spec.class_count, shift_spec.class_skew, shift.seed);
    let covered: Vec<(usize, f64)> = budget
        .covered_classes
        .iter()
        .map(|&c| (c, weights[c]))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(shift.seed, "adapt", 0));
    let total = budget.sentences * shift_spec.sentence_frames;
    let mut data = Vec::with_capacity(total * spec.feature_dim);
    let mut targets = Vec::with_capacity(total);
    let mut x = Vec::with_capacity(spec.feature_dim);
    let mut y = Vec::with_capacity(spec.feature_dim);
    for _ in 0..budget.sentences {
        let mut left = shift_spec.sentence_frames;
        while left > 0 {
            let class = covered
                .choose_weighted(&mut rng, |c| c.1)
                .expect("budget invariant: non-empty, positive weights")
                .0;
            for _ in 0..shift_spec.segment_frames.min(left) {
                corpus.sample_frame(class, &mut rng, &mut x);
                shift.apply(&x, &mut rng, &mut y);
                data.extend_from_slice(&y);
                targets.push(class);
                left -= 1;
            }
        }
    }
    let adapt = LabeledFrameSet::new(
        Matrix::from_vec(total, spec.feature_dim, data)?,
        targets,
        spec.class_count,
        vec![condition; total],
    )?;
    let test = balanced_set(
        corpus,
        shift_spec.test_frames_per_class,
        seeds::derive(shift.seed, "test", 0),
        condition,
        Some(shift),
    )?;
    Ok(SpeakerData { adapt, test })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassDelta {
    pub class: usize,
    pub frames: usize,
    pub base_error: f64,
    pub adapted_error: f64,
}

impl ClassDelta {
    pub fn delta(&self) -> f64 {
        self.adapted_error - self.base_error
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingReport {
    pub per_class: Vec<ClassDelta>,
    /// Error change over test frames of covered classes; `None` if there are none.
    pub covered_delta: Option<f64>,
    /// Error change over test frames of uncovered classes; `None` if there are none.
    pub uncovered_delta: Option<f64>,
    pub uncovered_base_error: Option<f64>,
    pub uncovered_adapted_error: Option<f64>,
    /// Mean `KL(base || adapted)` over test frames.
    pub mean_kl: f64,
}

/// Compares per-class errors and posteriors of an adapted network against
/// the network it was adapted from.
pub fn forgetting_probe(
    base: &Network,
    adapted: &Network,
    test: &LabeledFrameSet,
    uncovered: &[usize],
) -> Result<ForgettingReport> {
    if base.input_dim() != adapted.input_dim() || base.class_count() != adapted.class_count() {
        return Err(Error::invalid(
            "networks do not share input and output shapes",
        ));
    }
    let j = base.class_count();
    let pb = base.posteriors(test.frames())?;
    let pa = adapted.posteriors(test.frames())?;
    let mut frames = vec![0usize; j];
    let mut base_wrong = vec![0usize; j];
    let mut adapted_wrong = vec![0usize; j];
    let mut kl = 0.0;
    for (t, &y) in test.targets().iter().enumerate() {
        frames[y] += 1;
        base_wrong[y] += usize::from(argmax(pb.row(t)) != y);
        adapted_wrong[y] += usize::from(argmax(pa.row(t)) != y);
        kl += pb
            .row(t)
            .iter()
            .zip(pa.row(t))
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, q)| p * (p.ln() - q.max(crate::net::LOG_FLOOR).ln()))
            .sum::<f64>();
    }
    let per_class: Vec<ClassDelta> = (0..j)
        .filter(|&c| frames[c] > 0)
        .map(|c| ClassDelta {
            class: c,
            frames: frames[c],
            base_error: base_wrong[c] as f64 / frames[c] as f64,
            adapted_error: adapted_wrong[c] as f64 / frames[c] as f64,
        })
        .collect();
    let is_uncovered = |c: usize| uncovered.contains(&c);
    let pooled = |pick: &dyn Fn(usize) -> bool, wrong: &[usize]| -> Option<f64> {
        let n: usize = (0..j).filter(|&c| pick(c)).map(|c| frames[c]).sum();
        (n > 0)
            .then(|| (0..j).filter(|&c| pick(c)).map(|c| wrong[c]).sum::<usize>() as f64 / n as f64)
    };
    let cov_b = pooled(&|c| !is_uncovered(c), &base_wrong);
    let cov_a = pooled(&|c| !is_uncovered(c), &adapted_wrong);
    let unc_b = pooled(&is_uncovered, &base_wrong);
    let unc_a = pooled(&is_uncovered, &adapted_wrong);
    Ok(ForgettingReport {
        per_class,
        covered_delta: cov_a.zip(cov_b).map(|(a, b)| a - b),
        uncovered_delta: unc_a.zip(unc_b).map(|(a, b)| a - b),
        uncovered_base_error: unc_b,
        uncovered_adapted_error: unc_a,
        mean_kl: kl / test.len() as f64,
    })
}

/// Writes frames as comma-separated text: condition, label, then features.
pub fn write_frames_csv<W: Write>(set: &LabeledFrameSet, mut out: W) -> Result<()> {
    let f = set.feature_dim();
    let mut header = String::from("condition,label");
    for k in 0..f {
        header.push_str(&format!(",f{k}"));
    }
    writeln!(out, "{header}")?;
    for t in 0..set.len() {
        let mut line = format!("{},{}", set.conditions()[t], set.targets()[t]);
        for v in set.frames().row(t) {
            line.push_str(&format!(",{v:?}"));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}
