//! Synthetic identities and observations with calibrated match statistics.
//!
//! Every present segment of an identity has a latent unit direction. An
//! observation perturbs it by isotropic Gaussian noise in the tangent space,
//! with per-coordinate variance `1 / (κ · q)` for modality concentration `κ`
//! and capture quality `q`, and re-normalizes. Different identities are
//! independent uniform directions, so non-mated scores are near zero.
//!
//! `κ` per modality is calibrated by bisection so that single-segment
//! verification at quality 1 reaches a target TMR at a target FMR. The
//! Monte Carlo uses exact scalar representations of both score
//! distributions, so each step costs O(samples) rather than O(samples · d).
//!
//! All randomness is drawn from per-item ChaCha streams keyed by
//! `(seed, purpose, index)`, which makes parallel generation reproducible.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{fmr_cutoff, EvalError, LabeledProbe};
use crate::index::{Gallery, IndexError, DEFAULT_SHARD_ROWS};
use crate::template::{
    Modality, MultiBiometricTemplate, PresenceMask, QualityVector, SegmentKind, FACE_DIM, FINGER_DIM, IRIS_DIM,
    TEMPLATE_DIM,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthesis config: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("calibration cannot reach TMR {target_tmr}: best was {best_tmr} at kappa {best_kappa}")]
    Calibration {
        target_tmr: f64,
        best_tmr: f64,
        best_kappa: f64,
    },
    #[error("registry line {line}: {message}")]
    Registry { line: usize, message: String },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A verification operating point: TMR reached at FMR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingTarget {
    pub tmr: f64,
    pub fmr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityTargets {
    pub finger: OperatingTarget,
    pub face: OperatingTarget,
    pub iris: OperatingTarget,
}

impl Default for ModalityTargets {
    fn default() -> Self {
        Self {
            finger: OperatingTarget { tmr: 0.97, fmr: 1e-4 },
            face: OperatingTarget { tmr: 0.995, fmr: 1e-4 },
            iris: OperatingTarget { tmr: 0.9685, fmr: 1e-4 },
        }
    }
}

/// Noise concentration per modality; larger is less noisy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityKappas {
    pub finger: f64,
    pub face: f64,
    pub iris: f64,
}

impl ModalityKappas {
    pub fn get(&self, modality: Modality) -> f64 {
        match modality {
            Modality::Finger => self.finger,
            Modality::Face => self.face,
            Modality::Iris => self.iris,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        for k in [self.finger, self.face, self.iris] {
            if !(k.is_finite() && k > 0.0) {
                return Err(SynthError::Config(format!("kappa {k} must be positive and finite")));
            }
        }
        Ok(())
    }
}

/// Per-identity missing-modality probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MissingRates {
    pub face: f64,
    /// Both irides missing together.
    pub iris: f64,
    /// All ten fingers missing together.
    pub fingers: f64,
    /// Each remaining finger missing independently.
    pub finger: f64,
}

/// Base quality per modality group is drawn from a two-component mixture
/// (occasional poor captures, mostly good ones) shared by all segments of
/// the group; segments then add their own jitter. The shared draw makes
/// finger qualities of one identity strongly correlated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualityModel {
    pub poor_rate: f64,
    pub poor_min: f64,
    pub poor_max: f64,
    pub good_min: f64,
    pub good_max: f64,
    /// Standard deviation of per-segment deviation from the group base.
    pub segment_jitter: f64,
    /// Standard deviation of per-capture deviation from the segment base.
    pub capture_jitter: f64,
    /// Lower clamp; keeps effective concentration positive.
    pub floor: f64,
}

impl Default for QualityModel {
    fn default() -> Self {
        Self {
            poor_rate: 0.03,
            poor_min: 0.02,
            poor_max: 0.3,
            good_min: 0.7,
            good_max: 1.0,
            segment_jitter: 0.05,
            capture_jitter: 0.05,
            floor: 0.01,
        }
    }
}

impl QualityModel {
    fn validate(&self) -> Result<(), SynthError> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.poor_rate)
            || !(unit(self.poor_min) && unit(self.poor_max) && self.poor_min < self.poor_max)
            || !(unit(self.good_min) && unit(self.good_max) && self.good_min < self.good_max)
            || !(self.floor > 0.0 && self.floor <= 1.0)
            || !(self.segment_jitter >= 0.0 && self.capture_jitter >= 0.0)
        {
            return Err(SynthError::Config("quality model parameters out of range".into()));
        }
        Ok(())
    }
}

/// Monte Carlo sample sizes for calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationBudget {
    pub mated: usize,
    pub nonmated: usize,
}

impl Default for CalibrationBudget {
    fn default() -> Self {
        Self {
            mated: 200_000,
            nonmated: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub gallery_size: usize,
    pub mated_probes: usize,
    pub nonmated_probes: usize,
    /// Mated probes are drawn from the first `mate_pool` gallery entries.
    pub mate_pool: Option<usize>,
    pub shard_rows: usize,
    pub targets: ModalityTargets,
    /// Fixed concentrations; calibrated from `targets` when absent.
    pub kappa: Option<ModalityKappas>,
    pub calibration: CalibrationBudget,
    pub missing: MissingRates,
    pub quality: QualityModel,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            gallery_size: 10_000,
            mated_probes: 1_000,
            nonmated_probes: 1_000,
            mate_pool: None,
            shard_rows: DEFAULT_SHARD_ROWS,
            targets: ModalityTargets::default(),
            kappa: None,
            calibration: CalibrationBudget::default(),
            missing: MissingRates::default(),
            quality: QualityModel::default(),
        }
    }
}

impl SynthConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, SynthError> {
        let config: Self = toml::from_str(text).map_err(|e| SynthError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.gallery_size == 0 {
            return Err(SynthError::Config("gallery_size must be at least 1".into()));
        }
        if self.shard_rows == 0 {
            return Err(SynthError::Config("shard_rows must be at least 1".into()));
        }
        let pool = self.mate_pool.unwrap_or(self.gallery_size);
        if pool == 0 || pool > self.gallery_size {
            return Err(SynthError::Config(format!("mate_pool must lie in 1..={}", self.gallery_size)));
        }
        if self.mated_probes > pool {
            return Err(SynthError::Config(format!(
                "{} mated probes need at least as many enrolled identities (pool {pool})",
                self.mated_probes
            )));
        }
        for t in [self.targets.finger, self.targets.face, self.targets.iris] {
            if !(t.fmr > 0.0 && t.fmr < t.tmr && t.tmr <= 1.0) {
                return Err(SynthError::Config(format!("target {t:?} must satisfy 0 < fmr < tmr <= 1")));
            }
        }
        if let Some(k) = &self.kappa {
            k.validate()?;
        }
        let m = &self.missing;
        if [m.face, m.iris, m.fingers, m.finger].iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(SynthError::Config("missing rates must lie in [0, 1]".into()));
        }
        self.quality.validate()
    }
}

/// Random-stream purposes. Streams never overlap across purposes.
mod purpose {
    pub const IDENTITY: u64 = 1;
    pub const GALLERY_CAPTURE: u64 = 2;
    pub const MATED_CAPTURE: u64 = 3;
    pub const NONMATED_IDENTITY: u64 = 4;
    pub const NONMATED_CAPTURE: u64 = 5;
    pub const CALIBRATION: u64 = 6;
    pub const MATE_SELECTION: u64 = 7;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent deterministic stream for item `index` of `purpose`.
pub fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(purpose)));
    rng.set_stream(index);
    rng
}

/// Latent model of one synthetic person.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticIdentity {
    /// Concatenated latent unit directions; zero on absent segments.
    pub latent: Vec<f32>,
    pub presence: PresenceMask,
    /// Per-segment base quality; zero on absent segments.
    pub base_quality: QualityVector,
}

impl SyntheticIdentity {
    pub fn direction(&self, kind: SegmentKind) -> Option<&[f32]> {
        self.presence.contains(kind).then(|| &self.latent[kind.range()])
    }
}

fn unit_gaussian(rng: &mut impl Rng, out: &mut [f32]) {
    let mut buf = Vec::with_capacity(out.len());
    loop {
        let mut norm2 = 0f64;
        buf.clear();
        for _ in 0..out.len() {
            let x: f64 = rng.sample(StandardNormal);
            norm2 += x * x;
            buf.push(x);
        }
        if norm2 > 0.0 {
            let inv = 1.0 / norm2.sqrt();
            for (o, x) in out.iter_mut().zip(&buf) {
                *o = (x * inv) as f32;
            }
            return;
        }
    }
}

fn sample_presence(rng: &mut impl Rng, missing: &MissingRates) -> PresenceMask {
    loop {
        let mut mask = PresenceMask::empty();
        let fingers_present = !rng.random_bool(missing.fingers);
        let face = !rng.random_bool(missing.face);
        let iris = !rng.random_bool(missing.iris);
        for kind in SegmentKind::ALL {
            let present = match kind.modality() {
                Modality::Finger => fingers_present && !rng.random_bool(missing.finger),
                Modality::Face => face,
                Modality::Iris => iris,
            };
            if present {
                mask.insert(kind);
            }
        }
        // An identity with nothing captured cannot be enrolled; redraw.
        if !mask.is_empty() {
            return mask;
        }
    }
}

fn clamp_quality(q: f64, floor: f64) -> f32 {
    q.clamp(floor, 1.0) as f32
}

/// Draws latent directions, presence and base qualities for one identity.
pub fn sample_identity(rng: &mut impl Rng, config: &SynthConfig) -> SyntheticIdentity {
    let presence = sample_presence(rng, &config.missing);
    let q = &config.quality;
    let mut group_base = [0f64; 3];
    for base in group_base.iter_mut() {
        *base = if rng.random_bool(q.poor_rate) {
            rng.random_range(q.poor_min..=q.poor_max)
        } else {
            rng.random_range(q.good_min..=q.good_max)
        };
    }
    let mut latent = vec![0f32; TEMPLATE_DIM];
    let mut base_quality = QualityVector::default();
    for kind in SegmentKind::ALL {
        // Draw for every segment so that presence does not shift the stream.
        let mut dir = vec![0f32; kind.dim()];
        unit_gaussian(rng, &mut dir);
        let jitter: f64 = rng.sample::<f64, _>(StandardNormal) * q.segment_jitter;
        if presence.contains(kind) {
            latent[kind.range()].copy_from_slice(&dir);
            let group = match kind.modality() {
                Modality::Finger => 0,
                Modality::Face => 1,
                Modality::Iris => 2,
            };
            base_quality.set(kind, clamp_quality(group_base[group] + jitter, q.floor));
        }
    }
    SyntheticIdentity {
        latent,
        presence,
        base_quality,
    }
}

/// How capture quality is chosen for an observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QualityDraw {
    /// Every present segment captured at this quality.
    Fixed(f32),
    /// Identity base quality plus Gaussian jitter, clamped.
    Jittered { sd: f64, floor: f64 },
}

/// One capture of `identity`: every present segment is its latent
/// direction plus tangent noise of per-coordinate variance `1 / (κ · q)`,
/// re-normalized.
pub fn sample_observation(
    identity: &SyntheticIdentity,
    kappas: &ModalityKappas,
    quality: QualityDraw,
    rng: &mut impl Rng,
) -> MultiBiometricTemplate {
    let mut vector = vec![0f32; TEMPLATE_DIM];
    let mut qv = QualityVector::default();
    let mut noise = Vec::with_capacity(FACE_DIM);
    for kind in SegmentKind::ALL {
        let Some(mu) = identity.direction(kind) else {
            continue;
        };
        let q = match quality {
            QualityDraw::Fixed(q) => q.clamp(f32::MIN_POSITIVE, 1.0),
            QualityDraw::Jittered { sd, floor } => {
                let base = identity.base_quality.get(kind) as f64;
                clamp_quality(base + rng.sample::<f64, _>(StandardNormal) * sd, floor)
            }
        };
        qv.set(kind, q);
        let sigma = (1.0 / (kappas.get(kind.modality()) * q as f64)).sqrt();
        noise.clear();
        noise.extend((0..mu.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let along: f64 = noise.iter().zip(mu).map(|(z, &m)| z * m as f64).sum();
        let mut obs: Vec<f64> = noise
            .iter()
            .zip(mu)
            .map(|(z, &m)| m as f64 + sigma * (z - along * m as f64))
            .collect();
        let norm = obs.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in obs.iter_mut() {
            *x /= norm;
        }
        for (o, x) in vector[kind.range()].iter_mut().zip(obs) {
            *o = x as f32;
        }
    }
    MultiBiometricTemplate::from_parts(vector, identity.presence, qv, None).expect("observation is a valid template")
}

/// Exact draws of the scalar statistics of one mated pair at dimension `d`:
/// with tangent noises `z1, z2`, `a = |z1|²`, `b = |z2|²` and
/// `x = ⟨z1, z2⟩`.
struct MatedScalars {
    a: Vec<f64>,
    b: Vec<f64>,
    x: Vec<f64>,
}

impl MatedScalars {
    fn sample(dim: usize, n: usize, rng: &mut impl Rng) -> Self {
        let chi_d1 = ChiSquared::new((dim - 1) as f64).expect("dim > 2");
        let chi_d2 = ChiSquared::new((dim - 2) as f64).expect("dim > 2");
        let mut s = Self {
            a: Vec::with_capacity(n),
            b: Vec::with_capacity(n),
            x: Vec::with_capacity(n),
        };
        for _ in 0..n {
            let a = chi_d1.sample(rng);
            let g: f64 = rng.sample(StandardNormal);
            // z2 split into its component along z1 (g) and the rest.
            let b = g * g + chi_d2.sample(rng);
            s.a.push(a);
            s.b.push(b);
            s.x.push(a.sqrt() * g);
        }
        s
    }

    /// Cosines of the pairs at noise variances `1/κ` on both sides.
    fn cosines(&self, kappa: f64) -> impl Iterator<Item = f64> + '_ {
        let s = 1.0 / kappa;
        (0..self.a.len()).map(move |i| (1.0 + s * self.x[i]) / ((1.0 + s * self.a[i]) * (1.0 + s * self.b[i])).sqrt())
    }
}

/// Exact draws of the cosine between two independent uniform directions.
fn nonmated_cosines(dim: usize, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let chi = ChiSquared::new((dim - 1) as f64).expect("dim > 1");
    (0..n)
        .map(|_| {
            let g: f64 = rng.sample(StandardNormal);
            g / (g * g + chi.sample(rng)).sqrt()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseCalibration {
    pub dim: usize,
    pub kappa: f64,
    pub target: OperatingTarget,
    /// Score threshold meeting the target FMR on the calibration sample.
    pub threshold: f64,
    pub achieved_tmr: f64,
}

const KAPPA_MIN: f64 = 1e-2;
const KAPPA_MAX: f64 = 1e7;
const BISECTION_STEPS: usize = 60;

/// Smallest κ (to bisection precision) whose quality-1 verification TMR at
/// the target FMR reaches the target TMR.
pub fn calibrate_noise(
    dim: usize,
    target: OperatingTarget,
    budget: &CalibrationBudget,
    rng: &mut impl Rng,
) -> Result<NoiseCalibration, SynthError> {
    if !(target.fmr > 0.0 && target.fmr < target.tmr && target.tmr <= 1.0) {
        return Err(SynthError::InvalidArgument(format!("target {target:?} must satisfy 0 < fmr < tmr <= 1")));
    }
    if dim < 3 || budget.mated == 0 {
        return Err(SynthError::InvalidArgument("need dim >= 3 and a positive mated budget".into()));
    }
    let nonmated = nonmated_cosines(dim, budget.nonmated, rng);
    let cutoff = fmr_cutoff(&nonmated, target.fmr)?;
    let mated = MatedScalars::sample(dim, budget.mated, rng);
    let tmr = |kappa: f64| mated.cosines(kappa).filter(|&c| c > cutoff).count() as f64 / budget.mated as f64;

    let best = tmr(KAPPA_MAX);
    // A finite sample cannot certify a perfect match rate, and κ → ∞ is not
    // a usable concentration.
    if target.tmr >= 1.0 || best < target.tmr {
        return Err(SynthError::Calibration {
            target_tmr: target.tmr,
            best_tmr: best,
            best_kappa: KAPPA_MAX,
        });
    }
    let (mut lo, mut hi) = (KAPPA_MIN.ln(), KAPPA_MAX.ln());
    if tmr(KAPPA_MIN) >= target.tmr {
        hi = lo;
    }
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if tmr(mid.exp()) >= target.tmr {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let kappa = hi.exp();
    Ok(NoiseCalibration {
        dim,
        kappa,
        target,
        threshold: cutoff,
        achieved_tmr: tmr(kappa),
    })
}

/// Calibrates all three modalities with independent streams of `seed`.
pub fn calibrate_all(
    targets: &ModalityTargets,
    budget: &CalibrationBudget,
    seed: u64,
) -> Result<(ModalityKappas, [NoiseCalibration; 3]), SynthError> {
    let run = |i: u64, dim: usize, t: OperatingTarget| calibrate_noise(dim, t, budget, &mut stream_rng(seed, purpose::CALIBRATION, i));
    let finger = run(0, FINGER_DIM, targets.finger)?;
    let face = run(1, FACE_DIM, targets.face)?;
    let iris = run(2, IRIS_DIM, targets.iris)?;
    Ok((
        ModalityKappas {
            finger: finger.kappa,
            face: face.kappa,
            iris: iris.kappa,
        },
        [finger, face, iris],
    ))
}

/// Verification scores from full-vector observations of one segment kind at
/// quality 1: `n_mated` pairs of captures of fresh identities, and
/// non-mated pairs formed by pairing captures of different identities.
pub fn segment_score_samples(
    kind: SegmentKind,
    kappa: f64,
    n_mated: usize,
    n_nonmated: usize,
    seed: u64,
) -> (Vec<f64>, Vec<f64>) {
    let kappas = ModalityKappas {
        finger: kappa,
        face: kappa,
        iris: kappa,
    };
    let dim = kind.dim();
    let pairs: Vec<(Vec<f32>, Vec<f32>)> = (0..n_mated as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, purpose::IDENTITY, i);
            let mut mu = vec![0f32; dim];
            unit_gaussian(&mut rng, &mut mu);
            let mut latent = vec![0f32; TEMPLATE_DIM];
            latent[kind.range()].copy_from_slice(&mu);
            let mut base_quality = QualityVector::default();
            base_quality.set(kind, 1.0);
            let identity = SyntheticIdentity {
                latent,
                presence: PresenceMask::from_segments([kind]),
                base_quality,
            };
            let a = sample_observation(&identity, &kappas, QualityDraw::Fixed(1.0), &mut rng);
            let b = sample_observation(&identity, &kappas, QualityDraw::Fixed(1.0), &mut rng);
            (a.segment(kind).to_vec(), b.segment(kind).to_vec())
        })
        .collect();
    let dot = |x: &[f32], y: &[f32]| x.iter().zip(y).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>();
    let mated: Vec<f64> = pairs.par_iter().map(|(a, b)| dot(a, b)).collect();
    let n = pairs.len();
    let nonmated: Vec<f64> = (0..n_nonmated)
        .into_par_iter()
        .map(|j| {
            // Pair capture i with the second capture of identity i + shift.
            let i = j % n;
            let shift = 1 + j / n;
            dot(&pairs[i].0, &pairs[(i + shift) % n].1)
        })
        .collect();
    (mated, nonmated)
}

/// Gallery id to identity mapping for truth evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub gallery_id: u64,
    pub identity: u64,
}

pub type Registry = Vec<RegistryEntry>;

/// Ground truth of one probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeTruth {
    pub probe_id: u64,
    pub identity: u64,
    pub mate_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSets {
    pub mated: Vec<LabeledProbe>,
    pub nonmated: Vec<LabeledProbe>,
    pub truth: Vec<ProbeTruth>,
}

/// Identity labels of non-mated probes start here, far above any gallery
/// identity index.
pub const NONMATED_IDENTITY_BASE: u64 = 1 << 48;

const GENERATION_CHUNK: usize = 4096;

/// A population defined by a config, a seed and resolved concentrations.
#[derive(Debug, Clone)]
pub struct Generator {
    config: SynthConfig,
    seed: u64,
    kappas: ModalityKappas,
    calibrations: Option<[NoiseCalibration; 3]>,
}

impl Generator {
    /// Uses the configured κ or calibrates from the targets.
    pub fn new(config: SynthConfig, seed: u64) -> Result<Self, SynthError> {
        config.validate()?;
        let (kappas, calibrations) = match config.kappa {
            Some(k) => (k, None),
            None => {
                let (k, c) = calibrate_all(&config.targets, &config.calibration, seed)?;
                (k, Some(c))
            }
        };
        Ok(Self {
            config,
            seed,
            kappas,
            calibrations,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn kappas(&self) -> &ModalityKappas {
        &self.kappas
    }

    /// Calibration details when κ was calibrated rather than configured.
    pub fn calibrations(&self) -> Option<&[NoiseCalibration; 3]> {
        self.calibrations.as_ref()
    }

    fn capture_quality(&self) -> QualityDraw {
        QualityDraw::Jittered {
            sd: self.config.quality.capture_jitter,
            floor: self.config.quality.floor,
        }
    }

    /// Gallery identity `index`; stable for a given seed and config.
    pub fn identity(&self, index: u64) -> SyntheticIdentity {
        sample_identity(&mut stream_rng(self.seed, purpose::IDENTITY, index), &self.config)
    }

    fn capture(&self, identity: &SyntheticIdentity, purpose: u64, index: u64, id: Option<u64>) -> MultiBiometricTemplate {
        let mut rng = stream_rng(self.seed, purpose, index);
        sample_observation(identity, &self.kappas, self.capture_quality(), &mut rng).with_subject_id(id)
    }

    /// One capture of identities `0..n`, enrolled under gallery ids `1..=n`.
    pub fn generate_gallery(&self, n: usize) -> Result<(Gallery, Registry), SynthError> {
        if n == 0 {
            return Err(SynthError::InvalidArgument("gallery size must be at least 1".into()));
        }
        let mut gallery = Gallery::new(self.config.shard_rows);
        gallery.reserve(n);
        let mut registry = Vec::with_capacity(n);
        for start in (0..n).step_by(GENERATION_CHUNK) {
            let end = (start + GENERATION_CHUNK).min(n);
            let chunk: Vec<MultiBiometricTemplate> = (start as u64..end as u64)
                .into_par_iter()
                .map(|i| self.capture(&self.identity(i), purpose::GALLERY_CAPTURE, i, Some(i + 1)))
                .collect();
            for (offset, template) in chunk.iter().enumerate() {
                gallery.insert(template)?;
                let identity = (start + offset) as u64;
                registry.push(RegistryEntry {
                    gallery_id: identity + 1,
                    identity,
                });
            }
        }
        Ok((gallery, registry))
    }

    /// Fresh captures of `n_mated` distinct enrolled identities (drawn from
    /// the first `mate_pool` registry entries) and of `n_nonmated` identities
    /// that are not enrolled. `probe_seed` separates independent probe sets
    /// of the same population.
    pub fn generate_probe_sets(
        &self,
        registry: &[RegistryEntry],
        n_mated: usize,
        n_nonmated: usize,
        mate_pool: Option<usize>,
        probe_seed: u64,
    ) -> Result<ProbeSets, SynthError> {
        let pool = mate_pool.unwrap_or(registry.len()).min(registry.len());
        if n_mated > pool {
            return Err(SynthError::InvalidArgument(format!(
                "{n_mated} mated probes requested but only {pool} enrolled identities are eligible"
            )));
        }
        let set_seed = splitmix64(self.seed ^ splitmix64(probe_seed.wrapping_add(0x7072_6f62)));
        let mut pick_rng = stream_rng(set_seed, purpose::MATE_SELECTION, 0);
        let mates: Vec<RegistryEntry> = sample(&mut pick_rng, pool, n_mated).into_iter().map(|i| registry[i]).collect();

        let mated: Vec<(LabeledProbe, ProbeTruth)> = mates
            .par_iter()
            .enumerate()
            .map(|(j, entry)| {
                let probe_id = j as u64 + 1;
                let identity = self.identity(entry.identity);
                let mut rng = stream_rng(set_seed, purpose::MATED_CAPTURE, j as u64);
                let template = sample_observation(&identity, &self.kappas, self.capture_quality(), &mut rng)
                    .with_subject_id(Some(probe_id));
                (
                    LabeledProbe {
                        probe_id,
                        mate_id: Some(entry.gallery_id),
                        template,
                    },
                    ProbeTruth {
                        probe_id,
                        identity: entry.identity,
                        mate_id: Some(entry.gallery_id),
                    },
                )
            })
            .collect();
        let nonmated: Vec<(LabeledProbe, ProbeTruth)> = (0..n_nonmated as u64)
            .into_par_iter()
            .map(|j| {
                let probe_id = n_mated as u64 + j + 1;
                let identity = sample_identity(&mut stream_rng(set_seed, purpose::NONMATED_IDENTITY, j), &self.config);
                let mut rng = stream_rng(set_seed, purpose::NONMATED_CAPTURE, j);
                let template = sample_observation(&identity, &self.kappas, self.capture_quality(), &mut rng)
                    .with_subject_id(Some(probe_id));
                (
                    LabeledProbe {
                        probe_id,
                        mate_id: None,
                        template,
                    },
                    ProbeTruth {
                        probe_id,
                        identity: NONMATED_IDENTITY_BASE + j,
                        mate_id: None,
                    },
                )
            })
            .collect();
        let (mated, mut truth): (Vec<_>, Vec<_>) = mated.into_iter().unzip();
        let (nonmated, nonmated_truth): (Vec<_>, Vec<_>) = nonmated.into_iter().unzip();
        truth.extend(nonmated_truth);
        Ok(ProbeSets { mated, nonmated, truth })
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), SynthError> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, SynthError> {
    let input = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| SynthError::Registry {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_registry(path: &Path, registry: &[RegistryEntry]) -> Result<(), SynthError> {
    write_jsonl(path, registry)
}

pub fn read_registry(path: &Path) -> Result<Registry, SynthError> {
    read_jsonl(path)
}

pub fn write_probe_truth(path: &Path, truth: &[ProbeTruth]) -> Result<(), SynthError> {
    write_jsonl(path, truth)
}

pub fn read_probe_truth(path: &Path) -> Result<Vec<ProbeTruth>, SynthError> {
    read_jsonl(path)
}

/// Stores probe templates in the gallery file format, keyed by probe id.
pub fn save_probes(path: &Path, probes: &[&LabeledProbe]) -> Result<(), SynthError> {
    let mut g = Gallery::new(probes.len().max(1));
    for p in probes {
        g.insert(&p.template.clone().with_subject_id(Some(p.probe_id)))?;
    }
    g.save(path)?;
    Ok(())
}

/// Reloads probes saved by [`save_probes`] and attaches their truth labels.
/// Returns `(mated, nonmated)` in truth-file order.
pub fn load_probes(
    templates: &Path,
    truth: &[ProbeTruth],
) -> Result<(Vec<LabeledProbe>, Vec<LabeledProbe>), SynthError> {
    let g = Gallery::load(templates, truth.len().max(1))?;
    let by_id: BTreeMap<u64, &ProbeTruth> = truth.iter().map(|t| (t.probe_id, t)).collect();
    if by_id.len() != truth.len() || g.len() != truth.len() {
        return Err(SynthError::InvalidArgument(format!(
            "{} probe templates but {} truth entries",
            g.len(),
            truth.len()
        )));
    }
    let mut mated = Vec::new();
    let mut nonmated = Vec::new();
    for t in truth {
        let template = g
            .template(t.probe_id)
            .ok_or_else(|| SynthError::InvalidArgument(format!("probe {} has no template", t.probe_id)))?;
        let probe = LabeledProbe {
            probe_id: t.probe_id,
            mate_id: t.mate_id,
            template,
        };
        if t.mate_id.is_some() {
            mated.push(probe);
        } else {
            nonmated.push(probe);
        }
    }
    Ok((mated, nonmated))
}
