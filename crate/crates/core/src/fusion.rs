//! Weighted score-level fusion of per-segment inner products.
//!
//! The fused score of a probe/gallery pair is the weighted mean of the
//! per-segment cosines over the segments present in *both* templates:
//!
//! ```text
//! value = Σ_i w_i ⟨q_i, g_i⟩ / Σ_{i present in both} w_i
//! ```
//!
//! Renormalizing by the common weight mass keeps a self-match at 1 regardless
//! of which modalities were captured, so scores stay comparable across
//! presence patterns.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::template::{
    MultiBiometricTemplate, PresenceMask, QualityVector, SegmentKind, SEGMENT_COUNT, TEMPLATE_DIM,
};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("invalid fusion weights: {0}")]
    InvalidWeights(String),
    #[error("templates share no present segment with positive weight")]
    Incomparable,
    #[error("decision threshold {0} is outside [-1, 1]")]
    InvalidThreshold(f32),
    #[error("weight profile: {0}")]
    Profile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Non-negative per-segment fusion weights in canonical segment order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionWeights([f32; SEGMENT_COUNT]);

impl FusionWeights {
    pub fn new(values: [f32; SEGMENT_COUNT]) -> Result<Self, FusionError> {
        if let Some(bad) = values.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(FusionError::InvalidWeights(format!("weight {bad} is negative or not finite")));
        }
        if values.iter().all(|&w| w == 0.0) {
            return Err(FusionError::InvalidWeights("all weights are zero".into()));
        }
        Ok(Self(values))
    }

    pub fn ones() -> Self {
        Self([1.0; SEGMENT_COUNT])
    }

    pub fn get(&self, kind: SegmentKind) -> f32 {
        self.0[kind.index()]
    }

    pub fn as_array(&self) -> &[f32; SEGMENT_COUNT] {
        &self.0
    }

    pub fn raw_sum(&self) -> f64 {
        self.0.iter().map(|&w| w as f64).sum()
    }

    /// Sum of the weights of the segments in `mask`.
    pub fn mass(&self, mask: PresenceMask) -> f64 {
        let mut bits = mask.bits();
        let mut total = 0.0;
        while bits != 0 {
            let i = bits.trailing_zeros() as usize;
            total += self.0[i] as f64;
            bits &= bits - 1;
        }
        total
    }

    pub fn scaled(&self, factor: f32) -> Result<Self, FusionError> {
        Self::new(self.0.map(|w| w * factor))
    }

    /// Zeroes every weight outside `segments`.
    pub fn restricted_to<I>(&self, segments: I) -> Result<Self, FusionError>
    where
        I: IntoIterator<Item = SegmentKind>,
    {
        let keep = PresenceMask::from_segments(segments);
        let mut out = [0.0; SEGMENT_COUNT];
        for kind in keep.iter() {
            out[kind.index()] = self.get(kind);
        }
        Self::new(out)
    }
}

/// Face 12.5, each iris 6.25, each thumb and index finger 2.3, every other
/// finger 1.0.
pub fn default_weights() -> FusionWeights {
    let mut w = [0f32; SEGMENT_COUNT];
    for kind in SegmentKind::ALL {
        w[kind.index()] = match kind {
            SegmentKind::Finger(p) if p.is_thumb_or_index() => 2.3,
            SegmentKind::Finger(_) => 1.0,
            SegmentKind::Face => 12.5,
            SegmentKind::IrisLeft | SegmentKind::IrisRight => 6.25,
        };
    }
    FusionWeights(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusedScore {
    pub value: f32,
    /// Raw inner product per canonical segment; 0 where either side is absent.
    pub per_segment: [f32; SEGMENT_COUNT],
    pub effective_weight_sum: f32,
}

/// Inner product accumulated in f64 over eight independent lanes. The lane
/// layout is fixed, so the result is deterministic and symmetric in `a`, `b`.
pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut lanes = [0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in ca.by_ref().zip(cb.by_ref()) {
        for i in 0..8 {
            lanes[i] += x[i] as f64 * y[i] as f64;
        }
    }
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum();
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
}

pub fn fused_score(
    probe: &MultiBiometricTemplate,
    gallery: &MultiBiometricTemplate,
    weights: &FusionWeights,
) -> Result<FusedScore, FusionError> {
    fused_score_parts(probe.vector(), probe.presence(), gallery.vector(), gallery.presence(), weights)
}

/// [`fused_score`] over raw template vectors and masks; used where gallery
/// rows live in a shard matrix rather than as templates.
pub(crate) fn fused_score_parts(
    probe: &[f32],
    probe_presence: PresenceMask,
    gallery: &[f32],
    gallery_presence: PresenceMask,
    weights: &FusionWeights,
) -> Result<FusedScore, FusionError> {
    let common = probe_presence.intersection(gallery_presence);
    fuse_segment_dots(&segment_dots(probe, gallery, common), common, weights)
}

/// Per-segment inner products over `common`; zero elsewhere.
pub(crate) fn segment_dots(probe: &[f32], gallery: &[f32], common: PresenceMask) -> [f64; SEGMENT_COUNT] {
    let mut dots = [0f64; SEGMENT_COUNT];
    for kind in common.iter() {
        let range = kind.range();
        dots[kind.index()] = dot_f64(&probe[range.clone()], &gallery[range]);
    }
    dots
}

pub(crate) fn fuse_segment_dots(
    dots: &[f64; SEGMENT_COUNT],
    common: PresenceMask,
    weights: &FusionWeights,
) -> Result<FusedScore, FusionError> {
    let mut per_segment = [0f32; SEGMENT_COUNT];
    let mut weighted = 0f64;
    let mut mass = 0f64;
    for kind in common.iter() {
        let dot = dots[kind.index()];
        let w = weights.get(kind) as f64;
        per_segment[kind.index()] = dot as f32;
        weighted += w * dot;
        mass += w;
    }
    if mass <= 0.0 {
        return Err(FusionError::Incomparable);
    }
    Ok(FusedScore {
        value: (weighted / mass).clamp(-1.0, 1.0) as f32,
        per_segment,
        effective_weight_sum: mass as f32,
    })
}

/// Scales each weight by the worse of the two sample qualities.
///
/// The result may be all-zero when no segment has positive quality on both
/// sides; fusing with it then reports [`FusionError::Incomparable`].
pub fn quality_adapted_weights(
    weights: &FusionWeights,
    probe_quality: &QualityVector,
    gallery_quality: &QualityVector,
) -> FusionWeights {
    let mut out = weights.0;
    for (i, w) in out.iter_mut().enumerate() {
        *w *= probe_quality.0[i].min(gallery_quality.0[i]).max(0.0);
    }
    FusionWeights(out)
}

/// Multiplies each probe segment by its weight so that a single inner product
/// with a gallery vector yields the unnormalized weighted sum
/// `Σ_i w_i ⟨q_i, g_i⟩`.
pub fn probe_prescale(probe: &MultiBiometricTemplate, weights: &FusionWeights) -> Vec<f32> {
    let mut out = Vec::with_capacity(TEMPLATE_DIM);
    for kind in SegmentKind::ALL {
        let w = weights.get(kind);
        out.extend(probe.segment(kind).iter().map(|&x| x * w));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Duplicate,
    Unique,
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f32", into = "f32")]
pub struct DecisionThreshold(f32);

impl DecisionThreshold {
    pub fn new(tau: f32) -> Result<Self, FusionError> {
        if (-1.0..=1.0).contains(&tau) {
            Ok(Self(tau))
        } else {
            Err(FusionError::InvalidThreshold(tau))
        }
    }

    pub fn value(self) -> f32 {
        self.0
    }
}

impl TryFrom<f32> for DecisionThreshold {
    type Error = FusionError;

    fn try_from(tau: f32) -> Result<Self, Self::Error> {
        Self::new(tau)
    }
}

impl From<DecisionThreshold> for f32 {
    fn from(t: DecisionThreshold) -> f32 {
        t.0
    }
}

/// Duplicate iff `score.value >= tau` (inclusive boundary).
pub fn decide(score: &FusedScore, tau: DecisionThreshold) -> Decision {
    if score.value >= tau.0 {
        Decision::Duplicate
    } else {
        Decision::Unique
    }
}

/// A named set of fusion weights, e.g. an age-band profile.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightProfile {
    pub name: String,
    pub weights: FusionWeights,
}

#[derive(Serialize, Deserialize)]
struct ProfileFile {
    name: String,
    weights: BTreeMap<String, f32>,
}

impl WeightProfile {
    /// The shipped adult profile.
    pub fn adult() -> Self {
        Self {
            name: "adult".into(),
            weights: default_weights(),
        }
    }

    /// Parses a profile with a `name` and a `[weights]` table holding exactly
    /// one entry per segment name.
    pub fn from_toml_str(text: &str) -> Result<Self, FusionError> {
        let file: ProfileFile = toml::from_str(text).map_err(|e| FusionError::Profile(e.to_string()))?;
        let mut values = [f32::NAN; SEGMENT_COUNT];
        for (key, value) in &file.weights {
            let kind: SegmentKind = key
                .parse()
                .map_err(|_| FusionError::Profile(format!("unknown segment {key:?}")))?;
            values[kind.index()] = *value;
        }
        if let Some(missing) = SegmentKind::ALL.into_iter().find(|k| values[k.index()].is_nan()) {
            return Err(FusionError::Profile(format!("missing weight for {missing}")));
        }
        Ok(Self {
            name: file.name,
            weights: FusionWeights::new(values)?,
        })
    }

    pub fn to_toml_string(&self) -> String {
        let file = ProfileFile {
            name: self.name.clone(),
            weights: SegmentKind::ALL
                .into_iter()
                .map(|k| (k.name().to_owned(), self.weights.get(k)))
                .collect(),
        };
        toml::to_string(&file).expect("profile serializes")
    }

    pub fn load(path: &Path) -> Result<Self, FusionError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}
