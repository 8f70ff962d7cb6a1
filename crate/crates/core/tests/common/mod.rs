#![allow(dead_code)]

use std::collections::BTreeMap;

use abis_core::fusion::fused_score;
use abis_core::template::assemble_template;
use abis_core::{FusionWeights, Gallery, MultiBiometricTemplate, PresenceMask, SegmentKind};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Random template with the given presence; each present segment is an
/// independent uniform direction.
pub fn random_template(rng: &mut impl Rng, id: Option<u64>, presence: PresenceMask) -> MultiBiometricTemplate {
    let segments: BTreeMap<_, _> = presence.iter().map(|k| (k, gaussian(rng, k.dim()))).collect();
    let quality: BTreeMap<_, _> = presence.iter().map(|k| (k, rng.random_range(0.05f32..1.0))).collect();
    assemble_template(&segments, &quality).unwrap().with_subject_id(id)
}

/// Non-empty mask: full most of the time, otherwise a random subset.
pub fn random_presence(rng: &mut impl Rng) -> PresenceMask {
    if rng.random_bool(0.6) {
        return PresenceMask::full();
    }
    loop {
        let bits = rng.random_range(1..=PresenceMask::FULL_BITS);
        if let Some(mask) = PresenceMask::from_bits(bits) {
            return mask;
        }
    }
}

/// A template near `base`: every segment of `base` present in `presence`
/// is mixed with fresh noise.
pub fn noisy_copy(
    rng: &mut impl Rng,
    base: &MultiBiometricTemplate,
    id: Option<u64>,
    presence: PresenceMask,
    noise: f32,
) -> MultiBiometricTemplate {
    let mut segments = BTreeMap::new();
    for kind in presence.iter() {
        let v: Vec<f32> = if base.presence().contains(kind) {
            base.segment(kind)
                .iter()
                .map(|&x| x + noise * rng.sample::<f32, _>(StandardNormal) / (kind.dim() as f32).sqrt())
                .collect()
        } else {
            gaussian(rng, kind.dim())
        };
        segments.insert(kind, v);
    }
    assemble_template(&segments, &BTreeMap::new()).unwrap().with_subject_id(id)
}

pub fn build_gallery(templates: &[MultiBiometricTemplate], shard_rows: usize) -> Gallery {
    let mut g = Gallery::new(shard_rows);
    for t in templates {
        g.insert(t).unwrap();
    }
    g
}

/// All-pairs fused scores, ranked score-descending then id-ascending.
pub fn brute_force(
    probe: &MultiBiometricTemplate,
    gallery: &[MultiBiometricTemplate],
    weights: &FusionWeights,
    k: usize,
) -> Vec<(u64, f32)> {
    let mut all: Vec<(u64, f32)> = gallery
        .iter()
        .filter_map(|g| fused_score(probe, g, weights).ok().map(|s| (g.subject_id().unwrap(), s.value)))
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

pub fn segments_of(names: &[&str]) -> Vec<SegmentKind> {
    names.iter().map(|n| n.parse().unwrap()).collect()
}

/// [`random_template`] with a [`random_presence`] mask.
pub fn random_row(rng: &mut impl Rng, id: Option<u64>) -> MultiBiometricTemplate {
    let presence = random_presence(rng);
    random_template(rng, id, presence)
}

/// [`noisy_copy`] with a [`random_presence`] mask.
pub fn noisy_row(rng: &mut impl Rng, base: &MultiBiometricTemplate, id: Option<u64>, noise: f32) -> MultiBiometricTemplate {
    let presence = random_presence(rng);
    noisy_copy(rng, base, id, presence, noise)
}
