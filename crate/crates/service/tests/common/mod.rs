#![allow(dead_code)]

use std::collections::BTreeMap;

use abis_core::pipeline::{packet_from_template, EnrollmentPacket, StubOperatingPoint};
use abis_core::synth::{Generator, ModalityKappas, SynthConfig};
use abis_core::template::{assemble_template, Modality};
use abis_core::{Gallery, MultiBiometricTemplate, PresenceMask, SegmentKind};
use abis_service::ServiceConfig;
use rand::Rng;
use rand_distr::StandardNormal;

/// Config whose stub PAD never rejects and whose quality estimate is exact.
pub fn permissive_config() -> ServiceConfig {
    let mut config = ServiceConfig::default();
    config.pipeline.quality_noise = 0.0;
    config.pipeline.pad = [Modality::Finger, Modality::Face, Modality::Iris]
        .into_iter()
        .map(|m| (m, StubOperatingPoint { tdr: 0.0, fdr: 0.0 }))
        .collect();
    config
}

pub fn synth_generator(seed: u64) -> Generator {
    let config = SynthConfig {
        kappa: Some(ModalityKappas {
            finger: 105.9,
            face: 172.4,
            iris: 152.8,
        }),
        shard_rows: 500,
        ..SynthConfig::default()
    };
    Generator::new(config, seed).unwrap()
}

pub fn random_template(rng: &mut impl Rng, presence: PresenceMask) -> MultiBiometricTemplate {
    let segments: BTreeMap<_, _> = presence
        .iter()
        .map(|k| (k, (0..k.dim()).map(|_| rng.sample::<f32, _>(StandardNormal)).collect::<Vec<f32>>()))
        .collect();
    assemble_template(&segments, &BTreeMap::new()).unwrap()
}

/// `base` with every segment perturbed by relative noise `noise`.
pub fn perturbed(rng: &mut impl Rng, base: &MultiBiometricTemplate, noise: f32) -> MultiBiometricTemplate {
    let segments: BTreeMap<SegmentKind, Vec<f32>> = base
        .presence()
        .iter()
        .map(|k| {
            let scale = noise / (k.dim() as f32).sqrt();
            let v = base
                .segment(k)
                .iter()
                .map(|&x| x + scale * rng.sample::<f32, _>(StandardNormal))
                .collect();
            (k, v)
        })
        .collect();
    assemble_template(&segments, &BTreeMap::new()).unwrap()
}

pub fn random_gallery(rng: &mut impl Rng, n: usize, shard_rows: usize) -> Gallery {
    let mut g = Gallery::new(shard_rows);
    for id in 1..=n as u64 {
        g.insert(&random_template(rng, PresenceMask::full()).with_subject_id(Some(id)))
            .unwrap();
    }
    g
}

pub fn packet(id: impl Into<String>, template: &MultiBiometricTemplate) -> EnrollmentPacket {
    packet_from_template(id, template)
}
