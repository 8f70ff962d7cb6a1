use abis_core::eval::tmr_at_fmr;
use abis_core::fusion::fused_score;
use abis_core::index::save_gallery;
use abis_core::synth::*;
use abis_core::template::{Modality, FACE_DIM, FINGER_DIM};
use abis_core::{default_weights, PresenceMask, SegmentKind};

fn fixed_kappas() -> ModalityKappas {
    ModalityKappas {
        finger: 105.9,
        face: 172.4,
        iris: 152.8,
    }
}

fn fixed_config() -> SynthConfig {
    SynthConfig {
        kappa: Some(fixed_kappas()),
        ..SynthConfig::default()
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn default_identity_has_thirteen_unit_directions() {
    let id = sample_identity(&mut stream_rng(1, 0, 0), &SynthConfig::default());
    assert!(id.presence.is_full());
    for kind in SegmentKind::ALL {
        let d = id.direction(kind).unwrap();
        assert_eq!(d.len(), kind.dim());
        assert!((dot(d, d) - 1.0).abs() < 1e-5);
        let q = id.base_quality.get(kind);
        assert!(q > 0.0 && q <= 1.0);
    }
}

#[test]
fn missing_iris_rate_one_drops_both_irides() {
    let mut config = SynthConfig::default();
    config.missing.iris = 1.0;
    for i in 0..50 {
        let id = sample_identity(&mut stream_rng(2, 0, i), &config);
        assert!(!id.presence.contains(SegmentKind::IrisLeft));
        assert!(!id.presence.contains(SegmentKind::IrisRight));
        assert_eq!(id.presence.count(), 11);
        assert_eq!(id.base_quality.get(SegmentKind::IrisLeft), 0.0);
    }
}

#[test]
fn finger_qualities_are_correlated_within_identity() {
    let config = SynthConfig::default();
    let mut thumbs = Vec::new();
    let mut littles = Vec::new();
    for i in 0..10_000 {
        let id = sample_identity(&mut stream_rng(3, 0, i), &config);
        thumbs.push(id.base_quality.0[0] as f64);
        littles.push(id.base_quality.0[9] as f64);
    }
    let r = pearson(&thumbs, &littles);
    assert!(r >= 0.6, "finger quality correlation {r}");
}

#[test]
fn huge_kappa_reproduces_latent_direction() {
    let id = sample_identity(&mut stream_rng(4, 0, 0), &SynthConfig::default());
    let k = ModalityKappas {
        finger: 1e12,
        face: 1e12,
        iris: 1e12,
    };
    let obs = sample_observation(&id, &k, QualityDraw::Fixed(1.0), &mut stream_rng(4, 1, 0));
    for kind in SegmentKind::ALL {
        assert!(dot(obs.segment(kind), id.direction(kind).unwrap()) > 1.0 - 1e-3);
    }
}

#[test]
fn observations_are_unit_norm_and_carry_quality() {
    let config = fixed_config();
    for i in 0..20 {
        let id = sample_identity(&mut stream_rng(5, 0, i), &config);
        let obs = sample_observation(
            &id,
            &fixed_kappas(),
            QualityDraw::Jittered { sd: 0.05, floor: 0.01 },
            &mut stream_rng(5, 1, i),
        );
        for kind in obs.presence().iter() {
            let s = obs.segment(kind);
            assert!((dot(s, s) - 1.0).abs() < 1e-5);
            assert!(obs.quality().get(kind) >= 0.01);
        }
    }
}

fn mean_mated_face_cosine(quality: f32, n: u64) -> f64 {
    let config = fixed_config();
    let mut total = 0.0;
    for i in 0..n {
        let id = sample_identity(&mut stream_rng(6, 0, i), &config);
        let mut rng = stream_rng(6, 1, i);
        let a = sample_observation(&id, &fixed_kappas(), QualityDraw::Fixed(quality), &mut rng);
        let b = sample_observation(&id, &fixed_kappas(), QualityDraw::Fixed(quality), &mut rng);
        total += dot(a.segment(SegmentKind::Face), b.segment(SegmentKind::Face));
    }
    total / n as f64
}

#[test]
fn lower_quality_lowers_mated_scores() {
    let low = mean_mated_face_cosine(0.1, 400);
    let high = mean_mated_face_cosine(1.0, 400);
    assert!(low < high, "{low} vs {high}");
}

#[test]
fn mated_and_nonmated_face_scores_separate() {
    let mated = mean_mated_face_cosine(1.0, 300);
    let config = fixed_config();
    let mut nonmated = 0.0;
    for i in 0..300 {
        let a = sample_identity(&mut stream_rng(7, 0, i), &config);
        let b = sample_identity(&mut stream_rng(7, 0, i + 1000), &config);
        nonmated += dot(a.direction(SegmentKind::Face).unwrap(), b.direction(SegmentKind::Face).unwrap()).abs();
    }
    nonmated /= 300.0;
    assert!(mated > 5.0 * nonmated && nonmated < 0.06, "mated {mated}, |nonmated| {nonmated}");
}

#[test]
fn calibration_hits_target_and_is_reproducible() {
    let target = OperatingTarget { tmr: 0.97, fmr: 1e-4 };
    let budget = CalibrationBudget::default();
    let a = calibrate_noise(FINGER_DIM, target, &budget, &mut stream_rng(8, 0, 0)).unwrap();
    let b = calibrate_noise(FINGER_DIM, target, &budget, &mut stream_rng(8, 0, 0)).unwrap();
    assert_eq!(a, b);
    assert!(a.kappa > 0.0);
    assert!((a.achieved_tmr - 0.97).abs() < 0.005);

    // Fresh full-vector samples at the calibrated concentration.
    let (mated, nonmated) = segment_score_samples(SegmentKind::Finger(abis_core::template::FingerPosition::LEFT_INDEX), a.kappa, 20_000, 200_000, 99);
    let (tmr, _) = tmr_at_fmr(&mated, &nonmated, 1e-4).unwrap();
    assert!((tmr - 0.97).abs() < 0.01, "fresh tmr {tmr}");
}

#[test]
fn more_demanding_targets_need_more_concentration() {
    let budget = CalibrationBudget {
        mated: 50_000,
        nonmated: 200_000,
    };
    let lo = calibrate_noise(FACE_DIM, OperatingTarget { tmr: 0.9, fmr: 1e-4 }, &budget, &mut stream_rng(9, 0, 0)).unwrap();
    let hi = calibrate_noise(FACE_DIM, OperatingTarget { tmr: 0.995, fmr: 1e-4 }, &budget, &mut stream_rng(9, 0, 0)).unwrap();
    assert!(hi.kappa > lo.kappa);
}

#[test]
fn unreachable_and_invalid_targets_fail() {
    let budget = CalibrationBudget {
        mated: 10_000,
        nonmated: 100_000,
    };
    let perfect = calibrate_noise(FACE_DIM, OperatingTarget { tmr: 1.0, fmr: 1e-4 }, &budget, &mut stream_rng(10, 0, 0));
    assert!(matches!(perfect, Err(SynthError::Calibration { .. })));
    let inverted = calibrate_noise(FACE_DIM, OperatingTarget { tmr: 0.1, fmr: 0.2 }, &budget, &mut stream_rng(10, 0, 0));
    assert!(matches!(inverted, Err(SynthError::InvalidArgument(_))));
    let starved = CalibrationBudget {
        mated: 10,
        nonmated: 100,
    };
    let unresolved = calibrate_noise(FACE_DIM, OperatingTarget { tmr: 0.9, fmr: 1e-4 }, &starved, &mut stream_rng(10, 0, 0));
    assert!(matches!(unresolved, Err(SynthError::Eval(_))));
}

#[test]
fn gallery_generation_is_deterministic_and_complete() {
    let gen = Generator::new(fixed_config(), 11).unwrap();
    let (g1, reg1) = gen.generate_gallery(1000).unwrap();
    let (g2, reg2) = Generator::new(fixed_config(), 11).unwrap().generate_gallery(1000).unwrap();
    assert_eq!(g1.len(), 1000);
    assert_eq!(reg1.len(), 1000);
    assert_eq!(reg1, reg2);
    let ids: std::collections::HashSet<u64> = g1.rows().map(|r| r.id).collect();
    assert_eq!(ids.len(), 1000);

    let dir = tempfile::tempdir().unwrap();
    save_gallery(&g1, &dir.path().join("a")).unwrap();
    save_gallery(&g2, &dir.path().join("b")).unwrap();
    assert_eq!(std::fs::read(dir.path().join("a")).unwrap(), std::fs::read(dir.path().join("b")).unwrap());

    let other = Generator::new(fixed_config(), 12).unwrap().generate_gallery(10).unwrap().0;
    assert_ne!(other.template(1), g1.template(1));
}

#[test]
fn generation_does_not_depend_on_thread_count() {
    let gen = Generator::new(fixed_config(), 13).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| gen.generate_gallery(300).unwrap().0)
    };
    let a = run(1);
    let b = run(3);
    for (x, y) in a.rows().zip(b.rows()) {
        assert_eq!(x.vector, y.vector);
        assert_eq!(x.quality, y.quality);
    }
}

#[test]
fn probe_sets_respect_registry_membership() {
    let gen = Generator::new(fixed_config(), 14).unwrap();
    let (g, registry) = gen.generate_gallery(1000).unwrap();
    let sets = gen.generate_probe_sets(&registry, 500, 500, None, 1).unwrap();
    assert_eq!(sets.mated.len(), 500);
    assert_eq!(sets.nonmated.len(), 500);
    let enrolled: std::collections::HashSet<u64> = registry.iter().map(|e| e.identity).collect();
    for t in &sets.truth {
        match t.mate_id {
            Some(id) => {
                assert!(enrolled.contains(&t.identity));
                assert_eq!(registry[(id - 1) as usize].identity, t.identity);
            }
            None => assert!(!enrolled.contains(&t.identity)),
        }
    }
    let mates: std::collections::HashSet<u64> = sets.mated.iter().map(|p| p.mate_id.unwrap()).collect();
    assert_eq!(mates.len(), 500);

    // A fresh capture of an enrolled identity scores far above strangers.
    let w = default_weights();
    let p = &sets.mated[0];
    let mate = g.template(p.mate_id.unwrap()).unwrap();
    let stranger = &sets.nonmated[0].template;
    assert!(fused_score(&p.template, &mate, &w).unwrap().value > 0.15);
    assert!(fused_score(stranger, &mate, &w).unwrap().value.abs() < 0.1);

    assert!(gen.generate_probe_sets(&registry, 1001, 0, None, 1).is_err());
    let pooled = gen.generate_probe_sets(&registry, 100, 0, Some(100), 2).unwrap();
    assert!(pooled.mated.iter().all(|p| p.mate_id.unwrap() <= 100));
    let other_set = gen.generate_probe_sets(&registry, 0, 5, None, 3).unwrap();
    assert_ne!(other_set.nonmated[0].template, sets.nonmated[0].template);
}

#[test]
fn registry_and_probe_files_round_trip() {
    let gen = Generator::new(fixed_config(), 15).unwrap();
    let (_, registry) = gen.generate_gallery(50).unwrap();
    let sets = gen.generate_probe_sets(&registry, 10, 7, None, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_registry(&dir.path().join("r.jsonl"), &registry).unwrap();
    assert_eq!(read_registry(&dir.path().join("r.jsonl")).unwrap(), registry);
    write_probe_truth(&dir.path().join("t.jsonl"), &sets.truth).unwrap();
    let truth = read_probe_truth(&dir.path().join("t.jsonl")).unwrap();
    assert_eq!(truth, sets.truth);
    let all: Vec<_> = sets.mated.iter().chain(&sets.nonmated).collect();
    save_probes(&dir.path().join("p.bgal"), &all).unwrap();
    let (mated, nonmated) = load_probes(&dir.path().join("p.bgal"), &truth).unwrap();
    assert_eq!(mated, sets.mated);
    assert_eq!(nonmated, sets.nonmated);

    std::fs::write(dir.path().join("bad.jsonl"), "{\"gallery_id\": 1}\n").unwrap();
    assert!(matches!(read_registry(&dir.path().join("bad.jsonl")), Err(SynthError::Registry { line: 1, .. })));
}

#[test]
fn config_parses_from_toml_and_rejects_nonsense() {
    let config = SynthConfig::from_toml_str(
        r#"
        gallery_size = 2000
        mated_probes = 100
        [missing]
        iris = 0.02
        [kappa]
        finger = 100.0
        face = 170.0
        iris = 150.0
        "#,
    )
    .unwrap();
    assert_eq!(config.gallery_size, 2000);
    assert_eq!(config.missing.iris, 0.02);
    assert_eq!(config.kappa.unwrap().get(Modality::Face), 170.0);
    assert_eq!(SynthConfig::from_toml_str(&config.to_toml_string()).unwrap(), config);

    assert!(SynthConfig::from_toml_str("gallery_size = 0").is_err());
    assert!(SynthConfig::from_toml_str("bogus = 1").is_err());
    assert!(SynthConfig::from_toml_str("gallery_size = 10\nmated_probes = 11").is_err());
    assert!(SynthConfig::from_toml_str("[missing]\nface = 1.5").is_err());
}

#[test]
fn missing_rates_follow_configuration() {
    let mut config = fixed_config();
    config.missing.face = 0.2;
    let n = 5000;
    let missing = (0..n)
        .filter(|&i| !sample_identity(&mut stream_rng(16, 0, i), &config).presence.contains(SegmentKind::Face))
        .count();
    let rate = missing as f64 / n as f64;
    assert!((rate - 0.2).abs() < 0.02, "{rate}");
    assert!(PresenceMask::full().is_full());
}
