mod common;

use abis_core::fusion::{fused_score, probe_prescale};
use abis_core::index::{
    capacity_estimate, load_gallery, merge_topk, rescore_candidates, save_gallery, shard_search_topk, Candidate,
    GalleryShard, IndexError, ProbeBatch, ScanDepth, GALLERY_HEADER_LEN,
};
use abis_core::template::RECORD_LEN;
use abis_core::{default_weights, CandidateList, Gallery, PresenceMask, SearchParams, SegmentKind};
use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn cand(id: u64, score: f32) -> Candidate {
    Candidate {
        gallery_id: id,
        score,
        raw_dot: score,
        fused: None,
    }
}

#[test]
fn shard_rejects_overflow_duplicates_and_anonymous_rows() {
    let mut r = rng(1);
    let mut shard = GalleryShard::new(2);
    shard.insert(&random_template(&mut r, Some(1), PresenceMask::full())).unwrap();
    assert!(matches!(
        shard.insert(&random_template(&mut r, Some(1), PresenceMask::full())),
        Err(IndexError::IdConflict(1))
    ));
    assert!(matches!(
        shard.insert(&random_template(&mut r, None, PresenceMask::full())),
        Err(IndexError::MissingId)
    ));
    shard.insert(&random_template(&mut r, Some(2), PresenceMask::full())).unwrap();
    assert!(matches!(
        shard.insert(&random_template(&mut r, Some(3), PresenceMask::full())),
        Err(IndexError::Capacity { capacity: 2 })
    ));
}

#[test]
fn gallery_fills_shards_in_order() {
    let mut r = rng(2);
    let templates: Vec<_> = (1..=25).map(|i| random_row(&mut r, Some(i * 10))).collect();
    let mut g = Gallery::new(10);
    g.reserve(25);
    for t in &templates {
        g.insert(t).unwrap();
    }
    assert_eq!(g.len(), 25);
    assert_eq!(g.shard_count(), 3);
    assert_eq!(g.shards()[2].len(), 5);
    let ids: Vec<u64> = g.rows().map(|row| row.id).collect();
    assert_eq!(ids, (1..=25).map(|i| i * 10).collect::<Vec<_>>());
    assert_eq!(g.template(130).unwrap(), templates[12]);
    assert!(matches!(g.insert(&templates[3]), Err(IndexError::IdConflict(40))));

    let mut capped = Gallery::new(10).with_max_rows(Some(1));
    capped.insert(&templates[0]).unwrap();
    assert!(matches!(capped.insert(&templates[1]), Err(IndexError::Capacity { capacity: 1 })));
}

#[test]
fn every_enrolled_template_retrieves_itself_first() {
    let mut r = rng(3);
    let templates: Vec<_> = (1..=300).map(|i| random_row(&mut r, Some(i))).collect();
    let g = build_gallery(&templates, 64);
    let results = g.search(&templates, &default_weights(), &SearchParams::with_k(5)).unwrap();
    for (t, list) in templates.iter().zip(&results) {
        let top = list.top().unwrap();
        assert_eq!(Some(top.gallery_id), t.subject_id());
        assert!((top.score - 1.0).abs() < 1e-5, "self score {}", top.score);
    }
}

#[test]
fn search_matches_brute_force_with_mixed_presence() {
    let mut r = rng(4);
    let gallery: Vec<_> = (1..=1000).map(|i| random_row(&mut r, Some(i))).collect();
    let mut probes = Vec::new();
    for i in 0..40 {
        let p = if i % 2 == 0 {
            let mate = &gallery[i * 17];
            noisy_row(&mut r, mate, None, 0.8)
        } else {
            random_row(&mut r, None)
        };
        probes.push(p);
    }
    let weights = default_weights();
    for shard_rows in [100, 1000, 333] {
        let g = build_gallery(&gallery, shard_rows);
        let results = g.search(&probes, &weights, &SearchParams::with_k(10)).unwrap();
        for (p, list) in probes.iter().zip(&results) {
            let oracle = brute_force(p, &gallery, &weights, 10);
            let got: Vec<u64> = list.entries().iter().map(|c| c.gallery_id).collect();
            let want: Vec<u64> = oracle.iter().map(|c| c.0).collect();
            assert_eq!(got, want, "shard rows {shard_rows}");
            for (c, (_, s)) in list.entries().iter().zip(&oracle) {
                assert!((c.score - s).abs() <= 1e-4);
            }
        }
    }
}

#[test]
fn exhaustive_scan_agrees_with_overscan() {
    let mut r = rng(5);
    let gallery: Vec<_> = (1..=500).map(|i| random_row(&mut r, Some(i))).collect();
    let probes: Vec<_> = (0..10).map(|_| random_row(&mut r, None)).collect();
    let g = build_gallery(&gallery, 128);
    let w = default_weights();
    let a = g.search(&probes, &w, &SearchParams::with_k(20)).unwrap();
    let params = SearchParams {
        scan_depth: ScanDepth::Exhaustive,
        ..SearchParams::with_k(20)
    };
    let b = g.search(&probes, &w, &params).unwrap();
    assert_eq!(a, b);
}

#[test]
fn shard_scan_keeps_the_best_renormalized_rows() {
    let mut r = rng(6);
    let gallery: Vec<_> = (1..=700).map(|i| random_row(&mut r, Some(i))).collect();
    let probes: Vec<_> = (0..12).map(|_| random_row(&mut r, None)).collect();
    let mut shard = GalleryShard::new(1000);
    for t in &gallery {
        shard.insert(t).unwrap();
    }
    let w = default_weights();
    let lists = shard_search_topk(&shard, &ProbeBatch::new(&probes, &w), 15).unwrap();
    for (p, list) in probes.iter().zip(&lists) {
        let oracle = brute_force(p, &gallery, &w, 15);
        assert_eq!(list.len(), 15);
        let floor = oracle.last().unwrap().1;
        for c in list.entries() {
            let exact = fused_score(p, &gallery[c.gallery_id as usize - 1], &w).unwrap().value;
            assert!((c.score - exact).abs() < 1e-4);
            assert!(c.score >= floor - 1e-4);
        }
    }
    assert!(shard_search_topk(&shard, &ProbeBatch::new(&probes, &w), 0).is_err());
}

#[test]
fn scan_raw_dot_is_prescaled_inner_product() {
    let mut r = rng(7);
    let g_t = random_template(&mut r, Some(9), PresenceMask::full());
    let p = random_template(&mut r, None, PresenceMask::full());
    let w = default_weights();
    let mut shard = GalleryShard::new(4);
    shard.insert(&g_t).unwrap();
    let list = shard_search_topk(&shard, &ProbeBatch::new(std::slice::from_ref(&p), &w), 1).unwrap();
    let c = list[0].top().unwrap();
    let expected: f64 = probe_prescale(&p, &w)
        .iter()
        .zip(g_t.vector())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum();
    assert!((c.raw_dot as f64 - expected).abs() < 1e-4);
    assert!((c.score as f64 - expected / 40.2).abs() < 1e-5);
}

#[test]
fn merge_orders_by_score_then_id() {
    let a = CandidateList::from_unsorted(vec![cand(5, 0.9), cand(2, 0.5), cand(7, 0.1)]);
    let b = CandidateList::from_unsorted(vec![cand(3, 0.9), cand(1, 0.5)]);
    let c = CandidateList::empty();
    let merged = merge_topk(&[a, b, c], 4);
    let ids: Vec<u64> = merged.entries().iter().map(|c| c.gallery_id).collect();
    assert_eq!(ids, vec![3, 5, 1, 2]);
    assert!(merge_topk(&[], 3).is_empty());
}

#[test]
fn rescoring_renormalizes_by_common_weight_mass() {
    let mut r = rng(8);
    let full = random_template(&mut r, Some(1), PresenceMask::full());
    let mut no_iris = PresenceMask::full();
    no_iris.remove(SegmentKind::IrisLeft);
    no_iris.remove(SegmentKind::IrisRight);
    let partial = noisy_copy(&mut r, &full, Some(2), no_iris, 0.5);
    let probe = noisy_copy(&mut r, &full, None, PresenceMask::full(), 0.5);
    let g = build_gallery(&[full.clone(), partial.clone()], 10);
    let w = default_weights();
    let list = CandidateList::from_unsorted(vec![cand(1, 0.0), cand(2, 0.0)]);
    let out = rescore_candidates(&probe, &list, &g, &w, false).unwrap();

    let weighted = |t: &abis_core::MultiBiometricTemplate| -> f64 {
        t.presence()
            .iter()
            .map(|k| {
                let dot: f64 = probe.segment(k).iter().zip(t.segment(k)).map(|(&a, &b)| a as f64 * b as f64).sum();
                w.get(k) as f64 * dot
            })
            .sum()
    };
    for c in out.entries() {
        let fused = c.fused.unwrap();
        if c.gallery_id == 1 {
            assert!((fused.effective_weight_sum - 40.2).abs() < 1e-5);
            assert!((c.score as f64 - weighted(&full) / 40.2).abs() < 1e-6);
        } else {
            assert!((fused.effective_weight_sum - 27.7).abs() < 1e-5);
            assert!((c.score as f64 - weighted(&partial) / 27.7).abs() < 1e-6);
            assert_eq!(fused.per_segment[SegmentKind::IrisLeft.index()], 0.0);
        }
    }
    let unknown = CandidateList::from_unsorted(vec![cand(99, 0.0)]);
    assert!(matches!(rescore_candidates(&probe, &unknown, &g, &w, false), Err(IndexError::UnknownId(99))));
}

#[test]
fn incomparable_rows_are_never_returned() {
    let mut r = rng(9);
    let face = PresenceMask::from_segments([SegmentKind::Face]);
    let fingers = PresenceMask::from_segments(segments_of(&["finger_1", "finger_2"]));
    let g = build_gallery(&[random_template(&mut r, Some(1), face), random_template(&mut r, Some(2), fingers)], 10);
    let probe = random_template(&mut r, None, face);
    let res = g.search(&[probe], &default_weights(), &SearchParams::with_k(5)).unwrap();
    let ids: Vec<u64> = res[0].entries().iter().map(|c| c.gallery_id).collect();
    assert_eq!(ids, vec![1]);
}

#[test]
fn capacity_arithmetic() {
    assert_eq!(capacity_estimate(80_000_000_000, 3456, 4), 5_787_037);
    assert_eq!(capacity_estimate(3456 * 4, 3456, 4), 1);
    assert_eq!(capacity_estimate(8_000_000_000, 3456, 4), 578_703);
}

#[test]
fn gallery_file_round_trip_and_corruption() {
    let mut r = rng(10);
    let templates: Vec<_> = (1..=37).map(|i| random_row(&mut r, Some(i))).collect();
    let g = build_gallery(&templates, 10);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.bgal");
    save_gallery(&g, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), GALLERY_HEADER_LEN + 37 * RECORD_LEN);
    assert_eq!(&bytes[..4], b"BGAL");

    let back = load_gallery(&path, 16).unwrap();
    assert_eq!(back.len(), 37);
    assert_eq!(back.shard_count(), 3);
    for t in &templates {
        assert_eq!(&back.template(t.subject_id().unwrap()).unwrap(), t);
    }

    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 0x01;
    std::fs::write(&path, &flipped).unwrap();
    assert!(matches!(load_gallery(&path, 16), Err(IndexError::Format(_))));

    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(load_gallery(&path, 16), Err(IndexError::Format(_))));

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    std::fs::write(&path, &bad_magic).unwrap();
    assert!(matches!(load_gallery(&path, 16), Err(IndexError::Format(_))));
}

#[test]
fn profile_search_equals_separate_searches() {
    let mut r = rng(11);
    let gallery: Vec<_> = (1..=600).map(|i| random_row(&mut r, Some(i))).collect();
    let probes: Vec<_> = (0..20)
        .map(|i| noisy_row(&mut r, &gallery[i * 29], None, 1.0))
        .collect();
    let g = build_gallery(&gallery, 250);
    let w = default_weights();
    let profiles = vec![
        w,
        w.restricted_to([SegmentKind::Face]).unwrap(),
        w.restricted_to(segments_of(&["iris_left", "iris_right", "finger_7"])).unwrap(),
    ];
    for quality_adaptive in [false, true] {
        let params = SearchParams {
            quality_adaptive,
            ..SearchParams::with_k(8)
        };
        let joint = g.search_profiles(&probes, &profiles, &params).unwrap();
        for (profile, lists) in profiles.iter().zip(&joint) {
            let single = g.search(&probes, profile, &params).unwrap();
            // raw_dot comes from differently blocked f32 products; compare the rescored parts.
            let key = |ls: &[CandidateList]| -> Vec<Vec<(u64, Option<abis_core::FusedScore>)>> {
                ls.iter().map(|l| l.entries().iter().map(|c| (c.gallery_id, c.fused)).collect()).collect()
            };
            assert_eq!(key(&single), key(lists));
        }
    }
    assert!(g.search_profiles(&probes, &[], &SearchParams::default()).is_err());
}

#[test]
fn row_limit_searches_a_prefix() {
    let mut r = rng(12);
    let gallery: Vec<_> = (1..=400).map(|i| random_row(&mut r, Some(i))).collect();
    let probes: Vec<_> = (0..10).map(|_| random_row(&mut r, None)).collect();
    let full = build_gallery(&gallery, 90);
    let prefix = build_gallery(&gallery[..230], 90);
    let w = default_weights();
    let limited = SearchParams {
        row_limit: Some(230),
        ..SearchParams::with_k(12)
    };
    assert_eq!(
        full.search(&probes, &w, &limited).unwrap(),
        prefix.search(&probes, &w, &SearchParams::with_k(12)).unwrap()
    );
}

#[test]
fn invalid_search_parameters_are_rejected() {
    let g = Gallery::new(10);
    let w = default_weights();
    assert!(matches!(g.search(&[], &w, &SearchParams::with_k(0)), Err(IndexError::InvalidArgument(_))));
    let params = SearchParams {
        scan_depth: ScanDepth::Overscan(0),
        ..SearchParams::default()
    };
    assert!(g.search(&[], &w, &params).is_err());
    assert!(g.search(&[], &w, &SearchParams::default()).unwrap().is_empty());
}

#[test]
fn large_probe_batches_match_small_ones() {
    let mut r = rng(13);
    let gallery: Vec<_> = (1..=40).map(|i| random_row(&mut r, Some(i))).collect();
    let probes: Vec<_> = (0..4200).map(|i| noisy_row(&mut r, &gallery[i % 40], None, 1.0)).collect();
    let g = build_gallery(&gallery, 16);
    let w = default_weights();
    let params = SearchParams::with_k(3);
    let all = g.search(&probes, &w, &params).unwrap();
    assert_eq!(all.len(), probes.len());
    for i in [0, 4095, 4096, 4199] {
        let one = g.search(&probes[i..i + 1], &w, &params).unwrap();
        let ids = |l: &CandidateList| l.entries().iter().map(|c| c.gallery_id).collect::<Vec<_>>();
        assert_eq!(ids(&all[i]), ids(&one[0]));
    }
    let profiles = vec![w, w.restricted_to([SegmentKind::Face]).unwrap()];
    let joint = g.search_profiles(&probes, &profiles, &params).unwrap();
    for (profile, lists) in profiles.iter().zip(&joint) {
        assert_eq!(lists.len(), probes.len());
        let tail = g.search(&probes[2040..2060], profile, &params).unwrap();
        for (a, b) in lists[2040..2060].iter().zip(&tail) {
            assert_eq!(
                a.entries().iter().map(|c| (c.gallery_id, c.fused)).collect::<Vec<_>>(),
                b.entries().iter().map(|c| (c.gallery_id, c.fused)).collect::<Vec<_>>()
            );
        }
    }
}
