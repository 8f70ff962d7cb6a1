//! Acceptance run: one PASS/FAIL line per criterion A1..A9.
//!
//! A3, A4 and A7 share one 100K-row synthetic gallery built from the
//! concentrations calibrated in A2. A8 runs the property-test binaries that
//! `cargo test` built next to this one.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use abis_core::eval::{
    combination_study, compute_fnir, compute_fpir, default_subsets, gallery_size_sweep, identify, threshold_at_fpir,
    tmr_at_fmr, IdentificationResult,
};
use abis_core::fusion::fused_score;
use abis_core::index::{capacity_estimate, Candidate, DEFAULT_K};
use abis_core::synth::{
    calibrate_all, segment_score_samples, CalibrationBudget, Generator, MissingRates, ModalityKappas,
    ModalityTargets, Registry, SynthConfig,
};
use abis_core::template::TEMPLATE_DIM;
use abis_core::{default_weights, CandidateList, Gallery, MultiBiometricTemplate, SearchParams, SegmentKind};

const SEED: u64 = 20_240_601;
const LARGE_GALLERY: usize = 100_000;

struct Check {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Check {
    Check {
        pass,
        detail: detail.into(),
    }
}

/// Runs one criterion, failing it on panic or when it overruns `limit_s`.
fn run(id: &str, limit_s: f64, f: impl FnOnce() -> Check) -> bool {
    eprintln!("{id}: running");
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f));
    let elapsed = start.elapsed().as_secs_f64();
    let (pass, detail) = match outcome {
        Ok(c) => (c.pass && elapsed <= limit_s, c.detail),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    let status = if pass { "PASS" } else { "FAIL" };
    println!("{id} {status} {detail} [{elapsed:.1}s, limit {limit_s:.0}s]");
    pass
}

fn fixed_kappas() -> ModalityKappas {
    ModalityKappas {
        finger: 105.9,
        face: 172.4,
        iris: 152.8,
    }
}

fn generator(kappas: ModalityKappas, missing: MissingRates, seed: u64) -> Generator {
    let config = SynthConfig {
        kappa: Some(kappas),
        missing,
        ..SynthConfig::default()
    };
    Generator::new(config, seed).expect("valid synthesis config")
}

fn templates(gallery: &Gallery) -> Vec<MultiBiometricTemplate> {
    gallery.rows().map(|r| gallery.template(r.id).expect("row resolves")).collect()
}

fn prefix_gallery(rows: &[MultiBiometricTemplate], n: usize, shard_rows: usize) -> Gallery {
    let mut g = Gallery::new(shard_rows);
    g.reserve(n);
    for t in &rows[..n] {
        g.insert(t).expect("insert");
    }
    g
}

/// Top-`k` by exhaustive fused scoring of every comparable row.
fn brute_force(probe: &MultiBiometricTemplate, rows: &[MultiBiometricTemplate], k: usize) -> Vec<(u64, f32)> {
    let weights = default_weights();
    let mut all: Vec<Candidate> = rows
        .iter()
        .filter_map(|g| {
            fused_score(probe, g, &weights).ok().map(|s| Candidate {
                gallery_id: g.subject_id().expect("gallery rows carry ids"),
                score: s.value,
                raw_dot: 0.0,
                fused: None,
            })
        })
        .collect();
    all.sort_by(abis_core::index::rank_order);
    all.truncate(k);
    all.iter().map(|c| (c.gallery_id, c.score)).collect()
}

fn a1_search_exactness() -> Check {
    let gen = generator(
        fixed_kappas(),
        MissingRates {
            face: 0.05,
            iris: 0.05,
            fingers: 0.02,
            finger: 0.05,
        },
        SEED ^ 0xa1,
    );
    let (gallery, registry) = gen.generate_gallery(10_000).expect("gallery");
    let rows = templates(&gallery);
    drop(gallery);
    let sets = gen.generate_probe_sets(&registry, 100, 100, None, 0).expect("probes");
    let probes: Vec<MultiBiometricTemplate> =
        sets.mated.iter().chain(&sets.nonmated).map(|p| p.template.clone()).collect();
    let params = SearchParams::default();
    let (mut lists, mut mismatched, mut max_delta) = (0usize, 0usize, 0f32);
    for n in [1_000, 5_000, 10_000] {
        let oracle: Vec<Vec<(u64, f32)>> = probes.iter().map(|p| brute_force(p, &rows[..n], params.k)).collect();
        // Odd shard sizes put the boundaries at arbitrary rows.
        for shard_rows in [100, 1_000, 137, 997] {
            let g = prefix_gallery(&rows, n, shard_rows);
            let found = g.search(&probes, &default_weights(), &params).expect("search");
            for (list, expect) in found.iter().zip(&oracle) {
                lists += 1;
                let ids: Vec<u64> = list.entries().iter().map(|c| c.gallery_id).collect();
                let expect_ids: Vec<u64> = expect.iter().map(|e| e.0).collect();
                if ids != expect_ids {
                    mismatched += 1;
                    continue;
                }
                for (c, e) in list.entries().iter().zip(expect) {
                    max_delta = max_delta.max((c.score - e.1).abs());
                }
            }
        }
    }
    let pass = mismatched == 0 && max_delta <= 1e-4;
    verdict(
        pass,
        format!("search exactness: {lists} candidate lists, {mismatched} ranking mismatches, max |score diff| {max_delta:.2e} (tol 1e-4)"),
    )
}

fn a2_calibration(kappas: &mut Option<ModalityKappas>) -> Check {
    let targets = ModalityTargets::default();
    let budget = CalibrationBudget::default();
    let (k, _) = calibrate_all(&targets, &budget, SEED).expect("calibration reaches targets");
    *kappas = Some(k);
    let finger: SegmentKind = "finger_7".parse().expect("segment name");
    let mut parts = Vec::new();
    let mut pass = budget.mated >= 100_000 && budget.nonmated >= 1_000_000;
    for (i, (name, kind, target)) in [
        ("face", SegmentKind::Face, targets.face),
        ("iris", SegmentKind::IrisLeft, targets.iris),
        ("finger", finger, targets.finger),
    ]
    .into_iter()
    .enumerate()
    {
        let kappa = match name {
            "face" => k.face,
            "iris" => k.iris,
            _ => k.finger,
        };
        let (mated, nonmated) = segment_score_samples(kind, kappa, 100_000, 1_000_000, SEED + 100 + i as u64);
        let (tmr, _) = tmr_at_fmr(&mated, &nonmated, target.fmr).expect("enough non-mated scores");
        let ok = (tmr - target.tmr).abs() <= 0.005;
        pass &= ok;
        parts.push(format!("{name} TMR {:.2}% (target {:.2}%, kappa {kappa:.1})", 100.0 * tmr, 100.0 * target.tmr));
    }
    verdict(
        pass,
        format!("calibration on fresh samples at FMR 0.01%, tol 0.5pp: {}", parts.join(", ")),
    )
}

struct Population {
    generator: Generator,
    gallery: Gallery,
    registry: Registry,
}

fn build_population(kappas: ModalityKappas) -> Population {
    let start = Instant::now();
    let generator = generator(kappas, MissingRates::default(), SEED);
    let (gallery, registry) = generator.generate_gallery(LARGE_GALLERY).expect("gallery");
    eprintln!("built {LARGE_GALLERY}-row gallery in {:.1}s", start.elapsed().as_secs_f64());
    Population {
        generator,
        gallery,
        registry,
    }
}

fn a3_fusion_ordering(pop: &Population) -> Check {
    let sets = pop.generator.generate_probe_sets(&pop.registry, 5_000, 5_000, None, 3).expect("probes");
    let rows = combination_study(
        &pop.gallery,
        &sets.mated,
        &sets.nonmated,
        &default_subsets(),
        &default_weights(),
        &SearchParams::default(),
        0.001,
    )
    .expect("combination study");
    let fnir: BTreeMap<&str, f64> = rows.iter().map(|r| (r.subset.as_str(), r.fnir)).collect();
    let singles = ["face", "iris", "finger"];
    let pairs = ["face+irides", "fingers+face", "fingers+irides"];
    let min_of = |names: &[&str]| names.iter().map(|n| fnir[n]).fold(f64::INFINITY, f64::min);
    let (all, best_pair, best_single) = (fnir["all"], min_of(&pairs), min_of(&singles));
    let ratio = all / best_single;
    let pass = all < best_pair && best_pair < best_single && fnir["fingers"] < best_single && ratio <= 0.1;
    let table: Vec<String> = rows.iter().map(|r| format!("{}={:.4}", r.subset, r.fnir)).collect();
    verdict(
        pass,
        format!(
            "fusion ordering at FPIR 0.1% ({} mated, {} non-mated): all/best single = {ratio:.4}; FNIR {}",
            sets.mated.len(),
            sets.nonmated.len(),
            table.join(" ")
        ),
    )
}

fn a4_gallery_scaling(pop: &Population) -> Check {
    let weights = default_weights();
    let params = SearchParams::default();
    // The threshold comes from a calibration set disjoint from the
    // evaluation probes.
    let calibration = pop.generator.generate_probe_sets(&pop.registry, 0, 3_000, None, 4).expect("probes");
    let results = identify(&pop.gallery, &calibration.nonmated, &weights, &params).expect("search");
    let tau = threshold_at_fpir(&results, 0.01).expect("threshold");

    let sets = pop.generator.generate_probe_sets(&pop.registry, 1_000, 5_000, Some(1_000), 5).expect("probes");
    let sizes = [1_000, 10_000, LARGE_GALLERY];
    let rows = gallery_size_sweep(&pop.gallery, &sets.mated, &sets.nonmated, &sizes, tau, &weights, &params)
        .expect("sweep");
    let fpir: Vec<f64> = rows.iter().map(|r| r.fpir).collect();
    let fnir: Vec<f64> = rows.iter().map(|r| r.fnir).collect();
    let (first, last) = (&rows[0], &rows[rows.len() - 1]);
    let non_decreasing = fpir.windows(2).all(|w| w[0] <= w[1]);
    let growth = last.fpir >= 3.0 * first.fpir;
    let separated = first.fpir_ci_high < last.fpir_ci_low;
    let fnir_spread = if fnir[0] == 0.0 {
        if fnir.iter().all(|&f| f == 0.0) { 0.0 } else { f64::INFINITY }
    } else {
        fnir.iter().map(|f| (f - fnir[0]).abs() / fnir[0]).fold(0.0, f64::max)
    };
    let pass = non_decreasing && growth && separated && fnir_spread <= 0.2;
    let table: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "n={} FPIR {:.5} [{:.5}, {:.5}] FNIR {:.4}",
                r.gallery_size, r.fpir, r.fpir_ci_low, r.fpir_ci_high, r.fnir
            )
        })
        .collect();
    verdict(
        pass,
        format!(
            "gallery scaling at tau {tau:.4}: {}; FNIR max relative change {:.1}% (tol 20%)",
            table.join("; "),
            100.0 * fnir_spread
        ),
    )
}

fn fixture(n: usize, hits: usize, mated: bool) -> Vec<IdentificationResult> {
    (0..n)
        .map(|i| {
            let mate = 1_000_000 + i as u64;
            let hit = i < hits;
            // Non-mated: a hit is a candidate above threshold. Mated: a hit
            // is a miss, i.e. the mate scores below threshold.
            let score = if hit == mated { 0.05 } else { 0.9 };
            let candidates = CandidateList::from_unsorted(vec![Candidate {
                gallery_id: if mated { mate } else { 1 },
                score,
                raw_dot: score,
                fused: None,
            }]);
            IdentificationResult {
                probe_id: i as u64 + 1,
                candidates,
                mate_id: mated.then_some(mate),
                threshold: None,
            }
        })
        .collect()
}

fn a5_metric_arithmetic() -> Check {
    let tau = 0.5;
    let fpir = compute_fpir(&fixture(34_812, 35, false), tau).expect("fpir");
    let fnir = compute_fnir(&fixture(37_835, 18, true), tau, DEFAULT_K).expect("fnir");
    let (fp_text, fn_text) = (format!("{:.2e}", fpir.value()), format!("{:.2e}", fnir.value()));
    let pass = (fpir.count, fpir.total, fnir.count, fnir.total) == (35, 34_812, 18, 37_835)
        && (fpir.value() - 0.001005).abs() / 0.001005 < 5e-3
        && fn_text == "4.76e-4"
        && (fnir.value() - 4.757e-4).abs() / 4.757e-4 < 5e-3;
    verdict(
        pass,
        format!(
            "metric arithmetic: FPIR {}/{} = {:.6} ({fp_text}), FNIR {}/{} = {:.4e} ({fn_text})",
            fpir.count,
            fpir.total,
            fpir.value(),
            fnir.count,
            fnir.total,
            fnir.value()
        ),
    )
}

fn a6_capacity() -> Check {
    let c = capacity_estimate(80_000_000_000, TEMPLATE_DIM as u64, 4);
    verdict(c == 5_787_037 && c >= 5_000_000, format!("capacity estimate for 80 GB: {c} templates"))
}

fn a7_throughput(pop: &Population) -> Check {
    let sets = pop.generator.generate_probe_sets(&pop.registry, 0, 1_000, None, 7).expect("probes");
    let probes: Vec<MultiBiometricTemplate> = sets.nonmated.into_iter().map(|p| p.template).collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().expect("thread pool");
    let weights = default_weights();
    let params = SearchParams::default();
    let singles = 20;
    let (single_s, batch_s) = pool.install(|| {
        let start = Instant::now();
        for p in &probes[..singles] {
            std::hint::black_box(pop.gallery.search(std::slice::from_ref(p), &weights, &params).expect("search"));
        }
        let single_s = start.elapsed().as_secs_f64();
        let start = Instant::now();
        std::hint::black_box(pop.gallery.search(&probes, &weights, &params).expect("search"));
        (single_s, start.elapsed().as_secs_f64())
    });
    let per_single = single_s / singles as f64;
    let per_batched = batch_s / probes.len() as f64;
    let probes_per_s = probes.len() as f64 / batch_s;
    let speedup = per_single / per_batched;
    let bytes = (pop.gallery.len() * TEMPLATE_DIM * 4) as f64;
    let flops = 2.0 * (pop.gallery.len() * TEMPLATE_DIM) as f64;
    verdict(
        probes_per_s >= 20.0 && speedup >= 5.0,
        format!(
            "throughput on {} rows, 4 threads: batch 1000 {probes_per_s:.1} probes/s ({:.2} GB/s, {:.1} GFLOP/s); \
             batch 1 {:.1} ms/probe ({:.2} GB/s, {:.1} GFLOP/s); per-probe speedup {speedup:.1}x",
            pop.gallery.len(),
            bytes / batch_s / 1e9,
            flops * probes.len() as f64 / batch_s / 1e9,
            1e3 * per_single,
            bytes / per_single / 1e9,
            flops / per_single / 1e9,
        ),
    )
}

/// Newest test executable in `dir` built from the target `name`.
fn sibling_test_binary(dir: &Path, name: &str) -> Option<PathBuf> {
    let prefix = format!("{name}-");
    std::fs::read_dir(dir)
        .ok()?
        .filter_map(Result::ok)
        .filter(|e| {
            let file = e.file_name().to_string_lossy().into_owned();
            file.starts_with(&prefix) && Path::new(&file).extension().is_none()
        })
        .filter_map(|e| Some((e.metadata().ok()?.modified().ok()?, e.path())))
        .max()
        .map(|(_, p)| p)
}

fn a8_invariant_suites() -> Check {
    let exe = std::env::current_exe().expect("own path");
    let dir = exe.parent().expect("deps dir");
    let mut parts = Vec::new();
    let mut pass = true;
    for suite in ["invariants", "dedup_properties"] {
        let Some(bin) = sibling_test_binary(dir, suite) else {
            pass = false;
            parts.push(format!("{suite}: not built (run cargo test --workspace)"));
            continue;
        };
        let out = Command::new(&bin).output().expect("suite runs");
        let stdout = String::from_utf8_lossy(&out.stdout);
        let summary = stdout
            .lines()
            .find(|l| l.starts_with("test result:"))
            .unwrap_or("no summary")
            .trim_start_matches("test result: ")
            .split(';')
            .take(2)
            .collect::<Vec<_>>()
            .join(";");
        pass &= out.status.success();
        parts.push(format!("{suite}: {summary}"));
    }
    verdict(pass, format!("property suites at 1000 cases each: {}", parts.join(", ")))
}

fn abis(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_abis"))
        .args(args)
        .stderr(std::process::Stdio::null())
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn a9_determinism() -> Check {
    let tmp = tempfile::TempDir::new().expect("temp dir");
    let config = tmp.path().join("synth.toml");
    std::fs::write(&config, "[calibration]\nmated = 20000\nnonmated = 200000\n").expect("write config");
    let outputs = [
        "gallery.bgal",
        "probes.bgal",
        "probes_truth.jsonl",
        "registry.jsonl",
        "synth.toml",
        "kappa.json",
        "eval/report.json",
        "eval/det.csv",
        "eval/combination.csv",
    ];
    let mut runs = Vec::new();
    for name in ["first", "second"] {
        let dir = tmp.path().join(name);
        let d = |f: &str| dir.join(f).to_string_lossy().into_owned();
        let ok = abis(&[
            "synth", "--config", &config.to_string_lossy(), "--n", "3000", "--mated", "300", "--nonmated", "600",
            "--seed", "11", "--out", &d(""),
        ]) && abis(&[
            "dedup-eval", "--gallery", &d("gallery.bgal"), "--probes", &d("probes.bgal"), "--all-subsets", "--out",
            &d("eval"),
        ]);
        if !ok {
            return verdict(false, "determinism: synth or dedup-eval failed");
        }
        runs.push(dir);
    }
    let differing: Vec<&str> = outputs
        .iter()
        .copied()
        .filter(|f| std::fs::read(runs[0].join(f)).ok() != std::fs::read(runs[1].join(f)).ok())
        .collect();
    verdict(
        differing.is_empty(),
        format!(
            "determinism: {} synth and dedup-eval outputs compared across two seeded runs, differing: {:?}",
            outputs.len(),
            differing
        ),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut results = Vec::new();
    results.push(run("A1", 60.0, a1_search_exactness));
    let mut kappas = None;
    results.push(run("A2", 600.0, || a2_calibration(&mut kappas)));
    let kappas = kappas.unwrap_or_else(fixed_kappas);
    let pop = build_population(kappas);
    results.push(run("A3", 900.0, || a3_fusion_ordering(&pop)));
    results.push(run("A4", 900.0, || a4_gallery_scaling(&pop)));
    results.push(run("A5", 1.0, a5_metric_arithmetic));
    results.push(run("A6", 1.0, a6_capacity));
    results.push(run("A7", 300.0, || a7_throughput(&pop)));
    drop(pop);
    results.push(run("A8", 600.0, a8_invariant_suites));
    results.push(run("A9", 300.0, a9_determinism));
    let passed = results.iter().filter(|&&p| p).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.0}s",
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
