//! Identification and verification metrics.
//!
//! Identification results are summarized per probe by the top score (for
//! FPIR) and the rank and score of the true mate (for FNIR). All rates are
//! exact integer counts over totals; 95% Wilson intervals are attached where
//! a rate is reported.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::FusionWeights;
use crate::index::{CandidateList, Gallery, IndexError, SearchParams};
use crate::template::{MultiBiometricTemplate, SegmentKind};

/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("need at least {needed} non-mated scores to resolve FMR {fmr}, have {have}")]
    Resolution { needed: usize, have: usize, fmr: f64 },
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// A probe with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledProbe {
    pub probe_id: u64,
    /// Gallery id of the true mate; `None` for non-mated probes.
    pub mate_id: Option<u64>,
    pub template: MultiBiometricTemplate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationResult {
    pub probe_id: u64,
    pub candidates: CandidateList,
    pub mate_id: Option<u64>,
    pub threshold: Option<f32>,
}

impl IdentificationResult {
    pub fn top_score(&self) -> Option<f32> {
        self.candidates.top().map(|c| c.score)
    }

    /// Zero-based rank and score of the true mate if it is within the first
    /// `k` candidates.
    pub fn mate_hit(&self, k: usize) -> Option<(usize, f32)> {
        let mate = self.mate_id?;
        let rank = self.candidates.rank_of(mate)?;
        (rank < k).then(|| (rank, self.candidates.entries()[rank].score))
    }
}

/// Searches `probes` and pairs each candidate list with its labels.
pub fn identify(
    gallery: &Gallery,
    probes: &[LabeledProbe],
    weights: &FusionWeights,
    params: &SearchParams,
) -> Result<Vec<IdentificationResult>, EvalError> {
    let templates: Vec<MultiBiometricTemplate> = probes.iter().map(|p| p.template.clone()).collect();
    let lists = gallery.search(&templates, weights, params)?;
    Ok(label(probes.iter(), lists))
}

fn label<'a>(probes: impl Iterator<Item = &'a LabeledProbe>, lists: Vec<CandidateList>) -> Vec<IdentificationResult> {
    probes
        .zip(lists)
        .map(|(p, candidates)| IdentificationResult {
            probe_id: p.probe_id,
            candidates,
            mate_id: p.mate_id,
            threshold: None,
        })
        .collect()
}

/// An error count over a total, e.g. false positives over non-mated searches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rate {
    pub count: u64,
    pub total: u64,
}

impl Rate {
    pub fn new(count: u64, total: u64) -> Self {
        assert!(count <= total, "count exceeds total");
        Self { count, total }
    }

    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.count as f64 / self.total as f64
        }
    }

    pub fn wilson95(&self) -> (f64, f64) {
        wilson_interval(self.count, self.total, Z95)
    }
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(count: u64, total: u64, z: f64) -> (f64, f64) {
    if total == 0 {
        return (0.0, 1.0);
    }
    let n = total as f64;
    let p = count as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    // The bounds are exact at the extremes; rounding would leave a residue.
    let low = if count == 0 { 0.0 } else { (center - half).max(0.0) };
    let high = if count == total { 1.0 } else { (center + half).min(1.0) };
    (low, high)
}

fn is_false_positive(result: &IdentificationResult, tau: f32) -> bool {
    result.top_score().is_some_and(|s| s >= tau)
}

fn is_miss(result: &IdentificationResult, tau: f32, k: usize) -> bool {
    !result.mate_hit(k).is_some_and(|(_, s)| s >= tau)
}

fn check_nonmated(results: &[IdentificationResult]) -> Result<(), EvalError> {
    if results.is_empty() {
        return Err(EvalError::InvalidArgument("no non-mated results".into()));
    }
    if results.iter().any(|r| r.mate_id.is_some()) {
        return Err(EvalError::InvalidArgument("non-mated result carries a mate id".into()));
    }
    Ok(())
}

fn check_mated(results: &[IdentificationResult]) -> Result<(), EvalError> {
    if results.is_empty() {
        return Err(EvalError::InvalidArgument("no mated results".into()));
    }
    if let Some(r) = results.iter().find(|r| r.mate_id.is_none()) {
        return Err(EvalError::InvalidArgument(format!("mated probe {} has no mate label", r.probe_id)));
    }
    Ok(())
}

/// A non-mated search is a false positive iff its top score is `>= tau`.
pub fn compute_fpir(nonmated: &[IdentificationResult], tau: f32) -> Result<Rate, EvalError> {
    check_nonmated(nonmated)?;
    let n_fp = nonmated.iter().filter(|r| is_false_positive(r, tau)).count();
    Ok(Rate::new(n_fp as u64, nonmated.len() as u64))
}

/// A mated search is a miss unless the mate is among the first `k`
/// candidates with score `>= tau`.
pub fn compute_fnir(mated: &[IdentificationResult], tau: f32, k: usize) -> Result<Rate, EvalError> {
    check_mated(mated)?;
    let n_fn = mated.iter().filter(|r| is_miss(r, tau, k)).count();
    Ok(Rate::new(n_fn as u64, mated.len() as u64))
}

/// FNIR counting only rank-1 hits.
pub fn compute_rank1_fnir(mated: &[IdentificationResult], tau: f32) -> Result<Rate, EvalError> {
    compute_fnir(mated, tau, 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f32,
    pub fpir: f64,
    pub fnir: f64,
    pub n_fp: u64,
    pub n_nonmated: u64,
    pub n_fn: u64,
    pub n_mated: u64,
}

impl DetPoint {
    fn new(threshold: f32, fp: Rate, fn_: Rate) -> Self {
        Self {
            threshold,
            fpir: fp.value(),
            fnir: fn_.value(),
            n_fp: fp.count,
            n_nonmated: fp.total,
            n_fn: fn_.count,
            n_mated: fn_.total,
        }
    }
}

/// Sorted per-probe scores from which any threshold's counts follow by
/// binary search.
struct ScoreTable {
    /// Top score of every non-mated search that returned a candidate.
    nonmated_top: Vec<f32>,
    n_nonmated: u64,
    /// Mate score of every mated search with the mate within rank `k`.
    mate_scores: Vec<f32>,
    n_mated: u64,
}

impl ScoreTable {
    fn new(mated: &[IdentificationResult], nonmated: &[IdentificationResult], k: usize) -> Result<Self, EvalError> {
        check_mated(mated)?;
        check_nonmated(nonmated)?;
        let mut nonmated_top: Vec<f32> = nonmated.iter().filter_map(IdentificationResult::top_score).collect();
        let mut mate_scores: Vec<f32> = mated.iter().filter_map(|r| r.mate_hit(k).map(|h| h.1)).collect();
        nonmated_top.sort_by(f32::total_cmp);
        mate_scores.sort_by(f32::total_cmp);
        Ok(Self {
            nonmated_top,
            n_nonmated: nonmated.len() as u64,
            mate_scores,
            n_mated: mated.len() as u64,
        })
    }

    fn at_least(sorted: &[f32], tau: f32) -> u64 {
        (sorted.len() - sorted.partition_point(|&s| s < tau)) as u64
    }

    fn point(&self, tau: f32) -> DetPoint {
        let fp = Self::at_least(&self.nonmated_top, tau);
        let hits = Self::at_least(&self.mate_scores, tau);
        DetPoint::new(tau, Rate::new(fp, self.n_nonmated), Rate::new(self.n_mated - hits, self.n_mated))
    }

    /// Smallest threshold whose FPIR does not exceed `target`.
    fn threshold_at_fpir(&self, target: f64) -> f32 {
        let allowed = (target * self.n_nonmated as f64).floor() as usize;
        let n = self.nonmated_top.len();
        if allowed >= n {
            return f32::NEG_INFINITY;
        }
        // (allowed + 1)-th largest top score; anything above it is allowed.
        self.nonmated_top[n - 1 - allowed].next_up()
    }
}

/// Lowest threshold at which at most `target_fpir` of the non-mated searches
/// return a candidate.
pub fn threshold_at_fpir(nonmated: &[IdentificationResult], target_fpir: f64) -> Result<f32, EvalError> {
    if !(0.0..1.0).contains(&target_fpir) {
        return Err(EvalError::InvalidArgument(format!("target FPIR {target_fpir} outside [0, 1)")));
    }
    check_nonmated(nonmated)?;
    let mut nonmated_top: Vec<f32> = nonmated.iter().filter_map(IdentificationResult::top_score).collect();
    nonmated_top.sort_by(f32::total_cmp);
    let table = ScoreTable {
        nonmated_top,
        n_nonmated: nonmated.len() as u64,
        mate_scores: Vec::new(),
        n_mated: 0,
    };
    Ok(table.threshold_at_fpir(target_fpir))
}

/// One point per threshold, in the order given.
pub fn det_curve(
    mated: &[IdentificationResult],
    nonmated: &[IdentificationResult],
    thresholds: &[f32],
    k: usize,
) -> Result<Vec<DetPoint>, EvalError> {
    let table = ScoreTable::new(mated, nonmated, k)?;
    Ok(thresholds.iter().map(|&t| table.point(t)).collect())
}

/// Every distinct observed score plus one threshold above all of them, in
/// ascending order: the thresholds at which the DET staircase changes.
pub fn observed_thresholds(mated: &[IdentificationResult], nonmated: &[IdentificationResult], k: usize) -> Vec<f32> {
    let mut scores: Vec<f32> = nonmated
        .iter()
        .filter_map(IdentificationResult::top_score)
        .chain(mated.iter().filter_map(|r| r.mate_hit(k).map(|h| h.1)))
        .collect();
    scores.sort_by(f32::total_cmp);
    scores.dedup();
    let top = scores.last().map_or(1.0, |s| s.max(1.0));
    scores.push(top.next_up());
    scores
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub target_fpir: f64,
    pub threshold: f32,
    pub fpir: f64,
    pub fpir_ci95: (f64, f64),
    pub fnir: f64,
    pub fnir_ci95: (f64, f64),
    pub rank1_fnir: f64,
    pub n_fp: u64,
    pub n_nonmated: u64,
    pub n_fn: u64,
    pub n_mated: u64,
}

/// FNIR at the smallest threshold with FPIR `<= target_fpir`, read off the
/// empirical non-mated top-score quantile.
pub fn operating_point(
    mated: &[IdentificationResult],
    nonmated: &[IdentificationResult],
    target_fpir: f64,
    k: usize,
) -> Result<OperatingPoint, EvalError> {
    if !(0.0..1.0).contains(&target_fpir) {
        return Err(EvalError::InvalidArgument(format!("target FPIR {target_fpir} outside [0, 1)")));
    }
    let table = ScoreTable::new(mated, nonmated, k)?;
    let tau = table.threshold_at_fpir(target_fpir);
    Ok(point_at(&table, mated, tau, target_fpir))
}

/// Metrics at a given threshold, with intervals.
pub fn operating_point_at(
    mated: &[IdentificationResult],
    nonmated: &[IdentificationResult],
    tau: f32,
    k: usize,
) -> Result<OperatingPoint, EvalError> {
    let table = ScoreTable::new(mated, nonmated, k)?;
    Ok(point_at(&table, mated, tau, f64::NAN))
}

fn point_at(table: &ScoreTable, mated: &[IdentificationResult], tau: f32, target_fpir: f64) -> OperatingPoint {
    let p = table.point(tau);
    let rank1 = mated.iter().filter(|r| is_miss(r, tau, 1)).count() as u64;
    OperatingPoint {
        target_fpir,
        threshold: tau,
        fpir: p.fpir,
        fpir_ci95: Rate::new(p.n_fp, p.n_nonmated).wilson95(),
        fnir: p.fnir,
        fnir_ci95: Rate::new(p.n_fn, p.n_mated).wilson95(),
        rank1_fnir: Rate::new(rank1, p.n_mated).value(),
        n_fp: p.n_fp,
        n_nonmated: p.n_nonmated,
        n_fn: p.n_fn,
        n_mated: p.n_mated,
    }
}

/// `(allowed + 1)`-th largest non-mated score, where `allowed` is the number
/// of false matches the target FMR permits. Scores strictly above it meet
/// the target.
pub fn fmr_cutoff(nonmated: &[f64], fmr: f64) -> Result<f64, EvalError> {
    if !(fmr > 0.0 && fmr < 1.0) {
        return Err(EvalError::InvalidArgument(format!("FMR {fmr} outside (0, 1)")));
    }
    let needed = (10.0 / fmr).ceil() as usize;
    if nonmated.len() < needed {
        return Err(EvalError::Resolution {
            needed,
            have: nonmated.len(),
            fmr,
        });
    }
    let allowed = (fmr * nonmated.len() as f64).floor() as usize;
    let mut scratch = nonmated.to_vec();
    let (_, nth, _) = scratch.select_nth_unstable_by(allowed, |a, b| b.total_cmp(a));
    Ok(*nth)
}

/// Verification TMR at the smallest observed score whose empirical FMR does
/// not exceed `fmr`. Returns `(tmr, threshold)`.
pub fn tmr_at_fmr(mated: &[f64], nonmated: &[f64], fmr: f64) -> Result<(f64, f64), EvalError> {
    if mated.is_empty() {
        return Err(EvalError::InvalidArgument("no mated scores".into()));
    }
    let cutoff = fmr_cutoff(nonmated, fmr)?;
    let threshold = mated
        .iter()
        .chain(nonmated)
        .copied()
        .filter(|&s| s > cutoff)
        .min_by(f64::total_cmp)
        .unwrap_or(cutoff.next_up());
    let accepted = mated.iter().filter(|&&s| s >= threshold).count();
    Ok((accepted as f64 / mated.len() as f64, threshold))
}

/// A named set of segments whose fusion weights are kept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySubset {
    pub name: String,
    pub segments: Vec<SegmentKind>,
}

impl ModalitySubset {
    /// Parses `+`/`,`-separated parts. Parts are `face`, `irides`, `fingers`,
    /// `iris` (left iris), `finger` (left index finger), `all`, or any
    /// segment name such as `finger_3`.
    pub fn parse(spec: &str) -> Result<Self, EvalError> {
        let mut segments: Vec<SegmentKind> = Vec::new();
        let parts: Vec<&str> = spec.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()).collect();
        if parts.is_empty() {
            return Err(EvalError::InvalidArgument("empty modality subset".into()));
        }
        for part in &parts {
            let add: Vec<SegmentKind> = match *part {
                "face" => vec![SegmentKind::Face],
                "irides" => vec![SegmentKind::IrisLeft, SegmentKind::IrisRight],
                "iris" => vec![SegmentKind::IrisLeft],
                "fingers" => SegmentKind::ALL.iter().copied().filter(|k| k.dim() == crate::template::FINGER_DIM).collect(),
                "finger" => vec!["finger_7".parse().expect("valid segment")],
                "all" => SegmentKind::ALL.to_vec(),
                other => vec![other
                    .parse()
                    .map_err(|_| EvalError::InvalidArgument(format!("unknown modality '{other}'")))?],
            };
            for kind in add {
                if !segments.contains(&kind) {
                    segments.push(kind);
                }
            }
        }
        segments.sort_by_key(|k| k.index());
        Ok(Self {
            name: parts.join("+"),
            segments,
        })
    }

    pub fn weights(&self, base: &FusionWeights) -> Result<FusionWeights, EvalError> {
        base.restricted_to(self.segments.iter().copied())
            .map_err(|e| EvalError::InvalidArgument(format!("subset {}: {e}", self.name)))
    }
}

/// Single modalities, two-modality unions and the full set.
pub fn default_subsets() -> Vec<ModalitySubset> {
    [
        "face",
        "iris",
        "finger",
        "irides",
        "fingers",
        "face+irides",
        "fingers+face",
        "fingers+irides",
        "all",
    ]
    .iter()
    .map(|s| ModalitySubset::parse(s).expect("built-in subsets parse"))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinationRow {
    pub subset: String,
    pub target_fpir: f64,
    pub threshold: f32,
    pub fpir: f64,
    pub fnir: f64,
    pub fnir_ci_low: f64,
    pub fnir_ci_high: f64,
    pub rank1_fnir: f64,
    pub n_fp: u64,
    pub n_nonmated: u64,
    pub n_fn: u64,
    pub n_mated: u64,
}

/// FNIR at `target_fpir` for each subset, fusing with `base` weights zeroed
/// outside the subset. All subsets share one pass over the gallery.
pub fn combination_study(
    gallery: &Gallery,
    mated: &[LabeledProbe],
    nonmated: &[LabeledProbe],
    subsets: &[ModalitySubset],
    base: &FusionWeights,
    params: &SearchParams,
    target_fpir: f64,
) -> Result<Vec<CombinationRow>, EvalError> {
    if subsets.is_empty() {
        return Err(EvalError::InvalidArgument("no subsets".into()));
    }
    let profiles = subsets.iter().map(|s| s.weights(base)).collect::<Result<Vec<_>, _>>()?;
    let probes: Vec<&LabeledProbe> = mated.iter().chain(nonmated).collect();
    let templates: Vec<MultiBiometricTemplate> = probes.iter().map(|p| p.template.clone()).collect();
    let per_profile = gallery.search_profiles(&templates, &profiles, params)?;
    let mut rows = Vec::with_capacity(subsets.len());
    for (subset, lists) in subsets.iter().zip(per_profile) {
        let mut results = label(probes.iter().copied(), lists);
        let nonmated_results = results.split_off(mated.len());
        let op = operating_point(&results, &nonmated_results, target_fpir, params.k)?;
        rows.push(CombinationRow {
            subset: subset.name.clone(),
            target_fpir,
            threshold: op.threshold,
            fpir: op.fpir,
            fnir: op.fnir,
            fnir_ci_low: op.fnir_ci95.0,
            fnir_ci_high: op.fnir_ci95.1,
            rank1_fnir: op.rank1_fnir,
            n_fp: op.n_fp,
            n_nonmated: op.n_nonmated,
            n_fn: op.n_fn,
            n_mated: op.n_mated,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gallery_size: u64,
    pub threshold: f32,
    pub fpir: f64,
    pub fpir_ci_low: f64,
    pub fpir_ci_high: f64,
    pub fnir: f64,
    pub fnir_ci_low: f64,
    pub fnir_ci_high: f64,
    pub n_fp: u64,
    pub n_nonmated: u64,
    pub n_fn: u64,
    pub n_mated: u64,
}

/// Evaluates the same probes against the first `n` gallery rows for each
/// size at a fixed threshold. Only mated probes whose mate lies within the
/// smallest prefix are used, so every row sees the same probes.
pub fn gallery_size_sweep(
    gallery: &Gallery,
    mated: &[LabeledProbe],
    nonmated: &[LabeledProbe],
    sizes: &[usize],
    tau: f32,
    weights: &FusionWeights,
    params: &SearchParams,
) -> Result<Vec<SweepRow>, EvalError> {
    if sizes.is_empty() || sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(EvalError::InvalidArgument("sizes must be non-empty and ascending".into()));
    }
    if sizes[0] == 0 || *sizes.last().unwrap() > gallery.len() {
        return Err(EvalError::InvalidArgument(format!(
            "sizes must lie in 1..={}",
            gallery.len()
        )));
    }
    let prefix_ids: std::collections::HashSet<u64> = gallery.rows().take(sizes[0]).map(|r| r.id).collect();
    let usable: Vec<LabeledProbe> = mated
        .iter()
        .filter(|p| p.mate_id.is_some_and(|id| prefix_ids.contains(&id)))
        .cloned()
        .collect();
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let limited = SearchParams {
            row_limit: Some(n),
            ..*params
        };
        let mated_results = identify(gallery, &usable, weights, &limited)?;
        let nonmated_results = identify(gallery, nonmated, weights, &limited)?;
        let op = operating_point_at(&mated_results, &nonmated_results, tau, params.k)?;
        rows.push(SweepRow {
            gallery_size: n as u64,
            threshold: tau,
            fpir: op.fpir,
            fpir_ci_low: op.fpir_ci95.0,
            fpir_ci_high: op.fpir_ci95.1,
            fnir: op.fnir,
            fnir_ci_low: op.fnir_ci95.0,
            fnir_ci_high: op.fnir_ci95.1,
            n_fp: op.n_fp,
            n_nonmated: op.n_nonmated,
            n_fn: op.n_fn,
            n_mated: op.n_mated,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

/// Writes rows as CSV (header from the row type's field order) or as a
/// pretty-printed JSON array.
pub fn emit_report<T: Serialize>(rows: &[T], path: &Path, format: ReportFormat) -> Result<(), EvalError> {
    let file = BufWriter::new(File::create(path)?);
    match format {
        ReportFormat::Csv => {
            let mut writer = csv::Writer::from_writer(file);
            for row in rows {
                writer.serialize(row)?;
            }
            writer.flush()?;
        }
        ReportFormat::Json => write_json(file, rows)?,
    }
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<W: Write, T: Serialize + ?Sized>(mut out: W, value: &T) -> Result<(), EvalError> {
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}
