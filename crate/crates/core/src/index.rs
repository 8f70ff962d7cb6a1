//! Exact sharded inner-product search over template galleries.
//!
//! A gallery is a list of shards, each a row-major `n × 3456` f32 matrix with
//! id, presence and quality sidecars. A search prescales the probes by the
//! fusion weights, scans every row with a blocked matrix product, keeps the
//! best `scan_k` rows per probe under the presence-renormalized score, merges
//! the per-block lists and finally rescores the survivors with
//! [`fusion::fused_score`](crate::fusion::fused_score).

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{
    self, probe_prescale, quality_adapted_weights, FusedScore, FusionError, FusionWeights,
};
use crate::template::{
    encode_record, MultiBiometricTemplate, PresenceMask, QualityVector, SegmentKind, TemplateError,
    RECORD_LEN, SEGMENT_COUNT, TEMPLATE_DIM,
};

pub const DEFAULT_SHARD_ROWS: usize = 100_000;
pub const DEFAULT_OVERSCAN: usize = 4;
pub const DEFAULT_K: usize = 50;

pub const GALLERY_MAGIC: [u8; 4] = *b"BGAL";
pub const GALLERY_VERSION: u16 = 1;
pub const GALLERY_HEADER_LEN: usize = 24;

/// Gallery rows per parallel work unit.
const UNIT_ROWS: usize = 8192;
/// Probe (or probe × profile) lists held by one scan pass. Larger batches
/// take several passes so that partial top-k lists stay bounded in memory.
const SCAN_SLOTS: usize = 4096;
/// Gallery rows multiplied at once within a unit.
const BLOCK_ROWS: usize = 1024;
/// Probes multiplied against a block at once.
const PROBE_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("shard is full ({capacity} rows)")]
    Capacity { capacity: usize },
    #[error("gallery id {0} is already enrolled")]
    IdConflict(u64),
    #[error("gallery templates need a non-zero subject id")]
    MissingId,
    #[error("unknown gallery id {0}")]
    UnknownId(u64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("gallery file format error: {0}")]
    Format(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Contiguous storage for up to `capacity` templates.
#[derive(Debug, Clone)]
pub struct GalleryShard {
    matrix: Vec<f32>,
    ids: Vec<u64>,
    presence: Vec<PresenceMask>,
    quality: Vec<QualityVector>,
    positions: HashMap<u64, usize>,
    capacity: usize,
}

impl GalleryShard {
    pub fn new(capacity: usize) -> Self {
        Self {
            matrix: Vec::new(),
            ids: Vec::new(),
            presence: Vec::new(),
            quality: Vec::new(),
            positions: HashMap::new(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_full(&self) -> bool {
        self.len() >= self.capacity
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.matrix[index * TEMPLATE_DIM..(index + 1) * TEMPLATE_DIM]
    }

    pub fn presence(&self, index: usize) -> PresenceMask {
        self.presence[index]
    }

    pub fn quality(&self, index: usize) -> &QualityVector {
        &self.quality[index]
    }

    pub fn position(&self, id: u64) -> Option<usize> {
        self.positions.get(&id).copied()
    }

    pub fn template(&self, index: usize) -> MultiBiometricTemplate {
        MultiBiometricTemplate::from_parts(
            self.row(index).to_vec(),
            self.presence[index],
            self.quality[index],
            Some(self.ids[index]),
        )
        .expect("shard rows hold valid templates")
    }

    pub fn reserve(&mut self, additional: usize) {
        let additional = additional.min(self.capacity - self.len());
        self.matrix.reserve_exact(additional * TEMPLATE_DIM);
        self.ids.reserve_exact(additional);
        self.presence.reserve_exact(additional);
        self.quality.reserve_exact(additional);
    }

    /// Appends a template and returns its row index. Only checks uniqueness
    /// within this shard; [`Gallery::insert`] checks the whole gallery.
    pub fn insert(&mut self, template: &MultiBiometricTemplate) -> Result<usize, IndexError> {
        let id = template.subject_id().ok_or(IndexError::MissingId)?;
        if self.is_full() {
            return Err(IndexError::Capacity {
                capacity: self.capacity,
            });
        }
        if self.positions.contains_key(&id) {
            return Err(IndexError::IdConflict(id));
        }
        let row = self.ids.len();
        self.matrix.extend_from_slice(template.vector());
        self.ids.push(id);
        self.presence.push(template.presence());
        self.quality.push(*template.quality());
        self.positions.insert(id, row);
        Ok(row)
    }
}

/// Borrowed view of one gallery row.
#[derive(Debug, Clone, Copy)]
pub struct RowRef<'a> {
    pub id: u64,
    pub vector: &'a [f32],
    pub presence: PresenceMask,
    pub quality: &'a QualityVector,
}

#[derive(Debug, Clone)]
pub struct Gallery {
    shards: Vec<GalleryShard>,
    shard_rows: usize,
    max_rows: Option<usize>,
    pending_reserve: usize,
}

impl Default for Gallery {
    fn default() -> Self {
        Self::new(DEFAULT_SHARD_ROWS)
    }
}

impl Gallery {
    pub fn new(shard_rows: usize) -> Self {
        assert!(shard_rows > 0, "shard size must be positive");
        Self {
            shards: Vec::new(),
            shard_rows,
            max_rows: None,
            pending_reserve: 0,
        }
    }

    /// Caps the total number of rows; inserts beyond it fail with
    /// [`IndexError::Capacity`].
    pub fn with_max_rows(mut self, max_rows: Option<usize>) -> Self {
        self.max_rows = max_rows;
        self
    }

    pub fn len(&self) -> usize {
        self.shards.iter().map(GalleryShard::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shard_rows(&self) -> usize {
        self.shard_rows
    }

    pub fn max_rows(&self) -> Option<usize> {
        self.max_rows
    }

    pub fn shards(&self) -> &[GalleryShard] {
        &self.shards
    }

    pub fn shard_count(&self) -> usize {
        self.shards.len()
    }

    /// Pre-allocates room for `additional` more rows. Shards opened later
    /// draw down the remaining reservation.
    pub fn reserve(&mut self, additional: usize) {
        let room = self.shards.last().map_or(0, |s| s.capacity() - s.len());
        if let Some(last) = self.shards.last_mut() {
            last.reserve(additional.min(room));
        }
        self.pending_reserve = additional.saturating_sub(room);
    }

    pub fn locate(&self, id: u64) -> Option<(usize, usize)> {
        self.shards
            .iter()
            .enumerate()
            .find_map(|(s, shard)| shard.position(id).map(|r| (s, r)))
    }

    pub fn contains(&self, id: u64) -> bool {
        self.locate(id).is_some()
    }

    pub fn get(&self, id: u64) -> Option<RowRef<'_>> {
        let (s, r) = self.locate(id)?;
        let shard = &self.shards[s];
        Some(RowRef {
            id,
            vector: shard.row(r),
            presence: shard.presence(r),
            quality: shard.quality(r),
        })
    }

    pub fn template(&self, id: u64) -> Option<MultiBiometricTemplate> {
        self.locate(id).map(|(s, r)| self.shards[s].template(r))
    }

    /// Rows in global (insertion) order.
    pub fn rows(&self) -> impl Iterator<Item = RowRef<'_>> {
        self.shards.iter().flat_map(|shard| {
            (0..shard.len()).map(move |r| RowRef {
                id: shard.ids[r],
                vector: shard.row(r),
                presence: shard.presence[r],
                quality: &shard.quality[r],
            })
        })
    }

    /// Appends a template, opening a new shard when the last one is full.
    /// Returns `(shard, row)`.
    pub fn insert(&mut self, template: &MultiBiometricTemplate) -> Result<(usize, usize), IndexError> {
        let id = template.subject_id().ok_or(IndexError::MissingId)?;
        if let Some(max) = self.max_rows {
            if self.len() >= max {
                return Err(IndexError::Capacity { capacity: max });
            }
        }
        if self.contains(id) {
            return Err(IndexError::IdConflict(id));
        }
        if self.shards.last().is_none_or(GalleryShard::is_full) {
            let mut shard = GalleryShard::new(self.shard_rows);
            let take = self.pending_reserve.min(self.shard_rows);
            shard.reserve(take);
            self.pending_reserve -= take;
            self.shards.push(shard);
        }
        let s = self.shards.len() - 1;
        let r = self.shards[s].insert(template)?;
        Ok((s, r))
    }

    /// Full search pipeline: prescale, scan, merge, rescore, truncate to `k`.
    pub fn search(
        &self,
        probes: &[MultiBiometricTemplate],
        weights: &FusionWeights,
        params: &SearchParams,
    ) -> Result<Vec<CandidateList>, IndexError> {
        params.validate()?;
        let mut out = Vec::with_capacity(probes.len());
        for group in probes.chunks(SCAN_SLOTS) {
            out.extend(self.search_group(group, weights, params)?);
        }
        Ok(out)
    }

    fn search_group(
        &self,
        probes: &[MultiBiometricTemplate],
        weights: &FusionWeights,
        params: &SearchParams,
    ) -> Result<Vec<CandidateList>, IndexError> {
        let batch = ProbeBatch::new(probes, weights);
        let scan_k = params.scan_k();
        let units = self.work_units(params.row_limit);
        let lists = scan_units(&units, scan_k, probes.len(), |unit| {
            scan_block(unit.shard, unit.rows.clone(), &batch, scan_k)
        });
        probes
            .iter()
            .zip(lists)
            .map(|(probe, list)| {
                let mut rescored = rescore_candidates(probe, &list, self, weights, params.quality_adaptive)?;
                rescored.truncate(params.k);
                Ok(rescored)
            })
            .collect()
    }

    /// Searches once per weight profile in a single pass over the gallery.
    ///
    /// Per-segment inner products are computed once per pair and recombined
    /// for every profile, so the cost is close to a single search. Result is
    /// indexed `[profile][probe]` and equals calling [`Gallery::search`] with
    /// each profile.
    pub fn search_profiles(
        &self,
        probes: &[MultiBiometricTemplate],
        profiles: &[FusionWeights],
        params: &SearchParams,
    ) -> Result<Vec<Vec<CandidateList>>, IndexError> {
        params.validate()?;
        if profiles.is_empty() {
            return Err(IndexError::InvalidArgument("no weight profiles".into()));
        }
        let mut out: Vec<Vec<CandidateList>> = vec![Vec::with_capacity(probes.len()); profiles.len()];
        for group in probes.chunks((SCAN_SLOTS / profiles.len()).max(1)) {
            for (all, part) in out.iter_mut().zip(self.search_profiles_group(group, profiles, params)?) {
                all.extend(part);
            }
        }
        Ok(out)
    }

    fn search_profiles_group(
        &self,
        probes: &[MultiBiometricTemplate],
        profiles: &[FusionWeights],
        params: &SearchParams,
    ) -> Result<Vec<Vec<CandidateList>>, IndexError> {
        let scan_k = params.scan_k();
        let units = self.work_units(params.row_limit);
        let flat_probes: Vec<f32> = probes.iter().flat_map(|p| p.vector().iter().copied()).collect();
        let presence: Vec<PresenceMask> = probes.iter().map(|p| p.presence()).collect();
        let n_profiles = profiles.len();
        let lists = scan_units(&units, scan_k, probes.len() * n_profiles, |unit| {
            scan_block_profiles(unit.shard, unit.rows.clone(), &flat_probes, &presence, profiles, scan_k)
        });
        let mut per_probe: Vec<Vec<CandidateList>> = (0..probes.len()).map(|_| Vec::with_capacity(n_profiles)).collect();
        for (slot, list) in lists.into_iter().enumerate() {
            per_probe[slot % probes.len()].push(list);
        }
        let mut out: Vec<Vec<CandidateList>> = vec![Vec::with_capacity(probes.len()); n_profiles];
        for (probe, lists) in probes.iter().zip(&per_probe) {
            let rescored = rescore_profiles(probe, lists, self, profiles, params.quality_adaptive)?;
            for (profile, mut list) in rescored.into_iter().enumerate() {
                list.truncate(params.k);
                out[profile].push(list);
            }
        }
        Ok(out)
    }

    fn work_units(&self, row_limit: Option<usize>) -> Vec<WorkUnit<'_>> {
        let mut remaining = row_limit.unwrap_or(usize::MAX);
        let mut units = Vec::new();
        for shard in &self.shards {
            let rows = shard.len().min(remaining);
            remaining -= rows;
            let mut start = 0;
            while start < rows {
                let end = (start + UNIT_ROWS).min(rows);
                units.push(WorkUnit {
                    shard,
                    rows: start..end,
                });
                start = end;
            }
        }
        units
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        save_gallery(self, path)
    }

    pub fn load(path: &Path, shard_rows: usize) -> Result<Self, IndexError> {
        load_gallery(path, shard_rows)
    }
}

struct WorkUnit<'a> {
    shard: &'a GalleryShard,
    rows: std::ops::Range<usize>,
}

/// Runs `scan` over every unit in parallel and merges the per-slot top lists.
fn scan_units<F>(units: &[WorkUnit<'_>], scan_k: usize, slots: usize, scan: F) -> Vec<CandidateList>
where
    F: Fn(&WorkUnit<'_>) -> Vec<TopK> + Sync + Send,
{
    let merged = units
        .par_iter()
        .map(scan)
        .reduce(
            || (0..slots).map(|_| TopK::new(scan_k)).collect(),
            |mut acc, part| {
                for (a, p) in acc.iter_mut().zip(part) {
                    a.absorb(p);
                }
                acc
            },
        );
    merged.into_iter().map(TopK::into_list).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanDepth {
    /// Keep `factor × k` rows per probe before rescoring.
    Overscan(usize),
    /// Keep every comparable row; rescoring then sees the whole gallery.
    Exhaustive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchParams {
    pub k: usize,
    pub scan_depth: ScanDepth,
    /// Rescore with [`quality_adapted_weights`].
    pub quality_adaptive: bool,
    /// Search only the first `n` rows in global order (nested galleries).
    pub row_limit: Option<usize>,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            scan_depth: ScanDepth::Overscan(DEFAULT_OVERSCAN),
            quality_adaptive: false,
            row_limit: None,
        }
    }
}

impl SearchParams {
    pub fn with_k(k: usize) -> Self {
        Self {
            k,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), IndexError> {
        if self.k == 0 {
            return Err(IndexError::InvalidArgument("k must be at least 1".into()));
        }
        if self.scan_depth == ScanDepth::Overscan(0) {
            return Err(IndexError::InvalidArgument("overscan factor must be at least 1".into()));
        }
        Ok(())
    }

    fn scan_k(&self) -> usize {
        match self.scan_depth {
            ScanDepth::Overscan(factor) => self.k.saturating_mul(factor),
            ScanDepth::Exhaustive => usize::MAX,
        }
    }
}

/// Probes prepared for scanning: weight-prescaled vectors plus the sidecars
/// needed to renormalize each pair by its common weight mass.
#[derive(Debug, Clone)]
pub struct ProbeBatch {
    prescaled: Vec<f32>,
    presence: Vec<PresenceMask>,
    weights: FusionWeights,
}

impl ProbeBatch {
    pub fn new(probes: &[MultiBiometricTemplate], weights: &FusionWeights) -> Self {
        let mut prescaled = Vec::with_capacity(probes.len() * TEMPLATE_DIM);
        for p in probes {
            prescaled.extend(probe_prescale(p, weights));
        }
        Self {
            prescaled,
            presence: probes.iter().map(|p| p.presence()).collect(),
            weights: *weights,
        }
    }

    pub fn len(&self) -> usize {
        self.presence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.presence.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub gallery_id: u64,
    /// Ranking score: the presence-renormalized scan score, or the fused
    /// score once rescored.
    pub score: f32,
    /// Unnormalized weighted inner product `Σ w_i ⟨q_i, g_i⟩`.
    pub raw_dot: f32,
    /// Full per-segment breakdown, present after rescoring.
    pub fused: Option<FusedScore>,
}

/// Score descending, then gallery id ascending.
pub fn rank_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score.total_cmp(&a.score).then(a.gallery_id.cmp(&b.gallery_id))
}

/// Candidates sorted by [`rank_order`] with unique gallery ids.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CandidateList {
    entries: Vec<Candidate>,
}

impl CandidateList {
    /// Sorts `entries` and drops repeated ids, keeping each id's best entry.
    pub fn from_unsorted(mut entries: Vec<Candidate>) -> Self {
        entries.sort_by(rank_order);
        let mut seen = std::collections::HashSet::with_capacity(entries.len());
        entries.retain(|c| seen.insert(c.gallery_id));
        Self { entries }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Candidate] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn top(&self) -> Option<&Candidate> {
        self.entries.first()
    }

    /// Zero-based rank of `gallery_id`, if listed.
    pub fn rank_of(&self, gallery_id: u64) -> Option<usize> {
        self.entries.iter().position(|c| c.gallery_id == gallery_id)
    }

    pub fn truncate(&mut self, k: usize) {
        self.entries.truncate(k);
    }

    pub fn into_vec(self) -> Vec<Candidate> {
        self.entries
    }
}

/// Scan hit kept by [`TopK`].
#[derive(Debug, Clone, Copy)]
struct Hit {
    score: f32,
    raw_dot: f32,
    id: u64,
}

impl Hit {
    #[inline]
    fn ranks_before(&self, other: &Hit) -> bool {
        self.score > other.score || (self.score == other.score && self.id < other.id)
    }
}

/// Heap entry ordered so that the heap's maximum is the worst-ranked hit.
struct Worst(Hit);

impl PartialEq for Worst {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Worst {}

impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Worst {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.score.total_cmp(&self.0.score).then(self.0.id.cmp(&other.0.id))
    }
}

/// Bounded best-`k` accumulator.
struct TopK {
    k: usize,
    heap: BinaryHeap<Worst>,
    /// Score of the current worst entry once full; `-inf` before.
    floor: f32,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::new(),
            floor: f32::NEG_INFINITY,
        }
    }

    #[inline]
    fn offer(&mut self, hit: Hit) {
        if self.k == 0 || hit.score < self.floor {
            return;
        }
        if self.heap.len() < self.k {
            self.heap.push(Worst(hit));
        } else {
            let mut worst = self.heap.peek_mut().expect("non-empty");
            if !hit.ranks_before(&worst.0) {
                return;
            }
            *worst = Worst(hit);
        }
        if self.heap.len() == self.k {
            self.floor = self.heap.peek().expect("non-empty").0.score;
        }
    }

    fn absorb(&mut self, other: TopK) {
        for entry in other.heap {
            self.offer(entry.0);
        }
    }

    fn into_list(self) -> CandidateList {
        CandidateList::from_unsorted(
            self.heap
                .into_iter()
                .map(|Worst(h)| Candidate {
                    gallery_id: h.id,
                    score: h.score,
                    raw_dot: h.raw_dot,
                    fused: None,
                })
                .collect(),
        )
    }
}

/// `C = A · Bᵀ` where `A` is `m × TEMPLATE_DIM`-strided and `B` is
/// `n × TEMPLATE_DIM`-strided, restricted to `depth` columns.
fn gemm_nt(m: usize, n: usize, depth: usize, a: &[f32], b: &[f32], c: &mut [f32], c_row_stride: usize) {
    assert!(a.len() >= (m - 1) * TEMPLATE_DIM + depth);
    assert!(b.len() >= (n - 1) * TEMPLATE_DIM + depth);
    assert!(c_row_stride >= n && c.len() >= (m - 1) * c_row_stride + n);
    // SAFETY: the asserts above bound every element the kernel touches given
    // the strides passed here.
    unsafe {
        matrixmultiply::sgemm(
            m,
            depth,
            n,
            1.0,
            a.as_ptr(),
            TEMPLATE_DIM as isize,
            1,
            b.as_ptr(),
            1,
            TEMPLATE_DIM as isize,
            0.0,
            c.as_mut_ptr(),
            c_row_stride as isize,
            1,
        );
    }
}

/// Batches up to this size skip the GEMM, whose per-call packing of the
/// gallery block dominates when there are only a few probes.
const DIRECT_MAX_PROBES: usize = 4;

/// `c[p * n + j] = ⟨a_p, b_j⟩` by plain dot products over full templates.
fn dots_direct(m: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    for j in 0..n {
        let row = &b[j * TEMPLATE_DIM..(j + 1) * TEMPLATE_DIM];
        for p in 0..m {
            c[p * n + j] = dot_f32(&a[p * TEMPLATE_DIM..(p + 1) * TEMPLATE_DIM], row);
        }
    }
}

/// Sixteen independent accumulators so the loop vectorizes.
#[inline]
fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 16];
    for (x, y) in a.chunks_exact(16).zip(b.chunks_exact(16)) {
        for i in 0..16 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f32 = a
        .chunks_exact(16)
        .remainder()
        .iter()
        .zip(b.chunks_exact(16).remainder())
        .map(|(x, y)| x * y)
        .sum();
    acc.iter().sum::<f32>() + tail
}

/// Offers every comparable row of one probe's scored block to its list.
/// `raw[j]` is the weighted inner product with row `rows.start + j`.
#[inline]
fn offer_row(
    shard: &GalleryShard,
    rows: &std::ops::Range<usize>,
    raw: &[f32],
    probe_presence: PresenceMask,
    full_mass: f32,
    weights: &FusionWeights,
    list: &mut TopK,
) {
    for (j, &dot) in raw.iter().enumerate() {
        let row = rows.start + j;
        let gm = shard.presence[row];
        let mass = if gm.is_full() {
            full_mass
        } else {
            weights.mass(probe_presence.intersection(gm)) as f32
        };
        if mass <= 0.0 {
            continue;
        }
        let score = dot / mass;
        if score < list.floor {
            continue;
        }
        list.offer(Hit {
            score,
            raw_dot: dot,
            id: shard.ids[row],
        });
    }
}

/// Sub-ranges of at most [`BLOCK_ROWS`] rows.
fn blocks(rows: std::ops::Range<usize>) -> impl Iterator<Item = std::ops::Range<usize>> {
    rows.clone()
        .step_by(BLOCK_ROWS)
        .map(move |start| start..(start + BLOCK_ROWS).min(rows.end))
}

fn scan_block(shard: &GalleryShard, rows: std::ops::Range<usize>, batch: &ProbeBatch, scan_k: usize) -> Vec<TopK> {
    let mut lists: Vec<TopK> = (0..batch.len()).map(|_| TopK::new(scan_k)).collect();
    if batch.is_empty() {
        return lists;
    }
    let full_mass: Vec<f32> = batch.presence.iter().map(|&pm| batch.weights.mass(pm) as f32).collect();
    let mut raw = vec![0f32; PROBE_CHUNK.min(batch.len()) * BLOCK_ROWS];
    for block_rows in blocks(rows) {
        let n = block_rows.len();
        let block = &shard.matrix[block_rows.start * TEMPLATE_DIM..block_rows.end * TEMPLATE_DIM];
        for chunk_start in (0..batch.len()).step_by(PROBE_CHUNK) {
            let m = PROBE_CHUNK.min(batch.len() - chunk_start);
            let a = &batch.prescaled[chunk_start * TEMPLATE_DIM..(chunk_start + m) * TEMPLATE_DIM];
            if m <= DIRECT_MAX_PROBES {
                dots_direct(m, n, a, block, &mut raw[..m * n]);
            } else {
                gemm_nt(m, n, TEMPLATE_DIM, a, block, &mut raw[..m * n], n);
            }
            for p in 0..m {
                let probe = chunk_start + p;
                offer_row(
                    shard,
                    &block_rows,
                    &raw[p * n..(p + 1) * n],
                    batch.presence[probe],
                    full_mass[probe],
                    &batch.weights,
                    &mut lists[probe],
                );
            }
        }
    }
    lists
}

/// Slots are laid out `[profile][probe]`.
fn scan_block_profiles(
    shard: &GalleryShard,
    rows: std::ops::Range<usize>,
    probes: &[f32],
    presence: &[PresenceMask],
    profiles: &[FusionWeights],
    scan_k: usize,
) -> Vec<TopK> {
    let n_probes = presence.len();
    let mut lists: Vec<TopK> = (0..n_probes * profiles.len()).map(|_| TopK::new(scan_k)).collect();
    if n_probes == 0 {
        return lists;
    }
    let chunk = PROBE_CHUNK.min(n_probes);
    // Probe-major: the 13 segment rows of one probe are contiguous.
    let mut segment_dots = vec![0f32; chunk * SEGMENT_COUNT * BLOCK_ROWS];
    let mut combined = vec![0f32; BLOCK_ROWS];
    for block_rows in blocks(rows) {
        let n = block_rows.len();
        let block = &shard.matrix[block_rows.start * TEMPLATE_DIM..block_rows.end * TEMPLATE_DIM];
        for chunk_start in (0..n_probes).step_by(PROBE_CHUNK) {
            let m = PROBE_CHUNK.min(n_probes - chunk_start);
            let a = &probes[chunk_start * TEMPLATE_DIM..(chunk_start + m) * TEMPLATE_DIM];
            for kind in SegmentKind::ALL {
                let off = kind.offset();
                let out = &mut segment_dots[kind.index() * n..];
                gemm_nt(m, n, kind.dim(), &a[off..], &block[off..], out, SEGMENT_COUNT * n);
            }
            for p in 0..m {
                let probe = chunk_start + p;
                let pm = presence[probe];
                for (pi, weights) in profiles.iter().enumerate() {
                    let combined = &mut combined[..n];
                    combined.fill(0.0);
                    for kind in pm.iter() {
                        let w = weights.get(kind);
                        if w == 0.0 {
                            continue;
                        }
                        let dots = &segment_dots[(p * SEGMENT_COUNT + kind.index()) * n..][..n];
                        for (c, &d) in combined.iter_mut().zip(dots) {
                            *c += w * d;
                        }
                    }
                    let full_mass = weights.mass(pm) as f32;
                    offer_row(
                        shard,
                        &block_rows,
                        combined,
                        pm,
                        full_mass,
                        weights,
                        &mut lists[pi * n_probes + probe],
                    );
                }
            }
        }
    }
    lists
}

/// Scans one shard for every probe in `batch`, keeping the best `k` rows per
/// probe by presence-renormalized score. Scores are not yet rescored.
pub fn shard_search_topk(shard: &GalleryShard, batch: &ProbeBatch, k: usize) -> Result<Vec<CandidateList>, IndexError> {
    if k == 0 {
        return Err(IndexError::InvalidArgument("k must be at least 1".into()));
    }
    let lists = scan_block(shard, 0..shard.len(), batch, k);
    Ok(lists.into_iter().map(TopK::into_list).collect())
}

/// Global top `k` of several sorted lists with the same tie-break rule.
pub fn merge_topk(lists: &[CandidateList], k: usize) -> CandidateList {
    let mut merged = CandidateList::from_unsorted(lists.iter().flat_map(|l| l.entries.iter().copied()).collect());
    merged.truncate(k);
    merged
}

/// Replaces scan scores by full fused scores and re-sorts. Candidates that
/// turn out incomparable with the probe are dropped.
pub fn rescore_candidates(
    probe: &MultiBiometricTemplate,
    candidates: &CandidateList,
    gallery: &Gallery,
    weights: &FusionWeights,
    quality_adaptive: bool,
) -> Result<CandidateList, IndexError> {
    let mut out = Vec::with_capacity(candidates.len());
    for c in candidates.entries() {
        let row = gallery.get(c.gallery_id).ok_or(IndexError::UnknownId(c.gallery_id))?;
        let adapted;
        let w = if quality_adaptive {
            adapted = quality_adapted_weights(weights, probe.quality(), row.quality);
            &adapted
        } else {
            weights
        };
        match fusion::fused_score_parts(probe.vector(), probe.presence(), row.vector, row.presence, w) {
            Ok(fused) => out.push(Candidate {
                gallery_id: c.gallery_id,
                score: fused.value,
                raw_dot: c.raw_dot,
                fused: Some(fused),
            }),
            Err(FusionError::Incomparable) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(CandidateList::from_unsorted(out))
}

/// [`rescore_candidates`] for one probe under several profiles, computing the
/// per-segment inner products of each distinct candidate only once.
fn rescore_profiles(
    probe: &MultiBiometricTemplate,
    lists: &[CandidateList],
    gallery: &Gallery,
    profiles: &[FusionWeights],
    quality_adaptive: bool,
) -> Result<Vec<CandidateList>, IndexError> {
    let mut cache: HashMap<u64, ([f64; SEGMENT_COUNT], PresenceMask, QualityVector)> = HashMap::new();
    let mut out = Vec::with_capacity(lists.len());
    for (list, weights) in lists.iter().zip(profiles) {
        let mut rescored = Vec::with_capacity(list.len());
        for c in list.entries() {
            let (dots, common, quality) = match cache.get(&c.gallery_id) {
                Some(hit) => *hit,
                None => {
                    let row = gallery.get(c.gallery_id).ok_or(IndexError::UnknownId(c.gallery_id))?;
                    let common = probe.presence().intersection(row.presence);
                    let entry = (fusion::segment_dots(probe.vector(), row.vector, common), common, *row.quality);
                    cache.insert(c.gallery_id, entry);
                    entry
                }
            };
            let adapted;
            let w = if quality_adaptive {
                adapted = quality_adapted_weights(weights, probe.quality(), &quality);
                &adapted
            } else {
                weights
            };
            match fusion::fuse_segment_dots(&dots, common, w) {
                Ok(fused) => rescored.push(Candidate {
                    gallery_id: c.gallery_id,
                    score: fused.value,
                    raw_dot: c.raw_dot,
                    fused: Some(fused),
                }),
                Err(FusionError::Incomparable) => {}
                Err(e) => return Err(e.into()),
            }
        }
        out.push(CandidateList::from_unsorted(rescored));
    }
    Ok(out)
}

/// Templates of `dim` elements of `bytes_per_element` bytes that fit in
/// `memory_bytes`.
pub fn capacity_estimate(memory_bytes: u64, dim: u64, bytes_per_element: u64) -> u64 {
    assert!(dim > 0 && bytes_per_element > 0, "dimensions must be positive");
    memory_bytes / (dim * bytes_per_element)
}

/// Writes the `BGAL` gallery file: a 24-byte header followed by one template
/// record per row in global order. The header's CRC-32 covers the records.
pub fn save_gallery(gallery: &Gallery, path: &Path) -> Result<(), IndexError> {
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    let mut header = Vec::with_capacity(GALLERY_HEADER_LEN);
    header.extend_from_slice(&GALLERY_MAGIC);
    header.extend_from_slice(&GALLERY_VERSION.to_le_bytes());
    header.extend_from_slice(&0u16.to_le_bytes());
    header.extend_from_slice(&(gallery.len() as u64).to_le_bytes());
    header.extend_from_slice(&(TEMPLATE_DIM as u32).to_le_bytes());
    header.extend_from_slice(&0u32.to_le_bytes());
    out.write_all(&header)?;

    let mut crc = crc32fast::Hasher::new();
    let mut record = Vec::with_capacity(RECORD_LEN);
    for row in gallery.rows() {
        record.clear();
        encode_record(&mut record, row.id, row.presence, row.quality, row.vector);
        crc.update(&record);
        out.write_all(&record)?;
    }
    let mut file = out.into_inner().map_err(|e| e.into_error())?;
    file.seek(SeekFrom::Start(20))?;
    file.write_all(&crc.finalize().to_le_bytes())?;
    file.sync_all()?;
    Ok(())
}

pub fn load_gallery(path: &Path, shard_rows: usize) -> Result<Gallery, IndexError> {
    let file = File::open(path)?;
    let file_len = file.metadata()?.len();
    let mut input = BufReader::with_capacity(1 << 20, file);
    let mut header = [0u8; GALLERY_HEADER_LEN];
    input
        .read_exact(&mut header)
        .map_err(|_| IndexError::Format("file shorter than header".into()))?;
    if header[0..4] != GALLERY_MAGIC {
        return Err(IndexError::Format("bad magic".into()));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != GALLERY_VERSION {
        return Err(IndexError::Format(format!("unsupported version {version}")));
    }
    let n_rows = u64::from_le_bytes(header[8..16].try_into().unwrap());
    let dim = u32::from_le_bytes(header[16..20].try_into().unwrap());
    if dim as usize != TEMPLATE_DIM {
        return Err(IndexError::Format(format!("dimension {dim}, expected {TEMPLATE_DIM}")));
    }
    let expected_crc = u32::from_le_bytes(header[20..24].try_into().unwrap());
    let expected_len = n_rows
        .checked_mul(RECORD_LEN as u64)
        .and_then(|b| b.checked_add(GALLERY_HEADER_LEN as u64));
    if expected_len != Some(file_len) {
        return Err(IndexError::Format(format!(
            "file is {file_len} bytes but header declares {n_rows} rows"
        )));
    }

    let mut gallery = Gallery::new(shard_rows);
    gallery.reserve(n_rows as usize);
    let mut crc = crc32fast::Hasher::new();
    let mut record = vec![0u8; RECORD_LEN];
    for _ in 0..n_rows {
        input.read_exact(&mut record)?;
        crc.update(&record);
        let template = MultiBiometricTemplate::from_bytes(&record).map_err(|e| IndexError::Format(e.to_string()))?;
        gallery.insert(&template).map_err(|e| match e {
            IndexError::MissingId => IndexError::Format("record without subject id".into()),
            IndexError::IdConflict(id) => IndexError::Format(format!("duplicate id {id}")),
            other => other,
        })?;
    }
    if crc.finalize() != expected_crc {
        return Err(IndexError::Format("checksum mismatch".into()));
    }
    Ok(gallery)
}
