//! The de-duplication engine behind the HTTP API.
//!
//! Reads (search, verify, case listing) share the gallery through a
//! read-write lock. Every mutation goes through one writer mutex: an
//! enrollment searches and inserts while holding it, so two captures of one
//! person can never both be auto-enrolled.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use abis_core::eval::{threshold_at_fpir, IdentificationResult};
use abis_core::fusion::{decide, fused_score, FusionError, WeightProfile};
use abis_core::index::load_gallery;
use abis_core::pipeline::{process_enrollment_packet, EnrollmentPacket, ExceptionRecord, PipelineError, Stages};
use abis_core::{Decision, DecisionThreshold, FusionWeights, Gallery, MultiBiometricTemplate, SearchParams};
use chrono::Utc;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::cases::{AdjudicationCase, CandidateView, CaseDecision, CasePage, CaseState, ProbeSummary};
use crate::config::{ServiceConfig, DEFAULT_ADJUDICATION_THRESHOLD};
use crate::error::ServiceError;
use crate::store::{
    decode_template, encode_template, read_jsonl, AuditRecord, CaseEvent, JournalRecord, JsonlLog, StatePaths,
};

pub const MAX_PAGE: usize = 500;
pub const MAX_SEARCH_K: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum EnrollOutcome {
    Enrolled { gallery_id: u64 },
    FlaggedForAdjudication { case_id: u64, top_score: f32 },
    Rejected { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrollResult {
    #[serde(flatten)]
    pub outcome: EnrollOutcome,
    pub exceptions: Vec<ExceptionRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyDecision {
    Match,
    NoMatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyResult {
    pub gallery_id: u64,
    pub score: f32,
    pub threshold: f32,
    pub decision: VerifyDecision,
    pub candidate: CandidateView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub gallery_size: usize,
    pub shard_count: usize,
    pub shard_rows: usize,
    pub weight_profile: String,
    pub adjudication_threshold: f32,
    pub verification_threshold: f32,
    pub enrolled: u64,
    pub flagged: u64,
    pub rejected: u64,
    pub verifications: u64,
    pub searches: u64,
    pub pending_cases: usize,
    pub total_cases: usize,
    /// Probes searched per second of search time, including enrollments.
    pub search_probes_per_second: f64,
    pub uptime_seconds: f64,
}

struct StoredCase {
    case: AdjudicationCase,
    template: MultiBiometricTemplate,
}

struct Writer {
    cases: JsonlLog,
    audit: JsonlLog,
    exceptions: JsonlLog,
    journal: JsonlLog,
    next_id: u64,
    since_snapshot: u64,
}

#[derive(Default)]
struct Counters {
    enrolled: AtomicU64,
    flagged: AtomicU64,
    rejected: AtomicU64,
    verifications: AtomicU64,
    searches: AtomicU64,
    searched_probes: AtomicU64,
    search_nanos: AtomicU64,
}

pub struct DedupEngine {
    gallery: RwLock<Gallery>,
    cases: RwLock<Vec<StoredCase>>,
    writer: Mutex<Writer>,
    stages: Stages,
    profile: WeightProfile,
    adjudication: DecisionThreshold,
    verification: DecisionThreshold,
    candidates: usize,
    snapshot_interval: u64,
    state: Option<StatePaths>,
    counters: Counters,
    started: Instant,
}

impl DedupEngine {
    /// Builds an engine from configuration: loads the weight profile and
    /// gallery, replays persisted state and settles the adjudication
    /// threshold.
    pub fn open(config: &ServiceConfig) -> Result<Self, ServiceError> {
        config.validate()?;
        let profile = match &config.weight_profile {
            Some(path) => WeightProfile::load(path).map_err(|e| match e {
                FusionError::Io(io) => ServiceError::Config(format!("{}: {io}", path.display())),
                other => ServiceError::Config(other.to_string()),
            })?,
            None => WeightProfile::adult(),
        };
        let state = config.state_dir.as_ref().map(StatePaths::new);
        if let Some(s) = &state {
            std::fs::create_dir_all(&s.dir)?;
        }
        let gallery = match (&state, &config.gallery_path) {
            (Some(s), _) if s.snapshot().exists() => load(&s.snapshot(), config.shard_rows)?,
            (_, Some(path)) => {
                if !path.exists() {
                    return Err(ServiceError::Config(format!("gallery file {} does not exist", path.display())));
                }
                load(path, config.shard_rows)?
            }
            _ => Gallery::new(config.shard_rows),
        }
        .with_max_rows(config.max_rows);

        let adjudication = match (config.adjudication_threshold, &config.calibration_probes) {
            (Some(t), _) => t,
            (None, Some(path)) => calibrate_threshold(&gallery, path, &profile.weights, config.flag_rate)?,
            (None, None) => DEFAULT_ADJUDICATION_THRESHOLD,
        };
        let threshold = |t: f32| DecisionThreshold::new(t).map_err(|e| ServiceError::Config(e.to_string()));

        let engine = Self {
            gallery: RwLock::new(gallery),
            cases: RwLock::new(Vec::new()),
            writer: Mutex::new(Writer {
                cases: JsonlLog::memory(),
                audit: JsonlLog::memory(),
                exceptions: JsonlLog::memory(),
                journal: JsonlLog::memory(),
                next_id: 1,
                since_snapshot: 0,
            }),
            stages: Stages::from_config(&config.pipeline),
            profile,
            adjudication: threshold(adjudication)?,
            verification: threshold(config.verification_threshold)?,
            candidates: config.candidates,
            snapshot_interval: config.snapshot_interval.max(1),
            state,
            counters: Counters::default(),
            started: Instant::now(),
        };
        engine.replay()?;
        Ok(engine)
    }

    /// An in-memory engine over `gallery` with the given stages.
    pub fn in_memory(gallery: Gallery, stages: Stages, config: &ServiceConfig) -> Result<Self, ServiceError> {
        let mut engine = Self::open(&ServiceConfig {
            state_dir: None,
            gallery_path: None,
            ..config.clone()
        })?;
        let next_id = gallery.rows().map(|r| r.id).max().unwrap_or(0) + 1;
        engine.gallery = RwLock::new(gallery.with_max_rows(config.max_rows));
        engine.stages = stages;
        engine.writer.get_mut().next_id = next_id;
        Ok(engine)
    }

    fn replay(&self) -> Result<(), ServiceError> {
        let mut gallery = self.gallery.write();
        let mut writer = self.writer.lock();
        if let Some(s) = &self.state {
            for rec in read_jsonl::<JournalRecord>(&s.journal())? {
                if !gallery.contains(rec.gallery_id) {
                    let t = decode_template(&rec.template)
                        .map_err(|e| ServiceError::Storage(format!("enrollment journal: {e}")))?;
                    gallery.insert(&t.with_subject_id(Some(rec.gallery_id)))?;
                }
            }
            let mut cases = self.cases.write();
            for event in read_jsonl::<CaseEvent>(&s.cases())? {
                match event {
                    CaseEvent::Created { case, template } => {
                        if case.case_id != cases.len() as u64 + 1 {
                            return Err(ServiceError::Storage(format!("case log out of order at {}", case.case_id)));
                        }
                        let template = decode_template(&template)
                            .map_err(|e| ServiceError::Storage(format!("case log: {e}")))?;
                        cases.push(StoredCase { case, template });
                    }
                    CaseEvent::Decided { case } => {
                        let slot = case
                            .case_id
                            .checked_sub(1)
                            .and_then(|i| cases.get_mut(i as usize))
                            .ok_or_else(|| ServiceError::Storage(format!("decision for unknown case {}", case.case_id)))?;
                        slot.case = case;
                    }
                }
            }
            writer.cases = JsonlLog::open(&s.cases())?;
            writer.audit = JsonlLog::open(&s.audit())?;
            writer.exceptions = JsonlLog::open(&s.exceptions())?;
            writer.journal = JsonlLog::open(&s.journal())?;
        }
        writer.next_id = gallery.rows().map(|r| r.id).max().unwrap_or(0) + 1;
        let enrolled_by_cases = self.cases.read().iter().filter_map(|c| c.case.enrolled_gallery_id).max();
        if let Some(id) = enrolled_by_cases {
            writer.next_id = writer.next_id.max(id + 1);
        }
        Ok(())
    }

    pub fn weights(&self) -> &FusionWeights {
        &self.profile.weights
    }

    pub fn adjudication_threshold(&self) -> f32 {
        self.adjudication.value()
    }

    pub fn verification_threshold(&self) -> f32 {
        self.verification.value()
    }

    pub fn gallery_size(&self) -> usize {
        self.gallery.read().len()
    }

    /// Runs the pipeline, searches the committed gallery and either inserts
    /// the probe or opens an adjudication case.
    pub fn enroll(&self, packet: &EnrollmentPacket) -> Result<EnrollResult, ServiceError> {
        let processed = process_enrollment_packet(packet, &self.stages);
        let mut writer = self.writer.lock();
        let (template, exceptions) = match processed {
            Ok(ok) => ok,
            Err(PipelineError::Malformed(m)) => return Err(ServiceError::BadRequest(format!("malformed packet: {m}"))),
            Err(e @ (PipelineError::EmptyTemplate { .. } | PipelineError::Stage { .. })) => {
                let exceptions = match &e {
                    PipelineError::EmptyTemplate { exceptions, .. } => exceptions.clone(),
                    _ => Vec::new(),
                };
                for x in &exceptions {
                    writer.exceptions.append(x)?;
                }
                self.counters.rejected.fetch_add(1, Ordering::Relaxed);
                let reason = match e {
                    PipelineError::EmptyTemplate { .. } => "empty_template".to_owned(),
                    other => other.to_string(),
                };
                return Ok(EnrollResult {
                    outcome: EnrollOutcome::Rejected { reason },
                    exceptions,
                });
            }
            Err(e) => return Err(e.into()),
        };
        for x in &exceptions {
            writer.exceptions.append(x)?;
        }

        let candidates = self.search_views(&template, self.candidates)?;
        let top = candidates.first().map(|c| c.score);
        let outcome = match top {
            Some(score) if score >= self.adjudication.value() => {
                let case_id = self.open_case(&mut writer, packet, template, candidates, score)?;
                self.counters.flagged.fetch_add(1, Ordering::Relaxed);
                EnrollOutcome::FlaggedForAdjudication {
                    case_id,
                    top_score: score,
                }
            }
            _ => {
                let gallery_id = self.commit_insert(&mut writer, template)?;
                self.counters.enrolled.fetch_add(1, Ordering::Relaxed);
                EnrollOutcome::Enrolled { gallery_id }
            }
        };
        Ok(EnrollResult { outcome, exceptions })
    }

    fn open_case(
        &self,
        writer: &mut Writer,
        packet: &EnrollmentPacket,
        template: MultiBiometricTemplate,
        candidates: Vec<CandidateView>,
        top_score: f32,
    ) -> Result<u64, ServiceError> {
        let case_id = self.cases.read().len() as u64 + 1;
        let case = AdjudicationCase {
            case_id,
            packet_id: packet.packet_id.clone(),
            probe: ProbeSummary::of(&template),
            candidates,
            top_score,
            threshold: self.adjudication.value(),
            state: CaseState::Pending,
            adjudicator: None,
            linked_gallery_id: None,
            enrolled_gallery_id: None,
            created_at: Utc::now(),
            decided_at: None,
        };
        writer.cases.append(&CaseEvent::Created {
            case: case.clone(),
            template: encode_template(&template),
        })?;
        self.cases.write().push(StoredCase { case, template });
        Ok(case_id)
    }

    /// Inserts under a fresh id; the row becomes visible to searches only
    /// once the write lock is released with the row complete.
    fn commit_insert(&self, writer: &mut Writer, template: MultiBiometricTemplate) -> Result<u64, ServiceError> {
        let id = writer.next_id;
        let template = template.with_subject_id(Some(id));
        self.gallery.write().insert(&template)?;
        writer.next_id += 1;
        writer.journal.append(&JournalRecord {
            gallery_id: id,
            template: encode_template(&template),
        })?;
        writer.since_snapshot += 1;
        if writer.since_snapshot >= self.snapshot_interval {
            self.snapshot_locked(writer)?;
        }
        Ok(id)
    }

    /// Writes the gallery snapshot now. A no-op without a state directory.
    pub fn snapshot(&self) -> Result<(), ServiceError> {
        let mut writer = self.writer.lock();
        self.snapshot_locked(&mut writer)
    }

    fn snapshot_locked(&self, writer: &mut Writer) -> Result<(), ServiceError> {
        let Some(s) = &self.state else {
            return Ok(());
        };
        let target = s.snapshot();
        let tmp = target.with_extension("bgal.tmp");
        self.gallery.read().save(&tmp)?;
        std::fs::rename(&tmp, &target)?;
        writer.since_snapshot = 0;
        Ok(())
    }

    /// 1:1 comparison against one enrolled template.
    pub fn verify(&self, gallery_id: u64, template: &MultiBiometricTemplate) -> Result<VerifyResult, ServiceError> {
        let enrolled = self
            .gallery
            .read()
            .template(gallery_id)
            .ok_or_else(|| ServiceError::NotFound(format!("gallery id {gallery_id} not found")))?;
        let fused = fused_score(template, &enrolled, &self.profile.weights)?;
        self.counters.verifications.fetch_add(1, Ordering::Relaxed);
        let decision = match decide(&fused, self.verification) {
            Decision::Duplicate => VerifyDecision::Match,
            Decision::Unique => VerifyDecision::NoMatch,
        };
        let common = template.presence().intersection(enrolled.presence());
        let candidate = abis_core::index::Candidate {
            gallery_id,
            score: fused.value,
            raw_dot: 0.0,
            fused: Some(fused),
        };
        Ok(VerifyResult {
            gallery_id,
            score: fused.value,
            threshold: self.verification.value(),
            decision,
            candidate: CandidateView::new(&candidate, common, &self.profile.weights),
        })
    }

    /// Top-`k` candidates from the committed gallery.
    pub fn search(&self, template: &MultiBiometricTemplate, k: usize) -> Result<Vec<CandidateView>, ServiceError> {
        if k == 0 || k > MAX_SEARCH_K {
            return Err(ServiceError::BadRequest(format!("k must be in 1..={MAX_SEARCH_K}")));
        }
        self.search_views(template, k)
    }

    fn search_views(&self, template: &MultiBiometricTemplate, k: usize) -> Result<Vec<CandidateView>, ServiceError> {
        let start = Instant::now();
        let gallery = self.gallery.read();
        if gallery.is_empty() {
            return Ok(Vec::new());
        }
        let probe = template.clone().with_subject_id(None);
        let list = gallery
            .search(std::slice::from_ref(&probe), &self.profile.weights, &SearchParams::with_k(k))?
            .pop()
            .unwrap_or_default();
        let views = list
            .entries()
            .iter()
            .map(|c| {
                let row = gallery.get(c.gallery_id).map(|r| r.presence).unwrap_or_default();
                CandidateView::new(c, probe.presence().intersection(row), &self.profile.weights)
            })
            .collect();
        drop(gallery);
        self.counters.searches.fetch_add(1, Ordering::Relaxed);
        self.counters.searched_probes.fetch_add(1, Ordering::Relaxed);
        self.counters
            .search_nanos
            .fetch_add(start.elapsed().as_nanos() as u64, Ordering::Relaxed);
        Ok(views)
    }

    /// Records a decision on a pending case. `Unique` enrolls the held probe;
    /// `Duplicate` links it to `linked` or, by default, the top candidate.
    pub fn adjudicate(
        &self,
        case_id: u64,
        decision: CaseDecision,
        adjudicator: &str,
        linked: Option<u64>,
    ) -> Result<AdjudicationCase, ServiceError> {
        if adjudicator.trim().is_empty() {
            return Err(ServiceError::BadRequest("adjudicator must be non-empty".into()));
        }
        let mut writer = self.writer.lock();
        let (mut case, template) = {
            let cases = self.cases.read();
            let stored = case_index(case_id)
                .and_then(|i| cases.get(i))
                .ok_or_else(|| ServiceError::NotFound(format!("case {case_id} not found")))?;
            if stored.case.state != CaseState::Pending {
                return Err(ServiceError::Conflict(format!(
                    "case {case_id} is already {:?}",
                    stored.case.state
                )));
            }
            (stored.case.clone(), stored.template.clone())
        };
        match decision {
            CaseDecision::Duplicate => {
                let link = match linked {
                    Some(id) if case.candidates.iter().any(|c| c.gallery_id == id) => id,
                    Some(id) => {
                        return Err(ServiceError::BadRequest(format!("gallery id {id} is not a candidate of case {case_id}")))
                    }
                    None => case
                        .candidates
                        .first()
                        .map(|c| c.gallery_id)
                        .ok_or_else(|| ServiceError::BadRequest("case has no candidates to link".into()))?,
                };
                case.linked_gallery_id = Some(link);
            }
            CaseDecision::Unique => {
                case.enrolled_gallery_id = Some(self.commit_insert(&mut writer, template)?);
            }
        }
        case.state = decision.into();
        case.adjudicator = Some(adjudicator.to_owned());
        let now = Utc::now();
        case.decided_at = Some(now);
        writer.cases.append(&CaseEvent::Decided { case: case.clone() })?;
        writer.audit.append(&AuditRecord {
            case_id,
            decision,
            adjudicator: adjudicator.to_owned(),
            timestamp: now,
            linked_gallery_id: case.linked_gallery_id,
            enrolled_gallery_id: case.enrolled_gallery_id,
        })?;
        self.cases.write()[case_id as usize - 1].case = case.clone();
        Ok(case)
    }

    pub fn case(&self, case_id: u64) -> Result<AdjudicationCase, ServiceError> {
        let cases = self.cases.read();
        case_index(case_id)
            .and_then(|i| cases.get(i))
            .map(|c| c.case.clone())
            .ok_or_else(|| ServiceError::NotFound(format!("case {case_id} not found")))
    }

    /// Cases in creation order, optionally filtered by state, starting after
    /// `cursor`.
    pub fn list_cases(
        &self,
        state: Option<CaseState>,
        cursor: Option<&str>,
        limit: usize,
    ) -> Result<CasePage, ServiceError> {
        if limit == 0 || limit > MAX_PAGE {
            return Err(ServiceError::BadRequest(format!("limit must be in 1..={MAX_PAGE}")));
        }
        let after = match cursor {
            None | Some("") => 0,
            Some(c) => c
                .parse::<u64>()
                .map_err(|_| ServiceError::BadRequest(format!("invalid cursor {c:?}")))?,
        };
        let cases = self.cases.read();
        if after as usize > cases.len() {
            return Err(ServiceError::BadRequest(format!("invalid cursor {after}")));
        }
        let mut matching = cases[after as usize..]
            .iter()
            .filter(|c| state.is_none_or(|s| c.case.state == s))
            .map(|c| &c.case);
        let page: Vec<AdjudicationCase> = matching.by_ref().take(limit).cloned().collect();
        let more = matching.next().is_some();
        Ok(CasePage {
            next_cursor: if more { page.last().map(|c| c.case_id.to_string()) } else { None },
            cases: page,
        })
    }

    pub fn stats(&self) -> Stats {
        let (gallery_size, shard_count, shard_rows) = {
            let g = self.gallery.read();
            (g.len(), g.shard_count(), g.shard_rows())
        };
        let (pending_cases, total_cases) = {
            let c = self.cases.read();
            (c.iter().filter(|c| c.case.state == CaseState::Pending).count(), c.len())
        };
        let c = &self.counters;
        let nanos = c.search_nanos.load(Ordering::Relaxed);
        let probes = c.searched_probes.load(Ordering::Relaxed);
        Stats {
            gallery_size,
            shard_count,
            shard_rows,
            weight_profile: self.profile.name.clone(),
            adjudication_threshold: self.adjudication.value(),
            verification_threshold: self.verification.value(),
            enrolled: c.enrolled.load(Ordering::Relaxed),
            flagged: c.flagged.load(Ordering::Relaxed),
            rejected: c.rejected.load(Ordering::Relaxed),
            verifications: c.verifications.load(Ordering::Relaxed),
            searches: c.searches.load(Ordering::Relaxed),
            pending_cases,
            total_cases,
            search_probes_per_second: if nanos == 0 { 0.0 } else { probes as f64 / (nanos as f64 * 1e-9) },
            uptime_seconds: self.started.elapsed().as_secs_f64(),
        }
    }

    pub fn state_dir(&self) -> Option<&Path> {
        self.state.as_ref().map(|s| s.dir.as_path())
    }
}

fn case_index(case_id: u64) -> Option<usize> {
    case_id.checked_sub(1).map(|i| i as usize)
}

fn load(path: &Path, shard_rows: usize) -> Result<Gallery, ServiceError> {
    load_gallery(path, shard_rows).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))
}

/// Threshold at which `flag_rate` of the calibration probes would be held.
fn calibrate_threshold(
    gallery: &Gallery,
    probes_path: &PathBuf,
    weights: &FusionWeights,
    flag_rate: f64,
) -> Result<f32, ServiceError> {
    if gallery.is_empty() {
        return Err(ServiceError::Config("threshold calibration needs a non-empty gallery".into()));
    }
    let probes = load(probes_path, gallery.shard_rows())?;
    let templates: Vec<MultiBiometricTemplate> = probes.rows().map(|r| probes.template(r.id).unwrap()).collect();
    if templates.is_empty() {
        return Err(ServiceError::Config("calibration probe file is empty".into()));
    }
    let results: Vec<IdentificationResult> = gallery
        .search(&templates, weights, &SearchParams::with_k(1))?
        .into_iter()
        .enumerate()
        .map(|(i, candidates)| IdentificationResult {
            probe_id: i as u64,
            candidates,
            mate_id: None,
            threshold: None,
        })
        .collect();
    let tau = threshold_at_fpir(&results, flag_rate).map_err(|e| ServiceError::Config(e.to_string()))?;
    Ok(tau.clamp(-1.0, 1.0))
}
