use std::collections::BTreeMap;

use abis_core::index::Candidate;
use abis_core::template::Modality;
use abis_core::{FusionWeights, MultiBiometricTemplate, PresenceMask, SegmentKind};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseState {
    Pending,
    Duplicate,
    Unique,
}

impl std::str::FromStr for CaseState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pending" => Ok(CaseState::Pending),
            "duplicate" => Ok(CaseState::Duplicate),
            "unique" => Ok(CaseState::Unique),
            other => Err(format!("unknown case state {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseDecision {
    Duplicate,
    Unique,
}

impl From<CaseDecision> for CaseState {
    fn from(d: CaseDecision) -> Self {
        match d {
            CaseDecision::Duplicate => CaseState::Duplicate,
            CaseDecision::Unique => CaseState::Unique,
        }
    }
}

/// Presence and quality of a probe, without its feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub presence: Vec<SegmentKind>,
    pub quality: BTreeMap<SegmentKind, f32>,
}

impl ProbeSummary {
    pub fn of(template: &MultiBiometricTemplate) -> Self {
        Self {
            presence: template.presence().iter().collect(),
            quality: template.presence().iter().map(|k| (k, template.quality().get(k))).collect(),
        }
    }
}

/// A ranked gallery candidate with its score breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub gallery_id: u64,
    pub score: f32,
    /// Inner product per segment present on both sides.
    pub per_segment: BTreeMap<SegmentKind, f32>,
    /// Fusion-weighted mean of `per_segment` within each modality.
    pub per_modality: BTreeMap<Modality, f32>,
}

impl CandidateView {
    pub fn new(candidate: &Candidate, common: PresenceMask, weights: &FusionWeights) -> Self {
        let per_segment: BTreeMap<_, _> = match &candidate.fused {
            Some(f) => common.iter().map(|k| (k, f.per_segment[k.index()])).collect(),
            None => BTreeMap::new(),
        };
        let mut sums: BTreeMap<Modality, (f64, f64)> = BTreeMap::new();
        for (&k, &s) in &per_segment {
            let w = weights.get(k) as f64;
            let e = sums.entry(k.modality()).or_default();
            e.0 += w * s as f64;
            e.1 += w;
        }
        let per_modality = sums
            .into_iter()
            .filter(|(_, (_, w))| *w > 0.0)
            .map(|(m, (s, w))| (m, (s / w) as f32))
            .collect();
        Self {
            gallery_id: candidate.gallery_id,
            score: candidate.score,
            per_segment,
            per_modality,
        }
    }
}

/// A held enrollment awaiting or carrying a human decision. Carries ids
/// and scores only; the probe template is stored separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjudicationCase {
    pub case_id: u64,
    pub packet_id: String,
    pub probe: ProbeSummary,
    pub candidates: Vec<CandidateView>,
    pub top_score: f32,
    pub threshold: f32,
    pub state: CaseState,
    pub adjudicator: Option<String>,
    /// Candidate the probe was judged a duplicate of.
    pub linked_gallery_id: Option<u64>,
    /// Gallery id assigned when the probe was judged unique.
    pub enrolled_gallery_id: Option<u64>,
    pub created_at: DateTime<Utc>,
    pub decided_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasePage {
    pub cases: Vec<AdjudicationCase>,
    /// Pass back as `cursor` to fetch the next page; absent on the last page.
    pub next_cursor: Option<String>,
}
