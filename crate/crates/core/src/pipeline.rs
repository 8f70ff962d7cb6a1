//! Enrollment pipeline: segmentation, quality, presentation-attack
//! detection and embedding per captured segment.
//!
//! Stages are traits so that model backends can replace the stubs here.
//! The stubs operate on synthetic payloads that already carry an embedding,
//! a latent quality and a ground-truth liveness flag.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::template::{assemble_template, Modality, MultiBiometricTemplate, SegmentKind, TemplateError};

/// Opaque per-segment capture data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentPayload {
    pub embedding: Vec<f32>,
    /// Quality the capture actually has; stub estimators observe it noisily.
    #[serde(default = "one")]
    pub latent_quality: f32,
    /// Ground-truth liveness, used only by the stub detector.
    #[serde(default = "yes")]
    pub live: bool,
}

fn one() -> f32 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnrollmentPacket {
    pub packet_id: String,
    #[serde(default)]
    pub segments: BTreeMap<SegmentKind, SegmentPayload>,
    /// Segments the capture station could not acquire; they carry no payload.
    #[serde(default)]
    pub failure_to_acquire: Vec<SegmentKind>,
    #[serde(default)]
    pub operator: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadVerdict {
    Live,
    Spoof,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PadOutcome {
    pub verdict: PadVerdict,
    pub confidence: f32,
}

/// Detection rates of a stub detector: `tdr` is the chance a spoof is
/// caught, `fdr` the chance a live sample is called a spoof.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StubOperatingPoint {
    pub tdr: f64,
    pub fdr: f64,
}

impl StubOperatingPoint {
    pub fn new(tdr: f64, fdr: f64) -> Result<Self, PipelineError> {
        if !(0.0..=1.0).contains(&tdr) || !(0.0..=1.0).contains(&fdr) {
            return Err(PipelineError::Config(format!("PAD rates ({tdr}, {fdr}) outside [0, 1]")));
        }
        Ok(Self { tdr, fdr })
    }

    pub fn default_for(modality: Modality) -> Self {
        match modality {
            Modality::Finger | Modality::Face => Self { tdr: 0.995, fdr: 0.005 },
            Modality::Iris => Self { tdr: 0.99, fdr: 0.01 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Capture,
    Segmentation,
    Quality,
    Pad,
    Embedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExceptionCode {
    FailureToAcquire,
    PadSpoof,
    /// Below the configured quality threshold; the segment is still used.
    LowQuality,
}

/// One audit record; written as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExceptionRecord {
    pub packet_id: String,
    pub segment: SegmentKind,
    pub stage: Stage,
    pub code: ExceptionCode,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("malformed packet: {0}")]
    Malformed(String),
    #[error("packet {packet_id} has no usable segment")]
    EmptyTemplate {
        packet_id: String,
        exceptions: Vec<ExceptionRecord>,
    },
    #[error("{stage:?} stage failed on {segment}: {message}")]
    Stage {
        segment: SegmentKind,
        stage: Stage,
        message: String,
    },
    #[error("pipeline config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Stage failure reported by an implementation; the pipeline adds the
/// segment and stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageFailure(pub String);

pub trait Segmenter: Send + Sync {
    fn segment(&self, kind: SegmentKind, payload: &SegmentPayload) -> Result<SegmentPayload, StageFailure>;
}

pub trait QualityEstimator: Send + Sync {
    fn estimate(&self, kind: SegmentKind, payload: &SegmentPayload, rng: &mut ChaCha8Rng) -> Result<f32, StageFailure>;
}

pub trait PadDetector: Send + Sync {
    fn detect(&self, kind: SegmentKind, payload: &SegmentPayload, rng: &mut ChaCha8Rng) -> Result<PadOutcome, StageFailure>;
}

pub trait Embedder: Send + Sync {
    fn embed(&self, kind: SegmentKind, payload: &SegmentPayload) -> Result<Vec<f32>, StageFailure>;
}

/// Returns the payload unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct PassThroughSegmenter;

impl Segmenter for PassThroughSegmenter {
    fn segment(&self, _kind: SegmentKind, payload: &SegmentPayload) -> Result<SegmentPayload, StageFailure> {
        Ok(payload.clone())
    }
}

/// Latent quality plus uniform noise of at most `noise`, clamped to [0, 1].
pub fn quality_stub(latent_quality: f32, noise: f32, rng: &mut impl Rng) -> f32 {
    let jitter = if noise > 0.0 { rng.random_range(-noise..=noise) } else { 0.0 };
    (latent_quality + jitter).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy)]
pub struct StubQualityEstimator {
    pub noise: f32,
}

impl Default for StubQualityEstimator {
    fn default() -> Self {
        Self { noise: 0.05 }
    }
}

impl QualityEstimator for StubQualityEstimator {
    fn estimate(&self, _kind: SegmentKind, payload: &SegmentPayload, rng: &mut ChaCha8Rng) -> Result<f32, StageFailure> {
        if !payload.latent_quality.is_finite() {
            return Err(StageFailure("latent quality is not finite".into()));
        }
        Ok(quality_stub(payload.latent_quality, self.noise, rng))
    }
}

/// Spoofs are caught with probability `tdr`; live samples are flagged with
/// probability `fdr`.
pub fn pad_stub(live: bool, op: StubOperatingPoint, rng: &mut impl Rng) -> PadOutcome {
    let p_spoof = if live { op.fdr } else { op.tdr };
    if rng.random_bool(p_spoof) {
        PadOutcome {
            verdict: PadVerdict::Spoof,
            confidence: op.tdr as f32,
        }
    } else {
        PadOutcome {
            verdict: PadVerdict::Live,
            confidence: (1.0 - op.fdr) as f32,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct StubPadDetector {
    /// Per-modality rates; defaults apply to modalities not listed.
    pub operating_points: BTreeMap<Modality, StubOperatingPoint>,
    /// Segments whose verdict is fixed regardless of the payload.
    pub forced: BTreeMap<SegmentKind, PadVerdict>,
}

impl StubPadDetector {
    /// A detector that never reports a spoof.
    pub fn permissive() -> Self {
        let op = StubOperatingPoint { tdr: 0.0, fdr: 0.0 };
        Self {
            operating_points: [Modality::Finger, Modality::Face, Modality::Iris].into_iter().map(|m| (m, op)).collect(),
            forced: BTreeMap::new(),
        }
    }

    fn operating_point(&self, modality: Modality) -> StubOperatingPoint {
        self.operating_points
            .get(&modality)
            .copied()
            .unwrap_or_else(|| StubOperatingPoint::default_for(modality))
    }
}

impl PadDetector for StubPadDetector {
    fn detect(&self, kind: SegmentKind, payload: &SegmentPayload, rng: &mut ChaCha8Rng) -> Result<PadOutcome, StageFailure> {
        if let Some(&verdict) = self.forced.get(&kind) {
            return Ok(PadOutcome {
                verdict,
                confidence: 1.0,
            });
        }
        Ok(pad_stub(payload.live, self.operating_point(kind.modality()), rng))
    }
}

/// Uses the payload's embedding as the feature vector.
#[derive(Debug, Clone, Copy, Default)]
pub struct PayloadEmbedder;

impl Embedder for PayloadEmbedder {
    fn embed(&self, kind: SegmentKind, payload: &SegmentPayload) -> Result<Vec<f32>, StageFailure> {
        if payload.embedding.len() != kind.dim() {
            return Err(StageFailure(format!(
                "embedding has {} values, expected {}",
                payload.embedding.len(),
                kind.dim()
            )));
        }
        Ok(payload.embedding.clone())
    }
}

pub struct Stages {
    pub segmenter: Box<dyn Segmenter>,
    pub quality: Box<dyn QualityEstimator>,
    pub pad: Box<dyn PadDetector>,
    pub embedder: Box<dyn Embedder>,
    /// Segments with estimated quality below this are flagged (not dropped).
    pub low_quality_threshold: f32,
    /// Seed of the per-segment stage random streams.
    pub seed: u64,
}

impl Stages {
    pub fn from_config(config: &PipelineConfig) -> Self {
        Self {
            segmenter: Box::new(PassThroughSegmenter),
            quality: Box::new(StubQualityEstimator {
                noise: config.quality_noise,
            }),
            pad: Box::new(StubPadDetector {
                operating_points: config.pad.clone(),
                forced: config.forced_pad.clone(),
            }),
            embedder: Box::new(PayloadEmbedder),
            low_quality_threshold: config.low_quality_threshold,
            seed: config.seed,
        }
    }

    /// Stub stages that accept every segment.
    pub fn permissive() -> Self {
        Self {
            pad: Box::new(StubPadDetector::permissive()),
            ..Self::from_config(&PipelineConfig::default())
        }
    }
}

/// Stage selection for the stub backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub quality_noise: f32,
    pub low_quality_threshold: f32,
    pub pad: BTreeMap<Modality, StubOperatingPoint>,
    pub forced_pad: BTreeMap<SegmentKind, PadVerdict>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            quality_noise: 0.05,
            low_quality_threshold: 0.2,
            pad: [Modality::Finger, Modality::Face, Modality::Iris]
                .into_iter()
                .map(|m| (m, StubOperatingPoint::default_for(m)))
                .collect(),
            forced_pad: BTreeMap::new(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        let config: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        for op in config.pad.values() {
            StubOperatingPoint::new(op.tdr, op.fdr)?;
        }
        if !(0.0..=1.0).contains(&config.low_quality_threshold) || !(config.quality_noise >= 0.0) {
            return Err(PipelineError::Config("quality settings out of range".into()));
        }
        Ok(config)
    }
}

/// FNV-1a; stable across platforms and releases, unlike the std hasher.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn segment_rng(seed: u64, packet_id: &str, kind: SegmentKind) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(packet_id.as_bytes()));
    rng.set_stream(kind.index() as u64);
    rng
}

/// Runs the stage chain on every acquired segment and assembles the
/// template from the segments that pass PAD. Returns the exceptions raised
/// along the way, in segment order.
pub fn process_enrollment_packet(
    packet: &EnrollmentPacket,
    stages: &Stages,
) -> Result<(MultiBiometricTemplate, Vec<ExceptionRecord>), PipelineError> {
    if let Some(kind) = packet.failure_to_acquire.iter().find(|k| packet.segments.contains_key(k)) {
        return Err(PipelineError::Malformed(format!(
            "segment {kind} is flagged failure-to-acquire but carries a payload"
        )));
    }
    let record = |segment, stage, code| ExceptionRecord {
        packet_id: packet.packet_id.clone(),
        segment,
        stage,
        code,
    };
    let mut exceptions = Vec::new();
    let mut embeddings = BTreeMap::new();
    let mut qualities = BTreeMap::new();
    for kind in SegmentKind::ALL {
        if packet.failure_to_acquire.contains(&kind) {
            exceptions.push(record(kind, Stage::Capture, ExceptionCode::FailureToAcquire));
            continue;
        }
        let Some(raw) = packet.segments.get(&kind) else {
            continue;
        };
        let fail = |stage, e: StageFailure| PipelineError::Stage {
            segment: kind,
            stage,
            message: e.0,
        };
        let mut rng = segment_rng(stages.seed, &packet.packet_id, kind);
        let payload = stages.segmenter.segment(kind, raw).map_err(|e| fail(Stage::Segmentation, e))?;
        let quality = stages
            .quality
            .estimate(kind, &payload, &mut rng)
            .map_err(|e| fail(Stage::Quality, e))?;
        let pad = stages.pad.detect(kind, &payload, &mut rng).map_err(|e| fail(Stage::Pad, e))?;
        if pad.verdict == PadVerdict::Spoof {
            exceptions.push(record(kind, Stage::Pad, ExceptionCode::PadSpoof));
            continue;
        }
        if quality < stages.low_quality_threshold {
            exceptions.push(record(kind, Stage::Quality, ExceptionCode::LowQuality));
        }
        let embedding = stages.embedder.embed(kind, &payload).map_err(|e| fail(Stage::Embedding, e))?;
        embeddings.insert(kind, embedding);
        qualities.insert(kind, quality);
    }
    if embeddings.is_empty() {
        return Err(PipelineError::EmptyTemplate {
            packet_id: packet.packet_id.clone(),
            exceptions,
        });
    }
    let template = assemble_template(&embeddings, &qualities).map_err(|e| match e {
        TemplateError::DegenerateSegment(Some(segment)) | TemplateError::Dimension { segment, .. } => {
            PipelineError::Stage {
                segment,
                stage: Stage::Embedding,
                message: e.to_string(),
            }
        }
        other => PipelineError::Malformed(other.to_string()),
    })?;
    Ok((template, exceptions))
}

/// Writes one JSON object per line.
pub fn write_exceptions<W: Write>(mut out: W, records: &[ExceptionRecord]) -> Result<(), PipelineError> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Packet carrying every present segment of `template` as a live capture
/// whose latent quality is the template's quality.
pub fn packet_from_template(packet_id: impl Into<String>, template: &MultiBiometricTemplate) -> EnrollmentPacket {
    let segments = template
        .presence()
        .iter()
        .map(|kind| {
            (
                kind,
                SegmentPayload {
                    embedding: template.segment(kind).to_vec(),
                    latent_quality: template.quality().get(kind),
                    live: true,
                },
            )
        })
        .collect();
    EnrollmentPacket {
        packet_id: packet_id.into(),
        segments,
        failure_to_acquire: Vec::new(),
        operator: BTreeMap::new(),
    }
}
