//! Fixed-length multi-biometric templates.
//!
//! A template concatenates ten 192-d finger embeddings, one 512-d face
//! embedding and two 512-d iris embeddings into a single 3,456-d vector.
//! Every present segment is unit-norm so that per-segment inner products are
//! cosine similarities; absent segments are stored as explicit zeros and
//! tracked in a [`PresenceMask`], which keeps a gallery a fixed-stride matrix.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const FINGER_DIM: usize = 192;
pub const FACE_DIM: usize = 512;
pub const IRIS_DIM: usize = 512;
pub const FINGER_COUNT: usize = 10;
pub const SEGMENT_COUNT: usize = 13;
pub const TEMPLATE_DIM: usize = FINGER_COUNT * FINGER_DIM + FACE_DIM + 2 * IRIS_DIM;

/// Size of the little-endian vector payload.
pub const VECTOR_BYTES: usize = TEMPLATE_DIM * 4;
/// Size of one serialized template record.
pub const RECORD_LEN: usize = RECORD_HEADER_LEN + SEGMENT_COUNT * 4 + VECTOR_BYTES;

pub const RECORD_MAGIC: [u8; 4] = *b"BTPL";
pub const RECORD_VERSION: u16 = 1;
const RECORD_HEADER_LEN: usize = 26;

/// Maximum deviation of a present segment's L2 norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-5;
/// Inputs with a norm at or below this are rejected as degenerate.
pub const MIN_SEGMENT_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TemplateError {
    #[error("segment {segment} has {actual} elements, expected {expected}")]
    Dimension {
        segment: SegmentKind,
        expected: usize,
        actual: usize,
    },
    #[error("template has no present segment")]
    EmptyTemplate,
    #[error("degenerate (near-zero or non-finite) segment{}", .0.map(|s| format!(" {s}")).unwrap_or_default())]
    DegenerateSegment(Option<SegmentKind>),
    #[error("quality {value} for segment {segment} is outside [0, 1]")]
    InvalidQuality { segment: SegmentKind, value: f32 },
    #[error("unknown segment name {0:?}")]
    UnknownSegment(String),
    #[error("template record format error: {0}")]
    Format(String),
    #[error("template invariant violated: {0}")]
    Invalid(String),
}

/// Finger position 1..=10.
///
/// Positions 1-5 are the right hand from thumb to little finger, positions
/// 6-10 the left hand in the same order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FingerPosition(u8);

impl FingerPosition {
    pub const RIGHT_THUMB: Self = Self(1);
    pub const RIGHT_INDEX: Self = Self(2);
    pub const LEFT_THUMB: Self = Self(6);
    pub const LEFT_INDEX: Self = Self(7);

    pub fn new(position: u8) -> Option<Self> {
        (1..=10).contains(&position).then_some(Self(position))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn is_thumb_or_index(self) -> bool {
        matches!(self.0, 1 | 2 | 6 | 7)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Finger,
    Face,
    Iris,
}

/// One biometric instance within a template. The derived ordering is the
/// canonical segment order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SegmentKind {
    Finger(FingerPosition),
    Face,
    IrisLeft,
    IrisRight,
}

impl SegmentKind {
    pub const ALL: [SegmentKind; SEGMENT_COUNT] = [
        SegmentKind::Finger(FingerPosition(1)),
        SegmentKind::Finger(FingerPosition(2)),
        SegmentKind::Finger(FingerPosition(3)),
        SegmentKind::Finger(FingerPosition(4)),
        SegmentKind::Finger(FingerPosition(5)),
        SegmentKind::Finger(FingerPosition(6)),
        SegmentKind::Finger(FingerPosition(7)),
        SegmentKind::Finger(FingerPosition(8)),
        SegmentKind::Finger(FingerPosition(9)),
        SegmentKind::Finger(FingerPosition(10)),
        SegmentKind::Face,
        SegmentKind::IrisLeft,
        SegmentKind::IrisRight,
    ];

    /// Position in canonical order, 0..13.
    pub fn index(self) -> usize {
        match self {
            SegmentKind::Finger(p) => p.0 as usize - 1,
            SegmentKind::Face => 10,
            SegmentKind::IrisLeft => 11,
            SegmentKind::IrisRight => 12,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn modality(self) -> Modality {
        match self {
            SegmentKind::Finger(_) => Modality::Finger,
            SegmentKind::Face => Modality::Face,
            SegmentKind::IrisLeft | SegmentKind::IrisRight => Modality::Iris,
        }
    }

    pub fn dim(self) -> usize {
        match self.modality() {
            Modality::Finger => FINGER_DIM,
            Modality::Face => FACE_DIM,
            Modality::Iris => IRIS_DIM,
        }
    }

    pub fn offset(self) -> usize {
        match self {
            SegmentKind::Finger(p) => (p.0 as usize - 1) * FINGER_DIM,
            SegmentKind::Face => FINGER_COUNT * FINGER_DIM,
            SegmentKind::IrisLeft => FINGER_COUNT * FINGER_DIM + FACE_DIM,
            SegmentKind::IrisRight => FINGER_COUNT * FINGER_DIM + FACE_DIM + IRIS_DIM,
        }
    }

    pub fn range(self) -> Range<usize> {
        let start = self.offset();
        start..start + self.dim()
    }

    pub fn name(self) -> &'static str {
        const FINGERS: [&str; FINGER_COUNT] = [
            "finger_1", "finger_2", "finger_3", "finger_4", "finger_5", "finger_6", "finger_7",
            "finger_8", "finger_9", "finger_10",
        ];
        match self {
            SegmentKind::Finger(p) => FINGERS[p.0 as usize - 1],
            SegmentKind::Face => "face",
            SegmentKind::IrisLeft => "iris_left",
            SegmentKind::IrisRight => "iris_right",
        }
    }
}

impl fmt::Display for SegmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SegmentKind {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SegmentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| TemplateError::UnknownSegment(s.to_owned()))
    }
}

impl Serialize for SegmentKind {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for SegmentKind {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let name = String::deserialize(deserializer)?;
        name.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModalitySegment {
    pub kind: SegmentKind,
    pub offset: usize,
    pub length: usize,
}

/// The 13 canonical segments: fingers 1..10, face, left iris, right iris.
pub fn segment_layout() -> [ModalitySegment; SEGMENT_COUNT] {
    SegmentKind::ALL.map(|kind| ModalitySegment {
        kind,
        offset: kind.offset(),
        length: kind.dim(),
    })
}

/// One presence flag per canonical segment; bit `i` is segment `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PresenceMask(u16);

impl PresenceMask {
    pub const FULL_BITS: u16 = (1 << SEGMENT_COUNT) - 1;

    pub fn empty() -> Self {
        Self(0)
    }

    pub fn full() -> Self {
        Self(Self::FULL_BITS)
    }

    /// Fails if any of bits 13-15 is set.
    pub fn from_bits(bits: u16) -> Option<Self> {
        (bits & !Self::FULL_BITS == 0).then_some(Self(bits))
    }

    pub fn from_segments<I: IntoIterator<Item = SegmentKind>>(segments: I) -> Self {
        let mut mask = Self::empty();
        for kind in segments {
            mask.insert(kind);
        }
        mask
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn contains(self, kind: SegmentKind) -> bool {
        self.contains_index(kind.index())
    }

    pub fn contains_index(self, index: usize) -> bool {
        self.0 & (1 << index) != 0
    }

    pub fn insert(&mut self, kind: SegmentKind) {
        self.0 |= 1 << kind.index();
    }

    pub fn remove(&mut self, kind: SegmentKind) {
        self.0 &= !(1 << kind.index());
    }

    pub fn intersection(self, other: Self) -> Self {
        Self(self.0 & other.0)
    }

    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_full(self) -> bool {
        self.0 == Self::FULL_BITS
    }

    pub fn iter(self) -> impl Iterator<Item = SegmentKind> {
        SegmentKind::ALL.into_iter().filter(move |k| self.contains(*k))
    }
}

impl Serialize for PresenceMask {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for PresenceMask {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let kinds = Vec::<SegmentKind>::deserialize(deserializer)?;
        Ok(Self::from_segments(kinds))
    }
}

/// Per-segment sample quality in [0, 1], canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QualityVector(pub [f32; SEGMENT_COUNT]);

impl QualityVector {
    pub fn uniform(value: f32) -> Self {
        Self([value; SEGMENT_COUNT])
    }

    pub fn get(&self, kind: SegmentKind) -> f32 {
        self.0[kind.index()]
    }

    pub fn set(&mut self, kind: SegmentKind, value: f32) {
        self.0[kind.index()] = value;
    }

    pub fn as_array(&self) -> &[f32; SEGMENT_COUNT] {
        &self.0
    }
}

/// Scales `v` to unit L2 norm.
pub fn normalize_segment(v: &[f32]) -> Result<Vec<f32>, TemplateError> {
    let norm = l2_norm(v);
    if !norm.is_finite() || norm <= MIN_SEGMENT_NORM {
        return Err(TemplateError::DegenerateSegment(None));
    }
    Ok(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

pub(crate) fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// An immutable, validated multi-biometric template.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiBiometricTemplate {
    vector: Vec<f32>,
    presence: PresenceMask,
    quality: QualityVector,
    subject_id: Option<u64>,
}

impl MultiBiometricTemplate {
    /// Builds a template from already-laid-out parts, checking every
    /// invariant: present segments unit-norm, absent segments zero with zero
    /// quality, qualities in [0, 1], at least one segment present.
    pub fn from_parts(
        vector: Vec<f32>,
        presence: PresenceMask,
        quality: QualityVector,
        subject_id: Option<u64>,
    ) -> Result<Self, TemplateError> {
        if vector.len() != TEMPLATE_DIM {
            return Err(TemplateError::Invalid(format!(
                "vector has {} elements, expected {TEMPLATE_DIM}",
                vector.len()
            )));
        }
        if presence.is_empty() {
            return Err(TemplateError::EmptyTemplate);
        }
        if subject_id == Some(0) {
            return Err(TemplateError::Invalid("subject id 0 is reserved".into()));
        }
        for kind in SegmentKind::ALL {
            let segment = &vector[kind.range()];
            let q = quality.get(kind);
            if !(0.0..=1.0).contains(&q) {
                return Err(TemplateError::InvalidQuality {
                    segment: kind,
                    value: q,
                });
            }
            if presence.contains(kind) {
                let norm = l2_norm(segment);
                if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOLERANCE {
                    return Err(TemplateError::Invalid(format!(
                        "present segment {kind} has norm {norm}"
                    )));
                }
            } else {
                if segment.iter().any(|&x| x != 0.0) {
                    return Err(TemplateError::Invalid(format!(
                        "absent segment {kind} is not zero"
                    )));
                }
                if q != 0.0 {
                    return Err(TemplateError::Invalid(format!(
                        "absent segment {kind} has quality {q}"
                    )));
                }
            }
        }
        Ok(Self {
            vector,
            presence,
            quality,
            subject_id,
        })
    }

    pub fn vector(&self) -> &[f32] {
        &self.vector
    }

    pub fn presence(&self) -> PresenceMask {
        self.presence
    }

    pub fn quality(&self) -> &QualityVector {
        &self.quality
    }

    pub fn subject_id(&self) -> Option<u64> {
        self.subject_id
    }

    pub fn segment(&self, kind: SegmentKind) -> &[f32] {
        &self.vector[kind.range()]
    }

    /// Returns the same template carrying a different subject id (`None` or a
    /// non-zero id).
    pub fn with_subject_id(mut self, subject_id: Option<u64>) -> Self {
        assert_ne!(subject_id, Some(0), "subject id 0 is reserved");
        self.subject_id = subject_id;
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(RECORD_LEN);
        self.write_record(&mut out);
        out
    }

    pub(crate) fn write_record(&self, out: &mut Vec<u8>) {
        encode_record(out, self.subject_id.unwrap_or(0), self.presence, &self.quality, &self.vector);
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TemplateError> {
        if bytes.len() != RECORD_LEN {
            return Err(TemplateError::Format(format!(
                "record is {} bytes, expected {RECORD_LEN}",
                bytes.len()
            )));
        }
        if bytes[0..4] != RECORD_MAGIC {
            return Err(TemplateError::Format("bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != RECORD_VERSION {
            return Err(TemplateError::Format(format!("unsupported version {version}")));
        }
        if bytes[6..8] != [0, 0] || bytes[18..26].iter().any(|&b| b != 0) {
            return Err(TemplateError::Format("reserved bytes are not zero".into()));
        }
        let subject_id = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let bits = u16::from_le_bytes([bytes[16], bytes[17]]);
        let presence = PresenceMask::from_bits(bits)
            .ok_or_else(|| TemplateError::Format(format!("presence bits {bits:#06x} out of range")))?;
        let mut quality = [0f32; SEGMENT_COUNT];
        let quality_bytes = &bytes[RECORD_HEADER_LEN..RECORD_HEADER_LEN + SEGMENT_COUNT * 4];
        for (q, chunk) in quality.iter_mut().zip(quality_bytes.chunks_exact(4)) {
            *q = f32::from_le_bytes(chunk.try_into().unwrap());
        }
        let vector = decode_f32s(&bytes[RECORD_HEADER_LEN + SEGMENT_COUNT * 4..]);
        let subject_id = (subject_id != 0).then_some(subject_id);
        Self::from_parts(vector, presence, QualityVector(quality), subject_id).map_err(|e| match e {
            TemplateError::Format(_) => e,
            other => TemplateError::Format(other.to_string()),
        })
    }
}

/// Appends one binary record; `subject_id` 0 means none.
pub(crate) fn encode_record(
    out: &mut Vec<u8>,
    subject_id: u64,
    presence: PresenceMask,
    quality: &QualityVector,
    vector: &[f32],
) {
    out.extend_from_slice(&RECORD_MAGIC);
    out.extend_from_slice(&RECORD_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&subject_id.to_le_bytes());
    out.extend_from_slice(&presence.bits().to_le_bytes());
    out.extend_from_slice(&0u64.to_le_bytes());
    for q in quality.0 {
        out.extend_from_slice(&q.to_le_bytes());
    }
    for x in vector {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub(crate) fn decode_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub fn serialize_template(template: &MultiBiometricTemplate) -> Vec<u8> {
    template.to_bytes()
}

pub fn deserialize_template(bytes: &[u8]) -> Result<MultiBiometricTemplate, TemplateError> {
    MultiBiometricTemplate::from_bytes(bytes)
}

/// Normalizes each provided segment and places it at its canonical offset.
///
/// Segments missing from `segments` are zero-filled with presence `false` and
/// quality 0. A provided segment without an entry in `quality` gets quality 1.
pub fn assemble_template(
    segments: &BTreeMap<SegmentKind, Vec<f32>>,
    quality: &BTreeMap<SegmentKind, f32>,
) -> Result<MultiBiometricTemplate, TemplateError> {
    if segments.is_empty() {
        return Err(TemplateError::EmptyTemplate);
    }
    let mut vector = vec![0f32; TEMPLATE_DIM];
    let mut presence = PresenceMask::empty();
    let mut qualities = QualityVector::default();
    for (&kind, values) in segments {
        if values.len() != kind.dim() {
            return Err(TemplateError::Dimension {
                segment: kind,
                expected: kind.dim(),
                actual: values.len(),
            });
        }
        let unit = normalize_segment(values).map_err(|_| TemplateError::DegenerateSegment(Some(kind)))?;
        vector[kind.range()].copy_from_slice(&unit);
        presence.insert(kind);
        let q = quality.get(&kind).copied().unwrap_or(1.0);
        if !(0.0..=1.0).contains(&q) {
            return Err(TemplateError::InvalidQuality {
                segment: kind,
                value: q,
            });
        }
        qualities.set(kind, q);
    }
    MultiBiometricTemplate::from_parts(vector, presence, qualities, None)
}
