//! Domain types shared by every stage of the pipeline.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One machine-predicted mask.
///
/// The ground-truth mask is never materialized; its only trace is `gt_iou`,
/// the best-match IoU computed upstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub id: String,
    #[serde(rename = "class")]
    pub class_name: String,
    pub score: f64,
    pub feature: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_iou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_uri: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polygon: Option<Vec<[f64; 2]>>,
}

impl MaskRecord {
    pub fn new(id: impl Into<String>, class_name: impl Into<String>, score: f64, feature: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            class_name: class_name.into(),
            score,
            feature,
            gt_iou: None,
            image_uri: None,
            polygon: None,
        }
    }

    pub fn with_gt_iou(mut self, iou: f64) -> Self {
        self.gt_iou = Some(iou);
        self
    }

    /// Whether the mask counts as correct at the given IoU threshold.
    /// `None` when the ground truth is unknown.
    pub fn is_correct(&self, k_iou: f64) -> Option<bool> {
        self.gt_iou.map(|iou| iou >= k_iou)
    }
}

/// Number of masks verified per candidate cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleSize {
    Finite(u32),
    /// Verify every member (exact quality).
    All,
}

impl SampleSize {
    pub fn take(self, available: usize) -> usize {
        match self {
            SampleSize::Finite(k) => available.min(k as usize),
            SampleSize::All => available,
        }
    }
}

impl fmt::Display for SampleSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleSize::Finite(k) => write!(f, "{k}"),
            SampleSize::All => f.write_str("all"),
        }
    }
}

impl std::str::FromStr for SampleSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "all" | "inf" | "infinite" => Ok(SampleSize::All),
            other => other
                .parse::<u32>()
                .ok()
                .filter(|&k| k > 0)
                .map(SampleSize::Finite)
                .ok_or_else(|| Error::Config(format!("n_s must be a positive integer or \"all\", got {other:?}"))),
        }
    }
}

impl Serialize for SampleSize {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            SampleSize::Finite(k) => serializer.serialize_u32(*k),
            SampleSize::All => serializer.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for SampleSize {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(u32),
            Text(String),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Num(0) => Err(serde::de::Error::custom("n_s must be positive")),
            Repr::Num(k) => Ok(SampleSize::Finite(k)),
            Repr::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Knobs of the verification engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// IoU at or above which a mask counts as correct.
    pub k_iou: f64,
    /// Accept when the estimated quality is `>= k_a`, reject when `<= 1 - k_a`.
    pub k_a: f64,
    /// Clusters whose mean score is `<= k_pa` are split without questions.
    /// `0` disables early splitting.
    pub k_pa: f64,
    pub n_s: SampleSize,
    /// Weight of the score coordinate appended to the normalized feature.
    pub feature_score_weight: f64,
    pub seconds_per_question: f64,
    pub seconds_per_manual_mask: f64,
    /// Masks drawn by hand to bootstrap the detector; charged to the ledger.
    pub initial_masks_drawn: u64,
    pub rng_seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            k_iou: 0.75,
            k_a: 0.85,
            k_pa: 0.7,
            n_s: SampleSize::Finite(15),
            feature_score_weight: 1.0,
            seconds_per_question: 2.0,
            seconds_per_manual_mask: 80.0,
            initial_masks_drawn: 0,
            rng_seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.k_iou > 0.0 && self.k_iou <= 1.0) {
            return fail(format!("k_iou must lie in (0, 1], got {}", self.k_iou));
        }
        if !(self.k_a > 0.5 && self.k_a <= 1.0) {
            return fail(format!("k_a must lie in (0.5, 1], got {}", self.k_a));
        }
        if !(0.0..=1.0).contains(&self.k_pa) {
            return fail(format!("k_pa must lie in [0, 1], got {}", self.k_pa));
        }
        if !(self.feature_score_weight >= 0.0 && self.feature_score_weight.is_finite()) {
            return fail(format!("feature_score_weight must be nonnegative, got {}", self.feature_score_weight));
        }
        if !(self.seconds_per_question > 0.0 && self.seconds_per_manual_mask > 0.0) {
            return fail("time constants must be positive".into());
        }
        Ok(())
    }
}

/// Where a verification label came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Oracle,
    Human { annotator_id: String },
    Propagated { cluster_id: usize },
}

/// One binary answer: 1 means the mask outlines the object correctly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationLabel {
    pub mask_id: String,
    pub label: u8,
    pub source: LabelSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_ms: Option<u64>,
    #[serde(default)]
    pub is_gold: bool,
}

impl VerificationLabel {
    pub fn positive(&self) -> bool {
        self.label == 1
    }
}

/// Running cost of an annotation run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub questions_asked: u64,
    pub clusters_annotated: u64,
    pub initial_masks_drawn: u64,
    pub wall_seconds_estimate: f64,
}

impl CostLedger {
    pub fn new(config: &EngineConfig) -> Self {
        let mut ledger = Self {
            initial_masks_drawn: config.initial_masks_drawn,
            ..Self::default()
        };
        ledger.refresh(config);
        ledger
    }

    pub fn seconds_for(questions: u64, initial_masks: u64, config: &EngineConfig) -> f64 {
        initial_masks as f64 * config.seconds_per_manual_mask + questions as f64 * config.seconds_per_question
    }

    pub fn record_questions(&mut self, count: u64, config: &EngineConfig) {
        self.questions_asked += count;
        self.refresh(config);
    }

    pub fn record_cluster(&mut self) {
        self.clusters_annotated += 1;
    }

    fn refresh(&mut self, config: &EngineConfig) {
        self.wall_seconds_estimate = Self::seconds_for(self.questions_asked, self.initial_masks_drawn, config);
    }

    /// Masks the same time would have bought at the manual drawing rate.
    pub fn manual_equivalent_masks(&self, config: &EngineConfig) -> f64 {
        self.wall_seconds_estimate / config.seconds_per_manual_mask
    }

    /// Sum of two ledgers, e.g. across classes of one run.
    pub fn merged(&self, other: &CostLedger, config: &EngineConfig) -> CostLedger {
        let mut out = CostLedger {
            questions_asked: self.questions_asked + other.questions_asked,
            clusters_annotated: self.clusters_annotated + other.clusters_annotated,
            initial_masks_drawn: self.initial_masks_drawn.max(other.initial_masks_drawn),
            wall_seconds_estimate: 0.0,
        };
        out.refresh(config);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    DuplicateId { id: String },
    DimensionMismatch { id: String, expected: usize, found: usize },
    ScoreOutOfRange { id: String, value: f64 },
    IouOutOfRange { id: String, value: f64 },
    EmptyFeature { id: String },
    NonFiniteFeature { id: String },
    DegeneratePolygon { id: String, vertices: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId { id } => write!(f, "duplicate id {id:?}"),
            Violation::DimensionMismatch { id, expected, found } => {
                write!(f, "{id:?}: feature dimension {found}, expected {expected}")
            }
            Violation::ScoreOutOfRange { id, value } => write!(f, "{id:?}: score {value} outside [0, 1]"),
            Violation::IouOutOfRange { id, value } => write!(f, "{id:?}: gt_iou {value} outside [0, 1]"),
            Violation::EmptyFeature { id } => write!(f, "{id:?}: empty feature"),
            Violation::NonFiniteFeature { id } => write!(f, "{id:?}: non-finite feature value"),
            Violation::DegeneratePolygon { id, vertices } => {
                write!(f, "{id:?}: polygon has {vertices} vertices, need at least 3")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn summary(&self) -> String {
        const SHOWN: usize = 5;
        let mut parts: Vec<String> = self.violations.iter().take(SHOWN).map(ToString::to_string).collect();
        if self.violations.len() > SHOWN {
            parts.push(format!("... and {} more", self.violations.len() - SHOWN));
        }
        parts.join("; ")
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::Invalid(self))
        }
    }
}

/// Checks every record invariant and reports all violations at once.
///
/// The feature dimension of the first record sets the expected dimension.
pub fn validate_dataset(records: &[MaskRecord]) -> ValidationReport {
    let mut violations = Vec::new();
    let mut seen = HashSet::with_capacity(records.len());
    let expected_dim = records.first().map(|r| r.feature.len());

    for r in records {
        if !seen.insert(r.id.as_str()) {
            violations.push(Violation::DuplicateId { id: r.id.clone() });
        }
        if !(0.0..=1.0).contains(&r.score) {
            violations.push(Violation::ScoreOutOfRange { id: r.id.clone(), value: r.score });
        }
        if let Some(iou) = r.gt_iou {
            if !(0.0..=1.0).contains(&iou) {
                violations.push(Violation::IouOutOfRange { id: r.id.clone(), value: iou });
            }
        }
        if r.feature.is_empty() {
            violations.push(Violation::EmptyFeature { id: r.id.clone() });
        } else if let Some(expected) = expected_dim {
            if r.feature.len() != expected {
                violations.push(Violation::DimensionMismatch {
                    id: r.id.clone(),
                    expected,
                    found: r.feature.len(),
                });
            }
        }
        if r.feature.iter().any(|v| !v.is_finite()) {
            violations.push(Violation::NonFiniteFeature { id: r.id.clone() });
        }
        if let Some(poly) = &r.polygon {
            if poly.len() < 3 {
                violations.push(Violation::DegeneratePolygon { id: r.id.clone(), vertices: poly.len() });
            }
        }
    }
    ValidationReport { violations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: &str, score: f64) -> MaskRecord {
        MaskRecord::new(id, "chair", score, vec![0.1, 0.2])
    }

    #[test]
    fn duplicate_ids_are_reported() {
        let report = validate_dataset(&[rec("a", 0.5), rec("a", 0.6)]);
        assert_eq!(report.violations, vec![Violation::DuplicateId { id: "a".into() }]);
        assert!(!report.is_valid());
    }

    #[test]
    fn score_out_of_range_is_reported() {
        let report = validate_dataset(&[rec("a", 1.2)]);
        assert_eq!(report.violations, vec![Violation::ScoreOutOfRange { id: "a".into(), value: 1.2 }]);
    }

    #[test]
    fn empty_dataset_is_valid() {
        assert!(validate_dataset(&[]).is_valid());
    }

    #[test]
    fn mixed_dimensions_and_bad_iou() {
        let mut b = rec("b", 0.5);
        b.feature.push(1.0);
        let c = rec("c", 0.5).with_gt_iou(-0.1);
        let mut d = rec("d", 0.5);
        d.polygon = Some(vec![[0.0, 0.0], [1.0, 1.0]]);
        let report = validate_dataset(&[rec("a", 0.1), b, c, d]);
        assert_eq!(report.violations.len(), 3);
        assert!(matches!(report.violations[0], Violation::DimensionMismatch { expected: 2, found: 3, .. }));
        assert!(matches!(report.violations[1], Violation::IouOutOfRange { .. }));
        assert!(matches!(report.violations[2], Violation::DegeneratePolygon { vertices: 2, .. }));
    }

    #[test]
    fn config_rejects_overlapping_bands() {
        let cfg = EngineConfig { k_a: 0.5, ..EngineConfig::default() };
        assert!(cfg.validate().is_err());
        assert!(EngineConfig::default().validate().is_ok());
    }

    #[test]
    fn sample_size_parses_and_serializes() {
        assert_eq!("15".parse::<SampleSize>().unwrap(), SampleSize::Finite(15));
        assert_eq!("all".parse::<SampleSize>().unwrap(), SampleSize::All);
        assert!("0".parse::<SampleSize>().is_err());
        assert_eq!(serde_json::to_string(&SampleSize::All).unwrap(), "\"all\"");
        let back: SampleSize = serde_json::from_str("7").unwrap();
        assert_eq!(back, SampleSize::Finite(7));
    }

    #[test]
    fn ledger_uses_closed_form() {
        let cfg = EngineConfig { initial_masks_drawn: 3, ..EngineConfig::default() };
        let mut ledger = CostLedger::new(&cfg);
        ledger.record_questions(15, &cfg);
        ledger.record_cluster();
        assert_eq!(ledger.wall_seconds_estimate, 3.0 * 80.0 + 15.0 * 2.0);
    }

    #[test]
    fn dataset_field_names() {
        let mut r = rec("m1", 0.5).with_gt_iou(0.9);
        r.image_uri = Some("img/1.jpg".into());
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(keys, ["class", "feature", "gt_iou", "id", "image_uri", "score"]);
    }

    fn arb_record() -> impl Strategy<Value = MaskRecord> {
        (
            "[a-z0-9]{1,8}",
            "[a-z]{1,6}",
            0.0..=1.0f64,
            prop::collection::vec(-1e6..1e6f64, 1..6),
            prop::option::of(0.0..=1.0f64),
            prop::option::of("[a-z/]{1,10}"),
            prop::option::of(prop::collection::vec((0.0..4096.0f64, 0.0..4096.0f64), 3..7)),
        )
            .prop_map(|(id, class_name, score, feature, gt_iou, image_uri, poly)| MaskRecord {
                id,
                class_name,
                score,
                feature,
                gt_iou,
                image_uri,
                polygon: poly.map(|p| p.into_iter().map(|(x, y)| [x, y]).collect()),
            })
    }

    proptest! {
        #[test]
        fn record_json_roundtrip(r in arb_record()) {
            let line = serde_json::to_string(&r).unwrap();
            let back: MaskRecord = serde_json::from_str(&line).unwrap();
            prop_assert_eq!(back, r);
        }

        #[test]
        fn ledger_matches_formula(steps in prop::collection::vec((0u64..40, any::<bool>()), 0..50), init in 0u64..10) {
            let cfg = EngineConfig { initial_masks_drawn: init, ..EngineConfig::default() };
            let mut ledger = CostLedger::new(&cfg);
            for (q, cluster) in steps {
                ledger.record_questions(q, &cfg);
                if cluster { ledger.record_cluster(); }
                let expected = ledger.initial_masks_drawn as f64 * cfg.seconds_per_manual_mask
                    + ledger.questions_asked as f64 * cfg.seconds_per_question;
                prop_assert_eq!(ledger.wall_seconds_estimate, expected);
            }
        }
    }
}
