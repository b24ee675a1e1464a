use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LabelSource, MaskRecord};
use crate::rng::{fnv1a, splitmix64};

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Answered {
        label: bool,
        source: LabelSource,
        response_ms: Option<u64>,
    },
    /// No answer yet; the run suspends until one is delivered.
    Pending,
}

/// Anything that can say whether a displayed mask outlines its object.
pub trait Annotator {
    fn answer(&mut self, mask: &MaskRecord) -> Result<Response>;
}

impl<A: Annotator + ?Sized> Annotator for Box<A> {
    fn answer(&mut self, mask: &MaskRecord) -> Result<Response> {
        (**self).answer(mask)
    }
}

/// Answers from ground truth: positive iff `gt_iou >= k_iou`.
#[derive(Debug, Clone, Copy)]
pub struct OracleAnnotator {
    pub k_iou: f64,
}

impl OracleAnnotator {
    pub fn new(k_iou: f64) -> Self {
        Self { k_iou }
    }
}

impl Annotator for OracleAnnotator {
    fn answer(&mut self, mask: &MaskRecord) -> Result<Response> {
        let label = mask.is_correct(self.k_iou).ok_or_else(|| Error::MissingGroundTruth(mask.id.clone()))?;
        Ok(Response::Answered { label, source: LabelSource::Oracle, response_ms: None })
    }
}

/// Oracle whose answer is flipped with probability `epsilon`. The flip for a
/// mask depends only on the seed and the mask id, so repeated or resumed
/// runs see the same answers.
#[derive(Debug, Clone, Copy)]
pub struct NoisyOracle {
    pub k_iou: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl NoisyOracle {
    pub fn new(k_iou: f64, epsilon: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::Config(format!("noise rate must lie in [0, 1], got {epsilon}")));
        }
        Ok(Self { k_iou, epsilon, seed })
    }

    fn flips(&self, mask_id: &str) -> bool {
        let u = (splitmix64(self.seed ^ fnv1a(mask_id.as_bytes())) >> 11) as f64 / (1u64 << 53) as f64;
        u < self.epsilon
    }
}

impl Annotator for NoisyOracle {
    fn answer(&mut self, mask: &MaskRecord) -> Result<Response> {
        let truth = mask.is_correct(self.k_iou).ok_or_else(|| Error::MissingGroundTruth(mask.id.clone()))?;
        Ok(Response::Answered {
            label: truth ^ self.flips(&mask.id),
            source: LabelSource::Oracle,
            response_ms: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueuedAnswer {
    pub label: bool,
    pub annotator_id: String,
    pub response_ms: Option<u64>,
}

/// Answers delivered asynchronously (by the verification service).
/// Unanswered masks are recorded as requested and reported as pending.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueueAnnotator {
    answers: HashMap<String, QueuedAnswer>,
    requested: Vec<String>,
}

impl QueueAnnotator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn deliver(&mut self, mask_id: impl Into<String>, answer: QueuedAnswer) {
        self.answers.insert(mask_id.into(), answer);
    }

    /// Mask ids asked for since the last drain, in request order, deduplicated.
    pub fn drain_requests(&mut self) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        std::mem::take(&mut self.requested).into_iter().filter(|id| seen.insert(id.clone())).collect()
    }
}

impl Annotator for QueueAnnotator {
    fn answer(&mut self, mask: &MaskRecord) -> Result<Response> {
        match self.answers.get(&mask.id) {
            Some(a) => Ok(Response::Answered {
                label: a.label,
                source: LabelSource::Human { annotator_id: a.annotator_id.clone() },
                response_ms: a.response_ms,
            }),
            None => {
                self.requested.push(mask.id.clone());
                Ok(Response::Pending)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(id: &str, iou: f64) -> MaskRecord {
        MaskRecord::new(id, "c", 0.5, vec![1.0]).with_gt_iou(iou)
    }

    fn label_of(r: Response) -> bool {
        match r {
            Response::Answered { label, .. } => label,
            Response::Pending => panic!("pending"),
        }
    }

    #[test]
    fn oracle_threshold_is_inclusive() {
        let mut o = OracleAnnotator::new(0.75);
        assert!(label_of(o.answer(&mask("a", 0.75)).unwrap()));
        assert!(!label_of(o.answer(&mask("b", 0.7499)).unwrap()));
        let no_gt = MaskRecord::new("c", "c", 0.5, vec![1.0]);
        assert!(o.answer(&no_gt).is_err());
    }

    #[test]
    fn noisy_oracle_flip_rate() {
        let mut noisy = NoisyOracle::new(0.75, 0.2, 11).unwrap();
        let n = 20_000;
        let flipped = (0..n)
            .filter(|i| !label_of(noisy.answer(&mask(&format!("m{i}"), 0.9)).unwrap()))
            .count();
        let rate = flipped as f64 / n as f64;
        assert!((rate - 0.2).abs() < 0.015, "rate {rate}");
        // same mask, same answer
        let a = label_of(noisy.answer(&mask("m7", 0.9)).unwrap());
        let b = label_of(noisy.answer(&mask("m7", 0.9)).unwrap());
        assert_eq!(a, b);
        assert!(NoisyOracle::new(0.75, 1.5, 0).is_err());
    }

    #[test]
    fn queue_reports_pending_then_answers() {
        let mut q = QueueAnnotator::new();
        assert_eq!(q.answer(&mask("a", 0.9)).unwrap(), Response::Pending);
        assert_eq!(q.answer(&mask("a", 0.9)).unwrap(), Response::Pending);
        assert_eq!(q.drain_requests(), vec!["a".to_string()]);
        q.deliver("a", QueuedAnswer { label: true, annotator_id: "w1".into(), response_ms: Some(1400) });
        match q.answer(&mask("a", 0.1)).unwrap() {
            Response::Answered { label, source, response_ms } => {
                assert!(label);
                assert_eq!(source, LabelSource::Human { annotator_id: "w1".into() });
                assert_eq!(response_ms, Some(1400));
            }
            Response::Pending => panic!("expected answer"),
        }
    }
}
