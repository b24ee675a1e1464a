//! In-memory session state. Everything here is a deterministic function of
//! the creation record and the ordered answers applied to it, which is what
//! lets the store rebuild a session from its log.

use std::collections::{BTreeMap, HashMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::checkpoint::RunCheckpoint;
use crate::engine::{NodeState, QueueAnnotator, QueuedAnswer};
use crate::error::{Error, Result};
use crate::model::{LabelSource, MaskRecord, VerificationLabel};
use crate::rng::{splitmix64, stream};

pub const PAYLOAD_VERSION: u32 = 1;
pub const DEFAULT_ACCURACY_THRESHOLD: f64 = 0.8;
pub const DEFAULT_MIN_GOLD: u64 = 10;

/// A hidden quality-control question with a known answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldQuestion {
    pub mask: MaskRecord,
    /// Falls back to `gt_iou >= k_iou` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub session_id: String,
    pub gold: Vec<GoldQuestion>,
    pub gold_rate: f64,
    pub seed: u64,
    #[serde(default = "default_threshold")]
    pub accuracy_threshold: f64,
    #[serde(default = "default_min_gold")]
    pub min_gold: u64,
}

fn default_threshold() -> f64 {
    DEFAULT_ACCURACY_THRESHOLD
}

fn default_min_gold() -> u64 {
    DEFAULT_MIN_GOLD
}

impl SessionSpec {
    pub fn new(session_id: impl Into<String>, gold: Vec<GoldQuestion>, gold_rate: f64, seed: u64) -> Self {
        Self {
            session_id: session_id.into(),
            gold,
            gold_rate,
            seed,
            accuracy_threshold: DEFAULT_ACCURACY_THRESHOLD,
            min_gold: DEFAULT_MIN_GOLD,
        }
    }
}

pub fn validate_session_id(id: &str) -> Result<()> {
    let ok = !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_');
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("session id {id:?} must be 1-64 characters of [A-Za-z0-9_-]")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuestionKind {
    Engine { class_index: usize, mask_id: String },
    Gold { gold_index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub token: String,
    pub kind: QuestionKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub token: String,
    pub label: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_ms: Option<u64>,
    pub annotator_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnsweredQuestion {
    pub question: Question,
    pub answer: Answer,
    /// Whether the session was flagged when the answer arrived.
    pub flagged_at_answer: bool,
}

/// What an annotator sees. Gold and engine questions look the same.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionPayload {
    pub version: u32,
    pub token: String,
    pub class_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_uri: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polygon: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextQuestion {
    Question(QuestionPayload),
    /// Nothing to answer right now; `finished` when the run is complete.
    Drained { finished: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub version: u32,
    pub token: String,
    pub answered: u64,
    pub outstanding: usize,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionProgress {
    pub version: u32,
    pub session_id: String,
    pub answered: u64,
    pub outstanding: usize,
    pub gold_answered: u64,
    pub gold_correct: u64,
    pub accuracy: Option<f64>,
    pub flagged: bool,
    pub clusters_accepted: usize,
    pub clusters_rejected: usize,
    pub clusters_split: usize,
    pub clusters_annotated: u64,
    pub questions_asked: u64,
    pub quantity: u64,
    pub response_ms_total: u64,
    /// Answers given times the per-question time model.
    pub model_seconds: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedLabel {
    pub class_name: String,
    #[serde(flatten)]
    pub label: VerificationLabel,
    pub trusted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelExport {
    pub version: u32,
    pub session_id: String,
    pub flagged: bool,
    pub finished: bool,
    pub labels: Vec<ExportedLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub spec: SessionSpec,
    pub checkpoint: RunCheckpoint,
    gold_labels: Vec<bool>,
    queue: QueueAnnotator,
    outstanding: VecDeque<Question>,
    answered: BTreeMap<String, AnsweredQuestion>,
    issued: u64,
    gold_issued: u64,
    gold_credit: f64,
    pub gold_answered: u64,
    pub gold_correct: u64,
    pub flagged: bool,
    pub response_ms_total: u64,
    #[serde(skip)]
    mask_index: HashMap<String, usize>,
}

impl SessionState {
    /// Validates inputs and issues the first batch of questions.
    pub fn create(spec: SessionSpec, checkpoint: RunCheckpoint) -> Result<Self> {
        validate_session_id(&spec.session_id)?;
        checkpoint.validate()?;
        if !(0.0..1.0).contains(&spec.gold_rate) {
            return Err(Error::Config(format!("gold_rate must lie in [0, 1), got {}", spec.gold_rate)));
        }
        if spec.gold_rate > 0.0 && spec.gold.is_empty() {
            return Err(Error::Config("gold_rate > 0 needs a nonempty gold set".into()));
        }
        if !(0.0..=1.0).contains(&spec.accuracy_threshold) {
            return Err(Error::Config(format!("accuracy threshold must lie in [0, 1], got {}", spec.accuracy_threshold)));
        }
        let k_iou = checkpoint.config.k_iou;
        let gold_labels = spec
            .gold
            .iter()
            .map(|g| {
                g.label
                    .or_else(|| g.mask.is_correct(k_iou))
                    .ok_or_else(|| Error::Input(format!("gold mask {:?} has neither a label nor gt_iou", g.mask.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let gold_credit = stream(spec.seed, u64::MAX).random::<f64>();
        let mut state = Self {
            spec,
            checkpoint,
            gold_labels,
            queue: QueueAnnotator::new(),
            outstanding: VecDeque::new(),
            answered: BTreeMap::new(),
            issued: 0,
            gold_issued: 0,
            gold_credit,
            gold_answered: 0,
            gold_correct: 0,
            flagged: false,
            response_ms_total: 0,
            mask_index: HashMap::new(),
        };
        state.rebuild_index();
        state.refill()?;
        Ok(state)
    }

    /// Restores the lookup table skipped during serialization.
    pub fn rebuild_index(&mut self) {
        self.mask_index = self.checkpoint.masks.iter().enumerate().map(|(i, m)| (m.id.clone(), i)).collect();
    }

    pub fn session_id(&self) -> &str {
        &self.spec.session_id
    }

    pub fn is_finished(&self) -> bool {
        self.checkpoint.is_finished()
    }

    pub fn outstanding(&self) -> impl Iterator<Item = &Question> {
        self.outstanding.iter()
    }

    pub fn answered(&self) -> impl Iterator<Item = &AnsweredQuestion> {
        self.answered.values()
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.gold_answered > 0).then(|| self.gold_correct as f64 / self.gold_answered as f64)
    }

    fn next_token(&mut self) -> String {
        loop {
            let token = format!("{:016x}", splitmix64(self.spec.seed ^ splitmix64(self.issued)));
            self.issued += 1;
            if !self.answered.contains_key(&token) && !self.outstanding.iter().any(|q| q.token == token) {
                return token;
            }
        }
    }

    fn push_engine_question(&mut self, class_index: usize, mask_id: String) {
        let token = self.next_token();
        self.outstanding.push_back(Question { token, kind: QuestionKind::Engine { class_index, mask_id } });
        if self.spec.gold_rate > 0.0 {
            // gold share of all questions equals gold_rate
            self.gold_credit += self.spec.gold_rate / (1.0 - self.spec.gold_rate);
            while self.gold_credit >= 1.0 {
                self.gold_credit -= 1.0;
                let gold_index = stream(self.spec.seed, self.gold_issued).random_range(0..self.spec.gold.len());
                self.gold_issued += 1;
                let token = self.next_token();
                self.outstanding.push_back(Question { token, kind: QuestionKind::Gold { gold_index } });
            }
        }
    }

    /// Advances every class that has no open questions and queues what it asks for.
    fn refill(&mut self) -> Result<()> {
        for class_index in 0..self.checkpoint.states.len() {
            let waiting = self
                .outstanding
                .iter()
                .any(|q| matches!(&q.kind, QuestionKind::Engine { class_index: c, .. } if *c == class_index));
            if waiting || self.checkpoint.states[class_index].is_finished() {
                continue;
            }
            self.checkpoint.advance(class_index, &mut self.queue)?;
            for mask_id in self.queue.drain_requests() {
                self.push_engine_question(class_index, mask_id);
            }
        }
        Ok(())
    }

    pub fn next_question(&self) -> NextQuestion {
        let Some(q) = self.outstanding.front() else {
            return NextQuestion::Drained { finished: self.is_finished() };
        };
        let mask = match &q.kind {
            QuestionKind::Engine { mask_id, .. } => &self.checkpoint.masks[self.mask_index[mask_id]],
            QuestionKind::Gold { gold_index } => &self.spec.gold[*gold_index].mask,
        };
        NextQuestion::Question(QuestionPayload {
            version: PAYLOAD_VERSION,
            token: q.token.clone(),
            class_name: mask.class_name.clone(),
            image_uri: mask.image_uri.clone(),
            polygon: mask.polygon.clone(),
        })
    }

    /// Rejects answers the session would not accept, without touching state.
    pub fn check_answer(&self, answer: &Answer) -> Result<()> {
        if self.answered.contains_key(&answer.token) {
            return Err(Error::DuplicateAnswer(answer.token.clone()));
        }
        if !self.outstanding.iter().any(|q| q.token == answer.token) {
            return Err(Error::UnknownToken(answer.token.clone()));
        }
        Ok(())
    }

    pub fn apply_answer(&mut self, answer: Answer) -> Result<Ack> {
        self.check_answer(&answer)?;
        let pos = self.outstanding.iter().position(|q| q.token == answer.token).expect("checked above");
        let question = self.outstanding.remove(pos).expect("position is in range");
        self.response_ms_total += answer.response_ms.unwrap_or(0);
        let flagged_at_answer = self.flagged;
        match &question.kind {
            QuestionKind::Gold { gold_index } => {
                self.gold_answered += 1;
                if self.gold_labels[*gold_index] == answer.label {
                    self.gold_correct += 1;
                }
                if self.gold_answered >= self.spec.min_gold
                    && (self.gold_correct as f64) < self.spec.accuracy_threshold * self.gold_answered as f64
                {
                    self.flagged = true;
                }
            }
            QuestionKind::Engine { mask_id, .. } => {
                self.queue.deliver(
                    mask_id.clone(),
                    QueuedAnswer {
                        label: answer.label,
                        annotator_id: answer.annotator_id.clone(),
                        response_ms: answer.response_ms,
                    },
                );
            }
        }
        let token = answer.token.clone();
        self.answered.insert(token.clone(), AnsweredQuestion { question, answer, flagged_at_answer });
        self.refill()?;
        Ok(Ack {
            version: PAYLOAD_VERSION,
            token,
            answered: self.answered.len() as u64,
            outstanding: self.outstanding.len(),
            flagged: self.flagged,
        })
    }

    pub fn progress(&self) -> SessionProgress {
        let states = &self.checkpoint.states;
        let count = |s: NodeState| states.iter().map(|e| e.count_state(s)).sum::<usize>();
        let answered = self.answered.len() as u64;
        SessionProgress {
            version: PAYLOAD_VERSION,
            session_id: self.spec.session_id.clone(),
            answered,
            outstanding: self.outstanding.len(),
            gold_answered: self.gold_answered,
            gold_correct: self.gold_correct,
            accuracy: self.accuracy(),
            flagged: self.flagged,
            clusters_accepted: count(NodeState::Accepted),
            clusters_rejected: count(NodeState::Rejected),
            clusters_split: count(NodeState::Split),
            clusters_annotated: states.iter().map(|e| e.ledger.clusters_annotated).sum(),
            questions_asked: states.iter().map(|e| e.ledger.questions_asked).sum(),
            quantity: states.iter().map(|e| e.quantity).sum(),
            response_ms_total: self.response_ms_total,
            model_seconds: answered as f64 * self.checkpoint.config.seconds_per_question,
            finished: self.is_finished(),
        }
    }

    /// Accepted masks so far, ordered by class then mask id. A mask whose own
    /// positive answer was given is direct, the rest are propagated.
    pub fn export_labels(&self) -> LabelExport {
        let mut labels = Vec::new();
        for (tree, state) in self.checkpoint.trees.trees.iter().zip(&self.checkpoint.states) {
            let direct: HashMap<&str, &VerificationLabel> =
                state.direct_labels.iter().filter(|l| l.positive()).map(|l| (l.mask_id.as_str(), l)).collect();
            let mut class_labels: Vec<VerificationLabel> = state
                .accepted
                .iter()
                .flat_map(|&node| tree.member_ids(node).map(move |id| (node, id)))
                .map(|(node, id)| match direct.get(id) {
                    Some(l) => (*l).clone(),
                    None => VerificationLabel {
                        mask_id: id.to_string(),
                        label: 1,
                        source: LabelSource::Propagated { cluster_id: node },
                        response_ms: None,
                        is_gold: false,
                    },
                })
                .collect();
            class_labels.sort_by(|a, b| a.mask_id.cmp(&b.mask_id));
            labels.extend(class_labels.into_iter().map(|label| ExportedLabel {
                class_name: tree.class_name.clone(),
                label,
                trusted: !self.flagged,
            }));
        }
        LabelExport {
            version: PAYLOAD_VERSION,
            session_id: self.spec.session_id.clone(),
            flagged: self.flagged,
            finished: self.is_finished(),
            labels,
        }
    }
}
