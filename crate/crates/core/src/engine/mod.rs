//! Cluster selection, verification and label propagation over a dendrogram.
//!
//! An [`Engine`] is a resumable state machine: each [`Engine::step`] pops one
//! candidate cluster and either splits it without questions, or samples
//! members for verification and then accepts, rejects or splits it. When the
//! annotator cannot answer yet the engine suspends with the pending mask ids
//! and picks up where it left off on the next call.

pub mod annotator;
pub mod checkpoint;
mod frontier;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use annotator::{Annotator, NoisyOracle, OracleAnnotator, QueueAnnotator, QueuedAnswer, Response};
pub use frontier::{Frontier, PriorityKey};

use crate::error::{Error, Result};
use crate::hac::{Dendrogram, TreeFile};
use crate::model::{CostLedger, EngineConfig, LabelSource, MaskRecord, SampleSize, VerificationLabel};
use crate::rng;

pub const RESULT_FILE_VERSION: u32 = 1;

/// Candidate ordering used while searching the tree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// Highest mean score first, with early splitting below `k_pa`.
    Selection,
    Bfs,
    Dfs,
    /// Depth-first, descending into the higher-scoring child first.
    DfsHeuristic,
    /// Highest mean score first, every popped cluster annotated.
    HeuristicOnly,
    /// Annotate the clusters of one dendrogram cut, never splitting.
    Threshold { tau: f64 },
}

impl Strategy {
    pub fn name(&self) -> String {
        match self {
            Strategy::Selection => "selection".into(),
            Strategy::Bfs => "bfs".into(),
            Strategy::Dfs => "dfs".into(),
            Strategy::DfsHeuristic => "dfs_heuristic".into(),
            Strategy::HeuristicOnly => "heuristic_only".into(),
            Strategy::Threshold { tau } => format!("threshold:{tau}"),
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Ok(match s.as_str() {
            "selection" | "active" => Strategy::Selection,
            "bfs" => Strategy::Bfs,
            "dfs" => Strategy::Dfs,
            "dfs_heuristic" | "dfs-heuristic" => Strategy::DfsHeuristic,
            "heuristic_only" | "heuristic-only" | "heuristic" => Strategy::HeuristicOnly,
            other => match other.strip_prefix("threshold:") {
                Some(tau) => {
                    let tau: f64 = tau.parse().map_err(|_| Error::Config(format!("bad threshold in {other:?}")))?;
                    if !(tau >= 0.0) {
                        return Err(Error::Config(format!("threshold must be nonnegative, got {tau}")));
                    }
                    Strategy::Threshold { tau }
                }
                None => return Err(Error::Config(format!("unknown strategy {other:?}"))),
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Accept,
    Reject,
    Split,
}

/// Accept at `q >= k_a`, reject at `q <= 1 - k_a`, otherwise split.
pub fn decide(q_est: f64, k_a: f64) -> Decision {
    if q_est >= k_a {
        Decision::Accept
    } else if q_est <= 1.0 - k_a {
        Decision::Reject
    } else {
        Decision::Split
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeState {
    Unexplored,
    Candidate,
    Accepted,
    Rejected,
    Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Annotated,
    Accepted,
    Rejected,
    SplitEarly,
    SplitAfterAnnotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    /// Estimated quality fell in the low band.
    Annotated,
    /// Singleton below `k_pa`; rejected without a question.
    EarlyLeaf,
    /// Between the bands but cannot be split (singleton, or threshold mode).
    Unresolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub kind: EventKind,
    pub node: usize,
    pub size: usize,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_est: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<RejectReason>,
    /// Questions asked for this annotation (cached answers excluded).
    #[serde(default)]
    pub new_questions: u64,
    pub ledger: CostLedger,
    /// Accepted masks so far.
    pub quantity: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct InFlight {
    node: usize,
    sample: Vec<usize>,
    new_questions: u64,
}

/// Everything needed to resume a run against the same tree and masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineState {
    pub class_name: String,
    pub strategy: Strategy,
    pub config: EngineConfig,
    frontier: Frontier,
    node_state: Vec<NodeState>,
    q_est: Vec<Option<f64>>,
    pub accepted: Vec<usize>,
    pub rejected: Vec<usize>,
    /// Cached answer per leaf; each mask is asked at most once.
    answers: Vec<Option<bool>>,
    pub direct_labels: Vec<VerificationLabel>,
    pub ledger: CostLedger,
    pub events: Vec<Event>,
    in_flight: Option<InFlight>,
    pub quantity: u64,
}

impl EngineState {
    pub fn node_state(&self, node: usize) -> NodeState {
        self.node_state[node]
    }

    pub fn q_est(&self, node: usize) -> Option<f64> {
        self.q_est[node]
    }

    pub fn frontier_len(&self) -> usize {
        self.frontier.len()
    }

    pub fn is_finished(&self) -> bool {
        self.frontier.is_empty() && self.in_flight.is_none()
    }

    pub fn is_suspended(&self) -> bool {
        self.in_flight.is_some()
    }

    pub fn count_state(&self, state: NodeState) -> usize {
        self.node_state.iter().filter(|&&s| s == state).count()
    }

    pub fn cached_answer(&self, leaf: usize) -> Option<bool> {
        self.answers[leaf]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Progressed,
    /// Waiting on answers for these mask ids.
    Suspended(Vec<String>),
    Finished,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Progress {
    Finished,
    Suspended(Vec<String>),
    /// Stopped at the requested event budget.
    Paused,
}

pub struct Engine<'a> {
    tree: &'a Dendrogram,
    masks: Vec<&'a MaskRecord>,
    state: EngineState,
}

impl<'a> Engine<'a> {
    /// Fresh run. `masks` must contain every tree leaf (by id); extra records are ignored.
    pub fn new(tree: &'a Dendrogram, masks: &'a [MaskRecord], strategy: Strategy, config: EngineConfig) -> Result<Self> {
        config.validate()?;
        let total = tree.nodes().len();
        let mut state = EngineState {
            class_name: tree.class_name.clone(),
            strategy,
            ledger: CostLedger::new(&config),
            config,
            frontier: Frontier::for_strategy(strategy),
            node_state: vec![NodeState::Unexplored; total],
            q_est: vec![None; total],
            accepted: Vec::new(),
            rejected: Vec::new(),
            answers: vec![None; tree.n_leaves()],
            direct_labels: Vec::new(),
            events: Vec::new(),
            in_flight: None,
            quantity: 0,
        };
        match strategy {
            Strategy::Threshold { tau } => {
                let mut cut = tree.cut_at_threshold(tau);
                cut.sort_by(|&a, &b| PriorityKey::of(tree, b).cmp(&PriorityKey::of(tree, a)));
                for node in cut {
                    state.node_state[node] = NodeState::Candidate;
                    state.frontier.push(tree, node);
                }
            }
            _ => {
                state.node_state[tree.root()] = NodeState::Candidate;
                state.frontier.push(tree, tree.root());
            }
        }
        let masks = tree.align_masks(masks)?;
        Ok(Self { tree, masks, state })
    }

    pub fn resume(tree: &'a Dendrogram, masks: &'a [MaskRecord], state: EngineState) -> Result<Self> {
        check_compatible(tree, &state)?;
        let masks = tree.align_masks(masks)?;
        Ok(Self { tree, masks, state })
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn into_state(self) -> EngineState {
        self.state
    }

    pub fn tree(&self) -> &Dendrogram {
        self.tree
    }

    pub fn run<A: Annotator + ?Sized>(&mut self, annotator: &mut A) -> Result<Progress> {
        self.run_for(annotator, usize::MAX)
    }

    /// Runs until finished, suspended, or `max_steps` steps have been taken.
    pub fn run_for<A: Annotator + ?Sized>(&mut self, annotator: &mut A, max_steps: usize) -> Result<Progress> {
        for _ in 0..max_steps {
            match self.step(annotator)? {
                Step::Progressed => {}
                Step::Finished => return Ok(Progress::Finished),
                Step::Suspended(ids) => return Ok(Progress::Suspended(ids)),
            }
        }
        Ok(if self.state.is_finished() { Progress::Finished } else { Progress::Paused })
    }

    pub fn step<A: Annotator + ?Sized>(&mut self, annotator: &mut A) -> Result<Step> {
        if let Some(job) = self.state.in_flight.take() {
            return self.collect_answers(job, annotator);
        }
        let Some(node) = self.state.frontier.pop() else {
            return Ok(Step::Finished);
        };
        let info = self.tree.node(node);
        let cfg = &self.state.config;
        if self.state.strategy == Strategy::Selection && cfg.k_pa > 0.0 && info.score <= cfg.k_pa {
            if info.is_leaf() {
                self.reject(node, RejectReason::EarlyLeaf, None);
            } else {
                self.state.node_state[node] = NodeState::Split;
                self.push_children(node);
                self.log(EventKind::SplitEarly, node, None, None, 0);
            }
            return Ok(Step::Progressed);
        }
        let sample = self.draw_sample(node);
        self.collect_answers(InFlight { node, sample, new_questions: 0 }, annotator)
    }

    /// Members whose answers determine the node's estimate: every already
    /// verified member plus a uniform draw, without replacement, from the
    /// unverified ones to make up `n_s`.
    fn draw_sample(&self, node: usize) -> Vec<usize> {
        let members = self.tree.members(node);
        if self.state.config.n_s == SampleSize::All {
            return members.to_vec();
        }
        let (mut sample, unverified): (Vec<usize>, Vec<usize>) =
            members.iter().partition(|&&leaf| self.state.answers[leaf].is_some());
        let shortfall = self.state.config.n_s.take(members.len()).saturating_sub(sample.len()).min(unverified.len());
        if shortfall > 0 {
            let mut stream = rng::stream(self.state.config.rng_seed, node as u64);
            let picks = rand::seq::index::sample(&mut stream, unverified.len(), shortfall);
            sample.extend(picks.into_iter().map(|i| unverified[i]));
        }
        sample
    }

    fn collect_answers<A: Annotator + ?Sized>(&mut self, mut job: InFlight, annotator: &mut A) -> Result<Step> {
        let mut pending = Vec::new();
        for &leaf in &job.sample {
            if self.state.answers[leaf].is_some() {
                continue;
            }
            let mask = self.masks[leaf];
            match annotator.answer(mask)? {
                Response::Answered { label, source, response_ms } => {
                    self.state.answers[leaf] = Some(label);
                    self.state.direct_labels.push(VerificationLabel {
                        mask_id: mask.id.clone(),
                        label: label as u8,
                        source,
                        response_ms,
                        is_gold: false,
                    });
                    self.state.ledger.record_questions(1, &self.state.config);
                    job.new_questions += 1;
                }
                Response::Pending => pending.push(mask.id.clone()),
            }
        }
        if !pending.is_empty() {
            self.state.in_flight = Some(job);
            return Ok(Step::Suspended(pending));
        }

        let node = job.node;
        let positives = job.sample.iter().filter(|&&leaf| self.state.answers[leaf] == Some(true)).count();
        let q = positives as f64 / job.sample.len() as f64;
        self.state.q_est[node] = Some(q);
        self.state.ledger.record_cluster();
        self.log(EventKind::Annotated, node, Some(q), None, job.new_questions);

        let is_leaf = self.tree.node(node).is_leaf();
        match decide(q, self.state.config.k_a) {
            Decision::Accept => {
                self.state.node_state[node] = NodeState::Accepted;
                self.state.accepted.push(node);
                self.state.quantity += self.tree.node(node).size as u64;
                self.log(EventKind::Accepted, node, Some(q), None, 0);
            }
            Decision::Reject => self.reject(node, RejectReason::Annotated, Some(q)),
            Decision::Split if is_leaf || matches!(self.state.strategy, Strategy::Threshold { .. }) => {
                self.reject(node, RejectReason::Unresolved, Some(q))
            }
            Decision::Split => {
                self.state.node_state[node] = NodeState::Split;
                self.push_children(node);
                self.log(EventKind::SplitAfterAnnotation, node, Some(q), None, 0);
            }
        }
        Ok(Step::Progressed)
    }

    fn reject(&mut self, node: usize, reason: RejectReason, q: Option<f64>) {
        self.state.node_state[node] = NodeState::Rejected;
        self.state.rejected.push(node);
        self.log(EventKind::Rejected, node, q, Some(reason), 0);
    }

    fn push_children(&mut self, node: usize) {
        let (l, r) = self.tree.node(node).children.expect("split of a leaf");
        let (first, second) = match self.state.strategy {
            Strategy::DfsHeuristic => {
                // the child pushed last is explored first
                if PriorityKey::of(self.tree, l) > PriorityKey::of(self.tree, r) {
                    (r, l)
                } else {
                    (l, r)
                }
            }
            _ => (l, r),
        };
        for child in [first, second] {
            self.state.node_state[child] = NodeState::Candidate;
            self.state.frontier.push(self.tree, child);
        }
    }

    fn log(&mut self, kind: EventKind, node: usize, q_est: Option<f64>, reason: Option<RejectReason>, new_questions: u64) {
        let info = self.tree.node(node);
        self.state.events.push(Event {
            seq: self.state.events.len() as u64,
            kind,
            node,
            size: info.size,
            score: info.score,
            q_est,
            reason,
            new_questions,
            ledger: self.state.ledger,
            quantity: self.state.quantity,
        });
    }

    /// Checks the end-of-run invariants and assembles the result.
    pub fn finish(self) -> Result<RunResult> {
        if !self.state.is_finished() {
            return Err(Error::Input("run has not finished".into()));
        }
        check_invariants(self.tree, &self.state)?;
        Ok(RunResult::assemble(self.tree, self.state))
    }
}

pub(crate) fn check_compatible(tree: &Dendrogram, state: &EngineState) -> Result<()> {
    if state.node_state.len() != tree.nodes().len()
        || state.answers.len() != tree.n_leaves()
        || state.class_name != tree.class_name
    {
        return Err(Error::Input(format!("checkpoint state does not belong to the {:?} tree", tree.class_name)));
    }
    Ok(())
}

fn invariant_error(message: String, state: &EngineState) -> Error {
    Error::Invariant { message, state_dump: serde_json::to_string(state).unwrap_or_default() }
}

/// Accepted and rejected clusters partition the leaves; the question budget holds.
pub fn check_invariants(tree: &Dendrogram, state: &EngineState) -> Result<()> {
    let mut owner: Vec<Option<usize>> = vec![None; tree.n_leaves()];
    for &node in state.accepted.iter().chain(&state.rejected) {
        for &leaf in tree.members(node) {
            if let Some(prev) = owner[leaf] {
                return Err(invariant_error(format!("leaf {leaf} covered by clusters {prev} and {node}"), state));
            }
            owner[leaf] = Some(node);
        }
    }
    if let Some(leaf) = owner.iter().position(Option::is_none) {
        return Err(invariant_error(format!("leaf {leaf} is neither accepted nor rejected"), state));
    }
    if let SampleSize::Finite(k) = state.config.n_s {
        let budget = k as u64 * state.ledger.clusters_annotated;
        if state.ledger.questions_asked > budget {
            return Err(invariant_error(
                format!("{} questions exceed n_s x clusters = {budget}", state.ledger.questions_asked),
                state,
            ));
        }
    }
    Ok(())
}

/// Outcome of one finished run on one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub class_name: String,
    pub state: EngineState,
    /// Direct answers followed by labels propagated from decided clusters.
    pub labels: Vec<VerificationLabel>,
}

impl RunResult {
    fn assemble(tree: &Dendrogram, state: EngineState) -> Self {
        let mut labels = state.direct_labels.clone();
        for (&node, label) in state.accepted.iter().map(|n| (n, 1u8)).chain(state.rejected.iter().map(|n| (n, 0u8))) {
            labels.extend(tree.member_ids(node).map(|id| VerificationLabel {
                mask_id: id.to_string(),
                label,
                source: LabelSource::Propagated { cluster_id: node },
                response_ms: None,
                is_gold: false,
            }));
        }
        Self { class_name: state.class_name.clone(), state, labels }
    }

    pub fn events(&self) -> &[Event] {
        &self.state.events
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.state.ledger
    }

    /// Leaf indices of accepted masks, sorted.
    pub fn accepted_leaves(&self, tree: &Dendrogram) -> Vec<usize> {
        let mut out: Vec<usize> = self.state.accepted.iter().flat_map(|&n| tree.members(n).iter().copied()).collect();
        out.sort_unstable();
        out
    }

    pub fn accepted_mask_ids<'t>(&self, tree: &'t Dendrogram) -> Vec<&'t str> {
        let mut ids: Vec<&str> = self.state.accepted.iter().flat_map(|&n| tree.member_ids(n)).collect();
        ids.sort_unstable();
        ids
    }

    pub fn propagated_labels(&self) -> impl Iterator<Item = &VerificationLabel> {
        self.labels.iter().filter(|l| matches!(l.source, LabelSource::Propagated { .. }))
    }
}

/// Drives a run to completion; a pending answer is an error here.
pub fn run_strategy<A: Annotator + ?Sized>(
    tree: &Dendrogram,
    masks: &[MaskRecord],
    strategy: Strategy,
    annotator: &mut A,
    config: &EngineConfig,
) -> Result<RunResult> {
    let mut engine = Engine::new(tree, masks, strategy, config.clone())?;
    match engine.run(annotator)? {
        Progress::Finished => engine.finish(),
        Progress::Suspended(ids) => Err(Error::Suspended { pending: ids.len() }),
        Progress::Paused => unreachable!("unbounded run paused"),
    }
}

/// Best-first search with early splitting of low-score clusters.
pub fn run_selection<A: Annotator + ?Sized>(
    tree: &Dendrogram,
    masks: &[MaskRecord],
    annotator: &mut A,
    config: &EngineConfig,
) -> Result<RunResult> {
    run_strategy(tree, masks, Strategy::Selection, annotator, config)
}

/// Baseline search; every popped cluster is annotated.
pub fn run_baseline<A: Annotator + ?Sized>(
    tree: &Dendrogram,
    masks: &[MaskRecord],
    strategy: Strategy,
    annotator: &mut A,
    config: &EngineConfig,
) -> Result<RunResult> {
    if strategy == Strategy::Selection {
        return Err(Error::Config("selection is not a baseline strategy".into()));
    }
    run_strategy(tree, masks, strategy, annotator, config)
}

/// Samples `min(n_s, |members|)` members uniformly without replacement and
/// returns the fraction answered positively.
pub fn estimate_quality<A: Annotator + ?Sized, R: rand::Rng + ?Sized>(
    members: &[&MaskRecord],
    annotator: &mut A,
    n_s: SampleSize,
    rng: &mut R,
) -> Result<(f64, Vec<VerificationLabel>)> {
    if members.is_empty() {
        return Err(Error::Input("cannot estimate the quality of an empty cluster".into()));
    }
    let take = n_s.take(members.len());
    let picks = rand::seq::index::sample(rng, members.len(), take);
    let mut labels = Vec::with_capacity(take);
    let mut pending = 0;
    for i in picks {
        let mask = members[i];
        match annotator.answer(mask)? {
            Response::Answered { label, source, response_ms } => labels.push(VerificationLabel {
                mask_id: mask.id.clone(),
                label: label as u8,
                source,
                response_ms,
                is_gold: false,
            }),
            Response::Pending => pending += 1,
        }
    }
    if pending > 0 {
        return Err(Error::Suspended { pending });
    }
    let q = labels.iter().filter(|l| l.positive()).count() as f64 / labels.len() as f64;
    Ok((q, labels))
}

/// Top-`k` masks by score, ties broken by id. No questions asked.
pub fn confidence_baseline(masks: &[MaskRecord], k: usize) -> Result<Vec<String>> {
    if k > masks.len() {
        return Err(Error::Input(format!("asked for {k} masks out of {}", masks.len())));
    }
    let mut order: Vec<&MaskRecord> = masks.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    Ok(order.into_iter().take(k).map(|m| m.id.clone()).collect())
}

/// Results for every class of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestResult {
    pub version: u32,
    pub strategy: Strategy,
    pub config: EngineConfig,
    pub classes: Vec<RunResult>,
}

impl ForestResult {
    pub fn check_version(&self) -> Result<()> {
        if self.version != RESULT_FILE_VERSION {
            return Err(Error::Version { found: self.version, expected: RESULT_FILE_VERSION });
        }
        Ok(())
    }

    pub fn total_ledger(&self) -> CostLedger {
        self.classes
            .iter()
            .fold(CostLedger::new(&self.config), |acc, r| acc.merged(r.ledger(), &self.config))
    }
}

/// Runs every class of the forest in parallel, one annotator per class.
pub fn run_forest<F, A>(
    trees: &TreeFile,
    masks: &[MaskRecord],
    strategy: Strategy,
    config: &EngineConfig,
    make_annotator: F,
) -> Result<ForestResult>
where
    F: Fn(&str) -> A + Sync,
    A: Annotator,
{
    use rayon::prelude::*;
    let mut by_class: HashMap<&str, Vec<MaskRecord>> = HashMap::new();
    for m in masks {
        by_class.entry(m.class_name.as_str()).or_default().push(m.clone());
    }
    let classes = trees
        .trees
        .par_iter()
        .map(|tree| {
            let class_masks = by_class.get(tree.class_name.as_str()).map(Vec::as_slice).unwrap_or(&[]);
            let mut annotator = make_annotator(&tree.class_name);
            run_strategy(tree, class_masks, strategy, &mut annotator, config)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ForestResult { version: RESULT_FILE_VERSION, strategy, config: config.clone(), classes })
}
