//! Versioned, self-contained snapshot of a multi-class run.

use serde::{Deserialize, Serialize};

use super::{Annotator, Engine, EngineState, ForestResult, Progress, Strategy, RESULT_FILE_VERSION};
use crate::error::{Error, Result};
use crate::hac::TreeFile;
use crate::model::{EngineConfig, MaskRecord};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Trees, masks and per-class engine state. Random draws are derived from
/// `config.rng_seed` and node ids, so no generator state needs saving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub version: u32,
    pub strategy: Strategy,
    pub config: EngineConfig,
    pub trees: TreeFile,
    pub masks: Vec<MaskRecord>,
    pub states: Vec<EngineState>,
}

impl RunCheckpoint {
    pub fn start(trees: TreeFile, masks: Vec<MaskRecord>, strategy: Strategy, config: EngineConfig) -> Result<Self> {
        trees.check_version()?;
        let states = trees
            .trees
            .iter()
            .map(|t| Engine::new(t, &masks, strategy, config.clone()).map(Engine::into_state))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { version: CHECKPOINT_VERSION, strategy, config, trees, masks, states })
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: self.version, expected: CHECKPOINT_VERSION });
        }
        self.trees.check_version()?;
        if self.states.len() != self.trees.trees.len() {
            return Err(Error::Input("checkpoint has a different number of states and trees".into()));
        }
        for (tree, state) in self.trees.trees.iter().zip(&self.states) {
            Engine::resume(tree, &self.masks, state.clone())?;
        }
        Ok(())
    }

    pub fn is_finished(&self) -> bool {
        self.states.iter().all(EngineState::is_finished)
    }

    /// Advances class `index` until it finishes or suspends.
    pub fn advance<A: Annotator + ?Sized>(&mut self, index: usize, annotator: &mut A) -> Result<Progress> {
        let tree = &self.trees.trees[index];
        super::check_compatible(tree, &self.states[index])?;
        tree.align_masks(&self.masks)?;
        let state = std::mem::replace(&mut self.states[index], placeholder_state());
        let mut engine = Engine::resume(tree, &self.masks, state)?;
        let outcome = engine.run(annotator);
        self.states[index] = engine.into_state();
        outcome
    }

    /// Advances class `index` by at most `steps` steps.
    pub fn advance_steps<A: Annotator + ?Sized>(&mut self, index: usize, annotator: &mut A, steps: usize) -> Result<Progress> {
        let tree = &self.trees.trees[index];
        super::check_compatible(tree, &self.states[index])?;
        tree.align_masks(&self.masks)?;
        let state = std::mem::replace(&mut self.states[index], placeholder_state());
        let mut engine = Engine::resume(tree, &self.masks, state)?;
        let outcome = engine.run_for(annotator, steps);
        self.states[index] = engine.into_state();
        outcome
    }

    /// Final results; every class must have finished.
    pub fn into_result(self) -> Result<ForestResult> {
        let classes = self
            .trees
            .trees
            .iter()
            .zip(self.states)
            .map(|(tree, state)| Engine::resume(tree, &self.masks, state)?.finish())
            .collect::<Result<Vec<_>>>()?;
        Ok(ForestResult { version: RESULT_FILE_VERSION, strategy: self.strategy, config: self.config, classes })
    }
}

fn placeholder_state() -> EngineState {
    EngineState {
        class_name: String::new(),
        strategy: Strategy::Selection,
        config: EngineConfig::default(),
        frontier: super::Frontier::Lifo(Vec::new()),
        node_state: Vec::new(),
        q_est: Vec::new(),
        accepted: Vec::new(),
        rejected: Vec::new(),
        answers: Vec::new(),
        direct_labels: Vec::new(),
        ledger: Default::default(),
        events: Vec::new(),
        in_flight: None,
        quantity: 0,
    }
}
