use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};

use super::Strategy;
use crate::hac::Dendrogram;

/// Priority of a candidate: higher mean score first, then larger cluster,
/// then smaller node id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorityKey {
    pub score: f64,
    pub size: usize,
    pub node: usize,
}

impl PriorityKey {
    pub fn of(tree: &Dendrogram, node: usize) -> Self {
        let n = tree.node(node);
        Self { score: n.score, size: n.size, node }
    }
}

impl Eq for PriorityKey {}

impl Ord for PriorityKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then(self.size.cmp(&other.size))
            .then(other.node.cmp(&self.node))
    }
}

impl PartialOrd for PriorityKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "order", content = "items", rename_all = "snake_case")]
pub enum Frontier {
    Fifo(VecDeque<usize>),
    Lifo(Vec<usize>),
    Priority(BinaryHeap<PriorityKey>),
}

impl PartialEq for Frontier {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Frontier::Fifo(a), Frontier::Fifo(b)) => a == b,
            (Frontier::Lifo(a), Frontier::Lifo(b)) => a == b,
            (Frontier::Priority(a), Frontier::Priority(b)) => {
                a.clone().into_sorted_vec() == b.clone().into_sorted_vec()
            }
            _ => false,
        }
    }
}

impl Frontier {
    pub fn for_strategy(strategy: Strategy) -> Self {
        match strategy {
            Strategy::Selection | Strategy::HeuristicOnly => Frontier::Priority(BinaryHeap::new()),
            Strategy::Bfs | Strategy::Threshold { .. } => Frontier::Fifo(VecDeque::new()),
            Strategy::Dfs | Strategy::DfsHeuristic => Frontier::Lifo(Vec::new()),
        }
    }

    pub fn push(&mut self, tree: &Dendrogram, node: usize) {
        match self {
            Frontier::Fifo(q) => q.push_back(node),
            Frontier::Lifo(s) => s.push(node),
            Frontier::Priority(h) => h.push(PriorityKey::of(tree, node)),
        }
    }

    pub fn pop(&mut self) -> Option<usize> {
        match self {
            Frontier::Fifo(q) => q.pop_front(),
            Frontier::Lifo(s) => s.pop(),
            Frontier::Priority(h) => h.pop().map(|k| k.node),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Frontier::Fifo(q) => q.len(),
            Frontier::Lifo(s) => s.len(),
            Frontier::Priority(h) => h.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
