//! Complete-linkage agglomerative clustering and the dendrogram it produces.
//!
//! Leaves are numbered `0..n` in input order and the `k`-th merge (sorted by
//! height) creates node `n + k`. Every node's members form a contiguous run
//! of the left-first leaf ordering, so member lookups are slices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MaskRecord;

pub const DEFAULT_MASK_CAP: usize = 20_000;
pub const TREE_FILE_VERSION: u32 = 1;

/// Unit-normalized feature with the weighted score appended.
pub fn build_feature(mask: &MaskRecord, score_weight: f64) -> Vec<f64> {
    let norm = mask.feature.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let mut out: Vec<f64> = mask.feature.iter().map(|v| v / norm).collect();
    out.push(score_weight * mask.score);
    out
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterNode {
    pub id: usize,
    pub children: Option<(usize, usize)>,
    pub linkage_height: f64,
    /// Mean member score.
    pub score: f64,
    pub size: usize,
    span_start: usize,
}

impl ClusterNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

/// Serialized form: enough to rebuild every node bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DendrogramRepr {
    class_name: String,
    leaf_ids: Vec<String>,
    leaf_scores: Vec<f64>,
    merge_sequence: Vec<Merge>,
    leaf_order: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subsampled_from: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DendrogramRepr", into = "DendrogramRepr")]
pub struct Dendrogram {
    pub class_name: String,
    pub leaf_ids: Vec<String>,
    leaf_scores: Vec<f64>,
    pub merge_sequence: Vec<Merge>,
    leaf_order: Vec<usize>,
    nodes: Vec<ClusterNode>,
    /// Original class size when the input was subsampled to fit the cap.
    pub subsampled_from: Option<usize>,
}

impl From<Dendrogram> for DendrogramRepr {
    fn from(d: Dendrogram) -> Self {
        DendrogramRepr {
            class_name: d.class_name,
            leaf_ids: d.leaf_ids,
            leaf_scores: d.leaf_scores,
            merge_sequence: d.merge_sequence,
            leaf_order: d.leaf_order,
            subsampled_from: d.subsampled_from,
        }
    }
}

impl TryFrom<DendrogramRepr> for Dendrogram {
    type Error = Error;

    fn try_from(r: DendrogramRepr) -> Result<Self> {
        let tree = Dendrogram::assemble(r.class_name, r.leaf_ids, r.leaf_scores, r.merge_sequence, r.subsampled_from)?;
        if tree.leaf_order != r.leaf_order {
            return Err(Error::Input("stored leaf ordering does not match the merge sequence".into()));
        }
        Ok(tree)
    }
}

impl Dendrogram {
    /// Builds nodes, spans and leaf order from a height-sorted merge list.
    pub fn assemble(
        class_name: String,
        leaf_ids: Vec<String>,
        leaf_scores: Vec<f64>,
        merge_sequence: Vec<Merge>,
        subsampled_from: Option<usize>,
    ) -> Result<Self> {
        let n = leaf_ids.len();
        if n == 0 || leaf_scores.len() != n {
            return Err(Error::Input("dendrogram needs matching, nonempty leaf ids and scores".into()));
        }
        if merge_sequence.len() != n - 1 {
            return Err(Error::Input(format!("{} leaves need {} merges, got {}", n, n - 1, merge_sequence.len())));
        }
        let total = 2 * n - 1;
        let mut nodes: Vec<ClusterNode> = leaf_scores
            .iter()
            .enumerate()
            .map(|(i, &s)| ClusterNode { id: i, children: None, linkage_height: 0.0, score: s, size: 1, span_start: 0 })
            .collect();
        let mut sums: Vec<f64> = leaf_scores.clone();
        let mut used = vec![false; total];
        for (k, m) in merge_sequence.iter().enumerate() {
            let id = n + k;
            if m.left >= id || m.right >= id || m.left == m.right || used[m.left] || used[m.right] {
                return Err(Error::Input(format!("merge {k} references an invalid or reused node")));
            }
            if !(m.height >= 0.0) {
                return Err(Error::Input(format!("merge {k} has invalid height {}", m.height)));
            }
            used[m.left] = true;
            used[m.right] = true;
            let (l, r) = (&nodes[m.left], &nodes[m.right]);
            let size = l.size + r.size;
            let sum = sums[m.left] + sums[m.right];
            sums.push(sum);
            nodes.push(ClusterNode {
                id,
                children: Some((m.left, m.right)),
                linkage_height: m.height,
                score: sum / size as f64,
                size,
                span_start: 0,
            });
        }

        // left-first traversal assigns spans
        let root = total - 1;
        let mut leaf_order = Vec::with_capacity(n);
        let mut stack = vec![root];
        let mut starts = vec![usize::MAX; total];
        while let Some(id) = stack.pop() {
            match nodes[id].children {
                None => {
                    starts[id] = leaf_order.len();
                    leaf_order.push(id);
                }
                Some((l, r)) => {
                    stack.push(r);
                    stack.push(l);
                }
            }
        }
        // internal node span starts at its leftmost leaf
        for id in 0..total {
            if let Some((l, _)) = nodes[id].children {
                starts[id] = starts[l];
            }
            nodes[id].span_start = starts[id];
        }

        Ok(Self { class_name, leaf_ids, leaf_scores, merge_sequence, leaf_order, nodes, subsampled_from })
    }

    pub fn n_leaves(&self) -> usize {
        self.leaf_ids.len()
    }

    pub fn root(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn node(&self, id: usize) -> &ClusterNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[ClusterNode] {
        &self.nodes
    }

    pub fn leaf_order(&self) -> &[usize] {
        &self.leaf_order
    }

    pub fn leaf_score(&self, leaf: usize) -> f64 {
        self.leaf_scores[leaf]
    }

    /// Leaf indices under `id`.
    pub fn members(&self, id: usize) -> &[usize] {
        let node = &self.nodes[id];
        &self.leaf_order[node.span_start..node.span_start + node.size]
    }

    pub fn member_ids(&self, id: usize) -> impl Iterator<Item = &str> + '_ {
        self.members(id).iter().map(move |&leaf| self.leaf_ids[leaf].as_str())
    }

    /// Maximal nodes whose linkage height is at most `tau`, left to right.
    pub fn cut_at_threshold(&self, tau: f64) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![self.root()];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            match node.children {
                Some((l, r)) if node.linkage_height > tau => {
                    stack.push(r);
                    stack.push(l);
                }
                _ => out.push(id),
            }
        }
        out
    }

    /// Records aligned with leaf indices, looked up by id.
    pub fn align_masks<'a>(&self, masks: &'a [MaskRecord]) -> Result<Vec<&'a MaskRecord>> {
        let by_id: std::collections::HashMap<&str, &MaskRecord> = masks.iter().map(|m| (m.id.as_str(), m)).collect();
        self.leaf_ids
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Input(format!("tree leaf {id:?} missing from mask file")))
            })
            .collect()
    }
}

/// Fraction of the node's members whose IoU reaches `k_iou`.
///
/// `leaf_masks` is indexed by leaf, as returned by [`Dendrogram::align_masks`].
pub fn cluster_true_quality<M: std::borrow::Borrow<MaskRecord>>(
    tree: &Dendrogram,
    node: usize,
    leaf_masks: &[M],
    k_iou: f64,
) -> Result<f64> {
    let members = tree.members(node);
    let mut correct = 0usize;
    for &leaf in members {
        let m = leaf_masks[leaf].borrow();
        if m.is_correct(k_iou).ok_or_else(|| Error::MissingGroundTruth(m.id.clone()))? {
            correct += 1;
        }
    }
    Ok(correct as f64 / members.len() as f64)
}

/// Condensed upper-triangular distance store.
struct Condensed {
    n: usize,
    data: Vec<f64>,
}

impl Condensed {
    fn from_points(points: &[Vec<f64>]) -> Self {
        let n = points.len();
        let mut data = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                data.push(euclidean(&points[i], &points[j]));
            }
        }
        Self { n, data }
    }

    #[inline]
    fn index(&self, i: usize, j: usize) -> usize {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        a * self.n - a * (a + 1) / 2 + (b - a - 1)
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.index(i, j)]
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize, v: f64) {
        let idx = self.index(i, j);
        self.data[idx] = v;
    }
}

/// Complete-linkage clustering of one class via the nearest-neighbor chain.
///
/// Equal distances resolve toward the previous chain element, otherwise the
/// smaller slot index; merges found at equal heights keep discovery order.
pub fn hac_complete_linkage(masks: &[MaskRecord], score_weight: f64) -> Result<Dendrogram> {
    hac_with_cap(masks, score_weight, DEFAULT_MASK_CAP)
}

pub fn hac_with_cap(masks: &[MaskRecord], score_weight: f64, cap: usize) -> Result<Dendrogram> {
    let class_name = masks.first().map(|m| m.class_name.clone()).unwrap_or_default();
    if masks.is_empty() {
        return Err(Error::Input("cannot cluster zero masks".into()));
    }
    if masks.len() > cap {
        return Err(Error::TooManyMasks { class: class_name, n: masks.len(), cap });
    }
    let points: Vec<Vec<f64>> = masks.iter().map(|m| build_feature(m, score_weight)).collect();
    let merges = nn_chain_complete(&points);
    Dendrogram::assemble(
        class_name,
        masks.iter().map(|m| m.id.clone()).collect(),
        masks.iter().map(|m| m.score).collect(),
        merges,
        None,
    )
}

/// Clusters a class, first subsampling to `cap` masks by score stratum when
/// the class is larger. The tree records the original size.
pub fn cluster_class(masks: &[MaskRecord], score_weight: f64, cap: usize) -> Result<Dendrogram> {
    if masks.len() <= cap {
        return hac_with_cap(masks, score_weight, cap);
    }
    let mut order: Vec<usize> = (0..masks.len()).collect();
    order.sort_by(|&a, &b| masks[a].score.total_cmp(&masks[b].score).then_with(|| masks[a].id.cmp(&masks[b].id)));
    let n = masks.len();
    let mut keep: Vec<usize> = (0..cap).map(|i| order[i * n / cap]).collect();
    keep.sort_unstable();
    let subset: Vec<MaskRecord> = keep.into_iter().map(|i| masks[i].clone()).collect();
    let mut tree = hac_with_cap(&subset, score_weight, cap)?;
    tree.subsampled_from = Some(n);
    Ok(tree)
}

/// Height-sorted merges with node ids assigned as in [`Dendrogram`].
pub fn nn_chain_complete(points: &[Vec<f64>]) -> Vec<Merge> {
    let n = points.len();
    if n < 2 {
        return Vec::new();
    }
    let mut dist = Condensed::from_points(points);
    let mut active = vec![true; n];
    let mut raw: Vec<(usize, usize, f64)> = Vec::with_capacity(n - 1);
    let mut chain: Vec<usize> = Vec::with_capacity(n);

    for _ in 0..n - 1 {
        if chain.is_empty() {
            chain.push(active.iter().position(|&a| a).unwrap());
        }
        let (a, b, d) = loop {
            let a = *chain.last().unwrap();
            let prev = if chain.len() >= 2 { Some(chain[chain.len() - 2]) } else { None };
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            if let Some(p) = prev {
                best = p;
                best_d = dist.get(a, p);
            }
            for x in 0..n {
                if !active[x] || x == a {
                    continue;
                }
                let dx = dist.get(a, x);
                if dx < best_d || (dx == best_d && Some(best) != prev && x < best) {
                    best = x;
                    best_d = dx;
                }
            }
            if Some(best) == prev {
                chain.pop();
                chain.pop();
                break (a, best, best_d);
            }
            chain.push(best);
        };

        // merged cluster lives in the lower slot
        let (keep, drop) = if a < b { (a, b) } else { (b, a) };
        for x in 0..n {
            if active[x] && x != keep && x != drop {
                let merged = dist.get(keep, x).max(dist.get(drop, x));
                dist.set(keep, x, merged);
            }
        }
        active[drop] = false;
        raw.push((keep, drop, d));
    }

    raw.sort_by(|x, y| x.2.total_cmp(&y.2));
    label_merges(n, &raw)
}

/// Converts slot-indexed merges into node-id merges via union-find.
fn label_merges(n: usize, raw: &[(usize, usize, f64)]) -> Vec<Merge> {
    let mut parent: Vec<usize> = (0..n).collect();
    let mut label: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    raw.iter()
        .enumerate()
        .map(|(k, &(a, b, h))| {
            let ra = find(&mut parent, a);
            let rb = find(&mut parent, b);
            let (la, lb) = (label[ra], label[rb]);
            parent[rb] = ra;
            label[ra] = n + k;
            Merge { left: la.min(lb), right: la.max(lb), height: h }
        })
        .collect()
}

/// All per-class trees of one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeFile {
    pub version: u32,
    pub score_weight: f64,
    pub trees: Vec<Dendrogram>,
}

impl TreeFile {
    pub fn new(score_weight: f64, trees: Vec<Dendrogram>) -> Self {
        Self { version: TREE_FILE_VERSION, score_weight, trees }
    }

    pub fn check_version(&self) -> Result<()> {
        if self.version != TREE_FILE_VERSION {
            return Err(Error::Version { found: self.version, expected: TREE_FILE_VERSION });
        }
        Ok(())
    }
}

/// Clusters every class of a dataset in parallel, in class-name order.
pub fn cluster_dataset(masks: &[MaskRecord], score_weight: f64, cap: usize) -> Result<TreeFile> {
    use rayon::prelude::*;
    let groups = crate::io::group_by_class(masks);
    let trees = groups
        .par_iter()
        .map(|(_, class_masks)| cluster_class(class_masks, score_weight, cap))
        .collect::<Result<Vec<_>>>()?;
    Ok(TreeFile::new(score_weight, trees))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line_masks(xs: &[f64]) -> Vec<MaskRecord> {
        xs.iter()
            .enumerate()
            .map(|(i, &x)| MaskRecord::new(format!("m{i}"), "c", 0.5, vec![x]))
            .collect()
    }

    #[test]
    fn feature_is_normalized_with_score() {
        let m = MaskRecord::new("a", "c", 0.5, vec![3.0, 4.0]);
        let f = build_feature(&m, 1.0);
        assert!((f[0] - 0.6).abs() < 1e-15 && (f[1] - 0.8).abs() < 1e-15 && f[2] == 0.5);
        assert_eq!(build_feature(&m, 0.0)[2], 0.0);
        let zero = MaskRecord::new("z", "c", 0.4, vec![0.0, 0.0]);
        assert_eq!(build_feature(&zero, 2.0), vec![0.0, 0.0, 0.8]);
    }

    /// 1-D points {0,1,4,5} clustered directly (no normalization).
    fn four_point_merges() -> Vec<Merge> {
        let pts: Vec<Vec<f64>> = [0.0, 1.0, 4.0, 5.0].iter().map(|&x| vec![x]).collect();
        nn_chain_complete(&pts)
    }

    #[test]
    fn hand_run_four_points() {
        let merges = four_point_merges();
        assert_eq!(
            merges,
            vec![
                Merge { left: 0, right: 1, height: 1.0 },
                Merge { left: 2, right: 3, height: 1.0 },
                Merge { left: 4, right: 5, height: 5.0 },
            ]
        );
    }

    fn four_point_tree() -> Dendrogram {
        Dendrogram::assemble(
            "c".into(),
            (0..4).map(|i| format!("m{i}")).collect(),
            vec![0.1, 0.2, 0.3, 0.4],
            four_point_merges(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn cut_examples() {
        let t = four_point_tree();
        assert_eq!(t.cut_at_threshold(0.0), vec![0, 1, 2, 3]);
        assert_eq!(t.cut_at_threshold(5.0), vec![6]);
        assert_eq!(t.cut_at_threshold(100.0), vec![6]);
        let two = t.cut_at_threshold(2.0);
        let sets: Vec<Vec<&str>> = two.iter().map(|&c| t.member_ids(c).collect()).collect();
        assert_eq!(sets, vec![vec!["m0", "m1"], vec!["m2", "m3"]]);
    }

    #[test]
    fn single_mask_is_a_leaf() {
        let t = hac_complete_linkage(&line_masks(&[1.0]), 1.0).unwrap();
        assert_eq!(t.n_leaves(), 1);
        assert!(t.merge_sequence.is_empty());
        assert!(t.node(t.root()).is_leaf());
    }

    #[test]
    fn empty_and_oversized_inputs_fail() {
        assert!(hac_complete_linkage(&[], 1.0).is_err());
        let masks = line_masks(&[1.0, 2.0, 3.0]);
        assert!(matches!(hac_with_cap(&masks, 1.0, 2), Err(Error::TooManyMasks { n: 3, cap: 2, .. })));
    }

    #[test]
    fn subsampling_is_flagged_and_stratified() {
        let masks: Vec<MaskRecord> = (0..50)
            .map(|i| MaskRecord::new(format!("m{i:02}"), "c", i as f64 / 50.0, vec![1.0, i as f64]))
            .collect();
        let t = cluster_class(&masks, 1.0, 10).unwrap();
        assert_eq!(t.n_leaves(), 10);
        assert_eq!(t.subsampled_from, Some(50));
        let scores: Vec<f64> = (0..10).map(|i| t.leaf_score(i)).collect();
        assert!(scores.first().unwrap() < &0.1 && scores.last().unwrap() > &0.8);
    }

    #[test]
    fn true_quality_counts_inclusive_threshold() {
        let masks: Vec<MaskRecord> = [0.8, 0.9, 0.5]
            .iter()
            .enumerate()
            .map(|(i, &iou)| MaskRecord::new(format!("m{i}"), "c", 0.5, vec![i as f64 + 1.0, 1.0]).with_gt_iou(iou))
            .collect();
        let t = hac_complete_linkage(&masks, 1.0).unwrap();
        let q = cluster_true_quality(&t, t.root(), &masks, 0.75).unwrap();
        assert!((q - 2.0 / 3.0).abs() < 1e-15);

        let single = vec![MaskRecord::new("s", "c", 0.5, vec![1.0]).with_gt_iou(0.75)];
        let t1 = hac_complete_linkage(&single, 1.0).unwrap();
        assert_eq!(cluster_true_quality(&t1, 0, &single, 0.75).unwrap(), 1.0);

        let no_gt = vec![MaskRecord::new("s", "c", 0.5, vec![1.0])];
        let t2 = hac_complete_linkage(&no_gt, 1.0).unwrap();
        assert!(matches!(cluster_true_quality(&t2, 0, &no_gt, 0.75), Err(Error::MissingGroundTruth(_))));
    }

    #[test]
    fn tree_file_roundtrip_is_exact() {
        let masks: Vec<MaskRecord> = (0..30)
            .map(|i| {
                let x = (i as f64 * 0.37).sin();
                MaskRecord::new(format!("m{i}"), "c", (i as f64 / 31.0).fract(), vec![x, x * x + 0.1, 1.0])
            })
            .collect();
        let tree = hac_complete_linkage(&masks, 1.0).unwrap();
        let text = serde_json::to_string(&TreeFile::new(1.0, vec![tree.clone()])).unwrap();
        let back: TreeFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.trees[0], tree);
    }

    #[test]
    fn corrupted_tree_file_is_rejected() {
        let tree = hac_complete_linkage(&line_masks(&[0.0, 1.0, 4.0]), 0.0).unwrap();
        let mut v = serde_json::to_value(&tree).unwrap();
        v["merge_sequence"][1]["right"] = v["merge_sequence"][1]["left"].clone();
        assert!(serde_json::from_value::<Dendrogram>(v).is_err());
    }

    fn arb_masks() -> impl Strategy<Value = Vec<MaskRecord>> {
        prop::collection::vec((prop::collection::vec(-1.0..1.0f64, 3), 0.0..=1.0f64), 1..60).prop_map(|rows| {
            rows.into_iter()
                .enumerate()
                .map(|(i, (f, s))| MaskRecord::new(format!("m{i}"), "c", s, f))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn structural_invariants(masks in arb_masks(), lambda in 0.0..2.0f64, tau in 0.0..3.0f64) {
            let t = hac_complete_linkage(&masks, lambda).unwrap();
            let n = masks.len();
            prop_assert_eq!(t.nodes().len(), 2 * n - 1);
            prop_assert_eq!(t.nodes().iter().filter(|c| c.is_leaf()).count(), n);
            for node in t.nodes() {
                let exact = t.members(node.id).iter().map(|&l| masks[l].score).sum::<f64>() / node.size as f64;
                prop_assert!((node.score - exact).abs() < 1e-9);
                prop_assert_eq!(node.is_leaf(), node.size == 1);
                if let Some((l, r)) = node.children {
                    let (l, r) = (t.node(l), t.node(r));
                    prop_assert!(node.linkage_height >= l.linkage_height);
                    prop_assert!(node.linkage_height >= r.linkage_height);
                    prop_assert_eq!(node.size, l.size + r.size);
                    let weighted = l.score * l.size as f64 + r.score * r.size as f64;
                    prop_assert!((node.score * node.size as f64 - weighted).abs() < 1e-6);
                }
            }
            let mut seen: Vec<usize> = t.cut_at_threshold(tau).iter().flat_map(|&c| t.members(c).to_vec()).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            let again = hac_complete_linkage(&masks, lambda).unwrap();
            prop_assert_eq!(again, t);
        }
    }
}
