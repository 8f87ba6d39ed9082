//! One-to-one assignment of ground-truth nodes to predicted nodes.
//!
//! The similarity of a pair mixes a categorical cue (sigmoid of the dot
//! product between the ground-truth concept embedding and the predicted
//! node's visual feature) with two spatial cues (GIoU and the normalized L1
//! box distance). The assignment maximizing the summed similarity is found
//! with the Hungarian algorithm on negated similarities.

use serde::{Deserialize, Serialize};

use crate::alignment::node_similarity;
use crate::error::{Error, Result};
use crate::geometry::{box_l1_unchecked, giou_unchecked};
use crate::linalg::Matrix;
use crate::types::{ConceptSpace, Node, SceneGraph};

/// Weights of the categorical, L1 and GIoU terms of the pair similarity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityWeights {
    pub w_cat: f64,
    pub w_l1: f64,
    pub w_giou: f64,
}

impl Default for SimilarityWeights {
    fn default() -> Self {
        SimilarityWeights {
            w_cat: 2.0,
            w_l1: 5.0,
            w_giou: 2.0,
        }
    }
}

impl SimilarityWeights {
    pub fn new(w_cat: f64, w_l1: f64, w_giou: f64) -> Result<Self> {
        let w = SimilarityWeights { w_cat, w_l1, w_giou };
        w.check()?;
        Ok(w)
    }

    /// Box-only weights, for predictions that carry no visual features.
    pub fn spatial() -> Self {
        SimilarityWeights {
            w_cat: 0.0,
            w_l1: 5.0,
            w_giou: 2.0,
        }
    }

    pub fn check(&self) -> Result<()> {
        let ws = [self.w_cat, self.w_l1, self.w_giou];
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::contract(format!("similarity weights must be non-negative: {self:?}")));
        }
        if ws.iter().all(|w| *w == 0.0) {
            return Err(Error::contract("at least one similarity weight must be positive"));
        }
        Ok(())
    }
}

/// Result of an assignment: matched `(gt, pred)` pairs sorted by gt index,
/// plus the indices left over on either side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_pred: Vec<usize>,
    /// Summed similarity of the matched pairs, accumulated in gt order.
    pub total: f64,
}

impl Assignment {
    /// Prediction assigned to each ground-truth index.
    pub fn gt_to_pred(&self, n_gt: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_gt];
        for &(i, j) in &self.pairs {
            out[i] = Some(j);
        }
        out
    }
}

fn concept_embedding<'a>(node: &'a Node, cs: &'a ConceptSpace) -> Result<&'a [f64]> {
    if let Some(c) = cs.object(&node.category) {
        return Ok(&c.embedding);
    }
    node.embedding
        .as_deref()
        .ok_or_else(|| Error::contract(format!("category '{}' not in concept space", node.category)))
}

/// Similarity of a ground-truth node and a predicted node:
/// `w_cat * sigmoid(<w_gt, v_pred>) + w_giou * giou - w_l1 * l1`.
///
/// `image` is the `(width, height)` used to normalize the L1 term.
pub fn pair_similarity(
    gt: &Node,
    pred: &Node,
    cs: &ConceptSpace,
    w: &SimilarityWeights,
    image: (f64, f64),
) -> Result<f64> {
    w.check()?;
    gt.bbox.check()?;
    pred.bbox.check()?;
    if !(image.0 > 0.0 && image.1 > 0.0) {
        return Err(Error::contract(format!("invalid image size {image:?}")));
    }
    pair_similarity_checked(gt, pred, cs, w, image)
}

fn pair_similarity_checked(
    gt: &Node,
    pred: &Node,
    cs: &ConceptSpace,
    w: &SimilarityWeights,
    image: (f64, f64),
) -> Result<f64> {
    let mut sim = 0.0;
    if w.w_cat > 0.0 {
        let word = concept_embedding(gt, cs)?;
        let feature = pred
            .feature
            .as_deref()
            .ok_or_else(|| Error::contract("predicted node has no feature but w_cat > 0"))?;
        sim += w.w_cat * node_similarity(word, feature)?;
    }
    if w.w_giou > 0.0 {
        sim += w.w_giou * giou_unchecked(&gt.bbox, &pred.bbox);
    }
    if w.w_l1 > 0.0 {
        sim -= w.w_l1 * box_l1_unchecked(&gt.bbox, &pred.bbox, image.0, image.1);
    }
    Ok(sim)
}

/// Similarity matrix with ground truths as rows and predictions as columns.
pub fn similarity_matrix(
    gts: &[Node],
    preds: &[Node],
    cs: &ConceptSpace,
    w: &SimilarityWeights,
    image: (f64, f64),
) -> Result<Matrix> {
    w.check()?;
    if !(image.0 > 0.0 && image.1 > 0.0) {
        return Err(Error::contract(format!("invalid image size {image:?}")));
    }
    for n in gts.iter().chain(preds) {
        n.bbox.check()?;
    }
    let mut m = Matrix::zeros(gts.len(), preds.len());
    for (i, g) in gts.iter().enumerate() {
        for (j, p) in preds.iter().enumerate() {
            m.set(i, j, pair_similarity_checked(g, p, cs, w, image)?);
        }
    }
    Ok(m)
}

/// Optimal one-to-one node assignment maximizing total similarity.
pub fn match_nodes(
    gts: &[Node],
    preds: &[Node],
    cs: &ConceptSpace,
    w: &SimilarityWeights,
    image: (f64, f64),
) -> Result<Assignment> {
    let sim = similarity_matrix(gts, preds, cs, w, image)?;
    assign(&sim)
}

/// Maximum-weight assignment on a rectangular similarity matrix.
///
/// Exactly `min(rows, cols)` pairs are returned even when some similarities
/// are negative. Among optimal assignments the solver prefers the lowest
/// partner index for each row of the smaller side, earlier rows first.
pub fn assign(sim: &Matrix) -> Result<Assignment> {
    let (n, m) = (sim.rows(), sim.cols());
    if sim.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("similarity matrix has non-finite entries"));
    }
    let transposed = n > m;
    let cost = if transposed {
        Matrix::from_fn(m, n, |i, j| -sim.get(j, i))
    } else {
        Matrix::from_fn(n, m, |i, j| -sim.get(i, j))
    };
    let row_to_col = solve_min_cost(&cost);

    let mut pairs: Vec<(usize, usize)> = row_to_col
        .iter()
        .enumerate()
        .map(|(r, &c)| if transposed { (c, r) } else { (r, c) })
        .collect();
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(i, j)| sim.get(i, j)).sum();

    let mut gt_used = vec![false; n];
    let mut pred_used = vec![false; m];
    for &(i, j) in &pairs {
        gt_used[i] = true;
        pred_used[j] = true;
    }
    Ok(Assignment {
        pairs,
        unmatched_gt: (0..n).filter(|&i| !gt_used[i]).collect(),
        unmatched_pred: (0..m).filter(|&j| !pred_used[j]).collect(),
        total,
    })
}

/// Hungarian algorithm with row/column potentials for an `n x m` cost
/// matrix with `n <= m`. Returns the column chosen for every row.
fn solve_min_cost(cost: &Matrix) -> Vec<usize> {
    let (n, m) = (cost.rows(), cost.cols());
    debug_assert!(n <= m);
    if n == 0 {
        return Vec::new();
    }
    // 1-based internally; index 0 is the virtual root.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            row_to_col[owner[j] - 1] = j - 1;
        }
    }
    prefer_low_indices(cost, &u[1..], &v[1..], row_to_col)
}

/// Re-routes an optimal assignment towards lower column indices, row by row.
///
/// Every optimal assignment uses only edges with zero reduced cost
/// `c_ij - u_i - v_j` (and leaves unmatched only columns whose potential is
/// zero), so alternatives are searched in that tight subgraph alone.
fn prefer_low_indices(cost: &Matrix, u: &[f64], v: &[f64], mut row_to_col: Vec<usize>) -> Vec<usize> {
    let (n, m) = (cost.rows(), cost.cols());
    let scale = 1.0 + cost.as_slice().iter().fold(0.0f64, |a, c| a.max(c.abs()));
    let tol = 1e-9 * scale;
    let tight = |i: usize, j: usize| cost.get(i, j) - u[i] - v[j] <= tol;
    let total = |rc: &[usize]| rc.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum::<f64>();
    let best = total(&row_to_col);

    for i in 0..n {
        for j in 0..row_to_col[i] {
            if !tight(i, j) {
                continue;
            }
            let mut col_owner = vec![usize::MAX; m];
            for (r, &c) in row_to_col.iter().enumerate() {
                col_owner[c] = r;
            }
            let displaced = col_owner[j];
            if displaced != usize::MAX && displaced < i {
                continue;
            }
            let freed = row_to_col[i];
            let free_target_ok = v[freed].abs() <= tol;
            let mut cand = row_to_col.clone();
            cand[i] = j;
            col_owner[freed] = usize::MAX;
            col_owner[j] = i;
            let ok = if displaced == usize::MAX {
                free_target_ok
            } else {
                let mut locked = vec![false; m];
                for c in cand.iter().take(i + 1) {
                    locked[*c] = true;
                }
                let mut visited = vec![false; m];
                reroute(
                    displaced,
                    &tight,
                    &mut cand,
                    &mut col_owner,
                    &locked,
                    &mut visited,
                    freed,
                    free_target_ok,
                )
            };
            if ok && (total(&cand) - best).abs() <= tol * (n as f64 + 1.0) {
                row_to_col = cand;
                break;
            }
        }
    }
    row_to_col
}

#[allow(clippy::too_many_arguments)]
fn reroute(
    row: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    cand: &mut [usize],
    col_owner: &mut [usize],
    locked: &[bool],
    visited: &mut [bool],
    freed: usize,
    any_free: bool,
) -> bool {
    for c in 0..col_owner.len() {
        if visited[c] || locked[c] || !tight(row, c) {
            continue;
        }
        visited[c] = true;
        let owner = col_owner[c];
        let reachable = if owner == usize::MAX {
            c == freed || any_free
        } else {
            reroute(owner, tight, cand, col_owner, locked, visited, freed, any_free)
        };
        if reachable {
            cand[row] = c;
            col_owner[c] = row;
            return true;
        }
    }
    false
}

/// Ground-truth to prediction mapping used by the PredCls protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredClsSelection {
    /// For each ground-truth node, the chosen prediction.
    pub mapping: Vec<Option<usize>>,
    pub unmatched_gt: Vec<usize>,
}

/// Picks, for every ground-truth node, the prediction assigned to it by
/// [`match_nodes`]. Ground-truth nodes left without a prediction are
/// reported rather than filled in.
pub fn predcls_select(
    gt_graph: &SceneGraph,
    preds: &[Node],
    cs: &ConceptSpace,
    w: &SimilarityWeights,
) -> Result<PredClsSelection> {
    if preds.is_empty() {
        return Err(Error::contract("no candidates"));
    }
    let image = (gt_graph.width as f64, gt_graph.height as f64);
    let a = match_nodes(&gt_graph.nodes, preds, cs, w, image)?;
    Ok(PredClsSelection {
        mapping: a.gt_to_pred(gt_graph.nodes.len()),
        unmatched_gt: a.unmatched_gt,
    })
}
