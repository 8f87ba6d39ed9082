//! Recall@K and mean Recall@K for SGDet and PredCls, partitioned by
//! base and novel concepts.
//!
//! Credit is assigned in rank order: each prediction, taken from the top,
//! claims a matching ground-truth triplet, re-routing earlier claims along
//! an augmenting path when that frees one. The set of credited triplets
//! only grows, so the count within the top K is a maximum one-to-one
//! matching for every K at once.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::iou_unchecked;
use crate::matching::{predcls_select, SimilarityWeights};
use crate::splits::SplitSpec;
use crate::types::{triplet_score, ConceptSpace, Dataset, RankedTriplet, RankedTriplets, SceneGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Sgdet,
    Predcls,
}

/// Which ground-truth triplets are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    BasePlusNovel,
    /// Triplets whose subject or object category is novel.
    NovelObject,
    /// Triplets whose predicate is novel.
    NovelRelation,
    Joint,
}

impl Partition {
    pub const ALL: [Partition; 4] = [
        Partition::BasePlusNovel,
        Partition::NovelObject,
        Partition::NovelRelation,
        Partition::Joint,
    ];

    fn keeps(self, t: &RankedTriplet, spec: &SplitSpec) -> bool {
        match self {
            Partition::BasePlusNovel | Partition::Joint => true,
            Partition::NovelObject => spec.is_novel_object(&t.subject.category) || spec.is_novel_object(&t.object.category),
            Partition::NovelRelation => spec.is_novel_relation(&t.predicate),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Partition::BasePlusNovel => "base+novel",
            Partition::NovelObject => "novel (object)",
            Partition::NovelRelation => "novel (relation)",
            Partition::Joint => "joint",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub iou_threshold: f64,
    pub protocol: Protocol,
    pub partition: Partition,
    /// Predicted nodes kept per image, highest score first.
    pub max_objects: usize,
    /// Pool hits over the corpus instead of averaging per image.
    pub micro: bool,
    /// Node matching weights used to pick predictions under PredCls.
    pub predcls_weights: SimilarityWeights,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![20, 50, 100],
            iou_threshold: 0.5,
            protocol: Protocol::Sgdet,
            partition: Partition::BasePlusNovel,
            max_objects: 100,
            micro: false,
            predcls_weights: SimilarityWeights::spatial(),
        }
    }
}

impl EvalConfig {
    pub fn check(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.windows(2).any(|w| w[0] >= w[1]) || self.ks[0] == 0 {
            return Err(Error::contract(format!("ks must be positive and strictly ascending, got {:?}", self.ks)));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::contract(format!("iou threshold {} outside (0, 1]", self.iou_threshold)));
        }
        if self.max_objects == 0 {
            return Err(Error::contract("max_objects must be positive"));
        }
        self.predcls_weights.check()
    }

    fn max_k(&self) -> usize {
        *self.ks.last().expect("checked non-empty")
    }
}

/// Labels equal and both regions overlap the ground truth by at least the
/// IoU threshold.
pub fn match_triplet(pred: &RankedTriplet, gt: &RankedTriplet, cfg: &EvalConfig) -> bool {
    pred.predicate == gt.predicate
        && pred.subject.category == gt.subject.category
        && pred.object.category == gt.object.category
        && pred.subject.bbox.is_valid()
        && pred.object.bbox.is_valid()
        && iou_unchecked(&pred.subject.bbox, &gt.subject.bbox) >= cfg.iou_threshold
        && iou_unchecked(&pred.object.bbox, &gt.object.bbox) >= cfg.iou_threshold
}

/// Ground-truth triplets of a graph, one per edge, confidence 1.
pub fn gt_triplets(g: &SceneGraph) -> Result<Vec<RankedTriplet>> {
    g.edges
        .iter()
        .map(|e| match (g.nodes.get(e.subject), g.nodes.get(e.object)) {
            (Some(s), Some(o)) => Ok(RankedTriplet {
                subject: s.clone(),
                predicate: e.predicate.clone(),
                object: o.clone(),
                confidence: 1.0,
            }),
            _ => Err(Error::contract(format!(
                "{}: edge ({}, {}) references a missing node",
                g.image_id, e.subject, e.object
            ))),
        })
        .collect()
}

/// Labels and exact box coordinates; confidence is not part of identity.
fn triplet_identity(t: &RankedTriplet) -> (&str, [u64; 4], &str, &str, [u64; 4]) {
    let bits = |b: &crate::types::BBox| [b.x1.to_bits(), b.y1.to_bits(), b.x2.to_bits(), b.y2.to_bits()];
    (&t.subject.category, bits(&t.subject.bbox), &t.predicate, &t.object.category, bits(&t.object.bbox))
}

/// Rank (0-based) at which each ground-truth triplet is first credited, if
/// ever. Once credited a triplet stays credited.
///
/// A prediction identical to a higher-ranked one earns nothing, even when a
/// second ground truth would accept it.
pub fn credit_ranks(preds: &[RankedTriplet], gts: &[RankedTriplet], cfg: &EvalConfig) -> Vec<Option<usize>> {
    let mut seen_preds = std::collections::HashSet::new();
    let candidates: Vec<Vec<usize>> = preds
        .iter()
        .map(|p| {
            if !seen_preds.insert(triplet_identity(p)) {
                return Vec::new();
            }
            (0..gts.len()).filter(|&g| match_triplet(p, &gts[g], cfg)).collect()
        })
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; gts.len()];
    let mut first: Vec<Option<usize>> = vec![None; gts.len()];
    let mut credited = 0;
    for p in 0..preds.len() {
        if credited == gts.len() {
            break;
        }
        if candidates[p].is_empty() {
            continue;
        }
        let mut seen = vec![false; gts.len()];
        if let Some(g) = augment(p, &candidates, &mut owner, &mut seen) {
            first[g] = Some(p);
            credited += 1;
        }
    }
    first
}

/// Finds an augmenting path from prediction `p`; returns the newly credited
/// ground truth at the end of the path.
fn augment(p: usize, candidates: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> Option<usize> {
    for &g in &candidates[p] {
        if seen[g] {
            continue;
        }
        seen[g] = true;
        match owner[g] {
            None => {
                owner[g] = Some(p);
                return Some(g);
            }
            Some(q) => {
                if let Some(end) = augment(q, candidates, owner, seen) {
                    owner[g] = Some(p);
                    return Some(end);
                }
            }
        }
    }
    None
}

/// Recall of the ground-truth graph's triplets within the top K predictions,
/// one value per configured K.
pub fn recall_at_k(preds: &RankedTriplets, gt: &SceneGraph, cfg: &EvalConfig) -> Result<Vec<f64>> {
    cfg.check()?;
    preds.check_sorted()?;
    let gts = gt_triplets(gt)?;
    if gts.is_empty() {
        return Err(Error::contract(format!("{}: no ground-truth triplets", gt.image_id)));
    }
    let ranks = credit_ranks(&preds.as_slice()[..preds.len().min(cfg.max_k())], &gts, cfg);
    Ok(cfg
        .ks
        .iter()
        .map(|&k| ranks.iter().filter(|r| r.is_some_and(|r| r < k)).count() as f64 / gts.len() as f64)
        .collect())
}

/// Keeps the `max_objects` highest-scoring nodes (lower index first on
/// ties) and drops edges touching the rest.
pub fn cap_objects(g: &SceneGraph, max_objects: usize) -> SceneGraph {
    if g.nodes.len() <= max_objects {
        return g.clone();
    }
    let mut order: Vec<usize> = (0..g.nodes.len()).collect();
    order.sort_by(|&a, &b| g.nodes[b].score.total_cmp(&g.nodes[a].score).then(a.cmp(&b)));
    let mut keep = vec![false; g.nodes.len()];
    order[..max_objects].iter().for_each(|&i| keep[i] = true);
    let mut remap = vec![usize::MAX; g.nodes.len()];
    let mut out = SceneGraph::new(g.image_id.clone(), g.width, g.height);
    for (i, n) in g.nodes.iter().enumerate() {
        if keep[i] {
            remap[i] = out.push_node(n.clone());
        }
    }
    for e in &g.edges {
        if keep.get(e.subject) == Some(&true) && keep.get(e.object) == Some(&true) {
            let mut kept = e.clone();
            kept.subject = remap[e.subject];
            kept.object = remap[e.object];
            out.edges.push(kept);
        }
    }
    out
}

/// PredCls ranking: predicted edges are carried onto the ground-truth nodes
/// their endpoints were matched to. Node scores count as 1.
fn predcls_triplets(gt: &SceneGraph, pred: &SceneGraph, cs: &ConceptSpace, cfg: &EvalConfig) -> Result<RankedTriplets> {
    if pred.nodes.is_empty() {
        return Ok(RankedTriplets::default());
    }
    let sel = predcls_select(gt, &pred.nodes, cs, &cfg.predcls_weights)?;
    let mut pred_to_gt = vec![None; pred.nodes.len()];
    for (g, p) in sel.mapping.iter().enumerate() {
        if let Some(p) = p {
            pred_to_gt[*p] = Some(g);
        }
    }
    let mut items = Vec::new();
    for e in &pred.edges {
        let ends = (pred_to_gt.get(e.subject).copied().flatten(), pred_to_gt.get(e.object).copied().flatten());
        if let (Some(s), Some(o)) = ends {
            items.push(RankedTriplet {
                subject: gt.nodes[s].clone(),
                predicate: e.predicate.clone(),
                object: gt.nodes[o].clone(),
                confidence: triplet_score(1.0, 1.0, e.score)?,
            });
        }
    }
    Ok(RankedTriplets::rank(items, cfg.max_k()))
}

/// Recall figures for one K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KRecall {
    pub k: usize,
    pub recall: Option<f64>,
    pub mean_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateRecall {
    pub gt_count: usize,
    /// One value per K.
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub partition: Partition,
    pub micro: bool,
    pub per_k: Vec<KRecall>,
    pub per_predicate: BTreeMap<String, PredicateRecall>,
    /// Images with at least one ground-truth triplet in the partition.
    pub images: usize,
    /// Ground-truth images without predictions; excluded from the averages.
    pub missing: Vec<String>,
}

impl EvalReport {
    /// True when the partition had no ground-truth triplet at all.
    pub fn is_empty(&self) -> bool {
        self.images == 0
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.per_k.iter().find(|r| r.k == k).and_then(|r| r.recall)
    }

    pub fn mean_recall(&self, k: usize) -> Option<f64> {
        self.per_k.iter().find(|r| r.k == k).and_then(|r| r.mean_recall)
    }
}

/// Hits of one image: counts per K overall and per predicate.
#[derive(Debug, Clone, Default)]
struct ImageHits {
    total: usize,
    hits: Vec<usize>,
    per_predicate: BTreeMap<String, (usize, Vec<usize>)>,
}

fn score_image(gts: &[RankedTriplet], preds: &RankedTriplets, cfg: &EvalConfig) -> ImageHits {
    let top = &preds.as_slice()[..preds.len().min(cfg.max_k())];
    let ranks = credit_ranks(top, gts, cfg);
    let mut out = ImageHits {
        total: gts.len(),
        hits: vec![0; cfg.ks.len()],
        per_predicate: BTreeMap::new(),
    };
    for (t, r) in gts.iter().zip(&ranks) {
        let entry = out
            .per_predicate
            .entry(t.predicate.clone())
            .or_insert_with(|| (0, vec![0; cfg.ks.len()]));
        entry.0 += 1;
        for (i, &k) in cfg.ks.iter().enumerate() {
            if r.is_some_and(|r| r < k) {
                out.hits[i] += 1;
                entry.1[i] += 1;
            }
        }
    }
    out
}

/// Scores a prediction dataset against ground truth for one partition.
///
/// `cs` is required for PredCls when the matching weights use the
/// categorical term; spatial-only weights never read it.
pub fn evaluate(
    gt: &Dataset,
    pred: &Dataset,
    spec: &SplitSpec,
    cfg: &EvalConfig,
    cs: Option<&ConceptSpace>,
) -> Result<EvalReport> {
    cfg.check()?;
    let gt_index: std::collections::HashMap<&str, usize> =
        gt.images.iter().enumerate().map(|(i, g)| (g.image_id.as_str(), i)).collect();
    let mut pred_for = vec![None; gt.images.len()];
    for p in &pred.images {
        let i = *gt_index
            .get(p.image_id.as_str())
            .ok_or_else(|| Error::contract(format!("prediction for unknown image '{}'", p.image_id)))?;
        if pred_for[i].replace(p).is_some() {
            return Err(Error::contract(format!("duplicate prediction for image '{}'", p.image_id)));
        }
    }
    let empty_space;
    let cs = match cs {
        Some(cs) => cs,
        None => {
            empty_space = ConceptSpace::new(1, vec![], vec![])?;
            &empty_space
        }
    };

    let scored: Vec<Result<Option<ImageHits>>> = gt
        .images
        .par_iter()
        .zip(&pred_for)
        .map(|(g, p)| {
            let Some(p) = p else { return Ok(None) };
            let gts: Vec<RankedTriplet> = gt_triplets(g)?.into_iter().filter(|t| cfg.partition.keeps(t, spec)).collect();
            if gts.is_empty() {
                return Ok(Some(ImageHits::default()));
            }
            let preds = match cfg.protocol {
                Protocol::Sgdet => RankedTriplets::from_graph(&cap_objects(p, cfg.max_objects), cfg.max_k())?,
                Protocol::Predcls => predcls_triplets(g, p, cs, cfg)?,
            };
            Ok(Some(score_image(&gts, &preds, cfg)))
        })
        .collect();

    let mut missing = Vec::new();
    let mut images = Vec::new();
    for (g, s) in gt.images.iter().zip(scored) {
        match s? {
            None => missing.push(g.image_id.clone()),
            Some(h) if h.total > 0 => images.push(h),
            Some(_) => {}
        }
    }
    if !missing.is_empty() {
        log::warn!("{} ground-truth images have no predictions and are excluded", missing.len());
    }
    Ok(assemble(&images, missing, cfg))
}

fn assemble(images: &[ImageHits], missing: Vec<String>, cfg: &EvalConfig) -> EvalReport {
    let nk = cfg.ks.len();
    let mut recall = vec![None; nk];
    if !images.is_empty() {
        for (i, r) in recall.iter_mut().enumerate() {
            *r = Some(if cfg.micro {
                images.iter().map(|h| h.hits[i]).sum::<usize>() as f64 / images.iter().map(|h| h.total).sum::<usize>() as f64
            } else {
                images.iter().map(|h| h.hits[i] as f64 / h.total as f64).sum::<f64>() / images.len() as f64
            });
        }
    }

    // Per predicate: (gt count, images with the predicate, per-K image-recall sums, per-K hits)
    type PredicateAcc = (usize, usize, Vec<f64>, Vec<usize>);
    let mut acc: BTreeMap<&str, PredicateAcc> = BTreeMap::new();
    for h in images {
        for (name, (count, hits)) in &h.per_predicate {
            let e = acc.entry(name).or_insert_with(|| (0, 0, vec![0.0; nk], vec![0; nk]));
            e.0 += count;
            e.1 += 1;
            for (i, &h) in hits.iter().enumerate().take(nk) {
                e.2[i] += h as f64 / *count as f64;
                e.3[i] += h;
            }
        }
    }
    let per_predicate: BTreeMap<String, PredicateRecall> = acc
        .into_iter()
        .map(|(name, (count, n_images, sums, hits))| {
            let recall = (0..nk)
                .map(|i| if cfg.micro { hits[i] as f64 / count as f64 } else { sums[i] / n_images as f64 })
                .collect();
            (name.to_string(), PredicateRecall { gt_count: count, recall })
        })
        .collect();

    let per_k = cfg
        .ks
        .iter()
        .enumerate()
        .map(|(i, &k)| KRecall {
            k,
            recall: recall[i],
            mean_recall: (!per_predicate.is_empty())
                .then(|| per_predicate.values().map(|p| p.recall[i]).sum::<f64>() / per_predicate.len() as f64),
        })
        .collect();

    EvalReport {
        protocol: cfg.protocol,
        partition: cfg.partition,
        micro: cfg.micro,
        per_k,
        per_predicate,
        images: images.len(),
        missing,
    }
}

/// Plain-text table with one row per report and R@K / mR@K columns in
/// percent. Empty partitions show `-`.
pub fn render_table(reports: &[EvalReport]) -> String {
    let Some(first) = reports.first() else { return String::new() };
    let ks: Vec<usize> = first.per_k.iter().map(|r| r.k).collect();
    let mut out = String::new();
    let _ = write!(out, "{:<8} {:<18}", "mode", "partition");
    for k in &ks {
        let _ = write!(out, " {:>7}", format!("R@{k}"));
    }
    for k in &ks {
        let _ = write!(out, " {:>7}", format!("mR@{k}"));
    }
    out.push('\n');
    let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
    for r in reports {
        let mode = match r.protocol {
            Protocol::Sgdet => "SGDet",
            Protocol::Predcls => "PredCls",
        };
        let _ = write!(out, "{:<8} {:<18}", mode, r.partition.label());
        for k in &ks {
            let _ = write!(out, " {:>7}", cell(r.recall(*k)));
        }
        for k in &ks {
            let _ = write!(out, " {:>7}", cell(r.mean_recall(*k)));
        }
        out.push('\n');
    }
    out
}
