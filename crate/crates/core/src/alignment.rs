//! Relation head and visual-concept alignment losses.
//!
//! The relation head maps a subject feature, an object feature and one or
//! more relation query vectors to an edge feature:
//!
//! ```text
//! e = 1/M * sum_n  W2 relu(W1 [v_s; v_o; r_n] + b1) + b2
//! ```
//!
//! Edges are scored against a relation's text embedding `t` after a linear
//! projection into edge space, `s(e) = <e, P t + p>`, and trained with a
//! binary cross-entropy over positive and negative (edge, predicate) samples.
//! All gradients are analytic.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix};
use crate::types::{ConceptSpace, SceneGraph};

/// Logits are clamped to this magnitude before any sigmoid or log.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Number of pairs handled by one parallel work item. Fixed so the gradient
/// reduction order, and therefore the result bits, do not depend on the
/// thread count.
const CHUNK: usize = 16;

#[inline]
fn clamp_logit(x: f64) -> f64 {
    x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
}

/// Logistic sigmoid of the clamped logit.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let x = clamp_logit(x);
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-log sigmoid(x)` for the clamped logit, computed without cancellation.
#[inline]
fn neg_log_sigmoid(x: f64) -> f64 {
    let x = clamp_logit(x);
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// Categorical similarity between a concept embedding and a node feature.
pub fn node_similarity(w_concept: &[f64], v_node: &[f64]) -> Result<f64> {
    if w_concept.len() != v_node.len() {
        return Err(Error::contract(format!(
            "embedding length {} != feature length {}",
            w_concept.len(),
            v_node.len()
        )));
    }
    Ok(sigmoid(dot(w_concept, v_node)))
}

/// Weights of the relation head, its relation queries and the text
/// projection. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationHeadParams {
    /// `d_h x 3d`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `d x d_h`
    pub w2: Matrix,
    pub b2: Vec<f64>,
    /// `M` query vectors of length `d`.
    pub queries: Vec<Vec<f64>>,
    /// `d x d_t`
    pub proj_w: Matrix,
    pub proj_b: Vec<f64>,
}

/// Shape of a relation head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    /// Node and edge feature dimension.
    pub d: usize,
    /// Hidden width.
    pub d_h: usize,
    /// Text embedding dimension.
    pub d_t: usize,
    /// Number of relation queries.
    pub m: usize,
}

impl HeadDims {
    /// Hidden width defaults to twice the feature dimension.
    pub fn new(d: usize, d_t: usize, m: usize) -> Self {
        HeadDims { d, d_h: 2 * d, d_t, m }
    }
}

impl RelationHeadParams {
    pub fn zeros(dims: HeadDims) -> Self {
        let HeadDims { d, d_h, d_t, m } = dims;
        RelationHeadParams {
            w1: Matrix::zeros(d_h, 3 * d),
            b1: vec![0.0; d_h],
            w2: Matrix::zeros(d, d_h),
            b2: vec![0.0; d],
            queries: vec![vec![0.0; d]; m],
            proj_w: Matrix::zeros(d, d_t),
            proj_b: vec![0.0; d],
        }
    }

    /// Scaled-normal initialization (fan-in variance for the weights, small
    /// biases, unit-variance queries).
    pub fn random<R: Rng + ?Sized>(dims: HeadDims, rng: &mut R) -> Self {
        let HeadDims { d, d_h, d_t, m } = dims;
        let mut normal = |n: usize, std: f64| (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>();
        let w1 = Matrix::from_vec(d_h, 3 * d, normal(d_h * 3 * d, (2.0 / (3 * d) as f64).sqrt())).unwrap();
        let b1 = normal(d_h, 0.1);
        let w2 = Matrix::from_vec(d, d_h, normal(d * d_h, (1.0 / d_h as f64).sqrt())).unwrap();
        let b2 = normal(d, 0.1);
        let queries = (0..m).map(|_| normal(d, 1.0)).collect();
        let proj_w = Matrix::from_vec(d, d_t, normal(d * d_t, (1.0 / d_t as f64).sqrt())).unwrap();
        let proj_b = normal(d, 0.1);
        RelationHeadParams { w1, b1, w2, b2, queries, proj_w, proj_b }
    }

    pub fn dims(&self) -> HeadDims {
        HeadDims {
            d: self.w2.rows(),
            d_h: self.w1.rows(),
            d_t: self.proj_w.cols(),
            m: self.queries.len(),
        }
    }

    /// Checks internal shape consistency and finiteness.
    pub fn check(&self) -> Result<()> {
        let HeadDims { d, d_h, d_t, m } = self.dims();
        let ok = m >= 1
            && self.w1.cols() == 3 * d
            && self.b1.len() == d_h
            && self.w2.cols() == d_h
            && self.b2.len() == d
            && self.queries.iter().all(|q| q.len() == d)
            && self.proj_w.rows() == d
            && self.proj_b.len() == d
            && d_t > 0;
        if !ok {
            return Err(Error::contract(format!("inconsistent relation head shapes {:?}", self.dims())));
        }
        if self.values().any(|v| !v.is_finite()) {
            return Err(Error::contract("relation head has non-finite entries"));
        }
        Ok(())
    }

    fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.w1.as_slice(), &self.b1, self.w2.as_slice(), &self.b2];
        out.extend(self.queries.iter().map(Vec::as_slice));
        out.push(self.proj_w.as_slice());
        out.push(&self.proj_b);
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.w1.as_mut_slice(), &mut self.b1, self.w2.as_mut_slice(), &mut self.b2];
        out.extend(self.queries.iter_mut().map(Vec::as_mut_slice));
        out.push(self.proj_w.as_mut_slice());
        out.push(&mut self.proj_b);
        out
    }

    /// All parameters in a fixed order: w1, b1, w2, b2, queries, proj_w, proj_b.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.slices().into_iter().flat_map(|s| s.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values().collect()
    }

    /// Overwrites every parameter from a flat vector in [`Self::values`] order.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::contract(format!("expected {} values, got {}", self.len(), flat.len())));
        }
        let mut it = flat.iter();
        for s in self.slices_mut() {
            for x in s.iter_mut() {
                *x = *it.next().unwrap();
            }
        }
        Ok(())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &RelationHeadParams) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            axpy(alpha, src, dst);
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims())
    }

    /// Projected text embedding `P t + p`.
    pub fn project_text(&self, t: &[f64]) -> Result<Vec<f64>> {
        if t.len() != self.proj_w.cols() {
            return Err(Error::contract(format!(
                "text embedding length {} != projection input {}",
                t.len(),
                self.proj_w.cols()
            )));
        }
        let mut out = self.proj_w.matvec(t);
        axpy(1.0, &self.proj_b, &mut out);
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let HeadDims { d, d_h, d_t, m } = self.dims();
        let arr = |name: &str, shape: Vec<usize>, data: &[f64]| NamedArray {
            name: name.to_string(),
            shape,
            data: data.to_vec(),
        };
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            arrays: vec![
                arr("w1", vec![d_h, 3 * d], self.w1.as_slice()),
                arr("b1", vec![d_h], &self.b1),
                arr("w2", vec![d, d_h], self.w2.as_slice()),
                arr("b2", vec![d], &self.b2),
                arr("queries", vec![m, d], &self.queries.concat()),
                arr("proj_w", vec![d, d_t], self.proj_w.as_slice()),
                arr("proj_b", vec![d], &self.proj_b),
            ],
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::schema(format!("unknown checkpoint format '{}'", ck.format)));
        }
        let get = |name: &str, rank: usize| -> Result<&NamedArray> {
            let a = ck
                .arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| Error::schema(format!("checkpoint missing array '{name}'")))?;
            if a.shape.len() != rank || a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::schema(format!("array '{name}' has inconsistent shape {:?}", a.shape)));
            }
            Ok(a)
        };
        let mat = |name: &str| -> Result<Matrix> {
            let a = get(name, 2)?;
            Matrix::from_vec(a.shape[0], a.shape[1], a.data.clone()).map_err(|e| Error::schema(e.to_string()))
        };
        let q = get("queries", 2)?;
        let params = RelationHeadParams {
            w1: mat("w1")?,
            b1: get("b1", 1)?.data.clone(),
            w2: mat("w2")?,
            b2: get("b2", 1)?.data.clone(),
            queries: q.data.chunks(q.shape[1].max(1)).map(<[f64]>::to_vec).collect(),
            proj_w: mat("proj_w")?,
            proj_b: get("proj_b", 1)?.data.clone(),
        };
        params.check().map_err(|e| Error::schema(e.to_string()))?;
        Ok(params)
    }
}

pub const CHECKPOINT_FORMAT: &str = "relation-head/v1";

/// One named array with its shape header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Relation head checkpoint: named arrays in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub arrays: Vec<NamedArray>,
}

/// Intermediate values of one edge-feature evaluation, kept for the
/// backward pass.
#[derive(Debug, Clone)]
pub(crate) struct EdgeForward {
    /// Concatenated input per query.
    inputs: Vec<Vec<f64>>,
    /// Hidden pre-activations per query.
    pre: Vec<Vec<f64>>,
    pub(crate) out: Vec<f64>,
}

fn check_pair(v_s: &[f64], v_o: &[f64], params: &RelationHeadParams) -> Result<()> {
    let d = params.w2.rows();
    if v_s.len() != d || v_o.len() != d {
        return Err(Error::contract(format!(
            "node features of length {}/{} but head expects {d}",
            v_s.len(),
            v_o.len()
        )));
    }
    Ok(())
}

pub(crate) fn edge_forward(v_s: &[f64], v_o: &[f64], params: &RelationHeadParams) -> EdgeForward {
    let d = params.w2.rows();
    let d_h = params.w1.rows();
    let m = params.queries.len();
    let mut inputs = Vec::with_capacity(m);
    let mut pre = Vec::with_capacity(m);
    // Running mean over queries: exact when every query gives the same
    // activations, so M copies of one query reproduce M = 1 bit for bit.
    let mut hidden_mean = vec![0.0; d_h];
    for (n, r) in params.queries.iter().enumerate() {
        let mut x = Vec::with_capacity(3 * d);
        x.extend_from_slice(v_s);
        x.extend_from_slice(v_o);
        x.extend_from_slice(r);
        let mut h = params.w1.matvec(&x);
        axpy(1.0, &params.b1, &mut h);
        let inv_n = 1.0 / (n + 1) as f64;
        for (acc, &z) in hidden_mean.iter_mut().zip(&h) {
            *acc += (z.max(0.0) - *acc) * inv_n;
        }
        inputs.push(x);
        pre.push(h);
    }
    // W2 is linear, so averaging hidden activations first is exact.
    let mut out = params.w2.matvec(&hidden_mean);
    axpy(1.0, &params.b2, &mut out);
    EdgeForward { inputs, pre, out }
}

/// Accumulates the gradient of a scalar loss into `grads`, given the loss
/// gradient with respect to the edge feature.
pub(crate) fn edge_backward(fwd: &EdgeForward, grad_e: &[f64], params: &RelationHeadParams, grads: &mut RelationHeadParams) {
    let d = params.w2.rows();
    let d_h = params.w1.rows();
    let m = params.queries.len();
    let inv_m = 1.0 / m as f64;
    axpy(1.0, grad_e, &mut grads.b2);

    let mut grad_hidden = vec![0.0; d_h];
    params.w2.matvec_t_acc(grad_e, &mut grad_hidden);
    grad_hidden.iter_mut().for_each(|g| *g *= inv_m);

    let mut relu = vec![0.0; d_h];
    let mut grad_pre = vec![0.0; d_h];
    let mut grad_x = vec![0.0; 3 * d];
    for (n, (x, pre)) in fwd.inputs.iter().zip(&fwd.pre).enumerate() {
        for k in 0..d_h {
            let active = pre[k] > 0.0;
            relu[k] = if active { pre[k] } else { 0.0 };
            grad_pre[k] = if active { grad_hidden[k] } else { 0.0 };
        }
        grads.w2.rank1_acc(inv_m, grad_e, &relu);
        grads.w1.rank1_acc(1.0, &grad_pre, x);
        axpy(1.0, &grad_pre, &mut grads.b1);
        grad_x.iter_mut().for_each(|g| *g = 0.0);
        params.w1.matvec_t_acc(&grad_pre, &mut grad_x);
        axpy(1.0, &grad_x[2 * d..], &mut grads.queries[n]);
    }
}

/// Edge feature of the ordered pair `(v_s, v_o)`, averaged over all
/// relation queries.
pub fn edge_feature(v_s: &[f64], v_o: &[f64], params: &RelationHeadParams) -> Result<Vec<f64>> {
    params.check()?;
    check_pair(v_s, v_o, params)?;
    Ok(edge_forward(v_s, v_o, params).out)
}

/// Alignment score of an edge feature with a relation text embedding.
pub fn relation_score(e: &[f64], t_embed: &[f64], params: &RelationHeadParams) -> Result<f64> {
    if e.len() != params.proj_w.rows() {
        return Err(Error::contract(format!(
            "edge feature length {} != head dimension {}",
            e.len(),
            params.proj_w.rows()
        )));
    }
    Ok(dot(e, &params.project_text(t_embed)?))
}

/// One ordered node pair with its positive and negative predicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub subject: Vec<f64>,
    pub object: Vec<f64>,
    pub positives: BTreeSet<String>,
    pub negatives: BTreeSet<String>,
}

/// Alignment training batch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairBatch {
    pub samples: Vec<PairSample>,
}

impl PairBatch {
    /// Number of (pair, predicate) samples, `|P| + |N|`.
    pub fn sample_count(&self) -> usize {
        self.samples.iter().map(|s| s.positives.len() + s.negatives.len()).sum()
    }
}

/// Relation text embeddings projected once per loss evaluation.
struct ProjectedVocab<'a> {
    names: Vec<&'a str>,
    raw: Vec<&'a [f64]>,
    projected: Vec<Vec<f64>>,
}

impl<'a> ProjectedVocab<'a> {
    fn build(batch: &'a PairBatch, cs: &'a ConceptSpace, params: &RelationHeadParams) -> Result<Self> {
        let mut names: Vec<&str> = batch
            .samples
            .iter()
            .flat_map(|s| s.positives.iter().chain(&s.negatives))
            .map(String::as_str)
            .collect();
        names.sort_unstable();
        names.dedup();
        let mut raw = Vec::with_capacity(names.len());
        let mut projected = Vec::with_capacity(names.len());
        for n in &names {
            let c = cs
                .relation(n)
                .ok_or_else(|| Error::contract(format!("predicate '{n}' not in concept space")))?;
            projected.push(params.project_text(&c.embedding)?);
            raw.push(c.embedding.as_slice());
        }
        Ok(ProjectedVocab { names, raw, projected })
    }

    fn position(&self, name: &str) -> usize {
        self.names.binary_search(&name).expect("vocabulary built from the batch")
    }
}

fn check_batch(batch: &PairBatch, params: &RelationHeadParams) -> Result<()> {
    if batch.sample_count() == 0 {
        return Err(Error::contract("empty alignment batch"));
    }
    for s in &batch.samples {
        check_pair(&s.subject, &s.object, params)?;
        if let Some(n) = s.positives.intersection(&s.negatives).next() {
            return Err(Error::contract(format!("predicate '{n}' is both positive and negative")));
        }
    }
    Ok(())
}

/// Binary cross-entropy alignment loss averaged over all `|P| + |N|`
/// samples, with exact gradients for every head parameter.
pub fn bce_loss(batch: &PairBatch, cs: &ConceptSpace, params: &RelationHeadParams) -> Result<(f64, RelationHeadParams)> {
    params.check()?;
    check_batch(batch, params)?;
    let vocab = ProjectedVocab::build(batch, cs, params)?;
    let denom = batch.sample_count() as f64;

    let partials: Vec<(f64, RelationHeadParams)> = batch
        .samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = params.zeros_like();
            let mut loss = 0.0;
            let d_t = params.proj_w.cols();
            for s in chunk {
                let fwd = edge_forward(&s.subject, &s.object, params);
                let e = &fwd.out;
                let mut grad_e = vec![0.0; e.len()];
                let mut text_coef = vec![0.0; d_t];
                let mut bias_coef = 0.0;
                let labeled = s.positives.iter().map(|n| (n, 1.0)).chain(s.negatives.iter().map(|n| (n, 0.0)));
                for (name, y) in labeled {
                    let k = vocab.position(name);
                    let logit = dot(e, &vocab.projected[k]);
                    loss += if y == 1.0 { neg_log_sigmoid(logit) } else { neg_log_sigmoid(-logit) };
                    let coef = if logit.abs() > LOGIT_CLAMP { 0.0 } else { (sigmoid(logit) - y) / denom };
                    if coef != 0.0 {
                        axpy(coef, &vocab.projected[k], &mut grad_e);
                        axpy(coef, vocab.raw[k], &mut text_coef);
                        bias_coef += coef;
                    }
                }
                grads.proj_w.rank1_acc(1.0, e, &text_coef);
                axpy(bias_coef, e, &mut grads.proj_b);
                edge_backward(&fwd, &grad_e, params, &mut grads);
            }
            (loss, grads)
        })
        .collect();

    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &partials {
        loss += l;
        grads.axpy(1.0, g);
    }
    Ok((loss / denom, grads))
}

/// Focal loss averaged over samples, with its gradient with respect to each
/// logit. Reduces to `alpha`-weighted BCE at `gamma = 0`.
pub fn focal_loss(logits: &[f64], labels: &[bool], alpha: f64, gamma: f64) -> Result<(f64, Vec<f64>)> {
    if logits.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} logits but {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::contract("focal loss over zero samples"));
    }
    if !(alpha > 0.0 && alpha < 1.0) || gamma.is_nan() || gamma < 0.0 {
        return Err(Error::contract(format!("invalid focal parameters alpha={alpha} gamma={gamma}")));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (&x, &y) in logits.iter().zip(labels) {
        // p_t is the probability of the true class; sign maps d p_t / dx.
        let (z, a_t, sign) = if y { (x, alpha, 1.0) } else { (-x, 1.0 - alpha, -1.0) };
        let q = sigmoid(z);
        let log_q = -neg_log_sigmoid(z);
        let one_minus = sigmoid(-z);
        loss += -a_t * one_minus.powf(gamma) * log_q;
        let g = if x.abs() > LOGIT_CLAMP {
            0.0
        } else {
            sign * a_t * (gamma * q * one_minus.powf(gamma) * log_q - one_minus.powf(gamma + 1.0))
        };
        grads.push(g / n);
    }
    Ok((loss / n, grads))
}

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// How positive and negative (pair, predicate) samples are drawn from an
/// annotated graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingPolicy {
    /// Negative predicates drawn per positive on annotated pairs.
    pub negatives_per_positive: usize,
    /// Unannotated ordered pairs drawn per graph as background.
    pub background_pairs: usize,
    /// Negative predicates drawn per background pair.
    pub negatives_per_background: usize,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        SamplingPolicy {
            negatives_per_positive: 3,
            background_pairs: 4,
            negatives_per_background: 3,
        }
    }
}

/// Samples drawn from one graph, with the indices of the pure-negative
/// (background) pairs inside `batch.samples`.
#[derive(Debug, Clone, Default)]
pub struct SampledGraph {
    pub batch: PairBatch,
    pub background: Vec<usize>,
}

/// Builds alignment samples from a graph whose nodes carry features.
///
/// Every annotated `(s, o, predicate)` with a predicate in `vocabulary` is a
/// positive; the same pair gets `negatives_per_positive` negatives per
/// positive, drawn from the vocabulary minus its annotated predicates.
/// Unannotated pairs are drawn as background with negatives only.
pub fn sample_graph<R: Rng + ?Sized>(
    g: &SceneGraph,
    vocabulary: &[&str],
    policy: &SamplingPolicy,
    rng: &mut R,
) -> Result<SampledGraph> {
    let features = g
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| {
            n.feature
                .as_deref()
                .ok_or_else(|| Error::contract(format!("{}: node {i} has no feature", g.image_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let vocab: BTreeSet<&str> = vocabulary.iter().copied().collect();

    let mut annotated: std::collections::BTreeMap<(usize, usize), BTreeSet<String>> = Default::default();
    for e in &g.edges {
        if e.subject == e.object || e.subject >= features.len() || e.object >= features.len() {
            return Err(Error::contract(format!("{}: invalid edge ({}, {})", g.image_id, e.subject, e.object)));
        }
        if vocab.contains(e.predicate.as_str()) {
            annotated.entry((e.subject, e.object)).or_default().insert(e.predicate.clone());
        }
    }

    let draw = |exclude: &BTreeSet<String>, k: usize, rng: &mut R| -> BTreeSet<String> {
        let pool: Vec<&str> = vocab.iter().copied().filter(|n| !exclude.contains(*n)).collect();
        pool.choose_multiple(rng, k.min(pool.len())).map(|s| s.to_string()).collect()
    };

    let mut out = SampledGraph::default();
    for (&(s, o), pos) in &annotated {
        let negatives = draw(pos, policy.negatives_per_positive * pos.len(), rng);
        out.batch.samples.push(PairSample {
            subject: features[s].to_vec(),
            object: features[o].to_vec(),
            positives: pos.clone(),
            negatives,
        });
    }

    let n = features.len();
    let related: BTreeSet<(usize, usize)> = g.edges.iter().map(|e| (e.subject, e.object)).collect();
    let free: Vec<(usize, usize)> = (0..n)
        .flat_map(|s| (0..n).map(move |o| (s, o)))
        .filter(|&(s, o)| s != o && !related.contains(&(s, o)))
        .collect();
    let empty = BTreeSet::new();
    for &(s, o) in free.choose_multiple(rng, policy.background_pairs.min(free.len())) {
        let negatives = draw(&empty, policy.negatives_per_background, rng);
        if negatives.is_empty() {
            continue;
        }
        out.background.push(out.batch.samples.len());
        out.batch.samples.push(PairSample {
            subject: features[s].to_vec(),
            object: features[o].to_vec(),
            positives: BTreeSet::new(),
            negatives,
        });
    }
    Ok(out)
}
