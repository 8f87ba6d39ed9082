//! Teacher-student retention of novel relations during fine-tuning, and a
//! synthetic world in which forgetting can be observed.
//!
//! Fine-tuning on base-only annotations treats every pair carrying a novel
//! relation as background. The L1 distillation term keeps the student's
//! edge features on background pairs close to those of the frozen teacher.

use std::collections::BTreeSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{bce_loss, edge_forward, sample_graph, sigmoid, HeadDims, PairBatch, RelationHeadParams, SamplingPolicy};
use crate::error::{Error, Result};
use crate::evaluation::{credit_ranks, EvalConfig};
use crate::linalg::{dot, Matrix};
use crate::splits::{filter_training_graph, Setting, SplitSpec};
use crate::types::{BBox, Concept, ConceptKind, ConceptSpace, Edge, Node, RankedTriplet, SceneGraph, Split};

/// Same reduction granularity as the alignment losses.
const CHUNK: usize = 16;

/// Prior pairs used to center the generator and set the relation threshold.
const CALIBRATION_PAIRS: usize = 4000;

/// An ordered node pair by feature.
pub type FeaturePair = (Vec<f64>, Vec<f64>);

fn check_same_dims(teacher: &RelationHeadParams, student: &RelationHeadParams) -> Result<()> {
    teacher.check()?;
    student.check()?;
    if teacher.dims() != student.dims() {
        return Err(Error::contract(format!(
            "teacher {:?} and student {:?} differ in shape",
            teacher.dims(),
            student.dims()
        )));
    }
    Ok(())
}

/// Mean L1 distance between student and teacher edge features over the
/// negative pairs. Gradients flow to the student only.
pub fn distill_loss(
    neg_pairs: &[FeaturePair],
    teacher: &RelationHeadParams,
    student: &RelationHeadParams,
) -> Result<(f64, RelationHeadParams)> {
    check_same_dims(teacher, student)?;
    if neg_pairs.is_empty() {
        return Err(Error::contract("distillation over zero negative pairs"));
    }
    let d = student.dims().d;
    if let Some((s, o)) = neg_pairs.iter().find(|(s, o)| s.len() != d || o.len() != d) {
        return Err(Error::contract(format!("pair features of length {}/{} but head expects {d}", s.len(), o.len())));
    }
    let inv_n = 1.0 / neg_pairs.len() as f64;
    let partials: Vec<(f64, RelationHeadParams)> = neg_pairs
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = student.zeros_like();
            let mut loss = 0.0;
            let mut grad_e = vec![0.0; d];
            for (vs, vo) in chunk {
                let target = edge_forward(vs, vo, teacher).out;
                let fwd = edge_forward(vs, vo, student);
                for ((g, s), t) in grad_e.iter_mut().zip(&fwd.out).zip(&target) {
                    let diff = s - t;
                    loss += diff.abs();
                    // subgradient 0 at the kink
                    *g = if diff > 0.0 {
                        inv_n
                    } else if diff < 0.0 {
                        -inv_n
                    } else {
                        0.0
                    };
                }
                crate::alignment::edge_backward(&fwd, &grad_e, student, &mut grads);
            }
            (loss, grads)
        })
        .collect();
    let mut grads = student.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &partials {
        loss += l;
        grads.axpy(1.0, g);
    }
    Ok((loss * inv_n, grads))
}

/// Weighting of the distillation term against the alignment loss, with the
/// frozen teacher and the trainable student.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub lambda: f64,
    pub teacher: RelationHeadParams,
    pub student: RelationHeadParams,
}

/// Value of each loss term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub bce: f64,
    pub distill: f64,
}

/// `bce + lambda * distill` with gradients for the student. The
/// distillation term is skipped when `lambda` is zero or there are no
/// negative pairs.
pub fn total_loss(
    batch: &PairBatch,
    neg_pairs: &[FeaturePair],
    cs: &ConceptSpace,
    cfg: &DistillConfig,
) -> Result<(LossParts, RelationHeadParams)> {
    if !(cfg.lambda >= 0.0 && cfg.lambda.is_finite()) {
        return Err(Error::contract(format!("lambda must be finite and non-negative, got {}", cfg.lambda)));
    }
    check_same_dims(&cfg.teacher, &cfg.student)?;
    let (bce, mut grads) = bce_loss(batch, cs, &cfg.student)?;
    let mut distill = 0.0;
    if cfg.lambda > 0.0 && !neg_pairs.is_empty() {
        let (l, g) = distill_loss(neg_pairs, &cfg.teacher, &cfg.student)?;
        distill = l;
        grads.axpy(cfg.lambda, &g);
    }
    Ok((
        LossParts { total: bce + cfg.lambda * distill, bce, distill },
        grads,
    ))
}

/// Shape and difficulty of a synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_objects: usize,
    pub n_relations: usize,
    pub n_novel_relations: usize,
    /// Feature, edge and text dimension.
    pub dim: usize,
    pub queries: usize,
    pub nodes_per_scene: usize,
    /// Fraction of ordered pairs that carry a relation.
    pub relation_rate: f64,
    /// Weight of the component shared by all relation text embeddings.
    pub shared_text: f64,
    /// Standard deviation of per-instance feature noise.
    pub feature_noise: f64,
    /// Relative perturbation separating the teacher from the generator.
    pub teacher_noise: f64,
    /// Give every relation an owning subject category; a pair may only
    /// carry relations its subject owns. Novel relations go to their own
    /// categories.
    pub owned_relations: bool,
    /// Cosine-like weight tying each novel relation's text to a random base
    /// parent; 0 keeps them independent.
    pub novel_similarity: f64,
    /// Magnitude of the edge features. The frozen text projection is scaled
    /// by the inverse, so scores are unaffected but the L1 distillation
    /// weighs less against the alignment loss as this shrinks.
    pub edge_scale: f64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_objects: 12,
            n_relations: 50,
            n_novel_relations: 15,
            dim: 32,
            queries: 1,
            nodes_per_scene: 8,
            relation_rate: 0.2,
            shared_text: 0.5,
            feature_noise: 0.3,
            teacher_noise: 0.3,
            owned_relations: true,
            novel_similarity: 0.9,
            edge_scale: 0.3,
            train_scenes: 400,
            eval_scenes: 100,
            seed: 0,
        }
    }
}

/// Concept space, scenes and teacher for one fine-tuning experiment.
///
/// Relations are produced by a hidden generator head: a pair carries the
/// relation with the highest generator score among those its subject may
/// carry, when that score clears a threshold calibrated to `relation_rate`.
/// The teacher is a perturbed copy of the generator, so it scores true
/// predicates high but not perfectly.
///
/// With the default config the novel relations are near-synonyms of
/// frequent base relations and belong to their own subject categories.
/// Fine-tuning then sees every pair of those subjects as background, which
/// is what lets plain alignment training erase them.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    /// Relations carry base/novel flags.
    pub concepts: ConceptSpace,
    pub teacher: RelationHeadParams,
    /// Base-only annotations; graphs left without edges are dropped.
    pub train: Vec<SceneGraph>,
    /// Full annotations, novel relations included.
    pub eval: Vec<SceneGraph>,
    generator: RelationHeadParams,
    thresholds: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Best relation index and its score for every relation's projected text.
fn best_relation(e: &[f64], projected: &[Vec<f64>], allowed: &[usize]) -> (usize, f64) {
    allowed
        .iter()
        .map(|&r| (r, dot(e, &projected[r])))
        .fold((0, f64::NEG_INFINITY), |best, (i, s)| if s > best.1 { (i, s) } else { best })
}

impl SyntheticWorld {
    pub fn generate(config: &WorldConfig) -> Result<Self> {
        let c = config;
        if c.n_objects < 2 || c.n_relations < 2 || c.n_novel_relations == 0 || c.n_novel_relations >= c.n_relations {
            return Err(Error::contract(format!(
                "world needs >= 2 objects and a proper novel subset of >= 2 relations, got {}/{}/{}",
                c.n_objects, c.n_relations, c.n_novel_relations
            )));
        }
        if c.dim == 0 || c.queries == 0 || c.nodes_per_scene < 2 {
            return Err(Error::contract("world dimensions must be positive with at least 2 nodes per scene"));
        }
        if !(c.relation_rate > 0.0 && c.relation_rate < 1.0) {
            return Err(Error::contract(format!("relation rate {} outside (0, 1)", c.relation_rate)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let d = c.dim;

        let prototypes: Vec<Vec<f64>> = (0..c.n_objects).map(|_| gaussian(&mut rng, d, 1.0)).collect();
        let objects = prototypes
            .iter()
            .enumerate()
            .map(|(i, p)| Concept {
                name: format!("object {i:02}"),
                kind: ConceptKind::Object,
                split: Split::Base,
                embedding: p.clone(),
            })
            .collect();
        let shared = gaussian(&mut rng, d, 1.0 / (d as f64).sqrt());
        let mut novel: Vec<usize> = (0..c.n_relations).collect();
        novel.shuffle(&mut rng);
        let novel: BTreeSet<usize> = novel[..c.n_novel_relations].iter().copied().collect();
        let mut texts: Vec<Vec<f64>> = (0..c.n_relations)
            .map(|_| {
                let u = gaussian(&mut rng, d, 1.0 / (d as f64).sqrt());
                u.iter().zip(&shared).map(|(u, s)| u + c.shared_text * s).collect()
            })
            .collect();

        // allowed[cat] lists the relations a subject of that category may carry
        let allowed: Vec<Vec<usize>> = if c.owned_relations {
            let n_novel_owners =
                ((c.n_objects * c.n_novel_relations) as f64 / c.n_relations as f64).round().clamp(1.0, (c.n_objects - 1) as f64) as usize;
            let mut cats: Vec<usize> = (0..c.n_objects).collect();
            cats.shuffle(&mut rng);
            let (novel_owners, base_owners) = cats.split_at(n_novel_owners);
            let mut allowed = vec![Vec::new(); c.n_objects];
            let (mut i_n, mut i_b) = (0, 0);
            for r in 0..c.n_relations {
                if novel.contains(&r) {
                    allowed[novel_owners[i_n % novel_owners.len()]].push(r);
                    i_n += 1;
                } else {
                    allowed[base_owners[i_b % base_owners.len()]].push(r);
                    i_b += 1;
                }
            }
            allowed
        } else {
            vec![(0..c.n_relations).collect(); c.n_objects]
        };

        let dims = HeadDims::new(d, d, c.queries);
        let mut generator = RelationHeadParams::random(dims, &mut rng);
        let feature = |rng: &mut ChaCha8Rng, cat: usize| -> Vec<f64> {
            prototypes[cat].iter().map(|p| p + c.feature_noise * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let calibration: Vec<(usize, FeaturePair)> = (0..CALIBRATION_PAIRS)
            .map(|_| {
                let (a, b) = (rng.gen_range(0..c.n_objects), rng.gen_range(0..c.n_objects));
                (a, (feature(&mut rng, a), feature(&mut rng, b)))
            })
            .collect();
        // Standardized edge coordinates and an identity text projection keep
        // any single relation from winning most pairs through scale alone.
        let edges: Vec<Vec<f64>> = calibration.iter().map(|(_, (va, vb))| edge_forward(va, vb, &generator).out).collect();
        for k in 0..d {
            let m = edges.iter().map(|e| e[k]).sum::<f64>() / edges.len() as f64;
            let var = edges.iter().map(|e| (e[k] - m).powi(2)).sum::<f64>() / edges.len() as f64;
            let inv = 1.0 / var.sqrt().max(1e-12);
            generator.w2.row_mut(k).iter_mut().for_each(|w| *w *= inv);
            generator.b2[k] = (generator.b2[k] - m) * inv;
        }
        generator.proj_w = Matrix::identity(d);

        // Novel relations are near-synonyms of base relations, picked in
        // proportion to how often each base relation wins a prior pair.
        if c.novel_similarity > 0.0 {
            let base_ids: Vec<usize> = (0..c.n_relations).filter(|r| !novel.contains(r)).collect();
            let mut usage = vec![0usize; c.n_relations];
            for (a, (va, vb)) in &calibration {
                let base_allowed: Vec<usize> = allowed[*a].iter().copied().filter(|r| !novel.contains(r)).collect();
                if !base_allowed.is_empty() {
                    usage[best_relation(&edge_forward(va, vb, &generator).out, &texts, &base_allowed).0] += 1;
                }
            }
            let weights: Vec<usize> = base_ids.iter().map(|&r| usage[r]).collect();
            let pick = WeightedIndex::new(&weights).ok();
            let own = (1.0 - c.novel_similarity * c.novel_similarity).max(0.0).sqrt();
            for &n in &novel {
                let parent = match &pick {
                    Some(w) => base_ids[w.sample(&mut rng)],
                    None => *base_ids.choose(&mut rng).expect("base relations exist"),
                };
                texts[n] = texts[n].iter().zip(&texts[parent]).map(|(t, p)| own * t + c.novel_similarity * p).collect();
            }
        }
        let relations = texts
            .into_iter()
            .enumerate()
            .map(|(i, embedding)| Concept {
                name: format!("relation {i:02}"),
                kind: ConceptKind::Relation,
                split: if novel.contains(&i) { Split::Novel } else { Split::Base },
                embedding,
            })
            .collect();
        let concepts = ConceptSpace::new(d, objects, relations)?;
        generator.proj_b = vec![0.0; d];

        let noise = RelationHeadParams::random(dims, &mut rng);
        let mut teacher = generator.clone();
        teacher.axpy(c.teacher_noise, &noise);
        for head in [&mut generator, &mut teacher] {
            head.w2.as_mut_slice().iter_mut().for_each(|w| *w *= c.edge_scale);
            head.b2.iter_mut().for_each(|w| *w *= c.edge_scale);
            head.proj_w.as_mut_slice().iter_mut().for_each(|w| *w /= c.edge_scale);
            head.proj_b.iter_mut().for_each(|w| *w /= c.edge_scale);
        }

        let projected: Vec<Vec<f64>> = concepts
            .relations()
            .iter()
            .map(|r| generator.project_text(&r.embedding))
            .collect::<Result<_>>()?;
        let best: Vec<(usize, f64)> = calibration
            .iter()
            .map(|(a, (va, vb))| (*a, best_relation(&edge_forward(va, vb, &generator).out, &projected, &allowed[*a]).1))
            .collect();
        let quantile = |mut v: Vec<f64>| -> f64 {
            v.sort_by(f64::total_cmp);
            v.get(((1.0 - c.relation_rate) * v.len() as f64) as usize).copied().unwrap_or(f64::INFINITY)
        };
        // Owned relations get one threshold per subject category so every
        // category is related at the same rate.
        let thresholds: Vec<f64> = if c.owned_relations {
            (0..c.n_objects)
                .map(|cat| quantile(best.iter().filter(|b| b.0 == cat).map(|b| b.1).collect()))
                .collect()
        } else {
            vec![quantile(best.iter().map(|b| b.1).collect()); c.n_objects]
        };

        let scene = |rng: &mut ChaCha8Rng, id: String| -> SceneGraph {
            let n = c.nodes_per_scene;
            let side = 20 * n as u32;
            let mut g = SceneGraph::new(id, side, 20);
            let mut cats = Vec::with_capacity(n);
            for i in 0..n {
                let cat = rng.gen_range(0..c.n_objects);
                cats.push(cat);
                let x = 20.0 * i as f64;
                let bbox = BBox::new(x + 1.0, 1.0, x + 19.0, 19.0).expect("grid box is valid");
                g.push_node(Node::new(bbox, &concepts.objects()[cat].name).with_feature(feature(rng, cat)));
            }
            for s in 0..n {
                for o in 0..n {
                    if s == o {
                        continue;
                    }
                    let (vs, vo) = (g.nodes[s].feature.as_ref().unwrap(), g.nodes[o].feature.as_ref().unwrap());
                    let (r, score) = best_relation(&edge_forward(vs, vo, &generator).out, &projected, &allowed[cats[s]]);
                    if score >= thresholds[cats[s]] {
                        g.push_edge(Edge::new(s, o, &concepts.relations()[r].name));
                    }
                }
            }
            g
        };

        let spec = SplitSpec {
            setting: Setting::Ovr,
            novel_objects: BTreeSet::new(),
            novel_relations: concepts
                .names(ConceptKind::Relation, Some(Split::Novel))
                .into_iter()
                .map(str::to_string)
                .collect(),
            seed: c.seed,
        };
        let train = (0..c.train_scenes)
            .filter_map(|i| filter_training_graph(&scene(&mut rng, format!("train-{i:04}")), &spec))
            .collect();
        let eval = (0..c.eval_scenes).map(|i| scene(&mut rng, format!("eval-{i:04}"))).collect();

        Ok(SyntheticWorld { config: config.clone(), concepts, teacher, train, eval, generator, thresholds })
    }

    /// The hidden head that defines the ground truth.
    pub fn generator(&self) -> &RelationHeadParams {
        &self.generator
    }

    /// Relation threshold for subjects of each object category.
    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn base_relations(&self) -> Vec<&str> {
        self.concepts.names(ConceptKind::Relation, Some(Split::Base))
    }

    pub fn novel_relations(&self) -> Vec<&str> {
        self.concepts.names(ConceptKind::Relation, Some(Split::Novel))
    }
}

/// Recall of base-relation and novel-relation ground truth on held-out
/// scenes. `None` when no held-out scene has a triplet of that kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeldOutRecall {
    pub base: Option<f64>,
    pub novel: Option<f64>,
}

/// Ranks every ordered pair against every relation by triplet confidence and
/// scores the top `k` with image-level averaged recall.
pub fn held_out_recall(world: &SyntheticWorld, params: &RelationHeadParams, k: usize) -> Result<HeldOutRecall> {
    params.check()?;
    let relations = world.concepts.relations();
    let projected: Vec<Vec<f64>> = relations.iter().map(|r| params.project_text(&r.embedding)).collect::<Result<_>>()?;
    let cfg = EvalConfig::default();
    let per_image: Vec<(Option<f64>, Option<f64>)> = world
        .eval
        .par_iter()
        .map(|g| {
            let n = g.nodes.len();
            let mut cands: Vec<(f64, usize, usize, usize)> = Vec::with_capacity(n * n * relations.len());
            for s in 0..n {
                for o in 0..n {
                    if s == o {
                        continue;
                    }
                    let e = edge_forward(g.nodes[s].feature.as_ref().unwrap(), g.nodes[o].feature.as_ref().unwrap(), params).out;
                    for (r, t) in projected.iter().enumerate() {
                        cands.push((sigmoid(dot(&e, t)), s, o, r));
                    }
                }
            }
            // stable order: confidence, then enumeration order
            cands.sort_by(|a, b| b.0.total_cmp(&a.0));
            cands.truncate(k);
            let bare = |i: usize| Node::new(g.nodes[i].bbox, &g.nodes[i].category);
            let preds: Vec<RankedTriplet> = cands
                .iter()
                .map(|&(c, s, o, r)| RankedTriplet {
                    subject: bare(s),
                    predicate: relations[r].name.clone(),
                    object: bare(o),
                    confidence: c,
                })
                .collect();
            let recall_of = |novel: bool| {
                let gts: Vec<RankedTriplet> = g
                    .edges
                    .iter()
                    .filter(|e| (world.concepts.relation(&e.predicate).map(|r| r.split) == Some(Split::Novel)) == novel)
                    .map(|e| RankedTriplet {
                        subject: bare(e.subject),
                        predicate: e.predicate.clone(),
                        object: bare(e.object),
                        confidence: 1.0,
                    })
                    .collect();
                (!gts.is_empty()).then(|| {
                    let ranks = credit_ranks(&preds, &gts, &cfg);
                    ranks.iter().filter(|r| r.is_some()).count() as f64 / gts.len() as f64
                })
            };
            (recall_of(false), recall_of(true))
        })
        .collect();
    let mean = |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    Ok(HeldOutRecall {
        base: mean(per_image.iter().filter_map(|p| p.0).collect()),
        novel: mean(per_image.iter().filter_map(|p| p.1).collect()),
    })
}

/// Hyper-parameters of a fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lambda: f64,
    pub step_size: f64,
    pub steps: usize,
    pub seed: u64,
    /// Training scenes sampled per step.
    pub scenes_per_step: usize,
    /// Held-out evaluation interval in steps; the last step is always
    /// evaluated.
    pub eval_every: usize,
    pub policy: SamplingPolicy,
    /// K of the held-out recall.
    pub recall_k: usize,
    /// Update the text projection as well as the relation head.
    pub train_projection: bool,
    pub distill_pairs: DistillPairs,
    pub schedule: StepSchedule,
}

/// Step size over the course of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `step_size` towards zero. Damps the chatter of
    /// the L1 subgradient late in training.
    Cosine,
}

impl StepSchedule {
    /// Step size for 1-based `step` of `steps`.
    pub fn at(self, base: f64, step: usize, steps: usize) -> f64 {
        match self {
            StepSchedule::Constant => base,
            StepSchedule::Cosine => {
                let t = (step - 1) as f64 / steps.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Which sampled pairs count as negatives for distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistillPairs {
    /// Unannotated background pairs only.
    #[default]
    Background,
    /// Every sampled pair with at least one negative predicate.
    AllNegative,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lambda: 0.1,
            step_size: 0.3,
            steps: 600,
            seed: 0,
            scenes_per_step: 8,
            eval_every: 100,
            policy: SamplingPolicy {
                background_pairs: 2,
                ..SamplingPolicy::default()
            },
            recall_k: 50,
            train_projection: false,
            distill_pairs: DistillPairs::default(),
            schedule: StepSchedule::Cosine,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub base_recall: Option<f64>,
    pub novel_recall: Option<f64>,
    /// Loss of the step that led here; absent for the initial point.
    pub loss: Option<LossParts>,
}

#[derive(Debug, Clone)]
pub struct FinetuneRun {
    pub trajectory: Vec<TrajectoryPoint>,
    pub student: RelationHeadParams,
}

impl FinetuneRun {
    pub fn initial(&self) -> &TrajectoryPoint {
        &self.trajectory[0]
    }

    pub fn last(&self) -> &TrajectoryPoint {
        self.trajectory.last().expect("trajectory starts with the initial point")
    }
}

/// Gradient descent on `bce + lambda * distill` from the world's teacher,
/// using base relations only. Deterministic for a fixed config.
pub fn finetune(world: &SyntheticWorld, cfg: &FinetuneConfig) -> Result<FinetuneRun> {
    if !(cfg.step_size > 0.0 && cfg.step_size.is_finite()) {
        return Err(Error::contract(format!("step size must be positive, got {}", cfg.step_size)));
    }
    if cfg.scenes_per_step == 0 || cfg.eval_every == 0 || cfg.recall_k == 0 {
        return Err(Error::contract("scenes_per_step, eval_every and recall_k must be positive"));
    }
    if world.train.is_empty() {
        return Err(Error::contract("world has no training scenes"));
    }
    let vocab = world.base_relations();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dc = DistillConfig {
        lambda: cfg.lambda,
        teacher: world.teacher.clone(),
        student: world.teacher.clone(),
    };
    let start = held_out_recall(world, &dc.student, cfg.recall_k)?;
    let mut trajectory = vec![TrajectoryPoint {
        step: 0,
        base_recall: start.base,
        novel_recall: start.novel,
        loss: None,
    }];

    for step in 1..=cfg.steps {
        let mut batch = PairBatch::default();
        let mut neg_pairs = Vec::new();
        for g in world.train.choose_multiple(&mut rng, cfg.scenes_per_step) {
            let sampled = sample_graph(g, &vocab, &cfg.policy, &mut rng)?;
            match cfg.distill_pairs {
                DistillPairs::Background => {
                    for &b in &sampled.background {
                        let s = &sampled.batch.samples[b];
                        neg_pairs.push((s.subject.clone(), s.object.clone()));
                    }
                }
                DistillPairs::AllNegative => {
                    for s in sampled.batch.samples.iter().filter(|s| !s.negatives.is_empty()) {
                        neg_pairs.push((s.subject.clone(), s.object.clone()));
                    }
                }
            }
            batch.samples.extend(sampled.batch.samples);
        }
        let (parts, mut grads) = total_loss(&batch, &neg_pairs, &world.concepts, &dc)?;
        if !cfg.train_projection {
            grads.proj_w.as_mut_slice().fill(0.0);
            grads.proj_b.fill(0.0);
        }
        if !parts.total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {parts:?}"),
            });
        }
        dc.student.axpy(-cfg.schedule.at(cfg.step_size, step, cfg.steps), &grads);
        if dc.student.values().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                step,
                detail: "non-finite parameters after update".into(),
            });
        }
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let r = held_out_recall(world, &dc.student, cfg.recall_k)?;
            log::debug!("step {step}: loss {:.4} base {:?} novel {:?}", parts.total, r.base, r.novel);
            trajectory.push(TrajectoryPoint {
                step,
                base_recall: r.base,
                novel_recall: r.novel,
                loss: Some(parts),
            });
        }
    }
    Ok(FinetuneRun { trajectory, student: dc.student })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(seed: u64) -> RelationHeadParams {
        RelationHeadParams::random(HeadDims::new(3, 3, 2), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn pairs(n: usize, seed: u64) -> Vec<FeaturePair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (gaussian(&mut rng, 3, 1.0), gaussian(&mut rng, 3, 1.0))).collect()
    }

    #[test]
    fn distill_of_identical_heads_is_zero() {
        let t = head(1);
        let (l, g) = distill_loss(&pairs(5, 2), &t, &t).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.values().all(|v| v == 0.0));
    }

    #[test]
    fn distill_of_shifted_bias() {
        let t = head(1);
        let mut s = t.clone();
        s.b2.iter_mut().for_each(|b| *b += 0.25);
        let (l, _) = distill_loss(&pairs(7, 3), &t, &s).unwrap();
        assert!((l - 0.75).abs() < 1e-12);
    }

    #[test]
    fn distill_rejects_bad_input() {
        let t = head(1);
        assert!(distill_loss(&[], &t, &t).is_err());
        let other = RelationHeadParams::random(HeadDims::new(4, 3, 2), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(distill_loss(&pairs(2, 0), &t, &other).is_err());
    }

    fn tiny_batch() -> (PairBatch, ConceptSpace) {
        let cs = ConceptSpace::synthetic(&["a"], &["on", "under", "near"], 3, 5).unwrap();
        let p = pairs(3, 9);
        let samples = p
            .into_iter()
            .enumerate()
            .map(|(i, (s, o))| crate::alignment::PairSample {
                subject: s,
                object: o,
                positives: if i == 0 { ["on".to_string()].into() } else { BTreeSet::new() },
                negatives: ["under".to_string(), "near".to_string()].into(),
            })
            .collect();
        (PairBatch { samples }, cs)
    }

    #[test]
    fn total_loss_weighting() {
        let (batch, cs) = tiny_batch();
        let t = head(4);
        let mut s = t.clone();
        s.w2.as_mut_slice()[0] += 0.3;
        let negs = pairs(4, 11);
        let (bce, bce_g) = bce_loss(&batch, &cs, &s).unwrap();
        let (dist, _) = distill_loss(&negs, &t, &s).unwrap();

        let zero = DistillConfig { lambda: 0.0, teacher: t.clone(), student: s.clone() };
        let (parts, g) = total_loss(&batch, &negs, &cs, &zero).unwrap();
        assert_eq!(parts.total, bce);
        assert_eq!(g, bce_g);

        let same = DistillConfig { lambda: 1.0, teacher: t.clone(), student: t.clone() };
        let (parts, _) = total_loss(&batch, &negs, &cs, &same).unwrap();
        assert_eq!(parts.total, bce_loss(&batch, &cs, &t).unwrap().0);

        let tenth = DistillConfig { lambda: 0.1, teacher: t, student: s };
        let (parts, _) = total_loss(&batch, &negs, &cs, &tenth).unwrap();
        assert!((parts.total - (bce + 0.1 * dist)).abs() < 1e-15);
    }

    #[test]
    fn lambda_zero_at_init_gives_pure_bce_gradients() {
        let (batch, cs) = tiny_batch();
        let t = head(6);
        let cfg = DistillConfig { lambda: 0.0, teacher: t.clone(), student: t.clone() };
        let (_, g) = total_loss(&batch, &pairs(3, 1), &cs, &cfg).unwrap();
        assert_eq!(g, bce_loss(&batch, &cs, &t).unwrap().1);
    }

    fn small_world() -> SyntheticWorld {
        SyntheticWorld::generate(&WorldConfig { train_scenes: 20, eval_scenes: 10, ..WorldConfig::default() }).unwrap()
    }

    #[test]
    fn world_hides_novel_relations_from_training() {
        let w = small_world();
        let novel: BTreeSet<&str> = w.novel_relations().into_iter().collect();
        assert_eq!(novel.len(), 15);
        assert!(w.train.iter().flat_map(|g| &g.edges).all(|e| !novel.contains(e.predicate.as_str())));
        assert!(w.eval.iter().flat_map(|g| &g.edges).any(|e| novel.contains(e.predicate.as_str())));
        for g in w.train.iter().chain(&w.eval) {
            assert!(crate::types::validate_graph(g, Some(&w.concepts)).is_empty());
        }
    }

    #[test]
    fn zero_steps_give_the_initial_point() {
        let w = small_world();
        let cfg = FinetuneConfig { steps: 0, ..FinetuneConfig::default() };
        let run = finetune(&w, &cfg).unwrap();
        assert_eq!(run.trajectory.len(), 1);
        let r = held_out_recall(&w, &w.teacher, 50).unwrap();
        assert_eq!(run.initial().base_recall, r.base);
        assert_eq!(run.initial().novel_recall, r.novel);
        assert_eq!(run.student, w.teacher);
    }

    #[test]
    fn finetune_is_reproducible() {
        let w = small_world();
        let cfg = FinetuneConfig { steps: 6, eval_every: 3, ..FinetuneConfig::default() };
        let a = finetune(&w, &cfg).unwrap();
        let b = finetune(&w, &cfg).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.student, b.student);
        assert_eq!(a.trajectory.iter().map(|p| p.step).collect::<Vec<_>>(), [0, 3, 6]);
    }

    #[test]
    fn divergence_is_reported() {
        let w = small_world();
        let cfg = FinetuneConfig { steps: 50, step_size: 1e200, eval_every: 50, ..FinetuneConfig::default() };
        assert!(matches!(finetune(&w, &cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn cosine_schedule_decays_to_zero() {
        let n = 100;
        assert_eq!(StepSchedule::Constant.at(0.3, 77, n), 0.3);
        assert_eq!(StepSchedule::Cosine.at(0.3, 1, n), 0.3);
        assert!((StepSchedule::Cosine.at(0.3, 51, n) - 0.15).abs() < 1e-15);
        let steps: Vec<f64> = (1..=n).map(|t| StepSchedule::Cosine.at(0.3, t, n)).collect();
        assert!(steps.windows(2).all(|w| w[1] <= w[0]));
        assert!(steps[n - 1] > 0.0 && steps[n - 1] < 1e-3);
    }

    #[test]
    fn novel_relations_have_their_own_subjects() {
        let w = small_world();
        let novel: BTreeSet<&str> = w.novel_relations().into_iter().collect();
        let (mut novel_subjects, mut base_subjects) = (BTreeSet::new(), BTreeSet::new());
        for g in &w.eval {
            for e in &g.edges {
                let cat = g.nodes[e.subject].category.clone();
                if novel.contains(e.predicate.as_str()) {
                    novel_subjects.insert(cat);
                } else {
                    base_subjects.insert(cat);
                }
            }
        }
        assert!(!novel_subjects.is_empty());
        assert!(novel_subjects.is_disjoint(&base_subjects));
    }

    #[test]
    fn novel_texts_are_near_synonyms_of_base_texts() {
        let w = small_world();
        let cos = |a: &[f64], b: &[f64]| dot(a, b) / (dot(a, a) * dot(b, b)).sqrt();
        let rels = w.concepts.relations();
        for n in rels.iter().filter(|r| r.split == Split::Novel) {
            let best = rels
                .iter()
                .filter(|r| r.split == Split::Base)
                .map(|b| cos(&n.embedding, &b.embedding))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(best > 0.7, "{} best base cosine {best}", n.name);
        }
    }
}
