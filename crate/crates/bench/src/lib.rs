//! Shared fixtures for the benchmarks. Everything is seeded so runs compare.

use ovsg_core::alignment::{HeadDims, PairBatch, PairSample, RelationHeadParams};
use ovsg_core::linalg::Matrix;
use ovsg_core::{BBox, ConceptSpace, Edge, Node, SceneGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WIDTH: f64 = 640.0;
pub const HEIGHT: f64 = 480.0;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_box(rng: &mut impl Rng) -> BBox {
    let x1 = rng.gen_range(0.0..WIDTH - 20.0);
    let y1 = rng.gen_range(0.0..HEIGHT - 20.0);
    let x2 = rng.gen_range(x1 + 5.0..WIDTH);
    let y2 = rng.gen_range(y1 + 5.0..HEIGHT);
    BBox::new(x1, y1, x2, y2).expect("ordered corners")
}

pub fn box_pairs(n: usize, seed: u64) -> Vec<(BBox, BBox)> {
    let mut r = rng(seed);
    (0..n).map(|_| (random_box(&mut r), random_box(&mut r))).collect()
}

pub fn similarity(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = rng(seed);
    Matrix::from_fn(rows, cols, |_, _| r.gen_range(-1.0..1.0))
}

pub fn vocabulary(n_obj: usize, n_rel: usize, dim: usize) -> ConceptSpace {
    let o: Vec<String> = (0..n_obj).map(|i| format!("object {i}")).collect();
    let p: Vec<String> = (0..n_rel).map(|i| format!("relation {i}")).collect();
    let o: Vec<&str> = o.iter().map(String::as_str).collect();
    let p: Vec<&str> = p.iter().map(String::as_str).collect();
    ConceptSpace::synthetic(&o, &p, dim, 0).expect("distinct names")
}

pub fn head(dims: HeadDims, seed: u64) -> RelationHeadParams {
    RelationHeadParams::random(dims, &mut rng(seed))
}

pub fn feature(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// `pairs` samples, each with one positive and three negatives.
pub fn pair_batch(cs: &ConceptSpace, pairs: usize, seed: u64) -> PairBatch {
    let mut r = rng(seed);
    let names: Vec<&str> = cs.relations().iter().map(|c| c.name.as_str()).collect();
    let samples = (0..pairs)
        .map(|_| {
            let picks = rand::seq::index::sample(&mut r, names.len(), 4).into_vec();
            PairSample {
                subject: feature(cs.dim(), &mut r),
                object: feature(cs.dim(), &mut r),
                positives: [names[picks[0]].to_string()].into(),
                negatives: picks[1..].iter().map(|&i| names[i].to_string()).collect(),
            }
        })
        .collect();
    PairBatch { samples }
}

/// A graph with `nodes` random boxes and `edges` distinct scored edges.
pub fn scene(id: &str, cs: &ConceptSpace, nodes: usize, edges: usize, seed: u64) -> SceneGraph {
    let mut r = rng(seed);
    let mut g = SceneGraph::new(id, WIDTH as u32, HEIGHT as u32);
    let objects = cs.objects();
    for _ in 0..nodes {
        let c = &objects[r.gen_range(0..objects.len())];
        let score = r.gen_range(0.05..1.0);
        g.push_node(Node::new(random_box(&mut r), &c.name).with_score(score));
    }
    let relations = cs.relations();
    let mut seen = std::collections::HashSet::new();
    while g.edges.len() < edges {
        let (s, o) = (r.gen_range(0..nodes), r.gen_range(0..nodes));
        let p = &relations[r.gen_range(0..relations.len())].name;
        if s != o && seen.insert((s, o, p.clone())) {
            let score = r.gen_range(0.05..1.0);
            g.push_edge(Edge::new(s, o, p).with_score(score));
        }
    }
    g
}

/// Ground truth plus a noisy copy used as the prediction: boxes jittered,
/// a share of labels swapped, scores random.
pub fn gt_and_prediction(cs: &ConceptSpace, nodes: usize, edges: usize, seed: u64) -> (SceneGraph, SceneGraph) {
    let gt = scene("img", cs, nodes, edges, seed);
    let mut r = rng(seed ^ 0x5eed);
    let mut pred = gt.clone();
    for n in &mut pred.nodes {
        let (dx, dy) = (r.gen_range(-8.0..8.0), r.gen_range(-8.0..8.0));
        n.bbox = n.bbox.translate(dx, dy);
        n.score = r.gen_range(0.05..1.0);
    }
    let relations = cs.relations();
    for e in &mut pred.edges {
        if r.gen_bool(0.3) {
            e.predicate = relations[r.gen_range(0..relations.len())].name.clone();
        }
        e.score = r.gen_range(0.05..1.0);
    }
    (gt, pred)
}

pub const CAPTIONS: &[&str] = &[
    "A man riding a skateboard down the street.",
    "Two dogs laying on a bed next to a window.",
    "A woman holding an umbrella while walking in the rain.",
    "A plate of food on a wooden table with a fork and a knife.",
    "A giraffe standing near a tree in a grassy field.",
    "The boy who is wearing a red shirt is sitting on a bench.",
    "A bird perched on top of a pole above the water.",
    "A bus parked in front of a building with many windows.",
];
