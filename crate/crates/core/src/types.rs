//! Scene graphs, boxes, vocabularies and ranked predictions.
//!
//! Every other module speaks in these types. Graph-level types are plain
//! data: they can hold malformed content (a degenerate box, a dangling edge
//! index) so that [`validate_graph`] can report it instead of failing at
//! parse time.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::de::{self, DeserializeSeed, MapAccess, SeqAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Case-folds and collapses whitespace so that `" Standing  On"` and
/// `"standing on"` name the same concept.
pub fn normalize_name(raw: &str) -> String {
    raw.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

fn de_name<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    let raw = String::deserialize(d)?;
    Ok(normalize_name(&raw))
}

fn one() -> f64 {
    1.0
}

fn is_one(v: &f64) -> bool {
    *v == 1.0
}

/// Axis-aligned box in absolute pixel corner form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Checked constructor: finite coordinates and strictly positive area.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.check()?;
        Ok(b)
    }

    /// Converts a normalized `(cx, cy, w, h)` box into pixel corners.
    pub fn from_cxcywh_norm(cx: f64, cy: f64, w: f64, h: f64, width: f64, height: f64) -> Self {
        BBox {
            x1: (cx - w / 2.0) * width,
            y1: (cy - h / 2.0) * height,
            x2: (cx + w / 2.0) * width,
            y2: (cy + h / 2.0) * height,
        }
    }

    /// Normalized `(cx, cy, w, h)` relative to an image of the given size.
    pub fn to_cxcywh_norm(&self, width: f64, height: f64) -> [f64; 4] {
        [
            (self.x1 + self.x2) / 2.0 / width,
            (self.y1 + self.y2) / 2.0 / height,
            (self.x2 - self.x1) / width,
            (self.y2 - self.y1) / height,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.x1.is_finite() && self.y1.is_finite() && self.x2.is_finite() && self.y2.is_finite()
    }

    pub fn is_valid(&self) -> bool {
        self.is_finite() && self.x1 < self.x2 && self.y1 < self.y2
    }

    pub(crate) fn check(&self) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::contract(format!("non-finite box {self}")));
        }
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Err(Error::contract(format!("degenerate box {self}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        BBox {
            x1: self.x1 * s,
            y1: self.y1 * s,
            x2: self.x2 * s,
            y2: self.y2 * s,
        }
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.x1, self.y1, self.x2, self.y2].serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [x1, y1, x2, y2] = <[f64; 4]>::deserialize(d)?;
        Ok(BBox { x1, y1, x2, y2 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptKind {
    Object,
    Relation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Base,
    Novel,
}

/// A named object or relation category with its text embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Concept {
    pub name: String,
    pub kind: ConceptKind,
    pub split: Split,
    pub embedding: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ConceptWire {
    name: String,
    #[serde(default)]
    split: Split,
    embedding: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ConceptSpaceWire {
    dim: usize,
    objects: Vec<ConceptWire>,
    relations: Vec<ConceptWire>,
}

/// Object and relation vocabularies with unit-norm embeddings of a shared
/// dimension. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptSpace {
    dim: usize,
    objects: Vec<Concept>,
    relations: Vec<Concept>,
    object_index: HashMap<String, usize>,
    relation_index: HashMap<String, usize>,
}

impl ConceptSpace {
    /// Builds a concept space. Names are normalized, embeddings rescaled to
    /// unit norm; duplicate names within a kind and zero or mis-sized
    /// embeddings are rejected.
    pub fn new(dim: usize, objects: Vec<Concept>, relations: Vec<Concept>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::contract("concept dimension must be positive"));
        }
        let objects = Self::prepare(dim, ConceptKind::Object, objects)?;
        let relations = Self::prepare(dim, ConceptKind::Relation, relations)?;
        let object_index = Self::index(&objects, "object")?;
        let relation_index = Self::index(&relations, "relation")?;
        Ok(ConceptSpace {
            dim,
            objects,
            relations,
            object_index,
            relation_index,
        })
    }

    fn prepare(dim: usize, kind: ConceptKind, concepts: Vec<Concept>) -> Result<Vec<Concept>> {
        concepts
            .into_iter()
            .map(|mut c| {
                c.name = normalize_name(&c.name);
                c.kind = kind;
                if c.name.is_empty() {
                    return Err(Error::schema("empty concept name"));
                }
                if c.embedding.len() != dim {
                    return Err(Error::schema(format!(
                        "embedding of '{}' has length {}, expected {dim}",
                        c.name,
                        c.embedding.len()
                    )));
                }
                let norm = c.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
                if !(norm.is_finite() && norm > 0.0) {
                    return Err(Error::schema(format!("embedding of '{}' has zero norm", c.name)));
                }
                c.embedding.iter_mut().for_each(|x| *x /= norm);
                Ok(c)
            })
            .collect()
    }

    fn index(concepts: &[Concept], what: &str) -> Result<HashMap<String, usize>> {
        let mut idx = HashMap::with_capacity(concepts.len());
        for (i, c) in concepts.iter().enumerate() {
            if idx.insert(c.name.clone(), i).is_some() {
                return Err(Error::schema(format!("duplicate {what} name '{}'", c.name)));
            }
        }
        Ok(idx)
    }

    /// Random unit embeddings for the given names, all flagged base.
    pub fn synthetic(object_names: &[&str], relation_names: &[&str], dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut make = |names: &[&str], kind| {
            names
                .iter()
                .map(|n| Concept {
                    name: n.to_string(),
                    kind,
                    split: Split::Base,
                    embedding: (0..dim).map(|_| rng.sample(StandardNormal)).collect(),
                })
                .collect::<Vec<_>>()
        };
        let objects = make(object_names, ConceptKind::Object);
        let relations = make(relation_names, ConceptKind::Relation);
        ConceptSpace::new(dim, objects, relations)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn objects(&self) -> &[Concept] {
        &self.objects
    }

    pub fn relations(&self) -> &[Concept] {
        &self.relations
    }

    pub fn concepts(&self, kind: ConceptKind) -> &[Concept] {
        match kind {
            ConceptKind::Object => &self.objects,
            ConceptKind::Relation => &self.relations,
        }
    }

    pub fn object(&self, name: &str) -> Option<&Concept> {
        self.object_index.get(name).map(|&i| &self.objects[i])
    }

    pub fn relation(&self, name: &str) -> Option<&Concept> {
        self.relation_index.get(name).map(|&i| &self.relations[i])
    }

    pub fn object_position(&self, name: &str) -> Option<usize> {
        self.object_index.get(name).copied()
    }

    pub fn relation_position(&self, name: &str) -> Option<usize> {
        self.relation_index.get(name).copied()
    }

    pub fn names(&self, kind: ConceptKind, split: Option<Split>) -> Vec<&str> {
        self.concepts(kind)
            .iter()
            .filter(|c| split.is_none_or(|s| c.split == s))
            .map(|c| c.name.as_str())
            .collect()
    }

    /// Copy of this space with the split flags replaced: the named concepts
    /// become novel, everything else base. Unknown names are an error.
    pub fn with_novel(&self, novel_objects: &HashSet<String>, novel_relations: &HashSet<String>) -> Result<Self> {
        for n in novel_objects {
            if self.object(n).is_none() {
                return Err(Error::contract(format!("unknown object '{n}'")));
            }
        }
        for n in novel_relations {
            if self.relation(n).is_none() {
                return Err(Error::contract(format!("unknown relation '{n}'")));
            }
        }
        let mut out = self.clone();
        for c in &mut out.objects {
            c.split = if novel_objects.contains(&c.name) { Split::Novel } else { Split::Base };
        }
        for c in &mut out.relations {
            c.split = if novel_relations.contains(&c.name) { Split::Novel } else { Split::Base };
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let cs: ConceptSpace = serde_json::from_reader(BufReader::new(file))?;
        Ok(cs)
    }
}

impl Serialize for ConceptSpace {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let wire = |cs: &[Concept]| {
            cs.iter()
                .map(|c| ConceptWire {
                    name: c.name.clone(),
                    split: c.split,
                    embedding: c.embedding.clone(),
                })
                .collect::<Vec<_>>()
        };
        ConceptSpaceWire {
            dim: self.dim,
            objects: wire(&self.objects),
            relations: wire(&self.relations),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ConceptSpace {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let w = ConceptSpaceWire::deserialize(d)?;
        let concepts = |ws: Vec<ConceptWire>, kind| {
            ws.into_iter()
                .map(|c| Concept {
                    name: c.name,
                    kind,
                    split: c.split,
                    embedding: c.embedding,
                })
                .collect::<Vec<_>>()
        };
        ConceptSpace::new(
            w.dim,
            concepts(w.objects, ConceptKind::Object),
            concepts(w.relations, ConceptKind::Relation),
        )
        .map_err(de::Error::custom)
    }
}

/// A detected or annotated object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(deserialize_with = "de_name")]
    pub category: String,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub score: f64,
    /// Visual representation of the node, when a model produced one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<Vec<f64>>,
    /// Text embedding for an open-vocabulary category outside the active
    /// concept space.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl Node {
    pub fn new(bbox: BBox, category: &str) -> Self {
        Node {
            bbox,
            category: normalize_name(category),
            score: 1.0,
            feature: None,
            embedding: None,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn with_feature(mut self, feature: Vec<f64>) -> Self {
        self.feature = Some(feature);
        self
    }
}

/// Directed, labeled relation between two nodes of the same graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    #[serde(rename = "sub")]
    pub subject: usize,
    #[serde(rename = "obj")]
    pub object: usize,
    #[serde(deserialize_with = "de_name")]
    pub predicate: String,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub score: f64,
}

impl Edge {
    pub fn new(subject: usize, object: usize, predicate: &str) -> Self {
        Edge {
            subject,
            object,
            predicate: normalize_name(predicate),
            score: 1.0,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }
}

/// Nodes and edges of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

impl SceneGraph {
    pub fn new(image_id: impl Into<String>, width: u32, height: u32) -> Self {
        SceneGraph {
            image_id: image_id.into(),
            width,
            height,
            nodes: Vec::new(),
            edges: Vec::new(),
        }
    }

    pub fn push_node(&mut self, node: Node) -> usize {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    pub fn push_edge(&mut self, edge: Edge) {
        self.edges.push(edge);
    }
}

/// Box encoding used by an input file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxFormat {
    /// Absolute pixel corners `[x1, y1, x2, y2]` (canonical).
    #[default]
    Xyxy,
    /// Normalized `[cx, cy, w, h]` in `[0, 1]` image units.
    Cxcywh,
}

impl BoxFormat {
    fn convert(self, g: &mut SceneGraph) {
        if self == BoxFormat::Cxcywh {
            let (w, h) = (g.width as f64, g.height as f64);
            for n in &mut g.nodes {
                let b = n.bbox;
                n.bbox = BBox::from_cxcywh_norm(b.x1, b.y1, b.x2, b.y2, w, h);
            }
        }
    }
}

/// A collection of scene graphs: `{"images": [...]}`.
///
/// The canonical serialization is compact JSON with `xyxy` boxes and no
/// `box_format` key; scores equal to 1.0 are omitted.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Dataset {
    pub images: Vec<SceneGraph>,
}

impl Dataset {
    pub fn new(images: Vec<SceneGraph>) -> Self {
        Dataset { images }
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut images = Vec::new();
        for_each_image(reader, |g| {
            images.push(g);
            Ok(())
        })?;
        Ok(Dataset { images })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_reader(s.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(file))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("dataset serialization is infallible")
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut out = DatasetWriter::new(w)?;
        for g in &self.images {
            out.push(g)?;
        }
        out.finish()?;
        Ok(())
    }

    pub fn get(&self, image_id: &str) -> Option<&SceneGraph> {
        self.images.iter().find(|g| g.image_id == image_id)
    }
}

impl<'de> Deserialize<'de> for Dataset {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let mut images = Vec::new();
        let mut sink = |g| {
            images.push(g);
            Ok(())
        };
        let mut failure = None;
        d.deserialize_map(DatasetVisitor {
            sink: &mut sink,
            failure: &mut failure,
        })?;
        Ok(Dataset { images })
    }
}

/// Incremental writer producing the canonical dataset form without holding
/// the whole corpus in memory.
pub struct DatasetWriter<W: Write> {
    out: W,
    first: bool,
}

impl<W: Write> DatasetWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        out.write_all(b"{\"images\":[")
            .map_err(|e| Error::io("<dataset writer>", e))?;
        Ok(DatasetWriter { out, first: true })
    }

    pub fn push(&mut self, g: &SceneGraph) -> Result<()> {
        if !self.first {
            self.out.write_all(b",").map_err(|e| Error::io("<dataset writer>", e))?;
        }
        self.first = false;
        serde_json::to_writer(&mut self.out, g)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.write_all(b"]}").map_err(|e| Error::io("<dataset writer>", e))?;
        self.out.flush().map_err(|e| Error::io("<dataset writer>", e))?;
        Ok(self.out)
    }
}

type Sink<'a> = dyn FnMut(SceneGraph) -> Result<()> + 'a;

struct DatasetVisitor<'a, 'b> {
    sink: &'a mut Sink<'b>,
    failure: &'a mut Option<Error>,
}

impl<'de> Visitor<'de> for DatasetVisitor<'_, '_> {
    type Value = ();

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("a dataset object with an \"images\" array")
    }

    fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<(), A::Error> {
        let mut format = BoxFormat::Xyxy;
        let mut seen_images = false;
        while let Some(key) = map.next_key::<String>()? {
            match key.as_str() {
                "box_format" => {
                    if seen_images {
                        return Err(de::Error::custom("\"box_format\" must precede \"images\""));
                    }
                    format = map.next_value()?;
                }
                "images" => {
                    seen_images = true;
                    map.next_value_seed(ImagesSeed {
                        format,
                        sink: &mut *self.sink,
                        failure: &mut *self.failure,
                    })?;
                }
                _ => {
                    map.next_value::<de::IgnoredAny>()?;
                }
            }
        }
        if !seen_images {
            return Err(de::Error::missing_field("images"));
        }
        Ok(())
    }
}

struct ImagesSeed<'a, 'b> {
    format: BoxFormat,
    sink: &'a mut Sink<'b>,
    failure: &'a mut Option<Error>,
}

impl<'de> DeserializeSeed<'de> for ImagesSeed<'_, '_> {
    type Value = ();

    fn deserialize<D: Deserializer<'de>>(self, d: D) -> std::result::Result<(), D::Error> {
        d.deserialize_seq(self)
    }
}

impl<'de> Visitor<'de> for ImagesSeed<'_, '_> {
    type Value = ();

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("an array of images")
    }

    fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> std::result::Result<(), A::Error> {
        while let Some(mut g) = seq.next_element::<SceneGraph>()? {
            self.format.convert(&mut g);
            if let Err(e) = (self.sink)(g) {
                *self.failure = Some(e);
                return Err(de::Error::custom("image callback aborted"));
            }
        }
        Ok(())
    }
}

/// Streams every image of a dataset file through `f`, one at a time.
pub fn for_each_image<R, F>(reader: R, mut f: F) -> Result<()>
where
    R: Read,
    F: FnMut(SceneGraph) -> Result<()>,
{
    let mut failure = None;
    let mut de = serde_json::Deserializer::from_reader(reader);
    let res = de::Deserializer::deserialize_map(
        &mut de,
        DatasetVisitor {
            sink: &mut f,
            failure: &mut failure,
        },
    );
    if let Some(e) = failure {
        return Err(e);
    }
    res?;
    de.end()?;
    Ok(())
}

/// Reads JSON lines, skipping blank lines.
pub fn read_json_lines<T, R>(reader: R) -> Result<Vec<T>>
where
    T: for<'de> Deserialize<'de>,
    R: BufRead,
{
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("<line {}>", lineno + 1), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::schema(format!("line {}: {e}", lineno + 1)))?,
        );
    }
    Ok(out)
}

/// A broken invariant found by [`validate_graph`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub image_id: String,
    /// Path of the offending field, e.g. `nodes[2].box`.
    pub field: String,
    /// Short rule name, e.g. `self-loop`.
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}: {}", self.image_id, self.field, self.rule)
    }
}

/// Lists every invariant the graph breaks. An empty result means the graph
/// is well formed. Vocabulary checks run only when a concept space is given.
pub fn validate_graph(g: &SceneGraph, cs: Option<&ConceptSpace>) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |field: String, rule: &str| {
        out.push(Violation {
            image_id: g.image_id.clone(),
            field,
            rule: rule.to_string(),
        })
    };

    if g.width == 0 || g.height == 0 {
        push("width/height".into(), "zero image size");
    }
    for (i, n) in g.nodes.iter().enumerate() {
        let b = n.bbox;
        if !b.is_finite() {
            push(format!("nodes[{i}].box"), "non-finite coordinate");
        } else {
            if !(b.x1 < b.x2 && b.y1 < b.y2) {
                push(format!("nodes[{i}].box"), "degenerate box");
            }
            if b.x1.min(b.x2) < 0.0
                || b.y1.min(b.y2) < 0.0
                || b.x1.max(b.x2) > g.width as f64
                || b.y1.max(b.y2) > g.height as f64
            {
                push(format!("nodes[{i}].box"), "box outside image");
            }
        }
        if !(0.0..=1.0).contains(&n.score) {
            push(format!("nodes[{i}].score"), "score out of range");
        }
        if n.category.is_empty() {
            push(format!("nodes[{i}].category"), "empty category");
        } else if let Some(cs) = cs {
            match (&n.embedding, cs.object(&n.category)) {
                (_, Some(_)) => {}
                (Some(e), None) if e.len() == cs.dim() => {}
                (Some(_), None) => push(format!("nodes[{i}].embedding"), "embedding dimension mismatch"),
                (None, None) => push(format!("nodes[{i}].category"), "unknown category"),
            }
        }
        if let (Some(f), Some(cs)) = (&n.feature, cs) {
            if f.len() != cs.dim() {
                push(format!("nodes[{i}].feature"), "feature dimension mismatch");
            }
        }
    }

    let mut seen = HashSet::new();
    for (k, e) in g.edges.iter().enumerate() {
        let n = g.nodes.len();
        if e.subject >= n {
            push(format!("edges[{k}].sub"), "index out of range");
        }
        if e.object >= n {
            push(format!("edges[{k}].obj"), "index out of range");
        }
        if e.subject == e.object {
            push(format!("edges[{k}]"), "self-loop");
        }
        if !(0.0..=1.0).contains(&e.score) {
            push(format!("edges[{k}].score"), "score out of range");
        }
        if e.predicate.is_empty() {
            push(format!("edges[{k}].predicate"), "empty predicate");
        } else if let Some(cs) = cs {
            if cs.relation(&e.predicate).is_none() {
                push(format!("edges[{k}].predicate"), "unknown predicate");
            }
        }
        if !seen.insert((e.subject, e.object, e.predicate.as_str())) {
            push(format!("edges[{k}]"), "duplicate edge");
        }
    }
    out
}

/// Ranking score of a predicted triplet: product of the subject, object and
/// predicate scores.
pub fn triplet_score(sub_score: f64, obj_score: f64, pred_score: f64) -> Result<f64> {
    for (what, v) in [("subject", sub_score), ("object", obj_score), ("predicate", pred_score)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::contract(format!("{what} score {v} outside [0, 1]")));
        }
    }
    Ok(sub_score * obj_score * pred_score)
}

/// One predicted `(subject, predicate, object)` with its confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTriplet {
    pub subject: Node,
    pub predicate: String,
    pub object: Node,
    pub confidence: f64,
}

/// Predicted triplets of one image, sorted by non-increasing confidence.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RankedTriplets {
    items: Vec<RankedTriplet>,
}

impl RankedTriplets {
    /// Sorts by confidence (stable, so equal confidences keep input order)
    /// and keeps at most `cap` entries.
    pub fn rank(mut items: Vec<RankedTriplet>, cap: usize) -> Self {
        items.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        items.truncate(cap);
        RankedTriplets { items }
    }

    /// Wraps an already ranked list, rejecting unsorted input.
    pub fn from_sorted(items: Vec<RankedTriplet>) -> Result<Self> {
        if let Some(k) = first_unsorted(&items) {
            return Err(Error::contract(format!(
                "triplets not sorted by confidence at position {k}"
            )));
        }
        Ok(RankedTriplets { items })
    }

    /// Builds the ranking for a predicted graph: one triplet per edge,
    /// confidence from [`triplet_score`].
    pub fn from_graph(g: &SceneGraph, cap: usize) -> Result<Self> {
        let mut items = Vec::with_capacity(g.edges.len());
        for e in &g.edges {
            let (s, o) = match (g.nodes.get(e.subject), g.nodes.get(e.object)) {
                (Some(s), Some(o)) => (s, o),
                _ => {
                    return Err(Error::contract(format!(
                        "{}: edge ({}, {}) references a missing node",
                        g.image_id, e.subject, e.object
                    )))
                }
            };
            items.push(RankedTriplet {
                subject: s.clone(),
                predicate: e.predicate.clone(),
                object: o.clone(),
                confidence: triplet_score(s.score, o.score, e.score)?,
            });
        }
        Ok(Self::rank(items, cap))
    }

    pub fn as_slice(&self) -> &[RankedTriplet] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn into_inner(self) -> Vec<RankedTriplet> {
        self.items
    }

    pub(crate) fn check_sorted(&self) -> Result<()> {
        match first_unsorted(&self.items) {
            Some(k) => Err(Error::contract(format!(
                "triplets not sorted by confidence at position {k}"
            ))),
            None => Ok(()),
        }
    }
}

impl<'de> Deserialize<'de> for RankedTriplets {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Wire {
            items: Vec<RankedTriplet>,
        }
        let w = Wire::deserialize(d)?;
        RankedTriplets::from_sorted(w.items).map_err(de::Error::custom)
    }
}

fn first_unsorted(items: &[RankedTriplet]) -> Option<usize> {
    items
        .windows(2)
        .position(|w| w[1].confidence > w[0].confidence || w[1].confidence.is_nan())
        .map(|k| k + 1)
}

/// Fisher-Yates shuffle of `items` driven by ChaCha8 stream `stream` of
/// `seed`. Distinct streams give independent permutations for one seed.
pub(crate) fn seeded_shuffle<T>(items: &mut [T], seed: u64, stream: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    items.shuffle(&mut rng);
}
