//! Open-vocabulary benchmark settings: choosing novel categories and
//! filtering fully annotated training graphs accordingly.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{normalize_name, seeded_shuffle, ConceptKind, ConceptSpace, Dataset, SceneGraph};

/// Which concepts are withheld from training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Closed,
    /// Novel object categories.
    Ovd,
    /// Novel relation categories.
    Ovr,
    /// Both.
    OvdR,
}

impl Setting {
    pub fn withholds_objects(self) -> bool {
        matches!(self, Setting::Ovd | Setting::OvdR)
    }

    pub fn withholds_relations(self) -> bool {
        matches!(self, Setting::Ovr | Setting::OvdR)
    }
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed" => Ok(Setting::Closed),
            "ovd" => Ok(Setting::Ovd),
            "ovr" => Ok(Setting::Ovr),
            "ovd_r" => Ok(Setting::OvdR),
            other => Err(Error::contract(format!("unknown setting '{other}'"))),
        }
    }
}

/// A benchmark setting with its novel name sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub setting: Setting,
    pub novel_objects: BTreeSet<String>,
    pub novel_relations: BTreeSet<String>,
    #[serde(default)]
    pub seed: u64,
}

/// Fraction of each vocabulary marked novel, in tenths.
const NOVEL_TENTHS: usize = 3;

/// `ceil(30% of n)` in integer arithmetic.
pub fn novel_object_count(n: usize) -> usize {
    (NOVEL_TENTHS * n).div_ceil(10)
}

/// `30% of n` rounded to nearest, halves up.
pub fn novel_relation_count(n: usize) -> usize {
    (NOVEL_TENTHS * n + 5) / 10
}

pub const MIN_OBJECTS: usize = 10;
pub const MIN_RELATIONS: usize = 2;

fn pick(mut names: Vec<String>, k: usize, seed: u64, stream: u64) -> BTreeSet<String> {
    names.sort();
    seeded_shuffle(&mut names, seed, stream);
    names.truncate(k);
    names.into_iter().collect()
}

/// Draws the novel sets for `setting` from the concept space.
///
/// Objects and relations use independent shuffle streams, so the union
/// setting marks exactly the two single-axis selections for the same seed.
pub fn make_split(cs: &ConceptSpace, setting: Setting, seed: u64) -> Result<SplitSpec> {
    let objects: Vec<String> = cs.names(ConceptKind::Object, None).into_iter().map(str::to_string).collect();
    let relations: Vec<String> = cs.names(ConceptKind::Relation, None).into_iter().map(str::to_string).collect();
    if objects.len() < MIN_OBJECTS || relations.len() < MIN_RELATIONS {
        return Err(Error::contract(format!(
            "vocabulary too small for a split: {} objects (need {MIN_OBJECTS}), {} relations (need {MIN_RELATIONS})",
            objects.len(),
            relations.len()
        )));
    }
    let novel_objects = if setting.withholds_objects() {
        let k = novel_object_count(objects.len());
        pick(objects, k, seed, 0)
    } else {
        BTreeSet::new()
    };
    let novel_relations = if setting.withholds_relations() {
        let k = novel_relation_count(relations.len());
        pick(relations, k, seed, 1)
    } else {
        BTreeSet::new()
    };
    Ok(SplitSpec { setting, novel_objects, novel_relations, seed })
}

impl SplitSpec {
    pub fn closed() -> Self {
        SplitSpec {
            setting: Setting::Closed,
            novel_objects: BTreeSet::new(),
            novel_relations: BTreeSet::new(),
            seed: 0,
        }
    }

    /// Parses a split file, normalizing names. Accepts externally published
    /// split lists as long as they fit the setting.
    pub fn from_json(s: &str) -> Result<Self> {
        let mut spec: SplitSpec = serde_json::from_str(s).map_err(|e| Error::schema(format!("split file: {e}")))?;
        spec.novel_objects = spec.novel_objects.iter().map(|n| normalize_name(n)).collect();
        spec.novel_relations = spec.novel_relations.iter().map(|n| normalize_name(n)).collect();
        spec.check_shape()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("split spec serializes")
    }

    fn check_shape(&self) -> Result<()> {
        if !self.setting.withholds_objects() && !self.novel_objects.is_empty() {
            return Err(Error::schema(format!("setting {:?} cannot list novel objects", self.setting)));
        }
        if !self.setting.withholds_relations() && !self.novel_relations.is_empty() {
            return Err(Error::schema(format!("setting {:?} cannot list novel relations", self.setting)));
        }
        Ok(())
    }

    /// Checks that every novel name exists in the concept space.
    pub fn check_against(&self, cs: &ConceptSpace) -> Result<()> {
        self.check_shape()?;
        if let Some(n) = self.novel_objects.iter().find(|n| cs.object(n).is_none()) {
            return Err(Error::contract(format!("novel object '{n}' not in concept space")));
        }
        if let Some(n) = self.novel_relations.iter().find(|n| cs.relation(n).is_none()) {
            return Err(Error::contract(format!("novel relation '{n}' not in concept space")));
        }
        Ok(())
    }

    pub fn is_novel_object(&self, name: &str) -> bool {
        self.novel_objects.contains(name)
    }

    pub fn is_novel_relation(&self, name: &str) -> bool {
        self.novel_relations.contains(name)
    }

    /// Concept space with the split flags of this spec applied.
    pub fn apply_to(&self, cs: &ConceptSpace) -> Result<ConceptSpace> {
        self.check_against(cs)?;
        cs.with_novel(
            &self.novel_objects.iter().cloned().collect(),
            &self.novel_relations.iter().cloned().collect(),
        )
    }
}

/// Removes withheld annotations but keeps the graph even when no edge is
/// left. This is the detection-supervision view of an image.
pub fn filter_detection_graph(g: &SceneGraph, spec: &SplitSpec) -> SceneGraph {
    if spec.setting == Setting::Closed {
        return g.clone();
    }
    let mut remap = vec![None; g.nodes.len()];
    let mut out = SceneGraph::new(g.image_id.clone(), g.width, g.height);
    for (i, n) in g.nodes.iter().enumerate() {
        if !(spec.setting.withholds_objects() && spec.is_novel_object(&n.category)) {
            remap[i] = Some(out.push_node(n.clone()));
        }
    }
    for e in &g.edges {
        if spec.setting.withholds_relations() && spec.is_novel_relation(&e.predicate) {
            continue;
        }
        let ends = (remap.get(e.subject).copied().flatten(), remap.get(e.object).copied().flatten());
        if let (Some(s), Some(o)) = ends {
            let mut kept = e.clone();
            kept.subject = s;
            kept.object = o;
            out.edges.push(kept);
        }
    }
    out
}

/// Training graph for relation supervision, or `None` when filtering
/// leaves no edge. The closed setting returns every graph unchanged.
pub fn filter_training_graph(g: &SceneGraph, spec: &SplitSpec) -> Option<SceneGraph> {
    if spec.setting == Setting::Closed {
        return Some(g.clone());
    }
    let f = filter_detection_graph(g, spec);
    (!f.edges.is_empty()).then_some(f)
}

/// Both training lists produced from one dataset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitOutput {
    /// Images that still carry relation annotations.
    pub relation: Dataset,
    /// Every image with at least one remaining node, edges included.
    pub detection: Dataset,
}

pub fn apply_split(dataset: &Dataset, spec: &SplitSpec) -> SplitOutput {
    let filtered: Vec<(Option<SceneGraph>, SceneGraph)> = dataset
        .images
        .par_iter()
        .map(|g| (filter_training_graph(g, spec), filter_detection_graph(g, spec)))
        .collect();
    let mut out = SplitOutput::default();
    for (rel, det) in filtered {
        if let Some(r) = rel {
            out.relation.images.push(r);
        }
        if !det.nodes.is_empty() {
            out.detection.images.push(det);
        }
    }
    out
}

/// Size of the relation-training list after filtering.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub images: usize,
    pub nodes: usize,
    pub edges: usize,
    /// Images kept only for detection supervision.
    pub detection_only_images: usize,
}

pub fn split_census(dataset: &Dataset, spec: &SplitSpec) -> Census {
    dataset
        .images
        .par_iter()
        .map(|g| match filter_training_graph(g, spec) {
            Some(f) => Census { images: 1, nodes: f.nodes.len(), edges: f.edges.len(), detection_only_images: 0 },
            None => Census {
                detection_only_images: usize::from(!filter_detection_graph(g, spec).nodes.is_empty()),
                ..Census::default()
            },
        })
        .reduce(Census::default, |a, b| Census {
            images: a.images + b.images,
            nodes: a.nodes + b.nodes,
            edges: a.edges + b.edges,
            detection_only_images: a.detection_only_images + b.detection_only_images,
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{BBox, Edge, Node};
    use proptest::prelude::*;

    fn names(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i:03}")).collect()
    }

    fn space(n_obj: usize, n_rel: usize) -> ConceptSpace {
        let o = names("o", n_obj);
        let r = names("r", n_rel);
        let o: Vec<&str> = o.iter().map(String::as_str).collect();
        let r: Vec<&str> = r.iter().map(String::as_str).collect();
        ConceptSpace::synthetic(&o, &r, 4, 0).unwrap()
    }

    #[test]
    fn novel_counts() {
        assert_eq!(novel_object_count(150), 45);
        assert_eq!(novel_object_count(10), 3);
        assert_eq!(novel_object_count(11), 4);
        assert_eq!(novel_relation_count(50), 15);
        assert_eq!(novel_relation_count(5), 2);
        assert_eq!(novel_relation_count(4), 1);
    }

    #[test]
    fn make_split_sizes() {
        let cs = space(150, 50);
        let closed = make_split(&cs, Setting::Closed, 3).unwrap();
        assert!(closed.novel_objects.is_empty() && closed.novel_relations.is_empty());
        let ovr = make_split(&cs, Setting::Ovr, 3).unwrap();
        assert_eq!((ovr.novel_objects.len(), ovr.novel_relations.len()), (0, 15));
        let ovd = make_split(&cs, Setting::Ovd, 3).unwrap();
        assert_eq!((ovd.novel_objects.len(), ovd.novel_relations.len()), (45, 0));
        let both = make_split(&cs, Setting::OvdR, 3).unwrap();
        assert_eq!(both.novel_objects, ovd.novel_objects);
        assert_eq!(both.novel_relations, ovr.novel_relations);
        assert_eq!(make_split(&cs, Setting::Ovr, 3).unwrap(), ovr);
        assert_ne!(make_split(&cs, Setting::Ovr, 4).unwrap().novel_relations, ovr.novel_relations);
    }

    #[test]
    fn small_vocabularies_are_rejected() {
        assert!(make_split(&space(9, 50), Setting::Ovr, 0).is_err());
        assert!(make_split(&space(10, 1), Setting::Ovd, 0).is_err());
        assert!(make_split(&space(10, 2), Setting::Ovd, 0).is_ok());
    }

    fn skateboard() -> SceneGraph {
        let mut g = SceneGraph::new("fig", 100, 100);
        let b = |x: f64| BBox::new(x, 10.0, x + 20.0, 40.0).unwrap();
        g.push_node(Node::new(b(0.0), "man"));
        g.push_node(Node::new(b(30.0), "skateboard"));
        g.push_node(Node::new(b(60.0), "wheel"));
        g.push_edge(Edge::new(0, 1, "riding"));
        g.push_edge(Edge::new(2, 1, "on"));
        g
    }

    fn spec(setting: Setting, objects: &[&str], relations: &[&str]) -> SplitSpec {
        SplitSpec {
            setting,
            novel_objects: objects.iter().map(|s| s.to_string()).collect(),
            novel_relations: relations.iter().map(|s| s.to_string()).collect(),
            seed: 0,
        }
    }

    #[test]
    fn filtering_examples() {
        let g = skateboard();
        assert_eq!(filter_training_graph(&g, &SplitSpec::closed()), Some(g.clone()));

        let ovr = filter_training_graph(&g, &spec(Setting::Ovr, &[], &["riding"])).unwrap();
        assert_eq!(ovr.nodes, g.nodes);
        assert_eq!(ovr.edges, vec![Edge::new(2, 1, "on")]);

        let ovd = spec(Setting::Ovd, &["skateboard"], &[]);
        assert_eq!(filter_training_graph(&g, &ovd), None);
        let det = filter_detection_graph(&g, &ovd);
        let cats: Vec<_> = det.nodes.iter().map(|n| n.category.as_str()).collect();
        assert_eq!(cats, ["man", "wheel"]);
        assert!(det.edges.is_empty());
    }

    #[test]
    fn edges_are_reindexed() {
        let g = skateboard();
        let f = filter_training_graph(&g, &spec(Setting::Ovd, &["man"], &[])).unwrap();
        assert_eq!(f.nodes.len(), 2);
        assert_eq!(f.edges, vec![Edge::new(1, 0, "on")]);
    }

    #[test]
    fn closed_keeps_edgeless_graphs() {
        let mut g = skateboard();
        g.edges.clear();
        assert_eq!(filter_training_graph(&g, &SplitSpec::closed()), Some(g.clone()));
        assert_eq!(filter_training_graph(&g, &spec(Setting::Ovr, &[], &["on"])), None);
    }

    #[test]
    fn empty_census() {
        assert_eq!(split_census(&Dataset::default(), &SplitSpec::closed()), Census::default());
    }

    #[test]
    fn split_file_round_trip() {
        let s = spec(Setting::OvdR, &["man"], &["riding"]);
        assert_eq!(SplitSpec::from_json(&s.to_json()).unwrap(), s);
        let raw = r#"{"setting":"ovr","novel_objects":[],"novel_relations":["Standing  On"]}"#;
        let parsed = SplitSpec::from_json(raw).unwrap();
        assert!(parsed.is_novel_relation("standing on"));
        let bad = r#"{"setting":"ovr","novel_objects":["man"],"novel_relations":[]}"#;
        assert!(SplitSpec::from_json(bad).is_err());
    }

    fn arb_graph() -> impl Strategy<Value = SceneGraph> {
        let cats = ["a", "b", "c", "d"];
        let preds = ["p", "q", "r"];
        (1usize..6)
            .prop_flat_map(move |n| {
                (
                    proptest::collection::vec(0usize..4, n),
                    proptest::collection::vec((0..n, 0..n, 0usize..3), 0..8),
                )
            })
            .prop_map(move |(nodes, edges)| {
                let mut g = SceneGraph::new("p", 100, 100);
                for (i, c) in nodes.iter().enumerate() {
                    let x = i as f64 * 10.0;
                    g.push_node(Node::new(BBox::new(x, 0.0, x + 5.0, 5.0).unwrap(), cats[*c]));
                }
                for (s, o, p) in edges {
                    if s != o {
                        g.push_edge(Edge::new(s, o, preds[p]));
                    }
                }
                g
            })
    }

    proptest! {
        #[test]
        fn filtering_is_idempotent_and_removes_novel(g in arb_graph(), setting in 0usize..4) {
            let setting = [Setting::Closed, Setting::Ovd, Setting::Ovr, Setting::OvdR][setting];
            let s = spec(
                setting,
                if setting.withholds_objects() { &["b"] } else { &[] },
                if setting.withholds_relations() { &["q"] } else { &[] },
            );
            let once = filter_training_graph(&g, &s);
            if let Some(f) = &once {
                prop_assert_eq!(filter_training_graph(f, &s), Some(f.clone()));
                prop_assert!(f.nodes.iter().all(|n| !s.is_novel_object(&n.category)));
                prop_assert!(f.edges.iter().all(|e| !s.is_novel_relation(&e.predicate)));
            }
            if setting == Setting::Closed {
                prop_assert_eq!(once, Some(g.clone()));
            }
            let det = filter_detection_graph(&g, &s);
            prop_assert_eq!(filter_detection_graph(&det, &s), det);
        }
    }
}
