//! Scene graphs: vocabulary, validated graph type, and JSON ingestion.
//!
//! A scene graph is a set of entity nodes (a category, optionally a bounding
//! box) joined by directed predicate edges. A graph is *location-bound* when
//! every node carries a box and *location-free* when none does; mixing the
//! two is rejected.

mod serialize;

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

pub use serialize::{
    edge_encoding, plan_sequence, BoxEmbedder, GraphParams, GraphSequence, QueryMode, SequencePlan,
};

/// Slack allowed when checking that a box stays inside the unit square.
pub const BBOX_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("unknown {kind} category {name:?}")]
    UnknownCategory { kind: &'static str, name: String },
    #[error("edge {edge} references node {node}, but the graph has {nodes} nodes")]
    DanglingEdge { edge: usize, node: usize, nodes: usize },
    #[error("edge {edge} relates node {node} to itself")]
    SelfRelation { edge: usize, node: usize },
    #[error("some nodes carry a bbox and others do not")]
    MixedBoxes,
    #[error("scene graph has no nodes")]
    EmptyGraph,
    #[error("node {node}: invalid bbox {bbox:?}: {reason}")]
    InvalidBox { node: usize, bbox: [f64; 4], reason: &'static str },
    #[error("vocabulary lists {kind} {name:?} more than once")]
    DuplicateCategory { kind: &'static str, name: String },
    #[error("edge-only query needs at least one edge")]
    NoEdges,
    #[error("malformed scene graph document: {0}")]
    Format(String),
}

/// Entity and predicate category names. Indices are positions in the lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub entities: Vec<String>,
    pub predicates: Vec<String>,
    #[serde(skip)]
    entity_index: HashMap<String, usize>,
    #[serde(skip)]
    predicate_index: HashMap<String, usize>,
}

fn index_names(kind: &'static str, names: &[String]) -> std::result::Result<HashMap<String, usize>, GraphError> {
    let mut map = HashMap::with_capacity(names.len());
    for (i, n) in names.iter().enumerate() {
        if map.insert(n.clone(), i).is_some() {
            return Err(GraphError::DuplicateCategory { kind, name: n.clone() });
        }
    }
    Ok(map)
}

impl Vocab {
    pub fn new(entities: Vec<String>, predicates: Vec<String>) -> std::result::Result<Self, GraphError> {
        let entity_index = index_names("entity", &entities)?;
        let predicate_index = index_names("predicate", &predicates)?;
        Ok(Self {
            entities,
            predicates,
            entity_index,
            predicate_index,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            entities: Vec<String>,
            predicates: Vec<String>,
        }
        let raw: Raw = serde_json::from_str(text)?;
        Ok(Self::new(raw.entities, raw.predicates)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocab serializes")
    }

    pub fn entity(&self, name: &str) -> std::result::Result<usize, GraphError> {
        self.entity_index.get(name).copied().ok_or_else(|| GraphError::UnknownCategory {
            kind: "entity",
            name: name.to_string(),
        })
    }

    pub fn predicate(&self, name: &str) -> std::result::Result<usize, GraphError> {
        self.predicate_index.get(name).copied().ok_or_else(|| GraphError::UnknownCategory {
            kind: "predicate",
            name: name.to_string(),
        })
    }

    /// Rebuilds the lookup tables after deserialization.
    pub fn reindexed(self) -> std::result::Result<Self, GraphError> {
        Self::new(self.entities, self.predicates)
    }
}

/// Axis-aligned box `[x, y, w, h]` in image-relative units; `(x, y)` is the
/// top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn intersection_area(&self, o: &BBox) -> f64 {
        let w = (self.right().min(o.right()) - self.x.max(o.x)).max(0.0);
        let h = (self.bottom().min(o.bottom()) - self.y.max(o.y)).max(0.0);
        w * h
    }

    /// True when `self` lies within `o` (boundaries may touch).
    pub fn within(&self, o: &BBox) -> bool {
        o.x <= self.x && self.right() <= o.right() && o.y <= self.y && self.bottom() <= o.bottom()
    }

    pub fn validate(&self) -> std::result::Result<(), &'static str> {
        let vals = self.to_array();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err("non-finite coordinate");
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err("width and height must be positive");
        }
        if self.x < 0.0 || self.y < 0.0 {
            return Err("corner lies outside the image");
        }
        if self.right() > 1.0 + BBOX_TOLERANCE || self.bottom() > 1.0 + BBOX_TOLERANCE {
            return Err("box extends past the image");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub entity: usize,
    pub bbox: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub predicate: usize,
    pub subject: usize,
    pub object: usize,
}

/// A validated scene graph; construct with [`SceneGraph::new`] or
/// [`parse_scene_graph`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
}

impl SceneGraph {
    pub fn new(nodes: Vec<Node>, edges: Vec<Edge>) -> std::result::Result<Self, GraphError> {
        if nodes.is_empty() {
            return Err(GraphError::EmptyGraph);
        }
        let boxed = nodes.iter().filter(|n| n.bbox.is_some()).count();
        if boxed != 0 && boxed != nodes.len() {
            return Err(GraphError::MixedBoxes);
        }
        for (i, n) in nodes.iter().enumerate() {
            if let Some(b) = n.bbox {
                b.validate().map_err(|reason| GraphError::InvalidBox {
                    node: i,
                    bbox: b.to_array(),
                    reason,
                })?;
            }
        }
        for (k, e) in edges.iter().enumerate() {
            for node in [e.subject, e.object] {
                if node >= nodes.len() {
                    return Err(GraphError::DanglingEdge {
                        edge: k,
                        node,
                        nodes: nodes.len(),
                    });
                }
            }
            if e.subject == e.object {
                return Err(GraphError::SelfRelation { edge: k, node: e.subject });
            }
        }
        Ok(Self { nodes, edges })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn is_location_bound(&self) -> bool {
        self.nodes[0].bbox.is_some()
    }

    /// The same graph with every bbox removed.
    pub fn without_boxes(&self) -> SceneGraph {
        SceneGraph {
            nodes: self.nodes.iter().map(|n| Node { entity: n.entity, bbox: None }).collect(),
            edges: self.edges.clone(),
        }
    }

    /// Checks every category index against `vocab`.
    pub fn check_vocab(&self, vocab: &Vocab) -> std::result::Result<(), GraphError> {
        if let Some(n) = self.nodes.iter().find(|n| n.entity >= vocab.entities.len()) {
            return Err(GraphError::UnknownCategory {
                kind: "entity",
                name: format!("#{}", n.entity),
            });
        }
        if let Some(e) = self.edges.iter().find(|e| e.predicate >= vocab.predicates.len()) {
            return Err(GraphError::UnknownCategory {
                kind: "predicate",
                name: format!("#{}", e.predicate),
            });
        }
        Ok(())
    }

    pub fn to_record(&self, image: impl Into<String>, vocab: &Vocab) -> SampleRecord {
        SampleRecord {
            image: image.into(),
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeRecord {
                    label: vocab.entities[n.entity].clone(),
                    bbox: n.bbox.map(BBox::to_array),
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeRecord {
                    predicate: vocab.predicates[e.predicate].clone(),
                    subject: e.subject,
                    object: e.object,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRecord {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeRecord {
    pub predicate: String,
    pub subject: usize,
    pub object: usize,
}

/// One line of a scene-graph dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    #[serde(default)]
    pub image: String,
    pub nodes: Vec<NodeRecord>,
    #[serde(default)]
    pub edges: Vec<EdgeRecord>,
}

impl SampleRecord {
    pub fn to_graph(&self, vocab: &Vocab) -> std::result::Result<SceneGraph, GraphError> {
        let nodes = self
            .nodes
            .iter()
            .map(|n| {
                Ok(Node {
                    entity: vocab.entity(&n.label)?,
                    bbox: n.bbox.map(|[x, y, w, h]| BBox::new(x, y, w, h)),
                })
            })
            .collect::<std::result::Result<Vec<_>, GraphError>>()?;
        let edges = self
            .edges
            .iter()
            .map(|e| {
                Ok(Edge {
                    predicate: vocab.predicate(&e.predicate)?,
                    subject: e.subject,
                    object: e.object,
                })
            })
            .collect::<std::result::Result<Vec<_>, GraphError>>()?;
        SceneGraph::new(nodes, edges)
    }
}

/// Parses and validates one scene-graph JSON document.
pub fn parse_scene_graph(document: &serde_json::Value, vocab: &Vocab) -> std::result::Result<SceneGraph, GraphError> {
    let record: SampleRecord =
        serde_json::from_value(document.clone()).map_err(|e| GraphError::Format(e.to_string()))?;
    record.to_graph(vocab)
}

/// Reads a JSON Lines dataset; blank lines are skipped.
pub fn read_records(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn vocab() -> Vocab {
        Vocab::new(
            vec!["man".into(), "street".into(), "dog".into()],
            vec!["on".into(), "near".into()],
        )
        .unwrap()
    }

    #[test]
    fn parses_man_on_street() {
        let doc = json!({"nodes":[{"label":"man"},{"label":"street"}],"edges":[{"predicate":"on","subject":0,"object":1}]});
        let g = parse_scene_graph(&doc, &vocab()).unwrap();
        assert_eq!(g.nodes().len(), 2);
        assert_eq!(g.edges().len(), 1);
        assert!(!g.is_location_bound());
        assert_eq!(g.edges()[0], Edge { predicate: 0, subject: 0, object: 1 });
    }

    #[test]
    fn empty_graph_rejected() {
        let doc = json!({"nodes":[],"edges":[]});
        assert_eq!(parse_scene_graph(&doc, &vocab()), Err(GraphError::EmptyGraph));
    }

    #[test]
    fn dangling_edge_rejected() {
        let doc = json!({"nodes":[{"label":"man"},{"label":"street"}],"edges":[{"predicate":"on","subject":0,"object":5}]});
        assert!(matches!(
            parse_scene_graph(&doc, &vocab()),
            Err(GraphError::DanglingEdge { node: 5, nodes: 2, .. })
        ));
    }

    #[test]
    fn unknown_category_names_offender() {
        let doc = json!({"nodes":[{"label":"cat"}],"edges":[]});
        let err = parse_scene_graph(&doc, &vocab()).unwrap_err();
        assert!(err.to_string().contains("\"cat\""), "{err}");
        let doc = json!({"nodes":[{"label":"man"},{"label":"dog"}],"edges":[{"predicate":"under","subject":0,"object":1}]});
        assert!(matches!(
            parse_scene_graph(&doc, &vocab()),
            Err(GraphError::UnknownCategory { kind: "predicate", .. })
        ));
    }

    #[test]
    fn mixed_boxes_rejected() {
        let doc = json!({"nodes":[{"label":"man","bbox":[0.1,0.1,0.2,0.2]},{"label":"street"}],"edges":[]});
        assert_eq!(parse_scene_graph(&doc, &vocab()), Err(GraphError::MixedBoxes));
    }

    #[test]
    fn self_relation_rejected() {
        let doc = json!({"nodes":[{"label":"man"}],"edges":[{"predicate":"on","subject":0,"object":0}]});
        assert!(matches!(parse_scene_graph(&doc, &vocab()), Err(GraphError::SelfRelation { .. })));
    }

    #[test]
    fn bbox_bounds_enforced() {
        for bad in [[0.5, 0.5, 0.6, 0.1], [-0.1, 0.0, 0.2, 0.2], [0.1, 0.1, 0.0, 0.2]] {
            let doc = json!({"nodes":[{"label":"man","bbox":bad}]});
            assert!(matches!(parse_scene_graph(&doc, &vocab()), Err(GraphError::InvalidBox { .. })), "{bad:?}");
        }
        let doc = json!({"nodes":[{"label":"man","bbox":[0.0,0.0,1.0,1.0]}]});
        assert!(parse_scene_graph(&doc, &vocab()).unwrap().is_location_bound());
    }

    #[test]
    fn unknown_fields_are_format_errors() {
        let doc = json!({"nodes":[{"label":"man","colour":"red"}]});
        assert!(matches!(parse_scene_graph(&doc, &vocab()), Err(GraphError::Format(_))));
    }

    #[test]
    fn duplicate_vocab_names_rejected() {
        assert!(Vocab::new(vec!["a".into(), "a".into()], vec![]).is_err());
    }

    #[test]
    fn record_round_trip() {
        let v = vocab();
        let doc = json!({"image":"x.png","nodes":[{"label":"man","bbox":[0.1,0.2,0.3,0.4]},{"label":"dog","bbox":[0.5,0.5,0.25,0.25]}],"edges":[{"predicate":"near","subject":1,"object":0}]});
        let g = parse_scene_graph(&doc, &v).unwrap();
        let rec = g.to_record("x.png", &v);
        assert_eq!(serde_json::to_value(&rec).unwrap(), doc);
    }
}
