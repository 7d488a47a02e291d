//! Graph serialization.
//!
//! A scene graph becomes a token sequence `[g, n_1..n_M, e_1..e_N]` plus a
//! parallel structural-encoding sequence `[0, E_1..E_M, E^e_1..E^e_N]`.
//! Nodes draw their encodings from a learnable table of `max_nodes` rows;
//! the encoding of an edge from node `i` to node `j` is `E_i - E_j`, which
//! keeps the relation direction. Graphs larger than the table are clipped
//! by uniform node sampling, dropping edges that lose an endpoint.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GraphError, SceneGraph};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{embedding_normal, fan_in_uniform, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// `enc_subject - enc_object`.
pub fn edge_encoding(enc_subject: &[f64], enc_object: &[f64]) -> Vec<f64> {
    enc_subject.iter().zip(enc_object).map(|(a, b)| a - b).collect()
}

/// Which parts of the graph a query keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryMode {
    /// Nodes and edges with structural encodings.
    Full,
    /// Node tokens only; no edges, no structural encodings.
    NodeOnly,
    /// Edge tokens only, with zero encodings.
    EdgeOnly,
}

/// The discrete part of serialization: which nodes and edges survive and
/// which encoding slot each surviving node receives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequencePlan {
    /// Original indices of the surviving nodes, in sequence order.
    pub nodes: Vec<usize>,
    /// Encoding-table row assigned to each surviving node.
    pub slots: Vec<usize>,
    /// Original indices of the surviving edges, in sequence order.
    pub edges: Vec<usize>,
    /// `(subject, object)` of each surviving edge as positions in `nodes`.
    pub endpoints: Vec<(usize, usize)>,
    /// Original indices of nodes removed by clipping.
    pub clipped: Vec<usize>,
}

impl SequencePlan {
    pub fn encoding_slot_of_node(&self, original: usize) -> Option<usize> {
        self.nodes.iter().position(|&n| n == original).map(|p| self.slots[p])
    }
}

/// Chooses surviving nodes/edges and assigns encoding slots.
///
/// With more than `max_nodes` nodes, `max_nodes` are sampled uniformly
/// without replacement. With `shuffle`, slots `0..M'` are assigned by a
/// uniform random permutation; otherwise in node order.
pub fn plan_sequence<R: Rng + ?Sized>(graph: &SceneGraph, max_nodes: usize, shuffle: bool, rng: &mut R) -> SequencePlan {
    let m = graph.nodes().len();
    let (nodes, clipped) = if m > max_nodes {
        let mut keep = index::sample(rng, m, max_nodes).into_vec();
        keep.sort_unstable();
        let clipped = (0..m).filter(|i| keep.binary_search(i).is_err()).collect();
        (keep, clipped)
    } else {
        ((0..m).collect(), Vec::new())
    };
    let mut slots: Vec<usize> = (0..nodes.len()).collect();
    if shuffle {
        slots.shuffle(rng);
    }
    let mut position = vec![None; m];
    for (p, &n) in nodes.iter().enumerate() {
        position[n] = Some(p);
    }
    let mut edges = Vec::new();
    let mut endpoints = Vec::new();
    for (k, e) in graph.edges().iter().enumerate() {
        if let (Some(s), Some(o)) = (position[e.subject], position[e.object]) {
            edges.push(k);
            endpoints.push((s, o));
        }
    }
    SequencePlan {
        nodes,
        slots,
        edges,
        endpoints,
        clipped,
    }
}

/// Two-layer box embedder `R^4 -> R^d`: affine, layer norm, ReLU, affine.
/// The last affine map starts at zero, so a fresh model treats
/// location-bound graphs exactly like location-free ones.
#[derive(Debug, Clone)]
pub struct BoxEmbedder {
    pub w1: ParamId,
    pub b1: ParamId,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    eps: f64,
}

impl BoxEmbedder {
    pub fn new<R: Rng + ?Sized>(prefix: &str, d: usize, eps: f64, store: &mut ParamStore, rng: &mut R) -> Self {
        Self {
            w1: store.add(format!("{prefix}.in.weight"), fan_in_uniform(&[4, d], 4, rng)),
            b1: store.add(format!("{prefix}.in.bias"), Tensor::zeros(&[d])),
            norm_gain: store.add(format!("{prefix}.norm.gain"), Tensor::full(&[d], 1.0)),
            norm_bias: store.add(format!("{prefix}.norm.bias"), Tensor::zeros(&[d])),
            w2: store.add(format!("{prefix}.out.weight"), Tensor::zeros(&[d, d])),
            b2: store.add(format!("{prefix}.out.bias"), Tensor::zeros(&[d])),
            eps,
        }
    }

    /// Embeds `boxes: [n, 4]` row by row into `[n, d]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, boxes: Var) -> Result<Var> {
        let h = tape.matmul(boxes, p[self.w1])?;
        let h = tape.add_row(h, p[self.b1])?;
        let h = tape.layer_norm(h, p[self.norm_gain], p[self.norm_bias], self.eps)?;
        let h = tape.relu(h);
        let out = tape.matmul(h, p[self.w2])?;
        Ok(tape.add_row(out, p[self.b2])?)
    }
}

/// Learnable inputs of the graph tower.
#[derive(Debug, Clone)]
pub struct GraphParams {
    pub entity_embeddings: ParamId,
    pub predicate_embeddings: ParamId,
    pub node_encodings: ParamId,
    pub graph_token: ParamId,
    pub boxes: BoxEmbedder,
    pub model_dim: usize,
    pub max_nodes: usize,
}

impl GraphParams {
    pub fn new<R: Rng + ?Sized>(
        entities: usize,
        predicates: usize,
        model_dim: usize,
        max_nodes: usize,
        eps: f64,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if max_nodes == 0 {
            return Err(Error::Config("max_nodes must be at least 1".into()));
        }
        let d = model_dim;
        Ok(Self {
            entity_embeddings: store.add("graph.entity_embeddings", embedding_normal(&[entities, d], d, rng)),
            predicate_embeddings: store.add("graph.predicate_embeddings", embedding_normal(&[predicates, d], d, rng)),
            node_encodings: store.add("graph.node_encodings", embedding_normal(&[max_nodes, d], d, rng)),
            graph_token: store.add("graph.token", embedding_normal(&[d], d, rng)),
            boxes: BoxEmbedder::new("graph.box", d, eps, store, rng),
            model_dim: d,
            max_nodes,
        })
    }

    /// Builds the token and encoding sequences for `graph` on `tape`.
    pub fn serialize<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &Bound,
        graph: &SceneGraph,
        mode: QueryMode,
        shuffle: bool,
        rng: &mut R,
    ) -> Result<GraphSequence> {
        let plan = plan_sequence(graph, self.max_nodes, shuffle, rng);
        self.build(tape, p, graph, plan, mode)
    }

    /// Materializes a precomputed plan.
    pub fn build(&self, tape: &mut Tape, p: &Bound, graph: &SceneGraph, plan: SequencePlan, mode: QueryMode) -> Result<GraphSequence> {
        let d = self.model_dim;
        let with_nodes = mode != QueryMode::EdgeOnly;
        let with_edges = mode != QueryMode::NodeOnly;
        if mode == QueryMode::EdgeOnly && plan.edges.is_empty() {
            return Err(GraphError::NoEdges.into());
        }
        let token = tape.reshape(p[self.graph_token], &[1, d])?;
        let mut tokens = vec![token];
        let mut encodings = vec![tape.constant(Tensor::zeros(&[1, d]))];

        if with_nodes {
            let entities: Vec<usize> = plan.nodes.iter().map(|&n| graph.nodes()[n].entity).collect();
            let mut node_tokens = tape.gather_rows(p[self.entity_embeddings], &entities)?;
            if graph.is_location_bound() {
                let boxes: Vec<f64> = plan
                    .nodes
                    .iter()
                    .flat_map(|&n| graph.nodes()[n].bbox.expect("location-bound").to_array())
                    .collect();
                let boxes = tape.constant(Tensor::new(vec![plan.nodes.len(), 4], boxes)?);
                let emb = self.boxes.forward(tape, p, boxes)?;
                node_tokens = tape.add(node_tokens, emb)?;
            }
            tokens.push(node_tokens);
            encodings.push(if mode == QueryMode::Full {
                tape.gather_rows(p[self.node_encodings], &plan.slots)?
            } else {
                tape.constant(Tensor::zeros(&[plan.nodes.len(), d]))
            });
        }
        if with_edges && !plan.edges.is_empty() {
            let preds: Vec<usize> = plan.edges.iter().map(|&k| graph.edges()[k].predicate).collect();
            tokens.push(tape.gather_rows(p[self.predicate_embeddings], &preds)?);
            encodings.push(if mode == QueryMode::Full {
                let subj: Vec<usize> = plan.endpoints.iter().map(|&(s, _)| plan.slots[s]).collect();
                let obj: Vec<usize> = plan.endpoints.iter().map(|&(_, o)| plan.slots[o]).collect();
                let es = tape.gather_rows(p[self.node_encodings], &subj)?;
                let eo = tape.gather_rows(p[self.node_encodings], &obj)?;
                tape.sub(es, eo)?
            } else {
                tape.constant(Tensor::zeros(&[plan.edges.len(), d]))
            });
        }
        let tokens = tape.concat_rows(&tokens)?;
        let encodings = tape.concat_rows(&encodings)?;
        Ok(GraphSequence {
            tokens,
            encodings,
            plan,
            mode,
        })
    }
}

/// Serialized graph on a tape: `tokens` and `encodings` are both `[T, d]`
/// with the graph token at row 0.
#[derive(Debug, Clone)]
pub struct GraphSequence {
    pub tokens: Var,
    pub encodings: Var,
    pub plan: SequencePlan,
    pub mode: QueryMode,
}

impl GraphSequence {
    pub fn len(&self, tape: &Tape) -> usize {
        tape.shape(self.tokens)[0]
    }
}
