#![allow(dead_code)]

use rand::Rng;

use gicon::graph::{BBox, Edge, Node, SceneGraph, Vocab};
use gicon::model::Gicon;
use gicon::train::TrainConfig;

pub const ENTITIES: usize = 7;
pub const PREDICATES: usize = 4;

pub fn vocab() -> Vocab {
    Vocab::new(
        (0..ENTITIES).map(|i| format!("e{i}")).collect(),
        (0..PREDICATES).map(|i| format!("p{i}")).collect(),
    )
    .unwrap()
}

/// d = 16, two layers per tower, 32-pixel images.
pub fn small_config() -> TrainConfig {
    TrainConfig {
        model_dim: 16,
        ffn_dim: 32,
        graph_heads: 2,
        image_heads: 2,
        image_longest_side: 32,
        stem_channels: [4, 6, 8],
        ..TrainConfig::default()
    }
}

/// A model whose box embedder and every other parameter are randomized, so
/// no branch is trivially zero.
pub fn random_model(seed: u64) -> Gicon {
    let mut model = Gicon::new(small_config().model_config(&vocab()), seed).unwrap();
    let mut rng = gicon::rng::stream(seed, &[0xACCE]);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        for v in model.store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    model
}

pub fn random_box<R: Rng>(rng: &mut R) -> BBox {
    let w = rng.random_range(0.05..0.6);
    let h = rng.random_range(0.05..0.6);
    BBox::new(rng.random_range(0.0..1.0 - w), rng.random_range(0.0..1.0 - h), w, h)
}

/// Random graph with `nodes` nodes and up to `max_edges` edges, boxed when
/// `bound`.
pub fn random_graph<R: Rng>(rng: &mut R, nodes: usize, max_edges: usize, bound: bool) -> SceneGraph {
    let ns = (0..nodes)
        .map(|_| Node {
            entity: rng.random_range(0..ENTITIES),
            bbox: bound.then(|| random_box(rng)),
        })
        .collect();
    let edges = if nodes < 2 {
        vec![]
    } else {
        (0..rng.random_range(1..=max_edges))
            .map(|_| {
                let s = rng.random_range(0..nodes);
                let o = (s + rng.random_range(1..nodes)) % nodes;
                Edge {
                    predicate: rng.random_range(0..PREDICATES),
                    subject: s,
                    object: o,
                }
            })
            .collect()
    };
    SceneGraph::new(ns, edges).unwrap()
}
