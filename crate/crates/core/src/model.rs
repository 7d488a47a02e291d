//! The two-tower model and its checkpoint format.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::encoder::{EncoderConfig, TransformerEncoder};
use crate::error::{Error, Result};
use crate::graph::{GraphParams, QueryMode, SceneGraph, Vocab};
use crate::graph_encoder::GraphTower;
use crate::image_encoder::{ImageTower, Stem};
use crate::imaging::{resize_and_pad, Image, PaddedImage};
use crate::params::ParamStore;
use crate::rng::stream;
use crate::tensor::Tensor;

const INIT_STREAM: u64 = 0x1417;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub entities: usize,
    pub predicates: usize,
    pub model_dim: usize,
    pub max_nodes: usize,
    pub graph: EncoderConfig,
    pub image: EncoderConfig,
    pub image_longest_side: usize,
    pub stem_stride: usize,
    pub stem_channels: [usize; 3],
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.graph.validate()?;
        self.image.validate()?;
        if self.graph.model_dim != self.model_dim || self.image.model_dim != self.model_dim {
            return Err(Error::Config("both towers must use model_dim".into()));
        }
        if self.entities == 0 || self.predicates == 0 {
            return Err(Error::Config("vocabulary must list at least one entity and one predicate".into()));
        }
        if !self.model_dim.is_multiple_of(4) {
            return Err(Error::Config(format!("model_dim {} must be a multiple of 4", self.model_dim)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Gicon {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub graph: GraphTower,
    pub image: ImageTower,
}

impl Gicon {
    /// Freshly initialized model; parameters depend only on `config` and `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, &[INIT_STREAM]);
        let mut store = ParamStore::new();
        let c = &config;
        let inputs = GraphParams::new(c.entities, c.predicates, c.model_dim, c.max_nodes, c.graph.eps, &mut store, &mut rng)?;
        let graph_encoder = TransformerEncoder::new("graph.encoder", c.graph, &mut store, &mut rng)?;
        let stem = Stem::new(c.stem_stride, c.stem_channels, c.model_dim, &mut store, &mut rng)?;
        let image_encoder = TransformerEncoder::new("image.encoder", c.image, &mut store, &mut rng)?;
        let image = ImageTower::new(c.image_longest_side, stem, image_encoder, &mut store, &mut rng)?;
        Ok(Self {
            config,
            store,
            graph: GraphTower {
                inputs,
                encoder: graph_encoder,
            },
            image,
        })
    }

    pub fn prepare_image(&self, img: &Image) -> Result<PaddedImage> {
        resize_and_pad(img, self.config.image_longest_side, self.config.stem_stride)
    }

    /// Embeds one graph, shape `[d]`. Inference never shuffles encodings;
    /// graphs above `max_nodes` are clipped with a fixed per-graph stream.
    pub fn embed_graph(&self, graph: &SceneGraph, mode: QueryMode) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let seq = self.graph.inputs.serialize(&mut tape, &p, graph, mode, false, &mut stream(0, &[INIT_STREAM, 1]))?;
        let g = self.graph.encode(&mut tape, &p, &seq)?;
        Ok(tape.value(g).data().to_vec())
    }

    pub fn embed_image(&self, img: &PaddedImage) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let i = self.image.encode(&mut tape, &p, img)?;
        Ok(tape.value(i).data().to_vec())
    }

    /// `[n, d]` graph embeddings; rows are computed independently, so the
    /// result does not depend on `parallel`.
    pub fn embed_graphs(&self, graphs: &[SceneGraph], mode: QueryMode, parallel: bool) -> Result<Tensor> {
        let rows = if parallel {
            graphs.par_iter().map(|g| self.embed_graph(g, mode)).collect::<Result<Vec<_>>>()?
        } else {
            graphs.iter().map(|g| self.embed_graph(g, mode)).collect::<Result<Vec<_>>>()?
        };
        stack(rows, self.config.model_dim)
    }

    pub fn embed_images(&self, imgs: &[PaddedImage], parallel: bool) -> Result<Tensor> {
        let rows = if parallel {
            imgs.par_iter().map(|i| self.embed_image(i)).collect::<Result<Vec<_>>>()?
        } else {
            imgs.iter().map(|i| self.embed_image(i)).collect::<Result<Vec<_>>>()?
        };
        stack(rows, self.config.model_dim)
    }
}

fn stack(rows: Vec<Vec<f64>>, d: usize) -> Result<Tensor> {
    let n = rows.len();
    Ok(Tensor::new(vec![n, d], rows.concat())?)
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Serialized model: configuration, vocabulary, and every parameter by name.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub step: u64,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn capture(model: &Gicon, vocab: &Vocab, step: u64) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            vocab: vocab.clone(),
            step,
            params: model
                .store
                .iter()
                .map(|(name, t)| NamedTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "{}: checkpoint format {} is not supported (expected {CHECKPOINT_VERSION})",
                path.display(),
                ck.format_version
            )));
        }
        ck.vocab = ck.vocab.reindexed()?;
        Ok(ck)
    }

    /// Rebuilds the model, checking that every parameter is present with
    /// the shape the configuration implies.
    pub fn restore(&self) -> Result<Gicon> {
        let mut model = Gicon::new(self.config.clone(), 0)?;
        if self.params.len() != model.store.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} parameters, model expects {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for nt in &self.params {
            let id = model
                .store
                .id(&nt.name)
                .ok_or_else(|| Error::Data(format!("checkpoint parameter {} is unknown to the model", nt.name)))?;
            let t = model.store.get_mut(id);
            if t.shape() != nt.shape.as_slice() {
                return Err(Error::Data(format!(
                    "parameter {} has shape {:?} in the checkpoint, model expects {:?}",
                    nt.name,
                    nt.shape,
                    t.shape()
                )));
            }
            if nt.data.len() != t.numel() {
                return Err(Error::Data(format!("parameter {} payload has the wrong length", nt.name)));
            }
            t.data_mut().copy_from_slice(&nt.data);
        }
        Ok(model)
    }
}
