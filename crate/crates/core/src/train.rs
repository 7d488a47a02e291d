//! Training configuration and the contrastive training loop.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dataset::Pair;
use crate::encoder::{EncoderConfig, EncodingInjection};
use crate::error::{Error, Result};
use crate::graph::{QueryMode, SceneGraph, Vocab};
use crate::imaging::PaddedImage;
use crate::loss::{contrastive_loss_from_similarities, in_batch_accuracy, similarity_var};
use crate::model::{Checkpoint, Gicon, ModelConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::Bound;
use crate::rng::stream;

const EPOCH_STREAM: u64 = 0xE90C;
const SAMPLE_STREAM: u64 = 0x5A3B;

/// Every knob of a training run. Serialized flat, so a config file is a
/// plain list of `key = value` lines using these field names; missing keys
/// take the defaults below (desk scale).
///
/// The loss sums each softmax over the `batch_size` in-batch candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub temperature: f64,
    pub seed: u64,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub norm_eps: f64,
    pub graph_layers: usize,
    pub graph_heads: usize,
    pub graph_injection: EncodingInjection,
    pub image_layers: usize,
    pub image_heads: usize,
    pub image_injection: EncodingInjection,
    pub max_nodes: usize,
    pub shuffle_nodes: bool,
    /// Probability of training on the location-free view of a sample, so
    /// one model serves both query kinds.
    pub location_dropout: f64,
    pub image_longest_side: usize,
    pub stem_stride: usize,
    pub stem_channels: [usize; 3],
    /// Save a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 30,
            learning_rate: 3e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            temperature: 1.0,
            seed: 0,
            model_dim: 32,
            ffn_dim: 64,
            norm_eps: 1e-5,
            graph_layers: 2,
            graph_heads: 4,
            graph_injection: EncodingInjection::QueryKeyEveryLayer,
            image_layers: 2,
            image_heads: 4,
            image_injection: EncodingInjection::QueryKeyEveryLayer,
            max_nodes: 10,
            shuffle_nodes: true,
            location_dropout: 0.3,
            image_longest_side: 64,
            stem_stride: 8,
            stem_channels: [16, 32, 32],
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// The default desk settings with a sharper temperature of 0.1, which
    /// the small synthetic runs need to converge within 30 epochs.
    pub fn desk() -> Self {
        Self {
            temperature: 0.1,
            ..Self::default()
        }
    }

    /// Full-size settings: d = 512, six layers per tower, batch 32,
    /// learning rate 1e-4, 512-pixel images.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-4,
            model_dim: 512,
            ffn_dim: 2048,
            graph_layers: 6,
            graph_heads: 8,
            image_layers: 6,
            image_heads: 8,
            image_longest_side: 512,
            stem_stride: 16,
            stem_channels: [64, 128, 256],
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` overrides; values are parsed as TOML literals,
    /// falling back to a plain string.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()).expect("round trip");
        for (key, raw) in overrides {
            if !table.contains_key(key) {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.clone()));
            table.insert(key.clone(), value);
        }
        Self::from_toml(&toml::to_string(&table).expect("table serializes"))
    }

    /// Layers a config file and then flag overrides over `base`, returning
    /// the result and where each key's value came from (`default`, `file`
    /// or `flag`).
    pub fn resolve(
        base: &Self,
        file: Option<&str>,
        flags: &[(String, String)],
    ) -> Result<(Self, BTreeMap<String, String>)> {
        let mut sources: BTreeMap<String, String> = toml::from_str::<toml::Table>(&base.to_toml())
            .expect("round trip")
            .keys()
            .map(|k| (k.clone(), "default".to_string()))
            .collect();
        let mut cfg = base.clone();
        if let Some(text) = file {
            let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
            let pairs: Vec<(String, String)> = table.iter().map(|(k, v)| (k.clone(), v.to_string())).collect();
            cfg = cfg.with_overrides(&pairs)?;
            for (k, _) in pairs {
                sources.insert(k, "file".into());
            }
        }
        cfg = cfg.with_overrides(flags)?;
        for (k, _) in flags {
            sources.insert(k.clone(), "flag".into());
        }
        Ok((cfg, sources))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for a contrastive signal".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.location_dropout) {
            return Err(Error::Config("location_dropout must lie in [0, 1]".into()));
        }
        if !self.image_longest_side.is_multiple_of(self.stem_stride) {
            return Err(Error::Config(format!(
                "image_longest_side {} must be a multiple of stem_stride {}",
                self.image_longest_side, self.stem_stride
            )));
        }
        self.optimizer().validate()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn model_config(&self, vocab: &Vocab) -> ModelConfig {
        let tower = |layers, heads, injection| EncoderConfig {
            layers,
            heads,
            model_dim: self.model_dim,
            ffn_dim: self.ffn_dim,
            eps: self.norm_eps,
            injection,
        };
        ModelConfig {
            entities: vocab.entities.len(),
            predicates: vocab.predicates.len(),
            model_dim: self.model_dim,
            max_nodes: self.max_nodes,
            graph: tower(self.graph_layers, self.graph_heads, self.graph_injection),
            image: tower(self.image_layers, self.image_heads, self.image_injection),
            image_longest_side: self.image_longest_side,
            stem_stride: self.stem_stride,
            stem_channels: self.stem_channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub in_batch_acc: f64,
}

/// Forward pass of one batch on `tape`: `(similarities [B, B], loss)`.
pub fn batch_loss(
    tape: &mut Tape,
    model: &Gicon,
    p: &Bound,
    graphs: &[(SceneGraph, QueryMode)],
    images: &[&PaddedImage],
    shuffle: bool,
    tau: f64,
    rngs: &mut [impl Rng],
) -> Result<(Var, Var)> {
    if graphs.len() != images.len() || graphs.len() != rngs.len() {
        return Err(Error::Data("batch parts differ in length".into()));
    }
    let mut g_rows = Vec::with_capacity(graphs.len());
    for ((graph, mode), rng) in graphs.iter().zip(rngs.iter_mut()) {
        let seq = model.graph.inputs.serialize(tape, p, graph, *mode, shuffle, rng)?;
        g_rows.push(model.graph.encode(tape, p, &seq)?);
    }
    let g = tape.concat_rows(&g_rows)?;
    let i = model.image.encode_batch(tape, p, images)?;
    let sim = similarity_var(tape, g, i)?;
    let loss = contrastive_loss_from_similarities(tape, sim, tau)?;
    Ok((sim, loss))
}

pub struct TrainRun {
    pub model: Gicon,
    pub log: Vec<StepLog>,
    pub checkpoints: Vec<PathBuf>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "model.json";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.json";

/// Trains on `pairs`. With `out`, the per-step log, periodic checkpoints and
/// the final checkpoint are written there.
pub fn train(cfg: &TrainConfig, vocab: &Vocab, pairs: &[Pair], out: Option<&Path>) -> Result<TrainRun> {
    cfg.validate()?;
    let b = cfg.batch_size;
    if pairs.len() < b {
        return Err(Error::Data(format!("{} training pairs cannot fill a batch of {b}", pairs.len())));
    }
    let mut model = Gicon::new(cfg.model_config(vocab), cfg.seed)?;
    for pr in pairs {
        pr.graph.check_vocab(vocab)?;
    }
    let images = pairs.iter().map(|pr| model.prepare_image(&pr.image)).collect::<Result<Vec<_>>>()?;
    let mut opt = AdamW::new(cfg.optimizer(), &model.store);
    let mut log_file = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            Some((std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?), path))
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &[EPOCH_STREAM, epoch as u64]));
        for batch in order.chunks_exact(b) {
            let mut rngs: Vec<_> = (0..b).map(|k| stream(cfg.seed, &[SAMPLE_STREAM, step, k as u64])).collect();
            let graphs: Vec<(SceneGraph, QueryMode)> = batch
                .iter()
                .zip(rngs.iter_mut())
                .map(|(&s, rng)| {
                    let g = &pairs[s].graph;
                    let drop = g.is_location_bound() && rng.random_bool(cfg.location_dropout);
                    (if drop { g.without_boxes() } else { g.clone() }, QueryMode::Full)
                })
                .collect();
            let imgs: Vec<&PaddedImage> = batch.iter().map(|&s| &images[s]).collect();
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape, true);
            let (sim, loss) = batch_loss(&mut tape, &model, &p, &graphs, &imgs, cfg.shuffle_nodes, cfg.temperature, &mut rngs)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                if let Some(dir) = out {
                    Checkpoint::capture(&model, vocab, step).save(&dir.join(LAST_GOOD_CHECKPOINT))?;
                }
                return Err(Error::Numeric(format!(
                    "loss became {value} at step {step} (epoch {epoch}); last good parameters kept"
                )));
            }
            let acc = in_batch_accuracy(tape.value(sim));
            tape.backward(loss)?;
            model.store.accumulate_grads(&tape, &p);
            if let Err(e) = opt.step(&mut model.store) {
                if let Some(dir) = out {
                    Checkpoint::capture(&model, vocab, step).save(&dir.join(LAST_GOOD_CHECKPOINT))?;
                }
                return Err(e);
            }
            step += 1;
            let entry = StepLog {
                step,
                epoch,
                loss: value,
                in_batch_acc: acc,
            };
            if let Some((f, path)) = log_file.as_mut() {
                serde_json::to_writer(&mut *f, &entry)?;
                f.write_all(b"\n").map_err(|e| Error::io(&*path, e))?;
            }
            log.push(entry);
        }
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs {
                let path = dir.join(format!("checkpoint-epoch{:04}.json", epoch + 1));
                Checkpoint::capture(&model, vocab, step).save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some((mut f, path)) = log_file {
        f.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(dir) = out {
        let path = dir.join(FINAL_CHECKPOINT);
        Checkpoint::capture(&model, vocab, step).save(&path)?;
        checkpoints.push(path);
    }
    Ok(TrainRun { model, log, checkpoints })
}
