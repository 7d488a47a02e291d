//! Post-norm Transformer encoder stack shared by the graph and image towers.
//!
//! Each layer runs attention → add → norm → feed-forward → add → norm. An
//! auxiliary encoding sequence (structural encodings for graphs, positional
//! encodings for images) can be added to the query/key inputs only, so the
//! value path and the residual stream see the raw tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Where the auxiliary encodings enter the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncodingInjection {
    /// Added to the query and key inputs of every layer.
    QueryKeyEveryLayer,
    /// Added to the query and key inputs of the first layer only.
    QueryKeyFirstLayer,
    /// Added once to the input sequence (values and residuals see it too).
    Input,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub eps: f64,
    pub injection: EncodingInjection,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.ffn_dim == 0 {
            return Err(Error::Config("ffn_dim must be positive".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("normalization eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

#[derive(Debug, Clone)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), fan_in_uniform(&[fan_in, fan_out], fan_in, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.weight])?;
        Ok(tape.add_row(y, p[self.bias])?)
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    ffn_in: Linear,
    ffn_out: Linear,
    norm1: Norm,
    norm2: Norm,
}

/// Projections produced by one attention block, exposed for inspection.
#[derive(Debug, Clone, Copy)]
pub struct QkvProjections {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    cfg: EncoderConfig,
    layers: Vec<EncoderLayer>,
}

impl TransformerEncoder {
    pub fn new<R: Rng + ?Sized>(prefix: &str, cfg: EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let layers = (0..cfg.layers)
            .map(|l| {
                let n = format!("{prefix}.layer{l}");
                EncoderLayer {
                    query: Linear::new(store, &format!("{n}.attn.query"), d, d, rng),
                    key: Linear::new(store, &format!("{n}.attn.key"), d, d, rng),
                    value: Linear::new(store, &format!("{n}.attn.value"), d, d, rng),
                    output: Linear::new(store, &format!("{n}.attn.output"), d, d, rng),
                    ffn_in: Linear::new(store, &format!("{n}.ffn.in"), d, cfg.ffn_dim, rng),
                    ffn_out: Linear::new(store, &format!("{n}.ffn.out"), cfg.ffn_dim, d, rng),
                    norm1: Norm::new(store, &format!("{n}.norm1"), d),
                    norm2: Norm::new(store, &format!("{n}.norm2"), d),
                }
            })
            .collect();
        Ok(Self { cfg, layers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn injects_at(&self, layer: usize) -> bool {
        match self.cfg.injection {
            EncodingInjection::QueryKeyEveryLayer => true,
            EncodingInjection::QueryKeyFirstLayer => layer == 0,
            EncodingInjection::Input => false,
        }
    }

    /// Query/key/value projections of `layer` for the stream `x`.
    pub fn project_qkv(&self, tape: &mut Tape, p: &Bound, layer: usize, x: Var, enc: Var) -> Result<QkvProjections> {
        let l = &self.layers[layer];
        let qk_in = if self.injects_at(layer) { tape.add(x, enc)? } else { x };
        Ok(QkvProjections {
            query: l.query.forward(tape, p, qk_in)?,
            key: l.key.forward(tape, p, qk_in)?,
            value: l.value.forward(tape, p, x)?,
        })
    }

    fn attention(&self, tape: &mut Tape, qkv: QkvProjections, keep: &[bool]) -> Result<Var> {
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let q = tape.slice_cols(qkv.query, h * dh, dh)?;
            let k = tape.slice_cols(qkv.key, h * dh, dh)?;
            let v = tape.slice_cols(qkv.value, h * dh, dh)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.masked_softmax(scores, keep)?;
            heads.push(tape.matmul(weights, v)?);
        }
        if heads.len() == 1 {
            Ok(heads[0])
        } else {
            Ok(tape.concat_cols(&heads)?)
        }
    }

    /// Runs the stack over `x: [T, d]` with encodings `enc: [T, d]`.
    /// `keep[t] == false` removes token `t` as an attention target; its own
    /// row is still computed but never read by kept rows.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, enc: Var, keep: Option<&[bool]>) -> Result<Var> {
        let (xs, es) = (tape.shape(x).to_vec(), tape.shape(enc).to_vec());
        if xs.len() != 2 || xs[1] != self.cfg.model_dim || xs != es {
            return Err(Error::Config(format!(
                "encoder input {xs:?} / encodings {es:?} do not match model_dim {}",
                self.cfg.model_dim
            )));
        }
        let all;
        let keep = match keep {
            Some(k) => k,
            None => {
                all = vec![true; xs[0]];
                &all
            }
        };
        let mut x = if self.cfg.injection == EncodingInjection::Input { tape.add(x, enc)? } else { x };
        for (i, layer) in self.layers.iter().enumerate() {
            let qkv = self.project_qkv(tape, p, i, x, enc)?;
            let attn = self.attention(tape, qkv, keep)?;
            let attn = layer.output.forward(tape, p, attn)?;
            let res = tape.add(x, attn)?;
            let h = tape.layer_norm(res, p[layer.norm1.gain], p[layer.norm1.bias], self.cfg.eps)?;
            let f = layer.ffn_in.forward(tape, p, h)?;
            let f = tape.gelu(f);
            let f = layer.ffn_out.forward(tape, p, f)?;
            let res = tape.add(h, f)?;
            x = tape.layer_norm(res, p[layer.norm2.gain], p[layer.norm2.bias], self.cfg.eps)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(injection: EncodingInjection) -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            heads: 2,
            model_dim: 8,
            ffn_dim: 16,
            eps: 1e-5,
            injection,
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = cfg(EncodingInjection::QueryKeyEveryLayer);
        c.heads = 3;
        assert!(c.validate().is_err());
        c.heads = 2;
        c.layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn value_path_ignores_encodings() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = TransformerEncoder::new("e", cfg(EncodingInjection::QueryKeyEveryLayer), &mut store, &mut rng).unwrap();
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let e1 = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let e2 = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x);
        let (a, b) = (tape.constant(e1), tape.constant(e2));
        let qa = enc.project_qkv(&mut tape, &p, 1, xv, a).unwrap();
        let qb = enc.project_qkv(&mut tape, &p, 1, xv, b).unwrap();
        assert_eq!(tape.value(qa.value).data(), tape.value(qb.value).data());
        assert_ne!(tape.value(qa.query).data(), tape.value(qb.query).data());
        assert_ne!(tape.value(qa.key).data(), tape.value(qb.key).data());
    }

    #[test]
    fn first_layer_only_injection() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let enc = TransformerEncoder::new("e", cfg(EncodingInjection::QueryKeyFirstLayer), &mut store, &mut rng).unwrap();
        let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x);
        let a = tape.constant(Tensor::zeros(&[3, 8]));
        let b = tape.constant(Tensor::full(&[3, 8], 0.7));
        let la = enc.project_qkv(&mut tape, &p, 1, xv, a).unwrap();
        let lb = enc.project_qkv(&mut tape, &p, 1, xv, b).unwrap();
        assert_eq!(tape.value(la.query).data(), tape.value(lb.query).data());
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = TransformerEncoder::new("e", cfg(EncodingInjection::QueryKeyEveryLayer), &mut store, &mut rng).unwrap();
        let x = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let z = tape.constant(Tensor::zeros(&[1, 8]));
        let out1 = enc.forward(&mut tape, &p, xv, z, None).unwrap();
        let out2 = enc.forward(&mut tape, &p, xv, z, None).unwrap();
        assert_eq!(tape.value(out1).data(), tape.value(out2).data());
        // with one token the attention output is exactly its value projection
        let qkv = enc.project_qkv(&mut tape, &p, 0, xv, z).unwrap();
        let attn = enc.attention(&mut tape, qkv, &[true]).unwrap();
        assert!(tape.value(attn).max_abs_diff(tape.value(qkv.value)) < 1e-15);
    }
}
