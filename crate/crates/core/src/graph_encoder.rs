//! Graph tower: serialized graph → Transformer → graph-token state.

use crate::autodiff::{Tape, Var};
use crate::encoder::TransformerEncoder;
use crate::error::{Error, Result};
use crate::graph::{GraphParams, GraphSequence};
use crate::params::Bound;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GraphTower {
    pub inputs: GraphParams,
    pub encoder: TransformerEncoder,
}

impl GraphTower {
    /// Final-layer state of the graph token, shape `[1, d]`.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, seq: &GraphSequence) -> Result<Var> {
        self.encode_rows(tape, p, seq.tokens, seq.encodings, None)
    }

    /// Encodes raw `[T, d]` token/encoding rows; row 0 must be the graph token.
    pub fn encode_rows(&self, tape: &mut Tape, p: &Bound, tokens: Var, encodings: Var, keep: Option<&[bool]>) -> Result<Var> {
        let out = self.encoder.forward(tape, p, tokens, encodings, keep)?;
        Ok(tape.slice_rows(out, 0, 1)?)
    }

    /// Encodes graphs of different lengths together: each sequence is padded
    /// to the batch maximum with `filler` rows that are masked out of
    /// attention. Returns `[B, d]`.
    pub fn encode_batch(&self, tape: &mut Tape, p: &Bound, seqs: &[GraphSequence], filler: f64) -> Result<Var> {
        if seqs.is_empty() {
            return Err(Error::Data("cannot encode an empty batch".into()));
        }
        let d = self.inputs.model_dim;
        let max_len = seqs.iter().map(|s| s.len(tape)).max().unwrap_or(0);
        let mut rows = Vec::with_capacity(seqs.len());
        for s in seqs {
            let len = s.len(tape);
            let (tokens, encodings) = if len < max_len {
                let pad_tok = tape.constant(Tensor::full(&[max_len - len, d], filler));
                let pad_enc = tape.constant(Tensor::full(&[max_len - len, d], filler));
                (tape.concat_rows(&[s.tokens, pad_tok])?, tape.concat_rows(&[s.encodings, pad_enc])?)
            } else {
                (s.tokens, s.encodings)
            };
            let keep: Vec<bool> = (0..max_len).map(|t| t < len).collect();
            rows.push(self.encode_rows(tape, p, tokens, encodings, Some(&keep))?);
        }
        Ok(tape.concat_rows(&rows)?)
    }
}
