//! Cosine similarity and the symmetric in-batch contrastive objective.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorError};

/// Rows with a smaller norm than this are rejected by cosine similarity.
pub const MIN_NORM: f64 = 1e-12;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `(g·i) / (‖g‖‖i‖)`.
pub fn cosine_similarity(g: &[f64], i: &[f64]) -> Result<f64> {
    if g.len() != i.len() {
        return Err(TensorError::ShapeMismatch {
            op: "cosine_similarity",
            lhs: vec![g.len()],
            rhs: vec![i.len()],
        }
        .into());
    }
    let (ng, ni) = (norm(g), norm(i));
    for n in [ng, ni] {
        if !(n > MIN_NORM) {
            return Err(TensorError::ZeroNorm {
                op: "cosine_similarity",
                norm: n,
                min: MIN_NORM,
            }
            .into());
        }
    }
    let dot: f64 = g.iter().zip(i).map(|(a, b)| a * b).sum();
    Ok((dot / (ng * ni)).clamp(-1.0, 1.0))
}

/// Cosine similarities between every row of `g: [Q, d]` and every row of
/// `i: [M, d]`, returned as `[Q, M]`. Values are raw, neither scaled nor
/// normalized.
pub fn similarity_matrix(g: &Tensor, i: &Tensor) -> Result<Tensor> {
    if g.shape().len() != 2 || i.shape().len() != 2 || g.last_dim() != i.last_dim() {
        return Err(TensorError::ShapeMismatch {
            op: "similarity_matrix",
            lhs: g.shape().to_vec(),
            rhs: i.shape().to_vec(),
        }
        .into());
    }
    let unit = |t: &Tensor| -> Result<Vec<Vec<f64>>> {
        (0..t.rows())
            .map(|r| {
                let row = t.row(r);
                let n = norm(row);
                if !(n > MIN_NORM) {
                    return Err(Error::from(TensorError::ZeroNorm {
                        op: "similarity_matrix",
                        norm: n,
                        min: MIN_NORM,
                    }));
                }
                Ok(row.iter().map(|v| v / n).collect())
            })
            .collect()
    };
    let (gu, iu) = (unit(g)?, unit(i)?);
    let mut out = Vec::with_capacity(gu.len() * iu.len());
    for a in &gu {
        for b in &iu {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            out.push(dot.clamp(-1.0, 1.0));
        }
    }
    Ok(Tensor::new(vec![gu.len(), iu.len()], out)?)
}

/// Differentiable `[B, B]` cosine-similarity matrix, rows = graphs.
pub fn similarity_var(tape: &mut Tape, g: Var, i: Var) -> Result<Var> {
    let gn = tape.normalize_rows(g, MIN_NORM)?;
    let inn = tape.normalize_rows(i, MIN_NORM)?;
    let it = tape.transpose(inn)?;
    Ok(tape.matmul(gn, it)?)
}

/// Symmetric cross-entropy over the rows and columns of `sim / tau`, where
/// `sim[k][k]` is the matched pair:
/// `-(1/B) Σ_k [log softmax_row(k)[k] + log softmax_col(k)[k]]`.
pub fn contrastive_loss_from_similarities(tape: &mut Tape, sim: Var, tau: f64) -> Result<Var> {
    let b = match *tape.shape(sim) {
        [r, c] if r == c && r >= 1 => r,
        ref s => return Err(Error::Config(format!("similarity matrix must be square and nonempty, got {s:?}"))),
    };
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let logits = tape.scale(sim, 1.0 / tau);
    let diag: Vec<usize> = (0..b).map(|k| k * b + k).collect();
    let rows = tape.log_softmax(logits);
    let rows = tape.take(rows, &diag)?;
    let cols = tape.transpose(logits)?;
    let cols = tape.log_softmax(cols);
    let cols = tape.take(cols, &diag)?;
    let both = tape.add(rows, cols)?;
    let total = tape.sum(both);
    Ok(tape.scale(total, -1.0 / b as f64))
}

/// Contrastive loss of matched graph/image embeddings `g, i: [B, d]`.
pub fn contrastive_loss(tape: &mut Tape, g: Var, i: Var, tau: f64) -> Result<Var> {
    if tape.shape(g) != tape.shape(i) {
        return Err(TensorError::ShapeMismatch {
            op: "contrastive_loss",
            lhs: tape.shape(g).to_vec(),
            rhs: tape.shape(i).to_vec(),
        }
        .into());
    }
    let sim = similarity_var(tape, g, i)?;
    contrastive_loss_from_similarities(tape, sim, tau)
}

/// Fraction of rows whose diagonal entry is strictly the row maximum.
pub fn in_batch_accuracy(sim: &Tensor) -> f64 {
    let b = sim.rows();
    if b == 0 {
        return 0.0;
    }
    let hits = (0..b)
        .filter(|&k| {
            let row = sim.row(k);
            row.iter().enumerate().all(|(j, &v)| j == k || v < row[k])
        })
        .count();
    hits as f64 / b as f64
}
