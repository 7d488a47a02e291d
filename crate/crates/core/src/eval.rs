//! R-Precision retrieval evaluation.
//!
//! For each query graph and trial, `K - 1` distractors are drawn uniformly
//! without replacement from the gallery (excluding the match); the trial
//! succeeds when the match scores strictly higher than every distractor.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphError, QueryMode, SceneGraph};
use crate::imaging::PaddedImage;
use crate::loss::similarity_matrix;
use crate::model::Gicon;
use crate::rng::stream;
use crate::tensor::Tensor;

pub const DEFAULT_KS: [usize; 3] = [10, 50, 100];
pub const DEFAULT_TRIALS: usize = 20;
/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959963984540054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    LocationFree,
    LocationBound,
    NodeOnly,
    EdgeOnly,
}

impl EvalMode {
    pub const ALL: [EvalMode; 4] = [EvalMode::LocationFree, EvalMode::LocationBound, EvalMode::NodeOnly, EvalMode::EdgeOnly];

    /// The graph view and serialization mode used as the query. Node-only
    /// and edge-only queries drop boxes, like location-free ones.
    pub fn query(self, graph: &SceneGraph) -> Result<(SceneGraph, QueryMode)> {
        Ok(match self {
            EvalMode::LocationFree => (graph.without_boxes(), QueryMode::Full),
            EvalMode::LocationBound => {
                if !graph.is_location_bound() {
                    return Err(Error::Data("location-bound evaluation needs boxes on every query node".into()));
                }
                (graph.clone(), QueryMode::Full)
            }
            EvalMode::NodeOnly => (graph.without_boxes(), QueryMode::NodeOnly),
            EvalMode::EdgeOnly => {
                if graph.edges().is_empty() {
                    return Err(GraphError::NoEdges.into());
                }
                (graph.without_boxes(), QueryMode::EdgeOnly)
            }
        })
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::LocationFree => "lf",
            EvalMode::LocationBound => "lb",
            EvalMode::NodeOnly => "node",
            EvalMode::EdgeOnly => "edge",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lf" | "location-free" => Ok(EvalMode::LocationFree),
            "lb" | "location-bound" => Ok(EvalMode::LocationBound),
            "node" | "node-only" => Ok(EvalMode::NodeOnly),
            "edge" | "edge-only" => Ok(EvalMode::EdgeOnly),
            _ => Err(Error::Config(format!("unknown evaluation mode {s:?} (expected lf, lb, node or edge)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KScore {
    pub k: usize,
    pub r_precision: f64,
    pub successes: u64,
    pub trials: u64,
    /// Wilson 95% interval.
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub mode: EvalMode,
    pub queries: usize,
    pub gallery: usize,
    pub trials_per_query: usize,
    pub seed: u64,
    pub scores: Vec<KScore>,
}

impl RetrievalReport {
    pub fn score(&self, k: usize) -> Option<&KScore> {
        self.scores.iter().find(|s| s.k == k)
    }
}

/// Wilson score interval for `successes` out of `n` at 95%.
pub fn wilson_interval(successes: u64, n: u64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = Z95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0).min(p), (center + half).min(1.0).max(p))
}

/// Candidate indices for one `(query, trial)`: the match followed by
/// `k - 1` distinct distractors.
pub fn candidates(gallery: usize, matched: usize, k: usize, seed: u64, query: usize, trial: usize) -> Vec<usize> {
    let mut rng = stream(seed, &[query as u64, trial as u64]);
    let mut out = Vec::with_capacity(k);
    out.push(matched);
    out.extend(
        index::sample(&mut rng, gallery - 1, k - 1)
            .into_iter()
            .map(|j| if j >= matched { j + 1 } else { j }),
    );
    out
}

/// R-Precision at `k` from a `[queries, gallery]` similarity matrix, where
/// `matches[q]` is the gallery index of query `q`'s image.
pub fn r_precision_from_similarities(
    sim: &Tensor,
    matches: &[usize],
    k: usize,
    trials: usize,
    seed: u64,
    parallel: bool,
) -> Result<KScore> {
    let (q, m) = match *sim.shape() {
        [q, m] => (q, m),
        ref s => return Err(Error::Data(format!("similarity matrix must be 2-D, got {s:?}"))),
    };
    if k < 2 {
        return Err(Error::Config(format!("K must be at least 2, got {k}")));
    }
    if trials == 0 {
        return Err(Error::Config("trials must be positive".into()));
    }
    if m < k {
        return Err(Error::Data(format!("gallery of {m} images is smaller than K = {k}")));
    }
    if matches.len() != q || matches.iter().any(|&j| j >= m) {
        return Err(Error::Data("every query needs exactly one match inside the gallery".into()));
    }
    let per_query = |qi: usize| -> u64 {
        let row = sim.row(qi);
        let matched = matches[qi];
        (0..trials)
            .filter(|&t| {
                let cand = candidates(m, matched, k, seed, qi, t);
                cand[1..].iter().all(|&j| row[j] < row[matched])
            })
            .count() as u64
    };
    let successes: u64 = if parallel {
        (0..q).into_par_iter().map(per_query).collect::<Vec<_>>().into_iter().sum()
    } else {
        (0..q).map(per_query).sum()
    };
    let n = (q * trials) as u64;
    let (ci_low, ci_high) = wilson_interval(successes, n);
    Ok(KScore {
        k,
        r_precision: successes as f64 / n as f64,
        successes,
        trials: n,
        ci_low,
        ci_high,
    })
}

#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub ks: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub parallel: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            trials: DEFAULT_TRIALS,
            seed: 0,
            parallel: true,
        }
    }
}

/// Query embeddings for `graphs` under `mode`.
pub fn query_embeddings(model: &Gicon, graphs: &[SceneGraph], mode: EvalMode, parallel: bool) -> Result<Tensor> {
    let views = graphs.iter().map(|g| mode.query(g)).collect::<Result<Vec<_>>>()?;
    let rows = if parallel {
        views.par_iter().map(|(g, qm)| model.embed_graph(g, *qm)).collect::<Result<Vec<_>>>()?
    } else {
        views.iter().map(|(g, qm)| model.embed_graph(g, *qm)).collect::<Result<Vec<_>>>()?
    };
    Ok(Tensor::new(vec![rows.len(), model.config.model_dim], rows.concat())?)
}

/// Full evaluation; `gallery_embeddings` are computed once by the caller
/// (see [`Gicon::embed_images`]) and shared across modes.
pub fn evaluate(
    model: &Gicon,
    graphs: &[SceneGraph],
    gallery_embeddings: &Tensor,
    matches: &[usize],
    mode: EvalMode,
    settings: &EvalSettings,
) -> Result<RetrievalReport> {
    let g = query_embeddings(model, graphs, mode, settings.parallel)?;
    let sim = similarity_matrix(&g, gallery_embeddings)?;
    let scores = settings
        .ks
        .iter()
        .map(|&k| r_precision_from_similarities(&sim, matches, k, settings.trials, settings.seed, settings.parallel))
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrievalReport {
        mode,
        queries: graphs.len(),
        gallery: gallery_embeddings.rows(),
        trials_per_query: settings.trials,
        seed: settings.seed,
        scores,
    })
}

/// Convenience wrapper that embeds the gallery images itself.
pub fn evaluate_images(
    model: &Gicon,
    graphs: &[SceneGraph],
    gallery: &[PaddedImage],
    matches: &[usize],
    mode: EvalMode,
    settings: &EvalSettings,
) -> Result<RetrievalReport> {
    let emb = model.embed_images(gallery, settings.parallel)?;
    evaluate(model, graphs, &emb, matches, mode, settings)
}

/// Gallery indices ordered by descending similarity (ties by index).
pub fn rank(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx
}
