//! Finite-difference verification of every backward rule and of the full
//! contrastive loss through both towers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeometry, Tape, Var, OP_NAMES};
use crate::error::{Error, Result};
use crate::graph::QueryMode;
use crate::image_encoder::Stem;
use crate::encoder::{EncoderConfig, EncodingInjection, TransformerEncoder};
use crate::graph::BoxEmbedder;
use crate::imaging::resize_and_pad;
use crate::model::{Gicon, ModelConfig};
use crate::params::{Bound, ParamStore};
use crate::rng::stream;
use crate::synth::{generate_graph, render, SynthConfig, SynthVocab};
use crate::tensor::Tensor;
use crate::train::batch_loss;

/// Largest model width / batch the command accepts.
pub const MAX_DIM: usize = 16;
pub const MAX_BATCH: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub model_dim: usize,
    pub batch_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub image_side: usize,
    pub stem_stride: usize,
    pub temperature: f64,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, for near-zero gradients.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model_dim: 8,
            batch_size: 3,
            layers: 2,
            heads: 2,
            image_side: 32,
            stem_stride: 8,
            temperature: 0.5,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
            seed: 0,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim > MAX_DIM || self.batch_size > MAX_BATCH {
            return Err(Error::Config(format!(
                "gradient checks need toy sizes (model_dim <= {MAX_DIM}, batch_size <= {MAX_BATCH}); \
                 got model_dim {} and batch_size {}. Finite differences cost two forward passes per \
                 parameter, so check a small model with the same code paths instead",
                self.model_dim, self.batch_size
            )));
        }
        if self.model_dim == 0 || !self.model_dim.is_multiple_of(4) || self.batch_size < 1 {
            return Err(Error::Config("model_dim must be a positive multiple of 4 and batch_size positive".into()));
        }
        if !(self.step > 0.0 && self.tolerance > 0.0 && self.floor > 0.0) {
            return Err(Error::Config("step, tolerance and floor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    /// `op:<name>` for a primitive, `<component>/<parameter>` otherwise.
    pub name: String,
    pub entries: usize,
    pub worst_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub results: Vec<CheckResult>,
    pub passed: bool,
    pub worst_rel_error: f64,
}

impl GradcheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed)
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central differences of a scalar function of one flat vector.
pub fn finite_difference(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + h;
            let up = f(&probe);
            probe[k] = x[k] - h;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

struct Checker<'a> {
    cfg: &'a GradcheckConfig,
    corrupt: Option<&'a str>,
    results: Vec<CheckResult>,
}

impl Checker<'_> {
    /// Compares tape gradients of `f` against central differences for every
    /// entry of every parameter in `store`.
    fn run(&mut self, prefix: &str, store: &mut ParamStore, f: &dyn Fn(&mut Tape, &Bound) -> Result<Var>) -> Result<()> {
        let mut tape = Tape::new();
        if let Some(op) = self.corrupt {
            tape.corrupt_backward(op);
        }
        let p = store.bind(&mut tape, true);
        let out = f(&mut tape, &p)?;
        tape.backward(out)?;
        store.zero_grads();
        store.accumulate_grads(&tape, &p);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let analytic = store.get(id).grad.clone().unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
            let x = store.get(id).data().to_vec();
            let mut eval = |v: &[f64]| -> f64 {
                store.get_mut(id).data_mut().copy_from_slice(v);
                let mut t = Tape::new();
                let p = store.bind(&mut t, false);
                let out = f(&mut t, &p).expect("forward succeeded once");
                t.value(out).data()[0]
            };
            let numeric = finite_difference(&mut eval, &x, self.cfg.step);
            store.get_mut(id).data_mut().copy_from_slice(&x);
            let worst = analytic
                .iter()
                .zip(&numeric)
                .map(|(&a, &n)| relative_error(a, n, self.cfg.floor))
                .fold(0.0, f64::max);
            let name = if prefix.starts_with("op:") {
                prefix.to_string()
            } else {
                format!("{prefix}/{}", store.name(id))
            };
            self.push(name, x.len(), worst);
        }
        store.zero_grads();
        Ok(())
    }

    fn push(&mut self, name: String, entries: usize, worst: f64) {
        if let Some(r) = self.results.iter_mut().find(|r| r.name == name) {
            r.entries += entries;
            r.worst_rel_error = r.worst_rel_error.max(worst);
            r.passed = r.worst_rel_error < self.cfg.tolerance;
        } else {
            self.results.push(CheckResult {
                name,
                entries,
                worst_rel_error: worst,
                passed: worst < self.cfg.tolerance,
            });
        }
    }
}

fn op_store(inputs: Vec<Tensor>) -> ParamStore {
    let mut s = ParamStore::new();
    for (k, t) in inputs.into_iter().enumerate() {
        s.add(format!("x{k}"), t);
    }
    s
}

/// Weighted sum `Σ w ⊙ y` with fixed weights, so every output element
/// contributes a distinct amount to the scalar.
fn weigh(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(Tensor::randn(&shape, 1.0, &mut stream(seed, &[0x3e16])));
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

fn away_from_zero<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let mut t = Tensor::randn(shape, 1.0, rng);
    for v in t.data_mut() {
        if v.abs() < 0.1 {
            *v += 0.2f64.copysign(*v);
        }
    }
    t
}

type OpCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

fn op_cases<R: Rng + ?Sized>(rng: &mut R) -> Vec<OpCase> {
    let r = |shape: &[usize], rng: &mut R| Tensor::randn(shape, 1.0, rng);
    let geom = ConvGeometry {
        height: 5,
        width: 4,
        channels: 2,
        kernel: 3,
        stride: 2,
        padding: 1,
    };
    let keep = vec![true, false, true, true, false];
    vec![
        ("matmul", vec![r(&[3, 4], rng), r(&[4, 2], rng)], Box::new(|t: &mut Tape, x: &[Var]| Ok(t.matmul(x[0], x[1])?))),
        ("transpose", vec![r(&[3, 4], rng)], Box::new(|t: &mut Tape, x: &[Var]| Ok(t.transpose(x[0])?))),
        ("add", vec![r(&[2, 3], rng), r(&[2, 3], rng)], Box::new(|t: &mut Tape, x: &[Var]| Ok(t.add(x[0], x[1])?))),
        ("sub", vec![r(&[2, 3], rng), r(&[2, 3], rng)], Box::new(|t: &mut Tape, x: &[Var]| Ok(t.sub(x[0], x[1])?))),
        ("mul", vec![r(&[2, 3], rng), r(&[2, 3], rng)], Box::new(|t: &mut Tape, x: &[Var]| Ok(t.mul(x[0], x[1])?))),
        ("scale", vec![r(&[2, 3], rng)], Box::new(|t: &mut Tape, x: &[Var]| Ok(t.scale(x[0], -1.7)))),
        ("add_row", vec![r(&[3, 4], rng), r(&[4], rng)], Box::new(|t: &mut Tape, x: &[Var]| Ok(t.add_row(x[0], x[1])?))),
        ("mul_row", vec![r(&[3, 4], rng), r(&[4], rng)], Box::new(|t: &mut Tape, x: &[Var]| Ok(t.mul_row(x[0], x[1])?))),
        ("relu", vec![away_from_zero(&[3, 4], rng)], Box::new(|t: &mut Tape, x: &[Var]| Ok(t.relu(x[0])))),
        ("gelu", vec![r(&[3, 4], rng)], Box::new(|t: &mut Tape, x: &[Var]| Ok(t.gelu(x[0])))),
        (
            "masked_softmax",
            vec![r(&[3, 5], rng)],
            Box::new(move |t: &mut Tape, x: &[Var]| Ok(t.masked_softmax(x[0], &keep)?)),
        ),
        ("log_softmax", vec![r(&[3, 5], rng)], Box::new(|t: &mut Tape, x: &[Var]| Ok(t.log_softmax(x[0])))),
        (
            "layer_norm",
            vec![r(&[3, 6], rng), r(&[6], rng), r(&[6], rng)],
            Box::new(|t: &mut Tape, x: &[Var]| Ok(t.layer_norm(x[0], x[1], x[2], 1e-5)?)),
        ),
        ("normalize_rows", vec![r(&[3, 4], rng)], Box::new(|t: &mut Tape, x: &[Var]| Ok(t.normalize_rows(x[0], 1e-12)?))),
        (
            "gather_rows",
            vec![r(&[4, 3], rng)],
            Box::new(|t: &mut Tape, x: &[Var]| Ok(t.gather_rows(x[0], &[2, 0, 2, 3])?)),
        ),
        ("take", vec![r(&[3, 3], rng)], Box::new(|t: &mut Tape, x: &[Var]| Ok(t.take(x[0], &[0, 4, 8, 4])?))),
        (
            "concat_rows",
            vec![r(&[2, 3], rng), r(&[1, 3], rng)],
            Box::new(|t: &mut Tape, x: &[Var]| Ok(t.concat_rows(&[x[0], x[1], x[0]])?)),
        ),
        (
            "concat_cols",
            vec![r(&[2, 3], rng), r(&[2, 1], rng)],
            Box::new(|t: &mut Tape, x: &[Var]| Ok(t.concat_cols(&[x[0], x[1]])?)),
        ),
        ("slice_rows", vec![r(&[4, 3], rng)], Box::new(|t: &mut Tape, x: &[Var]| Ok(t.slice_rows(x[0], 1, 2)?))),
        ("slice_cols", vec![r(&[3, 5], rng)], Box::new(|t: &mut Tape, x: &[Var]| Ok(t.slice_cols(x[0], 1, 3)?))),
        ("reshape", vec![r(&[2, 6], rng)], Box::new(|t: &mut Tape, x: &[Var]| Ok(t.reshape(x[0], &[3, 4])?))),
        ("sum", vec![r(&[2, 3], rng)], Box::new(|t: &mut Tape, x: &[Var]| Ok(t.sum(x[0])))),
        ("im2col", vec![r(&[5, 4, 2], rng)], Box::new(move |t: &mut Tape, x: &[Var]| Ok(t.im2col(x[0], geom)?))),
    ]
}

/// Adds small noise to every parameter so zero-initialized maps do not hide
/// the gradients flowing through them.
fn jitter(store: &mut ParamStore, seed: u64) {
    let mut rng = stream(seed, &[0x717e]);
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
}

/// Runs every check. With `corrupt`, the backward rule of that op is broken
/// on the analytic side (negative control).
pub fn run_gradcheck(cfg: &GradcheckConfig, corrupt: Option<&str>) -> Result<GradcheckReport> {
    cfg.validate()?;
    if let Some(op) = corrupt {
        if !OP_NAMES.contains(&op) {
            return Err(Error::Config(format!("unknown op {op:?}; expected one of {OP_NAMES:?}")));
        }
    }
    let mut checker = Checker {
        cfg,
        corrupt,
        results: Vec::new(),
    };
    let mut rng = stream(cfg.seed, &[0x09c5]);

    for (k, (name, inputs, f)) in op_cases(&mut rng).into_iter().enumerate() {
        let mut store = op_store(inputs);
        let ids: Vec<_> = store.ids().collect();
        let seed = cfg.seed ^ k as u64;
        checker.run(&format!("op:{name}"), &mut store, &move |t, p| {
            let xs: Vec<Var> = ids.iter().map(|&i| p[i]).collect();
            let y = f(t, &xs)?;
            weigh(t, y, seed)
        })?;
    }

    let d = cfg.model_dim;
    let enc = EncoderConfig {
        layers: cfg.layers,
        heads: cfg.heads,
        model_dim: d,
        ffn_dim: 2 * d,
        eps: 1e-5,
        injection: EncodingInjection::QueryKeyEveryLayer,
    };

    {
        let mut store = ParamStore::new();
        let embedder = BoxEmbedder::new("box", d, 1e-5, &mut store, &mut rng);
        jitter(&mut store, cfg.seed);
        let boxes = Tensor::uniform(&[3, 4], 0.5, &mut rng);
        checker.run("box-embedder", &mut store, &|t, p| {
            let b = t.constant(boxes.clone());
            let y = embedder.forward(t, p, b)?;
            weigh(t, y, 1)
        })?;
    }
    {
        let mut store = ParamStore::new();
        let stem = Stem::new(cfg.stem_stride, [2, 3, 4], d, &mut store, &mut rng)?;
        jitter(&mut store, cfg.seed);
        let px = Tensor::uniform(&[cfg.image_side, cfg.image_side, 3], 1.0, &mut rng);
        checker.run("stem", &mut store, &|t, p| {
            let x = t.constant(px.clone());
            let y = stem.forward(t, p, x)?;
            weigh(t, y, 2)
        })?;
    }
    {
        let mut store = ParamStore::new();
        let encoder = TransformerEncoder::new("encoder", enc, &mut store, &mut rng)?;
        jitter(&mut store, cfg.seed);
        let x = Tensor::randn(&[5, d], 1.0, &mut rng);
        let e = Tensor::randn(&[5, d], 1.0, &mut rng);
        let keep = [true, true, false, true, true];
        checker.run("encoder", &mut store, &|t, p| {
            let (x, e) = (t.constant(x.clone()), t.constant(e.clone()));
            let y = encoder.forward(t, p, x, e, Some(&keep))?;
            weigh(t, y, 3)
        })?;
    }

    let vocab = SynthVocab::default();
    let synth = SynthConfig {
        node_range: (2, 3),
        edge_range: (1, 3),
        ..SynthConfig::default()
    };
    let model_cfg = ModelConfig {
        entities: vocab.entity_count(),
        predicates: 4,
        model_dim: d,
        max_nodes: 4,
        graph: enc,
        image: enc,
        image_longest_side: cfg.image_side,
        stem_stride: cfg.stem_stride,
        stem_channels: [2, 3, 4],
    };
    let mut model = Gicon::new(model_cfg, cfg.seed)?;
    jitter(&mut model.store, cfg.seed);
    let mut graphs = Vec::new();
    let mut images = Vec::new();
    for k in 0..cfg.batch_size {
        let g = generate_graph(&mut stream(cfg.seed, &[0x6a, k as u64]), &vocab, &synth)?;
        let img = render(&g, &vocab, cfg.image_side)?;
        images.push(resize_and_pad(&img, cfg.image_side, cfg.stem_stride)?);
        // Mix location-bound and location-free queries in one batch.
        let g = if k % 2 == 1 { g.without_boxes() } else { g };
        graphs.push((g, QueryMode::Full));
    }
    let mut store = std::mem::take(&mut model.store);
    let tau = cfg.temperature;
    checker.run("loss", &mut store, &|t, p| {
        let imgs: Vec<_> = images.iter().collect();
        let mut rngs: Vec<_> = (0..graphs.len()).map(|k| stream(0, &[k as u64])).collect();
        let (_, loss) = batch_loss(t, &model, p, &graphs, &imgs, false, tau, &mut rngs)?;
        Ok(loss)
    })?;

    let worst = checker.results.iter().map(|r| r.worst_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        passed: checker.results.iter().all(|r| r.passed),
        results: checker.results,
        worst_rel_error: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_difference_of_cubic() {
        let mut f = |x: &[f64]| x[0].powi(3) + 2.0 * x[1];
        let g = finite_difference(&mut f, &[1.5, -3.0], 1e-5);
        assert!((g[0] - 6.75).abs() < 1e-8 && (g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(1e-12, 0.0, 1e-6), 1e-6);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn refuses_large_sizes() {
        let cfg = GradcheckConfig {
            model_dim: 32,
            ..GradcheckConfig::default()
        };
        let err = run_gradcheck(&cfg, None).unwrap_err().to_string();
        assert!(err.contains("toy sizes"), "{err}");
        assert!(run_gradcheck(&GradcheckConfig::default(), Some("nope")).is_err());
    }

    #[test]
    fn every_op_has_a_case() {
        let names: Vec<&str> = op_cases(&mut stream(0, &[])).iter().map(|c| c.0).collect();
        assert_eq!(names, OP_NAMES);
    }

    #[test]
    fn corrupted_rule_is_named() {
        let cfg = GradcheckConfig {
            image_side: 16,
            ..GradcheckConfig::default()
        };
        let report = run_gradcheck(&cfg, Some("layer_norm")).unwrap();
        assert!(!report.passed);
        assert!(report.failures().any(|r| r.name == "op:layer_norm"));
        assert!(report.failures().all(|r| !r.name.starts_with("op:") || r.name == "op:layer_norm"));
    }
}
