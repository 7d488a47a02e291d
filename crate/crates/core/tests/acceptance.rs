//! Acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use gicon::autodiff::Tape;
use gicon::dataset::{load_pairs, Pair};
use gicon::eval::{evaluate, r_precision_from_similarities, EvalMode, EvalSettings, RetrievalReport};
use gicon::gradcheck::{run_gradcheck, GradcheckConfig};
use gicon::graph::{plan_sequence, Edge, Node, QueryMode, SceneGraph, Vocab};
use gicon::imaging::{resize_and_pad, Image};
use gicon::loss::{contrastive_loss_from_similarities, similarity_matrix};
use gicon::rng::stream;
use gicon::synth::{make_dataset, SynthConfig, SynthVocab, DEFAULT_GALLERY_FRACTION};
use gicon::tensor::{compensated_sum, Tensor};
use gicon::train::{train, TrainConfig, LOG_FILE};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn gradient_oracle() -> Outcome {
    let t = Instant::now();
    let report = run_gradcheck(&GradcheckConfig::default(), None).unwrap();
    let elapsed = t.elapsed();
    let ops = report.results.iter().filter(|r| r.name.starts_with("op:")).count();
    let loss = report.results.iter().filter(|r| r.name.starts_with("loss/")).count();
    let worst = report.worst_rel_error;
    outcome(
        worst < 1e-4 && report.passed && ops > 0 && loss > 0 && elapsed < Duration::from_secs(120),
        format!("{ops} op checks, {loss} loss parameter groups, worst rel. error {worst:.2e} (< 1e-4), {elapsed:.1?} (< 120 s)"),
    )
}

fn loss_of(sim: Vec<Vec<f64>>, tau: f64) -> f64 {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::from_rows(&sim).unwrap());
    let l = contrastive_loss_from_similarities(&mut tape, s, tau).unwrap();
    tape.value(l).data()[0]
}

fn analytic_losses() -> Outcome {
    let single = loss_of(vec![vec![0.37]], 1.0);
    let mut worst: f64 = 0.0;
    for b in [2usize, 8, 32] {
        let l = loss_of(vec![vec![0.25; b]; b], 1.0);
        worst = worst.max((l - 2.0 * (b as f64).ln()).abs());
    }
    let pm = loss_of(vec![vec![1.0, -1.0], vec![-1.0, 1.0]], 1.0);
    let pm_err = (pm - 2.0 * (1.0 + (-2.0f64).exp()).ln()).abs();
    outcome(
        single == 0.0 && worst < 1e-9 && pm_err < 1e-9,
        format!(
            "B=1 loss {:e} (exactly 0), |loss - 2 ln B| max {worst:.1e}, ±1 case error {pm_err:.1e} (< 1e-9)",
            single.abs()
        ),
    )
}

fn structural_encodings() -> Outcome {
    let model = common::random_model(3);
    let gp = &model.graph.inputs;
    let mut rng = stream(11, &[]);
    let mut worst_sum: f64 = 0.0;
    let mut antisymmetric = true;
    for case in 0..100u64 {
        let m = rng.random_range(2..=gp.max_nodes);
        let nodes: Vec<Node> = (0..m).map(|_| Node { entity: rng.random_range(0..common::ENTITIES), bbox: None }).collect();
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        let edges: Vec<Edge> = (0..m)
            .map(|i| Edge { predicate: rng.random_range(0..common::PREDICATES), subject: order[i], object: order[(i + 1) % m] })
            .collect();
        let reversed: Vec<Edge> = edges.iter().map(|e| Edge { subject: e.object, object: e.subject, ..e.clone() }).collect();
        let forward = SceneGraph::new(nodes.clone(), edges).unwrap();
        let backward = SceneGraph::new(nodes, reversed).unwrap();

        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, false);
        let fplan = plan_sequence(&forward, gp.max_nodes, true, &mut stream(case, &[1]));
        let bplan = plan_sequence(&backward, gp.max_nodes, true, &mut stream(case, &[1]));
        antisymmetric &= fplan.slots == bplan.slots;
        let f = gp.build(&mut tape, &p, &forward, fplan, QueryMode::Full).unwrap();
        let b = gp.build(&mut tape, &p, &backward, bplan, QueryMode::Full).unwrap();
        let fe = tape.value(f.encodings).clone();
        let be = tape.value(b.encodings).clone();
        for r in 1 + m..1 + 2 * m {
            antisymmetric &= fe.row(r).iter().zip(be.row(r)).all(|(x, y)| *x == -*y);
        }
        for c in 0..fe.last_dim() {
            let s = compensated_sum((1 + m..1 + 2 * m).map(|r| fe.row(r)[c]));
            worst_sum = worst_sum.max(s.abs());
        }
    }
    outcome(
        antisymmetric && worst_sum < 1e-12,
        format!("100 cycles: reversal negates every edge encoding exactly: {antisymmetric}; max |cycle sum| {worst_sum:.1e} (< 1e-12)"),
    )
}

fn permutation_invariance() -> Outcome {
    let model = common::random_model(5);
    let mut rng = stream(13, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(1..=8);
        let bound = rng.random_bool(0.5);
        let g = common::random_graph(&mut rng, n, 10, bound);
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, false);
        let seq = model.graph.inputs.serialize(&mut tape, &p, &g, QueryMode::Full, true, &mut rng).unwrap();
        let base = model.graph.encode(&mut tape, &p, &seq).unwrap();
        let base = tape.value(base).clone();
        let len = seq.len(&tape);
        for _ in 0..10 {
            let mut rest: Vec<usize> = (1..len).collect();
            rest.shuffle(&mut rng);
            let perm: Vec<usize> = std::iter::once(0).chain(rest).collect();
            let tokens = tape.gather_rows(seq.tokens, &perm).unwrap();
            let encodings = tape.gather_rows(seq.encodings, &perm).unwrap();
            let out = model.graph.encode_rows(&mut tape, &p, tokens, encodings, None).unwrap();
            worst = worst.max(tape.value(out).max_abs_diff(&base));
        }
    }
    outcome(worst < 1e-9, format!("50 graphs x 10 permutations: max change {worst:.1e} (< 1e-9)"))
}

fn mask_neutrality() -> Outcome {
    let model = common::random_model(7);
    let side = model.config.image_longest_side;
    let stride = model.config.stem_stride;
    let mut rng = stream(17, &[]);
    let mut image_worst: f64 = 0.0;
    let mut feature_worst: f64 = 0.0;
    let mut checked_cells = 0;
    for _ in 0..20 {
        // Non-square so the canvas has padding.
        let (h, w) = if rng.random_bool(0.5) { (rng.random_range(8..24), 32) } else { (32, rng.random_range(8..24)) };
        let data: Vec<f64> = (0..h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        let img = Image::new(h, w, data).unwrap();
        let clean = resize_and_pad(&img, side, stride).unwrap();
        let mut dirty = clean.clone();
        dirty.scribble_padding(rng.random_range(-50.0..50.0));
        let a = model.embed_image(&clean).unwrap();
        let b = model.embed_image(&dirty).unwrap();
        image_worst = image_worst.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));

        // Masked feature cells must not matter either, whatever they hold.
        let mask = clean.cell_mask();
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, false);
        let pixels = tape.constant(clean.sanitized_pixels());
        let features = model.image.stem.forward(&mut tape, &p, pixels).unwrap();
        let base = model.image.encode_features(&mut tape, &p, features, &mask).unwrap();
        let mut noisy = tape.value(features).clone();
        let d = noisy.last_dim();
        for (cell, keep) in mask.iter().enumerate() {
            if !keep {
                checked_cells += 1;
                for v in &mut noisy.data_mut()[cell * d..(cell + 1) * d] {
                    *v = rng.sample::<f64, _>(StandardNormal) * 100.0;
                }
            }
        }
        let noisy = tape.constant(noisy);
        let out = model.image.encode_features(&mut tape, &p, noisy, &mask).unwrap();
        feature_worst = feature_worst.max(tape.value(out).max_abs_diff(tape.value(base)));
    }

    let mut graph_worst: f64 = 0.0;
    for _ in 0..20 {
        let graphs: Vec<SceneGraph> = (0..4)
            .map(|_| {
                let n = rng.random_range(1..=6);
                common::random_graph(&mut rng, n, 6, false)
            })
            .collect();
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, false);
        let seqs: Vec<_> = graphs
            .iter()
            .map(|g| model.graph.inputs.serialize(&mut tape, &p, g, QueryMode::Full, false, &mut rng).unwrap())
            .collect();
        let zero = model.graph.encode_batch(&mut tape, &p, &seqs, 0.0).unwrap();
        let junk = model.graph.encode_batch(&mut tape, &p, &seqs, rng.random_range(-1e3..1e3)).unwrap();
        graph_worst = graph_worst.max(tape.value(junk).max_abs_diff(tape.value(zero)));
        for (i, s) in seqs.iter().enumerate() {
            let alone = model.graph.encode(&mut tape, &p, s).unwrap();
            let row = tape.value(zero).row(i).to_vec();
            let diff = tape.value(alone).data().iter().zip(&row).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            graph_worst = graph_worst.max(diff);
        }
    }
    let worst = image_worst.max(feature_worst).max(graph_worst);
    outcome(
        worst < 1e-9 && checked_cells > 0,
        format!(
            "20 images: padding pixels {image_worst:.1e}, {checked_cells} masked cells {feature_worst:.1e}; 20 graph batches: filler {graph_worst:.1e} (< 1e-9)"
        ),
    )
}

fn random_baseline() -> Outcome {
    let t = Instant::now();
    // 10,000 independent queries with one trial each; repeated trials of one
    // query are correlated through its match's similarity.
    let (queries, gallery, trials, d) = (10_000, 200, 1, 32);
    let mut rng = stream(19, &[]);
    let mut randn = |n: usize| -> Tensor {
        let data = (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor::new(vec![n, d], data).unwrap()
    };
    let g = randn(queries);
    let i = randn(gallery);
    let sim = similarity_matrix(&g, &i).unwrap();
    let matches: Vec<usize> = (0..queries).map(|q| q % gallery).collect();
    let score = r_precision_from_similarities(&sim, &matches, 10, trials, 23, true).unwrap();
    let elapsed = t.elapsed();
    outcome(
        (score.r_precision - 0.1).abs() <= 0.01 && score.trials == 10_000 && elapsed < Duration::from_secs(60),
        format!("R-Precision@10 {:.4} over {} trials (0.1 ± 0.01), {elapsed:.1?} (< 60 s)", score.r_precision, score.trials),
    )
}

struct Desk {
    vocab: Vocab,
    train: Vec<Pair>,
    gallery: Vec<Pair>,
}

fn desk_data(dir: &Path) -> Desk {
    let layout = make_dataset(256, 7, &SynthVocab::default(), &SynthConfig::default(), 64, DEFAULT_GALLERY_FRACTION, dir).unwrap();
    let vocab = Vocab::load(&layout.vocab).unwrap();
    Desk {
        train: load_pairs(&layout.train, &layout.images, &vocab).unwrap(),
        gallery: load_pairs(&layout.gallery, &layout.images, &vocab).unwrap(),
        vocab,
    }
}

fn gallery_reports(model: &gicon::model::Gicon, gallery: &[Pair], parallel: bool) -> Vec<RetrievalReport> {
    let imgs: Vec<_> = gallery.iter().map(|p| model.prepare_image(&p.image).unwrap()).collect();
    let emb = model.embed_images(&imgs, parallel).unwrap();
    let graphs: Vec<_> = gallery.iter().map(|p| p.graph.clone()).collect();
    let matches: Vec<usize> = (0..graphs.len()).collect();
    let settings = EvalSettings {
        ks: vec![10],
        trials: 20,
        seed: 0,
        parallel,
    };
    EvalMode::ALL
        .iter()
        .map(|&m| evaluate(model, &graphs, &emb, &matches, m, &settings).unwrap())
        .collect()
}

fn desk_end_to_end(desk: &Desk) -> Outcome {
    let t = Instant::now();
    let cfg = TrainConfig::desk();
    assert_eq!((cfg.model_dim, cfg.graph_layers, cfg.image_layers, cfg.batch_size, cfg.epochs), (32, 2, 2, 16, 30));
    let run = train(&cfg, &desk.vocab, &desk.train, None).unwrap();
    let reports = gallery_reports(&run.model, &desk.gallery, true);
    let elapsed = t.elapsed();
    let r = |m: EvalMode| reports.iter().find(|r| r.mode == m).unwrap().scores[0].r_precision;
    let (lf, lb, node, edge) = (r(EvalMode::LocationFree), r(EvalMode::LocationBound), r(EvalMode::NodeOnly), r(EvalMode::EdgeOnly));
    let last_epoch = run.log.last().unwrap().epoch;
    let tail: Vec<f64> = run.log.iter().filter(|s| s.epoch == last_epoch).map(|s| s.in_batch_acc).collect();
    let final_acc = tail.iter().sum::<f64>() / tail.len() as f64;
    outcome(
        lb >= 0.9 && lf >= 0.8 && lb >= lf && lf > node && node > edge && elapsed < Duration::from_secs(900),
        format!(
            "{} train / {} held-out pairs; R-Precision@10 LB {lb:.3} (>= 0.9), LF {lf:.3} (>= 0.8), node-only {node:.3}, edge-only {edge:.3}; \
             last-epoch in-batch accuracy {final_acc:.3}; {elapsed:.1?} (< 15 min)",
            desk.train.len(),
            desk.gallery.len()
        ),
    )
}

fn determinism(desk: &Desk, dir: &Path) -> Outcome {
    let cfg = TrainConfig { epochs: 2, ..TrainConfig::desk() };
    let a = train(&cfg, &desk.vocab, &desk.train, Some(&dir.join("a"))).unwrap();
    let b = train(&cfg, &desk.vocab, &desk.train, Some(&dir.join("b"))).unwrap();
    let same_file = |f: &str| std::fs::read(dir.join("a").join(f)).unwrap() == std::fs::read(dir.join("b").join(f)).unwrap();
    let logs = same_file(LOG_FILE) && a.log == b.log;
    let checkpoints = same_file(gicon::train::FINAL_CHECKPOINT);
    let json = |rs: &[RetrievalReport]| serde_json::to_string(rs).unwrap();
    let seq = json(&gallery_reports(&a.model, &desk.gallery, false));
    let par = json(&gallery_reports(&b.model, &desk.gallery, true));
    let again = json(&gallery_reports(&a.model, &desk.gallery, false));
    let reports = seq == par && seq == again;
    outcome(
        logs && checkpoints && reports,
        format!("train logs identical: {logs}; checkpoints identical: {checkpoints}; eval reports identical (sequential, parallel, repeated): {reports}"),
    )
}

fn run(label: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    });
    let status = if result.passed { "PASS" } else { "FAIL" };
    println!("{status} {label}: {} [{:.1?}]", result.detail, t.elapsed());
    result.passed
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let desk = desk_data(&tmp.path().join("data"));
    let results = [
        run("1 gradient oracle", gradient_oracle),
        run("2 analytic loss values", analytic_losses),
        run("3 structural-encoding algebra", structural_encodings),
        run("4 permutation invariance", permutation_invariance),
        run("5 mask neutrality", mask_neutrality),
        run("6 random-baseline retrieval", random_baseline),
        run("7 desk-scale end-to-end", || desk_end_to_end(&desk)),
        run("8 determinism", || determinism(&desk, tmp.path())),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
