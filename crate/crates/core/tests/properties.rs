mod common;

use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use gicon::autodiff::Tape;
use gicon::eval::{evaluate, r_precision_from_similarities, EvalMode, EvalSettings};
use gicon::gradcheck::{finite_difference, relative_error, run_gradcheck, GradcheckConfig};
use gicon::graph::{plan_sequence, BBox, QueryMode, SceneGraph};
use gicon::image_encoder::positional_encoding_2d;
use gicon::imaging::{resize_and_pad, Image};
use gicon::loss::{cosine_similarity, similarity_matrix};
use gicon::params::ParamStore;
use gicon::rng::stream;
use gicon::tensor::Tensor;

fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..12) {
        let mut rng = stream(seed, &[]);
        let mut keep: Vec<bool> = (0..cols).map(|_| rng.random_bool(0.6)).collect();
        keep[rng.random_range(0..cols)] = true;
        let mut tape = Tape::new();
        let x = tape.constant(random_tensor(&mut rng, &[rows, cols]).reshaped(vec![rows, cols]).unwrap());
        let y = tape.masked_softmax(x, &keep).unwrap();
        let y = tape.value(y);
        for r in 0..rows {
            let row = y.row(r);
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for (v, k) in row.iter().zip(&keep) {
                if !k {
                    prop_assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn serialization_layout_and_encodings(seed in any::<u64>(), n in 1usize..15, shuffle in any::<bool>()) {
        let model = common::random_model(1);
        let gp = &model.graph.inputs;
        let mut rng = stream(seed, &[]);
        let bound = rng.random_bool(0.5);
        let g = common::random_graph(&mut rng, n, 20, bound);
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, false);
        let seq = gp.serialize(&mut tape, &p, &g, QueryMode::Full, shuffle, &mut rng).unwrap();
        let plan = &seq.plan;
        prop_assert_eq!(plan.nodes.len(), n.min(gp.max_nodes));
        prop_assert_eq!(seq.len(&tape), 1 + plan.nodes.len() + plan.edges.len());
        let survivors: Vec<usize> = g.edges().iter().enumerate()
            .filter(|(_, e)| plan.nodes.contains(&e.subject) && plan.nodes.contains(&e.object))
            .map(|(k, _)| k)
            .collect();
        prop_assert_eq!(&plan.edges, &survivors);
        let enc = tape.value(seq.encodings);
        let table = model.store.get(gp.node_encodings);
        prop_assert!(enc.row(0).iter().all(|&v| v == 0.0));
        for (k, &edge) in plan.edges.iter().enumerate() {
            let e = &g.edges()[edge];
            let s = plan.encoding_slot_of_node(e.subject).unwrap();
            let o = plan.encoding_slot_of_node(e.object).unwrap();
            let expect: Vec<f64> = table.row(s).iter().zip(table.row(o)).map(|(a, b)| a - b).collect();
            prop_assert_eq!(enc.row(1 + plan.nodes.len() + k), &expect[..]);
        }
    }

    #[test]
    fn node_only_ignores_wiring(seed in any::<u64>(), n in 2usize..8) {
        let model = common::random_model(2);
        let mut rng = stream(seed, &[]);
        let a = common::random_graph(&mut rng, n, 8, false);
        let rewired = SceneGraph::new(a.nodes().to_vec(), common::random_graph(&mut rng, n, 8, false).edges().to_vec()).unwrap();
        let ea = model.embed_graph(&a, QueryMode::NodeOnly).unwrap();
        let eb = model.embed_graph(&rewired, QueryMode::NodeOnly).unwrap();
        prop_assert_eq!(ea, eb);
    }
}

#[test]
fn unshuffled_serialization_is_pure() {
    let model = common::random_model(4);
    let mut rng = stream(4, &[]);
    let g = common::random_graph(&mut rng, 6, 8, true);
    let run = |seed: u64| {
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, false);
        let seq = model.graph.inputs.serialize(&mut tape, &p, &g, QueryMode::Full, false, &mut stream(seed, &[])).unwrap();
        (tape.value(seq.tokens).clone(), tape.value(seq.encodings).clone())
    };
    assert_eq!(run(1), run(2));
}

#[test]
fn clipping_is_uniform_over_nodes() {
    let mut rng = stream(5, &[]);
    let g = common::random_graph(&mut rng, 12, 20, false);
    let mut counts = [0usize; 12];
    let trials = 6000;
    for t in 0..trials {
        for n in plan_sequence(&g, 6, true, &mut stream(t, &[])).nodes {
            counts[n] += 1;
        }
    }
    // Each node survives with probability 1/2; 5 sigma is about 0.032.
    for c in counts {
        assert!((c as f64 / trials as f64 - 0.5).abs() < 0.035, "{counts:?}");
    }
}

#[test]
fn box_embedding_input_gradient_matches_finite_differences() {
    let model = common::random_model(6);
    let bx = &model.graph.inputs.boxes;
    let mut rng = stream(6, &[]);
    let boxes: Vec<f64> = (0..3).flat_map(|_| common::random_box(&mut rng).to_array()).collect();
    let weights = random_tensor(&mut rng, &[3, model.config.model_dim]);
    let objective = |b: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, false);
        let x = tape.constant(Tensor::new(vec![3, 4], b.to_vec()).unwrap());
        let y = bx.forward(&mut tape, &p, x).unwrap();
        tape.value(y).data().iter().zip(weights.data()).map(|(a, w)| a * w).sum()
    };
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, false);
    let x = tape.leaf(Tensor::new(vec![3, 4], boxes.clone()).unwrap().with_grad());
    let y = bx.forward(&mut tape, &p, x).unwrap();
    let w = tape.constant(weights.clone());
    let prod = tape.mul(y, w).unwrap();
    let total = tape.sum(prod);
    tape.backward(total).unwrap();
    let analytic = tape.grad(x).unwrap().to_vec();
    let numeric = finite_difference(&mut |b: &[f64]| objective(b), &boxes, 1e-5);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = relative_error(*a, *n, 1e-5);
        assert!(err < 1e-5, "box input {i}: analytic {a} numeric {n} rel {err:e}");
    }
}

#[test]
fn distinct_boxes_embed_distinctly_once_trained() {
    // The random model stands in for a trained one: its output layer is no
    // longer zero.
    let model = common::random_model(8);
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, false);
    let a = BBox::new(0.1, 0.1, 0.3, 0.2).to_array();
    let b = BBox::new(0.5, 0.4, 0.2, 0.5).to_array();
    let x = tape.constant(Tensor::new(vec![2, 4], [a, b].concat()).unwrap());
    let y = model.graph.inputs.boxes.forward(&mut tape, &p, x).unwrap();
    let y = tape.value(y);
    assert!(y.row(0).iter().zip(y.row(1)).any(|(u, v)| (u - v).abs() > 1e-6));
}

#[test]
fn image_sequence_length_and_fixed_encodings() {
    let model = common::random_model(9);
    let cells = model.config.image_longest_side / model.config.stem_stride;
    assert_eq!(model.image.sequence_len(), 1 + cells * cells);
    for (h, w) in [(1, 1), (8, 8), (4, 16), (64, 64)] {
        let a = positional_encoding_2d(h, w, 32).unwrap();
        assert_eq!(a, positional_encoding_2d(h, w, 32).unwrap());
        let rows: Vec<&[f64]> = (0..h * w).map(|r| a.row(r)).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                assert!(rows[i].iter().zip(rows[j]).any(|(x, y)| (x - y).abs() > 1e-9), "{h}x{w} rows {i} and {j} coincide");
            }
        }
    }
}

#[test]
fn stem_is_translation_equivariant_away_from_borders() {
    let mut store = ParamStore::new();
    let mut rng = stream(10, &[]);
    let stem = gicon::image_encoder::Stem::new(8, [4, 6, 8], 16, &mut store, &mut rng).unwrap();
    let side = 64;
    let mut base = vec![0.0; side * side * 3];
    for y in 24..34 {
        for x in 20..30 {
            for c in 0..3 {
                base[(y * side + x) * 3 + c] = rng.random_range(0.0..1.0);
            }
        }
    }
    let mut shifted = vec![0.0; side * side * 3];
    for y in 0..side - 8 {
        for x in 0..side {
            for c in 0..3 {
                shifted[((y + 8) * side + x) * 3 + c] = base[(y * side + x) * 3 + c];
            }
        }
    }
    let features = |px: Vec<f64>| {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::new(vec![side, side, 3], px).unwrap());
        let f = stem.forward(&mut tape, &p, x).unwrap();
        tape.value(f).clone()
    };
    let (a, b) = (features(base), features(shifted));
    let n = side / 8;
    for r in 2..n - 3 {
        for c in 2..n - 2 {
            let (u, v) = (a.row(r * n + c), b.row((r + 1) * n + c));
            let diff = u.iter().zip(v).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "cell ({r}, {c}) differs by {diff:e}");
        }
    }
}

#[test]
fn pipeline_gradient_check_at_d16() {
    let cfg = GradcheckConfig {
        model_dim: 16,
        batch_size: 2,
        image_side: 32,
        stem_stride: 8,
        ..GradcheckConfig::default()
    };
    let report = run_gradcheck(&cfg, None).unwrap();
    assert!(report.passed, "{:?}", report.failures().collect::<Vec<_>>());
    assert!(report.worst_rel_error < 1e-4);
}

fn informative_similarities(q: usize, seed: u64) -> Tensor {
    let mut rng = stream(seed, &[]);
    let d = 8;
    let g = random_tensor(&mut rng, &[q, d]);
    let noise = random_tensor(&mut rng, &[q, d]);
    let i = Tensor::new(vec![q, d], g.data().iter().zip(noise.data()).map(|(a, b)| a + 1.5 * b).collect()).unwrap();
    similarity_matrix(&g, &i).unwrap()
}

#[test]
fn r_precision_falls_with_k() {
    let sim = informative_similarities(300, 3);
    let matches: Vec<usize> = (0..300).collect();
    let scores: Vec<f64> = [2, 5, 10, 50, 100, 200]
        .iter()
        .map(|&k| r_precision_from_similarities(&sim, &matches, k, 20, 1, true).unwrap().r_precision)
        .collect();
    for w in scores.windows(2) {
        // Monte-Carlo tolerance: 3 sigma at 6000 draws is under 0.02.
        assert!(w[1] <= w[0] + 0.02, "{scores:?}");
    }
    assert!(scores[0] > scores[5] + 0.1, "{scores:?}");
}

#[test]
fn random_baseline_is_one_over_k() {
    let mut rng = stream(21, &[]);
    // One trial per query: repeated trials of a query share its match's
    // similarity and are not independent draws.
    let (q, m, d) = (4000, 200, 16);
    let g = random_tensor(&mut rng, &[q, d]);
    let i = random_tensor(&mut rng, &[m, d]);
    let sim = similarity_matrix(&g, &i).unwrap();
    let matches: Vec<usize> = (0..q).map(|j| j % m).collect();
    for k in [2usize, 5, 20, 100] {
        let s = r_precision_from_similarities(&sim, &matches, k, 1, 4, true).unwrap();
        let p = 1.0 / k as f64;
        let sigma = (p * (1.0 - p) / s.trials as f64).sqrt();
        assert!((s.r_precision - p).abs() <= 3.0 * sigma, "K={k}: {} vs {p}", s.r_precision);
    }
}

#[test]
fn cached_gallery_matches_reencoding() {
    let model = common::random_model(12);
    let mut rng = stream(12, &[]);
    let graphs: Vec<SceneGraph> = (0..6).map(|_| common::random_graph(&mut rng, 3, 3, true)).collect();
    let images: Vec<_> = (0..6)
        .map(|_| {
            let data = (0..24 * 32 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
            resize_and_pad(&Image::new(24, 32, data).unwrap(), 32, 8).unwrap()
        })
        .collect();
    let cached = model.embed_images(&images, true).unwrap();
    let queries = gicon::eval::query_embeddings(&model, &graphs, EvalMode::LocationBound, false).unwrap();
    let sim = similarity_matrix(&queries, &cached).unwrap();
    for q in 0..graphs.len() {
        for t in 0..3 {
            for c in gicon::eval::candidates(images.len(), q, 4, 0, q, t) {
                let fresh = model.embed_image(&images[c]).unwrap();
                let s = cosine_similarity(queries.row(q), &fresh).unwrap();
                assert!((s - sim.row(q)[c]).abs() < 1e-12);
            }
        }
    }
    let settings = EvalSettings { ks: vec![2, 4], trials: 3, seed: 0, parallel: false };
    let matches: Vec<usize> = (0..6).collect();
    let a = evaluate(&model, &graphs, &cached, &matches, EvalMode::LocationBound, &settings).unwrap();
    let b = gicon::eval::evaluate_images(&model, &graphs, &images, &matches, EvalMode::LocationBound, &settings).unwrap();
    assert_eq!(a, b);
}
