//! Procedural paired data: colored shapes related by geometric predicates.
//!
//! Every predicate is a function of two boxes, so each label can be
//! re-derived from the annotation alone.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BBox, Edge, Node, SceneGraph, Vocab};
use crate::imaging::Image;
use crate::rng::stream;

/// Box coordinates are multiples of `1 / GRID`, exact in binary.
pub const GRID: u32 = 32;
pub const BACKGROUND: u8 = 128;
/// Share of the samples held out as the retrieval gallery.
pub const DEFAULT_GALLERY_FRACTION: f64 = 0.0625;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Predicate {
    LeftOf,
    Above,
    Inside,
    Overlapping,
}

impl Predicate {
    pub const ALL: [Predicate; 4] = [Predicate::LeftOf, Predicate::Above, Predicate::Inside, Predicate::Overlapping];

    pub fn name(self) -> &'static str {
        match self {
            Predicate::LeftOf => "left-of",
            Predicate::Above => "above",
            Predicate::Inside => "inside",
            Predicate::Overlapping => "overlapping",
        }
    }

    /// Decision rule for `subject PRED object`.
    pub fn holds(self, a: &BBox, b: &BBox) -> bool {
        match self {
            Predicate::LeftOf => a.right() <= b.x,
            Predicate::Above => a.bottom() <= b.y,
            Predicate::Inside => a.within(b) && a.area() < b.area(),
            Predicate::Overlapping => a.intersection_area(b) > 0.0 && !a.within(b) && !b.within(a),
        }
    }
}

/// Entities are every `(color, shape)` pair, named `"{color}-{shape}"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthVocab {
    pub shapes: Vec<Shape>,
    pub colors: Vec<(String, [u8; 3])>,
}

impl Default for SynthVocab {
    fn default() -> Self {
        Self {
            shapes: vec![Shape::Circle, Shape::Square, Shape::Triangle],
            colors: vec![
                ("red".into(), [220, 40, 40]),
                ("green".into(), [40, 180, 60]),
                ("blue".into(), [40, 80, 220]),
                ("yellow".into(), [230, 210, 40]),
                ("magenta".into(), [200, 50, 200]),
                ("cyan".into(), [40, 200, 210]),
                ("white".into(), [245, 245, 245]),
                ("black".into(), [20, 20, 20]),
            ],
        }
    }
}

impl SynthVocab {
    pub fn entity_count(&self) -> usize {
        self.shapes.len() * self.colors.len()
    }

    pub fn entity(&self, k: usize) -> (Shape, [u8; 3]) {
        (self.shapes[k % self.shapes.len()], self.colors[k / self.shapes.len()].1)
    }

    pub fn vocab(&self) -> Vocab {
        let mut entities = Vec::new();
        for (color, _) in &self.colors {
            for s in &self.shapes {
                let shape = match s {
                    Shape::Circle => "circle",
                    Shape::Square => "square",
                    Shape::Triangle => "triangle",
                };
                entities.push(format!("{color}-{shape}"));
            }
        }
        let predicates = Predicate::ALL.iter().map(|p| p.name().to_string()).collect();
        Vocab::new(entities, predicates).expect("synthetic names are unique")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub node_range: (usize, usize),
    pub edge_range: (usize, usize),
    /// Box sides, in grid units.
    pub size_range: (u32, u32),
    /// Probability that a new box is nested inside an existing one.
    pub nest_probability: f64,
    /// Probability that a new box may overlap earlier ones.
    pub overlap_probability: f64,
    pub attempts: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            node_range: (2, 3),
            edge_range: (1, 4),
            size_range: (6, 14),
            nest_probability: 0.15,
            overlap_probability: 0.2,
            attempts: 200,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (n0, n1) = self.node_range;
        let (e0, e1) = self.edge_range;
        let (s0, s1) = self.size_range;
        if n0 < 1 || n0 > n1 || e0 > e1 || s0 < 2 || s0 > s1 || s1 > GRID || self.attempts == 0 {
            return Err(Error::Config(format!("invalid generator settings {self:?}")));
        }
        if n1 < 2 && e0 > 0 {
            return Err(Error::Config("edges need at least two nodes".into()));
        }
        Ok(())
    }
}

fn grid_box(x: u32, y: u32, w: u32, h: u32) -> BBox {
    let g = f64::from(GRID);
    BBox::new(f64::from(x) / g, f64::from(y) / g, f64::from(w) / g, f64::from(h) / g)
}

fn sample_boxes<R: Rng + ?Sized>(rng: &mut R, cfg: &SynthConfig, n: usize) -> Option<Vec<BBox>> {
    let (s0, s1) = cfg.size_range;
    let mut cells: Vec<[u32; 4]> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = None;
        for _ in 0..cfg.attempts {
            if !cells.is_empty() && rng.random_bool(cfg.nest_probability) {
                let [px, py, pw, ph] = cells[rng.random_range(0..cells.len())];
                if pw >= 4 && ph >= 4 {
                    let w = rng.random_range(2..=pw / 2);
                    let h = rng.random_range(2..=ph / 2);
                    placed = Some([px + rng.random_range(0..=pw - w), py + rng.random_range(0..=ph - h), w, h]);
                    break;
                }
                continue;
            }
            let w = rng.random_range(s0..=s1);
            let h = rng.random_range(s0..=s1);
            let c = [rng.random_range(0..=GRID - w), rng.random_range(0..=GRID - h), w, h];
            let free = |o: &[u32; 4]| c[0] + c[2] <= o[0] || o[0] + o[2] <= c[0] || c[1] + c[3] <= o[1] || o[1] + o[3] <= c[1];
            if rng.random_bool(cfg.overlap_probability) || cells.iter().all(free) {
                placed = Some(c);
                break;
            }
        }
        cells.push(placed?);
    }
    if has_duplicate(&cells) {
        return None;
    }
    Some(cells.iter().map(|&[x, y, w, h]| grid_box(x, y, w, h)).collect())
}

fn has_duplicate(cells: &[[u32; 4]]) -> bool {
    let set: HashSet<_> = cells.iter().collect();
    set.len() != cells.len()
}

/// All `(predicate, subject, object)` triplets that hold for `boxes`.
pub fn true_triplets(boxes: &[BBox]) -> Vec<Edge> {
    let mut out = Vec::new();
    for (s, a) in boxes.iter().enumerate() {
        for (o, b) in boxes.iter().enumerate() {
            if s == o {
                continue;
            }
            for (k, p) in Predicate::ALL.iter().enumerate() {
                if p.holds(a, b) {
                    out.push(Edge {
                        predicate: k,
                        subject: s,
                        object: o,
                    });
                }
            }
        }
    }
    out
}

/// Samples a location-bound graph whose edges are a subset of the true
/// triplets of its boxes.
pub fn generate_graph<R: Rng + ?Sized>(rng: &mut R, vocab: &SynthVocab, cfg: &SynthConfig) -> Result<SceneGraph> {
    cfg.validate()?;
    for _ in 0..cfg.attempts {
        let n = rng.random_range(cfg.node_range.0..=cfg.node_range.1);
        let Some(boxes) = sample_boxes(rng, cfg, n) else { continue };
        let candidates = true_triplets(&boxes);
        if candidates.len() < cfg.edge_range.0 {
            continue;
        }
        let m = rng.random_range(cfg.edge_range.0..=cfg.edge_range.1.min(candidates.len()));
        let mut pick = index::sample(rng, candidates.len(), m).into_vec();
        pick.sort_unstable();
        let edges = pick.into_iter().map(|k| candidates[k].clone()).collect();
        let nodes = boxes
            .into_iter()
            .map(|b| Node {
                entity: rng.random_range(0..vocab.entity_count()),
                bbox: Some(b),
            })
            .collect();
        return Ok(SceneGraph::new(nodes, edges)?);
    }
    Err(Error::Data(format!(
        "no valid graph after {} attempts; loosen node/edge/size ranges",
        cfg.attempts
    )))
}

fn inside(shape: Shape, u: f64, v: f64) -> bool {
    match shape {
        Shape::Square => true,
        Shape::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
        Shape::Triangle => v >= (2.0 * u - 1.0).abs(),
    }
}

/// Rasterizes a location-bound graph: shapes are painted largest first on a
/// gray background; a pixel belongs to a shape when its center does.
pub fn render(graph: &SceneGraph, vocab: &SynthVocab, size: usize) -> Result<Image> {
    if !graph.is_location_bound() {
        return Err(Error::Data("only location-bound graphs can be rendered".into()));
    }
    if size == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..graph.nodes().len()).collect();
    let area = |k: usize| graph.nodes()[k].bbox.expect("location-bound").area();
    order.sort_by(|&a, &b| area(b).total_cmp(&area(a)).then(a.cmp(&b)));
    let mut rgb = vec![BACKGROUND; size * size * 3];
    let s = size as f64;
    for k in order {
        let node = &graph.nodes()[k];
        let b = node.bbox.expect("location-bound");
        let (shape, color) = vocab.entity(node.entity);
        let y0 = ((b.y * s).floor() as usize).min(size);
        let y1 = ((b.bottom() * s).ceil() as usize).min(size);
        let x0 = ((b.x * s).floor() as usize).min(size);
        let x1 = ((b.right() * s).ceil() as usize).min(size);
        for py in y0..y1 {
            let v = ((py as f64 + 0.5) / s - b.y) / b.h;
            if !(0.0..1.0).contains(&v) {
                continue;
            }
            for px in x0..x1 {
                let u = ((px as f64 + 0.5) / s - b.x) / b.w;
                if (0.0..1.0).contains(&u) && inside(shape, u, v) {
                    rgb[(py * size + px) * 3..][..3].copy_from_slice(&color);
                }
            }
        }
    }
    Image::new(size, size, rgb.into_iter().map(|c| f64::from(c) / 255.0).collect())
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub id: String,
    pub graph: SceneGraph,
    pub image: Image,
}

/// `n` samples with distinct graphs. Sample `k` depends only on `seed` and
/// `k` (plus a retry counter when it collides with an earlier graph).
pub fn generate_samples(n: usize, seed: u64, vocab: &SynthVocab, cfg: &SynthConfig, size: usize) -> Result<Vec<SynthSample>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let mut seen = HashSet::new();
    let mut graphs = Vec::with_capacity(n);
    for k in 0..n {
        let mut retry = 0u64;
        loop {
            let g = generate_graph(&mut stream(seed, &[k as u64, retry]), vocab, cfg)?;
            let key = serde_json::to_string(&g)?;
            if seen.insert(key) {
                graphs.push(g);
                break;
            }
            retry += 1;
            if retry as usize > cfg.attempts {
                return Err(Error::Data(format!("could not find a distinct graph for sample {k}")));
            }
        }
    }
    graphs
        .into_par_iter()
        .enumerate()
        .map(|(k, graph)| {
            let image = render(&graph, vocab, size)?;
            Ok(SynthSample {
                id: format!("synth-{k:06}"),
                graph,
                image,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetLayout {
    pub vocab: PathBuf,
    pub train: PathBuf,
    pub gallery: PathBuf,
    pub images: PathBuf,
    pub train_count: usize,
    pub gallery_count: usize,
}

/// Number of samples withheld from training as the retrieval gallery.
pub fn gallery_size(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).min(n)
}

fn write_jsonl(path: &Path, samples: &[SynthSample], vocab: &Vocab) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for s in samples {
        let rec = s.graph.to_record(format!("{}.png", s.id), vocab);
        serde_json::to_writer(&mut file, &rec)?;
        file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    file.flush().map_err(|e| Error::io(path, e))
}

/// Writes `vocab.json`, `train.jsonl`, `gallery.jsonl` and `images/*.png`
/// under `out`. The last `gallery_fraction` of the samples form the gallery.
pub fn make_dataset(
    n: usize,
    seed: u64,
    vocab: &SynthVocab,
    cfg: &SynthConfig,
    size: usize,
    gallery_fraction: f64,
    out: &Path,
) -> Result<DatasetLayout> {
    if !(0.0..=1.0).contains(&gallery_fraction) {
        return Err(Error::Config(format!("gallery fraction {gallery_fraction} must lie in [0, 1]")));
    }
    let samples = generate_samples(n, seed, vocab, cfg, size)?;
    let images = out.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    samples
        .par_iter()
        .try_for_each(|s| s.image.save_png(&images.join(format!("{}.png", s.id))))?;
    let names = vocab.vocab();
    let layout = DatasetLayout {
        vocab: out.join("vocab.json"),
        train: out.join("train.jsonl"),
        gallery: out.join("gallery.jsonl"),
        images,
        gallery_count: gallery_size(n, gallery_fraction),
        train_count: n - gallery_size(n, gallery_fraction),
    };
    std::fs::write(&layout.vocab, names.to_json()).map_err(|e| Error::io(&layout.vocab, e))?;
    let (train, gallery) = samples.split_at(layout.train_count);
    write_jsonl(&layout.train, train, &names)?;
    write_jsonl(&layout.gallery, gallery, &names)?;
    Ok(layout)
}
