//! `gicon`: data generation, training, evaluation, gradient checking and
//! retrieval from one binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use gicon::dataset::load_pairs;
use gicon::eval::{evaluate, rank, EvalMode, EvalSettings, DEFAULT_TRIALS};
use gicon::gradcheck::{run_gradcheck, GradcheckConfig};
use gicon::graph::{parse_scene_graph, QueryMode, Vocab};
use gicon::imaging::Image;
use gicon::loss::similarity_matrix;
use gicon::manifest::{RunManifest, MANIFEST_FILE};
use gicon::model::Checkpoint;
use gicon::synth::{make_dataset, SynthConfig, SynthVocab, DEFAULT_GALLERY_FRACTION};
use gicon::train::{train, TrainConfig, FINAL_CHECKPOINT, LOG_FILE};
use gicon::{Error, Result};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_GRADCHECK: u8 = 5;

#[derive(Parser)]
#[command(name = "gicon", version, about = "Scene-graph/image contrastive alignment")]
struct Cli {
    /// Run everything on one thread; outputs are bit-identical either way.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Desk,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset.
    GenData {
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        /// Share of samples written to gallery.jsonl instead of train.jsonl.
        #[arg(long, default_value_t = DEFAULT_GALLERY_FRACTION)]
        gallery_fraction: f64,
    },
    /// Train both towers contrastively.
    Train {
        /// TOML file with TrainConfig keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Built-in settings the config file and flags are layered over.
        #[arg(long, value_enum, default_value_t = Preset::Default)]
        preset: Preset,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        images: PathBuf,
        /// Defaults to vocab.json next to the data file.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Override one config key, e.g. `--set epochs=5`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// R-Precision of graph queries against their images.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "10,50,100")]
        k: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: usize,
        /// lf, lb, node or edge.
        #[arg(long, default_value = "lf")]
        mode: EvalMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report path; a manifest is written beside it.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference check of every gradient at toy sizes.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 3)]
        batch: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Break one op's backward rule (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Rank a gallery of images against one query graph.
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A JSON scene-graph document, or a JSON Lines file (see --index).
        #[arg(long)]
        query: PathBuf,
        /// Record to use when the query file holds several.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Directory of .png or .tensor images.
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Drop boxes from the query.
        #[arg(long)]
        location_free: bool,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

enum Outcome {
    Done,
    GradcheckFailed,
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if cli.deterministic {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(1).build_global() {
            eprintln!("warning: could not restrict the thread pool: {e}");
        }
    }
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand required");
    match run(cli.command, sub, cli.deterministic) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::GradcheckFailed) => ExitCode::from(EXIT_GRADCHECK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Numeric(_) | Error::Tensor(_) => EXIT_NUMERIC,
        Error::Data(_) | Error::Graph(_) | Error::Io { .. } | Error::Json(_) | Error::Image(_) => EXIT_DATA,
    }
}

fn sources(m: &ArgMatches, ids: &[&str]) -> BTreeMap<String, String> {
    ids.iter()
        .map(|&id| {
            let src = match m.value_source(id) {
                Some(ValueSource::CommandLine) | Some(ValueSource::EnvVariable) => "flag",
                _ => "default",
            };
            (id.to_string(), src.to_string())
        })
        .collect()
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable")
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// `out/report.json` → `out/report.manifest.json`.
fn manifest_beside(report: &Path) -> PathBuf {
    let stem = report.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    report.with_file_name(format!("{stem}.manifest.json"))
}

fn run(command: Command, m: &ArgMatches, deterministic: bool) -> Result<Outcome> {
    match command {
        Command::GenData {
            n,
            seed,
            out,
            image_size,
            gallery_fraction,
        } => {
            let synth = SynthConfig::default();
            let layout = make_dataset(n, seed, &SynthVocab::default(), &synth, image_size, gallery_fraction, &out)?;
            let config = serde_json::json!({
                "n": n,
                "seed": seed,
                "image_size": image_size,
                "gallery_fraction": gallery_fraction,
            });
            let mut manifest = RunManifest::new("gen-data", seed, deterministic, config);
            manifest.config_sources = sources(m, &["n", "seed", "image_size", "gallery_fraction"]);
            manifest.outputs = vec![layout.vocab.clone(), layout.train.clone(), layout.gallery.clone(), layout.images.clone()];
            manifest.save(&out.join(MANIFEST_FILE))?;
            println!(
                "wrote {} training and {} gallery samples to {}",
                layout.train_count,
                layout.gallery_count,
                out.display()
            );
        }
        Command::Train {
            config,
            preset,
            data,
            images,
            vocab,
            out,
            seed,
            set,
        } => {
            let base = match preset {
                Preset::Default => TrainConfig::default(),
                Preset::Desk => TrainConfig::desk(),
                Preset::Full => TrainConfig::full_scale(),
            };
            let file_text = match &config {
                Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
                None => None,
            };
            let mut flags = set
                .iter()
                .map(|kv| {
                    kv.split_once('=')
                        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                        .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if let Some(s) = seed {
                flags.push(("seed".into(), s.to_string()));
            }
            let (cfg, config_sources) = TrainConfig::resolve(&base, file_text.as_deref(), &flags)?;
            cfg.validate()?;
            let vocab_path = vocab.unwrap_or_else(|| data.parent().unwrap_or(Path::new(".")).join("vocab.json"));
            let vocab = Vocab::load(&vocab_path)?;
            let pairs = load_pairs(&data, &images, &vocab)?;

            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let config_path = out.join("config.toml");
            std::fs::write(&config_path, cfg.to_toml()).map_err(|e| Error::io(&config_path, e))?;
            let mut manifest = RunManifest::new("train", cfg.seed, deterministic, to_json(&cfg));
            manifest.config_sources = config_sources;
            for input in [Some(&data), Some(&images), Some(&vocab_path), config.as_ref()].into_iter().flatten() {
                manifest.add_input(input)?;
            }
            manifest.outputs = vec![config_path, out.join(LOG_FILE), out.join(FINAL_CHECKPOINT)];
            let run = train(&cfg, &vocab, &pairs, Some(&out))?;
            for c in run.checkpoints {
                if !manifest.outputs.contains(&c) {
                    manifest.outputs.push(c);
                }
            }
            manifest.save(&out.join(MANIFEST_FILE))?;
            if let Some(last) = run.log.last() {
                println!(
                    "trained {} steps; final loss {:.4}, in-batch accuracy {:.3}",
                    last.step, last.loss, last.in_batch_acc
                );
            }
            println!("checkpoint: {}", out.join(FINAL_CHECKPOINT).display());
        }
        Command::Eval {
            checkpoint,
            data,
            images,
            k,
            trials,
            mode,
            seed,
            report,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let model = ck.restore()?;
            let pairs = load_pairs(&data, &images, &ck.vocab)?;
            let prepared = pairs.iter().map(|p| model.prepare_image(&p.image)).collect::<Result<Vec<_>>>()?;
            let gallery = model.embed_images(&prepared, !deterministic)?;
            let graphs: Vec<_> = pairs.iter().map(|p| p.graph.clone()).collect();
            let matches: Vec<usize> = (0..graphs.len()).collect();
            let settings = EvalSettings {
                ks: k.clone(),
                trials,
                seed,
                parallel: !deterministic,
            };
            let result = evaluate(&model, &graphs, &gallery, &matches, mode, &settings)?;
            for s in &result.scores {
                println!(
                    "{mode} K={:<4} R-Precision {:.4}  95% CI [{:.4}, {:.4}]  ({}/{})",
                    s.k, s.r_precision, s.ci_low, s.ci_high, s.successes, s.trials
                );
            }
            if let Some(path) = report {
                write_json(&path, &result)?;
                let config = serde_json::json!({ "k": k, "trials": trials, "mode": mode.to_string(), "seed": seed });
                let mut manifest = RunManifest::new("eval", seed, deterministic, config);
                manifest.config_sources = sources(m, &["k", "trials", "mode", "seed"]);
                for input in [&checkpoint, &data, &images] {
                    manifest.add_input(input)?;
                }
                manifest.outputs = vec![path.clone()];
                manifest.save(&manifest_beside(&path))?;
            }
        }
        Command::Gradcheck {
            dim,
            batch,
            layers,
            heads,
            seed,
            tolerance,
            report,
            corrupt,
        } => {
            let cfg = GradcheckConfig {
                model_dim: dim,
                batch_size: batch,
                layers,
                heads,
                seed,
                tolerance,
                ..GradcheckConfig::default()
            };
            let result = run_gradcheck(&cfg, corrupt.as_deref())?;
            for r in &result.results {
                let status = if r.passed { "ok" } else { "FAIL" };
                println!("{status:<4} {:<40} {:>7} entries  worst {:.3e}", r.name, r.entries, r.worst_rel_error);
            }
            println!("worst relative error {:.3e} (tolerance {:.0e})", result.worst_rel_error, result.tolerance);
            if let Some(path) = report {
                write_json(&path, &result)?;
                let config = serde_json::json!({
                    "dim": dim, "batch": batch, "layers": layers, "heads": heads,
                    "seed": seed, "tolerance": tolerance, "corrupt": corrupt,
                });
                let mut manifest = RunManifest::new("gradcheck", seed, deterministic, config);
                manifest.config_sources = sources(m, &["dim", "batch", "layers", "heads", "seed", "tolerance"]);
                manifest.outputs = vec![path.clone()];
                manifest.save(&manifest_beside(&path))?;
            }
            if !result.passed {
                let (ops, rest): (Vec<_>, Vec<_>) = result.failures().partition(|r| r.name.starts_with("op:"));
                let mut shown: Vec<&str> = ops.iter().chain(rest.iter()).take(5).map(|r| r.name.as_str()).collect();
                let total = ops.len() + rest.len();
                if total > shown.len() {
                    shown.push("...");
                }
                eprintln!("gradient check failed in {total} checks: {}", shown.join(", "));
                return Ok(Outcome::GradcheckFailed);
            }
        }
        Command::Retrieve {
            checkpoint,
            query,
            index,
            gallery,
            k,
            location_free,
            report,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let model = ck.restore()?;
            let mut graph = read_query(&query, index, &ck.vocab)?;
            if location_free {
                graph = graph.without_boxes();
            }
            let names = gallery_files(&gallery)?;
            let imgs = names
                .iter()
                .map(|n| model.prepare_image(&Image::load(&gallery.join(n))?))
                .collect::<Result<Vec<_>>>()?;
            let g = model.embed_graphs(std::slice::from_ref(&graph), QueryMode::Full, !deterministic)?;
            let i = model.embed_images(&imgs, !deterministic)?;
            let sim = similarity_matrix(&g, &i)?;
            let row = sim.data();
            let k = if k > names.len() {
                eprintln!("warning: k = {k} exceeds the gallery size; showing {}", names.len());
                names.len()
            } else {
                k
            };
            let order = rank(row);
            let entry = |&ix: &usize| Ranked {
                rank: order.iter().position(|&o| o == ix).expect("ranked") + 1,
                image: names[ix].clone(),
                similarity: row[ix],
            };
            let top: Vec<Ranked> = order[..k].iter().map(entry).collect();
            let bottom: Vec<Ranked> = order[order.len() - k..].iter().map(entry).collect();
            println!("top {k}:");
            for r in &top {
                println!("{:>5}  {:>+.6}  {}", r.rank, r.similarity, r.image);
            }
            println!("bottom {k}:");
            for r in &bottom {
                println!("{:>5}  {:>+.6}  {}", r.rank, r.similarity, r.image);
            }
            if let Some(path) = report {
                write_json(&path, &RetrievalList { gallery: names.len(), top, bottom })?;
                let config = serde_json::json!({ "index": index, "k": k, "location_free": location_free });
                let mut manifest = RunManifest::new("retrieve", 0, deterministic, config);
                manifest.config_sources = sources(m, &["index", "k", "location_free"]);
                for input in [&checkpoint, &query, &gallery] {
                    manifest.add_input(input)?;
                }
                manifest.outputs = vec![path.clone()];
                manifest.save(&manifest_beside(&path))?;
            }
        }
    }
    Ok(Outcome::Done)
}

#[derive(Serialize)]
struct Ranked {
    rank: usize,
    image: String,
    similarity: f64,
}

#[derive(Serialize)]
struct RetrievalList {
    gallery: usize,
    top: Vec<Ranked>,
    bottom: Vec<Ranked>,
}

fn read_query(path: &Path, index: usize, vocab: &Vocab) -> Result<gicon::graph::SceneGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: serde_json::Value = match serde_json::from_str(&text) {
        Ok(v) => v,
        Err(_) => {
            let line = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .nth(index)
                .ok_or_else(|| Error::Data(format!("{} has no record {index}", path.display())))?;
            serde_json::from_str(line)?
        }
    };
    parse_scene_graph(&doc, vocab).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Image file names in `dir`, sorted.
fn gallery_files(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if path.is_file() && (ext.eq_ignore_ascii_case("png") || ext == "tensor") {
            names.push(path.file_name().expect("file").to_string_lossy().into_owned());
        }
    }
    if names.is_empty() {
        return Err(Error::Data(format!("gallery {} contains no images", dir.display())));
    }
    names.sort();
    Ok(names)
}
