//! Paired (scene graph, image) samples read from a JSON Lines file and an
//! image directory.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{read_records, SceneGraph, Vocab};
use crate::imaging::Image;

#[derive(Debug, Clone)]
pub struct Pair {
    /// The record's image file name, used as the sample id.
    pub id: String,
    pub graph: SceneGraph,
    pub image: Image,
}

/// Reads every record of `jsonl`, validating graphs against `vocab` and
/// loading each record's image from `images`.
pub fn load_pairs(jsonl: &Path, images: &Path, vocab: &Vocab) -> Result<Vec<Pair>> {
    let records = read_records(jsonl)?;
    if records.is_empty() {
        return Err(Error::Data(format!("{} contains no samples", jsonl.display())));
    }
    records
        .par_iter()
        .enumerate()
        .map(|(line, rec)| {
            let graph = rec
                .to_graph(vocab)
                .map_err(|e| Error::Data(format!("{} record {}: {e}", jsonl.display(), line + 1)))?;
            if rec.image.is_empty() {
                return Err(Error::Data(format!("{} record {} names no image", jsonl.display(), line + 1)));
            }
            let image = Image::load(&images.join(&rec.image))?;
            Ok(Pair {
                id: rec.image.clone(),
                graph,
                image,
            })
        })
        .collect()
}

/// Reads graphs only (queries without images).
pub fn load_graphs(jsonl: &Path, vocab: &Vocab) -> Result<Vec<SceneGraph>> {
    read_records(jsonl)?
        .iter()
        .enumerate()
        .map(|(line, rec)| {
            rec.to_graph(vocab)
                .map_err(|e| Error::Data(format!("{} record {}: {e}", jsonl.display(), line + 1)))
        })
        .collect()
}
