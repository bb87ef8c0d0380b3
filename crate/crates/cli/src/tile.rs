//! Cuts the training images into patches with labels and a manifest.

use std::fs::File;
use std::io::BufWriter;

use anyhow::{Context, Result};
use cadnet_core::ingest::{save_image, serialize_dota_annotation};
use cadnet_core::tiling::{crop_patch, plan_tiles, write_manifest, PatchRecord};

use crate::dataset::{load_corpus, Corpus};
use crate::experiment::ExperimentConfig;
use crate::train::{ChannelStats, STATS_FILE};

pub const PATCH_DIR: &str = "patches";
pub const MANIFEST: &str = "manifest.jsonl";

/// Writes `<id>_<k>.png` and `<id>_<k>.txt` per window plus `manifest.jsonl`
/// under `<out>/patches`, and the training channel statistics.
pub fn tile_with(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Vec<PatchRecord>> {
    let dir = cfg.out.join(PATCH_DIR);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut records = Vec::new();
    for s in &corpus.train {
        let (pixels, objects) = s.load(&corpus.vocab).with_context(|| format!("loading {}", s.id))?;
        let (h, w, _) = pixels.dim();
        let plan = plan_tiles(w as u32, h as u32, cfg.tiling.train_tile, cfg.tiling.train_overlap)?;
        for (k, window) in plan.windows.iter().enumerate() {
            let patch = crop_patch(&pixels, window, &objects);
            let name = format!("{}_{k:04}", s.id);
            save_image(&dir.join(format!("{name}.png")), &patch.pixels)?;
            std::fs::write(dir.join(format!("{name}.txt")), serialize_dota_annotation(&patch.annotations, &corpus.vocab))?;
            records.push(PatchRecord::new(&s.id, k, format!("{name}.png"), window));
        }
    }
    write_manifest(BufWriter::new(File::create(dir.join(MANIFEST))?), &records)?;
    std::fs::write(cfg.out.join(STATS_FILE), ChannelStats::of_corpus(corpus)?.to_text())?;
    Ok(records)
}

pub fn tile(cfg: &ExperimentConfig) -> Result<Vec<PatchRecord>> {
    tile_with(cfg, &load_corpus(cfg)?)
}
