//! Tiled inference over the test split and submission-style output files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cadnet_core::evaluation::write_detection_files;
use cadnet_core::geometry::{BoxKind, ScoredDetection};
use cadnet_core::tiling::{crop_patch, plan_tiles, stitch_detections};
use cadnet_nn::{checkpoint, Detector};
use ndarray::Array3;

use crate::dataset::{load_corpus, Corpus};
use crate::experiment::ExperimentConfig;
use crate::train::{ChannelStats, STATS_FILE};

pub const DETECTION_DIR: &str = "detections";

pub type DetectionMap = BTreeMap<String, Vec<ScoredDetection>>;

#[derive(Debug, Clone, Default)]
pub struct InferOutput {
    pub obb: DetectionMap,
    pub hbb: DetectionMap,
    pub dir: PathBuf,
}

/// A detector built from the experiment's model settings with weights from
/// `path`.
pub fn load_detector(cfg: &ExperimentConfig, num_classes: usize, path: &Path) -> Result<Detector> {
    let mut model = cfg.model.clone();
    model.num_classes = num_classes;
    let mut det = Detector::new(model, cfg.seed);
    let loaded = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    checkpoint::restore(&mut det.params, &loaded).with_context(|| format!("checkpoint {} does not fit the model", path.display()))?;
    Ok(det)
}

/// Statistics saved next to the checkpoint, or recomputed from the training
/// split when absent.
pub fn stats_for(checkpoint: &Path, corpus: &Corpus) -> Result<ChannelStats> {
    let saved = checkpoint.parent().unwrap_or(Path::new(".")).join(STATS_FILE);
    if saved.is_file() {
        ChannelStats::read(&saved)
    } else {
        ChannelStats::of_corpus(corpus)
    }
}

/// Oriented and horizontal detections for one whole image, tiled with
/// `tile`/`overlap` and stitched back together.
pub fn detect_image(
    det: &Detector,
    stats: &ChannelStats,
    pixels: &Array3<u8>,
    tile: u32,
    overlap: u32,
) -> Result<(Vec<ScoredDetection>, Vec<ScoredDetection>)> {
    let (h, w, _) = pixels.dim();
    let plan = plan_tiles(w as u32, h as u32, tile, overlap)?;
    let mut obb = Vec::with_capacity(plan.windows.len());
    let mut hbb = Vec::with_capacity(plan.windows.len());
    for window in &plan.windows {
        let patch = crop_patch(pixels, window, &[]);
        let d = det.detect(&stats.normalize(&patch.pixels)?)?;
        obb.push((*window, d.obb));
        hbb.push((*window, d.hbb));
    }
    let thr = det.config.nms_threshold;
    Ok((stitch_detections(&obb, thr)?, stitch_detections(&hbb, thr)?))
}

pub fn infer_with(cfg: &ExperimentConfig, corpus: &Corpus, det: &Detector, stats: &ChannelStats) -> Result<InferOutput> {
    let mut out = InferOutput { dir: cfg.out.join(DETECTION_DIR), ..InferOutput::default() };
    for s in &corpus.test {
        let (pixels, _) = s.load(&corpus.vocab)?;
        let (o, h) = detect_image(det, stats, &pixels, cfg.tiling.infer_tile, cfg.tiling.infer_overlap)?;
        out.obb.insert(s.id.clone(), o);
        out.hbb.insert(s.id.clone(), h);
    }
    write_detection_files(&out.dir, BoxKind::Oriented, &corpus.vocab, &out.obb)?;
    write_detection_files(&out.dir, BoxKind::Horizontal, &corpus.vocab, &out.hbb)?;
    Ok(out)
}

/// Runs the checkpoint over every test image and writes `Task1_*` and
/// `Task2_*` files under `<out>/detections`.
pub fn infer(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<InferOutput> {
    let corpus = load_corpus(cfg)?;
    let det = load_detector(cfg, corpus.vocab.len(), checkpoint)?;
    let stats = stats_for(checkpoint, &corpus)?;
    infer_with(cfg, &corpus, &det, &stats)
}
