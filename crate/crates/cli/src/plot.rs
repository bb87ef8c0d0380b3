//! Detection overlays and attention heatmaps as PNG files.

use std::path::{Path, PathBuf};

use anyhow::{ensure, Result};
use cadnet_core::evaluation::read_detection_files;
use cadnet_core::geometry::{BoxKind, ScoredDetection};
use cadnet_core::ingest::save_image;
use cadnet_nn::{Detector, Tensor};
use ndarray::Array3;

use crate::dataset::load_corpus;
use crate::experiment::ExperimentConfig;
use crate::infer::{load_detector, stats_for, DETECTION_DIR};

pub const PLOT_DIR: &str = "plots";

const PALETTE: [[u8; 3]; 8] = [
    [255, 64, 64],
    [64, 255, 64],
    [64, 128, 255],
    [255, 224, 32],
    [255, 64, 255],
    [32, 255, 255],
    [255, 144, 32],
    [255, 255, 255],
];

pub fn class_color(class_id: usize) -> [u8; 3] {
    PALETTE[class_id % PALETTE.len()]
}

fn put(img: &mut Array3<u8>, x: i64, y: i64, color: [u8; 3]) {
    let (h, w, _) = img.dim();
    if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
        for c in 0..3 {
            img[[y as usize, x as usize, c]] = color[c];
        }
    }
}

/// Bresenham line; pixels outside the image are skipped.
pub fn draw_line(img: &mut Array3<u8>, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, color);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// A copy of `pixels` with every detection's quadrilateral outlined in its
/// class colour. Vertices land on the rounded detection coordinates.
pub fn overlay(pixels: &Array3<u8>, dets: &[ScoredDetection]) -> Array3<u8> {
    let mut img = pixels.clone();
    for d in dets {
        let v = d.shape.to_quad().vertices().map(|p| (p.x.round() as i64, p.y.round() as i64));
        for i in 0..4 {
            draw_line(&mut img, v[i], v[(i + 1) % 4], class_color(d.class_id));
        }
    }
    img
}

/// Grey-level rendering of a `[1, H, W]` map in `[0, 1]`, enlarged by
/// pixel repetition to `scale` times its size.
pub fn heatmap(map: &Tensor<f32>, scale: usize) -> Array3<u8> {
    let (_, h, w) = map.chw();
    Array3::from_shape_fn((h * scale, w * scale, 3), |(y, x, _)| {
        (map.data[(y / scale) * w + x / scale].clamp(0.0, 1.0) * 255.0).round() as u8
    })
}

/// Attention maps `S_2..S_5` of one normalized image, each scaled back to
/// the input size.
pub fn attention_maps(det: &Detector, image: &Tensor<f32>) -> Result<Vec<Array3<u8>>> {
    let py = det.pyramid(det.params.tensors(), image)?;
    Ok(py.s.iter().zip([4, 8, 16, 32]).map(|(s, stride)| heatmap(s, stride)).collect())
}

/// Overlays for the test images with detection files under
/// `<out>/detections`, and attention heatmaps when a checkpoint of an
/// attention model is given. Returns the written paths.
pub fn plot(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Vec<PathBuf>> {
    let corpus = load_corpus(cfg)?;
    let det_dir = cfg.out.join(DETECTION_DIR);
    ensure!(det_dir.is_dir(), "no detections in {}; run infer first", det_dir.display());
    let dets = read_detection_files(&det_dir, BoxKind::Oriented, &corpus.vocab)?;
    let dir = cfg.out.join(PLOT_DIR);
    std::fs::create_dir_all(&dir)?;
    let model = match checkpoint {
        Some(p) if cfg.model.switches.attention => Some((load_detector(cfg, corpus.vocab.len(), p)?, stats_for(p, &corpus)?)),
        _ => None,
    };
    let mut written = Vec::new();
    for s in corpus.test.iter().take(cfg.plot_images) {
        let (pixels, _) = s.load(&corpus.vocab)?;
        let path = dir.join(format!("{}_obb.png", s.id));
        save_image(&path, &overlay(&pixels, dets.get(&s.id).map_or(&[][..], Vec::as_slice)))?;
        written.push(path);
        if let Some((det, stats)) = &model {
            let (h, w, _) = pixels.dim();
            if h % 32 == 0 && w % 32 == 0 {
                for (level, map) in attention_maps(det, &stats.normalize(&pixels)?)?.iter().enumerate() {
                    let path = dir.join(format!("{}_attention_p{}.png", s.id, level + 2));
                    save_image(&path, map)?;
                    written.push(path);
                }
            }
        }
    }
    Ok(written)
}
