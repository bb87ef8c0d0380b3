//! Overlapping crops of large images and the reverse mapping of patch
//! detections back to image coordinates.

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    clip_convex, min_area_rect, obb_to_quad, rotated_nms, GeometryError, Point, Quad,
    ScoredDetection, AREA_EPSILON,
};
use crate::ingest::{AnnotatedObject, AnnotationShape};

#[derive(Debug, Error)]
pub enum TilingError {
    #[error("tile size {tile} must exceed overlap {overlap}")]
    StrideNotPositive { tile: u32, overlap: u32 },
    #[error("image size {width}x{height} must be at least 1x1")]
    EmptyImage { width: u32, height: u32 },
    #[error("channel {channel} has non-positive std {std}")]
    ZeroStd { channel: usize, std: f32 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("manifest line {line}: {source}")]
    Manifest {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TilingError>;

/// One crop. `width`/`height` are the tile size; the last `pad_right`
/// columns and `pad_bottom` rows are zero fill beyond the image edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileWindow {
    pub x_offset: u32,
    pub y_offset: u32,
    pub width: u32,
    pub height: u32,
    pub pad_right: u32,
    pub pad_bottom: u32,
}

impl TileWindow {
    /// A window that maps coordinates onto themselves.
    pub fn identity() -> Self {
        Self {
            x_offset: 0,
            y_offset: 0,
            width: u32::MAX,
            height: u32::MAX,
            pad_right: 0,
            pad_bottom: 0,
        }
    }

    pub fn valid_width(&self) -> u32 {
        self.width - self.pad_right
    }

    pub fn valid_height(&self) -> u32 {
        self.height - self.pad_bottom
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x_offset
            && y >= self.y_offset
            && x - self.x_offset < self.valid_width()
            && y - self.y_offset < self.valid_height()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePlan {
    pub image_width: u32,
    pub image_height: u32,
    pub tile_size: u32,
    pub overlap: u32,
    /// Row-major.
    pub windows: Vec<TileWindow>,
}

impl TilePlan {
    pub fn stride(&self) -> u32 {
        self.tile_size - self.overlap
    }
}

/// `(offset, pad)` pairs along one axis.
fn axis_offsets(len: u32, tile: u32, stride: u32) -> Vec<(u32, u32)> {
    if len <= tile {
        return vec![(0, tile - len)];
    }
    let last_full = (len - tile) / stride;
    let mut offsets: Vec<u32> = (0..=last_full).map(|k| k * stride).collect();
    let flush = len - tile;
    if last_full * stride < flush {
        // Pull the last window flush with the edge when its predecessor still
        // reaches it; otherwise add one more window.
        if last_full >= 1 && (last_full - 1) * stride + tile >= flush {
            *offsets.last_mut().unwrap() = flush;
        } else {
            offsets.push(flush);
        }
    }
    offsets.into_iter().map(|o| (o, 0)).collect()
}

pub fn plan_tiles(width: u32, height: u32, tile_size: u32, overlap: u32) -> Result<TilePlan> {
    if tile_size <= overlap {
        return Err(TilingError::StrideNotPositive { tile: tile_size, overlap });
    }
    if width == 0 || height == 0 {
        return Err(TilingError::EmptyImage { width, height });
    }
    let stride = tile_size - overlap;
    let xs = axis_offsets(width, tile_size, stride);
    let ys = axis_offsets(height, tile_size, stride);
    let windows = ys
        .iter()
        .flat_map(|&(y, pad_bottom)| {
            xs.iter().map(move |&(x, pad_right)| TileWindow {
                x_offset: x,
                y_offset: y,
                width: tile_size,
                height: tile_size,
                pad_right,
                pad_bottom,
            })
        })
        .collect();
    Ok(TilePlan {
        image_width: width,
        image_height: height,
        tile_size,
        overlap,
        windows,
    })
}

#[derive(Debug, Clone)]
pub struct PatchSample {
    /// `tile x tile x 3`, zero beyond the image.
    pub pixels: Array3<u8>,
    pub window: TileWindow,
    /// Patch coordinates.
    pub annotations: Vec<AnnotatedObject>,
}

fn shape_center(shape: &AnnotationShape) -> Point {
    match shape {
        AnnotationShape::Quad(q) => q.center(),
        AnnotationShape::Hbb(h) => h.center(),
    }
}

/// Clips a quad to `[0, size]^2`. Quads that stick out are clipped and
/// refitted with a minimum-area rectangle; `None` when nothing usable is left.
fn clip_quad(q: &Quad, size: f64) -> Option<Quad> {
    let inside = q
        .vertices()
        .iter()
        .all(|p| (0.0..=size).contains(&p.x) && (0.0..=size).contains(&p.y));
    if inside {
        return Some(*q);
    }
    let square = [
        Point::new(0.0, 0.0),
        Point::new(size, 0.0),
        Point::new(size, size),
        Point::new(0.0, size),
    ];
    let clipped = clip_convex(q.vertices(), &square);
    let rect = min_area_rect(&clipped).ok()?;
    let corners = obb_to_quad(&rect)
        .vertices()
        .map(|p| Point::new(p.x.clamp(0.0, size), p.y.clamp(0.0, size)));
    let quad = Quad::new(corners).ok()?;
    (quad.area() > AREA_EPSILON).then_some(quad)
}

/// Copies one window out of `image` (`H x W x 3`) and keeps the annotations
/// whose center falls inside the unpadded part of the window.
pub fn crop_patch(image: &Array3<u8>, window: &TileWindow, annotations: &[AnnotatedObject]) -> PatchSample {
    let (h, w, c) = image.dim();
    let mut pixels = Array3::<u8>::zeros((window.height as usize, window.width as usize, c));
    let x0 = window.x_offset as usize;
    let y0 = window.y_offset as usize;
    let cw = (window.width as usize).min(w.saturating_sub(x0));
    let ch = (window.height as usize).min(h.saturating_sub(y0));
    pixels
        .slice_mut(s![..ch, ..cw, ..])
        .assign(&image.slice(s![y0..y0 + ch, x0..x0 + cw, ..]));

    let (fx, fy) = (window.x_offset as f64, window.y_offset as f64);
    let size = window.width.min(window.height) as f64;
    let kept = annotations
        .iter()
        .filter(|a| {
            let p = shape_center(&a.shape);
            p.x >= fx
                && p.y >= fy
                && p.x < fx + window.valid_width() as f64
                && p.y < fy + window.valid_height() as f64
        })
        .filter_map(|a| {
            let shape = match a.shape {
                AnnotationShape::Hbb(b) => AnnotationShape::Hbb(b.translate(-fx, -fy).clip(size, size)),
                AnnotationShape::Quad(q) => AnnotationShape::Quad(clip_quad(&q.translate(-fx, -fy), size)?),
            };
            Some(AnnotatedObject { shape, ..*a })
        })
        .collect();
    PatchSample {
        pixels,
        window: *window,
        annotations: kept,
    }
}

/// Per-channel `(value - mean) / std`.
pub fn normalize_contrast(image: &Array3<u8>, means: [f32; 3], stds: [f32; 3]) -> Result<Array3<f32>> {
    for (channel, &std) in stds.iter().enumerate() {
        if std.is_nan() || std <= 0.0 {
            return Err(TilingError::ZeroStd { channel, std });
        }
    }
    let mut out = image.mapv(f32::from);
    for (c, mut plane) in out.axis_iter_mut(ndarray::Axis(2)).enumerate() {
        plane.mapv_inplace(|v| (v - means[c]) / stds[c]);
    }
    Ok(out)
}

/// Per-channel mean and standard deviation over a set of images.
pub fn channel_statistics<'a>(images: impl IntoIterator<Item = &'a Array3<u8>>) -> ([f32; 3], [f32; 3]) {
    let mut sum = [0f64; 3];
    let mut sq = [0f64; 3];
    let mut n = 0u64;
    for img in images {
        for px in img.rows() {
            for c in 0..3 {
                let v = px[c] as f64;
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        n += (img.len() / 3) as u64;
    }
    let mut means = [0f32; 3];
    let mut stds = [1f32; 3];
    if n > 0 {
        for c in 0..3 {
            let m = sum[c] / n as f64;
            let var = (sq[c] / n as f64 - m * m).max(0.0);
            means[c] = m as f32;
            stds[c] = if var > 0.0 { var.sqrt() as f32 } else { 1.0 };
        }
    }
    (means, stds)
}

/// Maps per-patch detections into image coordinates and removes cross-patch
/// duplicates with class-wise NMS. Detections lying wholly in a window's
/// zero padding are discarded first.
pub fn stitch_detections(
    per_patch: &[(TileWindow, Vec<ScoredDetection>)],
    iou_threshold: f64,
) -> Result<Vec<ScoredDetection>> {
    let mut all = Vec::new();
    for (window, dets) in per_patch {
        let (vw, vh) = (window.valid_width() as f64, window.valid_height() as f64);
        for d in dets {
            let hbb = d.shape.to_hbb();
            if hbb.xmin >= vw || hbb.ymin >= vh {
                continue;
            }
            all.push(ScoredDetection {
                shape: d.shape.translate(window.x_offset as f64, window.y_offset as f64),
                ..*d
            });
        }
    }
    let kept = rotated_nms(&all, iou_threshold)?;
    Ok(kept.into_iter().map(|i| all[i]).collect())
}

/// One line of the patch manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub image_id: String,
    pub patch_index: usize,
    pub patch_file: String,
    pub x_offset: u32,
    pub y_offset: u32,
    pub width: u32,
    pub height: u32,
    pub pad_right: u32,
    pub pad_bottom: u32,
}

impl PatchRecord {
    pub fn new(image_id: &str, patch_index: usize, patch_file: String, w: &TileWindow) -> Self {
        Self {
            image_id: image_id.to_owned(),
            patch_index,
            patch_file,
            x_offset: w.x_offset,
            y_offset: w.y_offset,
            width: w.width,
            height: w.height,
            pad_right: w.pad_right,
            pad_bottom: w.pad_bottom,
        }
    }

    pub fn window(&self) -> TileWindow {
        TileWindow {
            x_offset: self.x_offset,
            y_offset: self.y_offset,
            width: self.width,
            height: self.height,
            pad_right: self.pad_right,
            pad_bottom: self.pad_bottom,
        }
    }
}

/// Newline-delimited JSON, one record per patch.
pub fn write_manifest(mut out: impl Write, records: &[PatchRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_manifest(input: impl BufRead) -> Result<Vec<PatchRecord>> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|source| TilingError::Manifest { line: i + 1, source })?);
    }
    Ok(records)
}

pub fn read_manifest_file(path: &Path) -> Result<Vec<PatchRecord>> {
    read_manifest(std::io::BufReader::new(std::fs::File::open(path)?))
}
