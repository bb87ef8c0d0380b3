//! Train/test corpora for every dataset kind, and the conversions the
//! network needs.

use std::path::Path;

use anyhow::{Context, Result};
use cadnet_core::geometry::{quad_to_obb, BoxShape, Obb, Quad};
use cadnet_core::ingest::{
    load_image, parse_dota_annotation, parse_nwpu_annotation, split_nwpu, AnnotatedObject, AnnotationShape,
    ClassVocabulary, DatasetIndex, ImageRecord, Split,
};
use cadnet_core::evaluation::EvalGroundTruth;
use cadnet_core::targets::GroundTruth;
use cadnet_nn::Tensor;
use ndarray::Array3;

use crate::experiment::{DatasetKind, ExperimentConfig};
use crate::synthetic;

#[derive(Debug, Clone)]
enum Source {
    Memory { pixels: Array3<u8>, objects: Vec<AnnotatedObject> },
    File { record: ImageRecord, nwpu: bool },
}

/// One image, loaded on demand.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    source: Source,
}

impl Sample {
    pub fn in_memory(id: String, pixels: Array3<u8>, objects: Vec<AnnotatedObject>) -> Self {
        Self { id, source: Source::Memory { pixels, objects } }
    }

    pub fn load(&self, vocab: &ClassVocabulary) -> Result<(Array3<u8>, Vec<AnnotatedObject>)> {
        match &self.source {
            Source::Memory { pixels, objects } => Ok((pixels.clone(), objects.clone())),
            Source::File { record, nwpu } => {
                let pixels = load_image(&record.image_path)?;
                let path = &record.annotation_path;
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let objects = if *nwpu {
                    parse_nwpu_annotation(&text, vocab)
                } else {
                    parse_dota_annotation(&text, vocab)
                }
                .with_context(|| format!("parsing {}", path.display()))?;
                Ok((pixels, objects))
            }
        }
    }
}

pub struct Corpus {
    pub vocab: ClassVocabulary,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn from_index(index: &DatasetIndex, nwpu: bool) -> Vec<Sample> {
    index
        .records
        .iter()
        .map(|r| Sample { id: r.image_id(), source: Source::File { record: r.clone(), nwpu } })
        .collect()
}

fn scan_dota_split(root: &Path, name: &str, split: Split) -> Result<Vec<Sample>> {
    let dir = root.join(name);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    Ok(from_index(&DatasetIndex::scan_dota(&dir, split)?, false))
}

pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    match cfg.kind {
        DatasetKind::Synthetic => {
            let images = synthetic::generate(&cfg.synthetic);
            let n_test = (images.len() as f64 * cfg.synthetic.test_fraction).round() as usize;
            let n_train = images.len() - n_test;
            let mut samples: Vec<Sample> =
                images.into_iter().map(|s| Sample::in_memory(s.id, s.pixels, s.objects)).collect();
            let test = samples.split_off(n_train);
            Ok(Corpus { vocab: synthetic::vocabulary(), train: samples, test })
        }
        DatasetKind::Dota => {
            let root = cfg.root.as_deref().context("dataset.root is required")?;
            Ok(Corpus {
                vocab: ClassVocabulary::dota(),
                train: scan_dota_split(root, "train", Split::Train)?,
                test: scan_dota_split(root, "val", Split::Val)?,
            })
        }
        DatasetKind::Nwpu => {
            let root = cfg.root.as_deref().context("dataset.root is required")?;
            let index = DatasetIndex::scan_nwpu(root)?;
            let (train, test) = split_nwpu(&index, cfg.train_fraction, cfg.seed)?;
            Ok(Corpus { vocab: ClassVocabulary::nwpu(), train: from_index(&train, true), test: from_index(&test, true) })
        }
    }
}

/// Normalized `H x W x 3` pixels as a `[3, H, W]` tensor.
pub fn to_tensor(pixels: &Array3<f32>) -> Tensor<f32> {
    let (h, w, _) = pixels.dim();
    let mut data = vec![0.0; 3 * h * w];
    for ((y, x, c), &v) in pixels.indexed_iter() {
        data[(c * h + y) * w + x] = v;
    }
    Tensor::new(vec![3, h, w], data)
}

/// Oriented box of an annotation; horizontal boxes become `theta = 0`.
pub fn annotation_obb(shape: &AnnotationShape) -> Option<Obb> {
    match shape {
        AnnotationShape::Quad(q) => quad_to_obb(q).ok(),
        AnnotationShape::Hbb(h) => {
            let c = h.center();
            Obb::new(c.x, c.y, h.width(), h.height(), 0.0).ok()
        }
    }
}

/// Training targets; difficult objects are left out.
pub fn ground_truth(objects: &[AnnotatedObject]) -> Vec<GroundTruth> {
    objects
        .iter()
        .filter(|o| !o.difficult)
        .filter_map(|o| annotation_obb(&o.shape).map(|b| GroundTruth::from_obb(b, o.class_id)))
        .collect()
}

/// Ground truth for scoring: quadrilaterals for the oriented task, their
/// enclosing boxes for the horizontal one.
pub fn eval_ground_truth(objects: &[AnnotatedObject], oriented: bool) -> Vec<EvalGroundTruth> {
    objects
        .iter()
        .map(|o| {
            let quad: Quad = match o.shape {
                AnnotationShape::Quad(q) => q,
                AnnotationShape::Hbb(h) => h.to_quad(),
            };
            let shape = if oriented { BoxShape::Quad(quad) } else { BoxShape::Hbb(quad.to_hbb()) };
            EvalGroundTruth { shape, class_id: o.class_id, difficult: o.difficult }
        })
        .collect()
}

/// Mirrors a patch and its annotations left-right and/or top-bottom.
pub fn flip(pixels: &mut Array3<u8>, objects: &mut [AnnotatedObject], horizontal: bool, vertical: bool) {
    let (h, w, _) = pixels.dim();
    if horizontal {
        pixels.invert_axis(ndarray::Axis(1));
    }
    if vertical {
        pixels.invert_axis(ndarray::Axis(0));
    }
    let (fw, fh) = (w as f64, h as f64);
    let map = |x: f64, y: f64| (if horizontal { fw - x } else { x }, if vertical { fh - y } else { y });
    for o in objects {
        o.shape = match o.shape {
            AnnotationShape::Quad(q) => {
                let mut c = q.coords();
                for p in c.chunks_mut(2) {
                    let (x, y) = map(p[0], p[1]);
                    p[0] = x;
                    p[1] = y;
                }
                match Quad::from_coords(c) {
                    Ok(q) => AnnotationShape::Quad(q),
                    Err(_) => continue,
                }
            }
            AnnotationShape::Hbb(b) => {
                let (x0, y0) = map(b.xmin, b.ymin);
                let (x1, y1) = map(b.xmax, b.ymax);
                match cadnet_core::geometry::Hbb::new(x0.min(x1), y0.min(y1), x0.max(x1), y0.max(y1)) {
                    Ok(b) => AnnotationShape::Hbb(b),
                    Err(_) => continue,
                }
            }
        };
    }
}
