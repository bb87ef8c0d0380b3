#![allow(dead_code)]

use std::path::Path;

use cadnet_cli::ExperimentConfig;
use cadnet_core::geometry::{Point, Quad};
use cadnet_core::ingest::{save_image, serialize_dota_annotation, AnnotatedObject, AnnotationShape, ClassVocabulary};
use ndarray::Array3;

/// A small synthetic experiment that trains in well under a second per
/// iteration.
pub const TINY: &str = "\
seed = 11
[synthetic]
images = 10
size = 64
test_fraction = 0.2
min_objects = 1
max_objects = 3
min_length = 12
max_length = 28
[model]
backbone_widths = 8, 8, 12, 16, 16
fpn_dim = 8
gcnet_dim = 8
attention_hidden = 4
head_hidden = 16
anchor_sizes = 16, 32, 64, 128
rpn_pre_nms_train = 200
rpn_post_nms_train = 32
rpn_pre_nms_test = 100
rpn_post_nms_test = 16
head_batch = 16
rpn_batch = 32
[optim]
lr = 0.005
iterations = 5
warmup = 2
";

pub fn tiny(out: &Path) -> ExperimentConfig {
    let text = format!("out = {}\n{TINY}", out.display());
    ExperimentConfig::parse(&text, out).unwrap()
}

pub fn dota_config(root: &Path, out: &Path, tile: u32, overlap: u32) -> ExperimentConfig {
    let text = format!(
        "out = {}\n[dataset]\nkind = dota\nroot = {}\n[tiling]\ntrain_tile = {tile}\ntrain_overlap = {overlap}\n",
        out.display(),
        root.display()
    );
    ExperimentConfig::parse(&text, root).unwrap()
}

pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Quad {
    Quad::new([Point::new(x0, y0), Point::new(x1, y0), Point::new(x1, y1), Point::new(x0, y1)]).unwrap()
}

/// Writes `<root>/train/images/<id>.png` and its label file with a few
/// rectangles scattered over the image.
pub fn dota_image(root: &Path, id: &str, width: usize, height: usize) -> Vec<AnnotatedObject> {
    let images = root.join("train/images");
    let labels = root.join("train/labelTxt");
    std::fs::create_dir_all(&images).unwrap();
    std::fs::create_dir_all(&labels).unwrap();
    let pixels = Array3::from_shape_fn((height, width, 3), |(y, x, c)| ((x / 7 + y / 5 + 40 * c) % 251) as u8);
    save_image(&images.join(format!("{id}.png")), &pixels).unwrap();
    let objects: Vec<AnnotatedObject> = (0..4)
        .map(|k| {
            let x = (width as f64 - 60.0) * k as f64 / 4.0 + 10.0;
            let y = (height as f64 - 60.0) * (3 - k) as f64 / 4.0 + 10.0;
            AnnotatedObject { shape: AnnotationShape::Quad(rect(x, y, x + 40.0, y + 20.0)), class_id: k, difficult: false }
        })
        .collect();
    std::fs::write(labels.join(format!("{id}.txt")), serialize_dota_annotation(&objects, &ClassVocabulary::dota())).unwrap();
    objects
}
