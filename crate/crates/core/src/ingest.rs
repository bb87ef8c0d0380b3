//! Annotation parsing for DOTA (quadrilaterals) and NWPU VHR-10 (horizontal
//! boxes), class vocabularies, dataset indices and train/test splits.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{GeometryError, Hbb, Quad, AREA_EPSILON};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: unknown class `{name}`")]
    UnknownClass { line: usize, name: String },
    #[error("line {line}: malformed annotation: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: {source}")]
    Geometry {
        line: usize,
        #[source]
        source: GeometryError,
    },
    #[error("line {line}: class index {index} outside [1, {max}]")]
    ClassIndexOutOfRange { line: usize, index: i64, max: usize },
    #[error("duplicate class name `{0}`")]
    DuplicateClass(String),
    #[error("train fraction {0} outside (0, 1)")]
    InvalidFraction(f64),
    #[error("{path}: {reason}")]
    Dataset { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, IngestError>;

pub const DOTA_CLASSES: [&str; 15] = [
    "plane",
    "baseball-diamond",
    "bridge",
    "ground-track-field",
    "small-vehicle",
    "large-vehicle",
    "ship",
    "tennis-court",
    "basketball-court",
    "storage-tank",
    "soccer-ball-field",
    "roundabout",
    "harbor",
    "swimming-pool",
    "helicopter",
];

pub const NWPU_CLASSES: [&str; 10] = [
    "plane",
    "ship",
    "storage-tank",
    "baseball-diamond",
    "tennis-court",
    "basketball-court",
    "ground-track-field",
    "harbor",
    "bridge",
    "vehicle",
];

/// Ordered class names with reverse lookup. Ids are positions in the list.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassVocabulary {
    names: Vec<String>,
    ids: HashMap<String, usize>,
}

impl ClassVocabulary {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut ids = HashMap::with_capacity(names.len());
        let names: Vec<String> = names.iter().map(|s| s.as_ref().to_owned()).collect();
        for (i, n) in names.iter().enumerate() {
            if ids.insert(n.clone(), i).is_some() {
                return Err(IngestError::DuplicateClass(n.clone()));
            }
        }
        Ok(Self { names, ids })
    }

    pub fn dota() -> Self {
        Self::new(&DOTA_CLASSES).expect("static vocabulary is unique")
    }

    pub fn nwpu() -> Self {
        Self::new(&NWPU_CLASSES).expect("static vocabulary is unique")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.ids.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnnotationShape {
    Quad(Quad),
    Hbb(Hbb),
}

impl AnnotationShape {
    pub fn to_hbb(&self) -> Hbb {
        match self {
            AnnotationShape::Quad(q) => q.to_hbb(),
            AnnotationShape::Hbb(h) => *h,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnotatedObject {
    pub shape: AnnotationShape,
    pub class_id: usize,
    pub difficult: bool,
}

fn malformed(line: usize, reason: impl Into<String>) -> IngestError {
    IngestError::Malformed { line, reason: reason.into() }
}

/// Parses a DOTA label file.
///
/// Metadata lines starting with `imagesource` or `gsd` and blank lines are
/// skipped. Every other line must read
/// `x1 y1 x2 y2 x3 y3 x4 y4 category difficult`.
pub fn parse_dota_annotation(text: &str, vocab: &ClassVocabulary) -> Result<Vec<AnnotatedObject>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with("imagesource") || trimmed.starts_with("gsd") {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 10 {
            return Err(malformed(line, format!("expected 10 fields, found {}", fields.len())));
        }
        let mut coords = [0.0f64; 8];
        for (c, f) in coords.iter_mut().zip(&fields[..8]) {
            *c = f
                .parse()
                .map_err(|_| malformed(line, format!("bad coordinate `{f}`")))?;
        }
        let class_id = vocab.id(fields[8]).ok_or_else(|| IngestError::UnknownClass {
            line,
            name: fields[8].to_owned(),
        })?;
        let difficult = match fields[9] {
            "0" => false,
            "1" => true,
            other => return Err(malformed(line, format!("bad difficult flag `{other}`"))),
        };
        let quad = Quad::from_coords(coords).map_err(|source| IngestError::Geometry { line, source })?;
        let area = quad.area();
        if area <= AREA_EPSILON {
            return Err(IngestError::Geometry {
                line,
                source: GeometryError::DegenerateQuad { area },
            });
        }
        out.push(AnnotatedObject {
            shape: AnnotationShape::Quad(quad),
            class_id,
            difficult,
        });
    }
    Ok(out)
}

/// Writes objects back in DOTA label format with one decimal per coordinate.
/// Horizontal boxes are written as their four corners.
pub fn serialize_dota_annotation(objects: &[AnnotatedObject], vocab: &ClassVocabulary) -> String {
    let mut s = String::new();
    for o in objects {
        let quad = match o.shape {
            AnnotationShape::Quad(q) => q,
            AnnotationShape::Hbb(h) => h.to_quad(),
        };
        for c in quad.coords() {
            write!(s, "{c:.1} ").unwrap();
        }
        let name = vocab.name(o.class_id).unwrap_or("unknown");
        writeln!(s, "{name} {}", u8::from(o.difficult)).unwrap();
    }
    s
}

fn parse_pair(s: &str, line: usize) -> Result<(f64, f64)> {
    let inner = s
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| malformed(line, format!("expected `(x,y)`, found `{s}`")))?;
    let (x, y) = inner
        .split_once(',')
        .ok_or_else(|| malformed(line, format!("expected `(x,y)`, found `{s}`")))?;
    let num = |v: &str| {
        v.parse::<f64>()
            .map_err(|_| malformed(line, format!("bad coordinate `{v}`")))
    };
    Ok((num(x)?, num(y)?))
}

/// Parses an NWPU VHR-10 ground-truth file: `(x1,y1),(x2,y2),c` per line with
/// a 1-based class index. Blank lines are skipped.
pub fn parse_nwpu_annotation(text: &str, vocab: &ClassVocabulary) -> Result<Vec<AnnotatedObject>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let compact: String = raw.chars().filter(|c| !c.is_whitespace()).collect();
        if compact.is_empty() {
            continue;
        }
        let (first, rest) = compact
            .split_once("),(")
            .ok_or_else(|| malformed(line, "expected two `(x,y)` corners"))?;
        let (second, class) = rest
            .rsplit_once("),")
            .ok_or_else(|| malformed(line, "missing class index"))?;
        let (x1, y1) = parse_pair(&format!("{first})"), line)?;
        let (x2, y2) = parse_pair(&format!("({second})"), line)?;
        let index: i64 = class
            .parse()
            .map_err(|_| malformed(line, format!("bad class index `{class}`")))?;
        if index < 1 || index as usize > vocab.len() {
            return Err(IngestError::ClassIndexOutOfRange { line, index, max: vocab.len() });
        }
        let hbb = Hbb::new(x1, y1, x2, y2).map_err(|source| IngestError::Geometry { line, source })?;
        out.push(AnnotatedObject {
            shape: AnnotationShape::Hbb(hbb),
            class_id: index as usize - 1,
            difficult: false,
        });
    }
    Ok(out)
}

/// Loads an 8-bit image as a `height x width x 3` RGB array.
pub fn load_image(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path)
        .map_err(|source| IngestError::Image { path: path.to_owned(), source })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw()).map_err(|e| {
        IngestError::Dataset { path: path.to_owned(), reason: e.to_string() }
    })
}

pub fn save_image(path: &Path, pixels: &Array3<u8>) -> Result<()> {
    let (h, w, _) = pixels.dim();
    let data: Vec<u8> = pixels.iter().copied().collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, data).ok_or_else(|| IngestError::Dataset {
        path: path.to_owned(),
        reason: "pixel buffer does not match its shape".into(),
    })?;
    img.save(path)
        .map_err(|source| IngestError::Image { path: path.to_owned(), source })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    All,
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_path: PathBuf,
    pub annotation_path: PathBuf,
    pub width: u32,
    pub height: u32,
}

impl ImageRecord {
    /// File stem of the image, used as the image id in detection files.
    pub fn image_id(&self) -> String {
        self.image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub records: Vec<ImageRecord>,
    pub split: Split,
}

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "tif", "tiff", "bmp"];

impl DatasetIndex {
    /// Checks that every record's files exist and its size is positive.
    pub fn new(records: Vec<ImageRecord>, split: Split) -> Result<Self> {
        for r in &records {
            for p in [&r.image_path, &r.annotation_path] {
                if !p.is_file() {
                    return Err(IngestError::Dataset { path: p.clone(), reason: "file not found".into() });
                }
            }
            if r.width == 0 || r.height == 0 {
                return Err(IngestError::Dataset {
                    path: r.image_path.clone(),
                    reason: "image has zero size".into(),
                });
            }
        }
        Ok(Self { records, split })
    }

    /// Pairs every image in `image_dir` with `<stem>.txt` in `label_dir`.
    /// Records are sorted by image file name.
    pub fn scan(image_dir: &Path, label_dir: &Path, split: Split) -> Result<Self> {
        let entries = std::fs::read_dir(image_dir)
            .map_err(|source| IngestError::Io { path: image_dir.to_owned(), source })?;
        let mut images: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        images.sort();
        let mut records = Vec::with_capacity(images.len());
        for image_path in images {
            let stem = image_path.file_stem().unwrap_or_default().to_owned();
            let annotation_path = label_dir.join(stem).with_extension("txt");
            let (width, height) = image::image_dimensions(&image_path)
                .map_err(|source| IngestError::Image { path: image_path.clone(), source })?;
            records.push(ImageRecord { image_path, annotation_path, width, height });
        }
        Self::new(records, split)
    }

    /// DOTA layout: `<root>/images` and `<root>/labelTxt`.
    pub fn scan_dota(root: &Path, split: Split) -> Result<Self> {
        Self::scan(&root.join("images"), &root.join("labelTxt"), split)
    }

    /// NWPU VHR-10 layout: `<root>/positive image set` and `<root>/ground truth`.
    pub fn scan_nwpu(root: &Path) -> Result<Self> {
        Self::scan(&root.join("positive image set"), &root.join("ground truth"), Split::All)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Random train/test split. The train side receives `floor(n * fraction)`
/// records; both sides keep the original record order.
pub fn split_nwpu(index: &DatasetIndex, train_fraction: f64, seed: u64) -> Result<(DatasetIndex, DatasetIndex)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(IngestError::InvalidFraction(train_fraction));
    }
    let n = index.records.len();
    let n_train = (n as f64 * train_fraction).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_train = vec![false; n];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let pick = |want: bool| -> Vec<ImageRecord> {
        index
            .records
            .iter()
            .zip(&is_train)
            .filter(|(_, &t)| t == want)
            .map(|(r, _)| r.clone())
            .collect()
    };
    Ok((
        DatasetIndex { records: pick(true), split: Split::Train },
        DatasetIndex { records: pick(false), split: Split::Test },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabularies_have_expected_sizes() {
        let dota = ClassVocabulary::dota();
        assert_eq!(dota.len(), 15);
        assert_eq!(dota.name(0), Some("plane"));
        assert_eq!(dota.name(14), Some("helicopter"));
        assert_eq!(ClassVocabulary::nwpu().len(), 10);
        for v in [dota, ClassVocabulary::nwpu()] {
            for id in 0..v.len() {
                assert_eq!(v.id(v.name(id).unwrap()), Some(id));
            }
        }
        assert!(ClassVocabulary::new(&["a", "a"]).is_err());
    }

    #[test]
    fn dota_single_line() {
        let objs = parse_dota_annotation("0 0 10 0 10 10 0 10 plane 0\n", &ClassVocabulary::dota()).unwrap();
        assert_eq!(objs.len(), 1);
        assert_eq!(objs[0].class_id, 0);
        assert!(!objs[0].difficult);
        let AnnotationShape::Quad(q) = objs[0].shape else { panic!("expected quad") };
        assert_eq!(q.coords(), [0.0, 0.0, 10.0, 0.0, 10.0, 10.0, 0.0, 10.0]);
    }

    #[test]
    fn dota_headers_and_blank_body() {
        let vocab = ClassVocabulary::dota();
        assert!(parse_dota_annotation("", &vocab).unwrap().is_empty());
        let text = "imagesource:GoogleEarth\ngsd:0.146343590398\n\n1 1 5 1 5 4 1 4 ship 1\n";
        let objs = parse_dota_annotation(text, &vocab).unwrap();
        assert_eq!(objs.len(), 1);
        assert_eq!(objs[0].class_id, 6);
        assert!(objs[0].difficult);
    }

    #[test]
    fn dota_errors_carry_line_numbers() {
        let vocab = ClassVocabulary::dota();
        let err = parse_dota_annotation("gsd:1\n0 0 1 0 1 1 0 1 boat 0", &vocab).unwrap_err();
        assert!(matches!(err, IngestError::UnknownClass { line: 2, .. }));
        let err = parse_dota_annotation("0 0 1 0 1 1 plane 0", &vocab).unwrap_err();
        assert!(matches!(err, IngestError::Malformed { line: 1, .. }));
        let err = parse_dota_annotation("0 0 1 0 1 x 0 1 plane 0", &vocab).unwrap_err();
        assert!(matches!(err, IngestError::Malformed { line: 1, .. }));
        let err = parse_dota_annotation("0 0 1 0 2 0 3 0 plane 0", &vocab).unwrap_err();
        assert!(matches!(
            err,
            IngestError::Geometry { line: 1, source: GeometryError::DegenerateQuad { .. } }
        ));
    }

    #[test]
    fn nwpu_lines() {
        let vocab = ClassVocabulary::nwpu();
        let objs = parse_nwpu_annotation("(1,2),(30,40),1\n", &vocab).unwrap();
        assert_eq!(objs[0].shape, AnnotationShape::Hbb(Hbb::new(1.0, 2.0, 30.0, 40.0).unwrap()));
        assert_eq!(objs[0].class_id, 0);
        assert!(parse_nwpu_annotation("  \n\t\n", &vocab).unwrap().is_empty());
        let objs = parse_nwpu_annotation("(563, 478), (630, 573), 3\n", &vocab).unwrap();
        assert_eq!(objs[0].class_id, 2);
        assert!(matches!(
            parse_nwpu_annotation("(1,2),(30,40),11", &vocab),
            Err(IngestError::ClassIndexOutOfRange { line: 1, index: 11, .. })
        ));
        assert!(matches!(
            parse_nwpu_annotation("\n(1,2),(30,40),0", &vocab),
            Err(IngestError::ClassIndexOutOfRange { line: 2, index: 0, .. })
        ));
        assert!(matches!(
            parse_nwpu_annotation("(1,2),(30,40)", &vocab),
            Err(IngestError::Malformed { line: 1, .. })
        ));
    }

    fn fake_index(n: usize) -> DatasetIndex {
        let records = (0..n)
            .map(|i| ImageRecord {
                image_path: PathBuf::from(format!("{i:03}.jpg")),
                annotation_path: PathBuf::from(format!("{i:03}.txt")),
                width: 10,
                height: 10,
            })
            .collect();
        DatasetIndex { records, split: Split::All }
    }

    #[test]
    fn split_counts_and_determinism() {
        let (train, test) = split_nwpu(&fake_index(650), 0.75, 7).unwrap();
        assert_eq!((train.len(), test.len()), (487, 163));
        let (train, test) = split_nwpu(&fake_index(4), 0.75, 7).unwrap();
        assert_eq!((train.len(), test.len()), (3, 1));
        let a = split_nwpu(&fake_index(100), 0.75, 3).unwrap();
        let b = split_nwpu(&fake_index(100), 0.75, 3).unwrap();
        assert_eq!(a, b);
        let c = split_nwpu(&fake_index(100), 0.75, 4).unwrap();
        assert_ne!(a.0, c.0);
        assert!(split_nwpu(&fake_index(4), 1.0, 0).is_err());
        assert!(split_nwpu(&fake_index(4), 0.0, 0).is_err());
    }
}
