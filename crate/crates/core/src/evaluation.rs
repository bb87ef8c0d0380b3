//! PASCAL VOC style average precision over horizontal or oriented boxes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geometry::{score_order, BoxKind, BoxShape, GeometryError, Hbb, Quad, ScoredDetection};
use crate::ingest::ClassVocabulary;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("class id {0} is not in the vocabulary")]
    UnknownClass(usize),
    #[error("detections reference image `{0}` which has no ground truth entry")]
    UnknownImage(String),
    #[error("box kind does not match the evaluation task")]
    MixedBoxKinds,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalGroundTruth {
    pub shape: BoxShape,
    pub class_id: usize,
    pub difficult: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchFlag {
    TruePositive,
    FalsePositive,
    /// Matched a difficult ground truth; counts neither way.
    Ignored,
}

/// Greedy matching of one image's detections in descending score order.
///
/// A detection is a true positive when some still-unmatched, non-difficult
/// ground truth of its class overlaps it with IoU >= `iou_threshold`; the best
/// such ground truth (lowest index on ties) is consumed. Failing that, an
/// overlap with a difficult ground truth makes it [`MatchFlag::Ignored`].
/// Flags are returned in input order.
pub fn match_detections(
    dets: &[ScoredDetection],
    gts: &[EvalGroundTruth],
    iou_threshold: f64,
    box_kind: BoxKind,
) -> Result<Vec<MatchFlag>> {
    if dets.iter().any(|d| d.shape.kind() != box_kind) || gts.iter().any(|g| g.shape.kind() != box_kind) {
        return Err(EvalError::MixedBoxKinds);
    }
    let mut matched = vec![false; gts.len()];
    let mut flags = vec![MatchFlag::FalsePositive; dets.len()];
    for i in score_order(dets.iter().map(|d| d.score)) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        let mut hits_difficult = false;
        for (j, g) in gts.iter().enumerate() {
            if g.class_id != d.class_id {
                continue;
            }
            let iou = d.shape.iou(&g.shape)?;
            if iou < iou_threshold {
                continue;
            }
            if g.difficult {
                hits_difficult = true;
            } else if !matched[j] && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        flags[i] = match best {
            Some((j, _)) => {
                matched[j] = true;
                MatchFlag::TruePositive
            }
            None if hits_difficult => MatchFlag::Ignored,
            None => MatchFlag::FalsePositive,
        };
    }
    Ok(flags)
}

/// Recall and precision after sorting by descending score, with precision
/// replaced by its running maximum from the right.
pub fn precision_recall(tp: &[bool], scores: &[f64], num_gt: usize) -> (Vec<f64>, Vec<f64>) {
    let order = score_order(scores.iter().copied());
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    let (mut ctp, mut cfp) = (0usize, 0usize);
    for i in order {
        if tp[i] {
            ctp += 1;
        } else {
            cfp += 1;
        }
        recall.push(if num_gt > 0 { ctp as f64 / num_gt as f64 } else { 0.0 });
        precision.push(ctp as f64 / (ctp + cfp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (recall, precision)
}

/// All-points interpolated AP: the area under the enveloped
/// precision/recall curve. Zero when there is no ground truth.
pub fn average_precision(tp: &[bool], scores: &[f64], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let (recall, precision) = precision_recall(tp, scores, num_gt);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r != prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassResult {
    pub class_id: usize,
    pub name: String,
    /// `None` when the class has neither ground truth nor detections.
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub classes: Vec<ClassResult>,
    pub map: f64,
}

/// Per-class AP pooled over all images, and their mean.
///
/// Classes with ground truth or detections enter the mean; a class with
/// detections but no ground truth scores 0.
pub fn evaluate(
    detections: &BTreeMap<String, Vec<ScoredDetection>>,
    ground_truth: &BTreeMap<String, Vec<EvalGroundTruth>>,
    vocab: &ClassVocabulary,
    box_kind: BoxKind,
    iou_threshold: f64,
) -> Result<EvalResult> {
    let k = vocab.len();
    let check = |c: usize| if c < k { Ok(()) } else { Err(EvalError::UnknownClass(c)) };
    for id in detections.keys() {
        if !ground_truth.contains_key(id) {
            return Err(EvalError::UnknownImage(id.clone()));
        }
    }

    let mut pooled: Vec<(Vec<bool>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); k];
    let mut num_gt = vec![0usize; k];
    for (id, gts) in ground_truth {
        for g in gts {
            check(g.class_id)?;
            if !g.difficult {
                num_gt[g.class_id] += 1;
            }
        }
        let Some(dets) = detections.get(id) else { continue };
        for d in dets {
            check(d.class_id)?;
        }
        let flags = match_detections(dets, gts, iou_threshold, box_kind)?;
        for (d, f) in dets.iter().zip(flags) {
            if f != MatchFlag::Ignored {
                let (tp, scores) = &mut pooled[d.class_id];
                tp.push(f == MatchFlag::TruePositive);
                scores.push(d.score);
            }
        }
    }

    let mut classes = Vec::with_capacity(k);
    let mut ap_sum = 0.0;
    let mut counted = 0usize;
    for (class_id, (tp, scores)) in pooled.into_iter().enumerate() {
        let n_tp = tp.iter().filter(|&&t| t).count();
        let (recall, precision) = precision_recall(&tp, &scores, num_gt[class_id]);
        let ap = if num_gt[class_id] == 0 && tp.is_empty() {
            None
        } else {
            Some(average_precision(&tp, &scores, num_gt[class_id]))
        };
        if let Some(ap) = ap {
            ap_sum += ap;
            counted += 1;
        }
        classes.push(ClassResult {
            class_id,
            name: vocab.name(class_id).unwrap_or_default().to_owned(),
            ap,
            num_gt: num_gt[class_id],
            true_positives: n_tp,
            false_positives: tp.len() - n_tp,
            false_negatives: num_gt[class_id] - n_tp,
            recall,
            precision,
        });
    }
    let map = if counted > 0 { ap_sum / counted as f64 } else { 0.0 };
    Ok(EvalResult { classes, map })
}

/// File name for one class: `Task1_<class>.txt` for oriented boxes and
/// `Task2_<class>.txt` for horizontal ones.
pub fn detection_file_name(kind: BoxKind, class: &str) -> String {
    match kind {
        BoxKind::Oriented => format!("Task1_{class}.txt"),
        BoxKind::Horizontal => format!("Task2_{class}.txt"),
    }
}

fn header(kind: BoxKind) -> &'static str {
    match kind {
        BoxKind::Oriented => "# image_id score x1 y1 x2 y2 x3 y3 x4 y4\n",
        BoxKind::Horizontal => "# image_id score xmin ymin xmax ymax\n",
    }
}

/// One file per class, one detection per line. Every class gets a file,
/// even when empty.
pub fn write_detection_files(
    dir: &Path,
    kind: BoxKind,
    vocab: &ClassVocabulary,
    detections: &BTreeMap<String, Vec<ScoredDetection>>,
) -> Result<()> {
    let io = |path: &Path| {
        let path = path.to_owned();
        move |source| EvalError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let mut files: Vec<String> = vec![header(kind).to_owned(); vocab.len()];
    for (id, dets) in detections {
        for d in dets {
            if d.shape.kind() != kind {
                return Err(EvalError::MixedBoxKinds);
            }
            let out = files.get_mut(d.class_id).ok_or(EvalError::UnknownClass(d.class_id))?;
            write!(out, "{id} {:.6}", d.score).unwrap();
            match kind {
                BoxKind::Oriented => {
                    for c in d.shape.to_quad().coords() {
                        write!(out, " {c:.2}").unwrap();
                    }
                }
                BoxKind::Horizontal => {
                    let h = d.shape.to_hbb();
                    write!(out, " {:.2} {:.2} {:.2} {:.2}", h.xmin, h.ymin, h.xmax, h.ymax).unwrap();
                }
            }
            out.push('\n');
        }
    }
    for (class_id, text) in files.iter().enumerate() {
        let path = dir.join(detection_file_name(kind, vocab.name(class_id).unwrap()));
        std::fs::write(&path, text).map_err(io(&path))?;
    }
    Ok(())
}

/// Reads whichever per-class files exist in `dir`. Detections keep file
/// order within each image.
pub fn read_detection_files(
    dir: &Path,
    kind: BoxKind,
    vocab: &ClassVocabulary,
) -> Result<BTreeMap<String, Vec<ScoredDetection>>> {
    let mut out: BTreeMap<String, Vec<ScoredDetection>> = BTreeMap::new();
    for (class_id, name) in vocab.names().iter().enumerate() {
        let path = dir.join(detection_file_name(kind, name));
        if !path.is_file() {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(|source| EvalError::Io { path: path.clone(), source })?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| EvalError::Parse { path: path.clone(), line: i + 1, reason };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let expected = match kind {
                BoxKind::Oriented => 10,
                BoxKind::Horizontal => 6,
            };
            if fields.len() != expected {
                return Err(err(format!("expected {expected} fields, found {}", fields.len())));
            }
            let nums: Vec<f64> = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| err(format!("bad number `{f}`"))))
                .collect::<Result<_>>()?;
            let score = nums[0];
            if !(0.0..=1.0).contains(&score) {
                return Err(err(format!("score {score} outside [0, 1]")));
            }
            let shape = match kind {
                BoxKind::Oriented => BoxShape::Quad(Quad::from_coords(nums[1..9].try_into().unwrap()).map_err(|e| err(e.to_string()))?),
                BoxKind::Horizontal => BoxShape::Hbb(Hbb::new(nums[1], nums[2], nums[3], nums[4]).map_err(|e| err(e.to_string()))?),
            };
            out.entry(fields[0].to_owned())
                .or_default()
                .push(ScoredDetection { shape, class_id, score });
        }
    }
    Ok(out)
}

/// Human-readable per-class table.
pub fn format_report(result: &EvalResult) -> String {
    let mut s = String::new();
    writeln!(s, "{:<24} {:>8} {:>6} {:>6} {:>6} {:>6}", "class", "AP", "gt", "TP", "FP", "FN").unwrap();
    for c in &result.classes {
        let ap = c.ap.map_or_else(|| "-".to_owned(), |ap| format!("{ap:.4}"));
        writeln!(
            s,
            "{:<24} {:>8} {:>6} {:>6} {:>6} {:>6}",
            c.name, ap, c.num_gt, c.true_positives, c.false_positives, c.false_negatives
        )
        .unwrap();
    }
    writeln!(s, "{:<24} {:>8.4}", "mAP", result.map).unwrap();
    s
}

/// `key=value` lines: `map`, then `ap.<class>`, `gt.<class>`, `tp.<class>`,
/// `fp.<class>` for every class that has an AP.
pub fn format_report_kv(result: &EvalResult) -> String {
    let mut s = String::new();
    writeln!(s, "map={:.6}", result.map).unwrap();
    for c in &result.classes {
        if let Some(ap) = c.ap {
            writeln!(s, "ap.{}={ap:.6}", c.name).unwrap();
            writeln!(s, "gt.{}={}", c.name, c.num_gt).unwrap();
            writeln!(s, "tp.{}={}", c.name, c.true_positives).unwrap();
            writeln!(s, "fp.{}={}", c.name, c.false_positives).unwrap();
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hbb(x: f64, y: f64) -> BoxShape {
        BoxShape::Hbb(Hbb::new(x, y, x + 10.0, y + 10.0).unwrap())
    }

    fn gt(shape: BoxShape, class_id: usize) -> EvalGroundTruth {
        EvalGroundTruth { shape, class_id, difficult: false }
    }

    #[test]
    fn ap_simple_cases() {
        assert_eq!(average_precision(&[true, true], &[0.9, 0.8], 2), 1.0);
        assert_eq!(average_precision(&[false], &[0.9], 1), 0.0);
        assert!((average_precision(&[true, false, true], &[0.9, 0.8, 0.7], 2) - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(average_precision(&[true], &[0.9], 0), 0.0);
    }

    #[test]
    fn double_detection_is_false_positive() {
        let gts = [gt(hbb(0.0, 0.0), 0)];
        let dets = [
            ScoredDetection::new(hbb(1.0, 0.0), 0, 0.6),
            ScoredDetection::new(hbb(0.0, 0.0), 0, 0.9),
        ];
        let flags = match_detections(&dets, &gts, 0.5, BoxKind::Horizontal).unwrap();
        assert_eq!(flags, vec![MatchFlag::FalsePositive, MatchFlag::TruePositive]);
    }

    #[test]
    fn difficult_matches_are_ignored() {
        let gts = [EvalGroundTruth { shape: hbb(0.0, 0.0), class_id: 0, difficult: true }];
        let dets = [ScoredDetection::new(hbb(0.0, 0.0), 0, 0.9), ScoredDetection::new(hbb(50.0, 0.0), 0, 0.8)];
        let flags = match_detections(&dets, &gts, 0.5, BoxKind::Horizontal).unwrap();
        assert_eq!(flags, vec![MatchFlag::Ignored, MatchFlag::FalsePositive]);
    }

    #[test]
    fn mixed_kinds_rejected() {
        let gts = [gt(hbb(0.0, 0.0), 0)];
        assert!(matches!(
            match_detections(&[], &gts, 0.5, BoxKind::Oriented),
            Err(EvalError::MixedBoxKinds)
        ));
    }

    #[test]
    fn empty_and_perfect() {
        let vocab = ClassVocabulary::new(&["a", "b"]).unwrap();
        let mut gts = BTreeMap::new();
        gts.insert("img".to_owned(), vec![gt(hbb(0.0, 0.0), 0), gt(hbb(40.0, 0.0), 1)]);
        let none = BTreeMap::new();
        let r = evaluate(&none, &gts, &vocab, BoxKind::Horizontal, 0.5).unwrap();
        assert_eq!(r.map, 0.0);
        assert_eq!(r.classes[0].false_negatives, 1);
        let mut perfect = BTreeMap::new();
        perfect.insert(
            "img".to_owned(),
            vec![ScoredDetection::new(hbb(0.0, 0.0), 0, 0.9), ScoredDetection::new(hbb(40.0, 0.0), 1, 0.4)],
        );
        let r = evaluate(&perfect, &gts, &vocab, BoxKind::Horizontal, 0.5).unwrap();
        assert_eq!(r.map, 1.0);
        let mut unknown = BTreeMap::new();
        unknown.insert("img".to_owned(), vec![ScoredDetection::new(hbb(0.0, 0.0), 5, 0.9)]);
        assert!(matches!(
            evaluate(&unknown, &gts, &vocab, BoxKind::Horizontal, 0.5),
            Err(EvalError::UnknownClass(5))
        ));
    }

    #[test]
    fn detection_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = ClassVocabulary::new(&["a", "b"]).unwrap();
        let mut dets = BTreeMap::new();
        dets.insert("img1".to_owned(), vec![ScoredDetection::new(hbb(1.0, 2.0), 1, 0.75)]);
        write_detection_files(dir.path(), BoxKind::Horizontal, &vocab, &dets).unwrap();
        let text = std::fs::read_to_string(dir.path().join("Task2_a.txt")).unwrap();
        assert_eq!(text, "# image_id score xmin ymin xmax ymax\n");
        assert_eq!(read_detection_files(dir.path(), BoxKind::Horizontal, &vocab).unwrap(), dets);
    }
}
