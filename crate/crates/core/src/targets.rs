//! Anchors, box-delta encoding, proposal/ground-truth assignment and the
//! reference (non-differentiable) detection loss.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::geometry::{iou_hbb, obb_to_hbb, GeometryError, Hbb, Obb};

#[derive(Debug, Error, PartialEq)]
pub enum TargetError {
    #[error("reference box has non-positive size {width}x{height}")]
    NonPositiveReference { width: f64, height: f64 },
    #[error("ground-truth box has non-positive size {width}x{height}")]
    NonPositiveTarget { width: f64, height: f64 },
    #[error("assignment has neither positives nor negatives")]
    EmptyAssignment,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, TargetError>;

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorConfig {
    /// One base size (pixels) per pyramid level, finest first.
    pub sizes: Vec<f64>,
    /// Height / width ratios.
    pub ratios: Vec<f64>,
    pub strides: Vec<u32>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            sizes: vec![32.0, 64.0, 128.0, 256.0],
            ratios: vec![0.5, 1.0, 2.0],
            strides: vec![4, 8, 16, 32],
        }
    }
}

impl AnchorConfig {
    pub fn per_cell(&self) -> usize {
        self.ratios.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelAnchors {
    pub stride: u32,
    pub height: usize,
    pub width: usize,
    /// Indexed `(a * height + y) * width + x`, matching a `[A, H, W]` map.
    pub anchors: Vec<Hbb>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub levels: Vec<LevelAnchors>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.levels.iter().map(|l| l.anchors.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All anchors, level by level.
    pub fn flatten(&self) -> Vec<Hbb> {
        self.levels.iter().flat_map(|l| l.anchors.iter().copied()).collect()
    }
}

/// Anchors centred on `((x + 0.5) * stride, (y + 0.5) * stride)` for every
/// cell of each level. `feature_sizes` holds `(height, width)` per level.
pub fn generate_anchors(feature_sizes: &[(usize, usize)], config: &AnchorConfig) -> AnchorSet {
    let levels = feature_sizes
        .iter()
        .zip(config.sizes.iter().zip(&config.strides))
        .map(|(&(height, width), (&size, &stride))| {
            let mut anchors = Vec::with_capacity(height * width * config.ratios.len());
            for &ratio in &config.ratios {
                let w = size / ratio.sqrt();
                let h = size * ratio.sqrt();
                for y in 0..height {
                    for x in 0..width {
                        let cx = (x as f64 + 0.5) * stride as f64;
                        let cy = (y as f64 + 0.5) * stride as f64;
                        anchors.push(Hbb::from_center(cx, cy, w, h));
                    }
                }
            }
            LevelAnchors { stride, height, width, anchors }
        })
        .collect();
    AnchorSet { levels }
}

fn check_reference(r: &Hbb) -> Result<()> {
    if r.width() > 0.0 && r.height() > 0.0 {
        Ok(())
    } else {
        Err(TargetError::NonPositiveReference { width: r.width(), height: r.height() })
    }
}

/// `(tx, ty, tw, th)`: center offsets in units of the reference size and
/// log size ratios.
pub fn encode_hbb(gt: &Hbb, reference: &Hbb) -> Result<[f64; 4]> {
    check_reference(reference)?;
    if !(gt.width() > 0.0 && gt.height() > 0.0) {
        return Err(TargetError::NonPositiveTarget { width: gt.width(), height: gt.height() });
    }
    let (g, r) = (gt.center(), reference.center());
    Ok([
        (g.x - r.x) / reference.width(),
        (g.y - r.y) / reference.height(),
        (gt.width() / reference.width()).ln(),
        (gt.height() / reference.height()).ln(),
    ])
}

pub fn decode_hbb(deltas: &[f64; 4], reference: &Hbb) -> Result<Hbb> {
    check_reference(reference)?;
    let (rw, rh) = (reference.width(), reference.height());
    let r = reference.center();
    let cx = r.x + deltas[0] * rw;
    let cy = r.y + deltas[1] * rh;
    let w = rw * deltas[2].exp();
    let h = rh * deltas[3].exp();
    Ok(Hbb::from_center(cx, cy, w, h))
}

/// `(dx, dy, dw, dh, dtheta)` against an axis-aligned reference.
///
/// Of the two equivalent parameterizations `(w, h, theta)` and
/// `(h, w, theta - 90)`, the one with the smaller squared size and angle
/// targets is used.
pub fn encode_obb(gt: &Obb, reference: &Hbb) -> Result<[f64; 5]> {
    check_reference(reference)?;
    if !(gt.w > 0.0 && gt.h > 0.0) {
        return Err(TargetError::NonPositiveTarget { width: gt.w, height: gt.h });
    }
    let (rw, rh) = (reference.width(), reference.height());
    let r = reference.center();
    let dx = (gt.cx - r.x) / rw;
    let dy = (gt.cy - r.y) / rh;
    let candidate = |w: f64, h: f64, theta: f64| [(w / rw).ln(), (h / rh).ln(), theta / 90.0];
    let a = candidate(gt.w, gt.h, gt.theta);
    let b = candidate(gt.h, gt.w, gt.theta - 90.0);
    let norm = |c: &[f64; 3]| c.iter().map(|v| v * v).sum::<f64>();
    let best = if norm(&b) < norm(&a) { b } else { a };
    Ok([dx, dy, best[0], best[1], best[2]])
}

/// Inverse of [`encode_obb`]; any `dtheta` folds back into `[0, 90)`.
pub fn decode_obb(deltas: &[f64; 5], reference: &Hbb) -> Result<Obb> {
    check_reference(reference)?;
    let (rw, rh) = (reference.width(), reference.height());
    let r = reference.center();
    Ok(Obb::canonical(
        r.x + deltas[0] * rw,
        r.y + deltas[1] * rh,
        rw * deltas[2].exp(),
        rh * deltas[3].exp(),
        90.0 * deltas[4],
    )?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    /// Matching box. For oriented ground truth this is `obb_to_hbb(obb)`.
    pub hbb: Hbb,
    pub obb: Option<Obb>,
    pub class_id: usize,
}

impl GroundTruth {
    pub fn from_obb(obb: Obb, class_id: usize) -> Self {
        Self { hbb: obb_to_hbb(&obb), obb: Some(obb), class_id }
    }

    pub fn from_hbb(hbb: Hbb, class_id: usize) -> Self {
        Self { hbb, obb: None, class_id }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssignThresholds {
    pub positive: f64,
    pub negative: f64,
    /// Also mark each ground truth's best-overlapping reference(s) positive.
    pub best_match_positive: bool,
}

impl AssignThresholds {
    pub const RPN: Self = Self { positive: 0.7, negative: 0.3, best_match_positive: true };
    pub const HEAD: Self = Self { positive: 0.5, negative: 0.5, best_match_positive: true };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Positive(usize),
    Negative,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssignedTarget {
    pub label: Label,
    pub matched_gt: Option<usize>,
    pub max_iou: f64,
    pub hbb_deltas: Option<[f64; 4]>,
    pub obb_deltas: Option<[f64; 5]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignment {
    pub entries: Vec<AssignedTarget>,
}

impl TargetAssignment {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| matches!(e.label, Label::Positive(_)))
            .map(|(i, _)| i)
    }

    pub fn count(&self, pred: impl Fn(&Label) -> bool) -> usize {
        self.entries.iter().filter(|e| pred(&e.label)).count()
    }
}

/// Labels every reference box against the ground truth by HBB IoU.
///
/// Positive when the best IoU reaches `positive` (or, with
/// `best_match_positive`, when the box is the best non-zero match of some
/// ground truth); negative when the best IoU is at most `negative`; ignored
/// otherwise. Ties go to the lower ground-truth index.
pub fn assign_targets(refs: &[Hbb], gts: &[GroundTruth], thresholds: AssignThresholds) -> Result<TargetAssignment> {
    let n = refs.len();
    let mut best = vec![(0.0f64, None::<usize>); n];
    let mut gt_best = vec![0.0f64; gts.len()];
    let mut ious = vec![0.0f64; n * gts.len()];
    for (i, r) in refs.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let iou = iou_hbb(r, &g.hbb);
            ious[i * gts.len() + j] = iou;
            if best[i].1.is_none() || iou > best[i].0 {
                best[i] = (iou, Some(j));
            }
            gt_best[j] = gt_best[j].max(iou);
        }
    }

    let mut entries = Vec::with_capacity(n);
    for (i, r) in refs.iter().enumerate() {
        let (max_iou, matched) = best[i];
        let promoted = thresholds.best_match_positive
            && (0..gts.len()).any(|j| gt_best[j] > 0.0 && ious[i * gts.len() + j] == gt_best[j]);
        let label = match matched {
            Some(j) if max_iou >= thresholds.positive || promoted => Label::Positive(gts[j].class_id),
            _ if max_iou <= thresholds.negative => Label::Negative,
            _ => Label::Ignore,
        };
        let mut entry = AssignedTarget { label, matched_gt: matched, max_iou, hbb_deltas: None, obb_deltas: None };
        if let (Label::Positive(_), Some(j)) = (label, matched) {
            entry.hbb_deltas = Some(encode_hbb(&gts[j].hbb, r)?);
            entry.obb_deltas = gts[j].obb.as_ref().map(|o| encode_obb(o, r)).transpose()?;
        }
        entries.push(entry);
    }
    Ok(TargetAssignment { entries })
}

/// Keeps at most `batch_size` labelled entries, at most
/// `positive_fraction` of them positive, and marks the rest as ignored.
pub fn sample_assignment(assignment: &mut TargetAssignment, batch_size: usize, positive_fraction: f64, rng: &mut impl Rng) {
    let mut pos: Vec<usize> = assignment.positives().collect();
    let mut neg: Vec<usize> = assignment
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.label == Label::Negative)
        .map(|(i, _)| i)
        .collect();
    let max_pos = ((batch_size as f64) * positive_fraction) as usize;
    let n_pos = pos.len().min(max_pos);
    let n_neg = neg.len().min(batch_size - n_pos);
    pos.shuffle(rng);
    neg.shuffle(rng);
    for &i in pos[n_pos..].iter().chain(&neg[n_neg..]) {
        assignment.entries[i].label = Label::Ignore;
    }
}

/// Per-proposal head outputs as plain numbers. Class column 0 is background;
/// foreground class `k` uses column `k + 1` and delta block `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionOutput {
    pub num_classes: usize,
    /// `N x (K + 1)` probabilities.
    pub class_scores: Vec<f64>,
    /// `N x 4K`.
    pub hbb_deltas: Vec<f64>,
    /// `N x 5K`.
    pub obb_deltas: Vec<f64>,
}

impl DetectionOutput {
    pub fn len(&self) -> usize {
        self.class_scores.len() / (self.num_classes + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.class_scores.is_empty()
    }

    pub fn scores(&self, i: usize) -> &[f64] {
        let k = self.num_classes + 1;
        &self.class_scores[i * k..(i + 1) * k]
    }

    pub fn hbb(&self, i: usize, class_id: usize) -> [f64; 4] {
        let o = (i * self.num_classes + class_id) * 4;
        self.hbb_deltas[o..o + 4].try_into().unwrap()
    }

    pub fn obb(&self, i: usize, class_id: usize) -> [f64; 5] {
        let o = (i * self.num_classes + class_id) * 5;
        self.obb_deltas[o..o + 5].try_into().unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub hbb: f64,
    pub obb: f64,
    /// Smooth-L1 transition point.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { hbb: 1.0, obb: 1.0, beta: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub class: f64,
    pub hbb: f64,
    pub obb: f64,
}

/// Probability floor used by the cross-entropy term.
pub const PROB_EPSILON: f64 = 1e-12;

pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

/// Cross-entropy over labelled entries plus smooth-L1 box terms averaged over
/// positives.
pub fn detection_loss(outputs: &DetectionOutput, assignment: &TargetAssignment, weights: LossWeights) -> Result<LossBreakdown> {
    let n = assignment.entries.len();
    let k = outputs.num_classes;
    if outputs.class_scores.len() != n * (k + 1)
        || outputs.hbb_deltas.len() != n * 4 * k
        || outputs.obb_deltas.len() != n * 5 * k
    {
        return Err(TargetError::Shape(format!(
            "{} assignment entries vs {} output rows",
            n,
            outputs.len()
        )));
    }
    let mut class_sum = 0.0;
    let mut labelled = 0usize;
    let mut hbb_sum = 0.0;
    let mut obb_sum = 0.0;
    let mut positives = 0usize;
    for (i, e) in assignment.entries.iter().enumerate() {
        let column = match e.label {
            Label::Ignore => continue,
            Label::Negative => 0,
            Label::Positive(c) => c + 1,
        };
        let p = outputs.scores(i)[column].clamp(PROB_EPSILON, 1.0 - PROB_EPSILON);
        class_sum -= p.ln();
        labelled += 1;
        if let Label::Positive(c) = e.label {
            positives += 1;
            if let Some(t) = e.hbb_deltas {
                hbb_sum += outputs.hbb(i, c).iter().zip(&t).map(|(p, t)| smooth_l1(p - t, weights.beta)).sum::<f64>();
            }
            if let Some(t) = e.obb_deltas {
                obb_sum += outputs.obb(i, c).iter().zip(&t).map(|(p, t)| smooth_l1(p - t, weights.beta)).sum::<f64>();
            }
        }
    }
    if labelled == 0 {
        return Err(TargetError::EmptyAssignment);
    }
    let class = class_sum / labelled as f64;
    let (hbb, obb) = if positives > 0 {
        (hbb_sum / positives as f64, obb_sum / positives as f64)
    } else {
        (0.0, 0.0)
    };
    Ok(LossBreakdown {
        total: class + weights.hbb * hbb + weights.obb * obb,
        class,
        hbb,
        obb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn anchors_per_cell_and_centres() {
        let cfg = AnchorConfig::default();
        let set = generate_anchors(&[(4, 3), (2, 2)], &cfg);
        assert_eq!(set.levels[0].anchors.len(), 4 * 3 * 3);
        assert_eq!(set.levels[1].anchors.len(), 2 * 2 * 3);
        for level in &set.levels {
            let s = level.stride as f64;
            for a in &level.anchors {
                let c = a.center();
                let (u, v) = (c.x / s - 0.5, c.y / s - 0.5);
                assert!((u - u.round()).abs() < 1e-9 && (v - v.round()).abs() < 1e-9);
            }
        }
        // Ratio 1 at P2 is a 32x32 square.
        let a = set.levels[0].anchors[4 * 3];
        assert!((a.width() - 32.0).abs() < 1e-12 && (a.height() - 32.0).abs() < 1e-12);
    }

    #[test]
    fn hbb_identity_and_log_width() {
        let r = Hbb::new(10.0, 10.0, 30.0, 20.0).unwrap();
        assert_eq!(encode_hbb(&r, &r).unwrap(), [0.0; 4]);
        let wide = Hbb::new(0.0, 10.0, 40.0, 20.0).unwrap();
        let d = encode_hbb(&wide, &r).unwrap();
        assert!((d[2] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(d[0], 0.0);
        let flat = Hbb::new(1.0, 1.0, 1.0, 5.0).unwrap();
        assert!(matches!(encode_hbb(&r, &flat), Err(TargetError::NonPositiveReference { .. })));
        assert!(decode_hbb(&[0.0; 4], &flat).is_err());
    }

    #[test]
    fn obb_identity_and_angle() {
        let r = Hbb::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let b = Obb::new(5.0, 5.0, 10.0, 10.0, 0.0).unwrap();
        assert_eq!(encode_obb(&b, &r).unwrap(), [0.0; 5]);
        let b45 = Obb::new(5.0, 5.0, 10.0, 10.0, 45.0).unwrap();
        assert_eq!(encode_obb(&b45, &r).unwrap()[4], 0.5);
        // A 70-degree box is closer to -20 degrees with its sides swapped.
        let tall = Obb::new(5.0, 5.0, 20.0, 5.0, 70.0).unwrap();
        let d = encode_obb(&tall, &r).unwrap();
        assert!((d[4] + 20.0 / 90.0).abs() < 1e-12);
    }

    #[test]
    fn decoded_angle_is_always_canonical() {
        let r = Hbb::new(0.0, 0.0, 10.0, 10.0).unwrap();
        for dt in [-7.3, -1.0, -0.25, 0.0, 0.999999, 1.0, 2.5, 13.0] {
            let b = decode_obb(&[0.0, 0.0, 0.1, -0.2, dt], &r).unwrap();
            assert!((0.0..90.0).contains(&b.theta), "dtheta {dt} gave {}", b.theta);
        }
    }

    #[test]
    fn single_anchor_cases() {
        let gt = GroundTruth::from_hbb(Hbb::new(0.0, 0.0, 10.0, 10.0).unwrap(), 2);
        let a = assign_targets(&[gt.hbb], &[gt], AssignThresholds::RPN).unwrap();
        assert_eq!(a.entries[0].label, Label::Positive(2));
        assert_eq!(a.entries[0].hbb_deltas, Some([0.0; 4]));
        let far = Hbb::new(50.0, 50.0, 60.0, 60.0).unwrap();
        let a = assign_targets(&[far], &[gt], AssignThresholds::RPN).unwrap();
        assert_eq!(a.entries[0].label, Label::Negative);
        let a = assign_targets(&[far], &[], AssignThresholds::RPN).unwrap();
        assert_eq!(a.entries[0].label, Label::Negative);
    }

    #[test]
    fn sampling_respects_budget() {
        let gt = GroundTruth::from_hbb(Hbb::new(0.0, 0.0, 10.0, 10.0).unwrap(), 0);
        let mut refs = vec![gt.hbb; 10];
        refs.extend((0..30).map(|i| Hbb::new(100.0 + i as f64, 0.0, 110.0 + i as f64, 10.0).unwrap()));
        let mut a = assign_targets(&refs, &[gt], AssignThresholds::HEAD).unwrap();
        sample_assignment(&mut a, 16, 0.25, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a.count(|l| matches!(l, Label::Positive(_))), 4);
        assert_eq!(a.count(|l| *l == Label::Negative), 12);
    }

    #[test]
    fn smooth_l1_branches() {
        assert_eq!(smooth_l1(0.5, 1.0), 0.125);
        assert_eq!(smooth_l1(-2.0, 1.0), 1.5);
        assert_eq!(smooth_l1(0.0, 1.0), 0.0);
    }

    #[test]
    fn empty_assignment_is_an_error() {
        let out = DetectionOutput { num_classes: 1, class_scores: vec![0.5, 0.5], hbb_deltas: vec![0.0; 4], obb_deltas: vec![0.0; 5] };
        let a = TargetAssignment {
            entries: vec![AssignedTarget { label: Label::Ignore, matched_gt: None, max_iou: 0.4, hbb_deltas: None, obb_deltas: None }],
        };
        assert_eq!(detection_loss(&out, &a, LossWeights::default()), Err(TargetError::EmptyAssignment));
    }

    #[test]
    fn uniform_scores_give_log_class_count() {
        let k = 3;
        let n = 4;
        let out = DetectionOutput {
            num_classes: k,
            class_scores: vec![1.0 / (k as f64 + 1.0); n * (k + 1)],
            hbb_deltas: vec![0.0; n * 4 * k],
            obb_deltas: vec![0.0; n * 5 * k],
        };
        let entries = (0..n)
            .map(|i| AssignedTarget {
                label: if i % 2 == 0 { Label::Negative } else { Label::Positive(i % k) },
                matched_gt: Some(0),
                max_iou: 0.0,
                hbb_deltas: Some([0.0; 4]),
                obb_deltas: Some([0.0; 5]),
            })
            .collect();
        let loss = detection_loss(&out, &TargetAssignment { entries }, LossWeights::default()).unwrap();
        assert!((loss.class - 4f64.ln()).abs() < 1e-12);
        assert_eq!((loss.hbb, loss.obb), (0.0, 0.0));
    }
}
