//! Scoring detection files against the test split.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Result;
use cadnet_core::evaluation::{evaluate, format_report, format_report_kv, read_detection_files, EvalResult};
use cadnet_core::geometry::BoxKind;

use crate::dataset::{eval_ground_truth, load_corpus, Corpus};
use crate::experiment::ExperimentConfig;

pub fn task_name(kind: BoxKind) -> &'static str {
    match kind {
        BoxKind::Oriented => "obb",
        BoxKind::Horizontal => "hbb",
    }
}

/// Evaluates the files in `dir` and writes `eval_<task>.txt` and
/// `eval_<task>.kv` under `cfg.out`.
pub fn eval_with(cfg: &ExperimentConfig, corpus: &Corpus, dir: &Path, kind: BoxKind) -> Result<EvalResult> {
    let detections = read_detection_files(dir, kind, &corpus.vocab)?;
    let mut gts = BTreeMap::new();
    for s in &corpus.test {
        let (_, objects) = s.load(&corpus.vocab)?;
        gts.insert(s.id.clone(), eval_ground_truth(&objects, kind == BoxKind::Oriented));
    }
    let result = evaluate(&detections, &gts, &corpus.vocab, kind, cfg.iou_threshold)?;
    std::fs::create_dir_all(&cfg.out)?;
    let task = task_name(kind);
    std::fs::write(cfg.out.join(format!("eval_{task}.txt")), format_report(&result))?;
    std::fs::write(cfg.out.join(format!("eval_{task}.kv")), format_report_kv(&result))?;
    Ok(result)
}

pub fn eval(cfg: &ExperimentConfig, dir: &Path, kind: BoxKind) -> Result<EvalResult> {
    eval_with(cfg, &load_corpus(cfg)?, dir, kind)
}
