//! Trains and scores every combination of the three context switches.

use std::fmt::Write as _;

use anyhow::Result;
use cadnet_core::geometry::BoxKind;
use cadnet_nn::Switches;

use crate::dataset::{load_corpus, Corpus};
use crate::eval::eval_with;
use crate::experiment::ExperimentConfig;
use crate::infer::infer_with;
use crate::train::train_on;

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub switches: Switches,
    pub obb_map: f64,
    pub hbb_map: f64,
    pub final_loss: f64,
}

pub fn run_variant(cfg: &ExperimentConfig, corpus: &Corpus, switches: Switches) -> Result<AblationRow> {
    let mut c = cfg.with_switches(switches);
    c.out = cfg.out.join("ablation").join(switches.label().replace('+', "_"));
    let trained = train_on(&c, corpus)?;
    let out = infer_with(&c, corpus, &trained.detector, &trained.stats)?;
    let obb = eval_with(&c, corpus, &out.dir, BoxKind::Oriented)?;
    let hbb = eval_with(&c, corpus, &out.dir, BoxKind::Horizontal)?;
    Ok(AblationRow {
        switches,
        obb_map: obb.map,
        hbb_map: hbb.map,
        final_loss: trained.log.last().map_or(f64::NAN, |r| r.total),
    })
}

fn mark(on: bool) -> &'static str {
    if on {
        "x"
    } else {
        ""
    }
}

pub fn format_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    writeln!(s, "{:<28} {:>6} {:>6} {:>9} {:>8} {:>8}", "model", "gcnet", "plcnet", "attention", "mAP_obb", "mAP_hbb").unwrap();
    for r in rows {
        let w = r.switches;
        writeln!(
            s,
            "{:<28} {:>6} {:>6} {:>9} {:>8.4} {:>8.4}",
            w.label(),
            mark(w.gcnet),
            mark(w.plcnet),
            mark(w.attention),
            r.obb_map,
            r.hbb_map
        )
        .unwrap();
    }
    s
}

/// Eight runs sharing one seed, baseline first and the full model last.
/// Writes `ablation.txt` and `ablation.kv` under `cfg.out`.
pub fn ablate(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    let corpus = load_corpus(cfg)?;
    let rows = Switches::all()
        .into_iter()
        .map(|sw| run_variant(cfg, &corpus, sw))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("ablation.txt"), format_table(&rows))?;
    let mut kv = String::new();
    for r in &rows {
        let l = r.switches.label();
        writeln!(kv, "map_obb.{l}={:.6}\nmap_hbb.{l}={:.6}", r.obb_map, r.hbb_map).unwrap();
    }
    std::fs::write(cfg.out.join("ablation.kv"), kv)?;
    Ok(rows)
}
