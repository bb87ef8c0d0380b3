//! The SGD training loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cadnet_core::ingest::AnnotatedObject;
use cadnet_core::tiling::{channel_statistics, crop_patch, normalize_contrast, plan_tiles};
use cadnet_nn::checkpoint;
use cadnet_nn::optim::{warmup_step_lr, Sgd};
use cadnet_nn::{Detector, KvConfig};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{flip, ground_truth, load_corpus, to_tensor, Corpus};
use crate::experiment::ExperimentConfig;

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub lr: f32,
    pub total: f64,
    pub rpn_class: f64,
    pub rpn_box: f64,
    pub class: f64,
    pub hbb: f64,
    pub obb: f64,
    pub grad_norm: f32,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const MODEL_FILE: &str = "model.ckpt";
pub const STATS_FILE: &str = "channel_stats.kv";

/// Per-channel mean and standard deviation used to normalize inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub means: [f32; 3],
    pub stds: [f32; 3],
}

impl ChannelStats {
    pub fn to_text(&self) -> String {
        let mut kv = KvConfig::default();
        for c in 0..3 {
            kv.set(&format!("mean.{c}"), self.means[c]);
            kv.set(&format!("std.{c}"), self.stds[c]);
        }
        kv.to_text()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let kv = KvConfig::parse(&std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)?;
        let mut s = Self { means: [0.0; 3], stds: [1.0; 3] };
        for c in 0..3 {
            s.means[c] = kv.value(&format!("mean.{c}"))?.context("missing channel mean")?;
            s.stds[c] = kv.value(&format!("std.{c}"))?.context("missing channel std")?;
        }
        Ok(s)
    }

    /// Statistics of the training images.
    pub fn of_corpus(corpus: &Corpus) -> Result<Self> {
        let images = corpus
            .train
            .iter()
            .map(|s| s.load(&corpus.vocab).map(|(p, _)| p))
            .collect::<Result<Vec<_>>>()?;
        let (means, stds) = channel_statistics(&images);
        Ok(Self { means, stds })
    }

    pub fn normalize(&self, pixels: &Array3<u8>) -> Result<cadnet_nn::Tensor<f32>> {
        Ok(to_tensor(&normalize_contrast(pixels, self.means, self.stds)?))
    }
}

/// Training patches that contain at least one object.
pub fn training_patches(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Vec<(Array3<u8>, Vec<AnnotatedObject>)>> {
    let mut out = Vec::new();
    for s in &corpus.train {
        let (pixels, objects) = s.load(&corpus.vocab)?;
        let (h, w, _) = pixels.dim();
        let plan = plan_tiles(w as u32, h as u32, cfg.tiling.train_tile, cfg.tiling.train_overlap)?;
        for window in &plan.windows {
            let p = crop_patch(&pixels, window, &objects);
            if p.annotations.iter().any(|a| !a.difficult) {
                out.push((p.pixels, p.annotations));
            }
        }
    }
    Ok(out)
}

pub struct TrainResult {
    pub detector: Detector,
    pub stats: ChannelStats,
    pub log: Vec<LogRow>,
    pub checkpoint: PathBuf,
}

/// Trains from scratch and writes the log, channel statistics and
/// checkpoints under `cfg.out`.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainResult> {
    let corpus = load_corpus(cfg)?;
    train_on(cfg, &corpus)
}

pub fn train_on(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<TrainResult> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.num_classes = corpus.vocab.len();
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let stats = ChannelStats::of_corpus(corpus)?;
    std::fs::write(cfg.out.join(STATS_FILE), stats.to_text())?;

    let patches = training_patches(cfg, corpus)?;
    if patches.is_empty() {
        bail!("no training patch contains an object");
    }
    let mut detector = Detector::new(model_cfg, cfg.seed);
    let o = &cfg.optim;
    let mut sgd = Sgd::new(&detector.params, o.momentum, o.weight_decay, o.clip_norm);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut log_file = BufWriter::new(File::create(cfg.out.join(LOG_FILE))?);
    let mut log = Vec::with_capacity(o.iterations);
    let mut order: Vec<usize> = Vec::new();

    for it in 0..o.iterations {
        let lr = warmup_step_lr(o.lr, it, o.iterations, o.warmup);
        let mut sum = cadnet_nn::LossTerms::default();
        let mut acc: Vec<(usize, Vec<f32>)> =
            detector.params.tensors().iter().enumerate().map(|(i, t)| (i, vec![0.0; t.len()])).collect();
        for _ in 0..o.batch_size {
            if order.is_empty() {
                order = (0..patches.len()).collect();
                order.shuffle(&mut rng);
            }
            let (mut px, mut objs) = patches[order.pop().unwrap()].clone();
            if o.flip {
                let (fh, fv) = (rng.random_bool(0.5), rng.random_bool(0.5));
                flip(&mut px, &mut objs, fh, fv);
            }
            let image = stats.normalize(&px)?;
            let gts = ground_truth(&objs);
            let (terms, grads) = detector.loss_and_grads(detector.params.tensors(), &image, &gts, &mut rng, None)?;
            for (s, t) in [
                (&mut sum.total, terms.total),
                (&mut sum.rpn_class, terms.rpn_class),
                (&mut sum.rpn_box, terms.rpn_box),
                (&mut sum.class, terms.class),
                (&mut sum.hbb, terms.hbb),
                (&mut sum.obb, terms.obb),
            ] {
                *s += t / o.batch_size as f64;
            }
            for (i, g) in &grads {
                acc[*i].1.iter_mut().zip(g).for_each(|(a, g)| *a += g);
            }
        }
        if !sum.total.is_finite() {
            bail!("loss became non-finite at iteration {}", it + 1);
        }
        if o.batch_size > 1 {
            let inv = 1.0 / o.batch_size as f32;
            acc.iter_mut().for_each(|(_, g)| g.iter_mut().for_each(|v| *v *= inv));
        }
        let grad_norm = sgd.step(&mut detector.params, &acc, lr);
        let row = LogRow {
            iteration: it + 1,
            lr,
            total: sum.total,
            rpn_class: sum.rpn_class,
            rpn_box: sum.rpn_box,
            class: sum.class,
            hbb: sum.hbb,
            obb: sum.obb,
            grad_norm,
        };
        serde_json::to_writer(&mut log_file, &row)?;
        log_file.write_all(b"\n")?;
        log.push(row);
        if o.checkpoint_every > 0 && (it + 1) % o.checkpoint_every == 0 {
            let dir = cfg.out.join("checkpoints");
            std::fs::create_dir_all(&dir)?;
            checkpoint::save(&dir.join(format!("iter_{:06}.ckpt", it + 1)), &detector.params)?;
        }
    }
    log_file.flush()?;
    let path = cfg.out.join(MODEL_FILE);
    checkpoint::save(&path, &detector.params)?;
    Ok(TrainResult { detector, stats, log, checkpoint: path })
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).context("malformed log row"))
        .collect()
}
