//! Experiment configuration read from a sectioned `key = value` file.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use cadnet_nn::{KvConfig, ModelConfig, Switches};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// `<root>/train` and `<root>/val`, each with `images/` and `labelTxt/`.
    Dota,
    /// `<root>/positive image set` and `<root>/ground truth`, split randomly.
    Nwpu,
    /// Generated in memory.
    Synthetic,
}

impl std::str::FromStr for DatasetKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dota" => Ok(Self::Dota),
            "nwpu" => Ok(Self::Nwpu),
            "synthetic" => Ok(Self::Synthetic),
            other => bail!("unknown dataset kind `{other}` (expected dota, nwpu or synthetic)"),
        }
    }
}

/// Generator settings for the synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub images: usize,
    pub size: u32,
    pub test_fraction: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Range of the longer object side in pixels.
    pub min_length: f64,
    pub max_length: f64,
    /// Radius of the patch of randomly chosen scene texture under each
    /// object, relative to its longer side; 0 disables it.
    pub apron: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            images: 200,
            size: 128,
            test_fraction: 0.2,
            min_objects: 2,
            max_objects: 5,
            min_length: 16.0,
            max_length: 40.0,
            apron: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TilingConfig {
    pub train_tile: u32,
    pub train_overlap: u32,
    pub infer_tile: u32,
    pub infer_overlap: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub iterations: usize,
    pub batch_size: usize,
    pub clip_norm: Option<f32>,
    pub warmup: usize,
    /// Save a checkpoint every this many iterations; 0 saves only the final one.
    pub checkpoint_every: usize,
    /// Random horizontal and vertical flips of training patches.
    pub flip: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            iterations: 1000,
            batch_size: 1,
            clip_norm: Some(10.0),
            warmup: 100,
            checkpoint_every: 0,
            flip: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: DatasetKind,
    pub root: Option<PathBuf>,
    /// NWPU train share.
    pub train_fraction: f64,
    pub synthetic: SyntheticConfig,
    pub tiling: TilingConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub iou_threshold: f64,
    pub plot_images: usize,
    pub seed: u64,
    pub out: PathBuf,
}

const TOP_KEYS: &[&str] = &["seed", "out"];
const DATASET_KEYS: &[&str] = &["kind", "root", "train_fraction"];
const SYNTHETIC_KEYS: &[&str] =
    &["images", "size", "test_fraction", "min_objects", "max_objects", "min_length", "max_length", "apron", "seed"];
const TILING_KEYS: &[&str] = &["train_tile", "train_overlap", "infer_tile", "infer_overlap"];
const SWITCH_KEYS: &[&str] = &["gcnet", "plcnet", "attention"];
const OPTIM_KEYS: &[&str] =
    &["lr", "momentum", "weight_decay", "iterations", "batch_size", "clip_norm", "warmup", "checkpoint_every", "flip"];
const EVAL_KEYS: &[&str] = &["iou_threshold"];
const PLOT_KEYS: &[&str] = &["max_images"];
const SECTIONS: &[&str] = &["dataset", "synthetic", "tiling", "model", "switches", "optim", "eval", "plot"];

impl ExperimentConfig {
    /// Reads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let kv = KvConfig::parse(text)?;
        for key in kv.keys() {
            match key.split_once('.') {
                None => ensure!(TOP_KEYS.contains(&key), "unknown key `{key}`"),
                Some((section, _)) => ensure!(SECTIONS.contains(&section), "unknown section `{section}`"),
            }
        }
        for (section, keys) in [
            ("dataset", DATASET_KEYS),
            ("synthetic", SYNTHETIC_KEYS),
            ("tiling", TILING_KEYS),
            ("switches", SWITCH_KEYS),
            ("optim", OPTIM_KEYS),
            ("eval", EVAL_KEYS),
            ("plot", PLOT_KEYS),
        ] {
            kv.check_known(section, keys)?;
        }

        let seed = kv.value_or("seed", 0u64)?;
        let kind: DatasetKind = kv.get("dataset.kind").unwrap_or("synthetic").parse()?;
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let root = kv.get("dataset.root").map(resolve);
        if kind != DatasetKind::Synthetic {
            let Some(r) = &root else { bail!("dataset.root is required for this dataset kind") };
            ensure!(r.is_dir(), "dataset root {} does not exist", r.display());
        }

        let sd = SyntheticConfig::default();
        let synthetic = SyntheticConfig {
            images: kv.value_or("synthetic.images", sd.images)?,
            size: kv.value_or("synthetic.size", sd.size)?,
            test_fraction: kv.value_or("synthetic.test_fraction", sd.test_fraction)?,
            min_objects: kv.value_or("synthetic.min_objects", sd.min_objects)?,
            max_objects: kv.value_or("synthetic.max_objects", sd.max_objects)?,
            min_length: kv.value_or("synthetic.min_length", sd.min_length)?,
            max_length: kv.value_or("synthetic.max_length", sd.max_length)?,
            apron: kv.value_or("synthetic.apron", sd.apron)?,
            seed: kv.value_or("synthetic.seed", seed)?,
        };
        ensure!(synthetic.size % 32 == 0 && synthetic.size > 0, "synthetic.size must be a positive multiple of 32");
        ensure!(synthetic.min_objects <= synthetic.max_objects, "synthetic.min_objects exceeds max_objects");
        ensure!(
            synthetic.min_length > 4.0 && synthetic.min_length <= synthetic.max_length,
            "synthetic lengths must satisfy 4 < min_length <= max_length"
        );
        ensure!(synthetic.apron >= 0.0, "synthetic.apron must not be negative");
        ensure!((0.0..1.0).contains(&synthetic.test_fraction), "synthetic.test_fraction must lie in [0, 1)");

        let default_tile = if kind == DatasetKind::Synthetic { synthetic.size } else { 1024 };
        let tiling = TilingConfig {
            train_tile: kv.value_or("tiling.train_tile", default_tile)?,
            train_overlap: kv.value_or("tiling.train_overlap", default_tile / 4)?,
            infer_tile: kv.value_or("tiling.infer_tile", default_tile)?,
            infer_overlap: kv.value_or("tiling.infer_overlap", default_tile / 4)?,
        };
        for (t, v) in [(tiling.train_tile, tiling.train_overlap), (tiling.infer_tile, tiling.infer_overlap)] {
            ensure!(t % 32 == 0 && t > 0, "tile sizes must be positive multiples of 32, got {t}");
            ensure!(v < t, "tile overlap {v} must be smaller than the tile {t}");
        }

        let mut model = ModelConfig::from_kv(&kv, "model")?;
        model.switches = Switches {
            gcnet: kv.flag("switches.gcnet", model.switches.gcnet)?,
            plcnet: kv.flag("switches.plcnet", model.switches.plcnet)?,
            attention: kv.flag("switches.attention", model.switches.attention)?,
        };
        let od = OptimConfig::default();
        let clip: f32 = kv.value_or("optim.clip_norm", od.clip_norm.unwrap_or(0.0))?;
        let optim = OptimConfig {
            lr: kv.value_or("optim.lr", od.lr)?,
            momentum: kv.value_or("optim.momentum", od.momentum)?,
            weight_decay: kv.value_or("optim.weight_decay", od.weight_decay)?,
            iterations: kv.value_or("optim.iterations", od.iterations)?,
            batch_size: kv.value_or("optim.batch_size", od.batch_size)?,
            clip_norm: (clip > 0.0).then_some(clip),
            warmup: kv.value_or("optim.warmup", od.warmup)?,
            checkpoint_every: kv.value_or("optim.checkpoint_every", od.checkpoint_every)?,
            flip: kv.flag("optim.flip", od.flip)?,
        };
        ensure!(optim.batch_size > 0, "optim.batch_size must be positive");
        ensure!(optim.lr > 0.0, "optim.lr must be positive");

        let out = resolve(kv.get("out").unwrap_or("out"));
        Ok(Self {
            kind,
            root,
            train_fraction: kv.value_or("dataset.train_fraction", 0.75)?,
            synthetic,
            tiling,
            model,
            optim,
            iou_threshold: kv.value_or("eval.iou_threshold", 0.5)?,
            plot_images: kv.value_or("plot.max_images", 4)?,
            seed,
            out,
        })
    }

    /// The same experiment with other ablation switches.
    pub fn with_switches(&self, switches: Switches) -> Self {
        let mut c = self.clone();
        c.model.switches = switches;
        c
    }
}
