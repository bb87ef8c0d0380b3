//! The detector: backbone, feature pyramid, per-level attention, global and
//! pyramid-local context, region proposals and the fused box head.

use rand::Rng;
use thiserror::Error;

use cadnet_core::geometry::{iou_hbb, obb_to_quad, rotated_nms, BoxShape, GeometryError, Hbb, ScoredDetection};
use cadnet_core::targets::{
    assign_targets, decode_hbb, decode_obb, generate_anchors, sample_assignment, AnchorConfig, AnchorSet,
    AssignThresholds, GroundTruth, Label, TargetError,
};

use crate::config::ModelConfig;
use crate::graph::{sigmoid, Graph, ParamGrads, RoiRequest, Var};
use crate::params::{Init, ParamStore};
use crate::tensor::{Real, Tensor};

/// Strides of P2..P5.
pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Largest log-scale change applied when decoding deltas.
pub fn max_log_scale() -> f64 {
    (1000.0f64 / 16.0).ln()
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input {height}x{width} is not divisible by 32")]
    InputSize { height: usize, width: usize },
    #[error("input must have 3 channels, got {0}")]
    Channels(usize),
    #[error("degenerate region {0:?}")]
    DegenerateRegion(Hbb),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub region: Hbb,
    pub objectness: f64,
}

/// Per-term loss values of one training step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub rpn_class: f64,
    pub rpn_box: f64,
    pub class: f64,
    pub hbb: f64,
    pub obb: f64,
}

/// Plain-value view of the pyramid stages for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidOutput<T> {
    pub c: Vec<Tensor<T>>,
    pub p: Vec<Tensor<T>>,
    /// Attention maps `[1, H, W]`, empty when attention is off.
    pub s: Vec<Tensor<T>>,
    /// Features fed to region pooling: attended when attention is on, else `p`.
    pub a: Vec<Tensor<T>>,
    pub global: Option<Tensor<T>>,
}

/// Raw head outputs for a fixed set of regions.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput<T> {
    /// `[N, K + 1]` logits, background first.
    pub class_logits: Tensor<T>,
    /// `[N, 4K]`, already divided by the delta weights.
    pub hbb_deltas: Tensor<T>,
    /// `[N, 5K]`, already divided by the delta weights.
    pub obb_deltas: Tensor<T>,
    /// `[N, 49 * D + D_g + D_l]` fused input of the first layer.
    pub fused_input: Tensor<T>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Detections {
    pub obb: Vec<ScoredDetection>,
    pub hbb: Vec<ScoredDetection>,
}

/// Graph plus parameter binding for one forward pass.
pub struct Ctx<'a, T: Real> {
    pub graph: Graph<T>,
    store: &'a ParamStore,
    values: &'a [Tensor<T>],
    bound: Vec<Option<Var>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore, values: &'a [Tensor<T>], track: bool) -> Self {
        assert_eq!(store.len(), values.len(), "parameter values do not match the store");
        Self { graph: Graph::new(track), store, values, bound: vec![None; store.len()] }
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.index_of(name).is_some()
    }

    pub fn param(&mut self, name: &str) -> Var {
        let i = self.store.index_of(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        if let Some(v) = self.bound[i] {
            return v;
        }
        let v = self.graph.param(i, &self.values[i]);
        self.bound[i] = Some(v);
        v
    }

    fn conv(&mut self, layer: &str, x: Var, stride: usize, pad: usize) -> Var {
        let w = self.param(&format!("{layer}.weight"));
        let b = self.param(&format!("{layer}.bias"));
        self.graph.conv2d(x, w, Some(b), stride, pad)
    }

    fn conv_relu(&mut self, layer: &str, x: Var, stride: usize) -> Var {
        let y = self.conv(layer, x, stride, 1);
        self.graph.relu(y)
    }

    fn linear(&mut self, layer: &str, x: Var) -> Var {
        let w = self.param(&format!("{layer}.weight"));
        let b = self.param(&format!("{layer}.bias"));
        self.graph.linear(x, w, Some(b))
    }
}

struct Features {
    c: [Var; 4],
    p: [Var; 4],
    s: Option<[Var; 4]>,
    a: [Var; 4],
    global: Option<Var>,
}

struct RpnOutput {
    /// `[1, total anchors]` logits, level by level.
    objectness: Var,
    /// `[1, total * 4]` deltas, each level laid out as `[4A, H, W]`.
    deltas: Var,
    level_offsets: Vec<usize>,
    anchors: AnchorSet,
}

/// Pyramid level (0 for P2) read by region pooling for a box.
pub fn roi_level(region: &Hbb, config: &ModelConfig) -> usize {
    let side = region.area().max(0.0).sqrt();
    let k = (config.canonical_level + (side / config.canonical_size).log2()).floor();
    (k.clamp(2.0, 5.0) as usize) - 2
}

fn hbb_nms(boxes: &[Proposal], threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].objectness.total_cmp(&boxes[a].objectness).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou_hbb(&boxes[k].region, &boxes[i].region) <= threshold) {
            keep.push(i);
        }
    }
    keep
}

fn clamp_scale(d: f64) -> f64 {
    d.clamp(-max_log_scale(), max_log_scale())
}

pub struct Detector {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Detector {
    /// Builds the parameter set for `config`. Every parameter is initialized
    /// from `seed` and its name alone.
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut p = ParamStore::new();
        let cfg = &config;
        let w = cfg.backbone_widths;
        let d = cfg.fpn_dim;
        let a = cfg.anchor_ratios.len();
        let k = cfg.num_classes;
        let conv = |p: &mut ParamStore, name: &str, cin: usize, cout: usize, ks: usize, init: Init| {
            p.add(&format!("{name}.weight"), vec![cout, cin, ks, ks], init, seed);
            p.add(&format!("{name}.bias"), vec![cout], Init::Zeros, seed);
        };
        conv(&mut p, "backbone.stem.0", 3, w[0], 3, Init::He(27));
        for (s, stage) in ["c2", "c3", "c4", "c5"].iter().enumerate() {
            conv(&mut p, &format!("backbone.{stage}.0"), w[s], w[s + 1], 3, Init::He(9 * w[s]));
            conv(&mut p, &format!("backbone.{stage}.1"), w[s + 1], w[s + 1], 3, Init::He(9 * w[s + 1]));
        }
        for l in 0..4 {
            conv(&mut p, &format!("fpn.lateral.{l}"), w[l + 1], d, 1, Init::He(w[l + 1]));
        }
        for l in 0..4 {
            conv(&mut p, &format!("fpn.smooth.{l}"), d, d, 3, Init::He(9 * d));
        }
        if cfg.switches.attention {
            let h = cfg.attention_hidden;
            for l in 0..4 {
                conv(&mut p, &format!("attention.p{}.0", l + 2), d, h, 3, Init::He(9 * d));
                let last = if cfg.attention_zero_init { Init::Zeros } else { Init::Normal(0.01) };
                conv(&mut p, &format!("attention.p{}.1", l + 2), h, 1, 3, last);
            }
        }
        if cfg.switches.gcnet {
            conv(&mut p, "gcnet.conv.0", w[4], cfg.gcnet_dim, 3, Init::He(9 * w[4]));
            conv(&mut p, "gcnet.conv.1", cfg.gcnet_dim, cfg.gcnet_dim, 3, Init::He(9 * cfg.gcnet_dim));
        }
        conv(&mut p, "rpn.conv.0", d, d, 3, Init::Normal(0.01));
        conv(&mut p, "rpn.objectness.0", d, a, 1, Init::Normal(0.01));
        conv(&mut p, "rpn.deltas.0", d, 4 * a, 1, Init::Normal(0.01));
        if cfg.switches.plcnet {
            p.add("plcnet.fuse.0.weight", vec![d, 4 * d], Init::He(4 * d), seed);
            p.add("plcnet.fuse.0.bias", vec![d], Init::Zeros, seed);
        }
        let bins = cfg.pool_size * cfg.pool_size;
        let hd = cfg.head_hidden;
        p.add("head.fc1_region.0.weight", vec![hd, bins * d], Init::He(bins * d), seed);
        p.add("head.fc1_region.0.bias", vec![hd], Init::Zeros, seed);
        if cfg.switches.gcnet {
            p.add("head.fc1_global.0.weight", vec![hd, cfg.gcnet_dim], Init::He(cfg.gcnet_dim), seed);
        }
        if cfg.switches.plcnet {
            p.add("head.fc1_local.0.weight", vec![hd, d], Init::He(d), seed);
        }
        p.add("head.fc2.0.weight", vec![hd, hd], Init::He(hd), seed);
        p.add("head.fc2.0.bias", vec![hd], Init::Zeros, seed);
        p.add("head.cls.0.weight", vec![k + 1, hd], Init::Normal(0.01), seed);
        p.add("head.cls.0.bias", vec![k + 1], Init::Zeros, seed);
        p.add("head.hbb.0.weight", vec![4 * k, hd], Init::Normal(0.001), seed);
        p.add("head.hbb.0.bias", vec![4 * k], Init::Zeros, seed);
        p.add("head.obb.0.weight", vec![5 * k, hd], Init::Normal(0.001), seed);
        p.add("head.obb.0.bias", vec![5 * k], Init::Zeros, seed);
        Self { config, params: p }
    }

    pub fn anchor_config(&self) -> AnchorConfig {
        AnchorConfig {
            sizes: self.config.anchor_sizes.clone(),
            ratios: self.config.anchor_ratios.clone(),
            strides: STRIDES.iter().map(|&s| s as u32).collect(),
        }
    }

    fn check_input<T: Real>(image: &Tensor<T>) -> Result<(usize, usize)> {
        let (c, h, w) = image.chw();
        if c != 3 {
            return Err(ModelError::Channels(c));
        }
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(ModelError::InputSize { height: h, width: w });
        }
        Ok((h, w))
    }

    /// Stem and four stages; returns C2..C5.
    pub fn backbone_forward<T: Real>(ctx: &mut Ctx<'_, T>, image: Var) -> [Var; 4] {
        let mut cur = ctx.conv_relu("backbone.stem.0", image, 2);
        let mut c = [cur; 4];
        for (i, stage) in ["c2", "c3", "c4", "c5"].iter().enumerate() {
            let y = ctx.conv_relu(&format!("backbone.{stage}.0"), cur, 2);
            cur = ctx.conv_relu(&format!("backbone.{stage}.1"), y, 1);
            c[i] = cur;
        }
        c
    }

    /// Lateral projections with a top-down pathway; returns P2..P5.
    pub fn fpn_forward<T: Real>(ctx: &mut Ctx<'_, T>, c: &[Var; 4]) -> [Var; 4] {
        let mut p = *c;
        let lat5 = ctx.conv("fpn.lateral.3", c[3], 1, 0);
        p[3] = ctx.conv("fpn.smooth.3", lat5, 1, 1);
        for l in (0..3).rev() {
            let lat = ctx.conv(&format!("fpn.lateral.{l}"), c[l], 1, 0);
            let (_, h, w) = ctx.graph.value(lat).chw();
            let up = ctx.graph.upsample_nearest(p[l + 1], h, w);
            let sum = ctx.graph.add(lat, up);
            p[l] = ctx.conv(&format!("fpn.smooth.{l}"), sum, 1, 1);
        }
        p
    }

    /// Per-level attention maps `S` and modulated features `A = S * P`.
    pub fn attention_forward<T: Real>(ctx: &mut Ctx<'_, T>, p: &[Var; 4]) -> ([Var; 4], [Var; 4]) {
        let mut s = *p;
        let mut a = *p;
        for l in 0..4 {
            let hidden = ctx.conv_relu(&format!("attention.p{}.0", l + 2), p[l], 1);
            let logit = ctx.conv(&format!("attention.p{}.1", l + 2), hidden, 1, 1);
            s[l] = ctx.graph.sigmoid(logit);
            a[l] = ctx.graph.mul_spatial(s[l], p[l]);
        }
        (s, a)
    }

    /// Convolutions over C5 followed by global average pooling.
    pub fn gcnet_forward<T: Real>(ctx: &mut Ctx<'_, T>, c5: Var) -> Var {
        let h = ctx.conv_relu("gcnet.conv.0", c5, 1);
        let phi = ctx.conv("gcnet.conv.1", h, 1, 1);
        ctx.graph.global_avg_pool(phi)
    }

    fn features<T: Real>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Features {
        let c = Self::backbone_forward(ctx, image);
        let p = Self::fpn_forward(ctx, &c);
        let (s, a) = if self.config.switches.attention {
            let (s, a) = Self::attention_forward(ctx, &p);
            (Some(s), a)
        } else {
            (None, p)
        };
        let global = self.config.switches.gcnet.then(|| Self::gcnet_forward(ctx, c[3]));
        Features { c, p, s, a, global }
    }

    fn rpn<T: Real>(&self, ctx: &mut Ctx<'_, T>, f: &Features) -> RpnOutput {
        let input = if self.config.rpn_on_attention { f.a } else { f.p };
        let mut obj = Vec::with_capacity(4);
        let mut del = Vec::with_capacity(4);
        let mut sizes = Vec::with_capacity(4);
        let mut level_offsets = Vec::with_capacity(4);
        let mut offset = 0;
        for &x in &input {
            let t = ctx.conv_relu("rpn.conv.0", x, 1);
            let o = ctx.conv("rpn.objectness.0", t, 1, 0);
            let dl = ctx.conv("rpn.deltas.0", t, 1, 0);
            let (_, h, w) = ctx.graph.value(o).chw();
            sizes.push((h, w));
            level_offsets.push(offset);
            let n = ctx.graph.value(o).len();
            offset += n;
            obj.push(ctx.graph.reshape(o, vec![1, n]));
            let nd = ctx.graph.value(dl).len();
            del.push(ctx.graph.reshape(dl, vec![1, nd]));
        }
        let objectness = ctx.graph.concat_cols(&obj);
        let deltas = ctx.graph.concat_cols(&del);
        let anchors = generate_anchors(&sizes, &self.anchor_config());
        RpnOutput { objectness, deltas, level_offsets, anchors }
    }

    /// Flat index into the concatenated delta vector for anchor `k`
    /// (global index) and coordinate `j`.
    fn rpn_delta_index(rpn: &RpnOutput, k: usize, j: usize) -> usize {
        let l = rpn.level_offsets.iter().rposition(|&o| o <= k).unwrap();
        let lv = &rpn.anchors.levels[l];
        let hw = lv.height * lv.width;
        let local = k - rpn.level_offsets[l];
        let (a, rem) = (local / hw, local % hw);
        4 * rpn.level_offsets[l] + (a * 4 + j) * hw + rem
    }

    fn decode_proposals<T: Real>(&self, ctx: &Ctx<'_, T>, rpn: &RpnOutput, size: (usize, usize), train: bool) -> Vec<Proposal> {
        let (pre, post) = if train {
            (self.config.rpn_pre_nms_train, self.config.rpn_post_nms_train)
        } else {
            (self.config.rpn_pre_nms_test, self.config.rpn_post_nms_test)
        };
        let logits = &ctx.graph.value(rpn.objectness).data;
        let deltas = &ctx.graph.value(rpn.deltas).data;
        let (h, w) = size;
        let mut candidates = Vec::new();
        for (l, level) in rpn.anchors.levels.iter().enumerate() {
            let off = rpn.level_offsets[l];
            let n = level.anchors.len();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| logits[off + b].as_f64().total_cmp(&logits[off + a].as_f64()).then(a.cmp(&b)));
            for &i in order.iter().take(pre) {
                let k = off + i;
                let mut d = [0.0; 4];
                for (j, dj) in d.iter_mut().enumerate() {
                    *dj = deltas[Self::rpn_delta_index(rpn, k, j)].as_f64();
                }
                d[2] = clamp_scale(d[2]);
                d[3] = clamp_scale(d[3]);
                let Ok(b) = decode_hbb(&d, &level.anchors[i]) else { continue };
                let b = b.clip(w as f64, h as f64);
                if b.width() > 0.5 && b.height() > 0.5 {
                    candidates.push(Proposal { region: b, objectness: sigmoid(logits[k].as_f64()) });
                }
            }
        }
        let keep = hbb_nms(&candidates, self.config.rpn_nms);
        keep.into_iter().take(post).map(|i| candidates[i]).collect()
    }

    /// Region pooling of `regions` from their assigned levels: `[N, 49 * D]`.
    fn region_features<T: Real>(&self, ctx: &mut Ctx<'_, T>, a: &[Var; 4], regions: &[Hbb]) -> Var {
        let cfg = &self.config;
        let reqs: Vec<RoiRequest> = regions
            .iter()
            .map(|r| RoiRequest { level: roi_level(r, cfg), xmin: r.xmin, ymin: r.ymin, xmax: r.xmax, ymax: r.ymax })
            .collect();
        let strides: Vec<f64> = STRIDES.iter().map(|&s| s as f64).collect();
        let pooled = ctx.graph.roi_align(a, &strides, &reqs, cfg.pool_size, cfg.sampling_ratio);
        let n = regions.len();
        ctx.graph.reshape(pooled, vec![n, cfg.pool_size * cfg.pool_size * cfg.fpn_dim])
    }

    /// The region pooled at every level and concatenated along channels:
    /// `[N * 49, 4 * D]`, rows ordered by region then bin.
    pub fn plcnet_pool<T: Real>(ctx: &mut Ctx<'_, T>, a: &[Var; 4], regions: &[Hbb], pool: usize, sampling: usize) -> Var {
        let strides: Vec<f64> = STRIDES.iter().map(|&s| s as f64).collect();
        let d = ctx.graph.value(a[0]).shape[0];
        let n = regions.len();
        let blocks: Vec<Var> = (0..4)
            .map(|l| {
                let reqs: Vec<RoiRequest> = regions
                    .iter()
                    .map(|r| RoiRequest { level: l, xmin: r.xmin, ymin: r.ymin, xmax: r.xmax, ymax: r.ymax })
                    .collect();
                let pooled = ctx.graph.roi_align(a, &strides, &reqs, pool, sampling);
                ctx.graph.reshape(pooled, vec![n * pool * pool, d])
            })
            .collect();
        ctx.graph.concat_cols(&blocks)
    }

    fn local_context<T: Real>(&self, ctx: &mut Ctx<'_, T>, a: &[Var; 4], regions: &[Hbb]) -> Var {
        let cfg = &self.config;
        let cat = Self::plcnet_pool(ctx, a, regions, cfg.pool_size, cfg.sampling_ratio);
        let fused = ctx.linear("plcnet.fuse.0", cat);
        let fused = ctx.graph.relu(fused);
        ctx.graph.group_mean(fused, cfg.pool_size * cfg.pool_size)
    }

    /// Returns `(fused input, class logits, hbb deltas, obb deltas)`; the
    /// deltas are in weighted (training target) units.
    fn head<T: Real>(&self, ctx: &mut Ctx<'_, T>, f: &Features, regions: &[Hbb], zero_context: bool) -> (Var, Var, Var, Var) {
        let n = regions.len();
        let sw = self.config.switches;
        let mut inputs = vec![self.region_features(ctx, &f.a, regions)];
        let mut weights = vec![ctx.param("head.fc1_region.0.weight")];
        if let Some(g) = f.global {
            let g = if zero_context { ctx.graph.constant(Tensor::zeros(ctx.graph.shape(g).to_vec())) } else { g };
            inputs.push(ctx.graph.repeat_rows(g, n));
            weights.push(ctx.param("head.fc1_global.0.weight"));
        }
        if sw.plcnet {
            let l = self.local_context(ctx, &f.a, regions);
            let l = if zero_context { ctx.graph.constant(Tensor::zeros(ctx.graph.shape(l).to_vec())) } else { l };
            inputs.push(l);
            weights.push(ctx.param("head.fc1_local.0.weight"));
        }
        let x = ctx.graph.concat_cols(&inputs);
        let w1 = ctx.graph.concat_cols(&weights);
        let b1 = ctx.param("head.fc1_region.0.bias");
        let h = ctx.graph.linear(x, w1, Some(b1));
        let h = ctx.graph.relu(h);
        let h = ctx.linear("head.fc2.0", h);
        let h = ctx.graph.relu(h);
        let cls = ctx.linear("head.cls.0", h);
        let hbb = ctx.linear("head.hbb.0", h);
        let obb = ctx.linear("head.obb.0", h);
        (x, cls, hbb, obb)
    }

    fn image_var<T: Real>(ctx: &mut Ctx<'_, T>, image: &Tensor<T>) -> Var {
        ctx.graph.constant(image.clone())
    }

    /// Backbone, pyramid, attention and global context for one image.
    pub fn pyramid<T: Real>(&self, values: &[Tensor<T>], image: &Tensor<T>) -> Result<PyramidOutput<T>> {
        Self::check_input(image)?;
        let mut ctx = Ctx::new(&self.params, values, false);
        let x = Self::image_var(&mut ctx, image);
        let f = self.features(&mut ctx, x);
        let get = |v: &[Var]| v.iter().map(|&v| ctx.graph.value(v).clone()).collect::<Vec<_>>();
        Ok(PyramidOutput {
            c: get(&f.c),
            p: get(&f.p),
            s: f.s.map(|s| get(&s)).unwrap_or_default(),
            a: get(&f.a),
            global: f.global.map(|g| ctx.graph.value(g).clone()),
        })
    }

    /// Region proposals with the test-time limits.
    pub fn proposals(&self, image: &Tensor<f32>) -> Result<Vec<Proposal>> {
        let size = Self::check_input(image)?;
        let mut ctx = Ctx::new(&self.params, self.params.tensors(), false);
        let x = Self::image_var(&mut ctx, image);
        let f = self.features(&mut ctx, x);
        let rpn = self.rpn(&mut ctx, &f);
        Ok(self.decode_proposals(&ctx, &rpn, size, false))
    }

    /// Head outputs for given regions. With `zero_context` the global and
    /// local context vectors are replaced by zeros.
    pub fn head_outputs<T: Real>(
        &self,
        values: &[Tensor<T>],
        image: &Tensor<T>,
        regions: &[Hbb],
        zero_context: bool,
    ) -> Result<HeadOutput<T>> {
        Self::check_input(image)?;
        if let Some(r) = regions.iter().find(|r| !(r.width() > 0.0 && r.height() > 0.0)) {
            return Err(ModelError::DegenerateRegion(*r));
        }
        let mut ctx = Ctx::new(&self.params, values, false);
        let x = Self::image_var(&mut ctx, image);
        let f = self.features(&mut ctx, x);
        let (fused, cls, hbb, obb) = self.head(&mut ctx, &f, regions, zero_context);
        let k = self.config.num_classes;
        let unweight = |t: &Tensor<T>, w: &[f64]| {
            let data = t.data.iter().enumerate().map(|(i, &v)| v / T::real(w[i % w.len()])).collect();
            Tensor::new(t.shape.clone(), data)
        };
        let hbb = unweight(ctx.graph.value(hbb), &self.config.hbb_delta_weights);
        let obb = unweight(ctx.graph.value(obb), &self.config.obb_delta_weights);
        debug_assert_eq!(hbb.shape[1], 4 * k);
        Ok(HeadOutput {
            class_logits: ctx.graph.value(cls).clone(),
            hbb_deltas: hbb,
            obb_deltas: obb,
            fused_input: ctx.graph.value(fused).clone(),
        })
    }

    /// Builds the training graph and returns it with the scalar loss.
    ///
    /// `regions` replaces the proposal stage (the regions are used as-is,
    /// without appending the ground truth); otherwise proposals come from the
    /// current RPN outputs plus the ground-truth boxes.
    pub fn loss_graph<'a, T: Real>(
        &'a self,
        values: &'a [Tensor<T>],
        image: &Tensor<T>,
        gts: &[GroundTruth],
        rng: &mut impl Rng,
        regions: Option<&[Hbb]>,
        track: bool,
    ) -> Result<(Ctx<'a, T>, Var, LossTerms)> {
        let size = Self::check_input(image)?;
        let cfg = &self.config;
        let mut ctx = Ctx::new(&self.params, values, track);
        let x = Self::image_var(&mut ctx, image);
        let f = self.features(&mut ctx, x);
        let rpn = self.rpn(&mut ctx, &f);

        // Region proposal losses over sampled anchors.
        let anchors = rpn.anchors.flatten();
        let mut rpn_assign = assign_targets(&anchors, gts, AssignThresholds::RPN)?;
        sample_assignment(&mut rpn_assign, cfg.rpn_batch, cfg.rpn_positive_fraction, rng);
        let mut obj_idx = Vec::new();
        let mut obj_tgt = Vec::new();
        let mut del_idx = Vec::new();
        let mut del_tgt = Vec::new();
        for (k, e) in rpn_assign.entries.iter().enumerate() {
            match e.label {
                Label::Positive(_) => {
                    obj_idx.push(k);
                    obj_tgt.push(T::one());
                    let t = e.hbb_deltas.expect("positive anchors carry deltas");
                    for (j, &tj) in t.iter().enumerate() {
                        del_idx.push(Self::rpn_delta_index(&rpn, k, j));
                        del_tgt.push(T::real(tj));
                    }
                }
                Label::Negative => {
                    obj_idx.push(k);
                    obj_tgt.push(T::zero());
                }
                Label::Ignore => {}
            }
        }
        let sampled = obj_idx.len().max(1);
        let obj = ctx.graph.gather(rpn.objectness, &obj_idx);
        let rpn_class = ctx.graph.bce_with_logits(obj, &obj_tgt);
        let del = ctx.graph.gather(rpn.deltas, &del_idx);
        let rpn_box = ctx.graph.smooth_l1(del, &del_tgt, T::real(cfg.rpn_beta), T::from_usize(sampled).unwrap());

        // Head losses over sampled regions.
        let refs: Vec<Hbb> = match regions {
            Some(r) => r.to_vec(),
            None => {
                let mut r: Vec<Hbb> = self.decode_proposals(&ctx, &rpn, size, true).into_iter().map(|p| p.region).collect();
                r.extend(gts.iter().map(|g| g.hbb));
                r
            }
        };
        let mut assign = assign_targets(&refs, gts, AssignThresholds::HEAD)?;
        if regions.is_none() {
            sample_assignment(&mut assign, cfg.head_batch, cfg.head_positive_fraction, rng);
        }
        let chosen: Vec<usize> = (0..refs.len()).filter(|&i| assign.entries[i].label != Label::Ignore).collect();
        let chosen_boxes: Vec<Hbb> = chosen.iter().map(|&i| refs[i]).collect();
        let k = cfg.num_classes;
        let mut labels = Vec::with_capacity(chosen.len());
        let (mut hi, mut ht, mut oi, mut ot) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut positives = 0usize;
        for (row, &i) in chosen.iter().enumerate() {
            let e = &assign.entries[i];
            match e.label {
                Label::Positive(c) => {
                    labels.push(c + 1);
                    positives += 1;
                    let t = e.hbb_deltas.expect("positive regions carry deltas");
                    for j in 0..4 {
                        hi.push(row * 4 * k + c * 4 + j);
                        ht.push(T::real(t[j] * cfg.hbb_delta_weights[j]));
                    }
                    if let Some(t) = e.obb_deltas {
                        for j in 0..5 {
                            oi.push(row * 5 * k + c * 5 + j);
                            ot.push(T::real(t[j] * cfg.obb_delta_weights[j]));
                        }
                    }
                }
                _ => labels.push(0),
            }
        }
        let zero = ctx.graph.constant(Tensor::scalar(T::zero()));
        let (class, hbb, obb) = if chosen.is_empty() {
            (zero, zero, zero)
        } else {
            let (_, cls, hbb_out, obb_out) = self.head(&mut ctx, &f, &chosen_boxes, false);
            let class = ctx.graph.softmax_cross_entropy(cls, &labels);
            let div = T::from_usize(positives.max(1)).unwrap();
            let beta = T::real(cfg.beta);
            let hp = ctx.graph.gather(hbb_out, &hi);
            let hbb = ctx.graph.smooth_l1(hp, &ht, beta, div);
            let op = ctx.graph.gather(obb_out, &oi);
            let obb = ctx.graph.smooth_l1(op, &ot, beta, div);
            (class, hbb, obb)
        };
        let one = T::one();
        let total = ctx.graph.weighted_sum(&[
            (rpn_class, one),
            (rpn_box, one),
            (class, one),
            (hbb, T::real(cfg.hbb_weight)),
            (obb, T::real(cfg.obb_weight)),
        ]);
        let v = |x: Var| ctx.graph.value(x).data[0].as_f64();
        let terms = LossTerms {
            total: v(total),
            rpn_class: v(rpn_class),
            rpn_box: v(rpn_box),
            class: v(class),
            hbb: v(hbb),
            obb: v(obb),
        };
        Ok((ctx, total, terms))
    }

    /// Loss terms and the gradient of the total loss for every parameter.
    pub fn loss_and_grads<T: Real>(
        &self,
        values: &[Tensor<T>],
        image: &Tensor<T>,
        gts: &[GroundTruth],
        rng: &mut impl Rng,
        regions: Option<&[Hbb]>,
    ) -> Result<(LossTerms, ParamGrads<T>)> {
        let (ctx, total, terms) = self.loss_graph(values, image, gts, rng, regions, true)?;
        let grads = ctx.graph.backward(total);
        Ok((terms, grads))
    }

    /// Loss terms only.
    pub fn loss<T: Real>(
        &self,
        values: &[Tensor<T>],
        image: &Tensor<T>,
        gts: &[GroundTruth],
        rng: &mut impl Rng,
        regions: Option<&[Hbb]>,
    ) -> Result<LossTerms> {
        Ok(self.loss_graph(values, image, gts, rng, regions, false)?.2)
    }

    /// Scored oriented and horizontal detections for one normalized image,
    /// after class-wise NMS.
    pub fn detect(&self, image: &Tensor<f32>) -> Result<Detections> {
        let (h, w) = Self::check_input(image)?;
        let proposals = self.proposals(image)?;
        if proposals.is_empty() {
            return Ok(Detections::default());
        }
        let regions: Vec<Hbb> = proposals.iter().map(|p| p.region).collect();
        let out = self.head_outputs(self.params.tensors(), image, &regions, false)?;
        let k = self.config.num_classes;
        let mut obb = Vec::new();
        let mut hbb = Vec::new();
        for (i, r) in regions.iter().enumerate() {
            let logits: Vec<f64> = out.class_logits.data[i * (k + 1)..(i + 1) * (k + 1)].iter().map(|v| v.as_f64()).collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for c in 0..k {
                let score = (logits[c + 1] - m).exp() / z;
                if score < self.config.score_threshold {
                    continue;
                }
                let hd = &out.hbb_deltas.data[i * 4 * k + c * 4..i * 4 * k + c * 4 + 4];
                let mut d4 = [0.0; 4];
                d4.iter_mut().zip(hd).for_each(|(a, b)| *a = b.as_f64());
                d4[2] = clamp_scale(d4[2]);
                d4[3] = clamp_scale(d4[3]);
                let b = decode_hbb(&d4, r)?.clip(w as f64, h as f64);
                if b.width() > 0.0 && b.height() > 0.0 {
                    hbb.push(ScoredDetection::new(BoxShape::Hbb(b), c, score));
                }
                let od = &out.obb_deltas.data[i * 5 * k + c * 5..i * 5 * k + c * 5 + 5];
                let mut d5 = [0.0; 5];
                d5.iter_mut().zip(od).for_each(|(a, b)| *a = b.as_f64());
                d5[2] = clamp_scale(d5[2]);
                d5[3] = clamp_scale(d5[3]);
                let o = decode_obb(&d5, r)?;
                obb.push(ScoredDetection::new(BoxShape::Quad(obb_to_quad(&o)), c, score));
            }
        }
        let finish = |dets: Vec<ScoredDetection>| -> Result<Vec<ScoredDetection>> {
            let keep = rotated_nms(&dets, self.config.nms_threshold)?;
            Ok(keep.into_iter().take(self.config.max_detections).map(|i| dets[i]).collect())
        };
        Ok(Detections { obb: finish(obb)?, hbb: finish(hbb)? })
    }
}
