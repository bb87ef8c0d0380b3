//! Reverse-mode automatic differentiation over a single forward pass.
//!
//! A [`Graph`] records every op applied to its [`Var`]s together with a
//! closure that propagates the output gradient to the op's inputs. Inputs
//! that do not depend on a parameter are marked as constants and get no
//! gradient.

use crate::tensor::{gemm, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

type Backward<T> = Box<dyn Fn(&[T], &[Node<T>], &mut GradBuf<T>)>;

pub struct Node<T> {
    value: Tensor<T>,
    backward: Option<Backward<T>>,
}

/// Lazily allocated gradient buffers, one per node.
pub struct GradBuf<T> {
    grads: Vec<Option<Vec<T>>>,
    lens: Vec<usize>,
}

impl<T: Real> GradBuf<T> {
    fn get(&mut self, id: usize) -> &mut [T] {
        let len = self.lens[id];
        self.grads[id].get_or_insert_with(|| vec![T::zero(); len])
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    needs_grad: Vec<bool>,
    params: Vec<(usize, usize)>,
    track: bool,
}

/// Gradients for the parameters used in a graph, keyed by parameter index.
pub type ParamGrads<T> = Vec<(usize, Vec<T>)>;

/// Bilinear sampling table for region pooling: each entry adds
/// `weight * level[c, spatial]` to output row `row`.
struct RoiSample<T> {
    row: u32,
    level: u8,
    spatial: u32,
    weight: T,
}

/// One region to pool: which feature level to read and the box in image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiRequest {
    pub level: usize,
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl<T: Real> Graph<T> {
    /// With `track = false` no backward closures are recorded.
    pub fn new(track: bool) -> Self {
        Self { nodes: Vec::new(), needs_grad: Vec::new(), params: Vec::new(), track }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], backward: Option<Backward<T>>) -> Var {
        let needs = self.track && inputs.iter().any(|v| self.needs_grad[v.0]);
        self.nodes.push(Node { value, backward: if needs { backward } else { None } });
        self.needs_grad.push(needs);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, &[], None)
    }

    /// Leaf for parameter `index`; its gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, index: usize, value: &Tensor<T>) -> Var {
        self.nodes.push(Node { value: value.clone(), backward: None });
        self.needs_grad.push(self.track);
        let id = self.nodes.len() - 1;
        self.params.push((id, index));
        Var(id)
    }

    /// Back-propagates from a scalar and returns every parameter's gradient.
    pub fn backward(&self, loss: Var) -> ParamGrads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut buf = GradBuf {
            grads: (0..self.nodes.len()).map(|_| None).collect(),
            lens: self.nodes.iter().map(|n| n.value.len()).collect(),
        };
        buf.grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = buf.grads[id].take() else { continue };
            if let Some(f) = &self.nodes[id].backward {
                f(&g, &self.nodes, &mut buf);
            }
            buf.grads[id] = Some(g);
        }
        self.params
            .iter()
            .map(|&(node, index)| {
                let g = buf.grads[node].take().unwrap_or_else(|| vec![T::zero(); self.nodes[node].value.len()]);
                (index, g)
            })
            .collect()
    }

    /// 2-D convolution of a single `[C, H, W]` input with `[O, C, k, k]`
    /// weights and optional `[O]` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (c, h, wd) = self.value(x).chw();
        let ws = self.shape(w).to_vec();
        assert!(ws.len() == 4 && ws[1] == c && ws[2] == ws[3], "conv weight {ws:?} vs input channels {c}");
        let (o, k) = (ws[0], ws[2]);
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "kernel larger than padded input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom { c, h, w: wd, k, stride, pad, ho, wo };
        let ckk = c * k * k;
        let hw = ho * wo;

        let mut out = vec![T::zero(); o * hw];
        {
            let xv = &self.value(x).data;
            let cols_owned;
            let cols: &[T] = if geom.is_pointwise() {
                xv
            } else {
                cols_owned = im2col(xv, &geom);
                &cols_owned
            };
            gemm(o, ckk, hw, &self.value(w).data, false, cols, false, &mut out, false);
        }
        if let Some(b) = b {
            let bv = &self.value(b).data;
            for (oc, row) in out.chunks_mut(hw).enumerate() {
                let bias = bv[oc];
                row.iter_mut().for_each(|v| *v += bias);
            }
        }

        let (nx, nw, nb) = (self.needs(x), self.needs(w), b.is_some_and(|b| self.needs(b)));
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(
            Tensor::new(vec![o, ho, wo], out),
            &inputs,
            Some(Box::new(move |g, nodes, buf| {
                let xv = &nodes[x.0].value.data;
                let wv = &nodes[w.0].value.data;
                let cols_owned;
                let cols: &[T] = if geom.is_pointwise() {
                    xv
                } else {
                    cols_owned = im2col(xv, &geom);
                    &cols_owned
                };
                if nw {
                    gemm(o, hw, ckk, g, false, cols, true, buf.get(w.0), true);
                }
                if nb {
                    let db = buf.get(b.unwrap().0);
                    for (oc, row) in g.chunks(hw).enumerate() {
                        db[oc] += row.iter().copied().sum();
                    }
                }
                if nx {
                    if geom.is_pointwise() {
                        gemm(ckk, o, hw, wv, true, g, false, buf.get(x.0), true);
                    } else {
                        let mut dcols = vec![T::zero(); ckk * hw];
                        gemm(ckk, o, hw, wv, true, g, false, &mut dcols, false);
                        col2im(&dcols, &geom, buf.get(x.0));
                    }
                }
            })),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape.clone(), v.data.iter().map(|&a| a.max(T::zero())).collect());
        self.push(
            out,
            &[x],
            Some(Box::new(move |g, nodes, buf| {
                let xv = &nodes[x.0].value.data;
                let dx = buf.get(x.0);
                for i in 0..g.len() {
                    if xv[i] > T::zero() {
                        dx[i] += g[i];
                    }
                }
            })),
        )
    }

    /// Logistic function, kept strictly inside `(0, 1)` even where the
    /// floating-point result would round to an endpoint.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let lo = T::min_positive_value();
        let hi = T::one() - T::epsilon() / T::real(2.0);
        let out = Tensor::new(v.shape.clone(), v.data.iter().map(|&a| sigmoid(a).max(lo).min(hi)).collect());
        let y = out.data.clone();
        self.push(
            out,
            &[x],
            Some(Box::new(move |g, _, buf| {
                let dx = buf.get(x.0);
                for i in 0..g.len() {
                    dx[i] += g[i] * y[i] * (T::one() - y[i]);
                }
            })),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let av = self.value(a);
        let bv = self.value(b);
        let out = Tensor::new(av.shape.clone(), av.data.iter().zip(&bv.data).map(|(&p, &q)| p + q).collect());
        let needs = [(a, self.needs(a)), (b, self.needs(b))];
        self.push(
            out,
            &[a, b],
            Some(Box::new(move |g, _, buf| {
                for (v, n) in needs {
                    if n {
                        buf.get(v.0).iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                    }
                }
            })),
        )
    }

    /// `s` is `[1, H, W]`, `p` is `[C, H, W]`; returns `s * p` with `s`
    /// broadcast over channels.
    pub fn mul_spatial(&mut self, s: Var, p: Var) -> Var {
        let (c, h, w) = self.value(p).chw();
        assert_eq!(self.shape(s), &[1, h, w], "attention map shape");
        let hw = h * w;
        let sv = &self.value(s).data;
        let pv = &self.value(p).data;
        let mut out = Vec::with_capacity(c * hw);
        for ch in 0..c {
            out.extend((0..hw).map(|i| sv[i] * pv[ch * hw + i]));
        }
        let (ns, np) = (self.needs(s), self.needs(p));
        self.push(
            Tensor::new(vec![c, h, w], out),
            &[s, p],
            Some(Box::new(move |g, nodes, buf| {
                if np {
                    let sv = nodes[s.0].value.data.clone();
                    let dp = buf.get(p.0);
                    for ch in 0..c {
                        for i in 0..hw {
                            dp[ch * hw + i] += g[ch * hw + i] * sv[i];
                        }
                    }
                }
                if ns {
                    let pv = nodes[p.0].value.data.clone();
                    let ds = buf.get(s.0);
                    for ch in 0..c {
                        for i in 0..hw {
                            ds[i] += g[ch * hw + i] * pv[ch * hw + i];
                        }
                    }
                }
            })),
        )
    }

    /// Nearest-neighbour resize of `[C, h, w]` to `[C, out_h, out_w]`.
    pub fn upsample_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        let map: Vec<usize> = (0..out_h)
            .flat_map(|y| {
                let sy = (y * h / out_h).min(h - 1);
                (0..out_w).map(move |xx| sy * w + (xx * w / out_w).min(w - 1))
            })
            .collect();
        let xv = &self.value(x).data;
        let mut out = Vec::with_capacity(c * map.len());
        for ch in 0..c {
            out.extend(map.iter().map(|&i| xv[ch * h * w + i]));
        }
        self.push(
            Tensor::new(vec![c, out_h, out_w], out),
            &[x],
            Some(Box::new(move |g, _, buf| {
                let dx = buf.get(x.0);
                let n = map.len();
                for ch in 0..c {
                    for (j, &i) in map.iter().enumerate() {
                        dx[ch * h * w + i] += g[ch * n + j];
                    }
                }
            })),
        )
    }

    /// Spatial mean of `[C, H, W]`, giving `[C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).unwrap();
        let xv = &self.value(x).data;
        let out: Vec<T> = (0..c).map(|ch| xv[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>() * inv).collect();
        self.push(
            Tensor::new(vec![c], out),
            &[x],
            Some(Box::new(move |g, _, buf| {
                let dx = buf.get(x.0);
                for ch in 0..c {
                    let v = g[ch] * inv;
                    dx[ch * hw..(ch + 1) * hw].iter_mut().for_each(|d| *d += v);
                }
            })),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let v = self.value(x);
        let out = Tensor::new(shape, v.data.clone());
        self.push(
            out,
            &[x],
            Some(Box::new(move |g, _, buf| {
                buf.get(x.0).iter_mut().zip(g).for_each(|(d, &g)| *d += g);
            })),
        )
    }

    /// Concatenates along the last axis, viewing each input as
    /// `[shape[0], rest]`. All inputs must share `shape[0]`.
    pub fn concat_cols(&mut self, vars: &[Var]) -> Var {
        let rows = self.shape(vars[0])[0];
        let widths: Vec<usize> = vars
            .iter()
            .map(|&v| {
                let t = self.value(v);
                assert_eq!(t.shape[0], rows, "concat row mismatch");
                t.len() / rows
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &wd) in vars.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data[r * wd..(r + 1) * wd]);
            }
        }
        let vars_owned: Vec<(Var, bool)> = vars.iter().map(|&v| (v, self.needs(v))).collect();
        self.push(
            Tensor::new(vec![rows, total], out),
            vars,
            Some(Box::new(move |g, _, buf| {
                let mut offset = 0;
                for (&(v, n), &wd) in vars_owned.iter().zip(&widths) {
                    if n {
                        let d = buf.get(v.0);
                        for r in 0..rows {
                            for j in 0..wd {
                                d[r * wd + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += wd;
                }
            })),
        )
    }

    /// `x [R, In] * w[Out, In]^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1], "linear shapes {xs:?} x {ws:?}");
        let (r, inp, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); r * o];
        gemm(r, inp, o, &self.value(x).data, false, &self.value(w).data, true, &mut out, false);
        if let Some(b) = b {
            let bv = &self.value(b).data;
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bv).for_each(|(v, &b)| *v += b);
            }
        }
        let (nx, nw, nb) = (self.needs(x), self.needs(w), b.is_some_and(|b| self.needs(b)));
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(
            Tensor::new(vec![r, o], out),
            &inputs,
            Some(Box::new(move |g, nodes, buf| {
                if nx {
                    gemm(r, o, inp, g, false, &nodes[w.0].value.data, false, buf.get(x.0), true);
                }
                if nw {
                    gemm(o, r, inp, g, true, &nodes[x.0].value.data, false, buf.get(w.0), true);
                }
                if nb {
                    let db = buf.get(b.unwrap().0);
                    for row in g.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                }
            })),
        )
    }

    /// Mean over consecutive groups of `group` rows: `[N * group, C] -> [N, C]`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (rows, c) = (xs[0], self.value(x).len() / xs[0]);
        assert_eq!(rows % group, 0, "rows not divisible by group");
        let n = rows / group;
        let inv = T::one() / T::from_usize(group).unwrap();
        let xv = &self.value(x).data;
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            for gi in 0..group {
                let src = &xv[(i * group + gi) * c..(i * group + gi + 1) * c];
                out[i * c..(i + 1) * c].iter_mut().zip(src).for_each(|(o, &s)| *o += s);
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        self.push(
            Tensor::new(vec![n, c], out),
            &[x],
            Some(Box::new(move |g, _, buf| {
                let dx = buf.get(x.0);
                for i in 0..n {
                    for gi in 0..group {
                        let row = (i * group + gi) * c;
                        for j in 0..c {
                            dx[row + j] += g[i * c + j] * inv;
                        }
                    }
                }
            })),
        )
    }

    /// `[D] -> [n, D]`.
    pub fn repeat_rows(&mut self, v: Var, n: usize) -> Var {
        let d = self.value(v).len();
        let vv = &self.value(v).data;
        let out: Vec<T> = (0..n).flat_map(|_| vv.iter().copied()).collect();
        self.push(
            Tensor::new(vec![n, d], out),
            &[v],
            Some(Box::new(move |g, _, buf| {
                let dv = buf.get(v.0);
                for row in g.chunks(d) {
                    dv.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                }
            })),
        )
    }

    /// Bilinear region pooling to an `out x out` grid with
    /// `sampling x sampling` samples per bin, pixel centres at `+0.5`.
    ///
    /// `levels` are `[C, H, W]` maps with the given `strides`. Returns
    /// `[N, out * out, C]`.
    pub fn roi_align(&mut self, levels: &[Var], strides: &[f64], rois: &[RoiRequest], out: usize, sampling: usize) -> Var {
        let dims: Vec<(usize, usize, usize)> = levels.iter().map(|&l| self.value(l).chw()).collect();
        let c = dims[0].0;
        assert!(dims.iter().all(|d| d.0 == c), "roi_align levels differ in channels");
        let bins = out * out;
        let table = roi_sample_table::<T>(&dims, strides, rois, out, sampling);
        // Channel-last copies keep the per-sample channel loop contiguous.
        let hwc: Vec<Vec<T>> = levels.iter().map(|&l| to_channel_last(&self.value(l).data, c)).collect();
        let mut data = vec![T::zero(); rois.len() * bins * c];
        for s in &table {
            let src = &hwc[s.level as usize][s.spatial as usize * c..(s.spatial as usize + 1) * c];
            let dst = &mut data[s.row as usize * c..(s.row as usize + 1) * c];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d += s.weight * v;
            }
        }
        let levels_owned: Vec<(Var, bool)> = levels.iter().map(|&v| (v, self.needs(v))).collect();
        self.push(
            Tensor::new(vec![rois.len(), bins, c], data),
            levels,
            Some(Box::new(move |g, _, buf| {
                let mut acc: Vec<Vec<T>> = dims.iter().map(|&(_, h, w)| vec![T::zero(); h * w * c]).collect();
                for s in &table {
                    if !levels_owned[s.level as usize].1 {
                        continue;
                    }
                    let src = &g[s.row as usize * c..(s.row as usize + 1) * c];
                    let dst = &mut acc[s.level as usize][s.spatial as usize * c..(s.spatial as usize + 1) * c];
                    for (d, &gv) in dst.iter_mut().zip(src) {
                        *d += s.weight * gv;
                    }
                }
                for ((lv, n), a) in levels_owned.iter().zip(&acc) {
                    if !n {
                        continue;
                    }
                    let d = buf.get(lv.0);
                    let hw = a.len() / c;
                    for p in 0..hw {
                        for ch in 0..c {
                            d[ch * hw + p] += a[p * c + ch];
                        }
                    }
                }
            })),
        )
    }

    /// Flat element selection.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Var {
        let xv = &self.value(x).data;
        let out: Vec<T> = indices.iter().map(|&i| xv[i]).collect();
        let idx = indices.to_vec();
        self.push(
            Tensor::new(vec![idx.len()], out),
            &[x],
            Some(Box::new(move |g, _, buf| {
                let dx = buf.get(x.0);
                for (&i, &gv) in idx.iter().zip(g) {
                    dx[i] += gv;
                }
            })),
        )
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let s = self.shape(logits).to_vec();
        let (n, k) = (s[0], s[1]);
        assert_eq!(labels.len(), n, "one label per row");
        let lv = &self.value(logits).data;
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for i in 0..n {
            let row = &lv[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - m).exp() / z;
            }
            loss += z.ln() + m - row[labels[i]];
        }
        let inv = if n > 0 { T::one() / T::from_usize(n).unwrap() } else { T::zero() };
        let labels = labels.to_vec();
        self.push(
            Tensor::scalar(loss * inv),
            &[logits],
            Some(Box::new(move |g, _, buf| {
                let d = buf.get(logits.0);
                let scale = g[0] * inv;
                for i in 0..n {
                    for j in 0..k {
                        let onehot = if j == labels[i] { T::one() } else { T::zero() };
                        d[i * k + j] += scale * (probs[i * k + j] - onehot);
                    }
                }
            })),
        )
    }

    /// `sum(smooth_l1(pred - target)) / divisor`.
    pub fn smooth_l1(&mut self, pred: Var, target: &[T], beta: T, divisor: T) -> Var {
        let pv = &self.value(pred).data;
        assert_eq!(pv.len(), target.len(), "smooth_l1 length mismatch");
        let diff: Vec<T> = pv.iter().zip(target).map(|(&p, &t)| p - t).collect();
        let half = T::real(0.5);
        let loss: T = diff
            .iter()
            .map(|&d| if d.abs() < beta { half * d * d / beta } else { d.abs() - half * beta })
            .sum();
        self.push(
            Tensor::scalar(loss / divisor),
            &[pred],
            Some(Box::new(move |g, _, buf| {
                let dp = buf.get(pred.0);
                let scale = g[0] / divisor;
                for (dv, &d) in dp.iter_mut().zip(&diff) {
                    let grad = if d.abs() < beta { d / beta } else { d.signum() };
                    *dv += scale * grad;
                }
            })),
        )
    }

    /// Mean binary cross-entropy with logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Var {
        let xv = &self.value(logits).data;
        assert_eq!(xv.len(), targets.len(), "bce length mismatch");
        let n = xv.len();
        let inv = if n > 0 { T::one() / T::from_usize(n).unwrap() } else { T::zero() };
        let loss: T = xv
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln())
            .sum();
        let grads: Vec<T> = xv.iter().zip(targets).map(|(&x, &t)| sigmoid(x) - t).collect();
        self.push(
            Tensor::scalar(loss * inv),
            &[logits],
            Some(Box::new(move |g, _, buf| {
                let d = buf.get(logits.0);
                for (dv, &gr) in d.iter_mut().zip(&grads) {
                    *dv += g[0] * inv * gr;
                }
            })),
        )
    }

    /// `sum(weight * scalar)` over scalar vars.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let total: T = terms.iter().map(|&(v, w)| self.value(v).data[0] * w).sum();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let terms: Vec<(Var, T, bool)> = terms.iter().map(|&(v, w)| (v, w, self.needs(v))).collect();
        self.push(
            Tensor::scalar(total),
            &vars,
            Some(Box::new(move |g, _, buf| {
                for &(v, w, n) in &terms {
                    if n {
                        buf.get(v.0)[0] += g[0] * w;
                    }
                }
            })),
        )
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let hw = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.c * g.k * g.k * hw];
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * hw;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = ci * g.h * g.w + iy as usize * g.w;
                    let dst = row + oy * g.wo;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            cols[dst + ox] = x[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hw = g.ho * g.wo;
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * hw;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = ci * g.h * g.w + iy as usize * g.w;
                    let src = row + oy * g.wo;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[dst + ix as usize] += cols[src + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear weights for one sample point in feature coordinates; empty when
/// the point is more than one cell outside the map.
fn bilinear(y: f64, x: f64, h: usize, w: usize) -> Vec<(usize, f64)> {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return Vec::new();
    }
    let (mut y, mut x) = (y.max(0.0), x.max(0.0));
    let mut y0 = y.floor() as usize;
    let mut x0 = x.floor() as usize;
    let y1 = if y0 >= h - 1 {
        y0 = h - 1;
        y = y0 as f64;
        y0
    } else {
        y0 + 1
    };
    let x1 = if x0 >= w - 1 {
        x0 = w - 1;
        x = x0 as f64;
        x0
    } else {
        x0 + 1
    };
    let (ly, lx) = (y - y0 as f64, x - x0 as f64);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    vec![
        (y0 * w + x0, hy * hx),
        (y0 * w + x1, hy * lx),
        (y1 * w + x0, ly * hx),
        (y1 * w + x1, ly * lx),
    ]
}

fn to_channel_last<T: Real>(chw: &[T], c: usize) -> Vec<T> {
    let hw = chw.len() / c;
    let mut out = vec![T::zero(); chw.len()];
    for ch in 0..c {
        for p in 0..hw {
            out[p * c + ch] = chw[ch * hw + p];
        }
    }
    out
}

fn roi_sample_table<T: Real>(
    dims: &[(usize, usize, usize)],
    strides: &[f64],
    rois: &[RoiRequest],
    out: usize,
    sampling: usize,
) -> Vec<RoiSample<T>> {
    let mut table = Vec::new();
    let count = (sampling * sampling) as f64;
    for (n, r) in rois.iter().enumerate() {
        let (_, h, w) = dims[r.level];
        let scale = 1.0 / strides[r.level];
        let x1 = r.xmin * scale - 0.5;
        let y1 = r.ymin * scale - 0.5;
        let bin_w = (r.xmax - r.xmin) * scale / out as f64;
        let bin_h = (r.ymax - r.ymin) * scale / out as f64;
        for py in 0..out {
            for px in 0..out {
                let row = (n * out * out + py * out + px) as u32;
                for iy in 0..sampling {
                    let y = y1 + py as f64 * bin_h + (iy as f64 + 0.5) * bin_h / sampling as f64;
                    for ix in 0..sampling {
                        let x = x1 + px as f64 * bin_w + (ix as f64 + 0.5) * bin_w / sampling as f64;
                        for (spatial, wgt) in bilinear(y, x, h, w) {
                            if wgt != 0.0 {
                                table.push(RoiSample {
                                    row,
                                    level: r.level as u8,
                                    spatial: spatial as u32,
                                    weight: T::real(wgt / count),
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    table
}
