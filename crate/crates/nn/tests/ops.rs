use cadnet_nn::graph::{Graph, RoiRequest, Var};
use cadnet_nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (c, h, wd) = x.chw();
    let (o, k) = (w.shape[0], w.shape[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; o * ho * wo];
    for oc in 0..o {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b[oc];
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += w.data[((oc * c + ci) * k + ky) * k + kx]
                                    * x.data[(ci * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                }
                out[(oc * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Tensor::new(vec![o, ho, wo], out)
}

#[test]
fn conv_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(c, h, w, o, k, stride, pad) in &[
        (3, 8, 6, 4, 3, 1, 1),
        (2, 9, 7, 3, 3, 2, 1),
        (5, 4, 4, 2, 1, 1, 0),
        (1, 5, 5, 1, 3, 2, 0),
    ] {
        let x = random(&mut rng, vec![c, h, w]);
        let wt = random(&mut rng, vec![o, c, k, k]);
        let b = random(&mut rng, vec![o]);
        let mut g = Graph::new(false);
        let xv = g.constant(x.clone());
        let wv = g.constant(wt.clone());
        let bv = g.constant(b.clone());
        let y = g.conv2d(xv, wv, Some(bv), stride, pad);
        let expect = naive_conv(&x, &wt, &b.data, stride, pad);
        assert_eq!(g.value(y).shape, expect.shape);
        for (a, e) in g.value(y).data.iter().zip(&expect.data) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

/// Central differences of a scalar-valued graph builder against its
/// analytic gradients for every input.
fn check_grads(inputs: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let run = |vals: &[Tensor<f64>], track: bool| {
        let mut g = Graph::new(track);
        let vars: Vec<Var> = vals.iter().enumerate().map(|(i, t)| g.param(i, t)).collect();
        let out = build(&mut g, &vars);
        (g, out)
    };
    let (g, out) = run(inputs, true);
    let grads = g.backward(out);
    let eps = 1e-6;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data[j] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data[j] -= eps;
            let (gp, op) = run(&plus, false);
            let (gm, om) = run(&minus, false);
            let numeric = (gp.value(op).data[0] - gm.value(om).data[0]) / (2.0 * eps);
            let analytic = grads[i].1[j];
            let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(err < 1e-5, "input {i} element {j}: analytic {analytic} numeric {numeric}");
        }
    }
}

fn weighted(g: &mut Graph<f64>, v: Var, seed: u64) -> Var {
    let n = g.value(v).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let flat = g.reshape(v, vec![n]);
    let idx: Vec<usize> = (0..n).collect();
    let picked = g.gather(flat, &idx);
    g.smooth_l1(picked, &w, 100.0, 1.0)
}

#[test]
fn conv_and_pointwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, vec![2, 5, 5]);
    let w = random(&mut rng, vec![3, 2, 3, 3]);
    let b = random(&mut rng, vec![3]);
    check_grads(&[x.clone(), w, b], |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1);
        weighted(g, y, 9)
    });
    let w1 = random(&mut rng, vec![4, 2, 1, 1]);
    check_grads(&[x, w1], |g, v| {
        let y = g.conv2d(v[0], v[1], None, 1, 0);
        let s = g.sigmoid(y);
        weighted(g, s, 10)
    });
}

#[test]
fn spatial_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = random(&mut rng, vec![1, 3, 4]);
    let p = random(&mut rng, vec![2, 3, 4]);
    check_grads(&[s, p.clone()], |g, v| {
        let y = g.mul_spatial(v[0], v[1]);
        weighted(g, y, 11)
    });
    check_grads(std::slice::from_ref(&p), |g, v| {
        let up = g.upsample_nearest(v[0], 6, 8);
        let pooled = g.global_avg_pool(up);
        weighted(g, pooled, 12)
    });
    let q = random(&mut rng, vec![2, 3, 4]);
    check_grads(&[p, q], |g, v| {
        let y = g.add(v[0], v[1]);
        let r = g.relu(y);
        weighted(g, r, 13)
    });
}

#[test]
fn dense_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, vec![6, 3]);
    let w = random(&mut rng, vec![4, 3]);
    let b = random(&mut rng, vec![4]);
    let v = random(&mut rng, vec![2]);
    check_grads(&[x, w, b, v], |g, vars| {
        let y = g.linear(vars[0], vars[1], Some(vars[2]));
        let r = g.repeat_rows(vars[3], 6);
        let cat = g.concat_cols(&[y, r]);
        let m = g.group_mean(cat, 3);
        weighted(g, m, 14)
    });
}

#[test]
fn loss_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = random(&mut rng, vec![4, 3]);
    check_grads(std::slice::from_ref(&logits), |g, v| g.softmax_cross_entropy(v[0], &[0, 2, 1, 2]));
    let x = random(&mut rng, vec![5]);
    check_grads(std::slice::from_ref(&x), |g, v| g.bce_with_logits(v[0], &[1.0, 0.0, 0.0, 1.0, 1.0]));
    check_grads(std::slice::from_ref(&x), |g, v| g.smooth_l1(v[0], &[0.9, 0.1, -2.0, 0.3, 0.0], 0.5, 3.0));
    check_grads(&[x.clone(), logits], |g, v| {
        let a = g.bce_with_logits(v[0], &[1.0, 0.0, 0.0, 1.0, 1.0]);
        let b = g.softmax_cross_entropy(v[1], &[1, 1, 0, 2]);
        g.weighted_sum(&[(a, 0.3), (b, 2.0)])
    });
}

#[test]
fn cross_entropy_and_bce_values() {
    let mut g = Graph::<f64>::new(false);
    let l = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]));
    let ce = g.softmax_cross_entropy(l, &[1]);
    assert!((g.value(ce).data[0] - 2f64.ln()).abs() < 1e-15);
    let x = g.constant(Tensor::new(vec![2], vec![0.0, 800.0]));
    let bce = g.bce_with_logits(x, &[1.0, 1.0]);
    assert!((g.value(bce).data[0] - 2f64.ln() / 2.0).abs() < 1e-12);
}

fn roi(level: usize, xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> RoiRequest {
    RoiRequest { level, xmin, ymin, xmax, ymax }
}

#[test]
fn roi_align_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let f0 = random(&mut rng, vec![2, 6, 6]);
    let f1 = random(&mut rng, vec![2, 3, 3]);
    check_grads(&[f0, f1], |g, v| {
        let rois = [roi(0, 2.0, 3.0, 17.0, 20.0), roi(1, -3.0, 1.0, 40.0, 30.0)];
        let y = g.roi_align(&[v[0], v[1]], &[4.0, 8.0], &rois, 3, 2);
        weighted(g, y, 15)
    });
}

#[test]
fn roi_align_constant_map_gives_constant_grid() {
    let mut g = Graph::<f64>::new(false);
    let f = g.constant(Tensor::full(vec![2, 8, 8], 0.75));
    // One cell at stride 4, and boxes touching the border.
    let rois = [roi(0, 12.0, 12.0, 16.0, 16.0), roi(0, 0.0, 0.0, 32.0, 32.0), roi(0, 30.0, 1.0, 32.0, 3.0)];
    let y = g.roi_align(&[f], &[4.0], &rois, 7, 2);
    assert_eq!(g.shape(y), &[3, 49, 2]);
    for v in &g.value(y).data {
        assert!((v - 0.75).abs() < 1e-12);
    }
}

#[test]
fn roi_align_single_sample_is_identity_crop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let map = random(&mut rng, vec![3, 12, 10]);
    let mut g = Graph::<f64>::new(false);
    let f = g.constant(map.clone());
    let stride = 8.0;
    let (x0, y0) = (2usize, 4usize);
    let rois = [roi(0, x0 as f64 * stride, y0 as f64 * stride, (x0 + 7) as f64 * stride, (y0 + 7) as f64 * stride)];
    let y = g.roi_align(&[f], &[stride], &rois, 7, 1);
    let out = &g.value(y).data;
    for py in 0..7 {
        for px in 0..7 {
            for c in 0..3 {
                let expect = map.data[(c * 12 + y0 + py) * 10 + x0 + px];
                assert_eq!(out[(py * 7 + px) * 3 + c], expect);
            }
        }
    }
}

/// Bilinear interpolation of one channel with zero contribution outside
/// `[-1, size]` and edge clamping inside it.
fn bilinear_oracle(map: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return 0.0;
    }
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ly, lx) = (y - y0 as f64, x - x0 as f64);
    map[y0 * w + x0] * (1.0 - ly) * (1.0 - lx)
        + map[y0 * w + x1] * (1.0 - ly) * lx
        + map[y1 * w + x0] * ly * (1.0 - lx)
        + map[y1 * w + x1] * ly * lx
}

#[test]
fn roi_align_matches_dense_integration() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (h, w, stride) = (9usize, 11usize, 4.0);
    for _ in 0..20 {
        let map = random(&mut rng, vec![1, h, w]);
        let x1 = rng.random_range(0.0..30.0);
        let y1 = rng.random_range(0.0..25.0);
        let bw = rng.random_range(4.0..14.0);
        let bh = rng.random_range(4.0..10.0);
        let mut g = Graph::<f64>::new(false);
        let f = g.constant(map.clone());
        let y = g.roi_align(&[f], &[stride], &[roi(0, x1, y1, x1 + bw, y1 + bh)], 7, 32);
        let out = &g.value(y).data;
        // 100x oversampling of each bin in feature coordinates.
        let (fx, fy) = (x1 / stride - 0.5, y1 / stride - 0.5);
        let (cw, ch) = (bw / stride / 7.0, bh / stride / 7.0);
        for py in 0..7 {
            for px in 0..7 {
                let mut acc = 0.0;
                for sy in 0..100 {
                    for sx in 0..100 {
                        let yy = fy + ch * (py as f64 + (sy as f64 + 0.5) / 100.0);
                        let xx = fx + cw * (px as f64 + (sx as f64 + 0.5) / 100.0);
                        acc += bilinear_oracle(&map.data, h, w, yy, xx);
                    }
                }
                let expect = acc / 10_000.0;
                let got = out[py * 7 + px];
                assert!((got - expect).abs() < 1e-3, "bin ({py},{px}): {got} vs {expect}");
            }
        }
    }
}

#[test]
fn constants_receive_no_gradient_buffers() {
    let mut g = Graph::<f64>::new(true);
    let x = g.constant(Tensor::full(vec![1, 4, 4], 1.0));
    let w = g.param(0, &Tensor::full(vec![2, 1, 3, 3], 0.5));
    let y = g.conv2d(x, w, None, 1, 1);
    let n = g.value(y).len();
    let flat = g.reshape(y, vec![n]);
    let s = g.smooth_l1(flat, &vec![0.0; n], 1e6, 1.0);
    let grads = g.backward(s);
    assert_eq!(grads.len(), 1);
    assert!(grads[0].1.iter().any(|&v| v != 0.0));
}
