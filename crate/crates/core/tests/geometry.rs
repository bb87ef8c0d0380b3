use cadnet_core::geometry::{
    iou_obb, obb_to_hbb, obb_to_quad, polygon_intersection_area, quad_to_obb, rotated_nms, BoxShape, Obb, Point, Quad,
    ScoredDetection,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Point-in-box test in the box's own frame.
fn inside(b: &Obb, x: f64, y: f64) -> bool {
    let (s, c) = b.theta.to_radians().sin_cos();
    let (dx, dy) = (x - b.cx, y - b.cy);
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    u.abs() <= b.w / 2.0 && v.abs() <= b.h / 2.0
}

/// Counts pixel centres of an `n x n` grid over the joint bounding box that
/// fall in `a`, in `b`, and in both.
fn rasterize(a: &Obb, b: &Obb, n: usize) -> (f64, f64, f64, f64) {
    let (ha, hb) = (obb_to_hbb(a), obb_to_hbb(b));
    let x0 = ha.xmin.min(hb.xmin);
    let y0 = ha.ymin.min(hb.ymin);
    let x1 = ha.xmax.max(hb.xmax);
    let y1 = ha.ymax.max(hb.ymax);
    let (sx, sy) = ((x1 - x0) / n as f64, (y1 - y0) / n as f64);
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for i in 0..n {
        let y = y0 + (i as f64 + 0.5) * sy;
        for j in 0..n {
            let x = x0 + (j as f64 + 0.5) * sx;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            na += ia as usize;
            nb += ib as usize;
            both += (ia && ib) as usize;
        }
    }
    (na as f64, nb as f64, both as f64, sx * sy)
}

fn random_obb(rng: &mut impl Rng, spread: f64) -> Obb {
    Obb::new(
        rng.random_range(40.0..40.0 + spread),
        rng.random_range(40.0..40.0 + spread),
        rng.random_range(4.0..40.0),
        rng.random_range(4.0..40.0),
        rng.random_range(0.0..90.0),
    )
    .unwrap()
}

#[test]
fn iou_matches_rasterization_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let a = random_obb(&mut rng, 30.0);
        let b = random_obb(&mut rng, 30.0);
        let (na, nb, both, _) = rasterize(&a, &b, 512);
        let oracle = both / (na + nb - both);
        worst = worst.max((iou_obb(&a, &b) - oracle).abs());
    }
    assert!(worst < 1.5e-2, "worst deviation {worst}");
}

#[test]
fn crossed_rectangles_intersection_area() {
    let a = Obb::new(50.0, 50.0, 80.0, 20.0, 0.0).unwrap();
    let b = Obb::new(50.0, 50.0, 80.0, 20.0, 45.0).unwrap();
    let (_, _, both, px) = rasterize(&a, &b, 512);
    let oracle = both * px;
    let area = polygon_intersection_area(&obb_to_quad(&a), &obb_to_quad(&b));
    assert!((area - oracle).abs() / oracle < 0.015, "{area} vs {oracle}");
}

#[test]
fn corners_follow_rotation_matrix() {
    let b = Obb::new(10.0, 20.0, 6.0, 2.0, 30.0).unwrap();
    let t = 30f64.to_radians();
    let offsets = [(-3.0, -1.0), (3.0, -1.0), (3.0, 1.0), (-3.0, 1.0)];
    let q = obb_to_quad(&b);
    for (p, (dx, dy)) in q.vertices().iter().zip(offsets) {
        let x = 10.0 + t.cos() * dx - t.sin() * dy;
        let y = 20.0 + t.sin() * dx + t.cos() * dy;
        assert!((p.x - x).abs() < 1e-12 && (p.y - y).abs() < 1e-12);
    }
}

#[test]
fn min_area_rect_matches_angle_sweep() {
    let pts = [(0.0, 0.0), (4.0, 1.0), (5.0, 4.0), (1.0, 3.0)];
    let q = Quad::from_coords([0.0, 0.0, 4.0, 1.0, 5.0, 4.0, 1.0, 3.0]).unwrap();
    let b = quad_to_obb(&q).unwrap();
    let mut sweep = f64::INFINITY;
    for step in 0..900 {
        let t = (step as f64 * 0.1).to_radians();
        let (s, c) = t.sin_cos();
        let us = pts.map(|(x, y)| c * x + s * y);
        let vs = pts.map(|(x, y)| -s * x + c * y);
        let span = |v: [f64; 4]| v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
        sweep = sweep.min(span(us) * span(vs));
    }
    assert!(b.area() <= sweep + 1e-9, "{} > sweep {sweep}", b.area());
    assert!(sweep - b.area() < 1e-2 * sweep);
    for (x, y) in pts {
        let grown = Obb { w: b.w + 1e-9, h: b.h + 1e-9, ..b };
        assert!(inside(&grown, x, y));
    }
}

fn angle_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(90.0);
    d.min(90.0 - d)
}

#[test]
fn quad_to_obb_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut n = 0;
    while n < 1000 {
        let b = random_obb(&mut rng, 100.0);
        if (b.w - b.h).abs() < 0.5 {
            continue;
        }
        n += 1;
        let r = quad_to_obb(&obb_to_quad(&b)).unwrap();
        assert!((r.cx - b.cx).abs() < 1e-6 && (r.cy - b.cy).abs() < 1e-6);
        let same = (r.w - b.w).abs() < 1e-6 && (r.h - b.h).abs() < 1e-6;
        let swapped = (r.w - b.h).abs() < 1e-6 && (r.h - b.w).abs() < 1e-6;
        assert!(same || swapped, "{b:?} -> {r:?}");
        assert!(angle_gap(r.theta, b.theta) < 1e-4, "{b:?} -> {r:?}");
        assert!((0.0..90.0).contains(&r.theta));
    }
}

#[test]
fn hbb_is_corner_extrema() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let b = random_obb(&mut rng, 100.0);
        let h = obb_to_hbb(&b);
        let v = obb_to_quad(&b).vertices().to_owned();
        let xs = v.map(|p| p.x);
        let ys = v.map(|p| p.y);
        assert_eq!(h.xmin, xs.iter().cloned().fold(f64::MAX, f64::min));
        assert_eq!(h.xmax, xs.iter().cloned().fold(f64::MIN, f64::max));
        assert_eq!(h.ymin, ys.iter().cloned().fold(f64::MAX, f64::min));
        assert_eq!(h.ymax, ys.iter().cloned().fold(f64::MIN, f64::max));
    }
}

#[test]
fn iou_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..300 {
        let a = random_obb(&mut rng, 20.0);
        let b = random_obb(&mut rng, 20.0);
        let ab = iou_obb(&a, &b);
        assert!((0.0..=1.0).contains(&ab));
        assert!((ab - iou_obb(&b, &a)).abs() < 1e-12);
        assert!((iou_obb(&a, &a) - 1.0).abs() < 1e-9);
        let (dx, dy) = (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
        assert!((ab - iou_obb(&a.translate(dx, dy), &b.translate(dx, dy))).abs() < 1e-9);

        let origin = Point::new(0.0, 0.0);
        let deg = rng.random_range(0.0..360.0);
        let (qa, qb) = (obb_to_quad(&a).rotate_about(origin, deg), obb_to_quad(&b).rotate_about(origin, deg));
        let rotated = BoxShape::Quad(qa).iou(&BoxShape::Quad(qb)).unwrap();
        assert!((ab - rotated).abs() < 1e-9);

        let inter = polygon_intersection_area(&obb_to_quad(&a), &obb_to_quad(&b));
        assert!(inter <= a.area().min(b.area()) + 1e-9);
    }
}

/// Classic suppression-mask NMS over a precomputed IoU matrix.
fn nms_reference(dets: &[ScoredDetection], thr: f64) -> Vec<usize> {
    let n = dets.len();
    let mut iou = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            iou[i * n + j] = dets[i].shape.iou(&dets[j].shape).unwrap();
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut suppressed = vec![false; n];
    let mut keep = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[rank + 1..] {
            if dets[j].class_id == dets[i].class_id && iou[i * n + j] > thr {
                suppressed[j] = true;
            }
        }
    }
    keep
}

fn random_dets(rng: &mut impl Rng) -> Vec<ScoredDetection> {
    let n = rng.random_range(1..=50);
    (0..n)
        .map(|_| {
            ScoredDetection::new(
                BoxShape::Obb(random_obb(rng, 40.0)),
                rng.random_range(0..3),
                rng.random_range(0.0..1.0),
            )
        })
        .collect()
}

#[test]
fn nms_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let dets = random_dets(&mut rng);
        let thr = rng.random_range(0.1..0.7);
        assert_eq!(rotated_nms(&dets, thr).unwrap(), nms_reference(&dets, thr));
    }
}

#[test]
fn nms_kept_set_ignores_input_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let dets = random_dets(&mut rng);
        let mut perm: Vec<usize> = (0..dets.len()).collect();
        perm.reverse();
        let shuffled: Vec<ScoredDetection> = perm.iter().map(|&i| dets[i]).collect();
        let mut a: Vec<usize> = rotated_nms(&dets, 0.5).unwrap();
        let mut b: Vec<usize> = rotated_nms(&shuffled, 0.5).unwrap().into_iter().map(|i| perm[i]).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }
}

#[test]
fn duplicate_pair_keeps_higher_score() {
    let b = BoxShape::Obb(Obb::new(10.0, 10.0, 8.0, 4.0, 20.0).unwrap());
    let dets = [ScoredDetection::new(b, 0, 0.8), ScoredDetection::new(b, 0, 0.9)];
    assert_eq!(rotated_nms(&dets, 0.5).unwrap(), vec![1]);
}
