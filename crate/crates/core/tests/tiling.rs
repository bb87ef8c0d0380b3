use cadnet_core::geometry::{obb_to_quad, quad_to_obb, rotated_nms, BoxShape, Obb, Quad, ScoredDetection};
use cadnet_core::ingest::{AnnotatedObject, AnnotationShape};
use cadnet_core::tiling::{
    crop_patch, normalize_contrast, plan_tiles, read_manifest, stitch_detections, write_manifest, PatchRecord,
    TileWindow,
};
use ndarray::Array3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn six_thousand_square_gives_six_by_six() {
    let plan = plan_tiles(6000, 6000, 1600, 800).unwrap();
    assert_eq!(plan.stride(), 800);
    assert_eq!(plan.windows.len(), 36);
    let want = [0, 800, 1600, 2400, 3200, 4400];
    for (i, w) in plan.windows.iter().enumerate() {
        assert_eq!((w.y_offset, w.x_offset), (want[i / 6], want[i % 6]));
        assert_eq!((w.pad_right, w.pad_bottom), (0, 0));
        assert!(w.x_offset + w.width <= 6000);
    }
}

#[test]
fn small_image_gets_one_padded_window() {
    let plan = plan_tiles(100, 100, 4096, 1024).unwrap();
    assert_eq!(plan.windows.len(), 1);
    let w = plan.windows[0];
    assert_eq!((w.pad_right, w.pad_bottom), (3996, 3996));
    assert_eq!((w.valid_width(), w.valid_height()), (100, 100));
    let exact = plan_tiles(1600, 1600, 1600, 800).unwrap();
    assert_eq!(exact.windows, vec![TileWindow { width: 1600, height: 1600, ..TileWindow::identity() }]);
}

fn covered(len: u32, spans: impl Iterator<Item = (u32, u32)>) -> bool {
    let mut hit = vec![false; len as usize];
    for (start, n) in spans {
        for h in &mut hit[start as usize..(start + n) as usize] {
            *h = true;
        }
    }
    hit.into_iter().all(|h| h)
}

proptest! {
    #[test]
    fn windows_cover_every_pixel(w in 1u32..3000, h in 1u32..3000, tile in 16u32..1200, frac in 0.0f64..0.9) {
        let overlap = ((tile as f64) * frac) as u32;
        let plan = plan_tiles(w, h, tile, overlap).unwrap();
        for win in &plan.windows {
            prop_assert!(win.x_offset + win.valid_width() <= w);
            prop_assert!(win.y_offset + win.valid_height() <= h);
            prop_assert_eq!(win.width, tile);
        }
        prop_assert!(covered(w, plan.windows.iter().map(|x| (x.x_offset, x.valid_width()))));
        prop_assert!(covered(h, plan.windows.iter().map(|x| (x.y_offset, x.valid_height()))));
    }
}

fn obj(b: Obb, class_id: usize) -> AnnotatedObject {
    AnnotatedObject { shape: AnnotationShape::Quad(obb_to_quad(&b)), class_id, difficult: false }
}

#[test]
fn crop_translates_inside_objects() {
    let img = Array3::<u8>::from_shape_fn((300, 300, 3), |(y, x, c)| ((x + 2 * y + c) % 251) as u8);
    let inside = Obb::new(150.0, 140.0, 20.0, 10.0, 30.0).unwrap();
    let outside = Obb::new(20.0, 20.0, 10.0, 10.0, 0.0).unwrap();
    let window = TileWindow { x_offset: 100, y_offset: 90, width: 128, height: 128, pad_right: 0, pad_bottom: 0 };
    let p = crop_patch(&img, &window, &[obj(inside, 1), obj(outside, 2)]);
    assert_eq!(p.annotations.len(), 1);
    let AnnotationShape::Quad(q) = p.annotations[0].shape else { panic!() };
    for (a, b) in q.coords().iter().zip(obb_to_quad(&inside.translate(-100.0, -90.0)).coords()) {
        assert!((a - b).abs() < 1e-9);
    }
    assert_eq!(p.pixels[[5, 7, 1]], img[[95, 107, 1]]);
}

#[test]
fn straddling_object_is_clipped_and_refit() {
    let img = Array3::<u8>::zeros((200, 200, 3));
    let window = TileWindow { x_offset: 0, y_offset: 0, width: 100, height: 100, pad_right: 0, pad_bottom: 0 };
    let b = Obb::new(92.0, 50.0, 30.0, 12.0, 25.0).unwrap();
    let p = crop_patch(&img, &window, &[obj(b, 0)]);
    assert_eq!(p.annotations.len(), 1);
    let AnnotationShape::Quad(q) = p.annotations[0].shape else { panic!() };
    assert!(q.vertices().iter().all(|v| (0.0..=100.0).contains(&v.x) && (0.0..=100.0).contains(&v.y)));
    assert!(q.area() > 0.0 && q.area() < b.area());
    let r = quad_to_obb(&q).unwrap();
    assert!(r.w > 0.0 && r.h > 0.0 && (0.0..90.0).contains(&r.theta));
}

#[test]
fn normalization_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let img = Array3::<u8>::from_shape_fn((17, 23, 3), |_| rng.random());
    let means = [120.5f32, 98.25, 60.0];
    let stds = [55.0f32, 41.5, 20.125];
    let out = normalize_contrast(&img, means, stds).unwrap();
    for ((y, x, c), &v) in out.indexed_iter() {
        let want = (f64::from(img[[y, x, c]]) - f64::from(means[c])) / f64::from(stds[c]);
        assert!((f64::from(v) - want).abs() < 1e-6);
    }
    assert!(normalize_contrast(&img, means, [1.0, 0.0, 1.0]).is_err());
}

#[test]
fn stitching_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let dets: Vec<ScoredDetection> = (0..30)
        .map(|_| {
            let b = Obb::new(rng.random_range(0.0..200.0), rng.random_range(0.0..200.0), 20.0, 9.0, rng.random_range(0.0..90.0))
                .unwrap();
            ScoredDetection::new(BoxShape::Obb(b), rng.random_range(0..2), rng.random_range(0.0..1.0))
        })
        .collect();
    let id = TileWindow { width: 256, height: 256, ..TileWindow::identity() };
    let once = stitch_detections(&[(id, dets)], 0.3).unwrap();
    let twice = stitch_detections(&[(id, once.clone())], 0.3).unwrap();
    assert_eq!(once, twice);
}

#[test]
fn overlap_dedup_matches_single_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    // 20 disjoint objects on a 5 x 4 lattice of 200 px cells.
    let objects: Vec<(Obb, usize, f64)> = (0..20)
        .map(|i| {
            let (cx, cy) = (100 + 200 * (i % 5), 100 + 200 * (i / 5));
            let b = Obb::new(
                cx as f64 + rng.random_range(-30..30) as f64,
                cy as f64 + rng.random_range(-30..30) as f64,
                rng.random_range(20..60) as f64,
                rng.random_range(10..30) as f64,
                rng.random_range(0.0..90.0),
            )
            .unwrap();
            (b, i % 3, rng.random_range(0.5..0.9))
        })
        .collect();
    let plan = plan_tiles(1000, 800, 400, 150).unwrap();
    let mut per_patch = Vec::new();
    for (k, w) in plan.windows.iter().enumerate() {
        let (x0, y0) = (w.x_offset as f64, w.y_offset as f64);
        let dets: Vec<ScoredDetection> = objects
            .iter()
            .filter_map(|&(b, c, s)| {
                let local = b.translate(-x0, -y0);
                let q = obb_to_quad(&local);
                let fits = q.vertices().iter().all(|p| p.x >= 0.0 && p.y >= 0.0 && p.x <= 400.0 && p.y <= 400.0);
                fits.then(|| ScoredDetection::new(BoxShape::Obb(local), c, s - 0.01 * (k % 7) as f64))
            })
            .collect();
        per_patch.push((*w, dets));
    }
    let stitched = stitch_detections(&per_patch, 0.5).unwrap();

    let reference: Vec<ScoredDetection> =
        objects.iter().map(|&(b, c, s)| ScoredDetection::new(BoxShape::Obb(b), c, s)).collect();
    let kept = rotated_nms(&reference, 0.5).unwrap();
    assert_eq!(kept.len(), 20);
    assert_eq!(stitched.len(), 20);
    for r in &reference {
        let hits: Vec<_> = stitched
            .iter()
            .filter(|d| d.class_id == r.class_id && d.shape == r.shape)
            .collect();
        assert_eq!(hits.len(), 1, "{r:?}");
        assert!(hits[0].score <= r.score);
    }
}

#[test]
fn duplicate_across_patches_keeps_best() {
    let b = Obb::new(450.0, 100.0, 40.0, 20.0, 10.0).unwrap();
    let w0 = TileWindow { x_offset: 0, y_offset: 0, width: 600, height: 600, pad_right: 0, pad_bottom: 0 };
    let w1 = TileWindow { x_offset: 300, ..w0 };
    let d = |shape: Obb, s| ScoredDetection::new(BoxShape::Obb(shape), 0, s);
    let out = stitch_detections(&[(w0, vec![d(b, 0.9)]), (w1, vec![d(b.translate(-300.0, 0.0), 0.7)])], 0.5).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].score, 0.9);
}

#[test]
fn detections_in_padding_are_dropped() {
    let w = TileWindow { x_offset: 0, y_offset: 0, width: 256, height: 256, pad_right: 156, pad_bottom: 156 };
    let inside = Quad::from_coords([10.0, 10.0, 30.0, 10.0, 30.0, 30.0, 10.0, 30.0]).unwrap();
    let pad = Quad::from_coords([150.0, 10.0, 170.0, 10.0, 170.0, 30.0, 150.0, 30.0]).unwrap();
    let dets = vec![
        ScoredDetection::new(BoxShape::Quad(inside), 0, 0.5),
        ScoredDetection::new(BoxShape::Quad(pad), 0, 0.6),
    ];
    let out = stitch_detections(&[(w, dets)], 0.5).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].shape, BoxShape::Quad(inside));
}

#[test]
fn manifest_round_trip() {
    let plan = plan_tiles(3000, 2000, 1024, 256).unwrap();
    let records: Vec<PatchRecord> = plan
        .windows
        .iter()
        .enumerate()
        .map(|(i, w)| PatchRecord::new("P0001", i, format!("P0001_{i:04}.png"), w))
        .collect();
    let mut buf = Vec::new();
    write_manifest(&mut buf, &records).unwrap();
    let back = read_manifest(buf.as_slice()).unwrap();
    assert_eq!(back, records);
    assert!(back.iter().zip(&plan.windows).all(|(r, w)| r.window() == *w));
}
