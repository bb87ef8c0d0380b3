use cadnet_core::geometry::{Hbb, Obb};
use cadnet_core::targets::GroundTruth;
use cadnet_nn::model::Detector;
use cadnet_nn::{ModelConfig, Switches, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        backbone_widths: [4, 4, 6, 6, 8],
        fpn_dim: 8,
        gcnet_dim: 4,
        attention_hidden: 4,
        head_hidden: 12,
        num_classes: 2,
        switches: Switches::FULL,
        rpn_batch: 16,
        ..ModelConfig::default()
    }
}

fn gts() -> Vec<GroundTruth> {
    vec![GroundTruth::from_obb(Obb::new(15.0, 17.0, 14.0, 8.0, 25.0).unwrap(), 1)]
}

/// Relative error with a floor so that gradients near zero compare on an
/// absolute scale.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

#[test]
fn analytic_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut det = Detector::new(tiny(), 5);
    // Move every weight off its initial symmetric state so no group sits at a
    // trivially flat point.
    for i in 0..det.params.len() {
        for v in det.params.tensor_mut(i).data.iter_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let values: Vec<Tensor<f64>> = det.params.cast();
    let image = Tensor::new(vec![3, 32, 32], (0..3 * 32 * 32).map(|_| rng.random_range(-1.0..1.0)).collect());
    let region = [Hbb::new(6.0, 9.0, 25.0, 26.0).unwrap()];
    let gts = gts();
    let seed = 3;

    let (_, grads) = det
        .loss_and_grads(&values, &image, &gts, &mut ChaCha8Rng::seed_from_u64(seed), Some(&region))
        .unwrap();
    let eps = 1e-6;
    let mut worst = (0.0f64, String::new());
    for (index, grad) in &grads {
        let name = det.params.name(*index).to_owned();
        let n = grad.len();
        let picks: Vec<usize> = sample(&mut rng, n, n.min(20)).into_iter().collect();
        for j in picks {
            let mut plus = values.clone();
            plus[*index].data[j] += eps;
            let mut minus = values.clone();
            minus[*index].data[j] -= eps;
            let lp = det.loss(&plus, &image, &gts, &mut ChaCha8Rng::seed_from_u64(seed), Some(&region)).unwrap();
            let lm = det.loss(&minus, &image, &gts, &mut ChaCha8Rng::seed_from_u64(seed), Some(&region)).unwrap();
            let numeric = (lp.total - lm.total) / (2.0 * eps);
            let e = rel_err(grad[j], numeric);
            if e > worst.0 {
                worst = (e, format!("{name}[{j}]: analytic {} numeric {numeric}", grad[j]));
            }
        }
    }
    assert!(worst.0 < 1e-3, "worst relative error {} at {}", worst.0, worst.1);
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = ModelConfig { backbone_widths: [8, 8, 12, 12, 16], fpn_dim: 16, gcnet_dim: 8, ..tiny() };
    let det = Detector::new(cfg, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let image = Tensor::new(vec![3, 64, 64], (0..3 * 64 * 64).map(|_| rng.random_range(-1.0..1.0)).collect());
    let gts = vec![
        GroundTruth::from_obb(Obb::new(20.0, 22.0, 18.0, 9.0, 30.0).unwrap(), 0),
        GroundTruth::from_obb(Obb::new(44.0, 40.0, 12.0, 20.0, 70.0).unwrap(), 1),
    ];
    let (_, grads) = det.loss_and_grads(det.params.tensors(), &image, &gts, &mut rng, None).unwrap();
    assert_eq!(grads.len(), det.params.len());
    for (i, g) in &grads {
        assert!(g.iter().any(|&v| v != 0.0), "{} has an all-zero gradient", det.params.name(*i));
    }
}
