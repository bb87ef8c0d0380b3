use crate::graph::ParamGrads;
use crate::params::ParamStore;

/// Stochastic gradient descent with momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    /// Rescale the whole gradient when its L2 norm exceeds this value.
    pub clip_norm: Option<f32>,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f32, weight_decay: f32, clip_norm: Option<f32>) -> Self {
        let velocity = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { momentum, weight_decay, clip_norm, velocity }
    }

    /// Applies one update and returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads<f32>, lr: f32) -> f32 {
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt() as f32;
        let scale = match self.clip_norm {
            Some(c) if norm > c && norm.is_finite() => c / norm,
            _ => 1.0,
        };
        for (i, g) in grads {
            let p = params.tensor_mut(*i);
            let v = &mut self.velocity[*i];
            for ((w, vel), &gr) in p.data.iter_mut().zip(v.iter_mut()).zip(g) {
                let d = gr * scale + self.weight_decay * *w;
                *vel = self.momentum * *vel + d;
                *w -= lr * *vel;
            }
        }
        norm
    }
}

/// Constant rate with one tenfold decay after two thirds of the run.
pub fn step_lr(base: f32, iteration: usize, total: usize) -> f32 {
    if 3 * iteration >= 2 * total {
        base * 0.1
    } else {
        base
    }
}

/// Linear warm-up from `base * 0.1` over `warmup` iterations, then
/// [`step_lr`].
pub fn warmup_step_lr(base: f32, iteration: usize, total: usize, warmup: usize) -> f32 {
    let lr = step_lr(base, iteration, total);
    if iteration < warmup {
        let f = 0.1 + 0.9 * iteration as f32 / warmup as f32;
        lr * f
    } else {
        lr
    }
}
