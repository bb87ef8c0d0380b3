use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Real, Tensor};

/// Named learnable tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
    index: BTreeMap<String, usize>,
}

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f32),
    /// Zero-mean normal with the given standard deviation.
    Normal(f32),
    /// He-normal for a layer with the given fan-in.
    He(usize),
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter whose initial values depend only on `seed` and
    /// `name`, so the same name is initialized identically in any model
    /// that contains it.
    pub fn add(&mut self, name: &str, shape: Vec<usize>, init: Init, seed: u64) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(v) => vec![v; n],
            Init::Normal(_) | Init::He(_) => {
                let std = match init {
                    Init::He(fan_in) => (2.0 / fan_in.max(1) as f32).sqrt(),
                    Init::Normal(std) => std,
                    _ => unreachable!(),
                };
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
                let normal = Normal::new(0.0, std).unwrap();
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            }
        };
        self.insert(name, Tensor::new(shape, data))
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<f32>) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let i = self.names.len();
        self.names.push(name.to_owned());
        self.tensors.push(tensor);
        self.index.insert(name.to_owned(), i);
        i
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, i: usize) -> &Tensor<f32> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<f32> {
        &mut self.tensors[i]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.index_of(name).map(|i| &mut self.tensors[i])
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Copies of every tensor in another precision.
    pub fn cast<T: Real>(&self) -> Vec<Tensor<T>> {
        self.tensors.iter().map(Tensor::cast).collect()
    }

    /// Parameter group of a name: everything before the trailing
    /// `.<index>.{weight|bias}`.
    pub fn group_of(name: &str) -> &str {
        let mut parts = name.rsplitn(3, '.');
        parts.next();
        parts.next();
        parts.next().unwrap_or(name)
    }

    /// Distinct groups in first-appearance order.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for n in &self.names {
            let g = Self::group_of(n);
            if out.last().is_none_or(|l| l != g) && !out.iter().any(|o| o == g) {
                out.push(g.to_owned());
            }
        }
        out
    }
}
