//! Named parameter tensors.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: &str, shape: &[usize]) -> Self {
        Self {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Ordered tensors; the index of a tensor is its identity on the tape.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn push(&mut self, t: Tensor) -> usize {
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(&t.name, &t.shape))
                .collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    /// Flat view over every scalar in tensor order.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.tensors.iter().flat_map(|t| t.data.iter())
    }

    pub fn get_flat(&self, i: usize) -> f64 {
        let (t, j) = self.locate(i);
        self.tensors[t].data[j]
    }

    pub fn set_flat(&mut self, i: usize, v: f64) {
        let (t, j) = self.locate(i);
        self.tensors[t].data[j] = v;
    }

    fn locate(&self, mut i: usize) -> (usize, usize) {
        for (t, tensor) in self.tensors.iter().enumerate() {
            if i < tensor.len() {
                return (t, i);
            }
            i -= tensor.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn add_scaled(&mut self, other: &ParamSet, k: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += k * y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    /// Same names and shapes, in the same order.
    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        let same = self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape);
        if same {
            Ok(())
        } else {
            Err(Error::Shape("parameter layouts differ".into()))
        }
    }
}

/// Exponential moving average of parameters: `s <- d s + (1 - d) p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ema {
    pub decay: f64,
    pub shadow: ParamSet,
}

impl Ema {
    pub fn new(params: &ParamSet, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("EMA decay {decay} outside [0, 1)")));
        }
        Ok(Self {
            decay,
            shadow: params.clone(),
        })
    }

    pub fn update(&mut self, params: &ParamSet) {
        let d = self.decay;
        for (s, p) in self.shadow.tensors.iter_mut().zip(&params.tensors) {
            for (a, b) in s.data.iter_mut().zip(&p.data) {
                *a = d * *a + (1.0 - d) * b;
            }
        }
    }
}
