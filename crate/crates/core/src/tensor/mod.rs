//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: row-major flat storage, explicit shape
//! metadata, no views or strides (reshape copies), and exactly the primitive
//! set the enrichment layers need. Everything is 64-bit so central
//! finite-difference checks stay tight.
//!
//! [`Tape`] records every primitive executed during a forward pass;
//! [`Tape::backward`] replays it in reverse and accumulates gradients into
//! the non-frozen entries of a [`ParamStore`].

mod gradcheck;
mod tape;

pub use gradcheck::{
    grad_check_inputs, grad_check_params, random_probe, randomize_params, GradCheckReport,
};
pub use tape::{EwKind, Tape, UnaryKind, Var};

use std::collections::HashMap;

use thiserror::Error;

use crate::rng::{fnv1a64, Stream};

/// Errors surfaced by tensor construction and tape operations.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange { axis: usize, shape: Vec<usize> },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("input error: {0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Number of elements implied by a shape. Empty shape is a scalar.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(TensorError::Input(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![x],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Index of a [`Parameter`] inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// A named, optionally frozen trainable tensor.
///
/// Frozen parameters still participate in forward passes, but backward never
/// writes a gradient for them and the optimizer never touches them.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub tensor: Tensor,
    pub name: String,
    pub frozen: bool,
}

/// Flat registry of model parameters addressed by [`ParamId`] or name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor, frozen: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(TensorError::Usage(format!("duplicate parameter {name:?}")));
        }
        let id = self.params.len();
        self.index.insert(name.to_string(), id);
        self.params.push(Parameter {
            tensor: Tensor {
                requires_grad: true,
                ..tensor
            },
            name: name.to_string(),
            frozen,
        });
        Ok(ParamId(id))
    }

    /// Adds a parameter initialized from a stream derived from
    /// `(seed, fnv1a64(name))`, so values depend only on the seed and the
    /// name, never on registration order.
    pub fn add_seeded(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        init: Init,
        seed: u64,
        frozen: bool,
    ) -> Result<ParamId> {
        let mut stream = Stream::substream(seed, fnv1a64(name.as_bytes()));
        let n = numel(&shape);
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::UniformFanIn(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| stream.uniform(-bound, bound)).collect()
            }
        };
        self.add(name, Tensor::new(shape, data)?, frozen)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            if let Some(g) = &mut p.tensor.grad {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    /// Accumulates `delta` into the gradient of `id`. Frozen parameters are
    /// skipped silently: they accumulate no persistent gradient.
    pub(crate) fn accumulate_grad(&mut self, id: ParamId, delta: &[f64]) {
        let p = &mut self.params[id.0];
        if p.frozen {
            return;
        }
        let g = p
            .tensor
            .grad
            .get_or_insert_with(|| vec![0.0; p.tensor.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Plain SGD step over the non-frozen parameters.
    pub fn sgd_step(&mut self, lr: f64) {
        for p in &mut self.params {
            if p.frozen {
                continue;
            }
            if let Some(g) = &p.tensor.grad {
                for (x, gi) in p.tensor.data.iter_mut().zip(g) {
                    *x -= lr * gi;
                }
            }
        }
    }
}

/// Initialization schemes for [`ParamStore::add_seeded`].
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    UniformFanIn(usize),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_data_agreement() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn seeded_init_is_order_independent() {
        let mut a = ParamStore::new();
        a.add_seeded("w1", vec![3], Init::UniformFanIn(3), 5, false)
            .unwrap();
        a.add_seeded("w2", vec![3], Init::UniformFanIn(3), 5, false)
            .unwrap();

        let mut b = ParamStore::new();
        b.add_seeded("w2", vec![3], Init::UniformFanIn(3), 5, false)
            .unwrap();
        b.add_seeded("w1", vec![3], Init::UniformFanIn(3), 5, false)
            .unwrap();

        let w1a = &a.get(a.lookup("w1").unwrap()).tensor.data;
        let w1b = &b.get(b.lookup("w1").unwrap()).tensor.data;
        assert_eq!(w1a, w1b);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(vec![2]), false).unwrap();
        assert!(s.add("w", Tensor::zeros(vec![2]), false).is_err());
    }

    #[test]
    fn frozen_params_accumulate_nothing() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::zeros(vec![2]), true).unwrap();
        s.accumulate_grad(id, &[1.0, 1.0]);
        assert!(s.get(id).tensor.grad.is_none());
    }

    #[test]
    fn sgd_updates_only_trainable() {
        let mut s = ParamStore::new();
        let t = s
            .add("t", Tensor::new(vec![1], vec![1.0]).unwrap(), false)
            .unwrap();
        let f = s
            .add("f", Tensor::new(vec![1], vec![1.0]).unwrap(), true)
            .unwrap();
        s.accumulate_grad(t, &[0.5]);
        s.accumulate_grad(f, &[0.5]);
        s.sgd_step(1.0);
        assert_eq!(s.get(t).tensor.data[0], 0.5);
        assert_eq!(s.get(f).tensor.data[0], 1.0);
    }
}
