//! Parameter storage, layers and optimizers for the small convolutional
//! networks in this crate.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{BasnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Ordered, named parameter tensors of one network block.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

/// Graph handles for every parameter of a store, in store order.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            tensor,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Register every parameter on the graph; frozen stores become constants
    /// that still pass gradients through to their inputs.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Binding {
        Binding {
            vars: self
                .params
                .iter()
                .map(|p| g.leaf(p.tensor.clone(), trainable))
                .collect(),
        }
    }

    /// Gradient per parameter (zeros where none reached it).
    pub fn collect_grads(&self, binding: &Binding, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .zip(&binding.vars)
            .map(|(p, &v)| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.tensor.shape()))
            })
            .collect()
    }

    /// Replace values from `(name, shape, data)` triples, checking names and
    /// shapes agree with this architecture.
    pub fn load_values(&mut self, values: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(BasnError::ShapeMismatch(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, (name, shape, data)) in self.params.iter_mut().zip(values) {
            if &p.name != name || p.tensor.shape() != shape.as_slice() {
                return Err(BasnError::ShapeMismatch(format!(
                    "parameter {name} {shape:?} does not match {} {:?}",
                    p.name,
                    p.tensor.shape()
                )));
            }
            p.tensor = Tensor::new(shape.clone(), data.iter().map(|&v| T::lit(v)).collect())?;
        }
        Ok(())
    }

    pub fn export_values(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.params
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    p.tensor.shape().to_vec(),
                    p.tensor.data().iter().map(|v| v.as_f64()).collect(),
                )
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.is_finite())
    }

    /// SHA-256 over names, shapes and the f64 bit patterns of all values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for &d in p.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

fn uniform_tensor<T: Scalar, R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
}

/// Square-kernel convolution with bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    w: ParamId,
    b: ParamId,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// He-uniform initialised `k x k` convolution with "same" padding.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let w = store.add(
            format!("{name}.weight"),
            uniform_tensor(&[out_channels, in_channels, kernel, kernel], bound, rng),
        );
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self {
            w,
            b,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn scale_weights<T: Scalar>(&self, store: &mut ParamStore<T>, factor: f64) {
        let s = T::lit(factor);
        store.tensor_mut(self.w).data_mut().iter_mut().for_each(|v| *v *= s);
    }

    pub fn fill_bias<T: Scalar>(&self, store: &mut ParamStore<T>, value: f64) {
        store.tensor_mut(self.b).data_mut().iter_mut().for_each(|v| *v = T::lit(value));
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, bind: &Binding, x: Var) -> Var {
        g.conv2d(x, bind.var(self.w), Some(bind.var(self.b)), self.stride, self.padding)
    }

    /// Convolution followed by leaky ReLU.
    pub fn forward_act<T: Scalar>(&self, g: &mut Graph<T>, bind: &Binding, x: Var) -> Var {
        let y = self.forward(g, bind, x);
        g.leaky_relu(y, T::lit(LEAKY_SLOPE))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (1.0 / inputs as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform_tensor(&[outputs, inputs], bound, rng));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, bind: &Binding, x: Var) -> Var {
        g.linear(x, bind.var(self.w), bind.var(self.b))
    }
}

/// Optimizer choice and hyperparameters, as stored in configs and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adam { learning_rate: f64 },
    Nesterov { learning_rate: f64, momentum: f64 },
}

impl OptimizerConfig {
    pub fn learning_rate(&self) -> f64 {
        match *self {
            OptimizerConfig::Adam { learning_rate } => learning_rate,
            OptimizerConfig::Nesterov { learning_rate, .. } => learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.learning_rate();
        if !(lr.is_finite() && lr > 0.0) {
            return Err(BasnError::InvalidArgument(format!(
                "learning rate {lr} must be positive"
            )));
        }
        if let OptimizerConfig::Nesterov { momentum, .. } = *self {
            if !(0.0..1.0).contains(&momentum) {
                return Err(BasnError::InvalidArgument(format!(
                    "momentum {momentum} outside [0, 1)"
                )));
            }
        }
        Ok(())
    }

    pub fn build<T: Scalar>(&self, store: &ParamStore<T>) -> Optimizer<T> {
        let zeros = || -> Vec<Tensor<T>> {
            store
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.tensor.shape()))
                .collect()
        };
        match *self {
            OptimizerConfig::Adam { learning_rate } => Optimizer::Adam {
                lr: T::lit(learning_rate),
                beta1: T::lit(0.9),
                beta2: T::lit(0.999),
                eps: T::lit(1e-8),
                m: zeros(),
                v: zeros(),
                t: 0,
            },
            OptimizerConfig::Nesterov {
                learning_rate,
                momentum,
            } => Optimizer::Nesterov {
                lr: T::lit(learning_rate),
                momentum: T::lit(momentum),
                velocity: zeros(),
            },
        }
    }
}

/// Stateful optimizer bound to one [`ParamStore`].
#[derive(Debug, Clone)]
pub enum Optimizer<T> {
    Adam {
        lr: T,
        beta1: T,
        beta2: T,
        eps: T,
        m: Vec<Tensor<T>>,
        v: Vec<Tensor<T>>,
        t: i32,
    },
    Nesterov {
        lr: T,
        momentum: T,
        velocity: Vec<Tensor<T>>,
    },
}

impl<T: Scalar> Optimizer<T> {
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), store.params.len(), "one gradient per parameter");
        match self {
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                m,
                v,
                t,
            } => {
                *t += 1;
                let (b1, b2) = (*beta1, *beta2);
                let c1 = T::one() - b1.powi(*t);
                let c2 = T::one() - b2.powi(*t);
                for (i, p) in store.params.iter_mut().enumerate() {
                    let (mi, vi) = (m[i].data_mut(), v[i].data_mut());
                    for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                        let gr = grads[i].data()[j];
                        mi[j] = b1 * mi[j] + (T::one() - b1) * gr;
                        vi[j] = b2 * vi[j] + (T::one() - b2) * gr * gr;
                        let mh = mi[j] / c1;
                        let vh = vi[j] / c2;
                        *w -= *lr * mh / (vh.sqrt() + *eps);
                    }
                }
            }
            Optimizer::Nesterov {
                lr,
                momentum,
                velocity,
            } => {
                for (i, p) in store.params.iter_mut().enumerate() {
                    let vel = velocity[i].data_mut();
                    for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                        let gr = grads[i].data()[j];
                        vel[j] = *momentum * vel[j] + gr;
                        *w -= *lr * (gr + *momentum * vel[j]);
                    }
                }
            }
        }
    }
}
