//! Parameter storage, initialization and the momentum SGD optimizer.

use std::sync::Arc;

use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::rng::gaussian_vec;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Named, ordered model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn push(&mut self, name: &str, value: Tensor<T>) -> usize {
        self.names.push(name.to_string());
        self.values.push(Arc::new(value));
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.values[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, requires_grad: bool) -> Vec<Var<'t, T>> {
        self.values
            .iter()
            .map(|v| tape.shared(v, requires_grad))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
        }
    }

    pub fn to_layers(&self) -> Vec<(String, Tensor<f32>)> {
        self.names
            .iter()
            .cloned()
            .zip(self.values.iter().map(|v| v.cast()))
            .collect()
    }

    /// Loads values for the same names and shapes from a checkpoint.
    pub fn load_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let t = ckpt.layer(name)?;
            if t.shape() != value.shape() {
                return Err(Error::Format(format!(
                    "layer `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    value.shape()
                )));
            }
            *value = Arc::new(t.cast());
        }
        Ok(())
    }

    fn value_mut(&mut self, i: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[i])
    }
}

/// Gaussian weights scaled by `1/sqrt(fan_in)` and zero bias.
pub fn init_linear<R: Rng, T: Scalar>(
    params: &mut ParamSet<T>,
    rng: &mut R,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> (usize, usize) {
    let s = T::c(1.0 / (fan_in as f64).sqrt());
    let w: Vec<T> = gaussian_vec::<T, _>(rng, fan_in * fan_out)
        .into_iter()
        .map(|v| v * s)
        .collect();
    let w = params.push(&format!("{name}.w"), Tensor::from_parts(vec![fan_in, fan_out], w));
    let b = params.push(&format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
    (w, b)
}

/// `x · w + b` for a batch of rows.
pub fn linear<'t, T: Scalar>(x: Var<'t, T>, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    x.matmul(w)?.add_row(b)
}

/// Stochastic gradient descent with heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: &ParamSet<T>, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: params.values.iter().map(|v| vec![T::zero(); v.numel()]).collect(),
        }
    }

    /// `v ← μ v + g`, `θ ← θ − lr v`. Missing gradients count as zero.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        let (lr, mu) = (T::c(self.lr), T::c(self.momentum));
        for (i, g) in grads.iter().enumerate() {
            let vel = &mut self.velocity[i];
            match g {
                Some(g) => {
                    for (v, &gi) in vel.iter_mut().zip(g.data()) {
                        *v = mu * *v + gi;
                    }
                }
                None => vel.iter_mut().for_each(|v| *v = mu * *v),
            }
            let p = params.value_mut(i);
            for (x, &v) in p.data_mut().iter_mut().zip(vel.iter()) {
                *x = *x - lr * v;
            }
        }
        Ok(())
    }
}
