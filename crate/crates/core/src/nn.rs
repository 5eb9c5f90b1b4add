//! Parameter storage, dense layers and the RMSprop optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Flatten every tensor into one vector, in store order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`ParamStore::flatten`]. Panics on a length mismatch.
    pub fn load_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars(), "flat parameter length mismatch");
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    /// Replace the value of every tensor, keeping names. Shapes must match.
    pub fn replace_all(&mut self, tensors: Vec<Tensor>) -> Result<(), String> {
        if tensors.len() != self.tensors.len() {
            return Err(format!("expected {} tensors, got {}", self.tensors.len(), tensors.len()));
        }
        for (i, (old, new)) in self.tensors.iter().zip(&tensors).enumerate() {
            if old.shape() != new.shape() {
                return Err(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    self.names[i],
                    new.shape(),
                    old.shape()
                ));
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    /// Put every parameter on the tape as a gradient-carrying leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound { vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect() }
    }

    /// Put every parameter on the tape as a constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound { vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect() }
    }
}

/// Parameters of one [`ParamStore`] placed on a tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Gradients aligned with the store, zero where the output does not depend on a parameter.
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Scale gradients in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_in_place(s));
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Fully connected layer, `y = x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init, or all zeros when `zero` is set.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        zero: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut init = |n: usize| -> Vec<f64> {
            if zero {
                vec![0.0; n]
            } else {
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
        };
        let w = Tensor::from_vec(fan_in, fan_out, init(fan_in * fan_out));
        let b = Tensor::from_vec(1, fan_out, init(fan_out));
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), b);
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        x.matmul(p.var(self.weight)).add(p.var(self.bias))
    }
}

/// Multi-layer perceptron with a shared hidden activation and linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `sizes` lists every width including input and output. The output layer
    /// is zero-initialised when `zero_last` is set.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        activation: Activation,
        zero_last: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                Linear::new(store, &format!("{name}.{i}"), sizes[i], sizes[i + 1], zero_last && i == n - 1, rng)
            })
            .collect();
        Self { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(p, h);
            if i + 1 < self.layers.len() {
                h = match self.activation {
                    Activation::Tanh => h.tanh(),
                    Activation::Relu => h.clamp_min(0.0),
                };
            }
        }
        h
    }

    pub fn output_layer(&self) -> &Linear {
        self.layers.last().expect("non-empty MLP")
    }
}

/// RMSprop with the PyTorch update rule: `v = a v + (1 - a) g^2`,
/// `p -= lr g / (sqrt(v) + eps)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    square_avg: Vec<Tensor>,
}

impl RmsProp {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Self {
            lr,
            alpha: 0.99,
            eps: 1e-5,
            square_avg: store.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect(),
        }
    }

    pub fn state(&self) -> &[Tensor] {
        &self.square_avg
    }

    pub fn load_state(&mut self, state: Vec<Tensor>) -> Result<(), String> {
        if state.len() != self.square_avg.len() {
            return Err(format!("optimizer state has {} tensors, expected {}", state.len(), self.square_avg.len()));
        }
        for (a, b) in self.square_avg.iter().zip(&state) {
            if a.shape() != b.shape() {
                return Err(format!("optimizer state shape {:?} != {:?}", b.shape(), a.shape()));
            }
        }
        self.square_avg = state;
        Ok(())
    }

    /// Apply one descent step with the given gradients.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), store.len(), "gradient count mismatch");
        for (i, g) in grads.iter().enumerate() {
            let v = &mut self.square_avg[i];
            let p = store.get_mut(ParamId(i));
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.alpha * *vv + (1.0 - self.alpha) * gv * gv;
                *pv -= self.lr * gv / (vv.sqrt() + self.eps);
            }
        }
    }
}
