//! Parameter storage and the small MLPs shared by the tokenizer, the
//! feature-group fusion and the ranking model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, OptimizerState, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, owned parameter tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

/// Graph leaves for every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Copies every parameter into `g` as a leaf that requires grad.
    pub fn bind(&self, g: &mut Graph) -> Result<Bound> {
        let vars = self
            .values
            .iter()
            .map(|t| g.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    /// Applies one optimizer step to every parameter.
    pub fn apply(&mut self, opt: &mut OptimizerState, grads: &[Tensor]) -> Result<()> {
        let mut refs: Vec<&mut Tensor> = self.values.iter_mut().collect();
        opt.step(&mut refs, grads)?;
        if let Some(i) = self.values.iter().position(|t| !t.all_finite()) {
            return Err(Error::NonFinite(format!("parameter {}", self.names[i])));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    fn graph(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// `x W + b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng));
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { weight, bias }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = g.matmul(x, p.var(self.weight))?;
        g.add_bias(h, p.var(self.bias))
    }

    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut h = x.matmul(store.get(self.weight))?;
        let b = store.get(self.bias).data().to_vec();
        let n = b.len();
        for (i, v) in h.data_mut().iter_mut().enumerate() {
            *v += b[i % n];
        }
        Ok(h)
    }
}

/// One hidden layer: `act(x W1 + b1) W2 + b2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
    pub activation: Activation,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let (d_in, d_hidden, d_out) = dims;
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), d_in, d_hidden, rng),
            out: Linear::new(store, &format!("{name}.out"), d_hidden, d_out, rng),
            activation,
        }
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.get(self.hidden.weight).shape()[0]
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.get(self.out.weight).shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, x)?;
        let h = self.activation.graph(g, h)?;
        self.out.forward(g, p, h)
    }

    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut h = self.hidden.eval(store, x)?;
        let act = self.activation;
        h.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
        self.out.eval(store, &h)
    }
}
