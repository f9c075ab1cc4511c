//! Parameter storage and the small layers every model is assembled from.

use std::cell::RefCell;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
    /// Buffers (e.g. running statistics) are stored and checkpointed but
    /// never receive gradients.
    pub trainable: bool,
}

/// Named, ordered parameter collection. Order is creation order, which
/// makes checkpoints and optimizer state deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value: Arc::new(value),
            decay,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value: Arc::new(value),
            decay: false,
            trainable: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn arc(&self, id: ParamId) -> Arc<Tensor<T>> {
        self.params[id.0].value.clone()
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::dim(
                "param_set",
                format!("{}: {:?} vs {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Applies `f` to every tensor, e.g. to zero a subset in tests.
    pub fn map_values(&mut self, mut f: impl FnMut(&str, &Tensor<T>) -> Tensor<T>) {
        for p in &mut self.params {
            let v = f(&p.name, &p.value);
            assert_eq!(v.shape(), p.value.shape(), "map_values changed the shape of {}", p.name);
            p.value = Arc::new(v);
        }
    }
}

/// Binds store parameters to tape leaves on first use.
pub struct Binder<'a, T: Float> {
    pub tape: &'a Tape<T>,
    pub store: &'a ParamStore<T>,
    trainable: bool,
    vars: RefCell<Vec<Option<Var>>>,
}

impl<'a, T: Float> Binder<'a, T> {
    pub fn new(tape: &'a Tape<T>, store: &'a ParamStore<T>, trainable: bool) -> Self {
        Binder {
            tape,
            store,
            trainable,
            vars: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let trainable = self.trainable && self.store.params[id.0].trainable;
        let v = self.tape.leaf(self.store.arc(id), trainable);
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Parameter gradients in store order; `None` for parameters the
    /// forward pass never touched.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.vars
            .borrow()
            .iter()
            .map(|v| v.and_then(|v| grads.take(v)))
            .collect()
    }
}

/// Deterministic parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn uniform<T: Float>(&mut self, shape: impl Into<Vec<usize>>, bound: f64) -> Tensor<T> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..=bound)))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), init.uniform([d_in, d_out], bound), true);
        let b = bias.then(|| store.add(format!("{name}.b"), init.uniform([d_out], bound), false));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward<T: Float>(&self, bx: &Binder<'_, T>, x: Var) -> Result<Var> {
        let y = bx.tape.matmul(x, bx.p(self.w))?;
        match self.b {
            Some(b) => bx.tape.add_bias(y, bx.p(b)),
            None => Ok(y),
        }
    }

    /// Single-row application with the same accumulation order as
    /// [`Linear::forward`].
    pub fn apply_row<T: Float>(&self, store: &ParamStore<T>, x: &[T]) -> Vec<T> {
        let mut out = tensor::vec_mat(x, store.get(self.w).data(), self.d_out);
        if let Some(b) = self.b {
            for (o, &bv) in out.iter_mut().zip(store.get(b).data()) {
                *o += bv;
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([dim], T::one()), false),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim]), false),
        }
    }

    pub fn forward<T: Float>(&self, bx: &Binder<'_, T>, x: Var) -> Result<Var> {
        bx.tape.layernorm(x, bx.p(self.gamma), bx.p(self.beta))
    }

    pub fn apply_row<T: Float>(&self, store: &ParamStore<T>, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); x.len()];
        tensor::layernorm_row(
            x,
            store.get(self.gamma).data(),
            store.get(self.beta).data(),
            &mut out,
        );
        out
    }
}
