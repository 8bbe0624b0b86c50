//! Parameter storage and the basic layers used by the acoustic model and the
//! emotion predictor.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<f64>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }
}

/// Builds parameters with hierarchical names and seeded initialisation.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, limit: f64) -> ParamId {
        let rng = &mut self.rng;
        let value = Array2::from_shape_fn((rows, cols), |_| {
            if limit > 0.0 {
                rng.random_range(-limit..limit)
            } else {
                0.0
            }
        });
        let full = self.full_name(name);
        self.store.add(full, value)
    }

    /// Glorot/Xavier uniform with explicit fans.
    pub fn xavier(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, rows, cols, limit)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let full = self.full_name(name);
        self.store.add(full, Array2::zeros((rows, cols)))
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        let full = self.full_name(name);
        self.store.add(full, Array2::from_elem((rows, cols), value))
    }
}

/// One forward pass: a tape bound to a parameter store, plus the mode and the
/// dropout random stream.
pub struct Ctx<'a> {
    pub tape: Tape,
    pub params: &'a ParamStore,
    pub train: bool,
    bound: RefCell<HashMap<ParamId, Var>>,
    rng: RefCell<ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    pub fn new(params: &'a ParamStore, train: bool, dropout_seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            params,
            train,
            bound: RefCell::new(HashMap::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(dropout_seed)),
        }
    }

    pub fn inference(params: &'a ParamStore) -> Self {
        Self::new(params, false, 0)
    }

    /// The tape variable for a parameter, created on first use.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.borrow().get(&id) {
            return v;
        }
        let v = self.tape.variable(self.params.get(id).clone());
        self.bound.borrow_mut().insert(id, v);
        v
    }

    /// Inverted dropout; identity outside training or when `p == 0`.
    pub fn dropout(&self, x: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        let (r, c) = self.tape.shape(x);
        let keep = 1.0 - p;
        let mut rng = self.rng.borrow_mut();
        let mask = Array2::from_shape_fn((r, c), |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        self.tape.mul_const(x, Rc::new(mask))
    }

    /// Parameter gradients after `backward`; unused parameters get zeros.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<Array2<f64>> {
        let bound = self.bound.borrow();
        self.params
            .ids()
            .map(|id| {
                bound
                    .get(&id)
                    .and_then(|&v| grads.take(v))
                    .unwrap_or_else(|| Array2::zeros(self.params.get(id).dim()))
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Self {
        init.scoped(name, |init| Self {
            weight: init.xavier("weight", d_in, d_out, d_in, d_out),
            bias: init.zeros("bias", 1, d_out),
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Var {
        let t = &ctx.tape;
        let y = t.matmul(x, ctx.param(self.weight));
        t.add_row(y, ctx.param(self.bias))
    }
}

/// 1-D convolution over stacked fixed-length sequences, "same" zero padding.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new(init: &mut Init, name: &str, c_in: usize, c_out: usize, kernel: usize) -> Self {
        init.scoped(name, |init| Self {
            weight: init.xavier("weight", kernel * c_in, c_out, kernel * c_in, kernel * c_out),
            bias: init.zeros("bias", 1, c_out),
            kernel,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: Var, segment: usize) -> Var {
        let t = &ctx.tape;
        let cols = if self.kernel == 1 {
            x
        } else {
            t.unfold1d(x, segment, self.kernel, (self.kernel - 1) / 2)
        };
        let y = t.matmul(cols, ctx.param(self.weight));
        t.add_row(y, ctx.param(self.bias))
    }
}

/// 3x3, stride 1, padding 1 convolution on a `pixels x channels` map.
#[derive(Clone, Debug)]
pub struct Conv2d3x3 {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d3x3 {
    pub fn new(init: &mut Init, name: &str, c_in: usize, c_out: usize) -> Self {
        init.scoped(name, |init| Self {
            weight: init.xavier("weight", 9 * c_in, c_out, 9 * c_in, 9 * c_out),
            bias: init.zeros("bias", 1, c_out),
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: Var, height: usize, width: usize) -> Var {
        let t = &ctx.tape;
        let cols = t.unfold3x3(x, height, width);
        let y = t.matmul(cols, ctx.param(self.weight));
        t.add_row(y, ctx.param(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        init.scoped(name, |init| Self {
            gamma: init.constant("gamma", 1, dim, 1.0),
            beta: init.zeros("beta", 1, dim),
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Var {
        ctx.tape
            .layer_norm(x, ctx.param(self.gamma), ctx.param(self.beta), Self::EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
}

impl Embedding {
    pub fn new(init: &mut Init, name: &str, rows: usize, dim: usize) -> Self {
        let limit = (3.0 / dim as f64).sqrt();
        Self {
            table: init.scoped(name, |init| init.uniform("table", rows, dim, limit)),
            rows,
        }
    }

    /// Looks up rows; `None` yields a zero row.
    pub fn forward(&self, ctx: &Ctx, ids: Rc<Vec<Option<usize>>>) -> Var {
        ctx.tape.gather_rows(ctx.param(self.table), ids)
    }
}

/// Sinusoidal position table, `len x dim`: even columns `sin`, odd columns `cos`.
pub fn sinusoid_table(len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
