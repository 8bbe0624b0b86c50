//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on a [`Tape`] is a 2-D array. Sequences are `positions x features`;
//! 2-D feature maps are `pixels x channels` with pixels in row-major order.
//! Nodes record the op that produced them; [`Tape::backward`] walks the tape in
//! reverse and accumulates gradients.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<Array2<f64>>),
    MaskRows(Var, Rc<Vec<bool>>),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    SumAll(Var),
    SumRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    /// Softmax over the first `valid` columns of each row; the rest are zero.
    PrefixSoftmax(Var, usize),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather(Var, Rc<Vec<Option<usize>>>),
    Reshape(Var),
    Unfold1d {
        x: Var,
        segment: usize,
        kernel: usize,
        pad: usize,
    },
    Unfold3x3 {
        x: Var,
        height: usize,
        width: usize,
    },
    MaxPool2x2 {
        x: Var,
        argmax: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
        probs: Array2<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Array2<f64>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn constant(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Var {
        self.constant(Array2::zeros((rows, cols)))
    }

    /// Copies the value into a fresh constant, cutting gradient flow.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn unary(&self, a: Var, f: impl Fn(&Array2<f64>) -> Array2<f64>, op: Op) -> Var {
        let value = f(&self.value(a));
        let rg = self.grad_of(&[a]);
        self.push(value, op, rg)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let (av, bv) = (self.value(a), self.value(b));
            assert_eq!(av.ncols(), bv.nrows(), "matmul inner dimensions");
            av.dot(&*bv)
        };
        let rg = self.grad_of(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn matmul_t(&self, a: Var, b: Var) -> Var {
        let value = {
            let (av, bv) = (self.value(a), self.value(b));
            assert_eq!(av.ncols(), bv.ncols(), "matmul_t inner dimensions");
            av.dot(&bv.t())
        };
        let rg = self.grad_of(&[a, b]);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(&Array2<f64>, &Array2<f64>) -> Array2<f64>, op: Op) -> Var {
        let value = {
            let (av, bv) = (self.value(a), self.value(b));
            assert_eq!(av.dim(), bv.dim(), "elementwise shapes");
            f(&av, &bv)
        };
        let rg = self.grad_of(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 x m` row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let value = {
            let (av, rv) = (self.value(a), self.value(row));
            assert_eq!(rv.nrows(), 1, "add_row expects a single row");
            assert_eq!(av.ncols(), rv.ncols(), "add_row widths");
            &*av + &*rv
        };
        let rg = self.grad_of(&[a, row]);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    /// Elementwise product with a constant (masks, dropout).
    pub fn mul_const(&self, a: Var, c: Rc<Array2<f64>>) -> Var {
        let value = {
            let av = self.value(a);
            assert_eq!(av.dim(), c.dim(), "mul_const shapes");
            &*av * &*c
        };
        let rg = self.grad_of(&[a]);
        self.push(value, Op::MulConst(a, c), rg)
    }

    /// Zeroes the rows whose flag is `false`.
    pub fn mask_rows(&self, a: Var, keep: Rc<Vec<bool>>) -> Var {
        let value = {
            let mut v = self.value(a).clone();
            assert_eq!(v.nrows(), keep.len(), "mask_rows length");
            for (mut row, &k) in v.rows_mut().into_iter().zip(keep.iter()) {
                if !k {
                    row.fill(0.0);
                }
            }
            v
        };
        let rg = self.grad_of(&[a]);
        self.push(value, Op::MaskRows(a, keep), rg)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(|v| v.max(0.0)), Op::Relu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(|v| 1.0 / (1.0 + (-v).exp())), Op::Sigmoid(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(f64::tanh), Op::Tanh(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(f64::abs), Op::Abs(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(|v| v * v), Op::Square(a))
    }

    /// Sum of all elements as a `1 x 1` value.
    pub fn sum(&self, a: Var) -> Var {
        self.unary(a, |x| Array2::from_elem((1, 1), x.sum()), Op::SumAll(a))
    }

    /// Column sums, `1 x m`.
    pub fn sum_rows(&self, a: Var) -> Var {
        self.unary(a, |x| x.sum_axis(Axis(0)).insert_axis(Axis(0)), Op::SumRows(a))
    }

    /// Row-wise layer normalisation with affine `1 x m` gain and bias.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (value, xhat, inv_std) = {
            let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
            let m = xv.ncols() as f64;
            let mut xhat = xv.clone();
            let mut inv_std = Vec::with_capacity(xv.nrows());
            for mut row in xhat.rows_mut() {
                let mean = row.sum() / m;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
                let is = 1.0 / (var + eps).sqrt();
                row.mapv_inplace(|v| (v - mean) * is);
                inv_std.push(is);
            }
            let value = &xhat * &*gv + &*bv;
            (value, xhat, inv_std)
        };
        let rg = self.grad_of(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Softmax across the first `valid` columns of each row; later columns get weight 0.
    pub fn prefix_softmax(&self, a: Var, valid: usize) -> Var {
        let value = {
            let av = self.value(a);
            assert!(valid >= 1 && valid <= av.ncols(), "prefix_softmax needs 1..=cols valid");
            let mut out = Array2::zeros(av.dim());
            for (src, mut dst) in av.rows().into_iter().zip(out.rows_mut()) {
                let head = src.slice(s![..valid]);
                let max = head.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let mut total = 0.0;
                for j in 0..valid {
                    let e = (src[j] - max).exp();
                    dst[j] = e;
                    total += e;
                }
                dst.slice_mut(s![..valid]).mapv_inplace(|e| e / total);
            }
            out
        };
        let rg = self.grad_of(&[a]);
        self.push(value, Op::PrefixSoftmax(a, valid), rg)
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        self.unary(
            a,
            |x| x.slice(s![start..start + len, ..]).to_owned(),
            Op::SliceRows(a, start),
        )
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        self.unary(
            a,
            |x| x.slice(s![.., start..start + len]).to_owned(),
            Op::SliceCols(a, start),
        )
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        if parts.len() == 1 {
            return parts[0];
        }
        let value = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("concat_rows widths")
        };
        let rg = self.grad_of(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        if parts.len() == 1 {
            return parts[0];
        }
        let value = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat_cols heights")
        };
        let rg = self.grad_of(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Row gather; `None` produces a zero row.
    pub fn gather_rows(&self, a: Var, index: Rc<Vec<Option<usize>>>) -> Var {
        let value = {
            let av = self.value(a);
            let mut out = Array2::zeros((index.len(), av.ncols()));
            for (i, src) in index.iter().enumerate() {
                if let Some(r) = *src {
                    out.row_mut(i).assign(&av.row(r));
                }
            }
            out
        };
        let rg = self.grad_of(&[a]);
        self.push(value, Op::Gather(a, index), rg)
    }

    /// Row-major reshape.
    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        self.unary(
            a,
            |x| {
                let flat: Vec<f64> = x.iter().copied().collect();
                Array2::from_shape_vec((rows, cols), flat).expect("reshape element count")
            },
            Op::Reshape(a),
        )
    }

    /// im2col for 1-D convolution over `x.rows() / segment` independent sequences
    /// of length `segment`, zero padded by `pad` on each side. Output row `t` holds
    /// `kernel` input rows `t - pad .. t - pad + kernel` laid out side by side.
    pub fn unfold1d(&self, x: Var, segment: usize, kernel: usize, pad: usize) -> Var {
        let value = {
            let xv = self.value(x);
            let (n, c) = xv.dim();
            assert_eq!(n % segment, 0, "unfold1d rows must be a multiple of segment");
            let mut out = Array2::zeros((n, kernel * c));
            for base in (0..n).step_by(segment) {
                for t in 0..segment {
                    for j in 0..kernel {
                        let src = t as isize + j as isize - pad as isize;
                        if src >= 0 && (src as usize) < segment {
                            out.slice_mut(s![base + t, j * c..(j + 1) * c])
                                .assign(&xv.row(base + src as usize));
                        }
                    }
                }
            }
            out
        };
        let rg = self.grad_of(&[x]);
        self.push(
            value,
            Op::Unfold1d {
                x,
                segment,
                kernel,
                pad,
            },
            rg,
        )
    }

    /// im2col for a 3x3, stride-1, zero-padded 2-D convolution on a
    /// `height * width x channels` map.
    pub fn unfold3x3(&self, x: Var, height: usize, width: usize) -> Var {
        let value = {
            let xv = self.value(x);
            let c = xv.ncols();
            assert_eq!(xv.nrows(), height * width, "unfold3x3 pixel count");
            let mut out = Array2::zeros((height * width, 9 * c));
            for i in 0..height {
                for j in 0..width {
                    let row = i * width + j;
                    for di in 0..3 {
                        let si = i as isize + di as isize - 1;
                        if si < 0 || si as usize >= height {
                            continue;
                        }
                        for dj in 0..3 {
                            let sj = j as isize + dj as isize - 1;
                            if sj < 0 || sj as usize >= width {
                                continue;
                            }
                            let k = di * 3 + dj;
                            out.slice_mut(s![row, k * c..(k + 1) * c])
                                .assign(&xv.row(si as usize * width + sj as usize));
                        }
                    }
                }
            }
            out
        };
        let rg = self.grad_of(&[x]);
        self.push(value, Op::Unfold3x3 { x, height, width }, rg)
    }

    /// 2x2 max pooling, stride 2, ceil mode. Returns the pooled map and its
    /// `(height, width)`.
    pub fn max_pool2x2(&self, x: Var, height: usize, width: usize) -> (Var, usize, usize) {
        let (oh, ow) = (height.div_ceil(2), width.div_ceil(2));
        let (value, argmax) = {
            let xv = self.value(x);
            let c = xv.ncols();
            assert_eq!(xv.nrows(), height * width, "max_pool2x2 pixel count");
            let mut out = Array2::zeros((oh * ow, c));
            let mut argmax = vec![0; oh * ow * c];
            for i in 0..oh {
                for j in 0..ow {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for di in 0..2 {
                            for dj in 0..2 {
                                let (si, sj) = (2 * i + di, 2 * j + dj);
                                if si < height && sj < width {
                                    let idx = si * width + sj;
                                    let v = xv[[idx, ch]];
                                    if v > best {
                                        best = v;
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        out[[i * ow + j, ch]] = best;
                        argmax[(i * ow + j) * c + ch] = best_idx;
                    }
                }
            }
            (out, argmax)
        };
        let rg = self.grad_of(&[x]);
        (self.push(value, Op::MaxPool2x2 { x, argmax }, rg), oh, ow)
    }

    /// Weighted mean cross-entropy of row-wise softmax against class labels, `1 x 1`.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize], weights: Option<&[f64]>) -> Var {
        let weights: Vec<f64> = weights.map_or_else(|| vec![1.0; labels.len()], <[f64]>::to_vec);
        let (value, probs) = {
            let lv = self.value(logits);
            assert_eq!(lv.nrows(), labels.len(), "cross_entropy labels");
            let mut probs = lv.clone();
            let mut loss = 0.0;
            let total_w: f64 = weights.iter().sum();
            for ((mut row, &y), &w) in probs.rows_mut().into_iter().zip(labels).zip(&weights) {
                let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += w * (lse - row[y]);
                row.mapv_inplace(|v| (v - lse).exp());
            }
            (Array2::from_elem((1, 1), loss / total_w), probs)
        };
        let rg = self.grad_of(&[logits]);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights,
                probs,
            },
            rg,
        )
    }

    /// Gradients of the scalar `root` with respect to every node that requires them.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.dim(), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));
        for id in (0..=root.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let val = |v: Var| &nodes[v.0].value;
            let wants = |v: Var| nodes[v.0].requires_grad;
            let mut send = |v: Var, g: Array2<f64>| {
                if nodes[v.0].requires_grad {
                    accumulate(&mut grads[v.0], g);
                }
            };
            match &node.op {
                Op::Leaf => unreachable!("leaves are skipped above"),
                Op::MatMul(a, b) => {
                    if wants(*a) {
                        send(*a, g.dot(&val(*b).t()));
                    }
                    if wants(*b) {
                        send(*b, val(*a).t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if wants(*a) {
                        send(*a, g.dot(val(*b)));
                    }
                    if wants(*b) {
                        send(*b, g.t().dot(val(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if wants(*b) {
                        send(*b, g.clone());
                    }
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    if wants(*b) {
                        send(*b, -&g);
                    }
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        send(*a, &g * val(*b));
                    }
                    if wants(*b) {
                        send(*b, &g * val(*a));
                    }
                }
                Op::AddRow(a, r) => {
                    if wants(*r) {
                        send(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    send(*a, g);
                }
                Op::Scale(a, c) => send(*a, g * *c),
                Op::MulConst(a, c) => send(*a, g * &**c),
                Op::MaskRows(a, keep) => {
                    let mut g = g;
                    for (mut row, &k) in g.rows_mut().into_iter().zip(keep.iter()) {
                        if !k {
                            row.fill(0.0);
                        }
                    }
                    send(*a, g);
                }
                Op::Relu(a) => {
                    let mut g = g;
                    Zip::from(&mut g).and(&node.value).for_each(|g, &y| {
                        if y <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    send(*a, g);
                }
                Op::Sigmoid(a) => {
                    let mut g = g;
                    Zip::from(&mut g).and(&node.value).for_each(|g, &y| *g *= y * (1.0 - y));
                    send(*a, g);
                }
                Op::Tanh(a) => {
                    let mut g = g;
                    Zip::from(&mut g).and(&node.value).for_each(|g, &y| *g *= 1.0 - y * y);
                    send(*a, g);
                }
                Op::Abs(a) => {
                    let mut g = g;
                    Zip::from(&mut g)
                        .and(val(*a))
                        .for_each(|g, &x| *g *= x.signum() * (x != 0.0) as u8 as f64);
                    send(*a, g);
                }
                Op::Square(a) => {
                    let mut g = g;
                    Zip::from(&mut g).and(val(*a)).for_each(|g, &x| *g *= 2.0 * x);
                    send(*a, g);
                }
                Op::SumAll(a) => {
                    let dim = val(*a).dim();
                    send(*a, Array2::from_elem(dim, g[[0, 0]]));
                }
                Op::SumRows(a) => {
                    let rows = val(*a).nrows();
                    let full = g.broadcast((rows, g.ncols())).expect("broadcast rows").to_owned();
                    send(*a, full);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if wants(*gamma) {
                        send(*gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if wants(*beta) {
                        send(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if wants(*x) {
                        let gv = val(*gamma);
                        let gxhat = &g * gv;
                        let m = g.ncols() as f64;
                        let mut gx = Array2::zeros(g.dim());
                        for (r, mut out) in gx.rows_mut().into_iter().enumerate() {
                            let gh = gxhat.row(r);
                            let xh = xhat.row(r);
                            let mean_g = gh.sum() / m;
                            let mean_gx = gh.dot(&xh) / m;
                            for k in 0..out.len() {
                                out[k] = inv_std[r] * (gh[k] - mean_g - xh[k] * mean_gx);
                            }
                        }
                        send(*x, gx);
                    }
                }
                Op::PrefixSoftmax(a, valid) => {
                    let y = &node.value;
                    let mut gx = Array2::zeros(g.dim());
                    for r in 0..g.nrows() {
                        let dot: f64 = (0..*valid).map(|j| g[[r, j]] * y[[r, j]]).sum();
                        for j in 0..*valid {
                            gx[[r, j]] = y[[r, j]] * (g[[r, j]] - dot);
                        }
                    }
                    send(*a, gx);
                }
                Op::SliceRows(a, start) => {
                    let mut full = Array2::zeros(val(*a).dim());
                    full.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    send(*a, full);
                }
                Op::SliceCols(a, start) => {
                    let mut full = Array2::zeros(val(*a).dim());
                    full.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    send(*a, full);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = val(p).nrows();
                        if wants(p) {
                            send(p, g.slice(s![offset..offset + rows, ..]).to_owned());
                        }
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = val(p).ncols();
                        if wants(p) {
                            send(p, g.slice(s![.., offset..offset + cols]).to_owned());
                        }
                        offset += cols;
                    }
                }
                Op::Gather(a, index) => {
                    let mut full = Array2::zeros(val(*a).dim());
                    for (i, src) in index.iter().enumerate() {
                        if let Some(r) = *src {
                            let mut row = full.row_mut(r);
                            row += &g.row(i);
                        }
                    }
                    send(*a, full);
                }
                Op::Reshape(a) => {
                    let dim = val(*a).dim();
                    let flat: Vec<f64> = g.iter().copied().collect();
                    send(*a, Array2::from_shape_vec(dim, flat).expect("reshape back"));
                }
                Op::Unfold1d {
                    x,
                    segment,
                    kernel,
                    pad,
                } => {
                    let (n, c) = val(*x).dim();
                    let mut gx = Array2::zeros((n, c));
                    for base in (0..n).step_by(*segment) {
                        for t in 0..*segment {
                            for j in 0..*kernel {
                                let src = t as isize + j as isize - *pad as isize;
                                if src >= 0 && (src as usize) < *segment {
                                    let mut row = gx.row_mut(base + src as usize);
                                    row += &g.slice(s![base + t, j * c..(j + 1) * c]);
                                }
                            }
                        }
                    }
                    send(*x, gx);
                }
                Op::Unfold3x3 { x, height, width } => {
                    let (h, w) = (*height, *width);
                    let c = val(*x).ncols();
                    let mut gx = Array2::zeros((h * w, c));
                    for i in 0..h {
                        for j in 0..w {
                            let row = i * w + j;
                            for di in 0..3 {
                                let si = i as isize + di as isize - 1;
                                if si < 0 || si as usize >= h {
                                    continue;
                                }
                                for dj in 0..3 {
                                    let sj = j as isize + dj as isize - 1;
                                    if sj < 0 || sj as usize >= w {
                                        continue;
                                    }
                                    let k = di * 3 + dj;
                                    let mut dst = gx.row_mut(si as usize * w + sj as usize);
                                    dst += &g.slice(s![row, k * c..(k + 1) * c]);
                                }
                            }
                        }
                    }
                    send(*x, gx);
                }
                Op::MaxPool2x2 { x, argmax } => {
                    let mut gx = Array2::zeros(val(*x).dim());
                    let c = g.ncols();
                    for o in 0..g.nrows() {
                        for ch in 0..c {
                            gx[[argmax[o * c + ch], ch]] += g[[o, ch]];
                        }
                    }
                    send(*x, gx);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    weights,
                    probs,
                } => {
                    let total_w: f64 = weights.iter().sum();
                    let mut gl = probs.clone();
                    for (r, (&y, &w)) in labels.iter().zip(weights).enumerate() {
                        gl[[r, y]] -= 1.0;
                        let scale = g[[0, 0]] * w / total_w;
                        gl.row_mut(r).mapv_inplace(|v| v * scale);
                    }
                    send(*logits, gl);
                }
            }
        }
        Gradients { grads }
    }
}
