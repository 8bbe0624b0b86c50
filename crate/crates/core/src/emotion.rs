//! Emotion classifier over encoder states and the label-conditioned Bi-LSTM
//! controller that turns a polarity into a per-phoneme embedding.

use std::rc::Rc;

use ndarray::Array2;

use crate::autodiff::Var;
use crate::corpus::EmotionPolarity;
use crate::error::{Error, Result};
use crate::model::SeqLayout;
use crate::nn::{Conv2d3x3, Ctx, Embedding, Init, Linear, ParamId};

#[derive(Clone, Debug)]
struct ConvBlock {
    conv_a: Conv2d3x3,
    conv_b: Conv2d3x3,
    skip: Linear,
}

impl ConvBlock {
    fn new(init: &mut Init, name: &str, c_in: usize, c_out: usize) -> Self {
        init.scoped(name, |init| Self {
            conv_a: Conv2d3x3::new(init, "conv_a", c_in, c_out),
            conv_b: Conv2d3x3::new(init, "conv_b", c_out, c_out),
            skip: Linear::new(init, "skip", c_in, c_out),
        })
    }

    fn forward(&self, ctx: &Ctx, x: Var, h: usize, w: usize) -> (Var, usize, usize) {
        let t = &ctx.tape;
        let y = t.relu(self.conv_a.forward(ctx, x, h, w));
        let y = self.conv_b.forward(ctx, y, h, w);
        let y = t.relu(t.add(y, self.skip.forward(ctx, x)));
        t.max_pool2x2(y, h, w)
    }
}

/// Residual CNN over the `length x d_model` state map of each utterance,
/// global average pooling, and a five-way linear head.
#[derive(Clone, Debug)]
pub struct EmotionClassifier {
    blocks: Vec<ConvBlock>,
    head: Linear,
    width: usize,
}

impl EmotionClassifier {
    pub fn new(init: &mut Init, channels: [usize; 3]) -> Self {
        init.scoped("classifier", |init| {
            let mut c_in = 1;
            let blocks = channels
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    let b = ConvBlock::new(init, &format!("block{i}"), c_in, c);
                    c_in = c;
                    b
                })
                .collect();
            Self {
                blocks,
                head: Linear::new(init, "head", c_in, EmotionPolarity::COUNT),
                width: c_in,
            }
        })
    }

    /// Logits, `batch x 5`. Empty (pure padding) sequences pool to zero and
    /// get the bias row.
    pub fn forward(&self, ctx: &Ctx, states: Var, layout: &SeqLayout) -> Result<Var> {
        layout.check(&ctx.tape, states, "classifier input")?;
        let t = &ctx.tape;
        if t.value(states).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("classifier input".into()));
        }
        let d = t.shape(states).1;
        let mut pooled = Vec::with_capacity(layout.batch());
        for (b, &len) in layout.lengths.iter().enumerate() {
            if len == 0 {
                pooled.push(t.zeros(1, self.width));
                continue;
            }
            let item = t.slice_rows(states, layout.row(b, 0), len);
            let (mut x, mut h, mut w) = (t.reshape(item, len * d, 1), len, d);
            for block in &self.blocks {
                (x, h, w) = block.forward(ctx, x, h, w);
            }
            pooled.push(t.scale(t.sum_rows(x), 1.0 / (h * w) as f64));
        }
        let pooled = t.concat_rows(&pooled);
        Ok(self.head.forward(ctx, pooled))
    }
}

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

/// Argmax class per row; the first maximum wins ties.
pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect()
}

/// Label to condition on: the forced polarity when given, otherwise the classifier's argmax.
pub fn predict_or_force(logits: &Array2<f64>, forced: &[Option<EmotionPolarity>]) -> Result<Vec<usize>> {
    if forced.len() != logits.nrows() {
        return Err(Error::shape(
            "forced labels",
            format!("{} entries for {} sequences", forced.len(), logits.nrows()),
        ));
    }
    Ok(argmax_rows(logits)
        .into_iter()
        .zip(forced)
        .map(|(p, f)| f.map_or(p, EmotionPolarity::class_index))
        .collect())
}

/// One LSTM direction: input and recurrent weights with gates ordered i, f, g, o.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(init: &mut Init, name: &str, d_in: usize, hidden: usize) -> Self {
        init.scoped(name, |init| {
            let w_input = init.xavier("w_input", d_in, 4 * hidden, d_in, hidden);
            let w_hidden = init.xavier("w_hidden", hidden, 4 * hidden, hidden, hidden);
            let bias = init.zeros("bias", 1, 4 * hidden);
            Self {
                w_input,
                w_hidden,
                bias,
                hidden,
            }
        })
    }

    /// Runs every sequence of the batch in parallel, forwards or reversed within
    /// its own valid prefix, starting from hidden state `h0` (`batch x hidden`)
    /// and a zero cell. Returns `batch * max_len x hidden`, zero on padding.
    pub fn run(&self, ctx: &Ctx, inputs: Var, layout: &SeqLayout, h0: Var, reverse: bool) -> Var {
        let t = &ctx.tape;
        let n = self.hidden;
        let batch = layout.batch();
        let projected = t.add_row(t.matmul(inputs, ctx.param(self.w_input)), ctx.param(self.bias));
        let w_hidden = ctx.param(self.w_hidden);
        let position = |b: usize, s: usize| {
            let len = layout.lengths[b];
            (s < len).then(|| if reverse { len - 1 - s } else { s })
        };
        let (mut h, mut c) = (h0, t.zeros(batch, n));
        let mut outputs = Vec::with_capacity(layout.max_len);
        for s in 0..layout.max_len {
            let rows: Vec<Option<usize>> = (0..batch).map(|b| position(b, s).map(|p| layout.row(b, p))).collect();
            let active = Rc::new(Array2::from_shape_fn((batch, n), |(b, _)| {
                f64::from(rows[b].is_some() as u8)
            }));
            let idle = Rc::new(active.mapv(|a| 1.0 - a));
            let gates = t.add(t.gather_rows(projected, Rc::new(rows)), t.matmul(h, w_hidden));
            let i = t.sigmoid(t.slice_cols(gates, 0, n));
            let f = t.sigmoid(t.slice_cols(gates, n, n));
            let g = t.tanh(t.slice_cols(gates, 2 * n, n));
            let o = t.sigmoid(t.slice_cols(gates, 3 * n, n));
            let c_new = t.add(t.mul(f, c), t.mul(i, g));
            let h_new = t.mul(o, t.tanh(c_new));
            outputs.push(t.mul_const(h_new, Rc::clone(&active)));
            c = t.add(t.mul_const(c_new, Rc::clone(&active)), t.mul_const(c, Rc::clone(&idle)));
            h = t.add(t.mul_const(h_new, active), t.mul_const(h, idle));
        }
        let steps = t.concat_rows(&outputs);
        let mut index = vec![None; layout.rows()];
        for b in 0..batch {
            for s in 0..layout.lengths[b] {
                let p = position(b, s).expect("inside prefix");
                index[layout.row(b, p)] = Some(s * batch + b);
            }
        }
        t.gather_rows(steps, Rc::new(index))
    }
}

/// Maps a polarity label and the encoder states to a per-phoneme emotion
/// embedding of width `d_model`.
#[derive(Clone, Debug)]
pub struct EmotionController {
    pub label_embedding: Embedding,
    pub forward_cell: LstmCell,
    pub backward_cell: LstmCell,
    pub projection: Linear,
}

impl EmotionController {
    pub fn new(init: &mut Init, d_model: usize) -> Self {
        init.scoped("controller", |init| Self {
            label_embedding: Embedding::new(init, "label", EmotionPolarity::COUNT, d_model),
            forward_cell: LstmCell::new(init, "lstm_fw", 2 * d_model, d_model),
            backward_cell: LstmCell::new(init, "lstm_bw", 2 * d_model, d_model),
            projection: Linear::new(init, "projection", 2 * d_model, d_model),
        })
    }

    pub fn forward(&self, ctx: &Ctx, states: Var, layout: &SeqLayout, labels: &[usize]) -> Result<Var> {
        layout.check(&ctx.tape, states, "controller input")?;
        if labels.len() != layout.batch() {
            return Err(Error::shape(
                "labels",
                format!("{} labels for {} sequences", labels.len(), layout.batch()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= EmotionPolarity::COUNT) {
            return Err(Error::InvalidClassIndex(bad));
        }
        let t = &ctx.tape;
        let h0 = self
            .label_embedding
            .forward(ctx, Rc::new(labels.iter().map(|&l| Some(l)).collect()));
        let per_row: Vec<Option<usize>> = (0..layout.batch())
            .flat_map(|b| (0..layout.max_len).map(move |p| (p < layout.lengths[b]).then_some(labels[b])))
            .collect();
        let label_rows = self.label_embedding.forward(ctx, Rc::new(per_row));
        let inputs = t.concat_cols(&[states, label_rows]);
        let fw = self.forward_cell.run(ctx, inputs, layout, h0, false);
        let bw = self.backward_cell.run(ctx, inputs, layout, h0, true);
        let out = self.projection.forward(ctx, t.concat_cols(&[fw, bw]));
        Ok(layout.mask(t, out))
    }
}
