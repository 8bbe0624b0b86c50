use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv1d, Ctx, Init, LayerNorm, Linear};

/// Lengths of a padded batch of sequences stacked as `batch * max_len` rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub max_len: usize,
    pub lengths: Vec<usize>,
    keep: Rc<Vec<bool>>,
}

impl SeqLayout {
    pub fn new(lengths: Vec<usize>, max_len: usize) -> Result<Self> {
        if let Some(&l) = lengths.iter().find(|&&l| l > max_len) {
            return Err(Error::shape(
                "layout",
                format!("length {l} exceeds padded length {max_len}"),
            ));
        }
        let keep = lengths.iter().flat_map(|&l| (0..max_len).map(move |t| t < l)).collect();
        Ok(Self {
            max_len,
            lengths,
            keep: Rc::new(keep),
        })
    }

    /// Tight layout: padded length equals the longest sequence.
    pub fn tight(lengths: Vec<usize>) -> Self {
        let max_len = lengths.iter().copied().max().unwrap_or(0);
        Self::new(lengths, max_len).expect("tight layout is valid")
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn rows(&self) -> usize {
        self.batch() * self.max_len
    }

    pub fn keep(&self) -> Rc<Vec<bool>> {
        Rc::clone(&self.keep)
    }

    pub fn valid_positions(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn row(&self, item: usize, pos: usize) -> usize {
        item * self.max_len + pos
    }

    pub fn check(&self, tape: &Tape, x: Var, what: &str) -> Result<()> {
        let (rows, _) = tape.shape(x);
        if rows != self.rows() {
            return Err(Error::shape(what, format!("{rows} rows, layout has {}", self.rows())));
        }
        Ok(())
    }

    pub fn mask(&self, tape: &Tape, x: Var) -> Var {
        tape.mask_rows(x, self.keep())
    }
}

/// Self-attention plus convolutional feed-forward, each with residual and
/// post-layer-norm.
#[derive(Clone, Debug)]
pub struct FftBlock {
    pub n_heads: usize,
    pub d_model: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub attn_norm: LayerNorm,
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub ffn_norm: LayerNorm,
}

impl FftBlock {
    pub fn new(
        init: &mut Init,
        name: &str,
        d_model: usize,
        n_heads: usize,
        filter: usize,
        kernels: [usize; 2],
    ) -> Self {
        init.scoped(name, |init| Self {
            n_heads,
            d_model,
            query: Linear::new(init, "query", d_model, d_model),
            key: Linear::new(init, "key", d_model, d_model),
            value: Linear::new(init, "value", d_model, d_model),
            output: Linear::new(init, "output", d_model, d_model),
            attn_norm: LayerNorm::new(init, "attn_norm", d_model),
            conv1: Conv1d::new(init, "conv1", d_model, filter, kernels[0]),
            conv2: Conv1d::new(init, "conv2", filter, d_model, kernels[1]),
            ffn_norm: LayerNorm::new(init, "ffn_norm", d_model),
        })
    }

    /// Multi-head scaled dot-product attention in which every position attends
    /// only to the valid positions of its own sequence. Padded rows come back zero.
    pub fn attention(&self, ctx: &Ctx, x: Var, layout: &SeqLayout) -> Var {
        let t = &ctx.tape;
        let q = self.query.forward(ctx, x);
        let k = self.key.forward(ctx, x);
        let v = self.value.forward(ctx, x);
        let dh = self.d_model / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut items = Vec::with_capacity(layout.batch());
        for (b, &len) in layout.lengths.iter().enumerate() {
            if len == 0 {
                items.push(t.zeros(layout.max_len, self.d_model));
                continue;
            }
            let start = layout.row(b, 0);
            let (qb, kb, vb) = (
                t.slice_rows(q, start, len),
                t.slice_rows(k, start, len),
                t.slice_rows(v, start, len),
            );
            let heads: Vec<Var> = (0..self.n_heads)
                .map(|h| {
                    let qh = t.slice_cols(qb, h * dh, dh);
                    let kh = t.slice_cols(kb, h * dh, dh);
                    let vh = t.slice_cols(vb, h * dh, dh);
                    let scores = t.scale(t.matmul_t(qh, kh), scale);
                    let probs = t.prefix_softmax(scores, len);
                    t.matmul(probs, vh)
                })
                .collect();
            let merged = t.concat_cols(&heads);
            items.push(if len < layout.max_len {
                let pad = t.zeros(layout.max_len - len, self.d_model);
                t.concat_rows(&[merged, pad])
            } else {
                merged
            });
        }
        let stacked = t.concat_rows(&items);
        self.output.forward(ctx, stacked)
    }

    pub fn forward(&self, ctx: &Ctx, x: Var, layout: &SeqLayout) -> Result<Var> {
        layout.check(&ctx.tape, x, "fft block input")?;
        let t = &ctx.tape;
        let attended = self.attention(ctx, x, layout);
        let x1 = self.attn_norm.forward(ctx, t.add(x, attended));
        let x1 = layout.mask(t, x1);
        let h = t.relu(self.conv1.forward(ctx, x1, layout.max_len));
        let h = layout.mask(t, h);
        let h = self.conv2.forward(ctx, h, layout.max_len);
        let x2 = self.ffn_norm.forward(ctx, t.add(x1, h));
        Ok(layout.mask(t, x2))
    }
}

/// Two conv/ReLU/layer-norm/dropout stages and a scalar projection per position.
#[derive(Clone, Debug)]
pub struct VariancePredictor {
    pub conv1: Conv1d,
    pub norm1: LayerNorm,
    pub conv2: Conv1d,
    pub norm2: LayerNorm,
    pub head: Linear,
    pub dropout: f64,
}

impl VariancePredictor {
    pub fn new(init: &mut Init, name: &str, d_model: usize, filter: usize, kernel: usize, dropout: f64) -> Self {
        init.scoped(name, |init| Self {
            conv1: Conv1d::new(init, "conv1", d_model, filter, kernel),
            norm1: LayerNorm::new(init, "norm1", filter),
            conv2: Conv1d::new(init, "conv2", filter, filter, kernel),
            norm2: LayerNorm::new(init, "norm2", filter),
            head: Linear::new(init, "head", filter, 1),
            dropout,
        })
    }

    /// One prediction per row, `rows x 1`; padded rows are zero.
    pub fn forward(&self, ctx: &Ctx, x: Var, layout: &SeqLayout) -> Result<Var> {
        layout.check(&ctx.tape, x, "variance predictor input")?;
        let t = &ctx.tape;
        let mut h = layout.mask(t, x);
        for (conv, norm) in [(&self.conv1, &self.norm1), (&self.conv2, &self.norm2)] {
            h = t.relu(conv.forward(ctx, h, layout.max_len));
            h = norm.forward(ctx, h);
            h = ctx.dropout(h, self.dropout);
            h = layout.mask(t, h);
        }
        Ok(layout.mask(t, self.head.forward(ctx, h)))
    }
}

/// Expands each phoneme row by its duration. Returns the frame-level sequence
/// and its layout.
pub fn length_regulate(tape: &Tape, x: Var, layout: &SeqLayout, durations: &[usize]) -> Result<(Var, SeqLayout)> {
    layout.check(tape, x, "length regulator input")?;
    if durations.len() != layout.rows() {
        return Err(Error::shape(
            "durations",
            format!("{} durations for {} rows", durations.len(), layout.rows()),
        ));
    }
    let mut frame_lengths = Vec::with_capacity(layout.batch());
    for (b, &len) in layout.lengths.iter().enumerate() {
        let total: usize = (0..len).map(|p| durations[layout.row(b, p)]).sum();
        if total == 0 && len > 0 {
            return Err(Error::Contract(format!(
                "sequence {b} has all-zero durations; expansion would be empty"
            )));
        }
        frame_lengths.push(total);
    }
    let frames = SeqLayout::tight(frame_lengths);
    if frames.max_len == 0 {
        return Err(Error::Contract(
            "every sequence in the batch expands to zero frames".into(),
        ));
    }
    let mut index = Vec::with_capacity(frames.rows());
    for (b, &len) in layout.lengths.iter().enumerate() {
        for p in 0..len {
            let row = layout.row(b, p);
            index.extend(std::iter::repeat_n(Some(row), durations[row]));
        }
        index.extend(std::iter::repeat_n(None, frames.max_len - frames.lengths[b]));
    }
    Ok((tape.gather_rows(x, Rc::new(index)), frames))
}
