//! Per-stream encoders: ReLU input projection, temporal encoder, output
//! projection.
//!
//! Sequences are time-major 2-D matrices: a batch of `B` windows of length
//! `L` is an `(L·B) × d` matrix whose row `t·B + b` is step `t` of window `b`.
//! Shifting a sequence by `k` steps is then a shift by `k·B` rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::forecaster::Gru;
use crate::params::{pname, Bound, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Stack of gated, dilated causal convolution blocks.
    Temporal,
    /// A single recurrent layer.
    Recurrent,
}

/// `x · w + b`, with `b` broadcast over rows.
pub fn linear<T: Scalar>(tape: &Tape<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

/// Delays a time-major sequence by `steps`, filling the first rows with
/// zeros.
pub fn causal_shift<T: Scalar>(tape: &Tape<T>, x: Var, steps: usize, batch: usize) -> Result<Var, TensorError> {
    if steps == 0 {
        return Ok(x);
    }
    let shape = tape.shape(x);
    let (rows, cols) = (shape[0], shape[1]);
    let k = steps * batch;
    if k >= rows {
        return Ok(tape.constant(Tensor::zeros(vec![rows, cols])));
    }
    let pad = tape.constant(Tensor::zeros(vec![k, cols]));
    let head = tape.slice_rows(x, 0, rows - k)?;
    tape.concat(&[pad, head], 0)
}

/// Per-row normalization to zero mean and unit variance, without affine
/// parameters.
pub fn layer_norm<T: Scalar>(tape: &Tape<T>, x: Var) -> Result<Var, TensorError> {
    let cols = tape.shape(x)[1];
    let mean = tape.expand_cols(tape.mean(x, Some(1))?, cols)?;
    let centred = tape.sub(x, mean)?;
    let var = tape.mean(tape.square(centred)?, Some(1))?;
    let sd = tape.sqrt(tape.offset(var, T::lit(LAYER_NORM_EPS))?)?;
    tape.div(centred, tape.expand_cols(sd, cols)?)
}

/// Causal temporal block stack. Block `i` computes, with dilation `d = 2^i`,
///
/// ```text
/// n  = norm(U)
/// c  = [n | shift(n, d) | shift(n, 2d)] · W + b      (W: 3h × 2h)
/// U' = U + c[:, :h] ⊙ σ(c[:, h:])
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalEncoder {
    pub prefix: String,
    pub hidden: usize,
    pub depth: usize,
}

impl TemporalEncoder {
    pub fn new(prefix: impl Into<String>, hidden: usize, depth: usize) -> Self {
        Self {
            prefix: prefix.into(),
            hidden,
            depth,
        }
    }

    fn name(&self, block: usize, local: &str) -> String {
        pname(&self.prefix, &format!("block{block}.{local}"))
    }

    pub fn init<T: Scalar, R: Rng>(&self, params: &mut ParamSet<T>, rng: &mut R) {
        let h = self.hidden;
        for i in 0..self.depth {
            params.init_linear(self.name(i, "w"), 3 * h, 2 * h, rng);
            params.init_const(self.name(i, "b"), vec![2 * h], 0.0);
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, u: Var, batch: usize) -> Result<Var, TensorError> {
        let h = self.hidden;
        let mut x = u;
        for i in 0..self.depth {
            let d = 1usize << i;
            let n = layer_norm(tape, x)?;
            let taps = [n, causal_shift(tape, n, d, batch)?, causal_shift(tape, n, 2 * d, batch)?];
            let stacked = tape.concat(&taps, 1)?;
            let c = linear(tape, stacked, p.var(&self.name(i, "w")), Some(p.var(&self.name(i, "b"))))?;
            let value = tape.slice_cols(c, 0, h)?;
            let gate = tape.sigmoid(tape.slice_cols(c, h, 2 * h)?)?;
            x = tape.add(x, tape.mul(value, gate)?)?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Temporal {
    Conv(TemporalEncoder),
    Recurrent(Gru),
}

/// Input projection, temporal encoder and output projection for one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamEncoder {
    pub prefix: String,
    pub d_in: usize,
    pub hidden: usize,
    temporal: Temporal,
}

impl StreamEncoder {
    pub fn new(prefix: impl Into<String>, d_in: usize, hidden: usize, kind: EncoderKind, depth: usize) -> Self {
        let prefix = prefix.into();
        let temporal = match kind {
            EncoderKind::Temporal => Temporal::Conv(TemporalEncoder::new(pname(&prefix, "ste"), hidden, depth)),
            EncoderKind::Recurrent => Temporal::Recurrent(Gru::new(pname(&prefix, "rnn"), hidden, hidden)),
        };
        Self {
            prefix,
            d_in,
            hidden,
            temporal,
        }
    }

    pub fn init<T: Scalar, R: Rng>(&self, params: &mut ParamSet<T>, rng: &mut R) {
        let h = self.hidden;
        params.init_linear(pname(&self.prefix, "in.w"), self.d_in, h, rng);
        params.init_const(pname(&self.prefix, "in.b"), vec![h], 0.0);
        match &self.temporal {
            Temporal::Conv(t) => t.init(params, rng),
            Temporal::Recurrent(g) => g.init(params, rng),
        }
        params.init_linear(pname(&self.prefix, "out.w"), h, h, rng);
        params.init_const(pname(&self.prefix, "out.b"), vec![h], 0.0);
    }

    /// Encodes an `(L·B) × d_in` time-major sequence into `(L·B) × h`.
    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, x: Var, batch: usize) -> Result<Var, TensorError> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.d_in {
            return Err(TensorError::ShapeMismatch {
                op: "encode_stream",
                left: shape,
                right: vec![self.d_in, self.hidden],
            });
        }
        let u = tape.relu(linear(
            tape,
            x,
            p.var(&pname(&self.prefix, "in.w")),
            Some(p.var(&pname(&self.prefix, "in.b"))),
        )?)?;
        let h = match &self.temporal {
            Temporal::Conv(t) => t.forward(tape, p, u, batch)?,
            Temporal::Recurrent(g) => g.forward(tape, p, u, batch)?,
        };
        linear(
            tape,
            h,
            p.var(&pname(&self.prefix, "out.w")),
            Some(p.var(&pname(&self.prefix, "out.b"))),
        )
    }
}
