//! One grouped-attention layer and its closed-form accounting.
//!
//! The input is projected once into `g_q` query blocks and `g_kv`
//! key/value blocks, each `head_dim` wide. Head `t` with pairing `(i, j)`
//! attends with query block `i` against key/value block `j`. Head outputs
//! are concatenated in pairing order and passed through the output
//! projection.

use rand::Rng;

use crate::error::{Error, Result, TensorError};
use crate::init::trunc_normal;
use crate::scheme::GroupingScheme;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T: Scalar> {
    /// `[d, g_q·head_dim]`
    pub w_q: Tensor<T>,
    pub b_q: Tensor<T>,
    /// `[d, g_kv·head_dim]`
    pub w_k: Tensor<T>,
    pub b_k: Tensor<T>,
    /// `[d, g_kv·head_dim]`
    pub w_v: Tensor<T>,
    pub b_v: Tensor<T>,
    /// `[d, d]`; row block `t` consumes head `t`'s output.
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn zeros(s: &GroupingScheme) -> Self {
        let (d, q, kv) = (s.d(), s.q_groups() * s.head_dim(), s.kv_groups() * s.head_dim());
        AttentionWeights {
            w_q: Tensor::zeros(vec![d, q]),
            b_q: Tensor::zeros(vec![q]),
            w_k: Tensor::zeros(vec![d, kv]),
            b_k: Tensor::zeros(vec![kv]),
            w_v: Tensor::zeros(vec![d, kv]),
            b_v: Tensor::zeros(vec![kv]),
            w_o: Tensor::zeros(vec![d, d]),
            b_o: Tensor::zeros(vec![d]),
        }
    }

    /// Truncated-normal projections and zero biases.
    pub fn init<R: Rng>(s: &GroupingScheme, std: f64, rng: &mut R) -> Self {
        let (d, q, kv) = (s.d(), s.q_groups() * s.head_dim(), s.kv_groups() * s.head_dim());
        AttentionWeights {
            w_q: trunc_normal(vec![d, q], std, rng),
            b_q: Tensor::zeros(vec![q]),
            w_k: trunc_normal(vec![d, kv], std, rng),
            b_k: Tensor::zeros(vec![kv]),
            w_v: trunc_normal(vec![d, kv], std, rng),
            b_v: Tensor::zeros(vec![kv]),
            w_o: trunc_normal(vec![d, d], std, rng),
            b_o: Tensor::zeros(vec![d]),
        }
    }

    /// Tensors in storage order: q, k, v, output projection; weight before bias.
    pub fn tensors(&self) -> [&Tensor<T>; 8] {
        [&self.w_q, &self.b_q, &self.w_k, &self.b_k, &self.w_v, &self.b_v, &self.w_o, &self.b_o]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 8] {
        [
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_o,
            &mut self.b_o,
        ]
    }

    pub fn element_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn check_against(&self, s: &GroupingScheme) -> Result<()> {
        let expected = AttentionWeights::<T>::zeros(s);
        for (have, want) in self.tensors().iter().zip(expected.tensors()) {
            if have.shape() != want.shape() {
                return Err(TensorError::dim(format!(
                    "attention weights for {}: got {:?}, expected {:?}",
                    s.label(),
                    have.shape(),
                    want.shape()
                ))
                .into());
            }
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape<T>) -> AttentionVars {
        let [w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o] = self.tensors().map(|t| tape.leaf(t.clone()));
        AttentionVars { w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o }
    }
}

/// Tape handles for one layer's weights, in the same order as
/// [`AttentionWeights::tensors`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
}

impl AttentionVars {
    pub fn all(&self) -> [Var; 8] {
        [self.w_q, self.b_q, self.w_k, self.b_k, self.w_v, self.b_v, self.w_o, self.b_o]
    }
}

/// Records the layer on `tape`; `x` is `[B, N, d]`.
pub fn attention_on_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, w: &AttentionVars, s: &GroupingScheme) -> Result<Var> {
    s.ensure_valid()?;
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 || shape[2] != s.d() {
        return Err(TensorError::dim(format!("attention input must be [B, N, {}], got {shape:?}", s.d())).into());
    }
    let hd = s.head_dim();
    let proj = |tape: &mut Tape<T>, wt: Var, b: Var| -> std::result::Result<Var, TensorError> {
        let y = tape.matmul(x, wt)?;
        tape.add(y, b)
    };
    let q = proj(tape, w.w_q, w.b_q)?;
    let k = proj(tape, w.w_k, w.b_k)?;
    let v = proj(tape, w.w_v, w.b_v)?;

    let mut q_blocks = Vec::with_capacity(s.q_groups());
    for i in 0..s.q_groups() {
        q_blocks.push(tape.narrow(q, 2, i * hd, hd)?);
    }
    let mut kt_blocks = Vec::with_capacity(s.kv_groups());
    let mut v_blocks = Vec::with_capacity(s.kv_groups());
    for j in 0..s.kv_groups() {
        let kj = tape.narrow(k, 2, j * hd, hd)?;
        kt_blocks.push(tape.transpose(kj)?);
        v_blocks.push(tape.narrow(v, 2, j * hd, hd)?);
    }

    let scale = T::from_f64(s.scale_mode().factor(s.d(), hd));
    let mut heads = Vec::with_capacity(s.heads());
    for &(i, j) in s.pairing() {
        let scores = tape.matmul(q_blocks[i], kt_blocks[j])?;
        let scores = tape.scale(scores, scale)?;
        let probs = tape.softmax_lastdim(scores)?;
        heads.push(tape.matmul(probs, v_blocks[j])?);
    }
    let merged = tape.concat(&heads, 2)?;
    let out = tape.matmul(merged, w.w_o)?;
    Ok(tape.add(out, w.b_o)?)
}

/// Grouped attention on `x [B, N, d]`, returning `[B, N, d]`.
pub fn grouped_attention_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &AttentionWeights<T>,
    s: &GroupingScheme,
) -> Result<Tensor<T>> {
    w.check_against(s)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let vars = w.register(&mut tape);
    let out = attention_on_tape(&mut tape, xv, &vars, s)?;
    Ok(tape.value(out).clone())
}

/// Weights, and optionally biases, of the q/k/v and output projections.
pub fn attention_param_count(s: &GroupingScheme, include_bias: bool) -> usize {
    let d = s.d();
    let qkv = s.qkv_width();
    let mut n = d * qkv + d * d;
    if include_bias {
        n += qkv + d;
    }
    n
}

/// Parameters of the fused q/k/v projection alone, without bias.
pub fn qkv_weight_count(s: &GroupingScheme) -> usize {
    s.d() * s.qkv_width()
}

/// Floating-point operations (two per multiply-accumulate) for one
/// sequence of `n` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlopReport {
    pub projection_flops: u64,
    pub score_flops: u64,
    pub weighted_sum_flops: u64,
    pub output_proj_flops: u64,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.projection_flops + self.score_flops + self.weighted_sum_flops + self.output_proj_flops
    }

    pub fn scaled(&self, by: u64) -> Self {
        FlopReport {
            projection_flops: self.projection_flops * by,
            score_flops: self.score_flops * by,
            weighted_sum_flops: self.weighted_sum_flops * by,
            output_proj_flops: self.output_proj_flops * by,
        }
    }
}

pub fn attention_flops(n: usize, s: &GroupingScheme) -> Result<FlopReport> {
    if n == 0 {
        return Err(Error::Config("sequence length must be at least 1".into()));
    }
    let (n, d, h, hd) = (n as u64, s.d() as u64, s.heads() as u64, s.head_dim() as u64);
    Ok(FlopReport {
        projection_flops: 2 * n * d * s.qkv_width() as u64,
        score_flops: 2 * h * n * n * hd,
        weighted_sum_flops: 2 * h * n * n * hd,
        output_proj_flops: 2 * n * d * d,
    })
}
