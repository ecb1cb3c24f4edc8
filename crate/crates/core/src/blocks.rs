//! Shared architectural units: sinusoidal positions, multi-head attention,
//! pre-norm encoder/decoder blocks, and the length regulator.
//!
//! Every sequence tensor here is `[T, D]` — time (or token position) by
//! model dimension. Blocks are pre-norm residual: `x + sublayer(norm(x))`,
//! which trains stably at this scale without warmup schedules.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{xavier_init, zeros_init, Bound, ParamId, ParamStore};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Shared epsilon for layer normalization.
pub const LN_EPS: f64 = 1e-5;

/// Width/depth settings for one transformer stack.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct BlockConfig {
    pub model_dim: usize,
    pub head_count: usize,
    pub ff_dim: usize,
    pub layer_count: usize,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.head_count == 0 || self.ff_dim == 0 || self.layer_count == 0
        {
            return Err(Error::config("block sizes must be positive"));
        }
        if self.model_dim % self.head_count != 0 {
            return Err(Error::config(format!(
                "model_dim {} not divisible by head_count {}",
                self.model_dim, self.head_count
            )));
        }
        Ok(())
    }
}

/// Standard sinusoid table: `pe[t, 2i] = sin(t / 10000^(2i/dim))`,
/// `pe[t, 2i+1] = cos(...)`. Deterministic; `dim` must be even.
pub fn positional_encoding(length: usize, dim: usize) -> Result<ArrayD<f64>> {
    if length == 0 || dim == 0 {
        return Err(Error::contract("positional encoding needs length, dim >= 1"));
    }
    if dim % 2 != 0 {
        return Err(Error::contract(format!(
            "positional encoding dim must be even, got {dim}"
        )));
    }
    let mut data = Vec::with_capacity(length * dim);
    for t in 0..length {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let rate = 10000f64.powf(2.0 * pair / dim as f64);
            let angle = t as f64 / rate;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Ok(ArrayD::from_shape_vec(IxDyn(&[length, dim]), data).unwrap())
}

/// Lower-triangular keep mask: position `t` may attend to keys `<= t`.
pub fn causal_mask(t: usize) -> ArrayD<f64> {
    let mut m = ArrayD::zeros(IxDyn(&[t, t]));
    for i in 0..t {
        for j in 0..=i {
            m[[i, j]] = 1.0;
        }
    }
    m
}

/// Affine map `[T, d_in] -> [T, d_out]`.
#[derive(Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn define(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        partition: &str,
        prefix: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        Self::define_scaled(store, rng, partition, prefix, d_in, d_out, 1.0)
    }

    /// Like [`Linear::define`] with the weight init scaled by `gain`. Output
    /// heads use a small gain so untrained predictions start near neutral.
    pub fn define_scaled(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        partition: &str,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        gain: f64,
    ) -> Self {
        let mut w = xavier_init(rng, d_in, d_out);
        w.mapv_inplace(|v| v * gain);
        Linear {
            w: store.define(partition, &format!("{prefix}.w"), w),
            b: store.define(partition, &format!("{prefix}.b"), zeros_init(&[d_out])),
        }
    }

    pub fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, bound.var(self.w))?;
        tape.add(h, bound.var(self.b))
    }
}

/// Learned layer normalization over the last axis.
#[derive(Clone, Copy)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn define(store: &mut ParamStore, partition: &str, prefix: &str, dim: usize) -> Self {
        Norm {
            gamma: store.define(partition, &format!("{prefix}.gamma"), crate::params::ones_init(&[dim])),
            beta: store.define(partition, &format!("{prefix}.beta"), zeros_init(&[dim])),
        }
    }

    pub fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, bound.var(self.gamma), bound.var(self.beta), LN_EPS)
    }
}

/// Multi-head scaled dot-product attention with output projection.
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub model_dim: usize,
}

impl Attention {
    pub fn define(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        partition: &str,
        prefix: &str,
        cfg: &BlockConfig,
    ) -> Self {
        let d = cfg.model_dim;
        Attention {
            wq: Linear::define(store, rng, partition, &format!("{prefix}.wq"), d, d),
            wk: Linear::define(store, rng, partition, &format!("{prefix}.wk"), d, d),
            wv: Linear::define(store, rng, partition, &format!("{prefix}.wv"), d, d),
            wo: Linear::define(store, rng, partition, &format!("{prefix}.wo"), d, d),
            heads: cfg.head_count,
            model_dim: d,
        }
    }

    /// Attends `q_in` over `kv_in`; `mask` is a `[Tq, Tk]` keep/block table
    /// (`None` = attend everywhere). Also returns per-head attention weights
    /// so callers and tests can inspect the distributions.
    pub fn apply_detail(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        q_in: Var,
        kv_in: Var,
        mask: Option<&ArrayD<f64>>,
    ) -> Result<(Var, Vec<Var>)> {
        let tq = tape.shape(q_in)[0];
        let tk = tape.shape(kv_in)[0];
        if let Some(m) = mask {
            if m.shape() != [tq, tk] {
                return Err(Error::ShapeMismatch {
                    op: "attention_mask",
                    lhs: vec![tq, tk],
                    rhs: m.shape().to_vec(),
                });
            }
        }
        let q = self.wq.apply(tape, bound, q_in)?;
        let k = self.wk.apply(tape, bound, kv_in)?;
        let v = self.wv.apply(tape, bound, kv_in)?;
        let dk = self.model_dim / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut contexts = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dk, (h + 1) * dk);
            let qh = tape.slice_axis(q, 1, lo, hi)?;
            let kh = tape.slice_axis(k, 1, lo, hi)?;
            let vh = tape.slice_axis(v, 1, lo, hi)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.mul_scalar(scores, scale);
            let attn = match mask {
                Some(m) => tape.masked_softmax(scaled, m)?,
                None => tape.softmax(scaled),
            };
            contexts.push(tape.matmul(attn, vh)?);
            weights.push(attn);
        }
        let ctx = tape.concat(1, &contexts)?;
        let out = self.wo.apply(tape, bound, ctx)?;
        Ok((out, weights))
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        q_in: Var,
        kv_in: Var,
        mask: Option<&ArrayD<f64>>,
    ) -> Result<Var> {
        Ok(self.apply_detail(tape, bound, q_in, kv_in, mask)?.0)
    }
}

/// Two-layer position-wise feed-forward with a ReLU between.
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn define(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        partition: &str,
        prefix: &str,
        cfg: &BlockConfig,
    ) -> Self {
        FeedForward {
            lin1: Linear::define(store, rng, partition, &format!("{prefix}.ff1"), cfg.model_dim, cfg.ff_dim),
            lin2: Linear::define(store, rng, partition, &format!("{prefix}.ff2"), cfg.ff_dim, cfg.model_dim),
        }
    }

    pub fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = self.lin1.apply(tape, bound, x)?;
        let a = tape.relu(h);
        self.lin2.apply(tape, bound, a)
    }
}

/// Pre-norm self-attention encoder block.
pub struct EncoderBlock {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub ff: FeedForward,
}

impl EncoderBlock {
    pub fn define(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        partition: &str,
        prefix: &str,
        cfg: &BlockConfig,
    ) -> Self {
        EncoderBlock {
            norm1: Norm::define(store, partition, &format!("{prefix}.norm1"), cfg.model_dim),
            attn: Attention::define(store, rng, partition, &format!("{prefix}.attn"), cfg),
            norm2: Norm::define(store, partition, &format!("{prefix}.norm2"), cfg.model_dim),
            ff: FeedForward::define(store, rng, partition, prefix, cfg),
        }
    }

    /// `mask` optionally restricts self-attention (e.g. causal use).
    pub fn apply(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        mask: Option<&ArrayD<f64>>,
    ) -> Result<Var> {
        let n1 = self.norm1.apply(tape, bound, x)?;
        let a = self.attn.apply(tape, bound, n1, n1, mask)?;
        let x = tape.add(x, a)?;
        let n2 = self.norm2.apply(tape, bound, x)?;
        let f = self.ff.apply(tape, bound, n2)?;
        tape.add(x, f)
    }
}

/// Pre-norm decoder block: causal self-attention, cross-attention over the
/// encoder memory, then feed-forward.
pub struct DecoderBlock {
    pub norm1: Norm,
    pub self_attn: Attention,
    pub norm2: Norm,
    pub cross_attn: Attention,
    pub norm3: Norm,
    pub ff: FeedForward,
}

impl DecoderBlock {
    pub fn define(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        partition: &str,
        prefix: &str,
        cfg: &BlockConfig,
    ) -> Self {
        DecoderBlock {
            norm1: Norm::define(store, partition, &format!("{prefix}.norm1"), cfg.model_dim),
            self_attn: Attention::define(store, rng, partition, &format!("{prefix}.self"), cfg),
            norm2: Norm::define(store, partition, &format!("{prefix}.norm2"), cfg.model_dim),
            cross_attn: Attention::define(store, rng, partition, &format!("{prefix}.cross"), cfg),
            norm3: Norm::define(store, partition, &format!("{prefix}.norm3"), cfg.model_dim),
            ff: FeedForward::define(store, rng, partition, prefix, cfg),
        }
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        memory: Var,
        self_mask: &ArrayD<f64>,
    ) -> Result<Var> {
        let n1 = self.norm1.apply(tape, bound, x)?;
        let sa = self.self_attn.apply(tape, bound, n1, n1, Some(self_mask))?;
        let x = tape.add(x, sa)?;
        let n2 = self.norm2.apply(tape, bound, x)?;
        let ca = self.cross_attn.apply(tape, bound, n2, memory, None)?;
        let x = tape.add(x, ca)?;
        let n3 = self.norm3.apply(tape, bound, x)?;
        let f = self.ff.apply(tape, bound, n3)?;
        tape.add(x, f)
    }
}

/// Repeats row `i` of `states` `durations[i]` times, preserving order.
pub fn length_regulator(tape: &mut Tape, states: Var, durations: &[usize]) -> Result<Var> {
    let l = tape.shape(states)[0];
    if durations.is_empty() || l == 0 {
        return Err(Error::contract("length regulator needs at least one phoneme"));
    }
    if durations.len() != l {
        return Err(Error::contract(format!(
            "length regulator got {l} states but {} durations",
            durations.len()
        )));
    }
    if durations.iter().any(|&d| d == 0) {
        return Err(Error::contract("length regulator durations must be >= 1"));
    }
    let mut indices = Vec::with_capacity(durations.iter().sum());
    for (i, &d) in durations.iter().enumerate() {
        for _ in 0..d {
            indices.push(i);
        }
    }
    tape.gather_rows(states, &indices)
}

/// Rounds predicted frame counts to the nearest integer and clamps to >= 1.
pub fn round_clamp_durations(predicted: &[f64]) -> Vec<usize> {
    predicted
        .iter()
        .map(|&d| (d.round().max(1.0)) as usize)
        .collect()
}
