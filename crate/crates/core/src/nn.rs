//! Transformer building blocks over a [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::params::{trunc_normal, Bound, ParamId, ParamStore};
use crate::tape::{AttentionSpec, Tape, Var, LAYERNORM_EPS};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
pub const FFN_EXPANSION: usize = 4;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self::with_std(store, name, inputs, outputs, INIT_STD, rng)
    }

    pub fn with_std(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, std: f64, rng: &mut impl Rng) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), trunc_normal(&[inputs, outputs], std, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[outputs])),
        }
    }

    /// `x[n×in] · W + b`
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.weight])?;
        tape.add_row(y, p[self.bias])
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layernorm(x, p[self.gamma], p[self.beta], LAYERNORM_EPS)
    }
}

/// Two-layer GELU MLP, `D → 4D → D`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, FFN_EXPANSION * dim, rng),
            down: Linear::new(store, &format!("{name}.down"), FFN_EXPANSION * dim, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, p, h)
    }
}

/// Output of an attention block: the residual stream and the attention node,
/// whose saved weights can be inspected through [`Tape::attention_weights`].
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub out: Var,
    pub attention: Var,
}

/// Pre-norm transformer block: `x + Attn(LN(x), LN(ctx))`, then `+ FFN(LN(·))`.
///
/// Used both as self-attention (context is the query stream) and as
/// cross-attention (queries and keys/values come from different token sets,
/// with a separate layer norm on the context).
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub heads: usize,
    pub norm_q: LayerNorm,
    pub norm_kv: Option<LayerNorm>,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        cross: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let norm_q = LayerNorm::new(store, &format!("{name}.norm_q"), dim);
        let norm_kv = cross.then(|| LayerNorm::new(store, &format!("{name}.norm_kv"), dim));
        Self {
            heads,
            norm_q,
            norm_kv,
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, rng),
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, rng),
        }
    }

    fn finish(&self, tape: &mut Tape, p: &Bound, x: Var, q: Var, kv: Var, spec: AttentionSpec) -> Result<BlockOutput> {
        let qp = self.query.forward(tape, p, q)?;
        let kp = self.key.forward(tape, p, kv)?;
        let vp = self.value.forward(tape, p, kv)?;
        let attention = tape.attention(qp, kp, vp, spec)?;
        let attended = self.output.forward(tape, p, attention)?;
        let x = tape.add(x, attended)?;
        let h = self.norm_ffn.forward(tape, p, x)?;
        let h = self.ffn.forward(tape, p, h)?;
        Ok(BlockOutput {
            out: tape.add(x, h)?,
            attention,
        })
    }

    /// Self-attention over `groups` independent sets of `tokens` rows.
    pub fn forward_self(&self, tape: &mut Tape, p: &Bound, x: Var, groups: usize, tokens: usize) -> Result<BlockOutput> {
        let h = self.norm_q.forward(tape, p, x)?;
        let spec = AttentionSpec {
            groups,
            queries: tokens,
            keys: tokens,
            heads: self.heads,
        };
        self.finish(tape, p, x, h, h, spec)
    }

    /// Cross-attention: `groups` sets of `queries` rows of `x` attend to the
    /// matching sets of `keys` rows of `context`.
    pub fn forward_cross(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        context: Var,
        groups: usize,
        queries: usize,
        keys: usize,
    ) -> Result<BlockOutput> {
        let q = self.norm_q.forward(tape, p, x)?;
        let norm_kv = self.norm_kv.as_ref().unwrap_or(&self.norm_q);
        let kv = norm_kv.forward(tape, p, context)?;
        let spec = AttentionSpec {
            groups,
            queries,
            keys,
            heads: self.heads,
        };
        self.finish(tape, p, x, q, kv, spec)
    }
}
