//! Transformer building blocks recorded on a [`Graph`].

use rand::Rng;

use crate::tensor::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let w = store.add_glorot(&format!("{name}.weight"), fan_in, fan_out, rng);
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[1, fan_out])));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, TensorError> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[1, dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[1, dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, TensorError> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Multi-head scaled dot-product attention. The key projection has no bias:
/// a key bias shifts every score of a query row equally and cancels in the
/// softmax, so it would be an untrainable parameter.
#[derive(Debug, Clone)]
pub(crate) struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub(crate) struct AttentionOut {
    pub out: Var,
    /// One `queries × keys` weight matrix per head.
    pub weights: Vec<Var>,
}

impl Attention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self, TensorError> {
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::HeadsDontDivide { heads, dim });
        }
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim, true),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim, false),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim, true),
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim, true),
            heads,
            dim,
        })
    }

    /// Attends from `query` rows to `memory` rows. With `causal_offset =
    /// Some(s)`, query row `r` sees only memory rows `0..=s + r`.
    pub fn forward(
        &self,
        g: &mut Graph,
        query: Var,
        memory: Var,
        causal_offset: Option<usize>,
    ) -> Result<AttentionOut, TensorError> {
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, memory)?;
        let v = self.v.forward(g, memory)?;
        let (nq, _) = g.dims(q);
        let (nk, _) = g.dims(k);
        let mask = causal_offset.map(|s| {
            let mut m = Tensor::zeros(&[nq, nk]);
            for r in 0..nq {
                for c in (s + r + 1).min(nk)..nk {
                    m.data_mut()[r * nk + c] = f64::NEG_INFINITY;
                }
            }
            m
        });
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut contexts = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, lo, hi)?, g.slice_cols(k, lo, hi)?, g.slice_cols(v, lo, hi)?)
            };
            let scores = g.matmul_bt(qh, kh)?;
            let mut scores = g.scale(scores, scale);
            if let Some(m) = &mask {
                scores = g.add_const(scores, m)?;
            }
            let w = g.softmax_rows(scores);
            contexts.push(g.matmul(w, vh)?);
            weights.push(w);
        }
        let ctx = if self.heads == 1 {
            contexts[0]
        } else {
            g.concat_cols(&contexts)?
        };
        let out = self.o.forward(g, ctx)?;
        Ok(AttentionOut { out, weights })
    }
}

#[derive(Debug, Clone)]
pub(crate) struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            inner: Linear::new(store, rng, &format!("{name}.inner"), dim, hidden, true),
            outer: Linear::new(store, rng, &format!("{name}.outer"), hidden, dim, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, TensorError> {
        let h = self.inner.forward(g, x)?;
        let h = g.gelu(h);
        self.outer.forward(g, h)
    }
}

/// Pre-norm encoder layer: `x + attn(ln(x))`, then `x + ff(ln(x))`.
#[derive(Debug, Clone)]
pub(crate) struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        ff: usize,
    ) -> Result<Self, TensorError> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: Attention::new(store, rng, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), dim, ff),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, TensorError> {
        let n = self.norm1.forward(g, x)?;
        let a = self.attn.forward(g, n, n, None)?.out;
        let x = g.add(x, a)?;
        let n = self.norm2.forward(g, x)?;
        let f = self.ff.forward(g, n)?;
        g.add(x, f)
    }
}

/// Pre-norm decoder layer: masked self-attention, cross-attention to the
/// encoder memory, feed-forward, each with a residual.
#[derive(Debug, Clone)]
pub(crate) struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: Attention,
    pub norm2: LayerNorm,
    pub cross_attn: Attention,
    pub norm3: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        ff: usize,
    ) -> Result<Self, TensorError> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            self_attn: Attention::new(store, rng, &format!("{name}.self_attn"), dim, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            cross_attn: Attention::new(store, rng, &format!("{name}.cross_attn"), dim, heads)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), dim, ff),
        })
    }

    /// Outputs for rows `start..` of the prefix `x`, each attending causally
    /// over the whole prefix.
    pub fn forward(&self, g: &mut Graph, x: Var, memory: Var, start: usize) -> Result<Var, TensorError> {
        let (len, _) = g.dims(x);
        let n = self.norm1.forward(g, x)?;
        let (q, xq) = if start == 0 {
            (n, x)
        } else {
            (g.slice_rows(n, start, len)?, g.slice_rows(x, start, len)?)
        };
        let a = self.self_attn.forward(g, q, n, Some(start))?.out;
        let x = g.add(xq, a)?;
        let n = self.norm2.forward(g, x)?;
        let c = self.cross_attn.forward(g, n, memory, None)?.out;
        let x = g.add(x, c)?;
        let n = self.norm3.forward(g, x)?;
        let f = self.ff.forward(g, n)?;
        g.add(x, f)
    }
}

/// Sinusoidal position table: `sin(p / 10000^(2i/d))` at even columns and
/// the matching cosine at odd columns.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    thread_local! {
        static CACHE: std::cell::RefCell<std::collections::HashMap<(usize, usize), Tensor>> = Default::default();
    }
    CACHE.with(|c| {
        c.borrow_mut()
            .entry((len, dim))
            .or_insert_with(|| compute_positional_encoding(len, dim))
            .clone()
    })
}

fn compute_positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, dim]);
    for p in 0..len {
        for c in 0..dim {
            let i = (c / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * i / dim as f64);
            t.data_mut()[p * dim + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}
