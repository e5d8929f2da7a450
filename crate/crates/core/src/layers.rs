//! Parameterized building blocks shared by the encoder, Q-Former and decoder.

use crate::numerics::{AttnMask, Graph, NodeId, ParamId, ParamStore};
use crate::Result;

pub const LN_EPS: f64 = 1e-5;

/// `y = x W + b`, `W: [d_in x d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: ps.uniform(&format!("{name}.weight"), &[d_in, d_out], d_in),
            bias: ps.zeros(&format!("{name}.bias"), &[d_out]),
            d_in,
            d_out,
        }
    }

    /// Zero weight, constant bias.
    pub fn constant(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: f64) -> Self {
        Self {
            weight: ps.zeros(&format!("{name}.weight"), &[d_in, d_out]),
            bias: ps.filled(&format!("{name}.bias"), &[d_out], bias),
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: ps.filled(&format!("{name}.gain"), &[d], 1.0),
            bias: ps.zeros(&format!("{name}.bias"), &[d]),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Two fully connected layers with GeLU between.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), d_in, d_hidden),
            fc2: Linear::new(ps, &format!("{name}.fc2"), d_hidden, d_out),
        }
    }

    /// Final layer replaced by a zero-weight layer with constant `bias`,
    /// so the block outputs exactly `bias` everywhere until trained.
    pub fn constant_output(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        bias: f64,
    ) -> Self {
        Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), d_in, d_hidden),
            fc2: Linear::constant(ps, &format!("{name}.fc2"), d_hidden, d_out, bias),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Multi-head attention with separate query and key/value sources.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, d_kv: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(ps, &format!("{name}.q"), d, d),
            k: Linear::new(ps, &format!("{name}.k"), d_kv, d),
            v: Linear::new(ps, &format!("{name}.v"), d_kv, d),
            o: Linear::new(ps, &format!("{name}.o"), d, d),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, xq: NodeId, xkv: NodeId, mask: &AttnMask) -> Result<NodeId> {
        let q = self.q.forward(g, xq)?;
        let k = self.k.forward(g, xkv)?;
        let v = self.v.forward(g, xkv)?;
        let a = g.attention(q, k, v, self.heads, mask)?;
        self.o.forward(g, a)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: Ffn,
}

impl Block {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, heads: usize, ffn_mult: usize) -> Self {
        Self {
            ln_attn: LayerNorm::new(ps, &format!("{name}.ln_attn"), d),
            attn: Attention::new(ps, &format!("{name}.attn"), d, d, heads),
            ln_ffn: LayerNorm::new(ps, &format!("{name}.ln_ffn"), d),
            ffn: Ffn::new(ps, &format!("{name}.ffn"), d, ffn_mult * d, d),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId, mask: &AttnMask) -> Result<NodeId> {
        let h = self.ln_attn.forward(g, x)?;
        let a = self.attn.forward(g, h, h, mask)?;
        let x = g.add(x, a)?;
        let h = self.ln_ffn.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        g.add(x, f)
    }
}
