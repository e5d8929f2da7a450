//! Query transformer: learned query tokens and prompt text share a
//! self-attention, then only the queries cross-attend to image tokens.

mod tokenizer;

use std::sync::Arc;

pub use tokenizer::{TextTokenizer, SEP, UNK};

use crate::actions::ActionHistory;
use crate::layers::{Attention, Ffn, LayerNorm};
use crate::numerics::{AttnMask, Graph, NodeId, ParamId, ParamStore};
use crate::{Error, Result};

pub const DEFAULT_MAX_TEXT_TOKENS: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QFormerConfig {
    pub m_queries: usize,
    pub d_q: usize,
    pub z_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Width of the image tokens fed to cross-attention.
    pub d_i: usize,
    pub max_text_tokens: usize,
}

impl QFormerConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("m_queries", self.m_queries),
            ("d_q", self.d_q),
            ("z_layers", self.z_layers),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
            ("d_i", self.d_i),
            ("max_text_tokens", self.max_text_tokens),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("qformer {name} must be positive")));
        }
        if !self.d_q.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "qformer width {} not divisible by {} heads",
                self.d_q, self.heads
            )));
        }
        Ok(())
    }
}

/// The two learned query banks: one for the low-resolution pass, one for crops.
#[derive(Clone, Debug)]
pub struct QueryTokens {
    pub low_res: ParamId,
    pub high_res: ParamId,
}

impl QueryTokens {
    pub fn new(ps: &mut ParamStore, name: &str, m: usize, d: usize) -> Self {
        Self {
            low_res: ps.uniform_bound(&format!("{name}.low_res"), &[m, d], 1.0),
            high_res: ps.uniform_bound(&format!("{name}.high_res"), &[m, d], 1.0),
        }
    }
}

/// Token lookup plus learned absolute positions.
#[derive(Clone, Debug)]
pub struct TextEmbedder {
    pub table: ParamId,
    pub positions: ParamId,
    pub max_len: usize,
}

impl TextEmbedder {
    pub fn new(ps: &mut ParamStore, name: &str, vocab: usize, max_len: usize, d: usize) -> Self {
        Self {
            table: ps.uniform_bound(&format!("{name}.table"), &[vocab, d], 1.0),
            positions: ps.uniform_bound(&format!("{name}.positions"), &[max_len, d], 1.0),
            max_len,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::EmptyDimension("text tokens"));
        }
        if ids.len() > self.max_len {
            return Err(Error::Length {
                what: "text tokens",
                expected: self.max_len,
                got: ids.len(),
            });
        }
        let table = g.param(self.table);
        let tok = g.gather_rows(table, ids)?;
        let pos = g.param(self.positions);
        let pos = g.slice_rows(pos, 0, ids.len())?;
        g.add(tok, pos)
    }
}

/// Query and text streams between layers.
#[derive(Clone, Copy, Debug)]
pub struct QFormerState {
    pub e_q: NodeId,
    pub e_t: NodeId,
}

#[derive(Clone, Debug)]
pub struct QFormerLayer {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_cross: LayerNorm,
    pub cross_attn: Attention,
    pub ln_ffn_q: LayerNorm,
    pub ffn_q: Ffn,
    pub ln_ffn_t: LayerNorm,
    pub ffn_t: Ffn,
}

impl QFormerLayer {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &QFormerConfig) -> Self {
        let d = cfg.d_q;
        let hidden = cfg.ffn_mult * d;
        Self {
            ln_self: LayerNorm::new(ps, &format!("{name}.ln_self"), d),
            self_attn: Attention::new(ps, &format!("{name}.self_attn"), d, d, cfg.heads),
            ln_cross: LayerNorm::new(ps, &format!("{name}.ln_cross"), d),
            cross_attn: Attention::new(ps, &format!("{name}.cross_attn"), d, cfg.d_i, cfg.heads),
            ln_ffn_q: LayerNorm::new(ps, &format!("{name}.ln_ffn_q"), d),
            ffn_q: Ffn::new(ps, &format!("{name}.ffn_q"), d, hidden, d),
            ln_ffn_t: LayerNorm::new(ps, &format!("{name}.ln_ffn_t"), d),
            ffn_t: Ffn::new(ps, &format!("{name}.ffn_t"), d, hidden, d),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        state: QFormerState,
        images: NodeId,
        self_mask: &AttnMask,
    ) -> Result<QFormerState> {
        let m = g.shape(state.e_q)[0];
        let lt = g.shape(state.e_t)[0];

        let joint = g.concat_rows(&[state.e_q, state.e_t])?;
        let h = self.ln_self.forward(g, joint)?;
        let a = self.self_attn.forward(g, h, h, self_mask)?;
        let joint = g.add(joint, a)?;
        let e_q = g.slice_rows(joint, 0, m)?;
        let e_t = g.slice_rows(joint, m, lt)?;

        let h = self.ln_cross.forward(g, e_q)?;
        let c = self.cross_attn.forward(g, h, images, &AttnMask::None)?;
        let e_q = g.add(e_q, c)?;

        let h = self.ln_ffn_q.forward(g, e_q)?;
        let f = self.ffn_q.forward(g, h)?;
        let e_q = g.add(e_q, f)?;

        let h = self.ln_ffn_t.forward(g, e_t)?;
        let f = self.ffn_t.forward(g, h)?;
        let e_t = g.add(e_t, f)?;
        Ok(QFormerState { e_q, e_t })
    }
}

#[derive(Clone, Debug)]
pub struct QFormer {
    pub cfg: QFormerConfig,
    pub queries: QueryTokens,
    pub text: TextEmbedder,
    pub layers: Vec<QFormerLayer>,
    /// When false, text rows may not attend to query rows in self-attention.
    pub text_sees_queries: bool,
}

impl QFormer {
    pub fn new(ps: &mut ParamStore, cfg: QFormerConfig, vocab: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            queries: QueryTokens::new(ps, "qformer.queries", cfg.m_queries, cfg.d_q),
            text: TextEmbedder::new(ps, "qformer.text", vocab, cfg.max_text_tokens, cfg.d_q),
            layers: (0..cfg.z_layers)
                .map(|z| QFormerLayer::new(ps, &format!("qformer.layer{z}"), &cfg))
                .collect(),
            text_sees_queries: true,
            cfg,
        })
    }

    /// Prompt embedding for the text stream; `L_T` equals the truncated token count.
    pub fn embed_text(
        &self,
        g: &mut Graph<'_>,
        tok: &TextTokenizer,
        task: &str,
        history: &ActionHistory,
    ) -> Result<NodeId> {
        let ids = tok.encode_prompt(task, history, self.cfg.max_text_tokens)?;
        self.text.forward(g, &ids)
    }

    fn self_mask(&self, m: usize, lt: usize) -> AttnMask {
        if self.text_sees_queries {
            return AttnMask::None;
        }
        let n = m + lt;
        let allow = (0..n * n).map(|k| k / n < m || k % n >= m).collect();
        AttnMask::Allow(Arc::new(allow))
    }

    /// Runs all layers; returns the final query and text streams.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        queries: NodeId,
        text: NodeId,
        images: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let (qs, ts, is) = (g.shape(queries), g.shape(text), g.shape(images));
        if qs != [self.cfg.m_queries, self.cfg.d_q] {
            return Err(Error::dim("qformer queries", qs, &[self.cfg.m_queries, self.cfg.d_q]));
        }
        if ts.len() != 2 || ts[1] != self.cfg.d_q {
            return Err(Error::dim("qformer text", ts, &[self.cfg.d_q]));
        }
        if is.len() != 2 || is[1] != self.cfg.d_i {
            return Err(Error::dim("qformer image tokens", is, &[self.cfg.d_i]));
        }
        let mask = self.self_mask(self.cfg.m_queries, ts[0]);
        let mut st = QFormerState {
            e_q: queries,
            e_t: text,
        };
        for layer in &self.layers {
            st = layer.forward(g, st, images, &mask)?;
        }
        Ok((st.e_q, st.e_t))
    }
}
