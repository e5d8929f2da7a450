//! The full policy: encoder, Q-Former, fusion stages, projection and a small
//! causal decoder over action tokens.

mod checkpoint;
mod config;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{parse_lines, AgentConfig, KEYS, SHAPE_KEYS};
pub use train::{
    evaluate_steps, flatten_episodes, mean_loss, step_accuracy, train_epochs, EpochReport, StepSample, TrainOptions,
    Trainer,
};

use crate::actions::{parse_ids, serialize, Action, ActionHistory, ActionVocab, ParseError};
use crate::afr::{enrich_high_res, AfrBlock, Fusion, HighResShift};
use crate::layers::{Block, LayerNorm, Linear};
use crate::numerics::{AttnMask, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::qformer::{QFormer, TextEmbedder, TextTokenizer};
use crate::vision::{crop_horizontal, CropSet, Screen, VisionEncoder};
use crate::{Error, Result};

/// One decision point: goal, current screen and previous actions.
#[derive(Clone, Copy, Debug)]
pub struct StepInput<'a> {
    pub task: &'a str,
    pub screen: &'a Screen,
    pub history: &'a ActionHistory,
}

/// Greedy decoding result.
#[derive(Clone, Debug)]
pub struct PolicyOutput {
    /// `steps x vocab` logits, one row per generated token.
    pub logits: Tensor,
    pub token_ids: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub decoded: std::result::Result<Action, ParseError>,
}

/// Named intermediate nodes, kept for non-finite diagnostics.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub nodes: Vec<(&'static str, NodeId)>,
}

impl Trace {
    fn push(&mut self, name: &'static str, id: NodeId) {
        self.nodes.push((name, id));
    }

    /// `name=‖x‖` for every traced activation.
    pub fn describe(&self, g: &Graph<'_>) -> String {
        self.nodes
            .iter()
            .map(|(n, id)| {
                let norm = g.value(*id).data().iter().map(|v| v * v).sum::<f64>().sqrt();
                format!("{n}={norm:.4e}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug)]
pub struct AgentModel {
    pub cfg: AgentConfig,
    pub store: ParamStore,
    pub tokenizer: TextTokenizer,
    pub vocab: ActionVocab,
    pub vision: VisionEncoder,
    pub qformer: QFormer,
    pub low: Fusion,
    pub high: Option<AfrBlock>,
    pub proj: Linear,
    pub text_l: TextEmbedder,
    pub action_embed: ParamId,
    pub action_pos: ParamId,
    pub decoder: Vec<Block>,
    pub ln_out: LayerNorm,
    pub head: Linear,
}

impl AgentModel {
    pub fn new(cfg: AgentConfig) -> Result<Self> {
        cfg.validate()?;
        let cfg = cfg.resolved();
        let mut ps = ParamStore::new(cfg.seed);
        let tokenizer = TextTokenizer::default();
        let vocab = ActionVocab::new();
        let vision = VisionEncoder::new(&mut ps, cfg.vision())?;
        let qformer = QFormer::new(&mut ps, cfg.qformer(), tokenizer.len())?;
        let low = Fusion::new(&mut ps, "fusion.low", cfg.fusion_low, cfg.d_i, cfg.hidden(), cfg.d_q);
        let high = cfg
            .high_res()
            .then(|| AfrBlock::new(&mut ps, "fusion.high", cfg.d_q, cfg.hidden(), cfg.d_q));
        let proj = Linear::new(&mut ps, "proj", cfg.d_q, cfg.d_l);
        let text_l = TextEmbedder::new(&mut ps, "decoder.text", tokenizer.len(), cfg.max_text_tokens, cfg.d_l);
        let action_embed = ps.uniform_bound("decoder.action_embed", &[vocab.len(), cfg.d_l], 1.0);
        let action_pos = ps.uniform_bound("decoder.action_pos", &[cfg.max_steps, cfg.d_l], 1.0);
        let decoder = (0..cfg.decoder_layers)
            .map(|l| {
                Block::new(
                    &mut ps,
                    &format!("decoder.block{l}"),
                    cfg.d_l,
                    cfg.decoder_heads,
                    cfg.ffn_mult,
                )
            })
            .collect();
        let ln_out = LayerNorm::new(&mut ps, "decoder.ln_out", cfg.d_l);
        let head = Linear::new(&mut ps, "decoder.head", cfg.d_l, vocab.len());
        Ok(Self {
            cfg,
            store: ps,
            tokenizer,
            vocab,
            vision,
            qformer,
            low,
            high,
            proj,
            text_l,
            action_embed,
            action_pos,
            decoder,
            ln_out,
            head,
        })
    }

    /// Low-resolution view of an input screen.
    pub fn low_view(&self, s: &Screen) -> Result<Screen> {
        s.fit(self.cfg.screen_width, self.cfg.screen_height)
    }

    /// Horizontal bands, each reduced to the encoder geometry.
    pub fn crops(&self, s: &Screen) -> Result<CropSet> {
        let cs = crop_horizontal(s, self.cfg.crops)?;
        let crops = cs
            .crops
            .iter()
            .map(|c| c.fit(self.cfg.screen_width, self.cfg.screen_height))
            .collect::<Result<Vec<_>>>()?;
        Ok(CropSet { crops })
    }

    /// Final enriched query tokens `M x d_Q`.
    pub fn enriched_queries(&self, g: &mut Graph<'_>, input: StepInput<'_>, trace: &mut Trace) -> Result<NodeId> {
        let low = self.low_view(input.screen)?;
        let image = self.vision.encode_low(g, &low)?;
        trace.push("image_tokens", image.tokens);
        let text = self.qformer.embed_text(g, &self.tokenizer, input.task, input.history)?;
        let queries = g.param(self.qformer.queries.low_res);
        let (e_q, _) = self.qformer.forward(g, queries, text, image.tokens)?;
        trace.push("qformer_low", e_q);
        let fused = self.low.apply(g, image.tokens, e_q)?;
        trace.push("enriched_low", fused.out);
        let Some(block) = &self.high else {
            return Ok(fused.out);
        };
        let crops = self.crops(input.screen)?;
        let crop_tokens = self.vision.encode_crops(g, &crops)?;
        trace.push("crop_tokens", crop_tokens);
        let queries = g.param(self.qformer.queries.high_res);
        let (e_q_crops, _) = self.qformer.forward(g, queries, text, crop_tokens)?;
        trace.push("qformer_high", e_q_crops);
        let shift = match self.cfg.high_shift {
            HighResShift::High => None,
            HighResShift::Image => Some(
                fused
                    .shift
                    .ok_or_else(|| Error::Config("image shift requires AFR at the low-res stage".into()))?,
            ),
        };
        let out = enrich_high_res(g, block, e_q_crops, fused.out, shift)?;
        trace.push("enriched_high", out);
        Ok(out)
    }

    /// `[proj(e_q_final); text embedding]`, `(M + L_T) x d_L`.
    pub fn build_llm_input(
        &self,
        g: &mut Graph<'_>,
        e_q_final: NodeId,
        task: &str,
        history: &ActionHistory,
    ) -> Result<NodeId> {
        let s = g.shape(e_q_final);
        if s.len() != 2 || s[1] != self.cfg.d_q {
            return Err(Error::dim(
                "llm input queries",
                s,
                &[self.cfg.m_queries(), self.cfg.d_q],
            ));
        }
        let v = self.proj.forward(g, e_q_final)?;
        let ids = self.tokenizer.encode_prompt(task, history, self.cfg.max_text_tokens)?;
        let t = self.text_l.forward(g, &ids)?;
        g.concat_rows(&[v, t])
    }

    pub fn prefix(&self, g: &mut Graph<'_>, input: StepInput<'_>, trace: &mut Trace) -> Result<NodeId> {
        let e_q = self.enriched_queries(g, input, trace)?;
        let x = self.build_llm_input(g, e_q, input.task, input.history)?;
        trace.push("llm_input", x);
        Ok(x)
    }

    /// Logits for every action input position, `len(action_ids) x V`.
    pub fn decode(&self, g: &mut Graph<'_>, prefix: NodeId, action_ids: &[usize]) -> Result<NodeId> {
        let a = action_ids.len();
        if a == 0 || a > self.cfg.max_steps {
            return Err(Error::Length {
                what: "decoder action positions",
                expected: self.cfg.max_steps,
                got: a,
            });
        }
        let table = g.param(self.action_embed);
        let emb = g.gather_rows(table, action_ids)?;
        let pos = g.param(self.action_pos);
        let pos = g.slice_rows(pos, 0, a)?;
        let emb = g.add(emb, pos)?;
        let mut x = g.concat_rows(&[prefix, emb])?;
        for b in &self.decoder {
            x = b.forward(g, x, &AttnMask::Causal)?;
        }
        let rows = g.shape(x)[0];
        let x = g.slice_rows(x, rows - a, a)?;
        let x = self.ln_out.forward(g, x)?;
        self.head.forward(g, x)
    }

    /// Decoder inputs `BOS t1 .. t(n-1)` and targets `t1 .. tn` for a gold action.
    pub fn teacher_forcing_ids(&self, gold: &Action) -> Result<(Vec<usize>, Vec<usize>)> {
        let targets = self.vocab.encode(&serialize(gold));
        if targets.len() > self.cfg.max_steps {
            return Err(Error::Length {
                what: "serialized gold action",
                expected: self.cfg.max_steps,
                got: targets.len(),
            });
        }
        let mut inputs = vec![self.vocab.bos()];
        inputs.extend_from_slice(&targets[..targets.len() - 1]);
        Ok((inputs, targets))
    }

    /// Teacher-forced logits and targets.
    pub fn teacher_forced(
        &self,
        g: &mut Graph<'_>,
        input: StepInput<'_>,
        gold: &Action,
        trace: &mut Trace,
    ) -> Result<(NodeId, Vec<usize>)> {
        let (inputs, targets) = self.teacher_forcing_ids(gold)?;
        let prefix = self.prefix(g, input, trace)?;
        let logits = self.decode(g, prefix, &inputs)?;
        trace.push("logits", logits);
        Ok((logits, targets))
    }

    /// Teacher-forced logits computed without gradient tracking.
    pub fn logits(&self, input: StepInput<'_>, gold: &Action) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let (l, _) = self.teacher_forced(&mut g, input, gold, &mut Trace::default())?;
        Ok(g.value(l).clone())
    }

    /// Greedy decoding until EOS or `max_steps` tokens.
    pub fn predict(&self, input: StepInput<'_>) -> Result<PolicyOutput> {
        let mut g = Graph::inference(&self.store);
        let prefix = self.prefix(&mut g, input, &mut Trace::default())?;
        let v = self.vocab.len();
        let mut ids = vec![self.vocab.bos()];
        let mut generated = Vec::new();
        let mut rows = Vec::new();
        let mut log_probs = Vec::new();
        while generated.len() < self.cfg.max_steps {
            let logits = self.decode(&mut g, prefix, &ids)?;
            let last = g.value(logits).row(ids.len() - 1).to_vec();
            let (best, _) = last.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc },
            );
            let max = last[best];
            let lse = max + last.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            log_probs.push(last[best] - lse);
            rows.extend_from_slice(&last);
            generated.push(best);
            if best == self.vocab.eos() {
                break;
            }
            ids.push(best);
        }
        let decoded = if generated.last() == Some(&self.vocab.eos()) {
            parse_ids(&self.vocab, &generated)
        } else {
            Err(ParseError {
                index: generated.len(),
                reason: format!("no end of action within {} tokens", self.cfg.max_steps),
            })
        };
        Ok(PolicyOutput {
            logits: Tensor::matrix(generated.len(), v, rows)?,
            token_ids: generated,
            log_probs,
            decoded,
        })
    }
}
