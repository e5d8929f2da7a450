//! Closed-form multiply-accumulate counts for one forward pass.
//!
//! Every matmul is counted as `m * k * n`; attention counts `2 * Lq * Lk * d`
//! (scores plus weighted values). Softmax, layer norm, GeLU, elementwise
//! modulation and embedding lookups are not modelled.

use std::fmt::Write as _;

use serde::Serialize;

use crate::afr::{FusionStrategy, HighResShift};
use crate::agent::AgentConfig;
use crate::{Error, Result};

/// Reference TFLOPs for the full-scale model with and without the high-res path.
pub const REFERENCE_TFLOPS_LOW: f64 = 3.2;
pub const REFERENCE_TFLOPS_HIGH: f64 = 5.47;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArchConfig {
    pub m: usize,
    pub l_t: usize,
    pub crops: usize,
    /// Patch tokens per image or crop (the global token is extra).
    pub n_n: usize,
    pub patch_dim: usize,
    pub h_cross: usize,
    pub d_q: usize,
    pub d_i: usize,
    pub d_l: usize,
    pub z: usize,
    pub vision_layers: usize,
    pub decoder_layers: usize,
    pub ffn_mult: usize,
    pub afr_hidden: usize,
    pub fusion_low: FusionStrategy,
    pub high_shift: HighResShift,
    /// Action positions fed to the decoder.
    pub action_tokens: usize,
    pub vocab: usize,
}

impl ArchConfig {
    pub fn from_agent(cfg: &AgentConfig, l_t: usize, action_tokens: usize, vocab: usize) -> Self {
        Self {
            m: cfg.m_queries(),
            l_t,
            crops: cfg.crops,
            n_n: cfg.n_patches(),
            patch_dim: cfg.patch * cfg.patch * 3,
            h_cross: cfg.qformer_heads,
            d_q: cfg.d_q,
            d_i: cfg.d_i,
            d_l: cfg.d_l,
            z: cfg.qformer_layers,
            vision_layers: cfg.vision_layers,
            decoder_layers: cfg.decoder_layers,
            ffn_mult: cfg.ffn_mult,
            afr_hidden: cfg.hidden(),
            fusion_low: cfg.fusion_low,
            high_shift: cfg.high_shift,
            action_tokens,
            vocab,
        }
    }

    /// Full-scale shapes: 224px views with 14px patches, 12 heads.
    pub fn full_size() -> Self {
        Self {
            m: 257,
            l_t: 64,
            crops: 4,
            n_n: 256,
            patch_dim: 14 * 14 * 3,
            h_cross: 12,
            d_q: 768,
            d_i: 1024,
            d_l: 2048,
            z: 2,
            vision_layers: 1,
            decoder_layers: 1,
            ffn_mult: 4,
            afr_hidden: 768,
            fusion_low: FusionStrategy::Afr,
            high_shift: HighResShift::High,
            action_tokens: 4,
            vocab: crate::actions::ActionVocab::new().len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("m", self.m),
            ("l_t", self.l_t),
            ("crops", self.crops),
            ("n_n", self.n_n),
            ("patch_dim", self.patch_dim),
            ("h_cross", self.h_cross),
            ("d_q", self.d_q),
            ("d_i", self.d_i),
            ("d_l", self.d_l),
            ("z", self.z),
            ("ffn_mult", self.ffn_mult),
            ("afr_hidden", self.afr_hidden),
            ("action_tokens", self.action_tokens),
            ("vocab", self.vocab),
        ];
        if let Some((k, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("cost model dimension {k} must be positive")));
        }
        Ok(())
    }
}

/// Order-of-growth figure `(M + L_T) * C * N_N * H * d_Q`, taken literally.
pub fn cross_attn_cost(cfg: &ArchConfig) -> u64 {
    [cfg.m + cfg.l_t, cfg.crops, cfg.n_n, cfg.h_cross, cfg.d_q]
        .iter()
        .map(|&v| v as u64)
        .product()
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub high_res: bool,
    pub encoder: u64,
    pub qformer_self: u64,
    pub qformer_cross: u64,
    pub qformer_ffn: u64,
    pub afr: u64,
    pub projection: u64,
    pub decoder: u64,
    pub total: u64,
}

impl CostReport {
    pub fn components(&self) -> [(&'static str, u64); 7] {
        [
            ("encoder", self.encoder),
            ("qformer_self", self.qformer_self),
            ("qformer_cross", self.qformer_cross),
            ("qformer_ffn", self.qformer_ffn),
            ("afr", self.afr),
            ("projection", self.projection),
            ("decoder", self.decoder),
        ]
    }
}

fn transformer_layer(t: u64, d: u64, f: u64) -> u64 {
    4 * t * d * d + 2 * t * t * d + 2 * t * d * f * d
}

fn encoder_pass(c: &ArchConfig) -> u64 {
    let (n, d) = (c.n_n as u64, c.d_i as u64);
    n * c.patch_dim as u64 * d + c.vision_layers as u64 * transformer_layer(n + 1, d, c.ffn_mult as u64)
}

/// One Q-Former pass against `k` image tokens: (self, cross, ffn).
fn qformer_pass(c: &ArchConfig, k: u64) -> (u64, u64, u64) {
    let (m, l, d, di, f, z) = (
        c.m as u64,
        c.l_t as u64,
        c.d_q as u64,
        c.d_i as u64,
        c.ffn_mult as u64,
        c.z as u64,
    );
    let s = m + l;
    let self_ = 4 * s * d * d + 2 * s * s * d;
    let cross = 2 * m * d * d + 2 * k * di * d + 2 * m * k * d;
    let ffn = 2 * s * d * f * d;
    (z * self_, z * cross, z * ffn)
}

fn mlp(m: u64, d_in: u64, h: u64, d_out: u64) -> u64 {
    m * (d_in * h + h * d_out)
}

pub fn total_forward_cost(cfg: &ArchConfig, high_res: bool) -> Result<CostReport> {
    cfg.validate()?;
    let c = cfg;
    let (m, h, dq) = (c.m as u64, c.afr_hidden as u64, c.d_q as u64);
    let tokens = c.n_n as u64 + 1;
    let mut r = CostReport {
        high_res,
        encoder: encoder_pass(c),
        ..CostReport::default()
    };
    let (s, x, f) = qformer_pass(c, tokens);
    r.qformer_self = s;
    r.qformer_cross = x;
    r.qformer_ffn = f;
    r.afr = match c.fusion_low {
        FusionStrategy::Afr => 2 * mlp(m, c.d_i as u64, h, dq),
        FusionStrategy::Residual => mlp(m, c.d_i as u64, h, dq),
        FusionStrategy::None => 0,
    };
    if high_res {
        r.encoder += c.crops as u64 * encoder_pass(c);
        let (s, x, f) = qformer_pass(c, c.crops as u64 * tokens);
        r.qformer_self += s;
        r.qformer_cross += x;
        r.qformer_ffn += f;
        let blocks = match c.high_shift {
            HighResShift::High => 2,
            HighResShift::Image => 1,
        };
        r.afr += blocks * mlp(m, dq, h, dq);
    }
    r.projection = m * dq * c.d_l as u64;
    let seq = m + c.l_t as u64 + c.action_tokens as u64;
    let dl = c.d_l as u64;
    r.decoder = c.decoder_layers as u64 * transformer_layer(seq, dl, c.ffn_mult as u64)
        + c.action_tokens as u64 * dl * c.vocab as u64;
    r.total = r.components().iter().map(|(_, v)| v).sum();
    Ok(r)
}

/// Low-res and high-res reports side by side, with the cross-attention figure.
pub fn render_comparison(cfg: &ArchConfig) -> Result<String> {
    let low = total_forward_cost(cfg, false)?;
    let high = total_forward_cost(cfg, true)?;
    let ratio = high.total as f64 / low.total as f64;
    let mut s = String::new();
    let _ = writeln!(s, "{:<14} {:>20} {:>20}", "component", "low-res MACs", "high-res MACs");
    for ((name, a), (_, b)) in low.components().iter().zip(high.components()) {
        let _ = writeln!(s, "{name:<14} {a:>20} {b:>20}");
    }
    let _ = writeln!(s, "{:<14} {:>20} {:>20}", "total", low.total, high.total);
    let _ = writeln!(s, "high/low ratio {ratio:.3}");
    let _ = writeln!(
        s,
        "reference high/low {:.3} ({REFERENCE_TFLOPS_HIGH} / {REFERENCE_TFLOPS_LOW} TFLOPs, ordering only)",
        REFERENCE_TFLOPS_HIGH / REFERENCE_TFLOPS_LOW
    );
    let _ = writeln!(s, "cross_attn_cost {}", cross_attn_cost(cfg));
    let _ = writeln!(
        s,
        "FLOPs ~= 2 x MACs; softmax, norms, activations and lookups unmodelled"
    );
    let _ = writeln!(
        s,
        "summary low_macs={} high_macs={} ratio={ratio:.6} cross_attn={}",
        low.total,
        high.total,
        cross_attn_cost(cfg)
    );
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actions::{serialize, Action, ActionHistory, Direction};
    use crate::agent::{AgentModel, StepInput};
    use crate::numerics::Graph;
    use crate::vision::Screen;
    use proptest::prelude::*;

    fn measured(cfg: AgentConfig, gold: &Action) -> (u64, ArchConfig) {
        let m = AgentModel::new(cfg).unwrap();
        let h = ActionHistory::from_actions(&[Action::PressBack], 8);
        let task = "click the red button";
        let l_t = m
            .tokenizer
            .encode_prompt(task, &h, m.cfg.max_text_tokens)
            .unwrap()
            .len();
        let (w, ht) = m.cfg.input_size();
        let s = Screen::filled(w, ht, [10, 20, 30]);
        let input = StepInput {
            task,
            screen: &s,
            history: &h,
        };
        let mut g = Graph::inference(&m.store);
        g.counter_mut().reset();
        m.teacher_forced(&mut g, input, gold, &mut Default::default()).unwrap();
        let arch = ArchConfig::from_agent(&m.cfg, l_t, serialize(gold).len(), m.vocab.len());
        (g.counter().macs(), arch)
    }

    #[test]
    fn closed_form_matches_instrumented_forward() {
        let base = AgentConfig {
            screen_width: 16,
            screen_height: 16,
            patch: 8,
            d_i: 8,
            vision_heads: 2,
            d_q: 12,
            qformer_heads: 3,
            d_l: 16,
            decoder_heads: 2,
            ..AgentConfig::default()
        };
        let cases = [
            (base.clone(), Action::Click { x: 0.2, y: 0.9 }),
            (
                AgentConfig {
                    fusion_low: FusionStrategy::Residual,
                    qformer_layers: 1,
                    decoder_layers: 3,
                    afr_hidden: 5,
                    ffn_mult: 3,
                    ..base.clone()
                },
                Action::Type { text: "pizza".into() },
            ),
            (
                AgentConfig {
                    fusion_low: FusionStrategy::None,
                    screen_width: 24,
                    patch: 4,
                    vision_layers: 2,
                    ..base.clone()
                },
                Action::Scroll(Direction::Up),
            ),
        ];
        for (cfg, gold) in cases {
            let (macs, arch) = measured(cfg, &gold);
            assert_eq!(total_forward_cost(&arch, false).unwrap().total, macs, "{arch:?}");
        }
        for shift in [HighResShift::High, HighResShift::Image] {
            let cfg = AgentConfig {
                fusion_high: FusionStrategy::Afr,
                high_shift: shift,
                ..base.clone()
            };
            let (macs, arch) = measured(cfg, &Action::TaskComplete);
            assert_eq!(total_forward_cost(&arch, true).unwrap().total, macs);
        }
    }

    #[test]
    fn cross_attention_figure() {
        let cfg = ArchConfig::full_size();
        assert_eq!(cross_attn_cost(&cfg), 3_029_336_064);
        let one = ArchConfig {
            crops: 1,
            ..cfg.clone()
        };
        assert_eq!(cross_attn_cost(&cfg), 4 * cross_attn_cost(&one));
        assert_eq!(cross_attn_cost(&ArchConfig { n_n: 0, ..cfg.clone() }), 0);
        assert!(total_forward_cost(&ArchConfig { d_q: 0, ..cfg }, false).is_err());
    }

    #[test]
    fn report_lists_both_totals_and_the_reference() {
        let cfg = ArchConfig::full_size();
        let low = total_forward_cost(&cfg, false).unwrap();
        let high = total_forward_cost(&cfg, true).unwrap();
        assert!(high.total > low.total);
        let text = render_comparison(&cfg).unwrap();
        assert!(text.contains(&low.total.to_string()) && text.contains("5.47"));
    }

    proptest! {
        #[test]
        fn totals_sum_components_and_grow_with_every_size(
            m in 1usize..40, l in 1usize..40, c in 1usize..5, n in 1usize..40, d in 1usize..32, which in 0usize..5,
        ) {
            let cfg = ArchConfig { m, l_t: l, crops: c, n_n: n, d_q: d, ..ArchConfig::full_size() };
            let mut bigger = cfg.clone();
            match which {
                0 => bigger.m += 1,
                1 => bigger.l_t += 1,
                2 => bigger.crops += 1,
                3 => bigger.n_n += 1,
                _ => bigger.d_q += 1,
            }
            for hr in [false, true] {
                let a = total_forward_cost(&cfg, hr).unwrap();
                prop_assert_eq!(a.total, a.components().iter().map(|c| c.1).sum::<u64>());
                prop_assert!(total_forward_cost(&bigger, hr).unwrap().total >= a.total);
            }
            prop_assert!(cross_attn_cost(&bigger) >= cross_attn_cost(&cfg));
            prop_assert!(total_forward_cost(&cfg, true).unwrap().total > total_forward_cost(&cfg, false).unwrap().total);
        }
    }
}
