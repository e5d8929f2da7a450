use std::fmt::Write as _;
use std::str::FromStr;

use crate::afr::{FusionStrategy, HighResShift};
use crate::qformer::QFormerConfig;
use crate::vision::VisionConfig;
use crate::{Error, Result};

/// Every model and optimizer dimension, settable through `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentConfig {
    pub seed: u64,
    pub screen_width: usize,
    pub screen_height: usize,
    pub patch: usize,
    pub d_i: usize,
    pub vision_layers: usize,
    pub vision_heads: usize,
    /// 0 resolves to `N + 1`.
    pub queries: usize,
    pub d_q: usize,
    pub qformer_layers: usize,
    pub qformer_heads: usize,
    pub max_text_tokens: usize,
    pub d_l: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub max_steps: usize,
    pub ffn_mult: usize,
    pub crops: usize,
    pub fusion_low: FusionStrategy,
    pub fusion_high: FusionStrategy,
    pub high_shift: HighResShift,
    /// 0 resolves to `d_q`.
    pub afr_hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub history_len: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            screen_width: 64,
            screen_height: 64,
            patch: 8,
            d_i: 32,
            vision_layers: 1,
            vision_heads: 4,
            queries: 0,
            d_q: 32,
            qformer_layers: 2,
            qformer_heads: 4,
            max_text_tokens: 64,
            d_l: 64,
            decoder_layers: 2,
            decoder_heads: 4,
            max_steps: 24,
            ffn_mult: 2,
            crops: 4,
            fusion_low: FusionStrategy::Afr,
            fusion_high: FusionStrategy::None,
            high_shift: HighResShift::High,
            afr_hidden: 0,
            lr: 5e-5,
            epochs: 12,
            batch_size: 16,
            history_len: 8,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "screen.width",
    "screen.height",
    "vision.patch",
    "vision.d_i",
    "vision.layers",
    "vision.heads",
    "qformer.queries",
    "qformer.d_q",
    "qformer.layers",
    "qformer.heads",
    "qformer.max_text_tokens",
    "decoder.d_l",
    "decoder.layers",
    "decoder.heads",
    "decoder.max_steps",
    "model.ffn_mult",
    "crops",
    "fusion.low",
    "fusion.high",
    "fusion.high_shift",
    "afr.hidden",
    "train.lr",
    "train.epochs",
    "train.batch_size",
    "history.len",
];

/// Keys that change parameter shapes; they must agree between a checkpoint and its data.
pub const SHAPE_KEYS: &[&str] = &[
    "screen.width",
    "screen.height",
    "vision.patch",
    "vision.d_i",
    "vision.layers",
    "qformer.queries",
    "qformer.d_q",
    "qformer.layers",
    "qformer.max_text_tokens",
    "decoder.d_l",
    "decoder.layers",
    "decoder.max_steps",
    "model.ffn_mult",
    "fusion.low",
    "fusion.high",
    "afr.hidden",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

/// Splits config text into `(line number, key, value)`; `#` starts a comment.
pub fn parse_lines(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl AgentConfig {
    pub fn is_key(key: &str) -> bool {
        KEYS.contains(&key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = num(key, value)?,
            "screen.width" => self.screen_width = num(key, value)?,
            "screen.height" => self.screen_height = num(key, value)?,
            "vision.patch" => self.patch = num(key, value)?,
            "vision.d_i" => self.d_i = num(key, value)?,
            "vision.layers" => self.vision_layers = num(key, value)?,
            "vision.heads" => self.vision_heads = num(key, value)?,
            "qformer.queries" => self.queries = if value == "auto" { 0 } else { num(key, value)? },
            "qformer.d_q" => self.d_q = num(key, value)?,
            "qformer.layers" => self.qformer_layers = num(key, value)?,
            "qformer.heads" => self.qformer_heads = num(key, value)?,
            "qformer.max_text_tokens" => self.max_text_tokens = num(key, value)?,
            "decoder.d_l" => self.d_l = num(key, value)?,
            "decoder.layers" => self.decoder_layers = num(key, value)?,
            "decoder.heads" => self.decoder_heads = num(key, value)?,
            "decoder.max_steps" => self.max_steps = num(key, value)?,
            "model.ffn_mult" => self.ffn_mult = num(key, value)?,
            "crops" => self.crops = num(key, value)?,
            "fusion.low" => self.fusion_low = value.parse()?,
            "fusion.high" => self.fusion_high = value.parse()?,
            "fusion.high_shift" => self.high_shift = value.parse()?,
            "afr.hidden" => self.afr_hidden = if value == "auto" { 0 } else { num(key, value)? },
            "train.lr" => self.lr = num(key, value)?,
            "train.epochs" => self.epochs = num(key, value)?,
            "train.batch_size" => self.batch_size = num(key, value)?,
            "history.len" => self.history_len = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "screen.width" => self.screen_width.to_string(),
            "screen.height" => self.screen_height.to_string(),
            "vision.patch" => self.patch.to_string(),
            "vision.d_i" => self.d_i.to_string(),
            "vision.layers" => self.vision_layers.to_string(),
            "vision.heads" => self.vision_heads.to_string(),
            "qformer.queries" => self.m_queries().to_string(),
            "qformer.d_q" => self.d_q.to_string(),
            "qformer.layers" => self.qformer_layers.to_string(),
            "qformer.heads" => self.qformer_heads.to_string(),
            "qformer.max_text_tokens" => self.max_text_tokens.to_string(),
            "decoder.d_l" => self.d_l.to_string(),
            "decoder.layers" => self.decoder_layers.to_string(),
            "decoder.heads" => self.decoder_heads.to_string(),
            "decoder.max_steps" => self.max_steps.to_string(),
            "model.ffn_mult" => self.ffn_mult.to_string(),
            "crops" => self.crops.to_string(),
            "fusion.low" => self.fusion_low.to_string(),
            "fusion.high" => self.fusion_high.to_string(),
            "fusion.high_shift" => self.high_shift.as_str().to_string(),
            "afr.hidden" => self.hidden().to_string(),
            "train.lr" => format!("{:?}", self.lr),
            "train.epochs" => self.epochs.to_string(),
            "train.batch_size" => self.batch_size.to_string(),
            "history.len" => self.history_len.to_string(),
            _ => return None,
        })
    }

    /// Starts from the defaults; unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (line, k, v) in parse_lines(text)? {
            cfg.set(&k, &v)
                .map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).unwrap_or_default());
        }
        s
    }

    pub fn n_patches(&self) -> usize {
        if self.patch == 0 {
            return 0;
        }
        (self.screen_width / self.patch) * (self.screen_height / self.patch)
    }

    pub fn m_queries(&self) -> usize {
        if self.queries == 0 {
            self.n_patches() + 1
        } else {
            self.queries
        }
    }

    pub fn hidden(&self) -> usize {
        if self.afr_hidden == 0 {
            self.d_q
        } else {
            self.afr_hidden
        }
    }

    /// Copy with automatic sizes filled in.
    pub fn resolved(&self) -> Self {
        Self {
            queries: self.m_queries(),
            afr_hidden: self.hidden(),
            ..self.clone()
        }
    }

    pub fn high_res(&self) -> bool {
        self.fusion_high == FusionStrategy::Afr
    }

    /// Full-size input screens: the encoder geometry stacked `crops` times.
    pub fn input_size(&self) -> (usize, usize) {
        (self.screen_width, self.screen_height * self.crops)
    }

    pub fn vision(&self) -> VisionConfig {
        VisionConfig {
            width: self.screen_width,
            height: self.screen_height,
            patch: self.patch,
            d_i: self.d_i,
            layers: self.vision_layers,
            heads: self.vision_heads,
            ffn_mult: self.ffn_mult,
        }
    }

    pub fn qformer(&self) -> QFormerConfig {
        QFormerConfig {
            m_queries: self.m_queries(),
            d_q: self.d_q,
            z_layers: self.qformer_layers,
            heads: self.qformer_heads,
            ffn_mult: self.ffn_mult,
            d_i: self.d_i,
            max_text_tokens: self.max_text_tokens,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vision().validate()?;
        self.qformer().validate()?;
        let n = self.n_patches();
        if self.m_queries() != n + 1 {
            return Err(Error::Config(format!(
                "qformer.queries = {} but the encoder yields {} patches + 1 global token",
                self.m_queries(),
                n
            )));
        }
        for (k, v) in [
            ("decoder.d_l", self.d_l),
            ("decoder.layers", self.decoder_layers),
            ("decoder.heads", self.decoder_heads),
            ("decoder.max_steps", self.max_steps),
            ("crops", self.crops),
            ("train.batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if !self.d_l.is_multiple_of(self.decoder_heads) {
            return Err(Error::Config(format!(
                "decoder.d_l = {} not divisible by {} heads",
                self.d_l, self.decoder_heads
            )));
        }
        if self.fusion_high == FusionStrategy::Residual {
            return Err(Error::Config("fusion.high must be afr or none".into()));
        }
        if self.high_shift == HighResShift::Image && !(self.high_res() && self.fusion_low == FusionStrategy::Afr) {
            return Err(Error::Config(
                "fusion.high_shift = image needs fusion.low = afr and fusion.high = afr".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("train.lr = {} must be finite and >= 0", self.lr)));
        }
        Ok(())
    }

    /// Shape-relevant keys whose values differ.
    pub fn shape_differences(&self, other: &AgentConfig) -> Vec<String> {
        SHAPE_KEYS
            .iter()
            .filter(|k| self.get(k) != other.get(k))
            .map(|k| {
                format!(
                    "{k}: {} vs {}",
                    self.get(k).unwrap_or_default(),
                    other.get(k).unwrap_or_default()
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = AgentConfig::default();
        c.set("fusion.low", "residual").unwrap();
        c.set("train.lr", "0.001").unwrap();
        let back = AgentConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back.fusion_low, FusionStrategy::Residual);
        assert_eq!(back.lr, 1e-3);
        assert_eq!(back.m_queries(), 65);
        assert_eq!(back.to_text(), c.to_text());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_geometry() {
        assert!(AgentConfig::from_text("bogus.key = 1").is_err());
        assert!(AgentConfig::from_text("vision.patch = 7").is_err());
        assert!(AgentConfig::from_text("qformer.queries = 64").is_err());
        assert!(AgentConfig::from_text("fusion.high = residual").is_err());
        assert!(AgentConfig::from_text("fusion.high_shift = image").is_err());
        let e = AgentConfig::from_text("# comment\nseed = 3\nseed 4").unwrap_err();
        assert!(e.to_string().contains("line 3"));
    }

    #[test]
    fn defaults_match_documented_values() {
        let c = AgentConfig::default();
        assert_eq!(
            (c.lr, c.epochs, c.history_len, c.crops, c.max_steps),
            (5e-5, 12, 8, 4, 24)
        );
        assert_eq!(c.input_size(), (64, 256));
    }
}
