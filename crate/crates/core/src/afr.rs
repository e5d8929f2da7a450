//! Adaptive feature renormalization: per-token scale and shift of a target
//! sequence, both predicted from a token-aligned enriching sequence.

use std::fmt;
use std::str::FromStr;

use crate::layers::Ffn;
use crate::numerics::{Graph, NodeId, ParamStore};
use crate::vision::ImageEmbeddings;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    #[default]
    Afr,
    Residual,
    None,
}

impl FusionStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionStrategy::Afr => "afr",
            FusionStrategy::Residual => "residual",
            FusionStrategy::None => "none",
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "afr" => Ok(FusionStrategy::Afr),
            "residual" => Ok(FusionStrategy::Residual),
            "none" => Ok(FusionStrategy::None),
            _ => Err(Error::Config(format!(
                "unknown fusion strategy {s:?} (afr|residual|none)"
            ))),
        }
    }
}

/// Which shift the high-resolution stage adds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum HighResShift {
    /// Shift predicted from the crop queries by the high-resolution block.
    #[default]
    High,
    /// Reuse the shift computed by the low-resolution stage.
    Image,
}

impl HighResShift {
    pub fn as_str(self) -> &'static str {
        match self {
            HighResShift::High => "high",
            HighResShift::Image => "image",
        }
    }
}

impl FromStr for HighResShift {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "high" => Ok(HighResShift::High),
            "image" => Ok(HighResShift::Image),
            _ => Err(Error::Config(format!("unknown high-res shift {s:?} (high|image)"))),
        }
    }
}

fn check_alignment(g: &Graph<'_>, enrich: NodeId, target: NodeId) -> Result<()> {
    let (e, t) = (g.shape(enrich)[0], g.shape(target)[0]);
    if e != t {
        return Err(Error::Alignment { enrich: e, target: t });
    }
    Ok(())
}

/// Scale and shift networks. Built so that scale is 1 and shift 0 until trained.
#[derive(Clone, Debug)]
pub struct AfrBlock {
    pub alpha: Ffn,
    pub beta: Ffn,
    pub d_in: usize,
    pub d_out: usize,
}

impl AfrBlock {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Self {
            alpha: Ffn::constant_output(ps, &format!("{name}.alpha"), d_in, d_hidden, d_out, 1.0),
            beta: Ffn::constant_output(ps, &format!("{name}.beta"), d_in, d_hidden, d_out, 0.0),
            d_in,
            d_out,
        }
    }

    /// `(alpha, beta)` for each enriching token.
    pub fn coefficients(&self, g: &mut Graph<'_>, enrich: NodeId) -> Result<(NodeId, NodeId)> {
        Ok((self.alpha.forward(g, enrich)?, self.beta.forward(g, enrich)?))
    }

    /// `alpha(enrich) * target + beta(enrich)`, token by token.
    pub fn apply(&self, g: &mut Graph<'_>, enrich: NodeId, target: NodeId) -> Result<NodeId> {
        check_alignment(g, enrich, target)?;
        let (a, b) = self.coefficients(g, enrich)?;
        let scaled = g.mul(a, target)?;
        g.add(scaled, b)
    }
}

/// `target + mlp(enrich)`.
#[derive(Clone, Debug)]
pub struct ResidualFuse {
    pub mlp: Ffn,
}

impl ResidualFuse {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Self {
            mlp: Ffn::new(ps, &format!("{name}.mlp"), d_in, d_hidden, d_out),
        }
    }

    pub fn apply(&self, g: &mut Graph<'_>, enrich: NodeId, target: NodeId) -> Result<NodeId> {
        check_alignment(g, enrich, target)?;
        let m = self.mlp.forward(g, enrich)?;
        g.add(target, m)
    }
}

/// Image tokens modulate the low-resolution query output.
pub fn enrich_low_res(g: &mut Graph<'_>, block: &AfrBlock, image: &ImageEmbeddings, e_q: NodeId) -> Result<NodeId> {
    block.apply(g, image.tokens, e_q)
}

/// Crop-query output modulates the low-resolution enriched queries.
/// `image_shift`, when given, replaces the block's own shift.
pub fn enrich_high_res(
    g: &mut Graph<'_>,
    block: &AfrBlock,
    e_q_crops: NodeId,
    e_q_image: NodeId,
    image_shift: Option<NodeId>,
) -> Result<NodeId> {
    let (cs, ts) = (g.shape(e_q_crops), g.shape(e_q_image));
    if cs != ts {
        return Err(Error::dim("high-res enrichment", cs, ts));
    }
    let Some(shift) = image_shift else {
        return block.apply(g, e_q_crops, e_q_image);
    };
    let a = block.alpha.forward(g, e_q_crops)?;
    let scaled = g.mul(a, e_q_image)?;
    g.add(scaled, shift)
}

/// One fusion stage as selected by configuration.
#[derive(Clone, Debug)]
pub enum Fusion {
    Afr(AfrBlock),
    Residual(ResidualFuse),
    None,
}

/// Result of a fusion stage; `shift` is the AFR shift when one was computed.
#[derive(Clone, Copy, Debug)]
pub struct Fused {
    pub out: NodeId,
    pub shift: Option<NodeId>,
}

impl Fusion {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        strategy: FusionStrategy,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
    ) -> Self {
        match strategy {
            FusionStrategy::Afr => Fusion::Afr(AfrBlock::new(ps, name, d_in, d_hidden, d_out)),
            FusionStrategy::Residual => Fusion::Residual(ResidualFuse::new(ps, name, d_in, d_hidden, d_out)),
            FusionStrategy::None => Fusion::None,
        }
    }

    pub fn strategy(&self) -> FusionStrategy {
        match self {
            Fusion::Afr(_) => FusionStrategy::Afr,
            Fusion::Residual(_) => FusionStrategy::Residual,
            Fusion::None => FusionStrategy::None,
        }
    }

    pub fn apply(&self, g: &mut Graph<'_>, enrich: NodeId, target: NodeId) -> Result<Fused> {
        match self {
            Fusion::Afr(b) => {
                check_alignment(g, enrich, target)?;
                let (a, s) = b.coefficients(g, enrich)?;
                let scaled = g.mul(a, target)?;
                let out = g.add(scaled, s)?;
                Ok(Fused { out, shift: Some(s) })
            }
            Fusion::Residual(r) => Ok(Fused {
                out: r.apply(g, enrich, target)?,
                shift: None,
            }),
            Fusion::None => {
                check_alignment(g, enrich, target)?;
                Ok(Fused {
                    out: target,
                    shift: None,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{GradBuffer, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Gives the final layers of both networks random weights.
    fn randomize(ps: &mut ParamStore, seed: u64) {
        let ids: Vec<_> = ps.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let shape = ps.get(id).shape().to_vec();
            let (r, c) = if shape.len() == 2 {
                (shape[0], shape[1])
            } else {
                (1, shape[0])
            };
            let t = random(r, c, seed + k as u64).reshape(shape).unwrap();
            ps.set(id, t).unwrap();
        }
    }

    fn ffn_ref(ps: &ParamStore, f: &Ffn, x: &[f64]) -> Vec<f64> {
        let lin = |w: &Tensor, b: &Tensor, x: &[f64]| -> Vec<f64> {
            let (din, dout) = (w.shape()[0], w.shape()[1]);
            (0..dout)
                .map(|j| b.data()[j] + (0..din).map(|i| x[i] * w.data()[i * dout + j]).sum::<f64>())
                .collect()
        };
        let h: Vec<f64> = lin(ps.get(f.fc1.weight), ps.get(f.fc1.bias), x)
            .into_iter()
            .map(|v| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh()))
            .collect();
        lin(ps.get(f.fc2.weight), ps.get(f.fc2.bias), &h)
    }

    fn eval(ps: &ParamStore, f: impl FnOnce(&mut Graph<'_>) -> Result<NodeId>) -> Result<Tensor> {
        let mut g = Graph::inference(ps);
        let out = f(&mut g)?;
        Ok(g.value(out).clone())
    }

    #[test]
    fn fresh_block_is_exact_identity() {
        let mut ps = ParamStore::new(1);
        let b = AfrBlock::new(&mut ps, "afr", 4, 6, 3);
        let target = random(5, 3, 2);
        let out = eval(&ps, |g| {
            let e = g.constant(random(5, 4, 3));
            let t = g.constant(target.clone());
            b.apply(g, e, t)
        })
        .unwrap();
        assert_eq!(out, target);
    }

    #[test]
    fn zero_scale_outputs_shift_only() {
        let mut ps = ParamStore::new(1);
        let b = AfrBlock::new(&mut ps, "afr", 4, 6, 3);
        randomize(&mut ps, 50);
        ps.set(b.alpha.fc2.weight, Tensor::zeros(&[6, 3])).unwrap();
        ps.set(b.alpha.fc2.bias, Tensor::zeros(&[3])).unwrap();
        let enrich = random(2, 4, 4);
        let shift = eval(&ps, |g| {
            let e = g.constant(enrich.clone());
            b.beta.forward(g, e)
        })
        .unwrap();
        for seed in [5, 6] {
            let out = eval(&ps, |g| {
                let e = g.constant(enrich.clone());
                let t = g.constant(random(2, 3, seed));
                b.apply(g, e, t)
            })
            .unwrap();
            assert_eq!(out, shift);
        }
    }

    #[test]
    fn matches_scalar_loop() {
        let mut ps = ParamStore::new(2);
        let b = AfrBlock::new(&mut ps, "afr", 3, 4, 3);
        randomize(&mut ps, 70);
        let (enrich, target) = (random(2, 3, 8), random(2, 3, 9));
        let out = eval(&ps, |g| {
            let e = g.constant(enrich.clone());
            let t = g.constant(target.clone());
            b.apply(g, e, t)
        })
        .unwrap();
        for r in 0..2 {
            let a = ffn_ref(&ps, &b.alpha, enrich.row(r));
            let s = ffn_ref(&ps, &b.beta, enrich.row(r));
            for c in 0..3 {
                let want = a[c] * target.row(r)[c] + s[c];
                assert!((out.row(r)[c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn affine_in_target() {
        let mut ps = ParamStore::new(3);
        let b = AfrBlock::new(&mut ps, "afr", 4, 4, 4);
        randomize(&mut ps, 90);
        let e = random(6, 4, 10);
        let (t1, t2) = (random(6, 4, 11), random(6, 4, 12));
        let run = |t: &Tensor| {
            eval(&ps, |g| {
                let en = g.constant(e.clone());
                let tt = g.constant(t.clone());
                b.apply(g, en, tt)
            })
            .unwrap()
        };
        let alpha = eval(&ps, |g| {
            let en = g.constant(e.clone());
            b.alpha.forward(g, en)
        })
        .unwrap();
        let (o1, o2) = (run(&t1), run(&t2));
        for i in 0..24 {
            let lhs = o1.data()[i] - o2.data()[i];
            let rhs = alpha.data()[i] * (t1.data()[i] - t2.data()[i]);
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn misaligned_tokens_name_both_counts() {
        let mut ps = ParamStore::new(4);
        let b = AfrBlock::new(&mut ps, "afr", 4, 4, 4);
        let err = eval(&ps, |g| {
            let e = g.constant(random(64, 4, 1));
            let t = g.constant(random(65, 4, 2));
            b.apply(g, e, t)
        })
        .unwrap_err();
        assert!(matches!(err, Error::Alignment { enrich: 64, target: 65 }));
        assert!(err.to_string().contains("64") && err.to_string().contains("65"));
    }

    #[test]
    fn low_res_stage_keeps_shape_and_starts_as_identity() {
        let mut ps = ParamStore::new(5);
        let b = AfrBlock::new(&mut ps, "afr", 6, 8, 8);
        let target = random(65, 8, 3);
        let out = eval(&ps, |g| {
            let img = ImageEmbeddings {
                tokens: g.constant(random(65, 6, 4)),
                n_patches: 64,
                d_i: 6,
            };
            let t = g.constant(target.clone());
            enrich_low_res(g, &b, &img, t)
        })
        .unwrap();
        assert_eq!(out, target);
    }

    #[test]
    fn high_res_stage_identity_and_asymmetry() {
        let mut ps = ParamStore::new(6);
        let b = AfrBlock::new(&mut ps, "afr_high", 8, 8, 8);
        let (crops, image) = (random(65, 8, 5), random(65, 8, 6));
        let run = |ps: &ParamStore, x: &Tensor, y: &Tensor| {
            eval(ps, |g| {
                let c = g.constant(x.clone());
                let i = g.constant(y.clone());
                enrich_high_res(g, &b, c, i, None)
            })
            .unwrap()
        };
        assert_eq!(run(&ps, &crops, &image), image);
        randomize(&mut ps, 30);
        let ab = run(&ps, &crops, &image);
        let ba = run(&ps, &image, &crops);
        assert_eq!(ab.shape(), &[65, 8]);
        assert!(ab.max_abs_diff(&ba) > 1e-6);
    }

    #[test]
    fn image_shift_override_replaces_block_shift() {
        let mut ps = ParamStore::new(7);
        let b = AfrBlock::new(&mut ps, "afr_high", 3, 3, 3);
        randomize(&mut ps, 40);
        let (crops, image, shift) = (random(2, 3, 1), random(2, 3, 2), random(2, 3, 3));
        let out = eval(&ps, |g| {
            let c = g.constant(crops.clone());
            let i = g.constant(image.clone());
            let s = g.constant(shift.clone());
            enrich_high_res(g, &b, c, i, Some(s))
        })
        .unwrap();
        for r in 0..2 {
            let a = ffn_ref(&ps, &b.alpha, crops.row(r));
            for c in 0..3 {
                let want = a[c] * image.row(r)[c] + shift.row(r)[c];
                assert!((out.row(r)[c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn residual_fuse_cases() {
        let mut ps = ParamStore::new(8);
        let r = ResidualFuse::new(&mut ps, "res", 3, 4, 3);
        let (enrich, target) = (random(2, 3, 1), random(2, 3, 2));
        let run = |ps: &ParamStore, t: &Tensor| {
            eval(ps, |g| {
                let e = g.constant(enrich.clone());
                let t = g.constant(t.clone());
                r.apply(g, e, t)
            })
            .unwrap()
        };
        let out = run(&ps, &target);
        let zero_target = run(&ps, &Tensor::zeros(&[2, 3]));
        for row in 0..2 {
            let m = ffn_ref(&ps, &r.mlp, enrich.row(row));
            for c in 0..3 {
                assert!((out.row(row)[c] - (target.row(row)[c] + m[c])).abs() < 1e-12);
                assert!((zero_target.row(row)[c] - m[c]).abs() < 1e-12);
            }
        }
        ps.set(r.mlp.fc2.weight, Tensor::zeros(&[4, 3])).unwrap();
        assert_eq!(run(&ps, &target), target);
    }

    #[test]
    fn every_strategy_preserves_target_shape() {
        for s in ["afr", "residual", "none"] {
            let strategy: FusionStrategy = s.parse().unwrap();
            let mut ps = ParamStore::new(9);
            let f = Fusion::new(&mut ps, "f", strategy, 5, 4, 4);
            assert_eq!(f.strategy().to_string(), s);
            let out = eval(&ps, |g| {
                let e = g.constant(random(7, 5, 1));
                let t = g.constant(random(7, 4, 2));
                f.apply(g, e, t).map(|x| x.out)
            })
            .unwrap();
            assert_eq!(out.shape(), &[7, 4]);
        }
        assert!("soft-moe".parse::<FusionStrategy>().is_err());
    }

    #[test]
    fn one_step_reaches_scale_and_shift_weights() {
        let mut ps = ParamStore::new(10);
        let b = AfrBlock::new(&mut ps, "afr", 4, 4, 4);
        let mut g = Graph::with_params(&ps);
        let e = g.constant(random(3, 4, 1));
        let t = g.constant(random(3, 4, 2));
        let out = b.apply(&mut g, e, t).unwrap();
        let w = g.constant(random(3, 4, 3));
        let p = g.mul(out, w).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        let mut buf = GradBuffer::new(&ps);
        buf.accumulate(&g, 1.0);
        for id in [b.alpha.fc2.weight, b.alpha.fc2.bias, b.beta.fc2.weight, b.beta.fc2.bias] {
            assert!(buf.get(id).iter().any(|v| *v != 0.0), "{}", ps.name(id));
        }
    }
}
