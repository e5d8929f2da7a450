//! Finite-difference checks for each block and the whole tiny model.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::actions::{Action, ActionHistory};
use crate::afr::{AfrBlock, FusionStrategy, ResidualFuse};
use crate::agent::{AgentConfig, AgentModel, StepSample, Trainer};
use crate::numerics::{
    check_gradients_with, max_rel_err, AttnMask, Fault, GradBuffer, Graph, NodeId, ParamId, ParamStore, Tensor, FD_STEP,
};
use crate::qformer::{QFormer, QFormerConfig, TextTokenizer};
use crate::vision::Screen;
use crate::Result;

pub const TOLERANCE: f64 = 1e-4;
/// Parameter coordinates sampled for the end-to-end model.
pub const MODEL_SAMPLES: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub coordinates: usize,
    /// Op case or parameter holding the largest error.
    pub worst: String,
}

impl BlockCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}

fn weighted_sum(g: &mut Graph<'_>, y: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(y), 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Moves every parameter off its structured init so zero blocks carry gradient.
fn jitter(ps: &mut ParamStore, seed: u64, bound: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = ps.ids().collect();
    for id in ids {
        for v in ps.get_mut(id).data_mut() {
            *v += rng.gen_range(-bound..bound);
        }
    }
}

type Coord = (ParamId, usize);

/// Compares parameter gradients from `eval` with central differences at `coords`.
fn check_params(
    ps: &mut ParamStore,
    coords: &[Coord],
    eval: impl Fn(&ParamStore) -> Result<(f64, GradBuffer)>,
) -> Result<(f64, String)> {
    let (_, grads) = eval(ps)?;
    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    for &(id, i) in coords {
        analytic.push(grads.get(id)[i]);
        let orig = ps.get(id).data()[i];
        ps.get_mut(id).data_mut()[i] = orig + FD_STEP;
        let plus = eval(ps)?.0;
        ps.get_mut(id).data_mut()[i] = orig - FD_STEP;
        let minus = eval(ps)?.0;
        ps.get_mut(id).data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * FD_STEP));
    }
    let (e, k) = max_rel_err(&analytic, &numeric);
    if std::env::var("GC_DEBUG").is_ok() {
        eprintln!(
            "{} [{}] a={:e} n={:e}",
            ps.name(coords[k].0),
            coords[k].1,
            analytic[k],
            numeric[k]
        );
    }
    let worst = coords
        .get(k)
        .map_or_else(String::new, |&(id, i)| format!("{}[{i}]", ps.name(id)));
    Ok((e, worst))
}

/// Attention key biases are skipped: softmax ignores a per-row shift, so their
/// gradient is identically zero and only rounding noise would be compared.
fn all_coords(ps: &ParamStore) -> Vec<Coord> {
    ps.iter()
        .filter(|(_, p)| !p.name.ends_with(".k.bias"))
        .flat_map(|(id, p)| (0..p.value().numel()).map(move |i| (id, i)))
        .collect()
}

fn sampled_coords(ps: &ParamStore, n: usize, seed: u64) -> Vec<Coord> {
    let all = all_coords(ps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample(&mut rng, all.len(), n.min(all.len()))
        .iter()
        .map(|k| all[k])
        .collect()
}

/// Scalar loss from a graph built over `ps`, with its parameter gradients.
fn graph_eval(
    ps: &ParamStore,
    fault: Option<Fault>,
    build: impl Fn(&mut Graph<'_>) -> Result<NodeId>,
) -> Result<(f64, GradBuffer)> {
    let mut g = Graph::with_params(ps);
    g.set_fault(fault);
    let loss = build(&mut g)?;
    g.backward(loss)?;
    let mut gb = GradBuffer::new(ps);
    gb.accumulate(&g, 1.0);
    Ok((g.value(loss).item(), gb))
}

fn numerics_block(seed: u64, fault: Option<Fault>) -> Result<BlockCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(101));
    let mut r = |s: &[usize]| rand_tensor(&mut rng, s, 1.5);
    type Build = Box<dyn Fn(&mut Graph<'_>, &[NodeId]) -> Result<NodeId>>;
    let cases: Vec<(&str, Vec<Tensor>, Build)> = vec![
        (
            "matmul",
            vec![r(&[3, 4]), r(&[4, 2])],
            Box::new(|g, x| {
                let y = g.matmul(x[0], x[1])?;
                weighted_sum(g, y, 1)
            }),
        ),
        (
            "add_sub_mul",
            vec![r(&[2, 3]), r(&[2, 3])],
            Box::new(|g, x| {
                let a = g.add(x[0], x[1])?;
                let s = g.sub(x[0], x[1])?;
                let m = g.mul(a, s)?;
                let m = g.scale(m, 0.7);
                weighted_sum(g, m, 2)
            }),
        ),
        (
            "add_row",
            vec![r(&[3, 4]), r(&[4])],
            Box::new(|g, x| {
                let y = g.add_row(x[0], x[1])?;
                weighted_sum(g, y, 3)
            }),
        ),
        (
            "gelu",
            vec![r(&[2, 5])],
            Box::new(|g, x| {
                let y = g.gelu(x[0]);
                weighted_sum(g, y, 4)
            }),
        ),
        (
            "layer_norm",
            vec![r(&[3, 5]), r(&[5]), r(&[5])],
            Box::new(|g, x| {
                let y = g.layer_norm(x[0], x[1], x[2], 1e-5)?;
                weighted_sum(g, y, 5)
            }),
        ),
        (
            "softmax",
            vec![r(&[3, 4])],
            Box::new(|g, x| {
                let y = g.softmax(x[0], 1)?;
                weighted_sum(g, y, 6)
            }),
        ),
        (
            "attention",
            vec![r(&[3, 4]), r(&[5, 4]), r(&[5, 4])],
            Box::new(|g, x| {
                let y = g.attention(x[0], x[1], x[2], 2, &AttnMask::None)?;
                weighted_sum(g, y, 7)
            }),
        ),
        (
            "causal_attention",
            vec![r(&[4, 6]), r(&[4, 6]), r(&[4, 6])],
            Box::new(|g, x| {
                let y = g.attention(x[0], x[1], x[2], 3, &AttnMask::Causal)?;
                weighted_sum(g, y, 8)
            }),
        ),
        (
            "rows",
            vec![r(&[2, 3]), r(&[4, 3])],
            Box::new(|g, x| {
                let c = g.concat_rows(&[x[0], x[1]])?;
                let s = g.slice_rows(c, 1, 4)?;
                let e = g.gather_rows(s, &[3, 0, 3, 2])?;
                weighted_sum(g, e, 9)
            }),
        ),
        (
            "cross_entropy",
            vec![r(&[3, 6])],
            Box::new(|g, x| g.cross_entropy(x[0], &[1, 5, 0])),
        ),
    ];
    let mut worst: f64 = 0.0;
    let mut worst_case = "";
    let mut coords = 0;
    for (case, inputs, build) in cases {
        coords += inputs.iter().map(Tensor::numel).sum::<usize>();
        let e = check_gradients_with(build, &inputs, FD_STEP, fault)?;
        if e >= worst {
            worst = e;
            worst_case = case;
        }
    }
    Ok(BlockCheck {
        name: "numerics",
        max_rel_err: worst,
        coordinates: coords,
        worst: worst_case.into(),
    })
}

fn qformer_block(seed: u64, fault: Option<Fault>) -> Result<BlockCheck> {
    let cfg = QFormerConfig {
        m_queries: 3,
        d_q: 4,
        z_layers: 2,
        heads: 2,
        ffn_mult: 2,
        d_i: 6,
        max_text_tokens: 8,
    };
    let tok = TextTokenizer::default();
    let mut ps = ParamStore::new(seed.wrapping_add(202));
    let qf = QFormer::new(&mut ps, cfg, tok.len())?;
    jitter(&mut ps, seed.wrapping_add(203), 0.3);
    let images = rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(204)), &[5, 6], 1.0);
    let coords = all_coords(&ps)
        .into_iter()
        .filter(|(id, _)| !ps.name(*id).ends_with(".table"))
        .collect::<Vec<_>>();
    let n = coords.len();
    let (err, worst) = check_params(&mut ps, &coords, |ps| {
        graph_eval(ps, fault, |g| {
            let text = qf.text.forward(g, &[5, 9, 2])?;
            let q = g.param(qf.queries.low_res);
            let img = g.constant(images.clone());
            let (e_q, e_t) = qf.forward(g, q, text, img)?;
            let a = weighted_sum(g, e_q, 11)?;
            let b = weighted_sum(g, e_t, 12)?;
            g.add(a, b)
        })
    })?;
    Ok(BlockCheck {
        name: "qformer",
        max_rel_err: err,
        coordinates: n,
        worst,
    })
}

fn afr_block(seed: u64, fault: Option<Fault>) -> Result<BlockCheck> {
    let mut ps = ParamStore::new(seed.wrapping_add(303));
    let afr = AfrBlock::new(&mut ps, "afr", 5, 4, 3);
    let res = ResidualFuse::new(&mut ps, "res", 5, 4, 3);
    jitter(&mut ps, seed.wrapping_add(304), 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(305));
    let enrich = ps.insert("input.enrich", rand_tensor(&mut rng, &[4, 5], 1.0));
    let target = ps.insert("input.target", rand_tensor(&mut rng, &[4, 3], 1.0));
    let coords = all_coords(&ps);
    let n = coords.len();
    let (err, worst) = check_params(&mut ps, &coords, |ps| {
        graph_eval(ps, fault, |g| {
            let e = g.param(enrich);
            let t = g.param(target);
            let a = afr.apply(g, e, t)?;
            let r = res.apply(g, e, t)?;
            let a = weighted_sum(g, a, 21)?;
            let r = weighted_sum(g, r, 22)?;
            g.add(a, r)
        })
    })?;
    Ok(BlockCheck {
        name: "afr",
        max_rel_err: err,
        coordinates: n,
        worst,
    })
}

/// Frozen tiny policy: 16x16 screens, patch 8, so four patches and five queries.
pub fn tiny_model_config() -> AgentConfig {
    AgentConfig {
        seed: 404,
        screen_width: 16,
        screen_height: 16,
        patch: 8,
        d_i: 8,
        vision_heads: 2,
        d_q: 8,
        qformer_layers: 1,
        qformer_heads: 2,
        max_text_tokens: 16,
        d_l: 8,
        decoder_layers: 1,
        decoder_heads: 2,
        max_steps: 8,
        crops: 2,
        fusion_high: FusionStrategy::Afr,
        ..AgentConfig::default()
    }
}

fn model_block(seed: u64, fault: Option<Fault>) -> Result<BlockCheck> {
    let cfg = tiny_model_config();
    let mut model = AgentModel::new(AgentConfig {
        seed: cfg.seed.wrapping_add(seed),
        ..cfg
    })?;
    jitter(&mut model.store, seed.wrapping_add(405), 0.2);
    let (w, h) = model.cfg.input_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(406));
    let px = (0..w * h * 3).map(|_| rng.gen::<u8>()).collect();
    let screen = Screen::new(w, h, px)?;
    let gold = Action::Click { x: 0.31, y: 0.77 };
    let sample = StepSample {
        episode: 0,
        step: 0,
        subset: "click",
        task: "click the red button",
        screen: &screen,
        history: ActionHistory::from_actions(&[Action::PressBack], 4),
        gold: &gold,
        rect: None,
    };
    let coords = sampled_coords(&model.store, MODEL_SAMPLES, seed.wrapping_add(407));
    let mut trainer = Trainer::new(&model);
    trainer.fault = fault;
    let mut analytic = Vec::new();
    trainer.accumulate(&model, &[&sample])?;
    for &(id, i) in &coords {
        analytic.push(trainer.grads.get(id)[i]);
    }
    let mut numeric = Vec::new();
    for &(id, i) in &coords {
        let orig = model.store.get(id).data()[i];
        model.store.get_mut(id).data_mut()[i] = orig + FD_STEP;
        let plus = trainer.accumulate(&model, &[&sample])?;
        model.store.get_mut(id).data_mut()[i] = orig - FD_STEP;
        let minus = trainer.accumulate(&model, &[&sample])?;
        model.store.get_mut(id).data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * FD_STEP));
    }
    let (err, k) = max_rel_err(&analytic, &numeric);
    let worst = coords
        .get(k)
        .map_or_else(String::new, |&(id, i)| format!("{}[{i}]", model.store.name(id)));
    Ok(BlockCheck {
        name: "agent",
        max_rel_err: err,
        coordinates: coords.len(),
        worst,
    })
}

/// Runs every block; `fault` corrupts a backward rule to prove the suite can fail.
pub fn run_suite(fault: Option<Fault>) -> Result<Vec<BlockCheck>> {
    run_suite_seeded(0, fault)
}

/// [`run_suite`] with every input and jitter seed offset by `seed`.
pub fn run_suite_seeded(seed: u64, fault: Option<Fault>) -> Result<Vec<BlockCheck>> {
    Ok(vec![
        numerics_block(seed, fault)?,
        qformer_block(seed, fault)?,
        afr_block(seed, fault)?,
        model_block(seed, fault)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_block_passes() {
        for b in run_suite(None).unwrap() {
            eprintln!("{} {:e} over {}", b.name, b.max_rel_err, b.coordinates);
            assert!(b.passed(), "{}: {:e}", b.name, b.max_rel_err);
            assert!(b.coordinates > 0);
        }
    }

    #[test]
    fn corrupted_gelu_derivative_is_caught() {
        let r = run_suite(Some(Fault::GeluDerivative)).unwrap();
        assert!(r.iter().any(|b| !b.passed()));
        let numerics = r.iter().find(|b| b.name == "numerics").unwrap();
        assert!(!numerics.passed());
        assert_eq!(numerics.worst, "gelu");
    }

    #[test]
    fn verdict_does_not_depend_on_seed() {
        for seed in [1, 77] {
            assert!(run_suite_seeded(seed, None).unwrap().iter().all(BlockCheck::passed));
            assert!(!run_suite_seeded(seed, Some(Fault::GeluDerivative))
                .unwrap()
                .iter()
                .all(BlockCheck::passed));
        }
    }
}
