//! Dense f64 tensors, tape autodiff, finite-difference checks and Adam.

mod graph;
pub(crate) mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{AttnMask, Fault, Graph, MacCounter, NodeId, MASK_PENALTY};
pub use kernels::{gelu_derivative, gelu_scalar, GELU_CUBIC, GELU_SQRT_2_OVER_PI};
pub use optim::{Adam, GradBuffer};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of a scalar function:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        *g = (plus - minus) / (2.0 * h);
    }
    Tensor::from_parts(x.shape().to_vec(), grad)
}

/// `|a - b| / max(1e-8, |a|, |b|)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Largest coordinate-wise `rel_err` and where it occurs.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> (f64, usize) {
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(i, (x, y))| (rel_err(*x, *y), i))
        .fold((0.0, 0), |acc, cur| if cur.0 > acc.0 { cur } else { acc })
}

/// Compares backward gradients against central differences for every input of
/// `build`, which must map leaf nodes to a scalar. Returns the largest
/// coordinate-wise relative error over all inputs.
pub fn check_gradients(
    build: impl Fn(&mut Graph<'_>, &[NodeId]) -> crate::Result<NodeId>,
    inputs: &[Tensor],
    h: f64,
) -> crate::Result<f64> {
    check_gradients_with(build, inputs, h, None)
}

/// [`check_gradients`] with an optional corrupted backward rule.
pub fn check_gradients_with(
    build: impl Fn(&mut Graph<'_>, &[NodeId]) -> crate::Result<NodeId>,
    inputs: &[Tensor],
    h: f64,
    fault: Option<Fault>,
) -> crate::Result<f64> {
    let mut g = Graph::new();
    g.set_fault(fault);
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = g.grad(ids[k]).expect("leaf gradient").to_vec();
        let numeric = finite_diff_grad(
            |probe| {
                let mut g = Graph::new();
                let ids: Vec<NodeId> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.constant(if j == k { probe.clone() } else { t.clone() }))
                    .collect();
                let out = build(&mut g, &ids).expect("rebuild for finite differences");
                g.value(out).item()
            },
            input,
            h,
        );
        worst = worst.max(max_rel_err(&analytic, numeric.data()).0);
    }
    Ok(worst)
}
