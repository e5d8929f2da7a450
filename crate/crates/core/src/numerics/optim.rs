use super::{Graph, ParamId, ParamStore};

/// Summed parameter gradients across the samples of a minibatch.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    grads: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            grads: store.iter().map(|(_, p)| vec![0.0; p.value().numel()]).collect(),
        }
    }

    /// Adds `weight * grad` for every parameter bound in `graph`.
    pub fn accumulate(&mut self, graph: &Graph<'_>, weight: f64) {
        for (id, g) in graph.param_grads() {
            for (d, s) in self.grads[id.index()].iter_mut().zip(g) {
                *d += weight * s;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.index()]
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value().numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &GradBuffer) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    /// Moment buffers and step count, for checkpointing.
    pub fn state(&self) -> (u64, &[Vec<f64>], &[Vec<f64>]) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> crate::Result<()> {
        let fits =
            |a: &[Vec<f64>], b: &[Vec<f64>]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len());
        if !fits(&m, &self.m) || !fits(&v, &self.v) {
            return Err(crate::Error::Format("optimizer state does not match parameters".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}
