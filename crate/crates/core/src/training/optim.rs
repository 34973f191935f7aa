use ndarray::Array2;

use crate::autograd::{Gradients, ParamId, ParamStore};

/// Adam over a fixed set of trainable parameters. Parameters outside the
/// set are never touched, whatever gradients arrive for them.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    trainable: Vec<ParamId>,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, trainable: Vec<ParamId>, learning_rate: f64) -> Self {
        let zeros = |id: &ParamId| Array2::zeros(store.get(*id).dim());
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: trainable.iter().map(zeros).collect(),
            v: trainable.iter().map(zeros).collect(),
            trainable,
            t: 0,
        }
    }

    pub fn trainable(&self) -> &[ParamId] {
        &self.trainable
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, &id) in self.trainable.iter().enumerate() {
            let Some(g) = grads.get(id) else { continue };
            let (b1, b2) = (self.beta1, self.beta2);
            self.m[k].zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            self.v[k].zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let (lr, eps) = (self.learning_rate, self.eps);
            let p = store.get_mut(id);
            ndarray::Zip::from(p)
                .and(&self.m[k])
                .and(&self.v[k])
                .for_each(|p, &m, &v| *p -= lr * (m / c1) / ((v / c2).sqrt() + eps));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        let mut store = ParamStore::new();
        let a = store.add("a", Array2::from_elem((1, 2), 1.0));
        let b = store.add("b", Array2::from_elem((1, 1), 5.0));
        let grads = {
            let mut g = Graph::new(&store);
            let (va, vb) = (g.param(a), g.param(b));
            let sa = g.sum_all(va);
            let sb = g.sum_all(vb);
            let neg = g.scale(sb, -3.0);
            let l = g.add(sa, neg);
            g.backward(l)
        };
        let mut opt = Adam::new(&store, vec![a], 0.1);
        opt.step(&mut store, &grads);
        // Bias-corrected first step is lr · sign(g) up to eps.
        for v in store.get(a) {
            assert!((v - 0.9).abs() < 1e-6);
        }
        assert_eq!(store.get(b)[[0, 0]], 5.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", Array2::from_shape_vec((1, 3), vec![3.0, -2.0, 0.5]).unwrap());
        let mut opt = Adam::new(&store, vec![x], 0.05);
        for _ in 0..2000 {
            let grads = {
                let mut g = Graph::new(&store);
                let v = g.param(x);
                let sq = g.mul(v, v);
                let l = g.sum_all(sq);
                g.backward(l)
            };
            opt.step(&mut store, &grads);
        }
        assert!(store.get(x).iter().all(|v| v.abs() < 1e-2));
    }
}
