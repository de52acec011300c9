use crate::{Bound, Float, Gradients, ParamStore};
use ndarray::ArrayD;
use std::collections::HashMap;

/// Adaptive-moment gradient descent.
#[derive(Clone, Debug)]
pub struct Adam<F: Float> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    t: i32,
    moments: HashMap<String, (ArrayD<F>, ArrayD<F>)>,
}

impl<F: Float> Adam<F> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr: F::of(lr), beta1: F::of(beta1), beta2: F::of(beta2), eps: F::of(1e-8), t: 0, moments: HashMap::new() }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Update every parameter of `store` that appears in `bound` and received
    /// a gradient and for which `keep(name)` holds.
    pub fn step_filtered(&mut self, store: &mut ParamStore<F>, bound: &Bound<F>, grads: &Gradients<F>, keep: impl Fn(&str) -> bool) {
        self.t += 1;
        let one = F::one();
        let bc1 = one - self.beta1.powi(self.t);
        let bc2 = one - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (name, value) in store.iter_mut() {
            if !keep(name) {
                continue;
            }
            let Some(var) = bound.var(name) else { continue };
            let Some(g) = grads.get(var) else { continue };
            let g = g.value();
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (ArrayD::zeros(value.raw_dim()), ArrayD::zeros(value.raw_dim())));
            ndarray::Zip::from(value).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
            });
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, bound: &Bound<F>, grads: &Gradients<F>) {
        self.step_filtered(store, bound, grads, |_| true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", ArrayD::from_elem(IxDyn(&[2]), 5.0));
        let mut opt = Adam::new(0.1, 0.9, 0.999);
        for _ in 0..500 {
            let b = store.bind();
            let x = b.var("x").unwrap();
            let loss = x.add_scalar(-1.0).square().sum();
            let g = loss.backward();
            opt.step(&mut store, &b, &g);
        }
        for &x in store.get("x").unwrap() {
            assert!((x - 1.0).abs() < 1e-2, "{x}");
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", ArrayD::from_elem(IxDyn(&[1]), 0.0));
        let mut opt = Adam::new(0.01, 0.9, 0.999);
        let b = store.bind();
        let g = b.var("x").unwrap().scale(3.0).sum().backward();
        opt.step(&mut store, &b, &g);
        assert!((store.get("x").unwrap()[[0]] + 0.01).abs() < 1e-9);
    }
}
