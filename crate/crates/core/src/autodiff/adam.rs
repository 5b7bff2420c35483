use serde::{Deserialize, Serialize};

use super::tape::{Grads, ParamId, ParamSet};
use super::tensor::Real;

/// Exponential decay from `lr0` at step 0 to `lr1` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr0: f64,
    pub lr1: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self { lr0: lr, lr1: lr, total_steps: 1 }
    }

    pub fn at(&self, step: u64) -> f64 {
        if step == 0 || self.lr0 == self.lr1 {
            return self.lr0;
        }
        if step >= self.total_steps {
            return self.lr1;
        }
        let t = step as f64 / self.total_steps as f64;
        (self.lr0.ln() * (1.0 - t) + self.lr1.ln() * t).exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments for every tensor of one [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub schedule: LrSchedule,
    pub hyper: AdamHyper,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    /// Tensors updated lazily: rows with an all-zero gradient are skipped entirely.
    row_sparse: Vec<bool>,
}

impl OptimState {
    pub fn new<T: Real>(params: &ParamSet<T>, schedule: LrSchedule, hyper: AdamHyper) -> Self {
        let shapes: Vec<usize> = params.iter().map(|(_, _, t)| t.len()).collect();
        Self {
            step: 0,
            schedule,
            hyper,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            row_sparse: vec![false; shapes.len()],
        }
    }

    /// Per-row lazy updates for `id`, so embedding rows absent from a batch keep
    /// their values and moments.
    pub fn set_row_sparse(&mut self, id: ParamId) {
        self.row_sparse[id.0] = true;
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.at(self.step)
    }

    /// Bias-corrected Adam update at the scheduled learning rate; returns the rate used.
    pub fn step<T: Real>(&mut self, params: &mut ParamSet<T>, grads: &Grads<T>) -> f64 {
        let lr = self.current_lr();
        self.step += 1;
        let AdamHyper { beta1, beta2, eps } = self.hyper;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let g = grads.get(id);
            let (m, v) = (&mut self.first[id.0], &mut self.second[id.0]);
            assert_eq!(m.len(), g.len(), "optimizer state does not match parameter shape");
            let cols = g.cols().max(1);
            let sparse = self.row_sparse[id.0];
            let p = params.get_mut(id);
            for (i, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                if sparse && g.row(i / cols).iter().all(|v| *v == T::zero()) {
                    continue;
                }
                let gv = gv.as_f64();
                m[i] = beta1 * m[i] + (1.0 - beta1) * gv;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gv * gv;
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                if update != 0.0 {
                    *pv = T::from_f64_lossy(pv.as_f64() - update);
                }
            }
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = ParamSet::<f32>::new();
        p.add("w", Tensor::from_vec(1, 3, vec![0.5, -1.0, 2.0]));
        let before = p.clone();
        let g = Grads::zeros_like(&p);
        let mut st = OptimState::new(&p, LrSchedule::constant(0.1), AdamHyper::default());
        st.step(&mut p, &g);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = ParamSet::<f64>::new();
        let id = p.add("w", Tensor::scalar(0.0));
        let mut g = Grads::zeros_like(&p);
        g.get_mut(id).data_mut()[0] = 1.0;
        let mut st = OptimState::new(&p, LrSchedule::constant(0.1), AdamHyper::default());
        st.step(&mut p, &g);
        // m̂ = 1, v̂ = 1 after bias correction
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.get(id).get(0, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn sparse_rows_without_gradient_are_untouched() {
        let mut p = ParamSet::<f32>::new();
        let id = p.add("codes", Tensor::from_vec(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let mut st = OptimState::new(&p, LrSchedule::constant(0.01), AdamHyper::default());
        st.set_row_sparse(id);
        let mut g = Grads::zeros_like(&p);
        g.get_mut(id).row_mut(1).copy_from_slice(&[1.0, -1.0]);
        st.step(&mut p, &g);
        let after_first = p.get(id).row(1).to_vec();
        g.zero();
        g.get_mut(id).row_mut(2).copy_from_slice(&[1.0, 0.0]);
        st.step(&mut p, &g);
        let t = p.get(id);
        assert_eq!(t.row(0), &[0.1, 0.2]);
        // row 1 keeps its first-step value despite nonzero momentum
        assert_eq!(t.row(1), after_first.as_slice());
        assert_ne!(t.row(1), &[0.3, 0.4]);
        assert_ne!(t.row(2)[0], 0.5);
        assert_eq!(t.row(2)[1], 0.6);
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule { lr0: 5e-4, lr1: 5e-5, total_steps: 20_000 };
        assert!((s.at(0) - 5e-4).abs() < 1e-12);
        assert!((s.at(20_000) - 5e-5).abs() < 1e-12);
        assert!((s.at(10_000) - (5e-4f64 * 5e-5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn vanishing_learning_rate_keeps_parameters() {
        let mut p = ParamSet::<f64>::new();
        let id = p.add("w", Tensor::from_vec(1, 2, vec![0.25, -0.75]));
        let before = p.clone();
        let mut g = Grads::zeros_like(&p);
        g.get_mut(id).data_mut().copy_from_slice(&[3.0, -2.0]);
        let mut st = OptimState::new(&p, LrSchedule::constant(1e-300), AdamHyper::default());
        st.step(&mut p, &g);
        for (a, b) in p.get(id).data().iter().zip(before.get(id).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
