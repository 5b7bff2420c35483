//! Central finite-difference verification of tape gradients.

use super::tape::{Grads, ParamId, ParamSet, Tape, Var};
use crate::error::Result;

/// Worst disagreement found by [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares tape gradients against `(f(p+h) - f(p-h)) / 2h` for every element of `params`.
///
/// The relative error of one element is `|a - n| / max(|a|, |n|, floor)`; `floor`
/// keeps exactly-zero gradients from dividing by zero.
pub fn check_gradients<F>(params: &ParamSet<f64>, h: f64, floor: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamSet<f64>) -> Var,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, params);
    let mut grads = Grads::zeros_like(params);
    tape.backward(loss, &mut grads)?;

    let eval = |p: &ParamSet<f64>| {
        let mut t = Tape::new();
        let l = build(&mut t, p);
        t.value(l).get(0, 0)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = params.clone();
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        for i in 0..params.get(id).len() {
            let orig = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(&probe);
            probe.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(&probe);
            probe.get_mut(id).data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_error {
                report = GradCheckReport {
                    max_rel_error: rel,
                    worst_param: params.name(id).to_string(),
                    worst_index: i,
                    analytic,
                    numeric,
                    checked: report.checked,
                };
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn smooth_composition_passes() {
        let mut p = ParamSet::new();
        let a = p.add("a", Tensor::from_vec(2, 3, vec![0.3, -0.2, 0.5, 1.1, -0.7, 0.05]));
        let w = p.add("w", Tensor::from_vec(3, 2, vec![0.1, 0.4, -0.3, 0.2, 0.6, -0.5]));
        let b = p.add("b", Tensor::from_vec(1, 2, vec![0.01, -0.02]));
        let report = check_gradients(&p, 1e-5, 1e-8, |t, p| {
            let (av, wv, bv) = (t.param(p, a), t.param(p, w), t.param(p, b));
            let y = t.affine(av, wv, Some(bv));
            let s = t.sigmoid(y);
            let e = t.exp(s);
            let sp = t.softplus(e);
            let sn = t.sin(sp);
            let sq = t.mul(sn, sn);
            t.mean(sq)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        assert_eq!(report.checked, 14);
    }

    #[test]
    fn composite_gradients_match_differences() {
        let mut p = ParamSet::new();
        let rgb = p.add("rgb", Tensor::from_f64(4, 3, &[0.1, 0.9, 0.3, 0.5, 0.2, 0.8, 0.7, 0.7, 0.1, 0.4, 0.6, 0.2]));
        let sig = p.add("sigma", Tensor::from_f64(4, 1, &[0.5, 2.0, 0.1, 3.0]));
        let deltas = vec![0.3, 0.2, 0.4, 1.0];
        let report = check_gradients(&p, 1e-5, 1e-8, |t, p| {
            let (c, s) = (t.param(p, rgb), t.param(p, sig));
            let out = t.composite(c, s, deltas.clone(), 2);
            let target = t.constant(Tensor::from_f64(2, 3, &[0.2, 0.1, 0.5, 0.3, 0.3, 0.3]));
            let d = t.sub(out, target);
            let sq = t.mul(d, d);
            t.sum(sq)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
