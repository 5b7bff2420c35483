use crate::error::{Error, Result};

const EPS: f64 = 1e-10;

/// One quadrature node along a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShadedSample {
    pub t: f64,
    pub color: [f64; 3],
    pub sigma: f64,
}

/// Composited result for one ray. `delta_mag` and `deform_mag` are the
/// weight-averaged residual and total deformation magnitudes.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RenderedPixel {
    pub color: [f64; 3],
    pub depth: f64,
    pub acc: f64,
    pub delta_mag: f64,
    pub deform_mag: f64,
}

/// Quadrature weights `w_i = T_i (1 - exp(-σ_i δ_i))` with the last interval
/// running to `far_cap`. `t` must be nondecreasing.
pub fn quadrature_weights(t: &[f64], sigma: &[f64], far_cap: f64) -> Vec<f64> {
    debug_assert_eq!(t.len(), sigma.len());
    let n = t.len();
    let mut w = Vec::with_capacity(n);
    let mut trans = 1.0;
    for i in 0..n {
        let next = if i + 1 < n { t[i + 1] } else { far_cap };
        let tau = sigma[i].max(0.0) * (next - t[i]).max(0.0);
        let alpha = -(-tau).exp_m1();
        w.push(trans * alpha);
        trans *= (-tau).exp();
    }
    w
}

/// Front-to-back compositing of samples over a black background.
pub fn volume_render(samples: &[ShadedSample], far_cap: f64) -> Result<RenderedPixel> {
    if samples.is_empty() {
        return Err(Error::param("no samples to composite"));
    }
    if samples.windows(2).any(|s| !(s[1].t > s[0].t)) {
        return Err(Error::param("sample depths must be strictly increasing"));
    }
    let last = samples[samples.len() - 1].t;
    if !(far_cap >= last) {
        return Err(Error::param(format!("far cap {far_cap} precedes last sample {last}")));
    }
    if samples.iter().any(|s| !(s.sigma >= 0.0) || !s.sigma.is_finite()) {
        return Err(Error::param("densities must be finite and nonnegative"));
    }
    let t: Vec<f64> = samples.iter().map(|s| s.t).collect();
    let sigma: Vec<f64> = samples.iter().map(|s| s.sigma).collect();
    let colors: Vec<[f64; 3]> = samples.iter().map(|s| s.color).collect();
    let zeros = vec![0.0; samples.len()];
    Ok(composite(&t, &sigma, &colors, &zeros, &zeros, far_cap))
}

/// Unchecked compositing including the deformation magnitudes; `t` may repeat.
pub(crate) fn composite(
    t: &[f64],
    sigma: &[f64],
    colors: &[[f64; 3]],
    delta_mag: &[f64],
    deform_mag: &[f64],
    far_cap: f64,
) -> RenderedPixel {
    let w = quadrature_weights(t, sigma, far_cap);
    let mut px = RenderedPixel::default();
    let mut depth = 0.0;
    let mut dm = 0.0;
    let mut fm = 0.0;
    for i in 0..w.len() {
        for k in 0..3 {
            px.color[k] += w[i] * colors[i][k];
        }
        px.acc += w[i];
        depth += w[i] * t[i];
        dm += w[i] * delta_mag[i];
        fm += w[i] * deform_mag[i];
    }
    px.acc = px.acc.min(1.0);
    let norm = px.acc.max(EPS);
    px.depth = depth / norm;
    px.delta_mag = dm / norm;
    px.deform_mag = fm / norm;
    px
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn homogeneous(n: usize, sigma: f64, color: [f64; 3]) -> Vec<ShadedSample> {
        (0..n).map(|i| ShadedSample { t: i as f64 / n as f64, color, sigma }).collect()
    }

    #[test]
    fn empty_space_is_black() {
        let px = volume_render(&homogeneous(16, 0.0, [1.0, 1.0, 1.0]), 1.0).unwrap();
        assert_eq!(px.color, [0.0; 3]);
        assert_eq!(px.acc, 0.0);
    }

    #[test]
    fn opaque_single_sample() {
        let s = [ShadedSample { t: 0.0, color: [0.2, 0.4, 0.9], sigma: 50.0 }];
        let px = volume_render(&s, 1.0).unwrap();
        for k in 0..3 {
            assert!((px.color[k] - s[0].color[k]).abs() < 1e-9);
        }
        assert!((px.acc - 1.0).abs() < 1e-9);
    }

    #[test]
    fn homogeneous_slab_matches_closed_form() {
        let c = [0.3, 0.6, 0.9];
        let px = volume_render(&homogeneous(128, 2.0, c), 1.0).unwrap();
        let exact = 1.0 - (-2.0f64).exp();
        assert!((px.acc - exact).abs() < 1e-3);
        for k in 0..3 {
            assert!((px.color[k] - c[k] * exact).abs() < 1e-3);
        }
    }

    #[test]
    fn non_increasing_depths_rejected() {
        let mut s = homogeneous(4, 1.0, [0.0; 3]);
        s[2].t = s[1].t;
        assert!(volume_render(&s, 1.0).is_err());
        assert!(volume_render(&homogeneous(4, 1.0, [0.0; 3]), 0.5).is_err());
    }

    fn linear_sigma_error(n: usize) -> f64 {
        // σ(t) = 4t on [0, 1]: optical depth 2t², total 2.
        let s: Vec<ShadedSample> =
            (0..n).map(|i| i as f64 / n as f64).map(|t| ShadedSample { t, color: [1.0; 3], sigma: 4.0 * t }).collect();
        (volume_render(&s, 1.0).unwrap().acc - (1.0 - (-2.0f64).exp())).abs()
    }

    #[test]
    fn quadrature_converges_monotonically() {
        let mut prev = f64::INFINITY;
        for n in [8, 16, 32, 64, 128, 256] {
            let hom = (volume_render(&homogeneous(n, 2.0, [1.0; 3]), 1.0).unwrap().acc - (1.0 - (-2.0f64).exp())).abs();
            // left-endpoint rule is exact for constant density
            assert!(hom < 1e-12);
            let err = linear_sigma_error(n);
            assert!(err < prev, "n={n}: {err} !< {prev}");
            prev = err;
        }
    }

    proptest! {
        #[test]
        fn weights_are_bounded(sig in proptest::collection::vec(0.0f64..1e3, 1..40), gaps in proptest::collection::vec(1e-6f64..0.5, 40)) {
            let mut t = 0.0;
            let s: Vec<ShadedSample> = sig.iter().zip(&gaps).map(|(&sigma, &g)| { t += g; ShadedSample { t, color: [1.0; 3], sigma } }).collect();
            let tt: Vec<f64> = s.iter().map(|s| s.t).collect();
            let w = quadrature_weights(&tt, &sig, t + 1.0);
            prop_assert!(w.iter().all(|&w| w >= 0.0));
            prop_assert!(w.iter().sum::<f64>() <= 1.0 + 1e-12);
            let px = volume_render(&s, t + 1.0).unwrap();
            prop_assert!((0.0..=1.0).contains(&px.acc));
            if px.acc > 0.0 {
                prop_assert!(px.depth >= s[0].t - 1e-9 && px.depth <= t + 1e-9);
            }
        }

        #[test]
        fn split_composite_is_associative(
            sig in proptest::collection::vec(0.0f64..20.0, 2..32),
            cols in proptest::collection::vec(0.0f64..1.0, 96),
            split_frac in 0.05f64..0.95,
        ) {
            let n = sig.len();
            let s: Vec<ShadedSample> = (0..n)
                .map(|i| ShadedSample { t: 1.0 + i as f64 * 0.05, color: [cols[3 * i], cols[3 * i + 1], cols[3 * i + 2]], sigma: sig[i] })
                .collect();
            let far = 1.0 + n as f64 * 0.05;
            let whole = volume_render(&s, far).unwrap();
            let k = ((n as f64 * split_frac) as usize).clamp(1, n - 1);
            let front = volume_render(&s[..k], s[k].t).unwrap();
            let back = volume_render(&s[k..], far).unwrap();
            let tau: f64 = (0..k).map(|i| s[i].sigma * (s[i + 1].t - s[i].t)).sum();
            let trans = (-tau).exp();
            for c in 0..3 {
                prop_assert!((whole.color[c] - (front.color[c] + trans * back.color[c])).abs() < 1e-9);
            }
            prop_assert!((whole.acc - (front.acc + trans * back.acc)).abs() < 1e-9);
        }
    }
}
