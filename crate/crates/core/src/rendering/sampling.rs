use rand::Rng;

use crate::error::{Error, Result};

/// `n` increasing depths in `[near, far]`, one per equal-width bin: the bin
/// midpoint, or a uniform draw inside the bin when `jitter` is set.
pub fn stratified_samples(n: usize, near: f64, far: f64, jitter: bool, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::param("need at least one sample"));
    }
    if !(near.is_finite() && far.is_finite() && near < far) {
        return Err(Error::param(format!("invalid sampling range [{near}, {far}]")));
    }
    let bin = (far - near) / n as f64;
    Ok((0..n)
        .map(|i| {
            let u = if jitter { rng.gen::<f64>() } else { 0.5 };
            near + (i as f64 + u) * bin
        })
        .collect())
}

/// Draws `n` sorted depths from the piecewise-constant density with
/// `weights[i]` on `[edges[i], edges[i+1]]` by inverting its CDF. Without
/// `jitter` the CDF is probed at `(i + 0.5) / n`.
pub fn importance_samples(edges: &[f64], weights: &[f64], n: usize, jitter: bool, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if edges.len() != weights.len() + 1 || weights.is_empty() {
        return Err(Error::param("need one more edge than weights"));
    }
    if edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::param("bin edges must be strictly increasing"));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::param("weights must be finite and nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::param("weights are all zero"));
    }
    let mut cdf = Vec::with_capacity(weights.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for w in weights {
        acc += w / total;
        cdf.push(acc);
    }
    let mut us: Vec<f64> = if jitter {
        (0..n).map(|_| rng.gen::<f64>()).collect()
    } else {
        (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect()
    };
    us.sort_by(f64::total_cmp);
    let last = weights.len() - 1;
    let mut bin = 0;
    Ok(us
        .into_iter()
        .map(|u| {
            // monotone sweep; skip zero-mass bins
            while bin < last && (cdf[bin + 1] <= u || weights[bin] == 0.0) {
                bin += 1;
            }
            while weights[bin] == 0.0 && bin > 0 {
                bin -= 1;
            }
            let mass = cdf[bin + 1] - cdf[bin];
            let frac = if mass > 0.0 { ((u - cdf[bin]) / mass).clamp(0.0, 1.0) } else { 0.5 };
            edges[bin] + frac * (edges[bin + 1] - edges[bin])
        })
        .collect())
}

/// Bin edges around sorted sample depths: midpoints plus the outer bounds.
pub fn edges_around(t: &[f64], near: f64, far: f64) -> Vec<f64> {
    let mut edges = Vec::with_capacity(t.len() + 1);
    edges.push(near);
    edges.extend(t.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    edges.push(far);
    edges
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(stratified_samples(1, 2.0, 4.0, false, &mut rng).unwrap(), vec![3.0]);
    }

    #[test]
    fn four_midpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(stratified_samples(4, 0.0, 1.0, false, &mut rng).unwrap(), vec![0.125, 0.375, 0.625, 0.875]);
    }

    #[test]
    fn jittered_samples_are_strictly_increasing_and_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let t = stratified_samples(64, 0.5, 7.5, true, &mut rng).unwrap();
            assert!(t.windows(2).all(|w| w[1] > w[0]));
            assert!(t[0] >= 0.5 && t[63] <= 7.5);
        }
    }

    #[test]
    fn jitter_is_uniform_within_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (bins, rays, cells) = (8, 12_500, 10);
        let mut hist = vec![0usize; cells];
        for _ in 0..rays {
            for (i, t) in stratified_samples(bins, 0.0, 2.0, true, &mut rng).unwrap().into_iter().enumerate() {
                let frac = t / 0.25 - i as f64;
                assert!((0.0..1.0).contains(&frac));
                hist[(frac * cells as f64) as usize] += 1;
            }
        }
        let expected = (bins * rays) as f64 / cells as f64;
        let chi2: f64 = hist.iter().map(|&h| (h as f64 - expected).powi(2) / expected).sum();
        // 0.999 quantile of chi-squared with 9 degrees of freedom
        assert!(chi2 < 27.877, "chi2 = {chi2}");
    }

    #[test]
    fn invalid_inputs_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(stratified_samples(0, 0.0, 1.0, false, &mut rng).is_err());
        assert!(stratified_samples(3, 1.0, 1.0, false, &mut rng).is_err());
        assert!(importance_samples(&[0.0, 1.0], &[0.0], 4, false, &mut rng).is_err());
        assert!(importance_samples(&[0.0, 1.0, 2.0], &[1.0], 4, false, &mut rng).is_err());
    }

    #[test]
    fn all_mass_in_one_bin() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let edges = [0.0, 1.0, 2.0, 3.0, 4.0];
        let t = importance_samples(&edges, &[0.0, 0.0, 5.0, 0.0], 200, true, &mut rng).unwrap();
        assert!(t.iter().all(|&v| (2.0..=3.0).contains(&v)));
        assert!(t.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn uniform_weights_match_stratified() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let edges: Vec<f64> = (0..=8).map(|i| i as f64 / 8.0).collect();
        let t = importance_samples(&edges, &[1.0; 8], 4, false, &mut rng).unwrap();
        let s = stratified_samples(4, 0.0, 1.0, false, &mut rng).unwrap();
        for (a, b) in t.iter().zip(&s) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_to_three_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let t = importance_samples(&[0.0, 0.5, 1.0], &[1.0, 3.0], n, true, &mut rng).unwrap();
        let low = t.iter().filter(|&&v| v < 0.5).count() as f64 / n as f64;
        // analytic CDF at the bin boundary is 1/4
        assert!((low - 0.25).abs() < 0.01, "fraction below 0.5 = {low}");
    }
}
