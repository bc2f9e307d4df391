//! One-dimensional Gaussian mixtures fitted by EM.
//!
//! Samples are collapsed to (value, multiplicity) pairs before fitting, so a
//! 16-bit raster of any size costs at most 65536 points per EM sweep and the
//! fit does not depend on sample order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug)]
pub struct GmmConfig {
    pub n_components: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    /// Extra seeded k-means++ restarts on top of the quantile start.
    pub restarts: usize,
}

impl GmmConfig {
    pub fn new(n_components: usize, seed: u64) -> Self {
        Self {
            n_components,
            seed,
            max_iter: 200,
            tol: 1e-6,
            restarts: 0,
        }
    }
}

/// Fitted mixture, components sorted by ascending mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Total log-likelihood after every E-step, starting from the initial guess.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

impl GmmModel {
    pub fn n_components(&self) -> usize {
        self.means.len()
    }

    fn log_weighted_density(&self, k: usize, x: f64) -> f64 {
        let v = self.variances[k];
        let d = x - self.means[k];
        self.weights[k].ln() - 0.5 * (LN_2PI + v.ln()) - d * d / (2.0 * v)
    }

    /// Points between consecutive means where the weighted densities cross.
    /// Non-decreasing; one fewer than the number of components.
    pub fn boundaries(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.means.len().saturating_sub(1));
        for k in 0..self.means.len().saturating_sub(1) {
            let (lo, hi) = (self.means[k], self.means[k + 1]);
            let g = |x: f64| self.log_weighted_density(k + 1, x) - self.log_weighted_density(k, x);
            let b = if hi <= lo || g(lo) >= 0.0 {
                lo
            } else if g(hi) <= 0.0 {
                hi
            } else {
                let (mut a, mut z) = (lo, hi);
                for _ in 0..200 {
                    let mid = 0.5 * (a + z);
                    if g(mid) > 0.0 {
                        z = mid;
                    } else {
                        a = mid;
                    }
                    if z - a <= 1e-12 * (1.0 + z.abs()) {
                        break;
                    }
                }
                0.5 * (a + z)
            };
            let prev = out.last().copied().unwrap_or(f64::NEG_INFINITY);
            out.push(b.max(prev));
        }
        out
    }

    /// Index of the component (by ascending mean) whose interval holds `x`.
    pub fn classify(&self, x: f64) -> usize {
        self.boundaries().iter().filter(|&&b| x > b).count()
    }
}

/// Fits a mixture to raw samples.
pub fn gmm_fit_1d(samples: &[f64], n_components: usize, seed: u64) -> Result<GmmModel> {
    gmm_fit_with(samples, &GmmConfig::new(n_components, seed))
}

pub fn gmm_fit_with(samples: &[f64], cfg: &GmmConfig) -> Result<GmmModel> {
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gmm samples"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut values = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for v in sorted {
        if values.last() == Some(&v) {
            *weights.last_mut().unwrap() += 1.0;
        } else {
            values.push(v);
            weights.push(1.0);
        }
    }
    gmm_fit_weighted(&values, &weights, cfg)
}

/// Fits a mixture to 16-bit samples through their histogram.
pub fn gmm_fit_u16(samples: &[u16], cfg: &GmmConfig) -> Result<GmmModel> {
    let (values, weights) = histogram_u16(samples);
    gmm_fit_weighted(&values, &weights, cfg)
}

pub fn histogram_u16(samples: &[u16]) -> (Vec<f64>, Vec<f64>) {
    let mut hist = vec![0u64; 1 << 16];
    for &s in samples {
        hist[s as usize] += 1;
    }
    let mut values = Vec::new();
    let mut weights = Vec::new();
    for (v, &n) in hist.iter().enumerate() {
        if n > 0 {
            values.push(v as f64);
            weights.push(n as f64);
        }
    }
    (values, weights)
}

/// EM over distinct `values` with multiplicities `weights` (ascending values
/// expected but not required).
pub fn gmm_fit_weighted(values: &[f64], weights: &[f64], cfg: &GmmConfig) -> Result<GmmModel> {
    let k = cfg.n_components;
    if k == 0 {
        return Err(Error::param("n_components", "must be at least 1"));
    }
    if values.len() != weights.len() {
        return Err(Error::param("weights", "length differs from values"));
    }
    if values.iter().chain(weights).any(|v| !v.is_finite()) || weights.iter().any(|&w| w < 0.0) {
        return Err(Error::NonFinite("gmm samples"));
    }
    let total: f64 = weights.iter().sum();
    if total < 10.0 * k as f64 {
        return Err(Error::Degenerate(format!(
            "{total} samples is fewer than 10 per component for {k} components"
        )));
    }
    let mean = values.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() / total;
    let var = values
        .iter()
        .zip(weights)
        .map(|(x, w)| w * (x - mean) * (x - mean))
        .sum::<f64>()
        / total;
    if k > 1 && var == 0.0 {
        return Err(Error::Degenerate("all samples are equal".into()));
    }
    let floor = (1e-6 * var).max(1e-9);

    if k == 1 {
        let v = var.max(floor);
        let ll = values
            .iter()
            .zip(weights)
            .map(|(x, w)| w * (-0.5 * (LN_2PI + v.ln()) - (x - mean) * (x - mean) / (2.0 * v)))
            .sum();
        return Ok(GmmModel {
            weights: vec![1.0],
            means: vec![mean],
            variances: vec![v],
            log_likelihood: ll,
            iterations: 0,
            converged: true,
            trace: vec![ll],
        });
    }

    let mut best = run_em(values, weights, total, quantile_init(values, weights, k), floor, cfg);
    // a heavy low mode can pull every quantile start into one cluster
    let spread = run_em(values, weights, total, range_init(values, weights, k), floor, cfg);
    if spread.log_likelihood > best.log_likelihood {
        best = spread;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.restarts {
        let init = kmeanspp_init(values, weights, k, &mut rng);
        let m = run_em(values, weights, total, init, floor, cfg);
        if m.log_likelihood > best.log_likelihood {
            best = m;
        }
    }
    Ok(best)
}

fn weighted_quantile(values: &[f64], weights: &[f64], total: f64, q: f64) -> f64 {
    let target = q * total;
    let mut acc = 0.0;
    for (v, w) in values.iter().zip(weights) {
        acc += w;
        if acc >= target {
            return *v;
        }
    }
    *values.last().unwrap()
}

/// Quantile-spread means refined by a few weighted Lloyd sweeps; uniform
/// weights; pooled within-cluster variance.
fn quantile_init(values: &[f64], weights: &[f64], k: usize) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let vs: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let ws: Vec<f64> = order.iter().map(|&i| weights[i]).collect();
    let total: f64 = ws.iter().sum();

    let means: Vec<f64> = (0..k)
        .map(|j| weighted_quantile(&vs, &ws, total, (j as f64 + 0.5) / k as f64))
        .collect();
    let mut distinct = means.clone();
    distinct.dedup();
    if distinct.len() < k {
        // mass piled on a few values: spread over the distinct values instead
        let n = vs.len();
        let spread = (0..k)
            .map(|j| vs[(((j as f64 + 0.5) / k as f64) * n as f64) as usize % n])
            .collect();
        return lloyd(&vs, &ws, spread);
    }
    lloyd(&vs, &ws, means)
}

/// Means evenly spaced over the value range, then the same Lloyd sweeps.
fn range_init(values: &[f64], weights: &[f64], k: usize) -> (Vec<f64>, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let means = (0..k).map(|j| lo + (hi - lo) * (j as f64 + 0.5) / k as f64).collect();
    lloyd(values, weights, means)
}

fn lloyd(values: &[f64], weights: &[f64], mut means: Vec<f64>) -> (Vec<f64>, f64) {
    let k = means.len();
    let total: f64 = weights.iter().sum();
    for _ in 0..10 {
        let mut sum = vec![0.0; k];
        let mut cnt = vec![0.0; k];
        for (x, w) in values.iter().zip(weights) {
            let j = nearest(&means, *x);
            sum[j] += w * x;
            cnt[j] += w;
        }
        for j in 0..k {
            if cnt[j] > 0.0 {
                means[j] = sum[j] / cnt[j];
            }
        }
    }
    let pooled = values
        .iter()
        .zip(weights)
        .map(|(x, w)| {
            let d = x - means[nearest(&means, *x)];
            w * d * d
        })
        .sum::<f64>()
        / total;
    (means, pooled)
}

fn nearest(means: &[f64], x: f64) -> usize {
    let mut best = 0;
    for j in 1..means.len() {
        if (x - means[j]).abs() < (x - means[best]).abs() {
            best = j;
        }
    }
    best
}

fn kmeanspp_init(values: &[f64], weights: &[f64], k: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, f64) {
    let pick = |rng: &mut ChaCha8Rng, scores: &[f64]| {
        let total: f64 = scores.iter().sum();
        if total <= 0.0 {
            return rng.random_range(0..scores.len());
        }
        let mut t = rng.random::<f64>() * total;
        for (i, s) in scores.iter().enumerate() {
            t -= s;
            if t <= 0.0 {
                return i;
            }
        }
        scores.len() - 1
    };
    let mut means = vec![values[pick(rng, weights)]];
    while means.len() < k {
        let scores: Vec<f64> = values
            .iter()
            .zip(weights)
            .map(|(x, w)| {
                let d = x - means[nearest(&means, *x)];
                w * d * d
            })
            .collect();
        means.push(values[pick(rng, &scores)]);
    }
    let total: f64 = weights.iter().sum();
    let pooled = values
        .iter()
        .zip(weights)
        .map(|(x, w)| {
            let d = x - means[nearest(&means, *x)];
            w * d * d
        })
        .sum::<f64>()
        / total;
    (means, pooled)
}

fn run_em(
    values: &[f64],
    weights: &[f64],
    total: f64,
    (init_means, pooled): (Vec<f64>, f64),
    floor: f64,
    cfg: &GmmConfig,
) -> GmmModel {
    let k = init_means.len();
    let mut means = init_means;
    let mut vars = vec![pooled.max(floor); k];
    let mut mix = vec![1.0 / k as f64; k];
    let n = values.len();
    let mut resp = vec![0.0; n * k];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut lp = vec![0.0; k];

    loop {
        // E-step
        let consts: Vec<f64> = (0..k).map(|j| mix[j].ln() - 0.5 * (LN_2PI + vars[j].ln())).collect();
        let mut ll = 0.0;
        for i in 0..n {
            let x = values[i];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..k {
                let d = x - means[j];
                lp[j] = consts[j] - d * d / (2.0 * vars[j]);
                mx = mx.max(lp[j]);
            }
            let s: f64 = lp.iter().map(|l| (l - mx).exp()).sum();
            let lse = mx + s.ln();
            ll += weights[i] * lse;
            for j in 0..k {
                resp[i * k + j] = (lp[j] - lse).exp();
            }
        }
        if let Some(&prev) = trace.last() {
            if (ll - prev) / total < cfg.tol {
                converged = true;
            }
        }
        trace.push(ll);
        if converged || iterations >= cfg.max_iter {
            break;
        }
        iterations += 1;

        // M-step
        for j in 0..k {
            let mut nk = 0.0;
            let mut sx = 0.0;
            for i in 0..n {
                let r = weights[i] * resp[i * k + j];
                nk += r;
                sx += r * values[i];
            }
            mix[j] = nk / total;
            if nk <= 1e-12 * total {
                continue;
            }
            let mu = sx / nk;
            let mut sv = 0.0;
            for i in 0..n {
                let d = values[i] - mu;
                sv += weights[i] * resp[i * k + j] * d * d;
            }
            means[j] = mu;
            vars[j] = (sv / nk).max(floor);
        }
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| means[a].total_cmp(&means[b]));
    GmmModel {
        weights: order.iter().map(|&j| mix[j]).collect(),
        means: order.iter().map(|&j| means[j]).collect(),
        variances: order.iter().map(|&j| vars[j]).collect(),
        log_likelihood: *trace.last().unwrap(),
        iterations,
        converged,
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn two_clusters(seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Normal::new(0.0, 0.1).unwrap();
        let b = Normal::new(10.0, 0.1).unwrap();
        let mut v: Vec<f64> = (0..1000).map(|_| a.sample(&mut rng)).collect();
        v.extend((0..1000).map(|_| b.sample(&mut rng)));
        v
    }

    #[test]
    fn recovers_two_means() {
        let m = gmm_fit_1d(&two_clusters(1), 2, 0).unwrap();
        assert!(m.means[0].abs() < 0.05, "{:?}", m.means);
        assert!((m.means[1] - 10.0).abs() < 0.05, "{:?}", m.means);
        assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_component_is_closed_form() {
        let s: Vec<f64> = (0..50).map(|i| (i * i % 17) as f64).collect();
        let m = gmm_fit_1d(&s, 1, 0).unwrap();
        let mean = s.iter().sum::<f64>() / 50.0;
        let var = s.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 50.0;
        assert!((m.means[0] - mean).abs() < 1e-12);
        assert!((m.variances[0] - var).abs() < 1e-9);
    }

    #[test]
    fn permutation_invariant() {
        let s = two_clusters(3);
        let mut p = s.clone();
        p.reverse();
        p.swap(5, 1500);
        assert_eq!(gmm_fit_1d(&s, 2, 0).unwrap(), gmm_fit_1d(&p, 2, 0).unwrap());
    }

    #[test]
    fn constant_samples_error() {
        assert!(gmm_fit_1d(&[4.0; 100], 2, 0).is_err());
        assert!(gmm_fit_1d(&[1.0, 2.0], 1, 0).is_err());
    }

    #[test]
    fn likelihood_never_decreases() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..600)
                .map(|i| {
                    let c = [0.0, 3.0, 7.0][i % 3];
                    c + Normal::new(0.0, 1.5).unwrap().sample(&mut rng)
                })
                .collect();
            let m = gmm_fit_with(
                &s,
                &GmmConfig {
                    restarts: 2,
                    ..GmmConfig::new(3, seed)
                },
            )
            .unwrap();
            for w in m.trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0));
            }
        }
    }

    #[test]
    fn boundary_separates_exact_levels() {
        let mut s = vec![10u16; 800];
        s.extend(vec![200u16; 200]);
        let m = gmm_fit_u16(&s, &GmmConfig::new(2, 0)).unwrap();
        let b = m.boundaries()[0];
        assert!(b > 10.0 && b < 200.0, "{b}");
        assert_eq!(m.classify(10.0), 0);
        assert_eq!(m.classify(200.0), 1);
    }
}
