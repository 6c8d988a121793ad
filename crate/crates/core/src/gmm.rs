//! Two-component 1-D Gaussian mixture over per-sample losses.
//!
//! Losses are min-max normalized to `[0, 1]`, EM starts from the 10th/90th
//! percentiles, and the component with the lower mean is the clean one.

use std::f64::consts::PI;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GmmFit {
    pub alpha: [f64; 2],
    pub mu: [f64; 2],
    pub var: [f64; 2],
    pub norm_lo: f64,
    pub norm_hi: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub clean_component: usize,
    /// Log-likelihood at initialization followed by one entry per EM iteration.
    pub ll_trace: Vec<f64>,
}

impl GmmFit {
    pub fn normalize(&self, loss: f64) -> f64 {
        ((loss - self.norm_lo) / (self.norm_hi - self.norm_lo)).clamp(0.0, 1.0)
    }

    /// Component means mapped back to the raw loss scale.
    pub fn raw_means(&self) -> [f64; 2] {
        self.mu.map(|m| self.norm_lo + m * (self.norm_hi - self.norm_lo))
    }

    fn log_weighted(&self, z: f64) -> [f64; 2] {
        [0, 1].map(|k| self.alpha[k].ln() + log_normal_pdf(z, self.mu[k], self.var[k]))
    }

    /// Posterior responsibility of each component for a normalized value.
    pub fn component_posteriors(&self, z: f64) -> [f64; 2] {
        let lw = self.log_weighted(z);
        let lse = log_sum_exp2(lw[0], lw[1]);
        lw.map(|v| (v - lse).exp())
    }
}

fn log_normal_pdf(z: f64, mu: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (z - mu) * (z - mu) / var)
}

fn log_sum_exp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn log_likelihood(fit: &GmmFit, z: &[f64]) -> f64 {
    z.iter()
        .map(|&x| {
            let lw = fit.log_weighted(x);
            log_sum_exp2(lw[0], lw[1])
        })
        .sum()
}

pub fn fit_gmm(losses: &[f64], max_iter: usize, tol: f64) -> Result<GmmFit> {
    if losses.len() < 4 {
        return Err(Error::TooFewSamples {
            needed: 4,
            got: losses.len(),
        });
    }
    if losses.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("non-finite loss".into()));
    }
    let lo = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 1e-12 {
        return Err(Error::DegenerateInput);
    }
    let z: Vec<f64> = losses.iter().map(|&l| (l - lo) / (hi - lo)).collect();
    let n = z.len() as f64;

    let mut sorted = z.clone();
    sorted.sort_by(f64::total_cmp);
    let mean = z.iter().sum::<f64>() / n;
    let overall_var = (z.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).max(VARIANCE_FLOOR);

    let mut fit = GmmFit {
        alpha: [0.5, 0.5],
        mu: [percentile(&sorted, 0.1), percentile(&sorted, 0.9)],
        var: [overall_var; 2],
        norm_lo: lo,
        norm_hi: hi,
        log_likelihood: 0.0,
        iterations: 0,
        clean_component: 0,
        ll_trace: Vec::new(),
    };
    let mut ll = log_likelihood(&fit, &z);
    fit.ll_trace.push(ll);

    let mut resp = vec![[0.0f64; 2]; z.len()];
    for iter in 1..=max_iter {
        for (r, &x) in resp.iter_mut().zip(&z) {
            *r = fit.component_posteriors(x);
        }
        for k in 0..2 {
            let nk: f64 = resp.iter().map(|r| r[k]).sum();
            fit.alpha[k] = nk / n;
            if nk > f64::MIN_POSITIVE {
                let mu = resp.iter().zip(&z).map(|(r, x)| r[k] * x).sum::<f64>() / nk;
                let var = resp
                    .iter()
                    .zip(&z)
                    .map(|(r, x)| r[k] * (x - mu) * (x - mu))
                    .sum::<f64>()
                    / nk;
                fit.mu[k] = mu;
                fit.var[k] = var.max(VARIANCE_FLOOR);
            }
        }
        let total = fit.alpha[0] + fit.alpha[1];
        fit.alpha = fit.alpha.map(|a| a / total);

        let next = log_likelihood(&fit, &z);
        fit.ll_trace.push(next);
        fit.iterations = iter;
        let gain = next - ll;
        ll = next;
        if gain < tol {
            break;
        }
    }
    fit.log_likelihood = ll;
    fit.clean_component = if fit.mu[0] <= fit.mu[1] { 0 } else { 1 };
    Ok(fit)
}

/// Posterior of the clean (lower-mean) component for each raw loss.
pub fn clean_posterior(fit: &GmmFit, losses: &[f64]) -> Vec<f64> {
    losses
        .iter()
        .map(|&l| fit.component_posteriors(fit.normalize(l))[fit.clean_component])
        .collect()
}

/// Indices with posterior at or above `tau`, ascending.
pub fn select_clean(p: &[f64], tau: f64) -> Result<Vec<usize>> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidConfig(format!("tau {tau} outside (0, 1]")));
    }
    let selected: Vec<usize> = (0..p.len()).filter(|&i| p[i] >= tau).collect();
    if selected.is_empty() {
        return Err(Error::EmptyCleanSet { tau });
    }
    Ok(selected)
}

/// CSV with columns index, raw_loss, normalized_loss, posterior, selected.
pub fn write_diagnostics(path: &Path, fit: &GmmFit, losses: &[f64], posteriors: &[f64], tau: f64) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["index", "raw_loss", "normalized_loss", "posterior", "selected"])?;
    for (i, (&l, &p)) in losses.iter().zip(posteriors).enumerate() {
        w.write_record([
            i.to_string(),
            l.to_string(),
            fit.normalize(l).to_string(),
            p.to_string(),
            u8::from(p >= tau).to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    crate::codec::write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;
    use rand_distr::{Normal, Uniform};

    pub(crate) fn planted(seed: u64) -> Vec<f64> {
        let mut r = rng::seeded(seed);
        let a = Normal::new(0.1, 0.01).unwrap();
        let b = Normal::new(0.7, 0.01).unwrap();
        let mut v: Vec<f64> = (0..500).map(|_| r.sample(a)).collect();
        v.extend((0..500).map(|_| r.sample(b)));
        v
    }

    #[test]
    fn recovers_planted_mixture() {
        let fit = fit_gmm(&planted(0), DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        let means = fit.raw_means();
        let c = fit.clean_component;
        assert!((means[c] - 0.1).abs() < 0.02, "{means:?}");
        assert!((means[1 - c] - 0.7).abs() < 0.02, "{means:?}");
        assert!((fit.alpha[0] - 0.5).abs() < 0.05);
        assert!((fit.alpha[0] + fit.alpha[1] - 1.0).abs() < 1e-9);
        assert!(fit.var.iter().all(|&v| v >= VARIANCE_FLOOR));

        let p = clean_posterior(&fit, &[means[c], means[1 - c]]);
        assert!(p[0] > 0.999 && p[1] < 0.001, "{p:?}");
    }

    #[test]
    fn degenerate_and_small_inputs() {
        assert!(matches!(fit_gmm(&[0.3; 10], 100, 1e-6), Err(Error::DegenerateInput)));
        assert!(matches!(
            fit_gmm(&[0.1, 0.2, 0.3], 100, 1e-6),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn log_likelihood_never_decreases() {
        let mut r = rng::seeded(99);
        for _ in 0..100 {
            let n = r.random_range(4..200);
            let split = r.random_range(0.05..0.95);
            let m2 = r.random_range(0.2..3.0);
            let s = r.random_range(0.01..0.5);
            let losses: Vec<f64> = (0..n)
                .map(|_| {
                    let centre = if r.random::<f64>() < split { 0.0 } else { m2 };
                    centre + s * r.sample::<f64, _>(rand_distr::StandardNormal)
                })
                .collect();
            let fit = fit_gmm(&losses, 100, 1e-6).unwrap();
            for w in fit.ll_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "{:?}", fit.ll_trace);
            }
        }
    }

    #[test]
    fn symmetric_midpoint_posterior() {
        let fit = GmmFit {
            alpha: [0.5, 0.5],
            mu: [0.2, 0.8],
            var: [0.01, 0.01],
            norm_lo: 0.0,
            norm_hi: 1.0,
            log_likelihood: 0.0,
            iterations: 0,
            clean_component: 0,
            ll_trace: vec![],
        };
        let p = clean_posterior(&fit, &[0.5]);
        assert!((p[0] - 0.5).abs() < 1e-12);
        // out-of-range losses clamp instead of failing
        let p = clean_posterior(&fit, &[-4.0, 7.0]);
        assert!(p[0] > 0.99 && p[1] < 0.01);
    }

    #[test]
    fn threshold_selection() {
        assert_eq!(select_clean(&[0.995, 0.5, 1.0], 0.99).unwrap(), vec![0, 2]);
        assert!(matches!(
            select_clean(&[0.995, 0.5], 1.0),
            Err(Error::EmptyCleanSet { .. })
        ));
        assert!(select_clean(&[0.5], 0.0).is_err());
    }

    #[test]
    fn posteriors_complete_and_deterministic() {
        let mut r = rng::seeded(3);
        let u = Uniform::new(0.0, 5.0).unwrap();
        let losses: Vec<f64> = (0..300).map(|_| r.sample(u)).collect();
        let a = fit_gmm(&losses, 100, 1e-6).unwrap();
        assert_eq!(a, fit_gmm(&losses, 100, 1e-6).unwrap());
        for &l in &losses {
            let p = a.component_posteriors(a.normalize(l));
            assert!((p[0] + p[1] - 1.0).abs() < 1e-9);
        }
    }
}
