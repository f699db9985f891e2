//! Diagonal-covariance Gaussian mixture fitted by EM. The spatial part of a
//! pair descriptor is the posterior over mixture components of the pair's
//! six-dimensional configuration vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Components whose total responsibility mass falls below this are reseeded.
const EMPTY_COMPONENT_MASS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmConfig {
    pub max_iters: usize,
    /// Relative change of the mean log-likelihood that counts as converged.
    pub tol: f64,
    /// Lower bound applied to every variance after each M-step.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-6,
            floor: 1e-6,
            seed: 0,
        }
    }
}

/// Fitted mixture. Means and variances are stored row-major, one row per
/// component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    k: usize,
    dim: usize,
    means: Vec<f64>,
    variances: Vec<f64>,
    weights: Vec<f64>,
    seed: u64,
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Mean log-likelihood of the data before each M-step, plus the final one.
    pub log_likelihood: Vec<f64>,
    /// Trace indices at which a collapsed component was reseeded. EM
    /// monotonicity holds between consecutive reseeding points.
    pub reseeded_at: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

impl GmmModel {
    /// Builds a model from explicit parameters, validating the invariants.
    pub fn from_parts(
        dim: usize,
        means: Vec<f64>,
        variances: Vec<f64>,
        weights: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 || dim == 0 {
            return Err(Error::invalid("mixture needs at least one component and dimension"));
        }
        if means.len() != k * dim {
            return Err(Error::DimensionMismatch {
                expected: k * dim,
                found: means.len(),
            });
        }
        if variances.len() != k * dim {
            return Err(Error::DimensionMismatch {
                expected: k * dim,
                found: variances.len(),
            });
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("non-finite mixture mean"));
        }
        if variances.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("mixture variances must be finite and positive"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("mixture weights must be non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(Self {
            k,
            dim,
            means,
            variances,
            weights,
            seed,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, j: usize) -> &[f64] {
        &self.means[j * self.dim..(j + 1) * self.dim]
    }

    pub fn variance(&self, j: usize) -> &[f64] {
        &self.variances[j * self.dim..(j + 1) * self.dim]
    }

    pub fn means_flat(&self) -> &[f64] {
        &self.means
    }

    pub fn variances_flat(&self) -> &[f64] {
        &self.variances
    }

    /// `log w_j - 0.5 * sum_d log(2 pi var_jd)` for every component.
    fn log_norms(&self) -> Vec<f64> {
        (0..self.k)
            .map(|j| {
                let log_det: f64 = self.variance(j).iter().map(|v| LN_2PI + v.ln()).sum();
                self.weights[j].ln() - 0.5 * log_det
            })
            .collect()
    }

    /// Fills `out` with `log(w_j N(x; mean_j, var_j))` and returns the
    /// log-sum-exp over components.
    fn joint_log_densities(&self, x: &[f64], log_norms: &[f64], out: &mut [f64]) -> f64 {
        let mut max = f64::NEG_INFINITY;
        for j in 0..self.k {
            let mean = self.mean(j);
            let var = self.variance(j);
            let mut maha = 0.0;
            for d in 0..self.dim {
                let diff = x[d] - mean[d];
                maha += diff * diff / var[d];
            }
            let v = log_norms[j] - 0.5 * maha;
            out[j] = v;
            if v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return max;
        }
        let sum: f64 = out.iter().map(|v| (v - max).exp()).sum();
        max + sum.ln()
    }

    /// Log-density of the mixture at `x`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let mut buf = vec![0.0; self.k];
        Ok(self.joint_log_densities(x, &self.log_norms(), &mut buf))
    }

    /// Posterior probability of each component given `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut out = vec![0.0; self.k];
        let log_norms = self.log_norms();
        let lse = self.joint_log_densities(x, &log_norms, &mut out);
        normalize_log_row(&mut out, lse);
        Ok(out)
    }

    /// Batched [`Self::responsibilities`] over the rows of `samples`.
    pub fn responsibilities_batch(&self, samples: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        for x in samples {
            self.check_dim(x)?;
        }
        let log_norms = self.log_norms();
        Ok(samples
            .par_iter()
            .map(|x| {
                let mut out = vec![0.0; self.k];
                let lse = self.joint_log_densities(x, &log_norms, &mut out);
                normalize_log_row(&mut out, lse);
                out
            })
            .collect())
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(())
    }
}

fn normalize_log_row(row: &mut [f64], lse: f64) {
    if !lse.is_finite() {
        // Every component underflowed; fall back to the uniform posterior.
        let u = 1.0 / row.len() as f64;
        row.iter_mut().for_each(|v| *v = u);
        return;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - lse).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// k-means++ seeding: first center uniform, then proportional to the
/// squared distance to the nearest chosen center.
fn kmeans_pp(samples: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let m = samples.len();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..m));
    let mut d2: Vec<f64> = samples.iter().map(|x| sq_dist(x, &samples[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = m - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..m)
        };
        chosen.push(next);
        for (i, x) in samples.iter().enumerate() {
            let d = sq_dist(x, &samples[next]);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    chosen
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Per-dimension biased variance of the samples, floored.
fn global_variance(samples: &[Vec<f64>], dim: usize, floor: f64) -> Vec<f64> {
    let m = samples.len() as f64;
    let mut mean = vec![0.0; dim];
    for x in samples {
        for d in 0..dim {
            mean[d] += x[d];
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0; dim];
    for x in samples {
        for d in 0..dim {
            let diff = x[d] - mean[d];
            var[d] += diff * diff;
        }
    }
    var.iter_mut().for_each(|v| *v = (*v / m).max(floor));
    var
}

/// Fits a `k`-component diagonal mixture to `samples` (one row per sample).
pub fn fit_gmm(samples: &[Vec<f64>], k: usize, config: &GmmConfig) -> Result<GmmFit> {
    if k == 0 {
        return Err(Error::invalid("mixture needs at least one component"));
    }
    let m = samples.len();
    if m < k {
        return Err(Error::InsufficientData { needed: k, got: m });
    }
    let dim = samples[0].len();
    if dim == 0 {
        return Err(Error::invalid("samples have zero dimension"));
    }
    for (i, x) in samples.iter().enumerate() {
        if x.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value in sample {i}")));
        }
    }
    if !(config.floor > 0.0) {
        return Err(Error::invalid("covariance floor must be positive"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let centers = kmeans_pp(samples, k, &mut rng);
    let base_var = global_variance(samples, dim, config.floor);
    let mut model = GmmModel {
        k,
        dim,
        means: centers.iter().flat_map(|&i| samples[i].iter().copied()).collect(),
        variances: (0..k).flat_map(|_| base_var.iter().copied()).collect(),
        weights: vec![1.0 / k as f64; k],
        seed: config.seed,
    };

    let mut trace = Vec::new();
    let mut reseeded_at = Vec::new();
    let mut resp = vec![0.0; m * k];
    let mut sample_ll = vec![0.0; m];
    let mut converged = false;
    let mut iterations = 0;

    loop {
        let mean_ll = e_step(&model, samples, &mut resp, &mut sample_ll);
        if let Some(&prev) = trace.last() {
            let change: f64 = mean_ll - prev;
            if change.abs() <= config.tol * f64::abs(prev).max(1e-12) {
                converged = true;
            }
        }
        trace.push(mean_ll);
        if converged || iterations >= config.max_iters {
            break;
        }
        let reseeded = m_step(&mut model, samples, &resp, &sample_ll, &base_var, config.floor);
        if reseeded {
            reseeded_at.push(trace.len());
        }
        iterations += 1;
    }

    Ok(GmmFit {
        model,
        log_likelihood: trace,
        reseeded_at,
        iterations,
        converged,
    })
}

/// Writes responsibilities row-major into `resp` and per-sample
/// log-likelihoods into `sample_ll`; returns the mean log-likelihood.
fn e_step(model: &GmmModel, samples: &[Vec<f64>], resp: &mut [f64], sample_ll: &mut [f64]) -> f64 {
    let log_norms = model.log_norms();
    resp.par_chunks_mut(model.k)
        .zip(sample_ll.par_iter_mut())
        .zip(samples.par_iter())
        .for_each(|((row, ll), x)| {
            let lse = model.joint_log_densities(x, &log_norms, row);
            normalize_log_row(row, lse);
            *ll = lse;
        });
    sample_ll.iter().sum::<f64>() / samples.len() as f64
}

fn m_step(
    model: &mut GmmModel,
    samples: &[Vec<f64>],
    resp: &[f64],
    sample_ll: &[f64],
    base_var: &[f64],
    floor: f64,
) -> bool {
    let (k, dim, m) = (model.k, model.dim, samples.len());
    let mut mass = vec![0.0; k];
    let mut sums = vec![0.0; k * dim];
    for (i, x) in samples.iter().enumerate() {
        let row = &resp[i * k..(i + 1) * k];
        for j in 0..k {
            let r = row[j];
            if r == 0.0 {
                continue;
            }
            mass[j] += r;
            for d in 0..dim {
                sums[j * dim + d] += r * x[d];
            }
        }
    }
    let mut sq = vec![0.0; k * dim];
    for j in 0..k {
        if mass[j] >= EMPTY_COMPONENT_MASS {
            for d in 0..dim {
                model.means[j * dim + d] = sums[j * dim + d] / mass[j];
            }
        }
    }
    for (i, x) in samples.iter().enumerate() {
        let row = &resp[i * k..(i + 1) * k];
        for j in 0..k {
            let r = row[j];
            if r == 0.0 || mass[j] < EMPTY_COMPONENT_MASS {
                continue;
            }
            for d in 0..dim {
                let diff = x[d] - model.means[j * dim + d];
                sq[j * dim + d] += r * diff * diff;
            }
        }
    }
    let mut reseeded = false;
    for j in 0..k {
        if mass[j] >= EMPTY_COMPONENT_MASS {
            for d in 0..dim {
                model.variances[j * dim + d] = (sq[j * dim + d] / mass[j]).max(floor);
            }
            model.weights[j] = mass[j] / m as f64;
        } else {
            // Collapsed component: restart it at the worst-explained sample,
            // borrowing one sample's worth of weight from the heaviest component.
            reseeded = true;
            let worst = sample_ll
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            model.means[j * dim..(j + 1) * dim].copy_from_slice(&samples[worst]);
            model.variances[j * dim..(j + 1) * dim].copy_from_slice(base_var);
            model.weights[j] = 1.0 / m as f64;
        }
    }
    let total: f64 = model.weights.iter().sum();
    model.weights.iter_mut().for_each(|w| *w /= total);
    reseeded
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn brute_force_posterior(model: &GmmModel, x: &[f64]) -> Vec<f64> {
        let dens: Vec<f64> = (0..model.k())
            .map(|j| {
                let mut p = model.weights()[j];
                for d in 0..model.dim() {
                    let v = model.variance(j)[d];
                    let diff = x[d] - model.mean(j)[d];
                    p *= (-0.5 * diff * diff / v).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
                }
                p
            })
            .collect();
        let total: f64 = dens.iter().sum();
        dens.iter().map(|p| p / total).collect()
    }

    fn random_model(rng: &mut ChaCha8Rng, k: usize, dim: usize) -> GmmModel {
        let means = (0..k * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let variances = (0..k * dim).map(|_| rng.random_range(0.5..2.0)).collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = raw.iter().sum();
        GmmModel::from_parts(dim, means, variances, raw.iter().map(|w| w / s).collect(), 0).unwrap()
    }

    #[test]
    fn posterior_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let k = rng.random_range(1..=5);
            let model = random_model(&mut rng, k, 6);
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let fast = model.responsibilities(&x).unwrap();
            let slow = brute_force_posterior(&model, &x);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn posterior_at_isolated_mean() {
        let mut means = vec![0.0; 12];
        means[6..].iter_mut().for_each(|v| *v = 20.0);
        let model = GmmModel::from_parts(6, means, vec![1.0; 12], vec![0.5, 0.5], 0).unwrap();
        let r = model.responsibilities(&[0.0; 6]).unwrap();
        assert!(r[0] > 0.999);
    }

    #[test]
    fn equidistant_point_splits_evenly() {
        let mut means = vec![0.0; 12];
        means[0] = -1.0;
        means[6] = 1.0;
        let model = GmmModel::from_parts(6, means, vec![1.0; 12], vec![0.5, 0.5], 0).unwrap();
        let r = model.responsibilities(&[0.0; 6]).unwrap();
        assert!((r[0] - 0.5).abs() < 1e-12 && (r[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn far_queries_do_not_produce_nan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = random_model(&mut rng, 4, 6);
        let r = model.responsibilities(&[1e6, -1e6, 1e6, 0.0, 0.0, 0.0]).unwrap();
        assert!(r.iter().all(|v| v.is_finite()));
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_component_is_sample_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0..3.0)).collect())
            .collect();
        let fit = fit_gmm(&samples, 1, &GmmConfig::default()).unwrap();
        for d in 0..6 {
            let mean = samples.iter().map(|x| x[d]).sum::<f64>() / 100.0;
            let var = samples.iter().map(|x| (x[d] - mean).powi(2)).sum::<f64>() / 100.0;
            assert!((fit.model.mean(0)[d] - mean).abs() < 1e-9);
            assert!((fit.model.variance(0)[d] - var).abs() < 1e-9);
        }
        assert_eq!(fit.model.weights(), &[1.0]);
    }

    #[test]
    fn duplicate_samples_hit_the_floor() {
        let samples = vec![vec![1.0; 6]; 10];
        let fit = fit_gmm(&samples, 2, &GmmConfig::default()).unwrap();
        for j in 0..2 {
            assert!(fit.model.variance(j).iter().all(|&v| v >= 1e-6));
        }
    }

    #[test]
    fn two_cluster_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut samples = Vec::new();
        for sign in [1.0, -1.0] {
            for _ in 0..500 {
                samples.push((0..6).map(|_| sign * 10.0 + noise.sample(&mut rng)).collect());
            }
        }
        let fit = fit_gmm(&samples, 2, &GmmConfig::default()).unwrap();
        let mut found = [false, false];
        for j in 0..2 {
            let sign = fit.model.mean(j)[0].signum();
            for &v in fit.model.mean(j) {
                assert!((v - sign * 10.0).abs() < 0.5);
            }
            assert!((fit.model.weights()[j] - 0.5).abs() < 0.05);
            found[usize::from(sign > 0.0)] = true;
        }
        assert_eq!(found, [true, true]);
    }

    #[test]
    fn errors() {
        let samples = vec![vec![0.0; 6]; 3];
        assert!(matches!(
            fit_gmm(&samples, 4, &GmmConfig::default()),
            Err(Error::InsufficientData { needed: 4, got: 3 })
        ));
        let mut bad = samples.clone();
        bad[1][2] = f64::NAN;
        assert!(matches!(fit_gmm(&bad, 1, &GmmConfig::default()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn refit_is_bit_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..6).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let cfg = GmmConfig { seed: 99, ..Default::default() };
        let a = fit_gmm(&samples, 7, &cfg).unwrap();
        let b = fit_gmm(&samples, 7, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log_likelihood, b.log_likelihood);
    }
}
