//! Diagonal-Gaussian algebra: closed-form KL divergence, precision-weighted
//! geometric-mean fusion, marginalization, reparameterized sampling.
//!
//! All distributions are stored as `(mean, log_var)` pairs. Log-variances are
//! clamped to [-30, 30] at construction so `exp` can never overflow; every
//! operation below is a pure function of its arguments.

use crate::{Error, Real, Result};

/// Clamp bound for log-variances.
pub const LOG_VAR_BOUND: f64 = 30.0;

/// A d-dimensional Gaussian with diagonal covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian<R> {
    mean: Vec<R>,
    log_var: Vec<R>,
}

impl<R: Real> DiagonalGaussian<R> {
    /// Build from mean and log-variance vectors of equal, nonzero length.
    /// Log-variances are clamped to [-30, 30]; non-finite entries are rejected.
    pub fn new(mean: Vec<R>, log_var: Vec<R>) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::contract("DiagonalGaussian needs dim >= 1"));
        }
        if mean.len() != log_var.len() {
            return Err(Error::dim(format!(
                "mean has {} entries, log_var has {}",
                mean.len(),
                log_var.len()
            )));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::non_finite("mean", String::new()));
        }
        if log_var.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("log_var", String::new()));
        }
        let bound = R::of(LOG_VAR_BOUND);
        let log_var = log_var.into_iter().map(|v| v.min(bound).max(-bound)).collect();
        Ok(DiagonalGaussian { mean, log_var })
    }

    /// Standard normal of the given dimension.
    pub fn standard(dim: usize) -> Self {
        DiagonalGaussian { mean: vec![R::zero(); dim], log_var: vec![R::zero(); dim] }
    }

    /// 1-D Gaussian from scalar mean and variance.
    pub fn scalar(mean: f64, var: f64) -> Self {
        DiagonalGaussian { mean: vec![R::of(mean)], log_var: vec![R::of(var.ln())] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[R] {
        &self.mean
    }

    pub fn log_var(&self) -> &[R] {
        &self.log_var
    }

    /// Per-dimension variances.
    pub fn variances(&self) -> Vec<R> {
        self.log_var.iter().map(|v| v.exp()).collect()
    }

    /// Per-dimension precisions (inverse variances).
    pub fn precisions(&self) -> Vec<R> {
        self.log_var.iter().map(|v| (-*v).exp()).collect()
    }
}

/// KL[p || q] for diagonal Gaussians of equal dimension:
/// sum_i 1/2 (lv_q - lv_p) + (var_p + (mu_p - mu_q)^2) / (2 var_q) - 1/2.
pub fn kl_divergence<R: Real>(p: &DiagonalGaussian<R>, q: &DiagonalGaussian<R>) -> Result<R> {
    if p.dim() != q.dim() {
        return Err(Error::dim(format!("kl_divergence: p dim {} vs q dim {}", p.dim(), q.dim())));
    }
    let half = R::of(0.5);
    let mut total = R::zero();
    for i in 0..p.dim() {
        let lv_p = p.log_var[i];
        let lv_q = q.log_var[i];
        let diff = p.mean[i] - q.mean[i];
        let term = half * (lv_q - lv_p) + (lv_p.exp() + diff * diff) / (R::of(2.0) * lv_q.exp()) - half;
        total = total + term;
    }
    Ok(total)
}

/// Precision-weighted product fusion over the first `k` dimensions: the fused
/// precision is the sum of the input precisions, the fused mean their
/// precision-weighted average. This is the (unnormalized) geometric-mean
/// combination of Gaussian densities.
pub fn geometric_mean_fusion<R: Real>(
    inputs: &[DiagonalGaussian<R>],
    k: usize,
) -> Result<DiagonalGaussian<R>> {
    fuse(inputs, k, false)
}

/// True geometric mean of the input densities, `(p_1 ... p_M)^(1/M)`
/// renormalized: fused precision is the *mean* of the input precisions, the
/// fused mean is unchanged from [`geometric_mean_fusion`]. Fusing identical
/// inputs returns the input distribution.
pub fn normalized_geometric_mean<R: Real>(
    inputs: &[DiagonalGaussian<R>],
    k: usize,
) -> Result<DiagonalGaussian<R>> {
    fuse(inputs, k, true)
}

fn fuse<R: Real>(inputs: &[DiagonalGaussian<R>], k: usize, normalized: bool) -> Result<DiagonalGaussian<R>> {
    if inputs.is_empty() {
        return Err(Error::contract("fusion over an empty list"));
    }
    if k == 0 {
        return Err(Error::contract("fusion needs k >= 1"));
    }
    let dim = inputs[0].dim();
    for (i, g) in inputs.iter().enumerate() {
        if g.dim() != dim {
            return Err(Error::dim(format!("fusion input {i} has dim {} (expected {dim})", g.dim())));
        }
    }
    if k > dim {
        return Err(Error::contract(format!("fusion k = {k} exceeds input dim {dim}")));
    }

    let mut mean = Vec::with_capacity(k);
    let mut log_var = Vec::with_capacity(k);
    let count = R::of(inputs.len() as f64);
    for j in 0..k {
        let mut precisions: Vec<R> = inputs.iter().map(|g| (-g.log_var[j]).exp()).collect();
        let mut weighted: Vec<R> = inputs.iter().zip(&precisions).map(|(g, &p)| p * g.mean[j]).collect();
        // Addends are summed in a value-sorted order so that permuting the
        // input list cannot perturb the result.
        sort_canonical(&mut precisions);
        sort_canonical(&mut weighted);
        let total_precision = kahan_sum(&precisions);
        let total_weighted = kahan_sum(&weighted);
        mean.push(total_weighted / total_precision);
        let precision = if normalized { total_precision / count } else { total_precision };
        log_var.push(-precision.ln());
    }
    DiagonalGaussian::new(mean, log_var)
}

fn sort_canonical<R: Real>(xs: &mut [R]) {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite values are totally ordered"));
}

fn kahan_sum<R: Real>(xs: &[R]) -> R {
    let mut sum = R::zero();
    let mut comp = R::zero();
    for &x in xs {
        let y = x - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

/// First `k` components of the distribution, unchanged.
pub fn marginal_first_k<R: Real>(g: &DiagonalGaussian<R>, k: usize) -> Result<DiagonalGaussian<R>> {
    if k == 0 || k > g.dim() {
        return Err(Error::contract(format!("marginal k = {k} outside 1..={}", g.dim())));
    }
    Ok(DiagonalGaussian { mean: g.mean[..k].to_vec(), log_var: g.log_var[..k].to_vec() })
}

/// Reparameterized sample: `mean + exp(log_var / 2) * eps`.
pub fn sample_reparameterized<R: Real>(g: &DiagonalGaussian<R>, eps: &[R]) -> Result<Vec<R>> {
    if eps.len() != g.dim() {
        return Err(Error::dim(format!("eps has {} entries for dim {}", eps.len(), g.dim())));
    }
    let half = R::of(0.5);
    Ok(g.mean
        .iter()
        .zip(&g.log_var)
        .zip(eps)
        .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
        .collect())
}
