//! The masked ELBO: reconstruction terms, the permutation-divergence
//! regularizer on the latent grid, and the consensus regularizer, in three
//! variants. The basic variant reconstructs each observed view from its own
//! (self-encoded) latent and regularizes toward the column-permuted
//! posteriors; the permuted variant reconstructs from the permuted diagonal
//! and regularizes toward the inverse permutation; the combined variant is
//! their convex mean, whose latent regularizer is half the symmetric
//! permutation divergence of each column.

use std::str::FromStr;

use crate::gaussian::{
    geometric_mean_fusion, kl_divergence, marginal_first_k, normalized_geometric_mean,
    sample_reparameterized, DiagonalGaussian,
};
use crate::latent::{consensus, LatentMatrix};
use crate::neural::DenseNet;
use crate::permutation::PermutationBundle;
use crate::rng::Rng;
use crate::{Error, Real, Result};

/// Prior family for the two KL terms. `Cyclic` is the full method; the rest
/// are ablation settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// Priors are the column-permuted posteriors (and their inverses).
    Cyclic,
    /// Unit Gaussian priors on every latent and consensus variable.
    StandardNormal,
    /// Each single-view cell's prior is the cell's normalized geometric mean;
    /// each consensus variable's prior is the geometric mean of all of them.
    Fusion,
    /// Column l's prior is the self-encoded entry (l, l); the consensus prior
    /// fuses the observed diagonal entries.
    Diagonal,
    /// Like `Cyclic` but driven by uniformly random (possibly non-cyclic)
    /// permutations supplied in the bundle.
    RandomPerm,
}

impl PriorMode {
    pub const ALL: [PriorMode; 5] = [
        PriorMode::Cyclic,
        PriorMode::StandardNormal,
        PriorMode::Fusion,
        PriorMode::Diagonal,
        PriorMode::RandomPerm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PriorMode::Cyclic => "cyclic",
            PriorMode::StandardNormal => "standard_normal",
            PriorMode::Fusion => "fusion",
            PriorMode::Diagonal => "diagonal",
            PriorMode::RandomPerm => "random_perm",
        }
    }
}

impl FromStr for PriorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cyclic" => Ok(PriorMode::Cyclic),
            "standard_normal" => Ok(PriorMode::StandardNormal),
            "fusion" => Ok(PriorMode::Fusion),
            "diagonal" => Ok(PriorMode::Diagonal),
            "random_perm" => Ok(PriorMode::RandomPerm),
            other => Err(Error::Config(format!(
                "unknown prior mode '{other}' (expected cyclic, standard_normal, fusion, diagonal or random_perm)"
            ))),
        }
    }
}

/// Reconstruction likelihood family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconMode {
    #[default]
    GaussianUnitVariance,
}

/// Weights and prior selection for the ELBO.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ObjectiveConfig {
    pub beta_z: f64,
    pub beta_omega: f64,
    pub prior_mode: PriorMode,
    pub recon_mode: ReconMode,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            beta_z: 5.0,
            beta_omega: 2.5,
            prior_mode: PriorMode::Cyclic,
            recon_mode: ReconMode::GaussianUnitVariance,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.beta_z.is_finite() || self.beta_z <= 0.0 {
            return Err(Error::Config(format!("beta_z must be finite and positive, got {}", self.beta_z)));
        }
        if !self.beta_omega.is_finite() || self.beta_omega <= 0.0 {
            return Err(Error::Config(format!(
                "beta_omega must be finite and positive, got {}",
                self.beta_omega
            )));
        }
        Ok(())
    }
}

/// Which ELBO variant is being optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    Basic,
    Permuted,
    Combined,
}

/// One of the two directions making up the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Self-view reconstruction; priors follow the bundle permutations.
    Basic,
    /// Cross-view generation; priors follow the inverse permutations.
    Permuted,
}

/// Loss components in minimization form:
/// `total = -recon + beta_z * kl_z + beta_omega * kl_omega`
/// (`recon` is a log-likelihood, the KL terms are nonnegative).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<R> {
    pub recon: R,
    pub kl_z: R,
    pub kl_omega: R,
    pub total: R,
}

impl<R: Real> LossBreakdown<R> {
    pub fn assemble(recon: R, kl_z: R, kl_omega: R, cfg: &ObjectiveConfig) -> Self {
        let total = -recon + R::of(cfg.beta_z) * kl_z + R::of(cfg.beta_omega) * kl_omega;
        LossBreakdown { recon, kl_z, kl_omega, total }
    }

    /// First non-finite component, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        if !self.recon.is_finite() {
            Some("recon")
        } else if !self.kl_z.is_finite() {
            Some("kl_z")
        } else if !self.kl_omega.is_finite() {
            Some("kl_omega")
        } else if !self.total.is_finite() {
            Some("total")
        } else {
            None
        }
    }
}

/// Gaussian unit-variance log-likelihood up to its additive constant:
/// `-0.5 * ||x - x_hat||^2`.
pub fn recon_log_likelihood<R: Real>(x: &[R], x_hat: &[R]) -> Result<R> {
    if x.len() != x_hat.len() {
        return Err(Error::dim(format!(
            "reconstruction target has {} features, output has {}",
            x.len(),
            x_hat.len()
        )));
    }
    let mut sq = R::zero();
    for (a, b) in x.iter().zip(x_hat) {
        let d = *a - *b;
        sq = sq + d * d;
    }
    Ok(-R::of(0.5) * sq)
}

/// Reparameterization noise for one sample: one d-dim vector per view for z
/// and one k-dim vector per view for the consensus variable, shared between
/// the basic and permuted sides.
#[derive(Debug, Clone)]
pub struct SampleNoise<R> {
    pub z: Vec<Vec<R>>,
    pub omega: Vec<Vec<R>>,
}

impl<R: Real> SampleNoise<R> {
    /// Draw noise for all L views (missing views included, so the stream
    /// position never depends on the mask).
    pub fn draw(l: usize, d: usize, k: usize, rng: &mut Rng) -> Self {
        let z = (0..l).map(|_| (0..d).map(|_| R::of(rng.normal())).collect()).collect();
        let omega = (0..l).map(|_| (0..k).map(|_| R::of(rng.normal())).collect()).collect();
        SampleNoise { z, omega }
    }

    pub fn zeros(l: usize, d: usize, k: usize) -> Self {
        SampleNoise { z: vec![vec![R::zero(); d]; l], omega: vec![vec![R::zero(); k]; l] }
    }
}

/// Priors assigned to the latent-grid posteriors and to the consensus
/// posteriors of one side. Entries absent from `z` carry no regularizer
/// (diagonal mode skips columns whose self-view is missing).
#[derive(Debug, Clone)]
pub struct PriorAssignments<R> {
    /// `((source view v, column l), prior)` for the posterior at (v, l).
    pub z: Vec<((usize, usize), DiagonalGaussian<R>)>,
    /// `(row n, prior)` for the side's consensus posterior of row n.
    pub omega: Vec<(usize, DiagonalGaussian<R>)>,
}

/// Consensus distribution of every observed row of a matrix, ascending.
pub fn row_consensus<R: Real>(m: &LatentMatrix<R>, k: usize) -> Result<Vec<(usize, DiagonalGaussian<R>)>> {
    m.observed()
        .iter()
        .map(|&n| Ok((n, consensus(&m.complete_view_cell(n)?, k)?.dist)))
        .collect()
}

/// Prior per latent-grid posterior `(v, l)` selected by `mode` for one side.
pub fn z_priors<R: Real>(
    mode: PriorMode,
    z0: &LatentMatrix<R>,
    bundle: &PermutationBundle,
    side: Side,
) -> Result<Vec<((usize, usize), DiagonalGaussian<R>)>> {
    let l_count = z0.view_count();
    let observed = z0.observed();
    let d = z0.dim();
    let mut z = Vec::new();
    match mode {
        PriorMode::Cyclic | PriorMode::RandomPerm => {
            for l in 1..=l_count {
                let sigma = match side {
                    Side::Basic => bundle.column(l).clone(),
                    Side::Permuted => bundle.column(l).inverse(),
                };
                for &v in observed {
                    let prior = z0.entry(sigma.apply(v), l).expect("observed row").clone();
                    z.push(((v, l), prior));
                }
            }
        }
        PriorMode::StandardNormal => {
            for l in 1..=l_count {
                for &v in observed {
                    z.push(((v, l), DiagonalGaussian::standard(d)));
                }
            }
        }
        PriorMode::Fusion => {
            // the single-view cell is permutation-invariant, so both sides
            // share one column prior
            for l in 1..=l_count {
                let cell = z0.single_view_cell(l)?;
                let prior = normalized_geometric_mean(&cell, d)?;
                for &v in observed {
                    z.push(((v, l), prior.clone()));
                }
            }
        }
        PriorMode::Diagonal => {
            // columns without a self-encoded entry carry no regularizer
            for &l in observed {
                let prior = z0.entry(l, l).expect("observed row").clone();
                for &v in observed {
                    z.push(((v, l), prior.clone()));
                }
            }
        }
    }
    Ok(z)
}

/// Prior per consensus posterior (row `n` of the side's matrix).
pub fn omega_priors<R: Real>(
    mode: PriorMode,
    z0: &LatentMatrix<R>,
    z1: &LatentMatrix<R>,
    k: usize,
    side: Side,
) -> Result<Vec<(usize, DiagonalGaussian<R>)>> {
    let observed = z0.observed();
    match mode {
        PriorMode::Cyclic | PriorMode::RandomPerm => match side {
            Side::Basic => row_consensus(z1, k),
            Side::Permuted => row_consensus(z0, k),
        },
        PriorMode::StandardNormal => {
            Ok(observed.iter().map(|&n| (n, DiagonalGaussian::standard(k))).collect())
        }
        PriorMode::Fusion => {
            let own = match side {
                Side::Basic => row_consensus(z0, k)?,
                Side::Permuted => row_consensus(z1, k)?,
            };
            let dists: Vec<_> = own.into_iter().map(|(_, g)| g).collect();
            let prior = normalized_geometric_mean(&dists, k)?;
            Ok(observed.iter().map(|&n| (n, prior.clone())).collect())
        }
        PriorMode::Diagonal => {
            let diag: Vec<_> = z0
                .diagonal()
                .into_iter()
                .map(|(_, g)| marginal_first_k(&g, k))
                .collect::<Result<Vec<_>>>()?;
            let prior = geometric_mean_fusion(&diag, k)?;
            Ok(observed.iter().map(|&n| (n, prior.clone())).collect())
        }
    }
}

/// Materialize the prior distributions selected by `mode` for one side.
pub fn apply_prior_mode<R: Real>(
    mode: PriorMode,
    z0: &LatentMatrix<R>,
    z1: &LatentMatrix<R>,
    bundle: &PermutationBundle,
    k: usize,
    side: Side,
) -> Result<PriorAssignments<R>> {
    Ok(PriorAssignments {
        z: z_priors(mode, z0, bundle, side)?,
        omega: omega_priors(mode, z0, z1, k, side)?,
    })
}

/// `sum over assigned (v, l) of KL[z0(v, l) || prior]` for one side.
pub fn kl_z_sum<R: Real>(
    z0: &LatentMatrix<R>,
    bundle: &PermutationBundle,
    mode: PriorMode,
    side: Side,
) -> Result<R> {
    let mut total = R::zero();
    for ((v, l), prior) in z_priors(mode, z0, bundle, side)? {
        let posterior = z0.entry(v, l).expect("observed row");
        total = total + kl_divergence(posterior, &prior)?;
    }
    Ok(total)
}

/// `sum over observed rows of KL[omega_side(n) || prior]` for one side.
pub fn kl_omega_sum<R: Real>(
    z0: &LatentMatrix<R>,
    z1: &LatentMatrix<R>,
    k: usize,
    mode: PriorMode,
    side: Side,
) -> Result<R> {
    let posteriors = match side {
        Side::Basic => row_consensus(z0, k)?,
        Side::Permuted => row_consensus(z1, k)?,
    };
    let priors = omega_priors(mode, z0, z1, k, side)?;
    let mut total = R::zero();
    for ((n, posterior), (pn, prior)) in posteriors.iter().zip(&priors) {
        debug_assert_eq!(n, pn);
        total = total + kl_divergence(posterior, prior)?;
    }
    Ok(total)
}

/// Reconstruction log-likelihood of one side: decode each observed view from
/// the side's diagonal latent sample concatenated after its consensus sample.
pub fn recon_sum<R: Real>(
    views: &[Vec<R>],
    z0: &LatentMatrix<R>,
    z1: &LatentMatrix<R>,
    decoders: &[DenseNet<R>],
    noise: &SampleNoise<R>,
    k: usize,
    side: Side,
) -> Result<R> {
    let m = match side {
        Side::Basic => z0,
        Side::Permuted => z1,
    };
    let omegas = row_consensus(m, k)?;
    let mut total = R::zero();
    for (n, omega) in omegas {
        let z_dist = m.entry(n, n).expect("observed row");
        let z_sample = sample_reparameterized(z_dist, &noise.z[n - 1])?;
        let w_sample = sample_reparameterized(&omega, &noise.omega[n - 1])?;
        let mut input = w_sample;
        input.extend(z_sample);
        let x_hat = decoders[n - 1].output(&input)?;
        total = total + recon_log_likelihood(&views[n - 1], &x_hat)?;
    }
    Ok(total)
}

fn side_breakdown<R: Real>(
    views: &[Vec<R>],
    z0: &LatentMatrix<R>,
    z1: &LatentMatrix<R>,
    bundle: &PermutationBundle,
    decoders: &[DenseNet<R>],
    noise: &SampleNoise<R>,
    k: usize,
    cfg: &ObjectiveConfig,
    side: Side,
) -> Result<(R, R, R)> {
    let recon = recon_sum(views, z0, z1, decoders, noise, k, side)?;
    let kl_z = kl_z_sum(z0, bundle, cfg.prior_mode, side)?;
    let kl_omega = kl_omega_sum(z0, z1, k, cfg.prior_mode, side)?;
    Ok((recon, kl_z, kl_omega))
}

/// Self-view reconstruction ELBO (warm-up objective).
pub fn elbo_basic<R: Real>(
    views: &[Vec<R>],
    z0: &LatentMatrix<R>,
    bundle: &PermutationBundle,
    decoders: &[DenseNet<R>],
    noise: &SampleNoise<R>,
    k: usize,
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown<R>> {
    let z1 = z0.apply_column_permutations(bundle)?;
    let (r, kz, kw) = side_breakdown(views, z0, &z1, bundle, decoders, noise, k, cfg, Side::Basic)?;
    Ok(LossBreakdown::assemble(r, kz, kw, cfg))
}

/// Cross-view generation ELBO.
pub fn elbo_permuted<R: Real>(
    views: &[Vec<R>],
    z0: &LatentMatrix<R>,
    bundle: &PermutationBundle,
    decoders: &[DenseNet<R>],
    noise: &SampleNoise<R>,
    k: usize,
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown<R>> {
    let z1 = z0.apply_column_permutations(bundle)?;
    let (r, kz, kw) = side_breakdown(views, z0, &z1, bundle, decoders, noise, k, cfg, Side::Permuted)?;
    Ok(LossBreakdown::assemble(r, kz, kw, cfg))
}

/// Convex combination of the two variants (the main-phase objective); its
/// latent KL equals half the symmetric permutation divergence per column.
pub fn elbo_combined<R: Real>(
    views: &[Vec<R>],
    z0: &LatentMatrix<R>,
    bundle: &PermutationBundle,
    decoders: &[DenseNet<R>],
    noise: &SampleNoise<R>,
    k: usize,
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown<R>> {
    let z1 = z0.apply_column_permutations(bundle)?;
    let basic = side_breakdown(views, z0, &z1, bundle, decoders, noise, k, cfg, Side::Basic)?;
    let perm = side_breakdown(views, z0, &z1, bundle, decoders, noise, k, cfg, Side::Permuted)?;
    let half = R::of(0.5);
    Ok(LossBreakdown::assemble(
        half * (basic.0 + perm.0),
        half * (basic.1 + perm.1),
        half * (basic.2 + perm.2),
        cfg,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::symmetric_permutation_divergence;
    use crate::neural::Activation;
    use crate::permutation::{make_bundle, CyclicPermutation};

    fn entry(v: usize, l: usize, dim: usize) -> DiagonalGaussian<f64> {
        let mean = vec![0.3 * v as f64 - 0.2 * l as f64; dim];
        let lv = vec![0.1 * (v as f64 + l as f64) - 0.3; dim];
        DiagonalGaussian::new(mean, lv).unwrap()
    }

    fn toy_decoders(l: usize, k: usize, d: usize, out: usize) -> Vec<DenseNet<f64>> {
        let mut rng = Rng::seeded(99);
        (0..l)
            .map(|_| {
                let mut net =
                    DenseNet::from_dims(&[k + d, 4, out], Activation::Relu, Activation::Linear)
                        .unwrap();
                net.init(&mut rng);
                net
            })
            .collect()
    }

    #[test]
    fn recon_log_likelihood_examples() {
        let x = vec![1.0, 0.0];
        assert_eq!(recon_log_likelihood(&x, &x).unwrap(), 0.0);
        assert_eq!(recon_log_likelihood(&x, &[0.0, 0.0]).unwrap(), -0.5);
        // strictly decreasing in the residual norm
        let mut last = 0.0;
        for t in 1..10 {
            let x_hat = vec![1.0 + 0.1 * t as f64, 0.0];
            let ll = recon_log_likelihood(&x, &x_hat).unwrap();
            assert!(ll < last);
            last = ll;
        }
        assert!(recon_log_likelihood(&x, &[0.0]).is_err());
    }

    #[test]
    fn single_observed_view_has_zero_regularizers_and_equal_variants() {
        let dim = 3;
        let z0 = LatentMatrix::from_fn(3, dim, &[2], |v, l| Ok(entry(v, l, dim))).unwrap();
        let mut rng = Rng::seeded(1);
        let bundle = make_bundle(3, &[2], &mut rng).unwrap();
        let decoders = toy_decoders(3, 2, dim, 4);
        let views = vec![vec![0.0; 4], vec![0.5, -0.5, 1.0, 0.25], vec![0.0; 4]];
        let noise = SampleNoise::draw(3, dim, 2, &mut rng);
        let cfg = ObjectiveConfig::default();

        let basic = elbo_basic(&views, &z0, &bundle, &decoders, &noise, 2, &cfg).unwrap();
        let permuted = elbo_permuted(&views, &z0, &bundle, &decoders, &noise, 2, &cfg).unwrap();
        assert_eq!(basic.kl_z, 0.0);
        assert_eq!(basic.kl_omega, 0.0);
        assert_eq!(basic, permuted);
    }

    #[test]
    fn homogeneous_columns_zero_the_regularizers() {
        let dim = 2;
        let observed = [1usize, 2, 3];
        // column l holds one repeated distribution
        let z0 = LatentMatrix::from_fn(3, dim, &observed, |_, l| Ok(entry(l, l, dim))).unwrap();
        let mut rng = Rng::seeded(2);
        let bundle = make_bundle(3, &observed, &mut rng).unwrap();
        let decoders = toy_decoders(3, 1, dim, 3);
        let views = vec![vec![0.1; 3]; 3];
        let noise = SampleNoise::draw(3, dim, 1, &mut rng);
        let cfg = ObjectiveConfig::default();

        let b = elbo_basic(&views, &z0, &bundle, &decoders, &noise, 1, &cfg).unwrap();
        assert!(b.kl_z.abs() < 1e-12);
        assert!(b.kl_omega.abs() < 1e-12);
        assert!((b.total - -b.recon).abs() < 1e-12);

        let c = elbo_combined(&views, &z0, &bundle, &decoders, &noise, 1, &cfg).unwrap();
        let p = elbo_permuted(&views, &z0, &bundle, &decoders, &noise, 1, &cfg).unwrap();
        assert!((c.total - -0.5 * (b.recon + p.recon)).abs() < 1e-12);
    }

    #[test]
    fn two_view_toy_matches_hand_summed_kl_terms() {
        let dim = 1;
        let observed = [1usize, 2];
        let z0 = LatentMatrix::from_fn(2, dim, &observed, |v, l| Ok(entry(v, l, dim))).unwrap();
        let swap = CyclicPermutation::new(vec![2, 1], &[1, 2]).unwrap();
        let bundle = PermutationBundle::new(vec![swap; 2]).unwrap();

        let kl = |a: &DiagonalGaussian<f64>, b: &DiagonalGaussian<f64>| kl_divergence(a, b).unwrap();
        let e = |v: usize, l: usize| z0.entry(v, l).unwrap().clone();
        // four terms: both columns, both sources, prior = swapped source
        let expected = kl(&e(1, 1), &e(2, 1)) + kl(&e(2, 1), &e(1, 1))
            + kl(&e(1, 2), &e(2, 2)) + kl(&e(2, 2), &e(1, 2));
        let got = kl_z_sum(&z0, &bundle, PriorMode::Cyclic, Side::Basic).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn combined_kl_matches_symmetric_divergence_code_path() {
        let mut rng = Rng::seeded(5);
        for _ in 0..50 {
            let l = 2 + rng.below(4);
            let dim = 1 + rng.below(3);
            let count = 1 + rng.below(l);
            let mut all: Vec<usize> = (1..=l).collect();
            rng.shuffle(&mut all);
            let mut observed = all[..count].to_vec();
            observed.sort_unstable();
            let z0 = LatentMatrix::from_fn(l, dim, &observed, |v, col| {
                let mean: Vec<f64> = (0..dim).map(|_| rng.uniform(-2.0, 2.0) + v as f64 * 0.1).collect();
                let lv: Vec<f64> = (0..dim).map(|_| rng.uniform(-1.0, 1.0) - col as f64 * 0.01).collect();
                DiagonalGaussian::new(mean, lv)
            })
            .unwrap();
            let bundle = make_bundle(l, &observed, &mut rng).unwrap();

            let basic = kl_z_sum(&z0, &bundle, PriorMode::Cyclic, Side::Basic).unwrap();
            let permuted = kl_z_sum(&z0, &bundle, PriorMode::Cyclic, Side::Permuted).unwrap();
            let combined = 0.5 * (basic + permuted);

            let mut via_divergence = 0.0;
            for col in 1..=l {
                let cell = z0.single_view_cell(col).unwrap();
                let sigma = bundle.column(col).compact();
                via_divergence += symmetric_permutation_divergence(&cell, &sigma).unwrap().total;
            }
            via_divergence *= 0.5;
            assert!(
                (combined - via_divergence).abs() < 1e-12,
                "objective {combined} vs divergence {via_divergence}"
            );
        }
    }

    #[test]
    fn combined_is_fieldwise_mean_of_variants() {
        let dim = 2;
        let observed = [1usize, 2, 3];
        let mut rng = Rng::seeded(8);
        let z0 = LatentMatrix::from_fn(3, dim, &observed, |v, l| Ok(entry(v + 1, l, dim))).unwrap();
        let bundle = make_bundle(3, &observed, &mut rng).unwrap();
        let decoders = toy_decoders(3, 2, dim, 3);
        let views = vec![vec![0.3; 3], vec![-0.2; 3], vec![0.9; 3]];
        let noise = SampleNoise::draw(3, dim, 2, &mut rng);
        let cfg = ObjectiveConfig::default();

        let b = elbo_basic(&views, &z0, &bundle, &decoders, &noise, 2, &cfg).unwrap();
        let p = elbo_permuted(&views, &z0, &bundle, &decoders, &noise, 2, &cfg).unwrap();
        let c = elbo_combined(&views, &z0, &bundle, &decoders, &noise, 2, &cfg).unwrap();
        assert!((c.recon - 0.5 * (b.recon + p.recon)).abs() < 1e-12);
        assert!((c.kl_z - 0.5 * (b.kl_z + p.kl_z)).abs() < 1e-12);
        assert!((c.kl_omega - 0.5 * (b.kl_omega + p.kl_omega)).abs() < 1e-12);

        // with unit betas the total is the unweighted convex combination
        let unit = ObjectiveConfig { beta_z: 1.0, beta_omega: 1.0, ..ObjectiveConfig::default() };
        let cu = elbo_combined(&views, &z0, &bundle, &decoders, &noise, 2, &unit).unwrap();
        assert!((cu.total - (-cu.recon + cu.kl_z + cu.kl_omega)).abs() < 1e-12);
    }

    #[test]
    fn prior_mode_examples() {
        let dim = 2;
        let observed = [1usize, 2];
        // all posteriors are standard normal
        let z0 =
            LatentMatrix::from_fn(2, dim, &observed, |_, _| Ok(DiagonalGaussian::<f64>::standard(dim)))
                .unwrap();
        let mut rng = Rng::seeded(4);
        let bundle = make_bundle(2, &observed, &mut rng).unwrap();
        let kz = kl_z_sum(&z0, &bundle, PriorMode::StandardNormal, Side::Basic).unwrap();
        assert_eq!(kz, 0.0);

        // diagonal mode: the (l, l) entry regularizes against itself
        let z0 = LatentMatrix::from_fn(2, dim, &observed, |v, l| Ok(entry(v, l, dim))).unwrap();
        let z1 = z0.apply_column_permutations(&bundle).unwrap();
        let assignments =
            apply_prior_mode(PriorMode::Diagonal, &z0, &z1, &bundle, dim, Side::Basic).unwrap();
        for ((v, l), prior) in &assignments.z {
            if v == l {
                let own = z0.entry(*v, *l).unwrap();
                assert_eq!(kl_divergence(own, prior).unwrap(), 0.0);
            }
        }

        // fusion mode with identical inputs leaves the posterior unpenalized
        let z0 = LatentMatrix::from_fn(2, dim, &observed, |_, l| Ok(entry(l, l, dim))).unwrap();
        let kz = kl_z_sum(&z0, &bundle, PriorMode::Fusion, Side::Basic).unwrap();
        assert!(kz.abs() < 1e-12);
    }

    #[test]
    fn masked_entries_never_contribute() {
        // objective value over observed = {1, 3} must not depend on anything
        // involving view 2
        let dim = 2;
        let observed = [1usize, 3];
        let mut rng = Rng::seeded(12);
        let z0 = LatentMatrix::from_fn(3, dim, &observed, |v, l| Ok(entry(v, l, dim))).unwrap();
        let bundle = make_bundle(3, &observed, &mut rng).unwrap();
        let decoders = toy_decoders(3, 1, dim, 2);
        let noise = SampleNoise::draw(3, dim, 1, &mut rng);
        let cfg = ObjectiveConfig::default();

        let views_a = vec![vec![0.1, 0.2], vec![7.5, -3.0], vec![0.4, 0.5]];
        let mut views_b = views_a.clone();
        views_b[1] = vec![0.0, 0.0]; // placeholder content at the missing view
        let a = elbo_combined(&views_a, &z0, &bundle, &decoders, &noise, 1, &cfg).unwrap();
        let b = elbo_combined(&views_b, &z0, &bundle, &decoders, &noise, 1, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
