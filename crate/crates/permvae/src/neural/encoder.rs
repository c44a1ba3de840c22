//! Encoder nets: a shared trunk with separate affine heads for the mean and
//! log-variance of the latent distribution.

use super::dense::{Activation, DenseCache, DenseLayer, DenseNet};
use crate::rng::Rng;
use crate::{Error, Real, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderNet<R> {
    pub trunk: DenseNet<R>,
    pub mu_head: DenseLayer<R>,
    pub logvar_head: DenseLayer<R>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<R> {
    trunk: DenseCache<R>,
    trunk_out: Vec<R>,
    mu_pre: Vec<R>,
    lv_pre: Vec<R>,
}

impl<R: Real> EncoderNet<R> {
    /// `in_dim -> hidden... -> (mu, log_var)` with relu hidden layers and
    /// affine heads of width `latent_dim`.
    pub fn new(in_dim: usize, hidden: &[usize], latent_dim: usize) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::contract("encoder needs at least one hidden layer"));
        }
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        let trunk = DenseNet::from_dims(&dims, Activation::Relu, Activation::Relu)?;
        let width = *hidden.last().unwrap();
        Ok(EncoderNet {
            trunk,
            mu_head: DenseLayer::zeros(width, latent_dim, Activation::Linear),
            logvar_head: DenseLayer::zeros(width, latent_dim, Activation::Linear),
        })
    }

    /// Heads start small so the initial posteriors are nearly identical and
    /// the permutation regularizer starts near zero instead of swamping the
    /// reconstruction signal. The log-variance bias starts at -2 to keep
    /// early latent samples from drowning in unit-variance noise.
    pub fn init(&mut self, rng: &mut Rng) {
        self.trunk.init(rng);
        self.mu_head.init_scaled(rng, 0.1);
        self.logvar_head.init_scaled(rng, 0.1);
        for b in self.logvar_head.bias_mut() {
            *b = R::of(-2.0);
        }
    }

    pub fn in_dim(&self) -> usize {
        self.trunk.in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.mu_head.out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count() + self.mu_head.param_count() + self.logvar_head.param_count()
    }

    /// Returns `(mu, log_var_raw, cache)`. The raw log-variance is clamped
    /// downstream when the Gaussian is constructed.
    pub fn forward(&self, x: &[R]) -> Result<(Vec<R>, Vec<R>, EncoderCache<R>)> {
        let (trunk_out, trunk_cache) = self.trunk.forward(x)?;
        let mut mu_pre = Vec::new();
        let mut mu = Vec::new();
        self.mu_head.forward_into(&trunk_out, &mut mu_pre, &mut mu);
        let mut lv_pre = Vec::new();
        let mut lv = Vec::new();
        self.logvar_head.forward_into(&trunk_out, &mut lv_pre, &mut lv);
        Ok((mu, lv, EncoderCache { trunk: trunk_cache, trunk_out, mu_pre, lv_pre }))
    }

    /// Accumulate gradients (layout: trunk, mu head, logvar head) given
    /// upstream gradients for the two heads; returns dL/dx.
    pub fn backward(
        &self,
        cache: &EncoderCache<R>,
        dmu: &[R],
        dlogvar: &[R],
        grads: &mut [R],
    ) -> Result<Vec<R>> {
        if grads.len() != self.param_count() {
            return Err(Error::dim("encoder gradient buffer size mismatch"));
        }
        if dmu.len() != self.latent_dim() || dlogvar.len() != self.latent_dim() {
            return Err(Error::dim("encoder upstream gradient size mismatch"));
        }
        let trunk_n = self.trunk.param_count();
        let mu_n = self.mu_head.param_count();
        let (trunk_g, heads_g) = grads.split_at_mut(trunk_n);
        let (mu_g, lv_g) = heads_g.split_at_mut(mu_n);

        let mut dtrunk = self.mu_head.backward_into(&cache.trunk_out, &cache.mu_pre, dmu, mu_g);
        let dtrunk_lv =
            self.logvar_head.backward_into(&cache.trunk_out, &cache.lv_pre, dlogvar, lv_g);
        for (a, b) in dtrunk.iter_mut().zip(dtrunk_lv) {
            *a += b;
        }
        self.trunk.backward(&cache.trunk, &dtrunk, trunk_g)
    }

    pub fn write_params(&self, out: &mut Vec<R>) {
        self.trunk.write_params(out);
        self.mu_head.write_params(out);
        self.logvar_head.write_params(out);
    }

    pub fn read_params(&mut self, src: &[R]) -> Result<()> {
        if src.len() != self.param_count() {
            return Err(Error::dim("encoder parameter slice size mismatch"));
        }
        let trunk_n = self.trunk.param_count();
        let mu_n = self.mu_head.param_count();
        self.trunk.read_params(&src[..trunk_n])?;
        self.mu_head.read_params(&src[trunk_n..trunk_n + mu_n]);
        self.logvar_head.read_params(&src[trunk_n + mu_n..]);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn forward_produces_two_heads_and_backward_matches_finite_differences() {
        let mut enc = EncoderNet::<f64>::new(3, &[5], 2).unwrap();
        enc.init(&mut Rng::seeded(3));
        let x = [0.2, -0.8, 1.4];
        let (mu, lv, cache) = enc.forward(&x).unwrap();
        assert_eq!(mu.len(), 2);
        assert_eq!(lv.len(), 2);

        // loss = sum(mu) + 2 * sum(lv)
        let loss = |enc: &EncoderNet<f64>| -> f64 {
            let (mu, lv, _) = enc.forward(&x).unwrap();
            mu.iter().sum::<f64>() + 2.0 * lv.iter().sum::<f64>()
        };
        let mut analytic = vec![0.0; enc.param_count()];
        enc.backward(&cache, &[1.0, 1.0], &[2.0, 2.0], &mut analytic).unwrap();

        let mut params = Vec::new();
        enc.write_params(&mut params);
        let h = 1e-5;
        for idx in 0..params.len() {
            let mut probe = enc.clone();
            let mut p = params.clone();
            p[idx] += h;
            probe.read_params(&p).unwrap();
            let up = loss(&probe);
            p[idx] -= 2.0 * h;
            probe.read_params(&p).unwrap();
            let down = loss(&probe);
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic[idx].abs().max(numeric.abs()).max(1.0);
            assert!(
                (analytic[idx] - numeric).abs() / denom < 1e-6,
                "param {idx}: analytic {} vs numeric {numeric}",
                analytic[idx]
            );
        }
    }
}
