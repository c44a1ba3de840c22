//! Model parameters (L encoders, L·(L−1) correspondence maps, L decoders) as
//! one flat parameter vector, plus the differentiable masked ELBO: a forward
//! pass over the latent grid and a hand-written reverse pass through the
//! decoders, the reparameterized samples, the row fusions, both sides of
//! every KL term, the correspondence maps, and the encoders.

use crate::gaussian::{normalized_geometric_mean, DiagonalGaussian, LOG_VAR_BOUND};
use crate::latent::LatentMatrix;
use crate::neural::{Activation, DenseCache, DenseNet, EncoderCache, EncoderNet};
use crate::objective::{
    kl_omega_sum, kl_z_sum, omega_priors, recon_log_likelihood, row_consensus, LossBreakdown,
    ObjectiveConfig, ObjectiveKind, PriorMode, SampleNoise, Side,
};
use crate::permutation::PermutationBundle;
use crate::rng::Rng;
use crate::{Error, Real, Result};

/// Hidden-layer widths. Encoder trunks use `enc_hidden` (relu); decoders
/// mirror it in reverse; correspondence maps use `corr_hidden` (leaky relu)
/// and may be empty, which yields a single affine map.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelArch {
    pub enc_hidden: Vec<usize>,
    pub corr_hidden: Vec<usize>,
}

impl Default for ModelArch {
    fn default() -> Self {
        ModelArch { enc_hidden: vec![64, 64], corr_hidden: vec![32] }
    }
}

impl ModelArch {
    /// The wide recipe used for full-size tabular benchmarks.
    pub fn large_tabular() -> Self {
        ModelArch { enc_hidden: vec![256, 256, 1024], corr_hidden: vec![128, 256, 128] }
    }

    /// Uniform small widths, handy for gradient checks.
    pub fn uniform(width: usize) -> Self {
        ModelArch { enc_hidden: vec![width], corr_hidden: vec![width] }
    }
}

/// All trainable parameters. Flattening order: encoders by view, then
/// correspondence maps by (source, target), then decoders by view.
#[derive(Debug, Clone)]
pub struct ModelParams<R> {
    l: usize,
    d: usize,
    k: usize,
    view_dims: Vec<usize>,
    arch: ModelArch,
    seed: u64,
    pub encoders: Vec<EncoderNet<R>>,
    pub correspondences: Vec<Vec<Option<DenseNet<R>>>>, // [source-1][target-1]
    pub decoders: Vec<DenseNet<R>>,
    segments: Vec<(String, usize, usize)>, // (name, offset, len)
    enc_offsets: Vec<usize>,
    corr_offsets: Vec<Vec<usize>>,
    dec_offsets: Vec<usize>,
    total_params: usize,
}

impl<R: Real> ModelParams<R> {
    pub fn init(
        l: usize,
        view_dims: &[usize],
        d: usize,
        k: usize,
        arch: ModelArch,
        seed: u64,
    ) -> Result<Self> {
        if l < 2 {
            return Err(Error::Config(format!("model needs at least 2 views, got {l}")));
        }
        if view_dims.len() != l {
            return Err(Error::Config(format!(
                "{} view dims supplied for {l} views",
                view_dims.len()
            )));
        }
        if view_dims.iter().any(|&dv| dv == 0) {
            return Err(Error::Config("view dims must be positive".into()));
        }
        if d == 0 || k == 0 || k > d {
            return Err(Error::Config(format!("latent dims must satisfy 1 <= k <= d, got d={d} k={k}")));
        }

        let mut encoders = Vec::with_capacity(l);
        for &dv in view_dims {
            encoders.push(EncoderNet::new(dv, &arch.enc_hidden, d)?);
        }
        let mut corr_dims = vec![d];
        corr_dims.extend_from_slice(&arch.corr_hidden);
        corr_dims.push(d);
        let mut correspondences = Vec::with_capacity(l);
        for source in 0..l {
            let mut row = Vec::with_capacity(l);
            for target in 0..l {
                if source == target {
                    row.push(None);
                } else {
                    row.push(Some(DenseNet::from_dims(
                        &corr_dims,
                        Activation::LeakyRelu,
                        Activation::Linear,
                    )?));
                }
            }
            correspondences.push(row);
        }
        let mut decoders = Vec::with_capacity(l);
        let mut dec_hidden: Vec<usize> = arch.enc_hidden.clone();
        dec_hidden.reverse();
        for &dv in view_dims {
            let mut dims = vec![k + d];
            dims.extend_from_slice(&dec_hidden);
            dims.push(dv);
            decoders.push(DenseNet::from_dims(&dims, Activation::Relu, Activation::Linear)?);
        }

        let mut model = ModelParams {
            l,
            d,
            k,
            view_dims: view_dims.to_vec(),
            arch,
            seed,
            encoders,
            correspondences,
            decoders,
            segments: Vec::new(),
            enc_offsets: Vec::new(),
            corr_offsets: Vec::new(),
            dec_offsets: Vec::new(),
            total_params: 0,
        };
        model.build_layout();

        let mut rng = Rng::with_stream(seed, 0x494E4954); // "INIT"
        for enc in &mut model.encoders {
            enc.init(&mut rng);
        }
        for row in &mut model.correspondences {
            for net in row.iter_mut().flatten() {
                net.init(&mut rng);
            }
        }
        for dec in &mut model.decoders {
            dec.init(&mut rng);
        }
        Ok(model)
    }

    fn build_layout(&mut self) {
        let mut offset = 0;
        self.segments.clear();
        self.enc_offsets.clear();
        for (v, enc) in self.encoders.iter().enumerate() {
            self.enc_offsets.push(offset);
            let n = enc.param_count();
            self.segments.push((format!("encoders[{}]", v + 1), offset, n));
            offset += n;
        }
        self.corr_offsets = vec![vec![usize::MAX; self.l]; self.l];
        for (source, row) in self.correspondences.iter().enumerate() {
            for (target, net) in row.iter().enumerate() {
                if let Some(net) = net {
                    self.corr_offsets[source][target] = offset;
                    let n = net.param_count();
                    self.segments
                        .push((format!("correspondences[{}<-{}]", target + 1, source + 1), offset, n));
                    offset += n;
                }
            }
        }
        self.dec_offsets.clear();
        for (v, dec) in self.decoders.iter().enumerate() {
            self.dec_offsets.push(offset);
            let n = dec.param_count();
            self.segments.push((format!("decoders[{}]", v + 1), offset, n));
            offset += n;
        }
        self.total_params = offset;
    }

    pub fn view_count(&self) -> usize {
        self.l
    }

    pub fn latent_dim(&self) -> usize {
        self.d
    }

    pub fn shared_dim(&self) -> usize {
        self.k
    }

    pub fn view_dims(&self) -> &[usize] {
        &self.view_dims
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.total_params
    }

    /// Human-readable location of a flat parameter index.
    pub fn param_path(&self, index: usize) -> String {
        for (name, offset, len) in &self.segments {
            if index >= *offset && index < offset + len {
                return format!("{name}[{}]", index - offset);
            }
        }
        format!("param[{index}]")
    }

    pub fn flatten_params(&self) -> Vec<R> {
        let mut out = Vec::with_capacity(self.total_params);
        for enc in &self.encoders {
            enc.write_params(&mut out);
        }
        for row in &self.correspondences {
            for net in row.iter().flatten() {
                net.write_params(&mut out);
            }
        }
        for dec in &self.decoders {
            dec.write_params(&mut out);
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[R]) -> Result<()> {
        if flat.len() != self.total_params {
            return Err(Error::dim(format!(
                "flat parameter vector has {} entries, model has {}",
                flat.len(),
                self.total_params
            )));
        }
        for (v, enc) in self.encoders.iter_mut().enumerate() {
            let o = self.enc_offsets[v];
            enc.read_params(&flat[o..o + enc.param_count()])?;
        }
        for (source, row) in self.correspondences.iter_mut().enumerate() {
            for (target, net) in row.iter_mut().enumerate() {
                if let Some(net) = net {
                    let o = self.corr_offsets[source][target];
                    net.read_params(&flat[o..o + net.param_count()])?;
                }
            }
        }
        for (v, dec) in self.decoders.iter_mut().enumerate() {
            let o = self.dec_offsets[v];
            dec.read_params(&flat[o..o + dec.param_count()])?;
        }
        Ok(())
    }

    /// Overwrite every correspondence map with an exact identity; requires
    /// `corr_hidden` to be empty (single affine layer).
    pub fn set_identity_correspondences(&mut self) -> Result<()> {
        if !self.arch.corr_hidden.is_empty() {
            return Err(Error::Config(
                "identity correspondences need corr_hidden = [] (single affine layer)".into(),
            ));
        }
        let d = self.d;
        let mut params = Vec::with_capacity(d * d + d);
        for o in 0..d {
            for i in 0..d {
                params.push(if i == o { R::one() } else { R::zero() });
            }
        }
        params.extend(std::iter::repeat(R::zero()).take(d));
        for row in &mut self.correspondences {
            for net in row.iter_mut().flatten() {
                net.read_params(&params)?;
            }
        }
        Ok(())
    }

    fn check_views(&self, views: &[Vec<R>], observed: &[usize]) -> Result<()> {
        if views.len() != self.l {
            return Err(Error::dim(format!("{} views supplied for an L = {} model", views.len(), self.l)));
        }
        for &v in observed {
            if v < 1 || v > self.l {
                return Err(Error::contract(format!("observed view {v} outside 1..={}", self.l)));
            }
            if views[v - 1].len() != self.view_dims[v - 1] {
                return Err(Error::dim(format!(
                    "view {v} has {} features, model expects {}",
                    views[v - 1].len(),
                    self.view_dims[v - 1]
                )));
            }
        }
        Ok(())
    }

    /// Build the latent grid for one sample (the forward construction only).
    pub fn latent_matrix(&self, views: &[Vec<R>], observed: &[usize]) -> Result<LatentMatrix<R>> {
        self.encode_grid(views, observed).map(|(_, m)| m)
    }

    fn encode_grid(&self, views: &[Vec<R>], observed: &[usize]) -> Result<(GridForward<R>, LatentMatrix<R>)> {
        self.check_views(views, observed)?;
        let l = self.l;
        let mut fwd = GridForward::empty(l);
        let mut grid: Vec<Option<(Vec<R>, Vec<R>)>> = vec![None; l * l]; // (mu, lv_raw)

        for &v in observed {
            let (mu, lv_raw, cache) = self.encoders[v - 1].forward(&views[v - 1])?;
            ensure_finite(&mu, "encoder mean", v)?;
            ensure_finite(&lv_raw, "encoder log_var", v)?;
            let lv = clamp_vec(&lv_raw);
            for target in 1..=l {
                if target == v {
                    continue;
                }
                let net = self.correspondences[v - 1][target - 1].as_ref().expect("off-diagonal");
                let (mu_t, mu_cache) = net.forward(&mu)?;
                let (lv_t, lv_cache) = net.forward(&lv)?;
                ensure_finite(&mu_t, "correspondence mean", target)?;
                ensure_finite(&lv_t, "correspondence log_var", target)?;
                fwd.corr_caches[(v - 1) * l + (target - 1)] = Some((mu_cache, lv_cache));
                grid[(v - 1) * l + (target - 1)] = Some((mu_t, lv_t));
            }
            grid[(v - 1) * l + (v - 1)] = Some((mu, lv_raw));
            fwd.enc_caches[v - 1] = Some(cache);
        }

        fwd.lv_raw = grid.iter().map(|e| e.as_ref().map(|(_, lv)| lv.clone())).collect();
        let matrix = LatentMatrix::from_fn(l, self.d, observed, |v, c| {
            let (mu, lv_raw) = grid[(v - 1) * l + (c - 1)].as_ref().expect("observed entry");
            DiagonalGaussian::new(mu.clone(), lv_raw.clone())
        })?;
        Ok((fwd, matrix))
    }

    /// Deterministic decode of view `n` from consensus and latent means.
    pub fn decode_mean(&self, n: usize, omega_mean: &[R], z_mean: &[R]) -> Result<Vec<R>> {
        if omega_mean.len() != self.k || z_mean.len() != self.d {
            return Err(Error::dim(format!(
                "decoder {n} expects k = {} and d = {} inputs, got {} and {}",
                self.k,
                self.d,
                omega_mean.len(),
                z_mean.len()
            )));
        }
        let mut input = omega_mean.to_vec();
        input.extend_from_slice(z_mean);
        self.decoders[n - 1].output(&input)
    }

    /// The masked ELBO for one sample. With `grads`, parameter gradients of
    /// `total` accumulate into the flat buffer (layout = `flatten_params`).
    pub fn elbo(
        &self,
        views: &[Vec<R>],
        observed: &[usize],
        bundle: &PermutationBundle,
        noise: &SampleNoise<R>,
        cfg: &ObjectiveConfig,
        kind: ObjectiveKind,
        grads: Option<&mut [R]>,
    ) -> Result<LossBreakdown<R>> {
        cfg.validate()?;
        if noise.z.len() != self.l || noise.omega.len() != self.l {
            return Err(Error::dim("noise is not sized for L views"));
        }
        for n in noise.z.iter() {
            if n.len() != self.d {
                return Err(Error::dim("z noise dim mismatch"));
            }
        }
        for n in noise.omega.iter() {
            if n.len() != self.k {
                return Err(Error::dim("omega noise dim mismatch"));
            }
        }

        let (fwd, z0) = self.encode_grid(views, observed)?;
        let z1 = z0.apply_column_permutations(bundle)?;

        let half = R::of(0.5);
        let sides: Vec<(Side, R)> = match kind {
            ObjectiveKind::Basic => vec![(Side::Basic, R::one())],
            ObjectiveKind::Permuted => vec![(Side::Permuted, R::one())],
            ObjectiveKind::Combined => vec![(Side::Basic, half), (Side::Permuted, half)],
        };

        // forward: reconstructions (with caches) and KL values
        let mut recon = R::zero();
        let mut kl_z = R::zero();
        let mut kl_omega = R::zero();
        let mut side_states = Vec::with_capacity(sides.len());
        for &(side, weight) in &sides {
            let state = self.recon_forward(views, &z0, &z1, bundle, noise, side)?;
            recon += weight * state.recon;
            kl_z += weight * kl_z_sum(&z0, bundle, cfg.prior_mode, side)?;
            kl_omega += weight * kl_omega_sum(&z0, &z1, self.k, cfg.prior_mode, side)?;
            side_states.push((side, weight, state));
        }
        let breakdown = LossBreakdown::assemble(recon, kl_z, kl_omega, cfg);
        if let Some(term) = breakdown.non_finite_term() {
            return Err(Error::non_finite(term, " in objective".to_string()));
        }

        if let Some(grads) = grads {
            if grads.len() != self.total_params {
                return Err(Error::dim("gradient buffer does not match parameter count"));
            }
            self.backward(views, observed, bundle, noise, cfg, &z0, &z1, &fwd, &side_states, grads)?;
        }
        Ok(breakdown)
    }

    fn recon_forward(
        &self,
        views: &[Vec<R>],
        z0: &LatentMatrix<R>,
        z1: &LatentMatrix<R>,
        bundle: &PermutationBundle,
        noise: &SampleNoise<R>,
        side: Side,
    ) -> Result<SideState<R>> {
        let matrix = match side {
            Side::Basic => z0,
            Side::Permuted => z1,
        };
        let omegas = row_consensus(matrix, self.k)?;
        let mut state = SideState { recon: R::zero(), rows: Vec::new(), omegas };
        for idx in 0..state.omegas.len() {
            let (n, omega) = &state.omegas[idx];
            let n = *n;
            // the permuted diagonal (n, n) lives at (sigma_n(n), n) in the base grid
            let source = match side {
                Side::Basic => n,
                Side::Permuted => bundle.column(n).apply(n),
            };
            let z_dist = z0.entry(source, n).expect("observed row");
            let z_sample = reparam(z_dist, &noise.z[n - 1]);
            let w_sample = reparam(omega, &noise.omega[n - 1]);
            let mut input = w_sample;
            input.extend(z_sample);
            let (x_hat, cache) = self.decoders[n - 1].forward(&input)?;
            state.recon += recon_log_likelihood(&views[n - 1], &x_hat)?;
            state.rows.push(ReconRow { n, z_coords: (source, n), x_hat, cache });
        }
        Ok(state)
    }

    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        views: &[Vec<R>],
        observed: &[usize],
        bundle: &PermutationBundle,
        noise: &SampleNoise<R>,
        cfg: &ObjectiveConfig,
        z0: &LatentMatrix<R>,
        z1: &LatentMatrix<R>,
        fwd: &GridForward<R>,
        side_states: &[(Side, R, SideState<R>)],
        grads: &mut [R],
    ) -> Result<()> {
        let l = self.l;
        let d = self.d;
        let k = self.k;
        let beta_z = R::of(cfg.beta_z);
        let beta_omega = R::of(cfg.beta_omega);
        let half = R::of(0.5);

        let mut grid = GradGrid::zeros(l, d);
        // consensus-parameter gradients per side: [side][view] -> (dmu, dlv);
        // both sides can receive gradients (the basic objective's prior is the
        // permuted side's consensus and vice versa), so both are kept and
        // flushed regardless of which sides appear in `side_states`.
        let mut omega_grads: Vec<Vec<(Vec<R>, Vec<R>)>> =
            vec![vec![(vec![R::zero(); k], vec![R::zero(); k]); l]; 2];
        let omegas = [row_consensus(z0, k)?, row_consensus(z1, k)?];
        let side_index = |side: Side| match side {
            Side::Basic => 0usize,
            Side::Permuted => 1usize,
        };

        // 1. reconstruction terms
        for (side, weight, state) in side_states {
            let si = side_index(*side);
            for row in &state.rows {
                let n = row.n;
                let x = &views[n - 1];
                let dxhat: Vec<R> =
                    row.x_hat.iter().zip(x).map(|(&xh, &xv)| *weight * (xh - xv)).collect();
                let o = self.dec_offsets[n - 1];
                let len = self.decoders[n - 1].param_count();
                let din =
                    self.decoders[n - 1].backward(&row.cache, &dxhat, &mut grads[o..o + len])?;
                let (dw, dz) = din.split_at(k);

                let omega = &state.omegas.iter().find(|(m, _)| *m == n).expect("row").1;
                let (om, olv) = &mut omega_grads[si][n - 1];
                for j in 0..k {
                    om[j] += dw[j];
                    olv[j] += dw[j] * half * (half * omega.log_var()[j]).exp() * noise.omega[n - 1][j];
                }

                let z_dist = z0.entry(row.z_coords.0, row.z_coords.1).expect("entry");
                let mut dmu = vec![R::zero(); d];
                let mut dlv = vec![R::zero(); d];
                for j in 0..d {
                    dmu[j] = dz[j];
                    dlv[j] = dz[j] * half * (half * z_dist.log_var()[j]).exp() * noise.z[n - 1][j];
                }
                grid.add(row.z_coords, &dmu, &dlv);
            }
        }

        // 2. latent KL terms
        for (side, weight, _) in side_states {
            let w = *weight * beta_z;
            match cfg.prior_mode {
                PriorMode::Cyclic | PriorMode::RandomPerm => {
                    for col in 1..=l {
                        let sigma = match side {
                            Side::Basic => bundle.column(col).clone(),
                            Side::Permuted => bundle.column(col).inverse(),
                        };
                        for &v in observed {
                            let q_coords = (sigma.apply(v), col);
                            if q_coords == (v, col) {
                                continue; // self term: zero value, zero gradient
                            }
                            let p = z0.entry(v, col).expect("entry");
                            let q = z0.entry(q_coords.0, q_coords.1).expect("entry");
                            let (dpm, dpl, dqm, dql) = kl_grads(p, q, w);
                            grid.add((v, col), &dpm, &dpl);
                            grid.add(q_coords, &dqm, &dql);
                        }
                    }
                }
                PriorMode::StandardNormal => {
                    let standard = DiagonalGaussian::standard(d);
                    for col in 1..=l {
                        for &v in observed {
                            let p = z0.entry(v, col).expect("entry");
                            let (dpm, dpl, _, _) = kl_grads(p, &standard, w);
                            grid.add((v, col), &dpm, &dpl);
                        }
                    }
                }
                PriorMode::Fusion => {
                    for col in 1..=l {
                        let cell = z0.single_view_cell(col)?;
                        let prior = normalized_geometric_mean(&cell, d)?;
                        let mut dqm = vec![R::zero(); d];
                        let mut dql = vec![R::zero(); d];
                        for &v in observed {
                            let p = z0.entry(v, col).expect("entry");
                            let (dpm, dpl, qm, ql) = kl_grads(p, &prior, w);
                            grid.add((v, col), &dpm, &dpl);
                            for j in 0..d {
                                dqm[j] += qm[j];
                                dql[j] += ql[j];
                            }
                        }
                        let coords: Vec<(usize, usize)> =
                            observed.iter().map(|&v| (v, col)).collect();
                        fusion_backward_grid(z0, &coords, d, &prior, &dqm, &dql, &mut grid);
                    }
                }
                PriorMode::Diagonal => {
                    for &col in observed {
                        let q = z0.entry(col, col).expect("entry");
                        for &v in observed {
                            if v == col {
                                continue; // self term
                            }
                            let p = z0.entry(v, col).expect("entry");
                            let (dpm, dpl, dqm, dql) = kl_grads(p, q, w);
                            grid.add((v, col), &dpm, &dpl);
                            grid.add((col, col), &dqm, &dql);
                        }
                    }
                }
            }
        }

        // 3. consensus KL terms
        for (side, weight, _) in side_states {
            let w = *weight * beta_omega;
            let si = side_index(*side);
            match cfg.prior_mode {
                PriorMode::Cyclic | PriorMode::RandomPerm => {
                    // prior of side X's row n is the other side's row n
                    let oi = 1 - si;
                    for ((n, p), (_, q)) in omegas[si].iter().zip(&omegas[oi]) {
                        let (dpm, dpl, dqm, dql) = kl_grads(p, q, w);
                        let (pm, plv) = &mut omega_grads[si][n - 1];
                        add_into(pm, &dpm);
                        add_into(plv, &dpl);
                        let (qm, qlv) = &mut omega_grads[oi][n - 1];
                        add_into(qm, &dqm);
                        add_into(qlv, &dql);
                    }
                }
                PriorMode::StandardNormal => {
                    let q = DiagonalGaussian::standard(k);
                    for (n, p) in &omegas[si] {
                        let (dpm, dpl, _, _) = kl_grads(p, &q, w);
                        let (pm, plv) = &mut omega_grads[si][*n - 1];
                        add_into(pm, &dpm);
                        add_into(plv, &dpl);
                    }
                }
                PriorMode::Fusion => {
                    // one fused prior over the side's own consensus set
                    let priors = omega_priors(cfg.prior_mode, z0, z1, k, *side)?;
                    let prior = &priors[0].1;
                    let mut dqm = vec![R::zero(); k];
                    let mut dql = vec![R::zero(); k];
                    for (n, p) in &omegas[si] {
                        let (dpm, dpl, qm, ql) = kl_grads(p, prior, w);
                        let (pm, plv) = &mut omega_grads[si][*n - 1];
                        add_into(pm, &dpm);
                        add_into(plv, &dpl);
                        add_into(&mut dqm, &qm);
                        add_into(&mut dql, &ql);
                    }
                    // spread through the normalized geometric mean into the
                    // side's consensus variables
                    let mut sums = vec![R::zero(); k];
                    for (_, g) in &omegas[si] {
                        for j in 0..k {
                            sums[j] += (-g.log_var()[j]).exp();
                        }
                    }
                    for (n, g) in &omegas[si] {
                        let (pm, plv) = &mut omega_grads[si][*n - 1];
                        for j in 0..k {
                            let lam = (-g.log_var()[j]).exp();
                            let share = lam / sums[j];
                            pm[j] += dqm[j] * share;
                            plv[j] += dql[j] * share + dqm[j] * share * (prior.mean()[j] - g.mean()[j]);
                        }
                    }
                }
                PriorMode::Diagonal => {
                    let priors = omega_priors(cfg.prior_mode, z0, z1, k, *side)?;
                    let prior = &priors[0].1;
                    let mut dqm = vec![R::zero(); k];
                    let mut dql = vec![R::zero(); k];
                    for (n, p) in &omegas[si] {
                        let (dpm, dpl, qm, ql) = kl_grads(p, prior, w);
                        let (pm, plv) = &mut omega_grads[si][*n - 1];
                        add_into(pm, &dpm);
                        add_into(plv, &dpl);
                        add_into(&mut dqm, &qm);
                        add_into(&mut dql, &ql);
                    }
                    // prior constituents are the diagonal entries of the base grid
                    let coords: Vec<(usize, usize)> = observed.iter().map(|&v| (v, v)).collect();
                    fusion_backward_grid(z0, &coords, k, prior, &dqm, &dql, &mut grid);
                }
            }
        }

        // 4. row fusions: consensus gradients flow into first-k dims of rows.
        // Both sides are flushed; either can carry prior-side gradients.
        for side in [Side::Basic, Side::Permuted] {
            let si = side_index(side);
            for (n, omega) in &omegas[si] {
                let (dm, dlv) = &omega_grads[si][*n - 1];
                if dm.iter().all(|x| *x == R::zero()) && dlv.iter().all(|x| *x == R::zero()) {
                    continue;
                }
                let coords: Vec<(usize, usize)> = (1..=l)
                    .map(|col| match side {
                        Side::Basic => (*n, col),
                        Side::Permuted => (bundle.column(col).apply(*n), col),
                    })
                    .collect();
                fusion_backward_grid(z0, &coords, k, omega, dm, dlv, &mut grid);
            }
        }

        // 5. correspondence maps (before encoders: they add to diagonal grads)
        for &v in observed {
            for target in 1..=l {
                if target == v {
                    continue;
                }
                let idx = (v - 1) * l + (target - 1);
                let (mu_cache, lv_cache) = fwd.corr_caches[idx].as_ref().expect("cache");
                let net = self.correspondences[v - 1][target - 1].as_ref().expect("net");
                let o = self.corr_offsets[v - 1][target - 1];
                let len = net.param_count();
                let dmu = grid.mu[idx].clone();
                let dlv = mask_clamped(&grid.lv[idx], fwd.lv_raw[idx].as_ref().expect("raw"));
                let din_mu = net.backward(mu_cache, &dmu, &mut grads[o..o + len])?;
                let din_lv = net.backward(lv_cache, &dlv, &mut grads[o..o + len])?;
                let diag = (v - 1) * l + (v - 1);
                add_into(&mut grid.mu[diag], &din_mu);
                add_into(&mut grid.lv[diag], &din_lv);
            }
        }

        // 6. encoders
        for &v in observed {
            let idx = (v - 1) * l + (v - 1);
            let cache = fwd.enc_caches[v - 1].as_ref().expect("cache");
            let dmu = grid.mu[idx].clone();
            let dlv = mask_clamped(&grid.lv[idx], fwd.lv_raw[idx].as_ref().expect("raw"));
            let o = self.enc_offsets[v - 1];
            let len = self.encoders[v - 1].param_count();
            self.encoders[v - 1].backward(cache, &dmu, &dlv, &mut grads[o..o + len])?;
        }
        Ok(())
    }

}

struct GridForward<R> {
    enc_caches: Vec<Option<EncoderCache<R>>>,
    corr_caches: Vec<Option<(DenseCache<R>, DenseCache<R>)>>,
    lv_raw: Vec<Option<Vec<R>>>,
}

impl<R> GridForward<R> {
    fn empty(l: usize) -> Self {
        GridForward {
            enc_caches: (0..l).map(|_| None).collect(),
            corr_caches: (0..l * l).map(|_| None).collect(),
            lv_raw: Vec::new(),
        }
    }
}

struct ReconRow<R> {
    n: usize,
    z_coords: (usize, usize),
    x_hat: Vec<R>,
    cache: DenseCache<R>,
}

struct SideState<R> {
    recon: R,
    rows: Vec<ReconRow<R>>,
    omegas: Vec<(usize, DiagonalGaussian<R>)>,
}

struct GradGrid<R> {
    l: usize,
    mu: Vec<Vec<R>>,
    lv: Vec<Vec<R>>,
}

impl<R: Real> GradGrid<R> {
    fn zeros(l: usize, d: usize) -> Self {
        GradGrid { l, mu: vec![vec![R::zero(); d]; l * l], lv: vec![vec![R::zero(); d]; l * l] }
    }

    fn add(&mut self, coords: (usize, usize), dmu: &[R], dlv: &[R]) {
        let idx = (coords.0 - 1) * self.l + (coords.1 - 1);
        for (a, b) in self.mu[idx].iter_mut().zip(dmu) {
            *a += *b;
        }
        for (a, b) in self.lv[idx].iter_mut().zip(dlv) {
            *a += *b;
        }
    }
}

fn add_into<R: Real>(acc: &mut [R], inc: &[R]) {
    for (a, b) in acc.iter_mut().zip(inc) {
        *a += *b;
    }
}

fn reparam<R: Real>(g: &DiagonalGaussian<R>, eps: &[R]) -> Vec<R> {
    let half = R::of(0.5);
    g.mean()
        .iter()
        .zip(g.log_var())
        .zip(eps)
        .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
        .collect()
}

fn clamp_vec<R: Real>(raw: &[R]) -> Vec<R> {
    let bound = R::of(LOG_VAR_BOUND);
    raw.iter().map(|&x| x.min(bound).max(-bound)).collect()
}

/// Zero the gradient where the raw log-variance was clamped.
fn mask_clamped<R: Real>(grad: &[R], raw: &[R]) -> Vec<R> {
    let bound = R::of(LOG_VAR_BOUND);
    grad.iter()
        .zip(raw)
        .map(|(&g, &r)| if r.abs() < bound { g } else { R::zero() })
        .collect()
}

fn ensure_finite<R: Real>(xs: &[R], term: &str, view: usize) -> Result<()> {
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::non_finite(term, format!(" (view {view})")));
    }
    Ok(())
}

/// Gradients of KL[p || q] with respect to (mu, log_var) of both sides,
/// scaled by `w`.
fn kl_grads<R: Real>(
    p: &DiagonalGaussian<R>,
    q: &DiagonalGaussian<R>,
    w: R,
) -> (Vec<R>, Vec<R>, Vec<R>, Vec<R>) {
    let d = p.dim();
    let half = R::of(0.5);
    let mut dpm = vec![R::zero(); d];
    let mut dpl = vec![R::zero(); d];
    let mut dqm = vec![R::zero(); d];
    let mut dql = vec![R::zero(); d];
    for j in 0..d {
        let var_p = p.log_var()[j].exp();
        let var_q = q.log_var()[j].exp();
        let diff = p.mean()[j] - q.mean()[j];
        dpm[j] = w * diff / var_q;
        dqm[j] = -dpm[j];
        dpl[j] = w * (-half + var_p / (R::of(2.0) * var_q));
        dql[j] = w * (half - (var_p + diff * diff) / (R::of(2.0) * var_q));
    }
    (dpm, dpl, dqm, dql)
}

/// Backward through a precision-weighted fusion whose constituents are grid
/// entries (their first `k` dims). `fused` carries the fused means; `dmu`,
/// `dlv` are upstream gradients on the fused parameters.
fn fusion_backward_grid<R: Real>(
    z0: &LatentMatrix<R>,
    coords: &[(usize, usize)],
    k: usize,
    fused: &DiagonalGaussian<R>,
    dmu: &[R],
    dlv: &[R],
    grid: &mut GradGrid<R>,
) {
    let mut sums = vec![R::zero(); k];
    for &(v, c) in coords {
        let g = z0.entry(v, c).expect("entry");
        for j in 0..k {
            sums[j] += (-g.log_var()[j]).exp();
        }
    }
    for &(v, c) in coords {
        let g = z0.entry(v, c).expect("entry");
        let mut dm = vec![R::zero(); z0.dim()];
        let mut dl = vec![R::zero(); z0.dim()];
        for j in 0..k {
            let lam = (-g.log_var()[j]).exp();
            let share = lam / sums[j];
            dm[j] = dmu[j] * share;
            dl[j] = dlv[j] * share + dmu[j] * share * (fused.mean()[j] - g.mean()[j]);
        }
        grid.add((v, c), &dm, &dl);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{elbo_basic, elbo_combined, elbo_permuted};
    use crate::permutation::make_bundle;

    fn toy_model(l: usize, d: usize, k: usize, seed: u64) -> ModelParams<f64> {
        let view_dims: Vec<usize> = (0..l).map(|v| 3 + v).collect();
        ModelParams::init(l, &view_dims, d, k, ModelArch::uniform(6), seed).unwrap()
    }

    fn toy_sample(model: &ModelParams<f64>, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = Rng::seeded(seed);
        model
            .view_dims()
            .iter()
            .map(|&dv| (0..dv).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect()
    }

    #[test]
    fn init_validates_dimensions() {
        assert!(ModelParams::<f64>::init(1, &[3], 4, 2, ModelArch::default(), 0).is_err());
        assert!(ModelParams::<f64>::init(2, &[3], 4, 2, ModelArch::default(), 0).is_err());
        assert!(ModelParams::<f64>::init(2, &[3, 3], 4, 5, ModelArch::default(), 0).is_err());
        assert!(ModelParams::<f64>::init(2, &[3, 0], 4, 2, ModelArch::default(), 0).is_err());
    }

    #[test]
    fn flat_parameter_round_trip() {
        let model = toy_model(3, 4, 2, 7);
        let flat = model.flatten_params();
        assert_eq!(flat.len(), model.param_count());
        let mut other = toy_model(3, 4, 2, 8);
        assert_ne!(other.flatten_params(), flat);
        other.load_flat(&flat).unwrap();
        assert_eq!(other.flatten_params(), flat);
        assert!(model.param_path(0).starts_with("encoders[1]"));
        assert!(model.param_path(model.param_count() - 1).starts_with("decoders[3]"));
    }

    #[test]
    fn latent_grid_construction_follows_the_mask() {
        let model = toy_model(2, 4, 2, 3);
        let sample = toy_sample(&model, 1);
        let grid = model.latent_matrix(&sample, &[1, 2]).unwrap();
        assert_eq!(grid.observed(), &[1, 2]);
        assert!(grid.entry(1, 1).is_some());
        assert!(grid.entry(2, 1).is_some());

        let single = model.latent_matrix(&sample, &[1]).unwrap();
        assert_eq!(single.observed(), &[1]);
        assert!(single.entry(2, 1).is_none());
        assert!(single.entry(1, 2).is_some());
    }

    #[test]
    fn identity_correspondences_copy_the_diagonal() {
        let view_dims = [3usize, 4, 5];
        let arch = ModelArch { enc_hidden: vec![6], corr_hidden: vec![] };
        let mut model = ModelParams::<f64>::init(3, &view_dims, 4, 2, arch, 5).unwrap();
        model.set_identity_correspondences().unwrap();
        let sample = toy_sample(&model, 2);
        let grid = model.latent_matrix(&sample, &[1, 2, 3]).unwrap();
        for v in 1..=3 {
            let diag = grid.entry(v, v).unwrap();
            for col in 1..=3 {
                assert_eq!(grid.entry(v, col).unwrap(), diag);
            }
            // identity correspondences make every row homogeneous, so each
            // complete-view cell repeats the self-encoded latent
            for g in grid.complete_view_cell(v).unwrap() {
                assert_eq!(&g, diag);
            }
        }
    }

    #[test]
    fn elbo_values_match_the_objective_module() {
        let model = toy_model(3, 4, 2, 11);
        let sample = toy_sample(&model, 4);
        let observed = vec![1, 2, 3];
        let mut rng = Rng::seeded(5);
        let bundle = make_bundle(3, &observed, &mut rng).unwrap();
        let noise = SampleNoise::draw(3, 4, 2, &mut rng);
        let cfg = ObjectiveConfig::default();
        let z0 = model.latent_matrix(&sample, &observed).unwrap();

        for (kind, reference) in [
            (ObjectiveKind::Basic, elbo_basic(&sample, &z0, &bundle, &model.decoders, &noise, 2, &cfg).unwrap()),
            (ObjectiveKind::Permuted, elbo_permuted(&sample, &z0, &bundle, &model.decoders, &noise, 2, &cfg).unwrap()),
            (ObjectiveKind::Combined, elbo_combined(&sample, &z0, &bundle, &model.decoders, &noise, 2, &cfg).unwrap()),
        ] {
            let got = model.elbo(&sample, &observed, &bundle, &noise, &cfg, kind, None).unwrap();
            assert!((got.recon - reference.recon).abs() < 1e-12, "{kind:?} recon");
            assert!((got.kl_z - reference.kl_z).abs() < 1e-12, "{kind:?} kl_z");
            assert!((got.kl_omega - reference.kl_omega).abs() < 1e-12, "{kind:?} kl_omega");
            assert!((got.total - reference.total).abs() < 1e-12, "{kind:?} total");
        }
    }

    #[test]
    fn single_view_sample_collapses_the_variants() {
        let model = toy_model(3, 4, 2, 13);
        let sample = toy_sample(&model, 6);
        let mut rng = Rng::seeded(7);
        let bundle = make_bundle(3, &[2], &mut rng).unwrap();
        let noise = SampleNoise::draw(3, 4, 2, &mut rng);
        let cfg = ObjectiveConfig::default();
        let basic =
            model.elbo(&sample, &[2], &bundle, &noise, &cfg, ObjectiveKind::Basic, None).unwrap();
        let combined =
            model.elbo(&sample, &[2], &bundle, &noise, &cfg, ObjectiveKind::Combined, None).unwrap();
        assert_eq!(basic.kl_z, 0.0);
        assert_eq!(basic.kl_omega, 0.0);
        assert!((basic.total - combined.total).abs() < 1e-12);
    }

    fn gradcheck_mode(mode: PriorMode, kind: ObjectiveKind, seed: u64) -> f64 {
        let model = toy_model(3, 4, 2, seed);
        let sample = toy_sample(&model, seed + 1);
        let mut rng = Rng::seeded(seed + 2);
        // partial mask exercises the ragged paths
        let observed = vec![1, 3];
        let bundle = if mode == PriorMode::RandomPerm {
            crate::permutation::make_random_bundle(3, &observed, &mut rng).unwrap()
        } else {
            make_bundle(3, &observed, &mut rng).unwrap()
        };
        let noise = SampleNoise::draw(3, 4, 2, &mut rng);
        let cfg = ObjectiveConfig { prior_mode: mode, ..ObjectiveConfig::default() };

        let params = model.flatten_params();
        let mut analytic = vec![0.0; params.len()];
        model.elbo(&sample, &observed, &bundle, &noise, &cfg, kind, Some(&mut analytic)).unwrap();

        let cell = std::cell::RefCell::new(model);
        let value = |p: &[f64]| -> f64 {
            let mut m = cell.borrow_mut();
            m.load_flat(p).unwrap();
            m.elbo(&sample, &observed, &bundle, &noise, &cfg, kind, None).unwrap().total
        };
        let report = crate::neural::grad_check(value, &params, &analytic, 1e-5, 1e-4);
        assert!(
            report.passed(),
            "mode {mode:?} kind {kind:?}: max rel err {:.3e} at index {} (analytic {:.6e}, numeric {:.6e})",
            report.max_rel_err,
            report.worst_index,
            report.worst_analytic,
            report.worst_numeric
        );
        report.max_rel_err
    }

    #[test]
    fn gradients_match_finite_differences_for_every_prior_mode() {
        for mode in PriorMode::ALL {
            gradcheck_mode(mode, ObjectiveKind::Combined, 21);
        }
    }

    #[test]
    fn gradients_match_finite_differences_for_basic_and_permuted_kinds() {
        gradcheck_mode(PriorMode::Cyclic, ObjectiveKind::Basic, 33);
        gradcheck_mode(PriorMode::Cyclic, ObjectiveKind::Permuted, 34);
    }
}
