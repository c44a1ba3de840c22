//! The training loop: warm-up epochs on the basic (self-view) objective,
//! then the combined objective, with a per-sample pool of precomputed
//! permutation bundles cycled across epochs. Also the checkpoint format:
//! a JSON metadata line followed by a little-endian f64 parameter blob in
//! declaration order.

use std::io::{Read, Write};
use std::path::Path;

use crate::dataset::{Fingerprint, MultiViewDataset};
use crate::model::{ModelArch, ModelParams};
use crate::neural::AdamState;
use crate::objective::{ObjectiveConfig, ObjectiveKind, PriorMode, ReconMode, SampleNoise};
use crate::permutation::{make_bundle, make_random_bundle, PermutationBundle};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Latent dimension of every grid entry.
    pub d: usize,
    /// Shared (consensus) dimension; k = d keeps all dimensions shared, the
    /// right setting for clustering.
    pub k: usize,
    pub beta_z: f64,
    pub beta_omega: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub prior_mode: PriorMode,
    /// Bundles per sample; the persisted fingerprint bundle plus
    /// `perm_pool - 1` drawn before training, cycled by epoch.
    pub perm_pool: usize,
    /// Apply the beta weights during warm-up as well; off by default, the
    /// warm-up phase uses unweighted (beta = 1) KL terms.
    pub warmup_betas: bool,
    pub enc_hidden: Vec<usize>,
    pub corr_hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = ModelArch::default();
        TrainConfig {
            d: 16,
            k: 16,
            beta_z: 5.0,
            beta_omega: 2.5,
            warmup_epochs: 100,
            epochs: 300,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            prior_mode: PriorMode::Cyclic,
            perm_pool: 8,
            warmup_betas: false,
            enc_hidden: arch.enc_hidden,
            corr_hidden: arch.corr_hidden,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k == 0 || self.k > self.d {
            return Err(Error::Config(format!("need 1 <= k <= d, got d={} k={}", self.d, self.k)));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.perm_pool == 0 {
            return Err(Error::Config("perm_pool must be positive".into()));
        }
        self.objective_config().validate()
    }

    pub fn arch(&self) -> ModelArch {
        ModelArch { enc_hidden: self.enc_hidden.clone(), corr_hidden: self.corr_hidden.clone() }
    }

    pub fn objective_config(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            beta_z: self.beta_z,
            beta_omega: self.beta_omega,
            prior_mode: self.prior_mode,
            recon_mode: ReconMode::GaussianUnitVariance,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    pub recon: f64,
    pub kl_z: f64,
    pub kl_omega: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for record in &self.epochs {
            writeln!(out, "{}", serde_json::to_string(record)?)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Mini-batch Adam over the masked ELBO. Deterministic for a fixed seed:
/// batch order, reparameterization noise, bundle pools and the gradient
/// reduction order (ascending position within each batch) are all seeded.
pub fn train(
    dataset: &MultiViewDataset,
    fingerprint: &Fingerprint,
    config: &TrainConfig,
) -> Result<(ModelParams<f64>, TrainLog)> {
    config.validate()?;
    let n = dataset.len();
    if n == 0 {
        return Err(Error::Config("dataset is empty".into()));
    }
    if fingerprint.records.len() != n || fingerprint.l != dataset.view_count() {
        return Err(Error::Config(format!(
            "fingerprint ({} records, L = {}) does not cover the dataset ({} samples, L = {})",
            fingerprint.records.len(),
            fingerprint.l,
            n,
            dataset.view_count()
        )));
    }

    let l = dataset.view_count();
    let view_dims = dataset.view_dims();
    let mut model =
        ModelParams::<f64>::init(l, &view_dims, config.d, config.k, config.arch(), config.seed)?;
    let mut params = model.flatten_params();
    let mut adam = AdamState::<f64>::new(params.len(), config.lr);
    let mut grads = vec![0.0; params.len()];
    let cfg = config.objective_config();
    let warmup_cfg = if config.warmup_betas {
        cfg
    } else {
        ObjectiveConfig { beta_z: 1.0, beta_omega: 1.0, ..cfg }
    };

    // Per-sample bundle pools, fixed before the first epoch. Pool slot 0 is
    // the persisted fingerprint bundle; the random-permutation ablation
    // replaces the whole pool with uniform bijections.
    let pools: Vec<Vec<PermutationBundle>> = (0..n)
        .map(|i| -> Result<Vec<PermutationBundle>> {
            let observed = mask_observed(&fingerprint.records[i].mask);
            let mut rng = Rng::with_stream(config.seed, 0x504f4f4c ^ i as u64); // "POOL"
            let mut pool = Vec::with_capacity(config.perm_pool);
            if config.prior_mode == PriorMode::RandomPerm {
                for _ in 0..config.perm_pool {
                    pool.push(make_random_bundle(l, &observed, &mut rng)?);
                }
            } else {
                pool.push(fingerprint.records[i].bundle.clone());
                for _ in 1..config.perm_pool {
                    pool.push(make_bundle(l, &observed, &mut rng)?);
                }
            }
            Ok(pool)
        })
        .collect::<Result<Vec<_>>>()?;
    let observed_sets: Vec<Vec<usize>> =
        fingerprint.records.iter().map(|r| mask_observed(&r.mask)).collect();

    let mut order_rng = Rng::with_stream(config.seed, 0x4f524452); // "ORDR"
    let mut noise_rng = Rng::with_stream(config.seed, 0x4e4f4953); // "NOIS"
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        let warmup = epoch < config.warmup_epochs;
        let (kind, epoch_cfg) = if warmup {
            (ObjectiveKind::Basic, &warmup_cfg)
        } else {
            (ObjectiveKind::Combined, &cfg)
        };
        order_rng.shuffle(&mut order);

        let mut sums = (0.0, 0.0, 0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let views = dataset.sample_views(i);
                let noise = SampleNoise::draw(l, config.d, config.k, &mut noise_rng);
                let bundle = &pools[i][epoch % config.perm_pool];
                let breakdown = model
                    .elbo(&views, &observed_sets[i], bundle, &noise, epoch_cfg, kind, Some(&mut grads))
                    .map_err(|e| annotate_epoch(e, epoch, i))?;
                if let Some(term) = breakdown.non_finite_term() {
                    return Err(Error::non_finite(
                        term,
                        format!(" at epoch {epoch}, sample {i}"),
                    ));
                }
                sums.0 += breakdown.recon;
                sums.1 += breakdown.kl_z;
                sums.2 += breakdown.kl_omega;
                sums.3 += breakdown.total;
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= scale);
            adam.step(&mut params, &grads)?;
            model.load_flat(&params)?;
        }

        let inv = 1.0 / n as f64;
        log.epochs.push(EpochRecord {
            epoch: epoch + 1,
            phase: if warmup { "warmup".into() } else { "main".into() },
            recon: sums.0 * inv,
            kl_z: sums.1 * inv,
            kl_omega: sums.2 * inv,
            total: sums.3 * inv,
        });
    }
    Ok((model, log))
}

fn mask_observed(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter_map(|(i, &m)| if m { Some(i + 1) } else { None }).collect()
}

fn annotate_epoch(e: Error, epoch: usize, sample: usize) -> Error {
    match e {
        Error::NonFinite { term, context } => Error::NonFinite {
            term,
            context: format!("{context} at epoch {epoch}, sample {sample}"),
        },
        other => other,
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub l: usize,
    pub d: usize,
    pub k: usize,
    pub view_dims: Vec<usize>,
    pub enc_hidden: Vec<usize>,
    pub corr_hidden: Vec<usize>,
    pub seed: u64,
    pub param_count: usize,
}

const CHECKPOINT_VERSION: u32 = 1;
const MAX_HEADER_BYTES: usize = 1 << 16;

pub fn save_checkpoint(model: &ModelParams<f64>, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        l: model.view_count(),
        d: model.latent_dim(),
        k: model.shared_dim(),
        view_dims: model.view_dims().to_vec(),
        enc_hidden: model.arch().enc_hidden.clone(),
        corr_hidden: model.arch().corr_hidden.clone(),
        seed: model.seed(),
        param_count: model.param_count(),
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for value in model.flatten_params() {
        out.write_all(&value.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Load a checkpoint. The header is parsed and validated before any
/// parameter-sized buffer is allocated.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<f64>, CheckpointHeader)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let read = file.read(&mut byte)?;
        if read == 0 {
            return Err(Error::Checkpoint("missing header line".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
        if header_bytes.len() > MAX_HEADER_BYTES {
            return Err(Error::Checkpoint("header exceeds 64 KiB".into()));
        }
    }
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {} (expected {CHECKPOINT_VERSION})",
            header.version
        )));
    }

    let arch = ModelArch { enc_hidden: header.enc_hidden.clone(), corr_hidden: header.corr_hidden.clone() };
    let mut model =
        ModelParams::<f64>::init(header.l, &header.view_dims, header.d, header.k, arch, header.seed)?;
    if model.param_count() != header.param_count {
        return Err(Error::Checkpoint(format!(
            "header claims {} parameters, architecture has {}",
            header.param_count,
            model.param_count()
        )));
    }

    let mut blob = Vec::new();
    file.read_to_end(&mut blob)?;
    if blob.len() != header.param_count * 8 {
        return Err(Error::Checkpoint(format!(
            "parameter blob has {} bytes, expected {} (truncated?)",
            blob.len(),
            header.param_count * 8
        )));
    }
    let params: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    model.load_flat(&params)?;
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_fingerprint, gen_masks, gen_synthetic};

    fn tiny_setup() -> (MultiViewDataset, Fingerprint, TrainConfig) {
        let mut data = gen_synthetic(24, 2, 2, &[4, 5], 0.05, 1).unwrap();
        let masks = gen_masks(24, 2, 0.5, 2).unwrap();
        let fp = build_fingerprint(&masks, 0.5, 2).unwrap();
        data.apply_fingerprint(&fp).unwrap();
        let config = TrainConfig {
            d: 4,
            k: 2,
            warmup_epochs: 2,
            epochs: 5,
            batch_size: 8,
            enc_hidden: vec![8],
            corr_hidden: vec![8],
            perm_pool: 3,
            seed: 5,
            ..TrainConfig::default()
        };
        (data, fp, config)
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (data, fp, mut config) = tiny_setup();
        config.epochs = 0;
        config.warmup_epochs = 0;
        let (model, log) = train(&data, &fp, &config).unwrap();
        let fresh = ModelParams::<f64>::init(
            2,
            &data.view_dims(),
            config.d,
            config.k,
            config.arch(),
            config.seed,
        )
        .unwrap();
        assert_eq!(model.flatten_params(), fresh.flatten_params());
        assert!(log.epochs.is_empty());
    }

    #[test]
    fn same_seed_gives_identical_runs() {
        let (data, fp, config) = tiny_setup();
        let (m1, l1) = train(&data, &fp, &config).unwrap();
        let (m2, l2) = train(&data, &fp, &config).unwrap();
        assert_eq!(m1.flatten_params(), m2.flatten_params());
        let to_tuples =
            |l: &TrainLog| l.epochs.iter().map(|e| (e.recon, e.total)).collect::<Vec<_>>();
        assert_eq!(to_tuples(&l1), to_tuples(&l2));
    }

    #[test]
    fn phase_switches_exactly_once_at_the_warmup_boundary() {
        let (data, fp, config) = tiny_setup();
        let (_, log) = train(&data, &fp, &config).unwrap();
        let phases: Vec<&str> = log.epochs.iter().map(|e| e.phase.as_str()).collect();
        assert_eq!(phases, vec!["warmup", "warmup", "main", "main", "main"]);
        let switches = phases.windows(2).filter(|w| w[0] != w[1]).count();
        assert_eq!(switches, 1);
    }

    #[test]
    fn masked_feature_content_never_affects_training() {
        let (data, fp, config) = tiny_setup();
        let (_, log_a) = train(&data, &fp, &config).unwrap();
        let mut poisoned = data.clone();
        for (i, record) in fp.records.iter().enumerate() {
            for (v, &observed) in record.mask.iter().enumerate() {
                if !observed {
                    for x in poisoned.views[v][i].iter_mut() {
                        *x = 1e6;
                    }
                }
            }
        }
        let (_, log_b) = train(&poisoned, &fp, &config).unwrap();
        for (a, b) in log_a.epochs.iter().zip(&log_b.epochs) {
            assert_eq!(a.total, b.total);
            assert_eq!(a.recon, b.recon);
        }
    }

    #[test]
    fn training_reduces_reconstruction_error() {
        let mut data = gen_synthetic(60, 2, 2, &[4, 4], 0.05, 3).unwrap();
        let masks = gen_masks(60, 2, 0.3, 4).unwrap();
        let fp = build_fingerprint(&masks, 0.3, 4).unwrap();
        data.apply_fingerprint(&fp).unwrap();
        let config = TrainConfig {
            d: 4,
            k: 4,
            warmup_epochs: 10,
            epochs: 40,
            batch_size: 16,
            enc_hidden: vec![16],
            corr_hidden: vec![8],
            seed: 7,
            ..TrainConfig::default()
        };
        let (_, log) = train(&data, &fp, &config).unwrap();
        let first = -log.epochs.first().unwrap().recon;
        let last = -log.epochs.last().unwrap().recon;
        assert!(last < first, "reconstruction error {first} -> {last}");
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let (data, fp, config) = tiny_setup();
        let (model, _) = train(&data, &fp, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let (loaded, header) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.flatten_params(), model.flatten_params());
        assert_eq!(header.view_dims, data.view_dims());

        // forward passes agree bitwise
        let views = data.sample_views(0);
        let observed = data.observed(0);
        let a = model.latent_matrix(&views, &observed).unwrap();
        let b = loaded.latent_matrix(&views, &observed).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupted_checkpoints_error_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not json\n").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

        // truncated blob
        let (data, fp, config) = tiny_setup();
        let (model, _) = train(&data, &fp, &config).unwrap();
        let good = dir.path().join("good.ckpt");
        save_checkpoint(&model, &good).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(msg) if msg.contains("truncated")));

        // version mismatch
        let text = String::from_utf8_lossy(&bytes);
        let newline = text.find('\n').unwrap();
        let patched = text[..newline].replace("\"version\":1", "\"version\":9");
        let mut out = patched.into_bytes();
        out.push(b'\n');
        out.extend_from_slice(&bytes[newline + 1..]);
        std::fs::write(&path, out).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(msg)) if msg.contains("version")));
    }
}
