//! Synthetic multi-view data, missing-mask generation, fingerprint
//! precomputation and persistence, and tabular CSV loading.
//!
//! A fingerprint file is line-delimited JSON: a header line
//! `{"version":1,"L":..,"eta":..,"seed":..}` followed by one record per
//! sample `{"mask":[0,1,...],"perms":[[..],..]}` holding the view mask and
//! the L column permutations precomputed for that mask.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::permutation::{is_cyclic, make_bundle, CyclicPermutation, PermutationBundle};
use crate::rng::Rng;
use crate::{Error, Result};

/// Per-view feature matrices with masks and optional labels (labels are used
/// only by evaluation).
#[derive(Debug, Clone)]
pub struct MultiViewDataset {
    pub views: Vec<Vec<Vec<f64>>>, // [view][sample][feature]
    pub labels: Option<Vec<usize>>,
    pub masks: Vec<Vec<bool>>, // [sample][view]
}

impl MultiViewDataset {
    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    pub fn len(&self) -> usize {
        self.views.first().map(|v| v.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views.iter().map(|v| v.first().map(|r| r.len()).unwrap_or(0)).collect()
    }

    /// 1-based indices of the observed views of one sample.
    pub fn observed(&self, sample: usize) -> Vec<usize> {
        self.masks[sample]
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| if m { Some(i + 1) } else { None })
            .collect()
    }

    /// Feature vectors of one sample across all views (masked views included;
    /// consumers must not read them).
    pub fn sample_views(&self, sample: usize) -> Vec<Vec<f64>> {
        self.views.iter().map(|v| v[sample].clone()).collect()
    }

    /// Adopt the fingerprint's masks (they are the training-time truth).
    pub fn apply_fingerprint(&mut self, fp: &Fingerprint) -> Result<()> {
        if fp.records.len() != self.len() {
            return Err(Error::Config(format!(
                "fingerprint has {} records for {} samples",
                fp.records.len(),
                self.len()
            )));
        }
        if fp.l != self.view_count() {
            return Err(Error::Config(format!(
                "fingerprint is for L = {} views, dataset has {}",
                fp.l,
                self.view_count()
            )));
        }
        self.masks = fp.records.iter().map(|r| r.mask.clone()).collect();
        Ok(())
    }
}

/// Per-sample mask plus the precomputed column permutations, persisted next
/// to the dataset so every run sees identical missing patterns.
#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    pub l: usize,
    pub eta: f64,
    pub seed: u64,
    pub records: Vec<FingerprintRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintRecord {
    pub mask: Vec<bool>,
    pub bundle: PermutationBundle,
}

fn mask_to_observed(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter_map(|(i, &m)| if m { Some(i + 1) } else { None }).collect()
}

/// Synthetic clustered data: a shared latent per sample (cluster centroid
/// plus jitter) pushed through per-view random affine maps and tanh, plus
/// observation noise of scale `noise_sigma`.
pub fn gen_synthetic(
    n: usize,
    clusters: usize,
    l: usize,
    view_dims: &[usize],
    noise_sigma: f64,
    seed: u64,
) -> Result<MultiViewDataset> {
    if clusters < 2 {
        return Err(Error::contract(format!("need at least 2 clusters, got {clusters}")));
    }
    if l < 2 {
        return Err(Error::contract(format!("need at least 2 views, got {l}")));
    }
    if view_dims.len() != l || view_dims.iter().any(|&d| d == 0) {
        return Err(Error::contract(format!("view dims {view_dims:?} invalid for L = {l}")));
    }
    if n == 0 {
        return Err(Error::contract("need at least one sample"));
    }
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(Error::contract(format!("noise_sigma must be nonnegative, got {noise_sigma}")));
    }

    const SHARED_DIM: usize = 8;
    const CENTROID_SCALE: f64 = 2.0;
    const JITTER_SCALE: f64 = 0.25;

    let mut centroid_rng = Rng::with_stream(seed, 0x43454e54); // "CENT"
    let centroids: Vec<Vec<f64>> = (0..clusters)
        .map(|_| (0..SHARED_DIM).map(|_| CENTROID_SCALE * centroid_rng.normal()).collect())
        .collect();

    let mut map_rng = Rng::with_stream(seed, 0x4d415053); // "MAPS"
    let scale = 1.0 / (SHARED_DIM as f64).sqrt();
    let maps: Vec<(Vec<f64>, Vec<f64>)> = view_dims
        .iter()
        .map(|&dv| {
            let w: Vec<f64> = (0..dv * SHARED_DIM).map(|_| scale * map_rng.normal()).collect();
            let b: Vec<f64> = (0..dv).map(|_| 0.2 * map_rng.normal()).collect();
            (w, b)
        })
        .collect();

    let mut latent_rng = Rng::with_stream(seed, 0x4c415445); // "LATE"
    let mut noise_rng = Rng::with_stream(seed, 0x4e4f4953); // "NOIS"
    let mut views: Vec<Vec<Vec<f64>>> = view_dims.iter().map(|_| Vec::with_capacity(n)).collect();
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % clusters; // round-robin keeps classes balanced
        labels.push(label);
        let latent: Vec<f64> = centroids[label]
            .iter()
            .map(|&c| c + JITTER_SCALE * latent_rng.normal())
            .collect();
        for (v, &dv) in view_dims.iter().enumerate() {
            let (w, b) = &maps[v];
            let mut row = Vec::with_capacity(dv);
            for o in 0..dv {
                let mut acc = b[o];
                for (j, &h) in latent.iter().enumerate() {
                    acc += w[o * SHARED_DIM + j] * h;
                }
                row.push(acc.tanh() + noise_sigma * noise_rng.normal());
            }
            views[v].push(row);
        }
    }

    let masks = vec![vec![true; l]; n];
    Ok(MultiViewDataset { views, labels: Some(labels), masks })
}

/// Exactly `floor(eta * n)` samples become incomplete; each drops a uniform
/// count in `1..=L-1` of uniformly chosen views. Every row keeps at least
/// one view.
pub fn gen_masks(n: usize, l: usize, eta: f64, seed: u64) -> Result<Vec<Vec<bool>>> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::contract(format!("eta must lie in [0, 1], got {eta}")));
    }
    if l < 2 {
        return Err(Error::contract(format!("masks need at least 2 views, got {l}")));
    }
    let incomplete_count = (eta * n as f64).floor() as usize;
    let mut rng = Rng::with_stream(seed, 0x4d41534b); // "MASK"
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut incomplete = vec![false; n];
    for &i in order.iter().take(incomplete_count) {
        incomplete[i] = true;
    }

    let mut masks = vec![vec![true; l]; n];
    for (i, mask) in masks.iter_mut().enumerate() {
        if !incomplete[i] {
            continue;
        }
        let drop_count = 1 + rng.below(l - 1);
        // partial Fisher-Yates selection of `drop_count` distinct views
        let mut pool: Vec<usize> = (0..l).collect();
        for slot in 0..drop_count {
            let j = slot + rng.below(l - slot);
            pool.swap(slot, j);
            mask[pool[slot]] = false;
        }
    }
    Ok(masks)
}

/// Precompute one permutation bundle per sample (missing views fixed).
pub fn build_fingerprint(masks: &[Vec<bool>], eta: f64, seed: u64) -> Result<Fingerprint> {
    if masks.is_empty() {
        return Err(Error::contract("no masks supplied"));
    }
    let l = masks[0].len();
    let mut rng = Rng::with_stream(seed, 0x46494e47); // "FING"
    let mut records = Vec::with_capacity(masks.len());
    for (i, mask) in masks.iter().enumerate() {
        if mask.len() != l {
            return Err(Error::FingerprintRecord { index: i, msg: "mask length differs".into() });
        }
        let observed = mask_to_observed(mask);
        if observed.is_empty() {
            return Err(Error::FingerprintRecord { index: i, msg: "mask has no observed view".into() });
        }
        let bundle = make_bundle(l, &observed, &mut rng)?;
        records.push(FingerprintRecord { mask: mask.clone(), bundle });
    }
    Ok(Fingerprint { l, eta, seed, records })
}

#[derive(serde::Serialize, serde::Deserialize)]
struct FingerprintHeader {
    version: u32,
    #[serde(rename = "L")]
    l: usize,
    eta: f64,
    seed: u64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct FingerprintLine {
    mask: Vec<u8>,
    perms: Vec<Vec<usize>>,
}

pub fn write_fingerprint(fp: &Fingerprint, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = FingerprintHeader { version: 1, l: fp.l, eta: fp.eta, seed: fp.seed };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for record in &fp.records {
        let line = FingerprintLine {
            mask: record.mask.iter().map(|&m| u8::from(m)).collect(),
            perms: record.bundle.columns().iter().map(|c| c.map().to_vec()).collect(),
        };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
    }
    out.flush()?;
    Ok(())
}

/// Read and validate a fingerprint: every stored permutation must be a
/// bijection fixing the record's missing views and cyclic on its observed
/// views.
pub fn read_fingerprint(path: &Path) -> Result<Fingerprint> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let (_, header_line) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty fingerprint file".into() })?;
    let header_line = header_line?;
    let header: FingerprintHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::Parse { line: 1, msg: format!("bad header: {e}") })?;
    if header.version != 1 {
        return Err(Error::Parse { line: 1, msg: format!("unsupported version {}", header.version) });
    }

    let mut records = Vec::new();
    for (line_idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: FingerprintLine = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: line_idx + 1, msg: e.to_string() })?;
        let index = records.len();
        if parsed.mask.len() != header.l {
            return Err(Error::FingerprintRecord {
                index,
                msg: format!("mask has {} bits, header says L = {}", parsed.mask.len(), header.l),
            });
        }
        let mask: Vec<bool> = parsed.mask.iter().map(|&b| b != 0).collect();
        let observed = mask_to_observed(&mask);
        if observed.is_empty() {
            return Err(Error::FingerprintRecord { index, msg: "mask has no observed view".into() });
        }
        if parsed.perms.len() != header.l {
            return Err(Error::FingerprintRecord {
                index,
                msg: format!("{} permutations stored, expected {}", parsed.perms.len(), header.l),
            });
        }
        let mut columns = Vec::with_capacity(header.l);
        for (c, map) in parsed.perms.iter().enumerate() {
            let cyclic = is_cyclic(map, &observed).map_err(|e| Error::FingerprintRecord {
                index,
                msg: format!("column {}: {e}", c + 1),
            })?;
            if !cyclic {
                return Err(Error::FingerprintRecord {
                    index,
                    msg: format!("column {} permutation {map:?} is not cyclic on {observed:?}", c + 1),
                });
            }
            columns.push(CyclicPermutation::new(map.clone(), &observed)?);
        }
        let bundle = PermutationBundle::new(columns)?;
        records.push(FingerprintRecord { mask, bundle });
    }
    Ok(Fingerprint { l: header.l, eta: header.eta, seed: header.seed, records })
}

/// Load one CSV per view (plus an optional integer label file). All files
/// must agree on the row count; `zscore` standardizes each feature column.
pub fn load_csv(
    paths: &[impl AsRef<Path>],
    label_path: Option<&Path>,
    has_header: bool,
    zscore: bool,
) -> Result<MultiViewDataset> {
    if paths.len() < 2 {
        return Err(Error::Config("need at least 2 view files".into()));
    }
    let mut views = Vec::with_capacity(paths.len());
    let mut n = None;
    for path in paths {
        let mut matrix = read_numeric_csv(path.as_ref(), has_header)?;
        match n {
            None => n = Some(matrix.len()),
            Some(expected) => {
                if matrix.len() != expected {
                    return Err(Error::Config(format!(
                        "{} has {} rows, expected {expected}",
                        path.as_ref().display(),
                        matrix.len()
                    )));
                }
            }
        }
        if zscore {
            zscore_columns(&mut matrix);
        }
        views.push(matrix);
    }
    let n = n.unwrap_or(0);
    let labels = match label_path {
        Some(path) => {
            let raw = read_numeric_csv(path, has_header)?;
            if raw.len() != n {
                return Err(Error::Config(format!(
                    "label file has {} rows, expected {n}",
                    raw.len()
                )));
            }
            Some(
                raw.iter()
                    .enumerate()
                    .map(|(i, row)| {
                        let value = row.first().copied().unwrap_or(f64::NAN);
                        if value.is_finite() && value >= 0.0 && value.fract() == 0.0 {
                            Ok(value as usize)
                        } else {
                            Err(Error::Parse {
                                line: i + 1 + usize::from(has_header),
                                msg: format!("label '{value}' is not a nonnegative integer"),
                            })
                        }
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        None => None,
    };
    let l = views.len();
    let masks = vec![vec![true; l]; n];
    Ok(MultiViewDataset { views, labels, masks })
}

fn read_numeric_csv(path: &Path, has_header: bool) -> Result<Vec<Vec<f64>>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut rows = Vec::new();
    let mut width = None;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        if idx == 0 && has_header {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("non-numeric cell '{}'", cell.trim()),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(w) = width {
            if row.len() != w {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("row has {} cells, expected {w}", row.len()),
                });
            }
        } else {
            width = Some(row.len());
        }
        rows.push(row);
    }
    Ok(rows)
}

fn zscore_columns(matrix: &mut [Vec<f64>]) {
    if matrix.is_empty() {
        return;
    }
    let n = matrix.len() as f64;
    let width = matrix[0].len();
    for j in 0..width {
        let mean: f64 = matrix.iter().map(|r| r[j]).sum::<f64>() / n;
        let var: f64 = matrix.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        let denom = if sd > 0.0 { sd } else { 1.0 }; // constant columns stay centered
        for row in matrix.iter_mut() {
            row[j] = (row[j] - mean) / denom;
        }
    }
}

/// Write a numeric matrix as CSV with full round-trip precision.
pub fn write_matrix_csv(matrix: &[Vec<f64>], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in matrix {
        let cells: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_labels_csv(labels: &[usize], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for label in labels {
        writeln!(out, "{label}")?;
    }
    out.flush()?;
    Ok(())
}
