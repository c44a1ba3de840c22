//! Clustering on the consensus representation, clustering metrics
//! (accuracy via optimal matching, NMI, ARI), and missing-view inference.

use crate::dataset::MultiViewDataset;
use crate::gaussian::{geometric_mean_fusion, marginal_first_k, DiagonalGaussian};
use crate::model::ModelParams;
use crate::rng::Rng;
use crate::{Error, Result};

/// Clustering quality against ground-truth labels.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ClusterReport {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    #[serde(skip)]
    pub assignments: Vec<usize>,
}

/// Per-sample consensus means: every column of the latent grid is fused over
/// its observed sources, the L fused latents are fused again over their
/// first-k marginals, and the resulting mean is the embedding row.
pub fn consensus_embedding(
    dataset: &MultiViewDataset,
    model: &ModelParams<f64>,
    k: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let observed = dataset.observed(i);
        if observed.is_empty() {
            return Err(Error::contract(format!("sample {i} has no observed view")));
        }
        let views = dataset.sample_views(i);
        let (averaged, omega) = fused_latents(model, &views, &observed, k)?;
        let _ = averaged;
        rows.push(omega.mean().to_vec());
    }
    Ok(rows)
}

/// Column-averaged latents and the consensus distribution for one sample.
fn fused_latents(
    model: &ModelParams<f64>,
    views: &[Vec<f64>],
    observed: &[usize],
    k: usize,
) -> Result<(Vec<DiagonalGaussian<f64>>, DiagonalGaussian<f64>)> {
    let grid = model.latent_matrix(views, observed)?;
    let l = grid.view_count();
    let mut averaged = Vec::with_capacity(l);
    for col in 1..=l {
        let cell = grid.single_view_cell(col)?;
        averaged.push(geometric_mean_fusion(&cell, grid.dim())?);
    }
    let marginals = averaged
        .iter()
        .map(|g| marginal_first_k(g, k))
        .collect::<Result<Vec<_>>>()?;
    let omega = geometric_mean_fusion(&marginals, k)?;
    Ok((averaged, omega))
}

/// Reconstruct all L views of one sample: concatenate the consensus mean
/// with each column-averaged latent mean and decode deterministically.
pub fn infer_missing_views(
    views: &[Vec<f64>],
    mask: &[bool],
    model: &ModelParams<f64>,
    k: usize,
) -> Result<Vec<Vec<f64>>> {
    let observed: Vec<usize> =
        mask.iter().enumerate().filter_map(|(i, &m)| if m { Some(i + 1) } else { None }).collect();
    if observed.is_empty() {
        return Err(Error::contract("sample has no observed view"));
    }
    let (averaged, omega) = fused_latents(model, views, &observed, k)?;
    let mut reconstructed = Vec::with_capacity(averaged.len());
    for (idx, latent) in averaged.iter().enumerate() {
        reconstructed.push(model.decode_mean(idx + 1, omega.mean(), latent.mean())?);
    }
    Ok(reconstructed)
}

/// Mean squared error of reconstructed *missing* views against ground truth,
/// next to the per-feature mean-imputation baseline on the same split.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MissingViewMse {
    pub model: f64,
    pub baseline: f64,
    pub missing_entries: usize,
}

pub fn missing_view_mse(
    dataset: &MultiViewDataset,
    model: &ModelParams<f64>,
    k: usize,
) -> Result<MissingViewMse> {
    let l = dataset.view_count();
    let dims = dataset.view_dims();
    // per-feature means over samples where the view is observed
    let mut means: Vec<Vec<f64>> = dims.iter().map(|&dv| vec![0.0; dv]).collect();
    let mut counts = vec![0usize; l];
    for i in 0..dataset.len() {
        for v in 0..l {
            if dataset.masks[i][v] {
                counts[v] += 1;
                for (j, &x) in dataset.views[v][i].iter().enumerate() {
                    means[v][j] += x;
                }
            }
        }
    }
    for v in 0..l {
        if counts[v] == 0 {
            return Err(Error::contract(format!("view {} is never observed", v + 1)));
        }
        for m in means[v].iter_mut() {
            *m /= counts[v] as f64;
        }
    }

    let mut model_sq = 0.0;
    let mut baseline_sq = 0.0;
    let mut entries = 0usize;
    for i in 0..dataset.len() {
        if dataset.masks[i].iter().all(|&m| m) {
            continue;
        }
        let views = dataset.sample_views(i);
        let reconstructed = infer_missing_views(&views, &dataset.masks[i], model, k)?;
        for v in 0..l {
            if dataset.masks[i][v] {
                continue;
            }
            for j in 0..dims[v] {
                let truth = dataset.views[v][i][j];
                model_sq += (reconstructed[v][j] - truth).powi(2);
                baseline_sq += (means[v][j] - truth).powi(2);
                entries += 1;
            }
        }
    }
    if entries == 0 {
        return Err(Error::contract("no missing entries to evaluate"));
    }
    Ok(MissingViewMse {
        model: model_sq / entries as f64,
        baseline: baseline_sq / entries as f64,
        missing_entries: entries,
    })
}

/// Lloyd's algorithm with k-means++ seeding, best inertia over restarts.
/// Empty clusters are reseeded with the point farthest from its centroid.
pub fn kmeans(
    points: &[Vec<f64>],
    k_clusters: usize,
    restarts: usize,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::contract("kmeans over an empty point set"));
    }
    if k_clusters == 0 || k_clusters > points.len() {
        return Err(Error::contract(format!(
            "k = {k_clusters} clusters for {} points",
            points.len()
        )));
    }
    if k_clusters == 1 {
        return Ok(vec![0; points.len()]);
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for restart in 0..restarts.max(1) {
        let mut rng = Rng::with_stream(seed, 0x4b4d4541 ^ restart as u64); // "KMEA"
        let (inertia, assignment) = lloyd(points, k_clusters, max_iter, tol, &mut rng);
        let better = match &best {
            None => true,
            Some((bi, _)) => inertia < *bi,
        };
        if better {
            best = Some((inertia, assignment));
        }
    }
    Ok(best.expect("at least one restart").1)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn lloyd(
    points: &[Vec<f64>],
    k: usize,
    max_iter: usize,
    tol: f64,
    rng: &mut Rng,
) -> (f64, Vec<usize>) {
    let n = points.len();
    let dim = points[0].len();

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.below(n)].clone());
    let mut dists: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dists.iter().sum();
        let next = if total <= 0.0 {
            rng.below(n) // all points coincide with a centroid
        } else {
            let mut target = rng.next_f64() * total;
            let mut chosen = n - 1;
            for (i, &d) in dists.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, centroids.last().unwrap());
            if d < dists[i] {
                dists[i] = d;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    let mut inertia = f64::INFINITY;
    for _ in 0..max_iter {
        // assignment step
        let mut new_inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = sq_dist(p, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assignment[i] = best;
            new_inertia += best_d;
        }

        // update step
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assignment[i]] += 1;
            for (j, &x) in p.iter().enumerate() {
                sums[assignment[i]][j] += x;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // reseed on the point farthest from its centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centroids[assignment[a]])
                            .total_cmp(&sq_dist(&points[b], &centroids[assignment[b]]))
                    })
                    .expect("nonempty");
                centroids[c] = points[far].clone();
            } else {
                for j in 0..dim {
                    centroids[c][j] = sums[c][j] / counts[c] as f64;
                }
            }
        }

        if (inertia - new_inertia).abs() <= tol * inertia.max(1.0) {
            inertia = new_inertia;
            break;
        }
        inertia = new_inertia;
    }
    (inertia, assignment)
}

/// ACC (optimal one-to-one matching), NMI (arithmetic normalization), ARI.
pub fn clustering_metrics(true_labels: &[usize], assignments: &[usize]) -> Result<ClusterReport> {
    if true_labels.len() != assignments.len() {
        return Err(Error::contract(format!(
            "{} labels vs {} assignments",
            true_labels.len(),
            assignments.len()
        )));
    }
    if true_labels.is_empty() {
        return Err(Error::contract("empty label vectors"));
    }
    let n = true_labels.len();
    let classes = 1 + *true_labels.iter().max().unwrap();
    let clusters = 1 + *assignments.iter().max().unwrap();
    let side = classes.max(clusters);
    let mut contingency = vec![vec![0usize; side]; side];
    for (&t, &p) in true_labels.iter().zip(assignments) {
        contingency[t][p] += 1;
    }

    // ACC: maximize matched counts over one-to-one cluster-class matchings
    let cost: Vec<Vec<f64>> = contingency
        .iter()
        .map(|row| row.iter().map(|&c| -(c as f64)).collect())
        .collect();
    let matching = hungarian(&cost);
    let matched: usize = matching.iter().enumerate().map(|(t, &p)| contingency[t][p]).sum();
    let acc = matched as f64 / n as f64;

    Ok(ClusterReport {
        acc,
        nmi: nmi_arithmetic(&contingency, n),
        ari: adjusted_rand_index(&contingency, n),
        assignments: assignments.to_vec(),
    })
}

fn nmi_arithmetic(contingency: &[Vec<usize>], n: usize) -> f64 {
    let nf = n as f64;
    let row_sums: Vec<usize> = contingency.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<usize> =
        (0..contingency[0].len()).map(|j| contingency.iter().map(|r| r[j]).sum()).collect();
    let entropy = |sums: &[usize]| -> f64 {
        sums.iter()
            .filter(|&&s| s > 0)
            .map(|&s| {
                let p = s as f64 / nf;
                -p * p.ln()
            })
            .sum()
    };
    let h_true = entropy(&row_sums);
    let h_pred = entropy(&col_sums);
    let mut mi = 0.0;
    for (i, row) in contingency.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let p = c as f64 / nf;
            mi += p * (p / (row_sums[i] as f64 / nf) / (col_sums[j] as f64 / nf)).ln();
        }
    }
    let denom = 0.5 * (h_true + h_pred);
    if denom <= 0.0 {
        // both partitions are single clusters: identical by construction
        return 1.0;
    }
    (mi / denom).clamp(0.0, 1.0)
}

fn adjusted_rand_index(contingency: &[Vec<usize>], n: usize) -> f64 {
    let choose2 = |x: usize| -> f64 { (x as f64) * (x as f64 - 1.0) / 2.0 };
    let row_sums: Vec<usize> = contingency.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<usize> =
        (0..contingency[0].len()).map(|j| contingency.iter().map(|r| r[j]).sum()).collect();
    let sum_cells: f64 = contingency.iter().flatten().map(|&c| choose2(c)).sum();
    let sum_rows: f64 = row_sums.iter().map(|&c| choose2(c)).sum();
    let sum_cols: f64 = col_sums.iter().map(|&c| choose2(c)).sum();
    let expected = sum_rows * sum_cols / choose2(n);
    let max_index = 0.5 * (sum_rows + sum_cols);
    if (max_index - expected).abs() < 1e-15 {
        return if (sum_cells - expected).abs() < 1e-15 { 1.0 } else { 0.0 };
    }
    (sum_cells - expected) / (max_index - expected)
}

/// Kuhn–Munkres minimum-cost assignment on a square matrix; returns the
/// column matched to each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // potentials formulation, O(n^3)
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // column -> row (1-based rows)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            result[p[j] - 1] = j - 1;
        }
    }
    result
}
