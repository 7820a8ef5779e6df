//! Correspondence matching between feature sets, the evaluation metrics,
//! cosine k-means segmentation with centroid transfer, a two-component PCA
//! diagnostic, and feature-driven texture transfer.
//!
//! All matching is the exact argmax of cosine similarity over every candidate
//! pair — no approximate index — so an O(N²) recomputation reproduces every
//! result bitwise. Rows are matched independently and in parallel.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::ImageFeatureMap;
use crate::losses::cosine_similarity;
use crate::matrix::{pairwise_sum, Matrix};
use crate::mesh::{farthest_point_sampling, max_extent, Mesh};
use crate::scalar::Scalar;

/// Points sampled per mesh for the correspondence benchmark.
pub const EVAL_SAMPLE_COUNT: usize = 1024;

/// Fixed seed for benchmark point sampling, so every run scores the same
/// point set.
pub const EVAL_SEED: u64 = 7177;

/// Source-to-target matches and their cosine similarities.
#[derive(Debug, Clone)]
pub struct Correspondence<T> {
    /// `targets[i]` is the target row matched to source row `i`.
    pub targets: Vec<usize>,
    /// Cosine similarity of each match, in `[-1, 1]`.
    pub scores: Vec<T>,
}

impl<T> Correspondence<T> {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// For every source row, the target row maximizing cosine similarity.
/// Ties break toward the lowest target index. Exact — every pair is scored.
pub fn match_points<T: Scalar>(
    source: &Matrix<T>,
    target: &Matrix<T>,
) -> Result<Correspondence<T>> {
    if source.cols() != target.cols() {
        return Err(Error::DimensionMismatch(format!(
            "source dim {} vs target dim {}",
            source.cols(),
            target.cols()
        )));
    }
    if source.rows() == 0 || target.rows() == 0 {
        return Err(Error::InvalidArgument(
            "matching needs non-empty source and target".into(),
        ));
    }
    let rows: Vec<Result<(usize, T)>> = (0..source.rows())
        .into_par_iter()
        .map(|i| {
            let mut best = T::from_f64(f64::NEG_INFINITY);
            let mut best_j = 0usize;
            for j in 0..target.rows() {
                let phi = cosine_similarity(source.row(i), target.row(j))?;
                if phi > best {
                    best = phi;
                    best_j = j;
                }
            }
            Ok((best_j, best))
        })
        .collect();
    let mut targets = Vec::with_capacity(source.rows());
    let mut scores = Vec::with_capacity(source.rows());
    for row in rows {
        let (j, s) = row?;
        targets.push(j);
        scores.push(s);
    }
    Ok(Correspondence { targets, scores })
}

/// Correspondence quality metrics. `err` is the mean *squared* distance
/// between each matched target position and its ground truth; `acc` is the
/// percentage of points whose plain (non-squared) distance falls strictly
/// below `threshold * extent`, where `extent` is the target's maximum
/// pairwise vertex distance.
#[derive(Debug, Clone)]
pub struct MetricReport<T> {
    pub err: T,
    /// Percentage in `[0, 100]` at `threshold`.
    pub acc: T,
    /// The threshold `acc` was evaluated at, as a fraction of the extent.
    pub threshold: T,
    /// Plain Euclidean distance per matched point.
    pub per_point: Vec<T>,
    /// `(threshold fraction, accuracy percentage)` for the standard grid
    /// 0.25%, 0.5%, …, 10%.
    pub curve: Vec<(T, T)>,
}

/// Plain Euclidean distance from each match's target position to its ground
/// truth.
pub fn per_point_distances<T: Scalar>(
    corr: &Correspondence<T>,
    target_mesh: &Mesh<T>,
    ground_truth: &[[T; 3]],
) -> Result<Vec<T>> {
    if ground_truth.len() != corr.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} ground-truth positions for {} matches",
            ground_truth.len(),
            corr.len()
        )));
    }
    let n = target_mesh.vertices.len();
    corr.targets
        .iter()
        .zip(ground_truth)
        .map(|(&t, gt)| {
            if t >= n {
                return Err(Error::InvalidArgument(format!(
                    "match target {t} out of range for {n} vertices"
                )));
            }
            Ok(crate::vec3::distance(target_mesh.vertices[t], *gt))
        })
        .collect()
}

/// Mean squared distance between matched target positions and ground truth.
pub fn correspondence_error<T: Scalar>(
    corr: &Correspondence<T>,
    target_mesh: &Mesh<T>,
    ground_truth: &[[T; 3]],
) -> Result<T> {
    let distances = per_point_distances(corr, target_mesh, ground_truth)?;
    let squared: Vec<T> = distances.iter().map(|&d| d * d).collect();
    Ok(pairwise_sum(&squared) / T::from_usize(squared.len()))
}

/// Percentage of matches whose plain distance is strictly below
/// `epsilon * extent(target)`. `epsilon` must lie in `(0, 1]`.
pub fn correspondence_accuracy<T: Scalar>(
    corr: &Correspondence<T>,
    target_mesh: &Mesh<T>,
    ground_truth: &[[T; 3]],
    epsilon: T,
) -> Result<T> {
    let distances = per_point_distances(corr, target_mesh, ground_truth)?;
    let extent = max_extent(target_mesh)?;
    accuracy_below(&distances, extent, epsilon)
}

fn accuracy_below<T: Scalar>(distances: &[T], extent: T, epsilon: T) -> Result<T> {
    if !(epsilon > T::zero()) || epsilon > T::one() {
        return Err(Error::InvalidArgument(format!(
            "threshold fraction must lie in (0, 1], got {}",
            Scalar::to_f64(epsilon)
        )));
    }
    let cutoff = epsilon * extent;
    let hits = distances.iter().filter(|&&d| d < cutoff).count();
    Ok(T::from_usize(100 * hits) / T::from_usize(distances.len().max(1)))
}

/// Full metric report: error, accuracy at `epsilon`, per-point distances,
/// and the accuracy curve over the standard threshold grid.
pub fn evaluate_correspondence<T: Scalar>(
    corr: &Correspondence<T>,
    target_mesh: &Mesh<T>,
    ground_truth: &[[T; 3]],
    epsilon: T,
) -> Result<MetricReport<T>> {
    let per_point = per_point_distances(corr, target_mesh, ground_truth)?;
    let extent = max_extent(target_mesh)?;
    let squared: Vec<T> = per_point.iter().map(|&d| d * d).collect();
    let err = pairwise_sum(&squared) / T::from_usize(squared.len().max(1));
    let acc = accuracy_below(&per_point, extent, epsilon)?;
    let mut curve = Vec::with_capacity(40);
    for i in 1..=40 {
        let frac = T::from_f64(0.0025 * i as f64);
        curve.push((frac, accuracy_below(&per_point, extent, frac)?));
    }
    Ok(MetricReport {
        err,
        acc,
        threshold: epsilon,
        per_point,
        curve,
    })
}

/// Benchmark point set: farthest-point samples under the fixed evaluation
/// seed. Meshes smaller than `count` evaluate every vertex.
pub fn eval_sample_indices<T: Scalar>(mesh: &Mesh<T>, count: usize) -> Result<Vec<usize>> {
    let n = mesh.vertices.len();
    farthest_point_sampling(mesh, count.min(n), EVAL_SEED)
}

/// `metric,value` rows: the scalar metrics of a report.
pub fn save_metric_report<T: Scalar>(report: &MetricReport<T>, path: &Path) -> Result<()> {
    let text = format!(
        "metric,value\nerr,{}\nacc,{}\nthreshold,{}\npoints,{}\n",
        Scalar::to_f64(report.err),
        Scalar::to_f64(report.acc),
        Scalar::to_f64(report.threshold),
        report.per_point.len()
    );
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `threshold,accuracy` rows for the accuracy curve.
pub fn save_accuracy_curve<T: Scalar>(curve: &[(T, T)], path: &Path) -> Result<()> {
    let mut text = String::from("threshold,accuracy\n");
    for &(t, a) in curve {
        text.push_str(&format!(
            "{},{}\n",
            Scalar::to_f64(t),
            Scalar::to_f64(a)
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Cosine k-means result: unit-norm centroids, one label per input row, and
/// the per-round mean cosine distance (non-increasing).
#[derive(Debug, Clone)]
pub struct KMeans<T> {
    /// `k x dim`, unit rows.
    pub centroids: Matrix<T>,
    pub labels: Vec<usize>,
    /// Mean `1 - cos` to the assigned centroid, logged once per round.
    pub objective_trace: Vec<T>,
}

/// Lloyd's algorithm under cosine distance `1 - cos`, with k-means++-style
/// seeding, centroids renormalized each update, and empty clusters re-seeded
/// from the currently worst-fit point. Runs to an assignment fixpoint or 300
/// rounds. Deterministic given `seed`; row scale never matters because rows
/// are compared by angle only.
pub fn cluster_features<T: Scalar>(features: &Matrix<T>, k: usize, seed: u64) -> Result<KMeans<T>> {
    let n = features.rows();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "cannot form {k} clusters from {n} rows"
        )));
    }
    // Angle-only algebra: work on unit rows so the mean direction both
    // maximizes total similarity and is cheap to renormalize.
    let unit = crate::features::normalize_rows(features)?;
    let dim = unit.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Seeding: first centroid uniform, then each next row drawn with
    // probability proportional to its squared cosine distance to the nearest
    // centroid chosen so far.
    let mut centroid_rows: Vec<usize> = vec![rng.gen_range(0..n)];
    let mut nearest = vec![T::zero(); n];
    while centroid_rows.len() < k {
        for i in 0..n {
            let mut best = T::from_f64(f64::INFINITY);
            for &c in &centroid_rows {
                let d = T::one() - cosine_similarity(unit.row(i), unit.row(c))?;
                if d < best {
                    best = d;
                }
            }
            nearest[i] = best;
        }
        let weights: Vec<f64> = nearest
            .iter()
            .map(|&d| {
                let x = Scalar::to_f64(d);
                x * x
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in weights.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            // All rows coincide with some centroid; take the lowest unused.
            (0..n)
                .find(|i| !centroid_rows.contains(i))
                .unwrap_or(n - 1)
        };
        centroid_rows.push(next);
    }
    let mut centroids = unit.select_rows(&centroid_rows);

    let mut labels: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    for round in 0..300 {
        // Assignment: best centroid by cosine, ties toward the lowest index.
        let assigned: Vec<Result<(usize, T)>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut best = T::from_f64(f64::NEG_INFINITY);
                let mut best_c = 0usize;
                for c in 0..k {
                    let phi = cosine_similarity(unit.row(i), centroids.row(c))?;
                    if phi > best {
                        best = phi;
                        best_c = c;
                    }
                }
                Ok((best_c, T::one() - best))
            })
            .collect();
        let mut new_labels = Vec::with_capacity(n);
        let mut dist = Vec::with_capacity(n);
        for a in assigned {
            let (c, d) = a?;
            new_labels.push(c);
            dist.push(d);
        }
        trace.push(pairwise_sum(&dist) / T::from_usize(n));
        let converged = round > 0 && new_labels == labels;
        labels = new_labels;
        if converged || round == 299 {
            // Stop right after assignment so the returned labels are exactly
            // the argmax against the returned centroids.
            break;
        }

        // Update: normalized mean direction per cluster; clusters that end
        // up empty (or whose members cancel out) restart at the point
        // currently farthest from its own centroid.
        let mut sums = vec![vec![T::zero(); dim]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = labels[i];
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(unit.row(i)) {
                *s += *v;
            }
        }
        let mut used_for_reseed = vec![false; n];
        for c in 0..k {
            let norm = {
                let sq: Vec<T> = sums[c].iter().map(|&v| v * v).collect();
                pairwise_sum(&sq).sqrt()
            };
            if counts[c] == 0 || Scalar::to_f64(norm) < 1e-12 {
                let mut worst = T::from_f64(f64::NEG_INFINITY);
                let mut worst_i = 0usize;
                for i in 0..n {
                    if !used_for_reseed[i] && dist[i] > worst {
                        worst = dist[i];
                        worst_i = i;
                    }
                }
                used_for_reseed[worst_i] = true;
                sums[c] = unit.row(worst_i).to_vec();
                continue;
            }
            for v in sums[c].iter_mut() {
                *v /= norm;
            }
        }
        let flat: Vec<T> = sums.into_iter().flatten().collect();
        centroids = Matrix::from_vec(k, dim, flat)?;
    }

    Ok(KMeans {
        centroids,
        labels,
        objective_trace: trace,
    })
}

/// Assigns each row of `features` to its argmax-cosine centroid (ties toward
/// the lowest centroid index) — centroid transfer onto another shape.
pub fn segment_by_centroids<T: Scalar>(
    features: &Matrix<T>,
    centroids: &Matrix<T>,
) -> Result<Vec<usize>> {
    Ok(match_points(features, centroids)?.targets)
}

/// Two-component PCA of feature rows.
#[derive(Debug, Clone)]
pub struct PcaProjection<T> {
    /// `N x 2` coordinates in the principal plane.
    pub coords: Matrix<T>,
    /// Fraction of total variance captured by each component.
    pub explained: [T; 2],
    /// `2 x dim` principal directions (unit rows).
    pub components: Matrix<T>,
    pub mean: Vec<T>,
    /// True when the data had fewer than two directions of variance and the
    /// trailing component was zero-filled.
    pub rank_deficient: bool,
}

/// Mean-centers the rows and projects them onto the top two principal
/// directions (ordered by non-increasing variance). Rank-deficient inputs
/// zero-fill the missing component and log a warning.
pub fn pca_project<T: Scalar>(features: &Matrix<T>) -> Result<PcaProjection<T>> {
    let n = features.rows();
    let d = features.cols();
    if n <= 2 {
        return Err(Error::InvalidArgument(format!(
            "PCA needs more than 2 rows, got {n}"
        )));
    }
    // Accumulate in f64 regardless of the storage scalar.
    let x: Vec<f64> = features.data().iter().map(|&v| Scalar::to_f64(v)).collect();
    let mut mean = vec![0.0f64; d];
    for row in x.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0f64; d * d];
    for row in x.chunks(d) {
        for a in 0..d {
            let ca = row[a] - mean[a];
            for b in a..d {
                cov[a * d + b] += ca * (row[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / (n as f64 - 1.0);
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }

    let (eigenvalues, eigenvectors) = jacobi_eigen_symmetric(&cov, d)?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eigenvalues[b]
            .partial_cmp(&eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let total: f64 = eigenvalues.iter().map(|&l| l.max(0.0)).sum();
    let scale = eigenvalues[order[0]].max(0.0);
    let mut explained = [T::zero(); 2];
    let mut components = Matrix::<T>::zeros(2, d);
    let mut rank_deficient = false;
    for slot in 0..2 {
        let lambda = eigenvalues[order[slot]].max(0.0);
        // A component is real only if it carries variance beyond roundoff.
        if lambda <= scale * 1e-12 || total <= 0.0 {
            rank_deficient = true;
            continue; // leave the zero fill
        }
        explained[slot] = T::from_f64(lambda / total);
        for a in 0..d {
            components.set(slot, a, T::from_f64(eigenvectors[a * d + order[slot]]));
        }
    }
    if rank_deficient {
        log::warn!(
            "PCA input has fewer than 2 directions of variance; missing components are zero-filled"
        );
    }

    let mut coords = Matrix::<T>::zeros(n, 2);
    for (i, row) in x.chunks(d).enumerate() {
        for slot in 0..2 {
            let mut acc = 0.0f64;
            for a in 0..d {
                acc += (row[a] - mean[a]) * Scalar::to_f64(components.get(slot, a));
            }
            coords.set(i, slot, T::from_f64(acc));
        }
    }

    Ok(PcaProjection {
        coords,
        explained,
        components,
        mean: mean.into_iter().map(T::from_f64).collect(),
        rank_deficient,
    })
}

/// Cyclic Jacobi eigendecomposition of a dense symmetric matrix (row-major,
/// `d x d`). Returns eigenvalues and column eigenvectors.
fn jacobi_eigen_symmetric(matrix: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if matrix.len() != d * d {
        return Err(Error::DimensionMismatch(format!(
            "{} entries for a {d}x{d} matrix",
            matrix.len()
        )));
    }
    let mut a = matrix.to_vec();
    let mut v = vec![0.0f64; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let frobenius: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if frobenius == 0.0 {
        return Ok((vec![0.0; d], v));
    }
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a[p * d + q] * a[p * d + q];
            }
        }
        if off.sqrt() <= 1e-15 * frobenius {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..d {
                    let aip = a[i * d + p];
                    let aiq = a[i * d + q];
                    a[i * d + p] = c * aip - s * aiq;
                    a[i * d + q] = s * aip + c * aiq;
                }
                for i in 0..d {
                    let api = a[p * d + i];
                    let aqi = a[q * d + i];
                    a[p * d + i] = c * api - s * aqi;
                    a[q * d + i] = s * api + c * aqi;
                }
                for i in 0..d {
                    let vip = v[i * d + p];
                    let viq = v[i * d + q];
                    v[i * d + p] = c * vip - s * viq;
                    v[i * d + q] = s * vip + c * viq;
                }
            }
        }
    }
    let eigenvalues: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    Ok((eigenvalues, v))
}

/// For each vertex, the color of the foreground pixel whose feature row has
/// the highest cosine similarity with the vertex's feature row.
pub fn texture_from_image<T: Scalar>(
    mesh_feats: &Matrix<T>,
    image: &ImageFeatureMap<T>,
) -> Result<Vec<[T; 3]>> {
    let foreground = image.foreground_indices();
    if foreground.is_empty() {
        return Err(Error::InvalidArgument(
            "image has no foreground pixels".into(),
        ));
    }
    let pixel_feats = image.features.select_rows(&foreground);
    let matches = match_points(mesh_feats, &pixel_feats)?;
    Ok(matches
        .targets
        .iter()
        .map(|&t| image.colors[foreground[t]])
        .collect())
}

/// Each target vertex takes the color of its argmax-cosine source vertex.
pub fn texture_mesh_to_mesh<T: Scalar>(
    source_feats: &Matrix<T>,
    source_colors: &[[T; 3]],
    target_feats: &Matrix<T>,
) -> Result<Vec<[T; 3]>> {
    if source_colors.len() != source_feats.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} colors for {} source rows",
            source_colors.len(),
            source_feats.rows()
        )));
    }
    let matches = match_points(target_feats, source_feats)?;
    Ok(matches.targets.iter().map(|&t| source_colors[t]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::normalize_rows;
    use crate::synth::make_icosphere;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Independent O(N^2) argmax over cosine similarities.
    fn brute_force_match(source: &Matrix<f64>, target: &Matrix<f64>) -> Vec<usize> {
        (0..source.rows())
            .map(|i| {
                let mut best = f64::NEG_INFINITY;
                let mut best_j = 0;
                for j in 0..target.rows() {
                    let phi = cosine_similarity(source.row(i), target.row(j)).unwrap();
                    if phi > best {
                        best = phi;
                        best_j = j;
                    }
                }
                best_j
            })
            .collect()
    }

    #[test]
    fn matching_identity_swap_ties_and_scaling() {
        let source = random_matrix(8, 5, 1);
        let identity = match_points(&source, &source).unwrap();
        assert_eq!(identity.targets, (0..8).collect::<Vec<_>>());
        assert!(identity.scores.iter().all(|&s| (s - 1.0).abs() < 1e-12));

        let basis = Matrix::from_vec(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let swapped = Matrix::from_vec(2, 3, vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(match_points(&basis, &swapped).unwrap().targets, vec![1, 0]);

        // Duplicate best targets resolve to the lowest index.
        let dup = Matrix::from_vec(3, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let probe = Matrix::from_vec(1, 2, vec![2.0, 0.0]).unwrap();
        assert_eq!(match_points(&probe, &dup).unwrap().targets, vec![0]);

        // Positive per-row rescaling changes nothing.
        let target = random_matrix(12, 5, 2);
        let base = match_points(&source, &target).unwrap();
        let mut scaled = target.clone();
        for r in 0..scaled.rows() {
            let factor = 0.1 + r as f64;
            for v in scaled.row_mut(r) {
                *v *= factor;
            }
        }
        assert_eq!(match_points(&source, &scaled).unwrap().targets, base.targets);

        let narrow = random_matrix(4, 3, 3);
        assert!(match_points(&source, &narrow).is_err());
    }

    #[test]
    fn matching_equals_brute_force_on_random_instances() {
        for seed in 0..5 {
            let source = random_matrix(64, 6, 100 + seed);
            let target = random_matrix(64, 6, 200 + seed);
            let fast = match_points(&source, &target).unwrap();
            assert_eq!(fast.targets, brute_force_match(&source, &target));
        }
    }

    fn flat_strip(n: usize) -> Mesh<f64> {
        // A connected fan so max_extent and distances are easy to reason about.
        let vertices: Vec<[f64; 3]> = (0..n).map(|i| [i as f64, 0.0, 0.0]).collect();
        let faces = (0..n.saturating_sub(2))
            .map(|i| [i, i + 1, i + 2])
            .collect();
        Mesh {
            vertices,
            faces,
            colors: None,
        }
    }

    #[test]
    fn error_metric_is_mean_squared_distance() {
        let mesh = flat_strip(4); // extent 3
        let corr = Correspondence {
            targets: vec![0, 1, 2],
            scores: vec![1.0; 3],
        };
        let exact: Vec<[f64; 3]> = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert_eq!(correspondence_error(&corr, &mesh, &exact).unwrap(), 0.0);

        // One point off by distance 2 -> squared 4, averaged over 3 points.
        let off = vec![[0.0, 0.0, 0.0], [1.0, 2.0, 0.0], [2.0, 0.0, 0.0]];
        let err = correspondence_error(&corr, &mesh, &off).unwrap();
        assert!((err - 4.0 / 3.0).abs() < 1e-15);

        // Random instance equals an independent recomputation.
        let mesh = flat_strip(16);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let targets: Vec<usize> = (0..10).map(|_| rng.gen_range(0..16)).collect();
        let gt: Vec<[f64; 3]> = (0..10)
            .map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), 0.0])
            .collect();
        let corr = Correspondence {
            targets: targets.clone(),
            scores: vec![1.0; 10],
        };
        let err = correspondence_error(&corr, &mesh, &gt).unwrap();
        let squared: Vec<f64> = targets
            .iter()
            .zip(&gt)
            .map(|(&t, g)| {
                let p = mesh.vertices[t];
                (p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)
            })
            .collect();
        let oracle = pairwise_sum(&squared) / 10.0;
        assert_eq!(err, oracle);

        assert!(correspondence_error(&corr, &mesh, &gt[..5]).is_err());
    }

    #[test]
    fn accuracy_uses_strict_threshold_and_is_monotone() {
        let mesh = flat_strip(4); // extent = 3
        let corr = Correspondence {
            targets: vec![0, 1],
            scores: vec![1.0; 2],
        };
        let exact = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        for eps in [0.0025, 0.01, 1.0] {
            assert_eq!(
                correspondence_accuracy(&corr, &mesh, &exact, eps).unwrap(),
                100.0
            );
        }

        // Every error exactly equals the extent: strict `<` keeps acc at 0
        // for any eps < 1.
        let at_extent = vec![[0.0, 3.0, 0.0], [1.0, 3.0, 0.0]];
        assert_eq!(
            correspondence_accuracy(&corr, &mesh, &at_extent, 0.999).unwrap(),
            0.0
        );

        // Mixed errors at eps = 1%: one point within 0.03, one outside.
        let mixed = vec![[0.0, 0.02, 0.0], [1.0, 0.5, 0.0]];
        assert_eq!(
            correspondence_accuracy(&corr, &mesh, &mixed, 0.01).unwrap(),
            50.0
        );

        let report = evaluate_correspondence(&corr, &mesh, &mixed, 0.01).unwrap();
        assert_eq!(report.acc, 50.0);
        assert_eq!(report.curve.len(), 40);
        assert!(report
            .curve
            .windows(2)
            .all(|w| w[1].1 >= w[0].1 && w[1].0 > w[0].0));
        assert_eq!(report.per_point.len(), 2);

        assert!(correspondence_accuracy(&corr, &mesh, &exact, 0.0).is_err());
        assert!(correspondence_accuracy(&corr, &mesh, &exact, 1.5).is_err());
    }

    #[test]
    fn metric_csv_files_round_trip_through_text() {
        let mesh = flat_strip(4);
        let corr = Correspondence {
            targets: vec![0, 1],
            scores: vec![1.0; 2],
        };
        let gt = vec![[0.0, 0.3, 0.0], [1.0, 0.0, 0.0]];
        let report = evaluate_correspondence(&corr, &mesh, &gt, 0.05).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let report_path = dir.path().join("metrics.csv");
        let curve_path = dir.path().join("curve.csv");
        save_metric_report(&report, &report_path).unwrap();
        save_accuracy_curve(&report.curve, &curve_path).unwrap();
        let text = std::fs::read_to_string(&report_path).unwrap();
        assert!(text.starts_with("metric,value\nerr,"));
        assert!(text.contains("points,2"));
        let curve = std::fs::read_to_string(&curve_path).unwrap();
        assert_eq!(curve.lines().count(), 41);
        assert!(curve.starts_with("threshold,accuracy\n0.0025,"));
    }

    #[test]
    fn kmeans_separates_antipodal_clusters_and_logs_monotone_objective() {
        // Two tight bundles around +x and -x.
        let mut rows = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..40 {
            let sign = if i < 20 { 1.0 } else { -1.0 };
            rows.push([
                sign * 1.0,
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.05..0.05),
            ]);
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let feats = normalize_rows(&Matrix::from_vec(40, 3, flat).unwrap()).unwrap();
        let result = cluster_features(&feats, 2, 11).unwrap();
        let first = result.labels[0];
        assert!(result.labels[..20].iter().all(|&l| l == first));
        assert!(result.labels[20..].iter().all(|&l| l == 1 - first));
        assert!(result
            .objective_trace
            .windows(2)
            .all(|w| w[1] <= w[0] + 1e-15));

        // Determinism.
        let again = cluster_features(&feats, 2, 11).unwrap();
        assert_eq!(again.labels, result.labels);
        assert_eq!(again.centroids.data(), result.centroids.data());

        // The labels are exactly the argmax against the returned centroids.
        assert_eq!(
            segment_by_centroids(&feats, &result.centroids).unwrap(),
            result.labels
        );
    }

    #[test]
    fn kmeans_single_cluster_centroid_is_the_mean_direction() {
        let feats = normalize_rows(&random_matrix(15, 4, 9)).unwrap();
        let result = cluster_features(&feats, 1, 0).unwrap();
        assert!(result.labels.iter().all(|&l| l == 0));
        let mut sum = vec![0.0f64; 4];
        for r in 0..15 {
            for (s, v) in sum.iter_mut().zip(feats.row(r)) {
                *s += v;
            }
        }
        let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, b) in result.centroids.row(0).iter().zip(&sum) {
            assert!((a - b / norm).abs() < 1e-12);
        }

        assert!(cluster_features(&feats, 16, 0).is_err());
        assert!(cluster_features(&feats, 0, 0).is_err());
    }

    #[test]
    fn kmeans_handles_identical_rows_via_reseeding() {
        let feats = Matrix::from_vec(6, 2, [[1.0, 0.0]; 6].concat()).unwrap();
        let result = cluster_features(&feats, 2, 4).unwrap();
        // All points coincide: ties send everything to the lowest centroid.
        assert!(result.labels.iter().all(|&l| l == result.labels[0]));
        assert!(f64::abs(*result.objective_trace.last().unwrap()) < 1e-12);
    }

    #[test]
    fn centroid_segmentation_matches_brute_force() {
        let feats = random_matrix(30, 4, 21);
        let centroids = random_matrix(5, 4, 22);
        let labels = segment_by_centroids(&feats, &centroids).unwrap();
        assert_eq!(labels, brute_force_match(&feats, &centroids));

        // Rows equal to the centroids label themselves.
        assert_eq!(
            segment_by_centroids(&centroids, &centroids).unwrap(),
            (0..5).collect::<Vec<_>>()
        );
        let one = centroids.select_rows(&[2]);
        assert!(segment_by_centroids(&feats, &one)
            .unwrap()
            .iter()
            .all(|&l| l == 0));
    }

    #[test]
    fn pca_handles_constant_rank2_and_matches_dense_eigensolver() {
        // Constant rows: all projections zero, flagged rank-deficient.
        let constant = Matrix::from_vec(5, 3, vec![0.5; 15]).unwrap();
        let flat = pca_project(&constant).unwrap();
        assert!(flat.rank_deficient);
        assert!(flat.coords.data().iter().all(|&v| v == 0.0));
        assert_eq!(flat.explained, [0.0, 0.0]);

        // Exact rank-2 data: two components reconstruct the input.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let u = [0.6f64, 0.8, 0.0, 0.0];
        let w = [0.0f64, 0.0, 1.0, 0.0];
        let mut data = Vec::new();
        for _ in 0..12 {
            let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            for c in 0..4 {
                data.push(3.0 + a * u[c] + b * w[c]);
            }
        }
        let rank2 = Matrix::from_vec(12, 4, data).unwrap();
        let pca = pca_project(&rank2).unwrap();
        assert!(!pca.rank_deficient);
        for i in 0..12 {
            for c in 0..4 {
                let rebuilt = Scalar::to_f64(pca.mean[c])
                    + pca.coords.get(i, 0) * pca.components.get(0, c)
                    + pca.coords.get(i, 1) * pca.components.get(1, c);
                assert!(
                    (rebuilt - rank2.get(i, c)).abs() < 1e-6,
                    "entry ({i},{c}): {rebuilt} vs {}",
                    rank2.get(i, c)
                );
            }
        }

        // Explained ratios equal covariance eigenvalue ratios from an
        // independent dense solver.
        let sample = random_matrix(20, 5, 33);
        let pca = pca_project(&sample).unwrap();
        let mut mean = vec![0.0f64; 5];
        for i in 0..20 {
            for c in 0..5 {
                mean[c] += sample.get(i, c);
            }
        }
        for m in mean.iter_mut() {
            *m /= 20.0;
        }
        let mut cov = nalgebra::DMatrix::<f64>::zeros(5, 5);
        for i in 0..20 {
            for a in 0..5 {
                for b in 0..5 {
                    cov[(a, b)] +=
                        (sample.get(i, a) - mean[a]) * (sample.get(i, b) - mean[b]) / 19.0;
                }
            }
        }
        let mut eigen: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
        eigen.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let total: f64 = eigen.iter().sum();
        assert!((Scalar::to_f64(pca.explained[0]) - eigen[0] / total).abs() < 1e-9);
        assert!((Scalar::to_f64(pca.explained[1]) - eigen[1] / total).abs() < 1e-9);
        assert!(pca.explained[0] >= pca.explained[1]);

        assert!(pca_project(&random_matrix(2, 5, 1)).is_err());
    }

    fn tiny_image(side: usize, dim: usize, seed: u64) -> ImageFeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = side * side;
        let features = normalize_rows(&random_matrix(pixels, dim, seed ^ 0xffff)).unwrap();
        let mask = (0..pixels).map(|_| rng.gen_bool(0.7)).collect();
        let colors = (0..pixels)
            .map(|_| {
                [
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                ]
            })
            .collect();
        ImageFeatureMap {
            height: side,
            width: side,
            features,
            mask,
            colors,
        }
    }

    #[test]
    fn image_texturing_picks_argmax_foreground_pixels() {
        // Bijection: pixel features equal vertex features.
        let verts = normalize_rows(&random_matrix(9, 4, 51)).unwrap();
        let mut image = tiny_image(3, 4, 52);
        image.features = verts.clone();
        image.mask = vec![true; 9];
        let colors = texture_from_image(&verts, &image).unwrap();
        assert_eq!(colors, image.colors);

        // A single foreground pixel colors everything.
        image.mask = vec![false; 9];
        image.mask[4] = true;
        let colors = texture_from_image(&verts, &image).unwrap();
        assert!(colors.iter().all(|&c| c == image.colors[4]));

        image.mask = vec![false; 9];
        assert!(texture_from_image(&verts, &image).is_err());

        // Brute force over a 16x16 image.
        let image = tiny_image(16, 6, 53);
        let mesh = make_icosphere::<f64>(0, 1.0).unwrap();
        let feats = normalize_rows(&random_matrix(mesh.vertices.len(), 6, 54)).unwrap();
        let colors = texture_from_image(&feats, &image).unwrap();
        for (v, &got) in colors.iter().enumerate() {
            let mut best = f64::NEG_INFINITY;
            let mut best_p = 0;
            for p in 0..256 {
                if !image.mask[p] {
                    continue;
                }
                let phi = cosine_similarity(feats.row(v), image.features.row(p)).unwrap();
                if phi > best {
                    best = phi;
                    best_p = p;
                }
            }
            assert_eq!(got, image.colors[best_p], "vertex {v}");
        }
    }

    #[test]
    fn mesh_to_mesh_texturing_copies_argmax_source_colors() {
        let source = normalize_rows(&random_matrix(64, 5, 61)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let palette: Vec<[f64; 3]> = (0..64)
            .map(|_| {
                [
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                ]
            })
            .collect();

        // Identity transfer copies colors.
        assert_eq!(
            texture_mesh_to_mesh(&source, &palette, &source).unwrap(),
            palette
        );

        // Constant palette stays constant.
        let gray = vec![[0.5; 3]; 64];
        let target = normalize_rows(&random_matrix(64, 5, 63)).unwrap();
        assert!(texture_mesh_to_mesh(&source, &gray, &target)
            .unwrap()
            .iter()
            .all(|&c| c == [0.5; 3]));

        // Brute force equality on the 64-vertex pair.
        let transferred = texture_mesh_to_mesh(&source, &palette, &target).unwrap();
        let matches = brute_force_match(&target, &source);
        let expected: Vec<[f64; 3]> = matches.iter().map(|&m| palette[m]).collect();
        assert_eq!(transferred, expected);

        assert!(texture_mesh_to_mesh(&source, &palette[..10], &target).is_err());
    }

    #[test]
    fn eval_sampling_is_fixed_seed_and_clamped() {
        let mesh = make_icosphere::<f64>(1, 1.0).unwrap(); // 42 vertices
        let a = eval_sample_indices(&mesh, 16).unwrap();
        let b = eval_sample_indices(&mesh, 16).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        let all = eval_sample_indices(&mesh, EVAL_SAMPLE_COUNT).unwrap();
        assert_eq!(all.len(), 42);
    }
}
