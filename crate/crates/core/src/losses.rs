//! Training objectives over embedding matrices.
//!
//! Everything here is a pure forward evaluation; the reverse-mode graph in
//! [`crate::net`] calls these same kernels for its forward values, so a
//! loss reported by the trainer and a loss computed standalone agree
//! bit for bit.
//!
//! The main objective pairs a contrastive term — spherical embedding
//! angles must reproduce rescaled geodesic distances — with a cosine
//! reconstruction term that keeps the decoded features aligned with the
//! base features. Three ablation objectives (relative / plain squared
//! distance fit, and a local neighborhood-shape loss) are kept for
//! comparison runs.

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::scalar::Scalar;

/// Weights of the combined objective. Both default to 1.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights<T> {
    pub reconstruction: T,
    pub contrastive: T,
}

impl<T: Scalar> Default for LossWeights<T> {
    fn default() -> Self {
        LossWeights {
            reconstruction: T::one(),
            contrastive: T::one(),
        }
    }
}

impl<T: Scalar> LossWeights<T> {
    pub fn validate(&self) -> Result<()> {
        if self.reconstruction < T::zero() || self.contrastive < T::zero() {
            return Err(Error::InvalidArgument("loss weights must be nonnegative".into()));
        }
        if self.reconstruction == T::zero() && self.contrastive == T::zero() {
            return Err(Error::InvalidArgument("loss weights cannot both be zero".into()));
        }
        Ok(())
    }
}

/// A scalar objective value with its per-component breakdown for logging.
#[derive(Debug, Clone, Copy)]
pub struct LossValue<T> {
    pub value: T,
    pub contrastive: Option<T>,
    pub reconstruction: Option<T>,
    /// Pairs dropped by the relative distance fit (zero geodesic target).
    pub excluded_pairs: usize,
}

impl<T: Scalar> LossValue<T> {
    pub fn simple(value: T) -> Self {
        LossValue {
            value,
            contrastive: None,
            reconstruction: None,
            excluded_pairs: 0,
        }
    }
}

/// Cosine of the angle between two vectors, clamped to `[-1, 1]` against
/// rounding. Zero-norm inputs are rejected.
pub fn cosine_similarity<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch(format!(
            "cosine of {}-dim and {}-dim vectors",
            u.len(),
            v.len()
        )));
    }
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu <= T::zero() || nv <= T::zero() {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    let c = dot(u, v) / (nu * nv);
    Ok(clamp_unit(c))
}

pub(crate) fn clamp_unit<T: Scalar>(c: T) -> T {
    if c > T::one() {
        T::one()
    } else if c < -T::one() {
        -T::one()
    } else {
        c
    }
}

fn check_anchors<T: Scalar>(emb: &Matrix<T>, anchors: &[usize], targets: &Matrix<T>) -> Result<()> {
    if anchors.is_empty() {
        return Err(Error::InvalidArgument("no anchors".into()));
    }
    for &a in anchors {
        if a >= emb.rows() {
            return Err(Error::InvalidArgument(format!(
                "anchor {a} out of range for {} rows",
                emb.rows()
            )));
        }
    }
    if targets.rows() != emb.rows() || targets.cols() != anchors.len() {
        return Err(Error::DimensionMismatch(format!(
            "target matrix {}x{} for {} rows and {} anchors",
            targets.rows(),
            targets.cols(),
            emb.rows(),
            anchors.len()
        )));
    }
    Ok(())
}

/// Contrastive objective: mean over all (vertex, anchor) pairs of
/// `| target - (1 - cos(z_n, z_a)) / 2 |`, where targets are rescaled
/// geodesic distances in `[0, 1]`. Zero embedding rows are rejected.
pub fn contrastive_loss<T: Scalar>(
    emb: &Matrix<T>,
    anchors: &[usize],
    targets: &Matrix<T>,
) -> Result<LossValue<T>> {
    check_anchors(emb, anchors, targets)?;
    let mut sum = T::zero();
    for n in 0..emb.rows() {
        for (c, &a) in anchors.iter().enumerate() {
            let phi = cosine_similarity(emb.row(n), emb.row(a))?;
            let predicted = (T::one() - phi) / (T::one() + T::one());
            sum += (targets.get(n, c) - predicted).abs();
        }
    }
    let value = sum / T::from_usize(emb.rows() * anchors.len());
    Ok(LossValue {
        value,
        contrastive: Some(value),
        reconstruction: None,
        excluded_pairs: 0,
    })
}

/// Reconstruction objective: mean over rows of `1 - cos(base_n, decoded_n)`.
pub fn reconstruction_loss<T: Scalar>(
    base: &Matrix<T>,
    decoded: &Matrix<T>,
) -> Result<LossValue<T>> {
    if base.rows() != decoded.rows() || base.cols() != decoded.cols() {
        return Err(Error::DimensionMismatch(format!(
            "base {}x{} vs decoded {}x{}",
            base.rows(),
            base.cols(),
            decoded.rows(),
            decoded.cols()
        )));
    }
    let mut sum = T::zero();
    for n in 0..base.rows() {
        sum += T::one() - cosine_similarity(base.row(n), decoded.row(n))?;
    }
    let value = sum / T::from_usize(base.rows());
    Ok(LossValue {
        value,
        contrastive: None,
        reconstruction: Some(value),
        excluded_pairs: 0,
    })
}

/// Weighted sum of the two components, breakdown retained.
pub fn combined_loss<T: Scalar>(
    weights: LossWeights<T>,
    contrastive: T,
    reconstruction: T,
) -> LossValue<T> {
    LossValue {
        value: weights.contrastive * contrastive + weights.reconstruction * reconstruction,
        contrastive: Some(contrastive),
        reconstruction: Some(reconstruction),
        excluded_pairs: 0,
    }
}

/// Threshold below which a geodesic target counts as zero for the relative
/// distance fit.
pub const ZERO_GEODESIC: f64 = 1e-8;

/// Squared-distance fit between Euclidean embedding distances and raw
/// (unrescaled) geodesic targets, summed over all (vertex, anchor) pairs.
/// With `relative` each term is divided by the squared target, and pairs
/// whose target is (numerically) zero are excluded and counted.
pub fn distance_fit_loss<T: Scalar>(
    emb: &Matrix<T>,
    anchors: &[usize],
    targets: &Matrix<T>,
    relative: bool,
) -> Result<LossValue<T>> {
    check_anchors(emb, anchors, targets)?;
    let zero_floor = T::from_f64(ZERO_GEODESIC);
    let mut sum = T::zero();
    let mut excluded = 0usize;
    for n in 0..emb.rows() {
        for (c, &a) in anchors.iter().enumerate() {
            let ds = targets.get(n, c);
            if relative && ds < zero_floor {
                excluded += 1;
                continue;
            }
            let mut d2 = T::zero();
            for (x, y) in emb.row(n).iter().zip(emb.row(a)) {
                let d = *x - *y;
                d2 += d * d;
            }
            let de = d2.sqrt();
            let diff = de - ds;
            let term = diff * diff;
            sum += if relative { term / (ds * ds) } else { term };
        }
    }
    Ok(LossValue {
        value: sum,
        contrastive: None,
        reconstruction: None,
        excluded_pairs: excluded,
    })
}

/// For each row of `emb`, the indices of its `k` nearest other rows by
/// Euclidean distance (ties broken toward the lower index).
pub fn k_nearest_embedding_neighbors<T: Scalar>(
    emb: &Matrix<T>,
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    let n = emb.rows();
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= k < {n} rows, got k={k}"
        )));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut d2: Vec<(T, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let mut s = T::zero();
                for (x, y) in emb.row(i).iter().zip(emb.row(j)) {
                    let d = *x - *y;
                    s += d * d;
                }
                (s, j)
            })
            .collect();
        d2.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
        out.push(d2.iter().take(k).map(|&(_, j)| j).collect());
    }
    Ok(out)
}

/// Neighborhood-shape objective: for each point, the vector of Euclidean
/// embedding distances to its `k` chosen neighbors should be parallel to
/// the vector of geodesic distances to the same neighbors. Value is the
/// mean of `1 - cos(distance vector, geodesic vector)`.
///
/// `geo.get(i, k)` is the geodesic distance from point `i` to
/// `neighbors[i][k]`. Neighbor choice is treated as a constant.
pub fn neighborhood_shape_loss<T: Scalar>(
    emb: &Matrix<T>,
    neighbors: &[Vec<usize>],
    geo: &Matrix<T>,
) -> Result<LossValue<T>> {
    let n = emb.rows();
    if neighbors.len() != n || geo.rows() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} neighbor lists and {} geodesic rows for {} points",
            neighbors.len(),
            geo.rows(),
            n
        )));
    }
    let mut sum = T::zero();
    for i in 0..n {
        let list = &neighbors[i];
        if list.len() != geo.cols() {
            return Err(Error::DimensionMismatch(format!(
                "point {i}: {} neighbors vs {} geodesic entries",
                list.len(),
                geo.cols()
            )));
        }
        let mut d = Vec::with_capacity(list.len());
        for &j in list {
            if j >= n {
                return Err(Error::InvalidArgument(format!(
                    "neighbor {j} out of range for {n} points"
                )));
            }
            let mut s = T::zero();
            for (x, y) in emb.row(i).iter().zip(emb.row(j)) {
                let dd = *x - *y;
                s += dd * dd;
            }
            d.push(s.sqrt());
        }
        sum += T::one() - cosine_similarity(&d, geo.row(i))?;
    }
    Ok(LossValue::simple(sum / T::from_usize(n)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_identity_orthogonal_and_diagonal() {
        assert_eq!(cosine_similarity(&[2.0f64, 0.0], &[2.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0f64, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
        assert!(cosine_similarity(&[0.0f64, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn cosine_is_clamped_against_rounding() {
        // Nearly parallel vectors whose raw cosine can exceed 1 by rounding.
        let u = [0.1f32 + 0.2, 0.3, 0.7];
        let c = cosine_similarity(&u, &u).unwrap();
        assert!(c <= 1.0);
    }

    #[test]
    fn contrastive_analytic_pairs() {
        // Two identical rows, anchor = row 1, target 0 -> loss 0.
        let emb = Matrix::from_vec(2, 2, vec![1.0f64, 0.0, 1.0, 0.0]).unwrap();
        let t = Matrix::from_vec(2, 1, vec![0.0f64, 0.0]).unwrap();
        assert_eq!(contrastive_loss(&emb, &[1], &t).unwrap().value, 0.0);

        // Opposite rows with target 1 -> both pairs fit perfectly: the
        // (row 0, anchor) pair has phi = -1 so predicted distance 1, and
        // the anchor's own pair has phi = 1 so predicted distance 0.
        let emb = Matrix::from_vec(2, 2, vec![1.0f64, 0.0, -1.0, 0.0]).unwrap();
        let t = Matrix::from_vec(2, 1, vec![1.0f64, 0.0]).unwrap();
        assert_eq!(contrastive_loss(&emb, &[1], &t).unwrap().value, 0.0);

        // Identical rows with target 0.5 -> loss 0.5.
        let emb = Matrix::from_vec(1, 2, vec![1.0f64, 0.0]).unwrap();
        let t = Matrix::from_vec(1, 1, vec![0.5f64]).unwrap();
        assert_eq!(contrastive_loss(&emb, &[0], &t).unwrap().value, 0.5);
    }

    #[test]
    fn contrastive_is_rotation_invariant() {
        let emb = Matrix::from_vec(3, 2, vec![1.0f64, 0.0, 0.6, 0.8, -1.0, 0.0]).unwrap();
        let t = Matrix::from_vec(3, 2, vec![0.1f64, 0.9, 0.3, 0.2, 0.8, 0.4]).unwrap();
        let base = contrastive_loss(&emb, &[0, 2], &t).unwrap().value;
        // Rotate all rows by 30 degrees.
        let (s, c) = (0.5f64, 3.0f64.sqrt() / 2.0);
        let rot = emb.clone();
        let mut rot = rot;
        for i in 0..3 {
            let r = rot.row_mut(i);
            let (x, y) = (r[0], r[1]);
            r[0] = c * x - s * y;
            r[1] = s * x + c * y;
        }
        let rotated = contrastive_loss(&rot, &[0, 2], &t).unwrap().value;
        assert!((base - rotated).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_extremes() {
        let base = Matrix::from_vec(2, 2, vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(reconstruction_loss(&base, &base).unwrap().value, 0.0);
        let neg = base.map(|v| -v);
        assert_eq!(reconstruction_loss(&base, &neg).unwrap().value, 2.0);
        let ortho = Matrix::from_vec(2, 2, vec![0.0f64, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(reconstruction_loss(&base, &ortho).unwrap().value, 1.0);
    }

    #[test]
    fn combined_weights_work() {
        let w = LossWeights { reconstruction: 1.0f64, contrastive: 1.0 };
        assert_eq!(combined_loss(w, 0.2, 0.3).value, 0.5);
        let only_r = LossWeights { reconstruction: 1.0f64, contrastive: 0.0 };
        assert_eq!(combined_loss(only_r, 0.2, 0.3).value, 0.3);
        let only_c = LossWeights { reconstruction: 0.0f64, contrastive: 1.0 };
        assert_eq!(combined_loss(only_c, 0.2, 0.3).value, 0.2);
        assert!(LossWeights { reconstruction: 0.0f64, contrastive: 0.0 }.validate().is_err());
    }

    #[test]
    fn distance_fit_analytic_values() {
        // Single pair with embedding distance 2 and target 1.
        let emb = Matrix::from_vec(2, 1, vec![0.0f64, 2.0]).unwrap();
        let t = Matrix::from_vec(2, 1, vec![1.0f64, 0.0]).unwrap();
        // Pairs: (0, anchor=1): de=2, ds=1 -> rel 1; (1,1): de=0, ds=0 ->
        // excluded in relative mode.
        let rel = distance_fit_loss(&emb, &[1], &t, true).unwrap();
        assert_eq!(rel.value, 1.0);
        assert_eq!(rel.excluded_pairs, 1);
        // Plain mode keeps the zero pair (contributes 0).
        let plain = distance_fit_loss(&emb, &[1], &t, false).unwrap();
        assert_eq!(plain.value, 1.0);
        assert_eq!(plain.excluded_pairs, 0);
    }

    #[test]
    fn distance_fit_zero_when_exact() {
        let emb = Matrix::from_vec(3, 1, vec![0.0f64, 1.0, 3.0]).unwrap();
        let t = Matrix::from_vec(3, 1, vec![0.0f64, 1.0, 3.0]).unwrap();
        let l = distance_fit_loss(&emb, &[0], &t, false).unwrap();
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn neighbors_exclude_self_and_break_ties_low() {
        let emb = Matrix::from_vec(4, 1, vec![0.0f64, 1.0, -1.0, 3.0]).unwrap();
        let nb = k_nearest_embedding_neighbors(&emb, 2).unwrap();
        // Point 0: distances 1 (to 1), 1 (to 2), 3 (to 3); tie -> 1 then 2.
        assert_eq!(nb[0], vec![1, 2]);
        assert_eq!(nb[3], vec![1, 0]);
    }

    #[test]
    fn neighborhood_shape_zero_for_proportional_vectors_and_scale_invariant() {
        let emb = Matrix::from_vec(3, 1, vec![0.0f64, 1.0, 2.0]).unwrap();
        let neighbors = vec![vec![1, 2], vec![0, 2], vec![0, 1]];
        // Geodesics proportional to the embedding distances (factor 5).
        let mut geo = Matrix::<f64>::zeros(3, 2);
        for i in 0..3 {
            for (kk, &j) in neighbors[i].iter().enumerate() {
                geo.set(i, kk, 5.0 * (emb.get(i, 0) - emb.get(j, 0)).abs());
            }
        }
        let l = neighborhood_shape_loss(&emb, &neighbors, &geo).unwrap();
        assert!(l.value.abs() < 1e-12);

        // Positive global rescale of the embedding leaves the value fixed.
        let scaled = emb.map(|v| v * 17.0);
        let ls = neighborhood_shape_loss(&scaled, &neighbors, &geo).unwrap();
        assert!((ls.value - l.value).abs() < 1e-12);
    }
}
