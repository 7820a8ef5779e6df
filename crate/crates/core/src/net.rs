//! Reverse-mode differentiation, the encoder/decoder pair, the optimizer,
//! EMA tracking, and checkpointing.
//!
//! The computation graph is a simple append-only tape of matrix-valued
//! nodes: leaves (parameters and inputs), the handful of layer ops the
//! autoencoder needs, and scalar loss heads whose forward values come from
//! the kernels in [`crate::losses`] so that graph values and standalone
//! loss evaluations agree exactly. `Tape::backward` runs one reverse sweep
//! from a scalar head and returns a gradient per node.
//!
//! The encoder is three blocks of `resize(x + layer_norm(silu(keep(x))))`
//! where `keep` preserves width and `resize` shrinks it; the decoder is the
//! mirrored stack. Stage widths interpolate geometrically from the input
//! dimension down to the embedding dimension (halving at each stage when
//! the ratio is 8, e.g. 2048 -> 1024 -> 512 -> 256). Encoder and decoder
//! outputs are row-normalized onto the unit sphere; the distance-fit
//! ablation objectives disable the encoder-side normalization because they
//! must learn absolute magnitudes.

use std::collections::BTreeMap;
use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses;
use crate::matrix::{dot, Matrix};
use crate::scalar::Scalar;

pub const LAYER_NORM_EPSILON: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    /// y = x w^T + b (b broadcast over rows).
    Affine { x: ValueId, w: ValueId, b: ValueId },
    Silu { x: ValueId },
    /// Row-wise layer norm with learned gain/bias (1 x width each).
    LayerNorm { x: ValueId, gain: ValueId, bias: ValueId },
    Add { a: ValueId, b: ValueId },
    /// Rows scaled to unit Euclidean norm.
    NormalizeRows { x: ValueId },
    RowSoftmax { x: ValueId },
    /// Mean |target - (1 - cos(z_n, z_a)) / 2| over all (row, anchor) pairs.
    ContrastiveGeodesic {
        emb: ValueId,
        anchors: Vec<usize>,
        targets: Matrix<T>,
    },
    /// Mean (1 - cos(base_n, decoded_n)) over rows; base is constant.
    CosineReconstruction { decoded: ValueId, base: Matrix<T> },
    /// Sum of (|z_n - z_a| - target)^2, optionally divided by target^2.
    DistanceFit {
        emb: ValueId,
        anchors: Vec<usize>,
        targets: Matrix<T>,
        relative: bool,
    },
    /// Mean (1 - cos(embedding-distance vector, geodesic vector)) over
    /// points; neighbor choice is constant.
    NeighborCosine {
        emb: ValueId,
        neighbors: Vec<Vec<usize>>,
        geo: Matrix<T>,
    },
    /// Mean squared error against a constant target, averaged over all
    /// entries.
    MeanSquaredError { pred: ValueId, target: Matrix<T> },
    /// Scalar combination sum_i c_i * part_i.
    WeightedSum { parts: Vec<(ValueId, T)> },
}

#[derive(Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

/// Gradients from one backward sweep, indexed by [`ValueId`].
#[derive(Debug)]
pub struct Gradients<T> {
    slots: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ValueId) -> Option<&Matrix<T>> {
        self.slots[id.0].as_ref()
    }

    /// Gradient of a node, or zeros of its shape if the node did not
    /// influence the loss.
    pub fn take_or_zeros(&mut self, id: ValueId, rows: usize, cols: usize) -> Matrix<T> {
        self.slots[id.0]
            .take()
            .unwrap_or_else(|| Matrix::zeros(rows, cols))
    }
}

/// Append-only reverse-mode tape over matrices.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: ValueId) -> &Matrix<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: ValueId) -> T {
        self.nodes[id.0].value.get(0, 0)
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> ValueId {
        self.nodes.push(Node { value, op });
        ValueId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix<T>) -> ValueId {
        self.push(value, Op::Leaf)
    }

    /// Affine map `y = x w^T + b`: `x` is N x I, `w` is O x I, `b` is 1 x O.
    pub fn affine(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let (xm, wm, bm) = (self.value(x), self.value(w), self.value(b));
        if xm.cols() != wm.cols() || bm.rows() != 1 || bm.cols() != wm.rows() {
            return Err(Error::DimensionMismatch(format!(
                "affine: x {}x{}, w {}x{}, b {}x{}",
                xm.rows(),
                xm.cols(),
                wm.rows(),
                wm.cols(),
                bm.rows(),
                bm.cols()
            )));
        }
        let mut y = xm.matmul_nt(wm);
        for r in 0..y.rows() {
            let row = y.row_mut(r);
            for (c, v) in row.iter_mut().enumerate() {
                *v += bm.get(0, c);
            }
        }
        self.check_finite(&y, "affine")?;
        Ok(self.push(y, Op::Affine { x, w, b }))
    }

    pub fn silu(&mut self, x: ValueId) -> Result<ValueId> {
        let y = self.value(x).map(|v| v * sigmoid(v));
        self.check_finite(&y, "silu")?;
        Ok(self.push(y, Op::Silu { x }))
    }

    pub fn layer_norm(&mut self, x: ValueId, gain: ValueId, bias: ValueId) -> Result<ValueId> {
        let (xm, gm, bm) = (self.value(x), self.value(gain), self.value(bias));
        let w = xm.cols();
        if gm.rows() != 1 || gm.cols() != w || bm.rows() != 1 || bm.cols() != w {
            return Err(Error::DimensionMismatch(format!(
                "layer norm over width {w} with gain {}x{} and bias {}x{}",
                gm.rows(),
                gm.cols(),
                bm.rows(),
                bm.cols()
            )));
        }
        let eps = T::from_f64(LAYER_NORM_EPSILON);
        let mut y = Matrix::zeros(xm.rows(), w);
        for r in 0..xm.rows() {
            let row = xm.row(r);
            let mean = row.iter().copied().sum::<T>() / T::from_usize(w);
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                / T::from_usize(w);
            let inv = T::one() / (var + eps).sqrt();
            let out = y.row_mut(r);
            for c in 0..w {
                let hat = (row[c] - mean) * inv;
                out[c] = gm.get(0, c) * hat + bm.get(0, c);
            }
        }
        self.check_finite(&y, "layer norm")?;
        Ok(self.push(y, Op::LayerNorm { x, gain, bias }))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (am, bm) = (self.value(a), self.value(b));
        if am.rows() != bm.rows() || am.cols() != bm.cols() {
            return Err(Error::DimensionMismatch(format!(
                "add: {}x{} vs {}x{}",
                am.rows(),
                am.cols(),
                bm.rows(),
                bm.cols()
            )));
        }
        let y = am.add(bm);
        Ok(self.push(y, Op::Add { a, b }))
    }

    /// Scales each row to unit norm; an exactly-zero row is an error rather
    /// than an epsilon guard (a zero pre-normalization row means the model
    /// or data is broken, and guards would hide it).
    pub fn normalize_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let xm = self.value(x);
        let mut y = xm.clone();
        for r in 0..y.rows() {
            let row = y.row_mut(r);
            let n = dot(row, row).sqrt();
            if !(n > T::zero()) {
                return Err(Error::Degenerate(format!(
                    "row {r} has zero norm before normalization"
                )));
            }
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        self.check_finite(&y, "row normalization")?;
        Ok(self.push(y, Op::NormalizeRows { x }))
    }

    pub fn row_softmax(&mut self, x: ValueId) -> Result<ValueId> {
        let xm = self.value(x);
        let mut y = xm.clone();
        for r in 0..y.rows() {
            let row = y.row_mut(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.check_finite(&y, "softmax")?;
        Ok(self.push(y, Op::RowSoftmax { x }))
    }

    pub fn contrastive_geodesic(
        &mut self,
        emb: ValueId,
        anchors: &[usize],
        targets: &Matrix<T>,
    ) -> Result<ValueId> {
        let value = losses::contrastive_loss(self.value(emb), anchors, targets)?.value;
        Ok(self.push(
            scalar_matrix(value),
            Op::ContrastiveGeodesic {
                emb,
                anchors: anchors.to_vec(),
                targets: targets.clone(),
            },
        ))
    }

    pub fn cosine_reconstruction(&mut self, decoded: ValueId, base: &Matrix<T>) -> Result<ValueId> {
        let value = losses::reconstruction_loss(base, self.value(decoded))?.value;
        Ok(self.push(
            scalar_matrix(value),
            Op::CosineReconstruction {
                decoded,
                base: base.clone(),
            },
        ))
    }

    /// Returns the loss node and the number of excluded zero-target pairs
    /// (relative mode only).
    pub fn distance_fit(
        &mut self,
        emb: ValueId,
        anchors: &[usize],
        targets: &Matrix<T>,
        relative: bool,
    ) -> Result<(ValueId, usize)> {
        let lv = losses::distance_fit_loss(self.value(emb), anchors, targets, relative)?;
        let id = self.push(
            scalar_matrix(lv.value),
            Op::DistanceFit {
                emb,
                anchors: anchors.to_vec(),
                targets: targets.clone(),
                relative,
            },
        );
        Ok((id, lv.excluded_pairs))
    }

    pub fn neighbor_cosine(
        &mut self,
        emb: ValueId,
        neighbors: &[Vec<usize>],
        geo: &Matrix<T>,
    ) -> Result<ValueId> {
        let value = losses::neighborhood_shape_loss(self.value(emb), neighbors, geo)?.value;
        Ok(self.push(
            scalar_matrix(value),
            Op::NeighborCosine {
                emb,
                neighbors: neighbors.to_vec(),
                geo: geo.clone(),
            },
        ))
    }

    pub fn mean_squared_error(&mut self, pred: ValueId, target: &Matrix<T>) -> Result<ValueId> {
        let pm = self.value(pred);
        if pm.rows() != target.rows() || pm.cols() != target.cols() {
            return Err(Error::DimensionMismatch(format!(
                "mse: prediction {}x{} vs target {}x{}",
                pm.rows(),
                pm.cols(),
                target.rows(),
                target.cols()
            )));
        }
        let count = T::from_usize(pm.rows() * pm.cols());
        let mut sum = T::zero();
        for (p, t) in pm.data().iter().zip(target.data()) {
            let d = *p - *t;
            sum += d * d;
        }
        Ok(self.push(
            scalar_matrix(sum / count),
            Op::MeanSquaredError {
                pred,
                target: target.clone(),
            },
        ))
    }

    pub fn weighted_sum(&mut self, parts: &[(ValueId, T)]) -> Result<ValueId> {
        let mut total = T::zero();
        for &(id, c) in parts {
            let v = self.value(id);
            if v.rows() != 1 || v.cols() != 1 {
                return Err(Error::InvalidArgument(
                    "weighted_sum expects scalar parts".into(),
                ));
            }
            total += c * v.get(0, 0);
        }
        Ok(self.push(
            scalar_matrix(total),
            Op::WeightedSum {
                parts: parts.to_vec(),
            },
        ))
    }

    fn check_finite(&self, m: &Matrix<T>, what: &str) -> Result<()> {
        if !m.is_finite() {
            return Err(Error::NonFinite(format!("non-finite {what} output")));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar node. Every reachable node receives a
    /// gradient; non-finite gradients abort.
    pub fn backward(&self, root: ValueId) -> Result<Gradients<T>> {
        let root_val = self.value(root);
        if root_val.rows() != 1 || root_val.cols() != 1 {
            return Err(Error::InvalidArgument(
                "backward root must be a scalar node".into(),
            ));
        }
        let mut slots: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        slots[root.0] = Some(scalar_matrix(T::one()));

        for idx in (0..self.nodes.len()).rev() {
            let grad = match slots[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !grad.is_finite() {
                return Err(Error::NonFinite(format!(
                    "non-finite gradient at node {idx}"
                )));
            }
            self.propagate(idx, &grad, &mut slots)?;
            slots[idx] = Some(grad);
        }
        Ok(Gradients { slots })
    }

    fn propagate(
        &self,
        idx: usize,
        dy: &Matrix<T>,
        slots: &mut [Option<Matrix<T>>],
    ) -> Result<()> {
        let accum = |slots: &mut [Option<Matrix<T>>], id: ValueId, delta: Matrix<T>| {
            match &mut slots[id.0] {
                Some(g) => g.add_assign(&delta),
                none => *none = Some(delta),
            }
        };

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let xm = self.value(*x);
                let wm = self.value(*w);
                let dx = dy.matmul_nn(wm);
                let dw = dy.matmul_tn(xm);
                let mut db = Matrix::zeros(1, wm.rows());
                for r in 0..dy.rows() {
                    for c in 0..dy.cols() {
                        db.set(0, c, db.get(0, c) + dy.get(r, c));
                    }
                }
                accum(slots, *x, dx);
                accum(slots, *w, dw);
                accum(slots, *b, db);
            }
            Op::Silu { x } => {
                let xm = self.value(*x);
                let mut dx = dy.clone();
                for (g, &v) in dx.data_mut().iter_mut().zip(xm.data()) {
                    let s = sigmoid(v);
                    *g = *g * (s + v * s * (T::one() - s));
                }
                accum(slots, *x, dx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let xm = self.value(*x);
                let gm = self.value(*gain);
                let w = xm.cols();
                let wn = T::from_usize(w);
                let eps = T::from_f64(LAYER_NORM_EPSILON);
                let mut dx = Matrix::zeros(xm.rows(), w);
                let mut dgain = Matrix::zeros(1, w);
                let mut dbias = Matrix::zeros(1, w);
                for r in 0..xm.rows() {
                    let row = xm.row(r);
                    let mean = row.iter().copied().sum::<T>() / wn;
                    let var = row
                        .iter()
                        .map(|&v| (v - mean) * (v - mean))
                        .sum::<T>()
                        / wn;
                    let inv = T::one() / (var + eps).sqrt();
                    // dhat = dy * gain; closed-form row gradient.
                    let mut mean_dhat = T::zero();
                    let mut mean_dhat_hat = T::zero();
                    let mut hats = vec![T::zero(); w];
                    let mut dhats = vec![T::zero(); w];
                    for c in 0..w {
                        let hat = (row[c] - mean) * inv;
                        let dh = dy.get(r, c) * gm.get(0, c);
                        hats[c] = hat;
                        dhats[c] = dh;
                        mean_dhat += dh;
                        mean_dhat_hat += dh * hat;
                        dgain.set(0, c, dgain.get(0, c) + dy.get(r, c) * hat);
                        dbias.set(0, c, dbias.get(0, c) + dy.get(r, c));
                    }
                    mean_dhat /= wn;
                    mean_dhat_hat /= wn;
                    for c in 0..w {
                        dx.set(r, c, inv * (dhats[c] - mean_dhat - hats[c] * mean_dhat_hat));
                    }
                }
                accum(slots, *x, dx);
                accum(slots, *gain, dgain);
                accum(slots, *bias, dbias);
            }
            Op::Add { a, b } => {
                accum(slots, *a, dy.clone());
                accum(slots, *b, dy.clone());
            }
            Op::NormalizeRows { x } => {
                let xm = self.value(*x);
                let ym = &self.nodes[idx].value;
                let mut dx = Matrix::zeros(xm.rows(), xm.cols());
                for r in 0..xm.rows() {
                    let n = dot(xm.row(r), xm.row(r)).sqrt();
                    let y = ym.row(r);
                    let g = dy.row(r);
                    let gy = dot(g, y);
                    let out = dx.row_mut(r);
                    for c in 0..y.len() {
                        out[c] = (g[c] - gy * y[c]) / n;
                    }
                }
                accum(slots, *x, dx);
            }
            Op::RowSoftmax { x } => {
                let ym = &self.nodes[idx].value;
                let mut dx = Matrix::zeros(ym.rows(), ym.cols());
                for r in 0..ym.rows() {
                    let y = ym.row(r);
                    let g = dy.row(r);
                    let gy = dot(g, y);
                    let out = dx.row_mut(r);
                    for c in 0..y.len() {
                        out[c] = y[c] * (g[c] - gy);
                    }
                }
                accum(slots, *x, dx);
            }
            Op::ContrastiveGeodesic {
                emb,
                anchors,
                targets,
            } => {
                let scale = dy.get(0, 0);
                let zm = self.value(*emb);
                let (n_rows, dim) = (zm.rows(), zm.cols());
                let norms: Vec<T> = (0..n_rows)
                    .map(|r| dot(zm.row(r), zm.row(r)).sqrt())
                    .collect();
                if norms.iter().any(|&n| !(n > T::zero())) {
                    return Err(Error::Degenerate(
                        "zero embedding row in contrastive gradient".into(),
                    ));
                }
                let count = T::from_usize(n_rows * anchors.len());
                let half = T::from_f64(0.5);
                let mut dz = Matrix::zeros(n_rows, dim);
                for n in 0..n_rows {
                    for (c, &a) in anchors.iter().enumerate() {
                        let u = zm.row(n);
                        let v = zm.row(a);
                        let raw = dot(u, v) / (norms[n] * norms[a]);
                        let predicted = (T::one() - losses::clamp_unit(raw)) * half;
                        let r = targets.get(n, c) - predicted;
                        let sign = if r > T::zero() {
                            T::one()
                        } else if r < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        if sign == T::zero() {
                            continue;
                        }
                        // d|r|/dphi = sign / 2, scaled by the mean factor.
                        let dphi = scale * sign * half / count;
                        let inv_uv = T::one() / (norms[n] * norms[a]);
                        let inv_u2 = T::one() / (norms[n] * norms[n]);
                        let inv_v2 = T::one() / (norms[a] * norms[a]);
                        for k in 0..dim {
                            let du = dphi * (v[k] * inv_uv - raw * u[k] * inv_u2);
                            let dv = dphi * (u[k] * inv_uv - raw * v[k] * inv_v2);
                            dz.set(n, k, dz.get(n, k) + du);
                            dz.set(a, k, dz.get(a, k) + dv);
                        }
                    }
                }
                accum(slots, *emb, dz);
            }
            Op::CosineReconstruction { decoded, base } => {
                let scale = dy.get(0, 0);
                let vm = self.value(*decoded);
                let inv_n = T::one() / T::from_usize(vm.rows());
                let mut dv = Matrix::zeros(vm.rows(), vm.cols());
                for r in 0..vm.rows() {
                    let u = base.row(r);
                    let v = vm.row(r);
                    let nu = dot(u, u).sqrt();
                    let nv = dot(v, v).sqrt();
                    if !(nu > T::zero()) || !(nv > T::zero()) {
                        return Err(Error::Degenerate(
                            "zero row in reconstruction gradient".into(),
                        ));
                    }
                    let raw = dot(u, v) / (nu * nv);
                    let coeff = -scale * inv_n;
                    let inv_uv = T::one() / (nu * nv);
                    let inv_v2 = T::one() / (nv * nv);
                    let out = dv.row_mut(r);
                    for c in 0..v.len() {
                        out[c] = coeff * (u[c] * inv_uv - raw * v[c] * inv_v2);
                    }
                }
                accum(slots, *decoded, dv);
            }
            Op::DistanceFit {
                emb,
                anchors,
                targets,
                relative,
            } => {
                let scale = dy.get(0, 0);
                let zm = self.value(*emb);
                let dim = zm.cols();
                let zero_floor = T::from_f64(losses::ZERO_GEODESIC);
                let two = T::one() + T::one();
                let mut dz = Matrix::zeros(zm.rows(), dim);
                for n in 0..zm.rows() {
                    for (c, &a) in anchors.iter().enumerate() {
                        let ds = targets.get(n, c);
                        if *relative && ds < zero_floor {
                            continue;
                        }
                        let u = zm.row(n);
                        let v = zm.row(a);
                        let mut d2 = T::zero();
                        for k in 0..dim {
                            let d = u[k] - v[k];
                            d2 += d * d;
                        }
                        let de = d2.sqrt();
                        let w = if *relative { T::one() / (ds * ds) } else { T::one() };
                        if de > zero_floor {
                            let g = scale * two * w * (de - ds) / de;
                            for k in 0..dim {
                                let delta = g * (u[k] - v[k]);
                                dz.set(n, k, dz.get(n, k) + delta);
                                dz.set(a, k, dz.get(a, k) - delta);
                            }
                        } else if ds <= zero_floor {
                            // Loss is w * |u - v|^2 here; its gradient
                            // 2 w (u - v) vanishes smoothly at u = v.
                            let g = scale * two * w;
                            for k in 0..dim {
                                let delta = g * (u[k] - v[k]);
                                dz.set(n, k, dz.get(n, k) + delta);
                                dz.set(a, k, dz.get(a, k) - delta);
                            }
                        }
                        // de = 0 with ds > 0 is a cone point: zero
                        // subgradient.
                    }
                }
                accum(slots, *emb, dz);
            }
            Op::NeighborCosine {
                emb,
                neighbors,
                geo,
            } => {
                let scale = dy.get(0, 0);
                let zm = self.value(*emb);
                let dim = zm.cols();
                let n_rows = zm.rows();
                let inv_n = T::one() / T::from_usize(n_rows);
                let zero_floor = T::from_f64(losses::ZERO_GEODESIC);
                let mut dz = Matrix::zeros(n_rows, dim);
                for i in 0..n_rows {
                    let list = &neighbors[i];
                    let m = geo.row(i);
                    let mut d = vec![T::zero(); list.len()];
                    for (k, &j) in list.iter().enumerate() {
                        let mut s = T::zero();
                        for c in 0..dim {
                            let dd = zm.get(i, c) - zm.get(j, c);
                            s += dd * dd;
                        }
                        d[k] = s.sqrt();
                    }
                    let nd = dot(&d, &d).sqrt();
                    let nm = dot(m, m).sqrt();
                    if !(nd > T::zero()) || !(nm > T::zero()) {
                        return Err(Error::Degenerate(
                            "zero distance vector in neighborhood gradient".into(),
                        ));
                    }
                    let raw = dot(&d, m) / (nd * nm);
                    let coeff = -scale * inv_n;
                    let inv_dm = T::one() / (nd * nm);
                    let inv_d2 = T::one() / (nd * nd);
                    for (k, &j) in list.iter().enumerate() {
                        if d[k] <= zero_floor {
                            continue; // cone point: zero subgradient
                        }
                        let dl_dk = coeff * (m[k] * inv_dm - raw * d[k] * inv_d2);
                        let g = dl_dk / d[k];
                        for c in 0..dim {
                            let delta = g * (zm.get(i, c) - zm.get(j, c));
                            dz.set(i, c, dz.get(i, c) + delta);
                            dz.set(j, c, dz.get(j, c) - delta);
                        }
                    }
                }
                accum(slots, *emb, dz);
            }
            Op::MeanSquaredError { pred, target } => {
                let scale = dy.get(0, 0);
                let pm = self.value(*pred);
                let coeff = scale * (T::one() + T::one())
                    / T::from_usize(pm.rows() * pm.cols());
                let mut dp = Matrix::zeros(pm.rows(), pm.cols());
                for (o, (p, t)) in dp
                    .data_mut()
                    .iter_mut()
                    .zip(pm.data().iter().zip(target.data()))
                {
                    *o = coeff * (*p - *t);
                }
                accum(slots, *pred, dp);
            }
            Op::WeightedSum { parts } => {
                let scale = dy.get(0, 0);
                for &(id, c) in parts {
                    accum(slots, id, scalar_matrix(scale * c));
                }
            }
        }
        Ok(())
    }
}

fn scalar_matrix<T: Scalar>(v: T) -> Matrix<T> {
    Matrix::from_vec(1, 1, vec![v]).expect("1x1 matrix")
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

// ---------------------------------------------------------------------------
// Parameters and the autoencoder
// ---------------------------------------------------------------------------

/// Named, ordered parameter tensors.
#[derive(Debug, Clone)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix<T>) {
        self.names.push(name.into());
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.values
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(|m| m.cast::<U>()).collect(),
        }
    }
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameter leaves bound onto a tape, in [`ParamSet`] order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub ids: Vec<ValueId>,
}

/// Three-block contracting encoder and mirrored expanding decoder.
#[derive(Debug, Clone)]
pub struct Autoencoder<T> {
    widths: [usize; 4],
    params: ParamSet<T>,
}

impl<T: Scalar> Autoencoder<T> {
    /// Stage widths from input dimension `f` down to embedding dimension
    /// `s`: geometric interpolation rounded to integers, which halves
    /// exactly per stage when `f / s = 8` (e.g. 2048, 1024, 512, 256).
    pub fn stage_widths(input_dim: usize, embed_dim: usize) -> Result<[usize; 4]> {
        if embed_dim == 0 || input_dim <= embed_dim {
            return Err(Error::InvalidArgument(format!(
                "need input_dim > embed_dim >= 1, got {input_dim} and {embed_dim}"
            )));
        }
        let f = input_dim as f64;
        let s = embed_dim as f64;
        let ratio = s / f;
        let mut widths = [0usize; 4];
        for (k, w) in widths.iter_mut().enumerate() {
            *w = (f * ratio.powf(k as f64 / 3.0)).round() as usize;
        }
        widths[0] = input_dim;
        widths[3] = embed_dim;
        for k in 0..3 {
            if widths[k + 1] > widths[k] || widths[k + 1] == 0 {
                return Err(Error::InvalidArgument(format!(
                    "degenerate stage widths {widths:?}"
                )));
            }
        }
        Ok(widths)
    }

    /// Fresh model with uniform fan-in-scaled affine initialization
    /// (`U(-1/sqrt(fan_in), 1/sqrt(fan_in))`), layer-norm gain 1 / bias 0.
    pub fn new(input_dim: usize, embed_dim: usize, seed: u64) -> Result<Self> {
        let widths = Self::stage_widths(input_dim, embed_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();

        let push_block = |params: &mut ParamSet<T>,
                              rng: &mut ChaCha8Rng,
                              prefix: String,
                              w_in: usize,
                              w_out: usize| {
            let uniform = |rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut m = Matrix::<T>::zeros(rows, cols);
                for v in m.data_mut() {
                    *v = T::from_f64(rng.gen_range(-bound..bound));
                }
                m
            };
            params.push(
                format!("{prefix}.keep.weight"),
                uniform(rng, w_in, w_in, w_in),
            );
            params.push(format!("{prefix}.keep.bias"), uniform(rng, 1, w_in, w_in));
            params.push(format!("{prefix}.norm.gain"), {
                let mut m = Matrix::<T>::zeros(1, w_in);
                for v in m.data_mut() {
                    *v = T::one();
                }
                m
            });
            params.push(format!("{prefix}.norm.bias"), Matrix::<T>::zeros(1, w_in));
            params.push(
                format!("{prefix}.resize.weight"),
                uniform(rng, w_out, w_in, w_in),
            );
            params.push(format!("{prefix}.resize.bias"), uniform(rng, 1, w_out, w_in));
        };

        for k in 0..3 {
            push_block(
                &mut params,
                &mut rng,
                format!("encoder.{k}"),
                widths[k],
                widths[k + 1],
            );
        }
        for k in 0..3 {
            push_block(
                &mut params,
                &mut rng,
                format!("decoder.{k}"),
                widths[3 - k],
                widths[2 - k],
            );
        }
        Ok(Autoencoder { widths, params })
    }

    pub fn from_params(input_dim: usize, embed_dim: usize, params: ParamSet<T>) -> Result<Self> {
        let widths = Self::stage_widths(input_dim, embed_dim)?;
        let expected = Autoencoder::<T>::new(input_dim, embed_dim, 0)?;
        if expected.params.names() != params.names() {
            return Err(Error::Format(
                "parameter names do not match the architecture".into(),
            ));
        }
        for (e, got) in expected.params.values().iter().zip(params.values()) {
            if e.rows() != got.rows() || e.cols() != got.cols() {
                return Err(Error::Format("parameter shape mismatch".into()));
            }
        }
        Ok(Autoencoder { widths, params })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.widths[3]
    }

    pub fn widths(&self) -> [usize; 4] {
        self.widths
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn set_params(&mut self, values: Vec<Matrix<T>>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} tensors for {} parameters",
                values.len(),
                self.params.len()
            )));
        }
        for (slot, v) in self.params.values_mut().iter_mut().zip(values) {
            if slot.rows() != v.rows() || slot.cols() != v.cols() {
                return Err(Error::DimensionMismatch("parameter shape mismatch".into()));
            }
            *slot = v;
        }
        Ok(())
    }

    /// Adds every parameter to the tape as a leaf, in `ParamSet` order.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams {
            ids: self
                .params
                .values()
                .iter()
                .map(|m| tape.leaf(m.clone()))
                .collect(),
        }
    }

    fn block_on(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        prefix: &str,
        x: ValueId,
    ) -> Result<ValueId> {
        let id = |name: String| -> Result<ValueId> {
            self.params
                .index_of(&name)
                .map(|i| bound.ids[i])
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
        };
        let kept = tape.affine(
            x,
            id(format!("{prefix}.keep.weight"))?,
            id(format!("{prefix}.keep.bias"))?,
        )?;
        let act = tape.silu(kept)?;
        let normed = tape.layer_norm(
            act,
            id(format!("{prefix}.norm.gain"))?,
            id(format!("{prefix}.norm.bias"))?,
        )?;
        let skipped = tape.add(x, normed)?;
        tape.affine(
            skipped,
            id(format!("{prefix}.resize.weight"))?,
            id(format!("{prefix}.resize.bias"))?,
        )
    }

    /// Encoder graph: three contracting blocks, then (optionally) row
    /// normalization onto the unit sphere.
    pub fn encode_on(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        x: ValueId,
        normalize: bool,
    ) -> Result<ValueId> {
        if tape.value(x).cols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "encoder expects dim {}, got {}",
                self.input_dim(),
                tape.value(x).cols()
            )));
        }
        let mut h = x;
        for k in 0..3 {
            h = self.block_on(tape, bound, &format!("encoder.{k}"), h)?;
        }
        if normalize {
            h = tape.normalize_rows(h)?;
        }
        Ok(h)
    }

    /// Decoder graph: the mirrored expanding stack with row normalization.
    pub fn decode_on(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        z: ValueId,
    ) -> Result<ValueId> {
        if tape.value(z).cols() != self.embed_dim() {
            return Err(Error::DimensionMismatch(format!(
                "decoder expects dim {}, got {}",
                self.embed_dim(),
                tape.value(z).cols()
            )));
        }
        let mut h = z;
        for k in 0..3 {
            h = self.block_on(tape, bound, &format!("decoder.{k}"), h)?;
        }
        tape.normalize_rows(h)
    }

    /// Plain forward encode without gradients.
    pub fn encode(&self, x: &Matrix<T>, normalize: bool) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let input = tape.leaf(x.clone());
        let out = self.encode_on(&mut tape, &bound, input, normalize)?;
        Ok(tape.value(out).clone())
    }

    /// Plain forward decode without gradients.
    pub fn decode(&self, z: &Matrix<T>) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let input = tape.leaf(z.clone());
        let out = self.decode_on(&mut tape, &bound, input)?;
        Ok(tape.value(out).clone())
    }

    pub fn cast<U: Scalar>(&self) -> Autoencoder<U> {
        Autoencoder {
            widths: self.widths,
            params: self.params.cast::<U>(),
        }
    }
}

// ---------------------------------------------------------------------------
// Optimizer and EMA
// ---------------------------------------------------------------------------

/// AdamW with decoupled weight decay:
/// `p <- p - lr * wd * p - lr * m_hat / (sqrt(v_hat) + eps)`.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    pub weight_decay: T,
    step: u64,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(learning_rate: T, weight_decay: T, params: &ParamSet<T>) -> Self {
        let shapes: Vec<Matrix<T>> = params
            .values()
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        AdamW {
            learning_rate,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            epsilon: T::from_f64(1e-8),
            weight_decay,
            step: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Matrix<T>]) -> Result<()> {
        let mask = vec![true; grads.len()];
        self.step_masked(params, grads, &mask)
    }

    /// One update; parameter tensors whose mask entry is false are left
    /// bitwise untouched, moments included.
    pub fn step_masked(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &[Matrix<T>],
        mask: &[bool],
    ) -> Result<()> {
        if grads.len() != params.len() || mask.len() != params.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} gradients and {} mask entries for {} parameters",
                grads.len(),
                mask.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            if !mask[i] {
                continue;
            }
            let g = &grads[i];
            if g.rows() != p.rows() || g.cols() != p.cols() {
                return Err(Error::DimensionMismatch(format!(
                    "gradient {i} is {}x{}, parameter is {}x{}",
                    g.rows(),
                    g.cols(),
                    p.rows(),
                    p.cols()
                )));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((pv, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = self.beta1 * *mv + (T::one() - self.beta1) * *gv;
                *vv = self.beta2 * *vv + (T::one() - self.beta2) * *gv * *gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv = *pv
                    - self.learning_rate * self.weight_decay * *pv
                    - self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }

    pub fn moments(&self) -> (&[Matrix<T>], &[Matrix<T>]) {
        (&self.m, &self.v)
    }

    pub fn restore(
        learning_rate: T,
        weight_decay: T,
        step: u64,
        m: Vec<Matrix<T>>,
        v: Vec<Matrix<T>>,
    ) -> Self {
        AdamW {
            learning_rate,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            epsilon: T::from_f64(1e-8),
            weight_decay,
            step,
            m,
            v,
        }
    }
}

/// Exponential moving average of the parameters plus the best-validation
/// snapshot (strict improvement only).
#[derive(Debug, Clone)]
pub struct Ema<T> {
    pub decay: T,
    shadow: Vec<Matrix<T>>,
    best: Option<Vec<Matrix<T>>>,
    best_loss: f64,
}

impl<T: Scalar> Ema<T> {
    pub fn new(decay: T, params: &ParamSet<T>) -> Self {
        Ema {
            decay,
            shadow: params.values().to_vec(),
            best: None,
            best_loss: f64::INFINITY,
        }
    }

    pub fn update(&mut self, params: &ParamSet<T>) {
        for (s, p) in self.shadow.iter_mut().zip(params.values()) {
            for (sv, pv) in s.data_mut().iter_mut().zip(p.data()) {
                *sv = self.decay * *sv + (T::one() - self.decay) * *pv;
            }
        }
    }

    /// Snapshots the current shadow if the validation loss strictly
    /// improves on the best seen. Returns whether a snapshot was taken.
    pub fn maybe_snapshot(&mut self, validation_loss: f64) -> bool {
        if validation_loss < self.best_loss {
            self.best_loss = validation_loss;
            self.best = Some(self.shadow.clone());
            true
        } else {
            false
        }
    }

    pub fn best_loss(&self) -> f64 {
        self.best_loss
    }

    pub fn shadow(&self) -> &[Matrix<T>] {
        &self.shadow
    }

    /// The best-validation snapshot, or the current shadow when no
    /// validation loss was ever recorded.
    pub fn best_params(&self) -> &[Matrix<T>] {
        self.best.as_ref().unwrap_or(&self.shadow)
    }

    pub fn has_snapshot(&self) -> bool {
        self.best.is_some()
    }

    pub fn restore(decay: T, shadow: Vec<Matrix<T>>, best: Option<Vec<Matrix<T>>>, best_loss: f64) -> Self {
        Ema {
            decay,
            shadow,
            best,
            best_loss,
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

/// Everything needed to resume or deploy a training run.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub model: Autoencoder<T>,
    pub optimizer: AdamW<T>,
    pub ema: Ema<T>,
    /// Whether the encoder output is row-normalized (false for the
    /// distance-fit ablation objectives, which need absolute magnitudes).
    pub normalize_embedding: bool,
}

impl<T: Scalar> TrainState<T> {
    pub fn fresh(input_dim: usize, embed_dim: usize, seed: u64, learning_rate: T, weight_decay: T, ema_decay: T, normalize_embedding: bool) -> Result<Self> {
        let model = Autoencoder::new(input_dim, embed_dim, seed)?;
        let optimizer = AdamW::new(learning_rate, weight_decay, model.params());
        let ema = Ema::new(ema_decay, model.params());
        Ok(TrainState {
            model,
            optimizer,
            ema,
            normalize_embedding,
        })
    }

    /// The deployable model: architecture plus best-EMA parameters.
    pub fn embedding_model(&self) -> Result<Autoencoder<T>> {
        let mut model = self.model.clone();
        model.set_params(self.ema.best_params().to_vec())?;
        Ok(model)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SAFC";
const CHECKPOINT_VERSION: u16 = 1;

fn write_section(out: &mut Vec<u8>, name: &str, m: &Matrix<f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Saves model, optimizer and EMA state. Payloads are 32-bit floats; a
/// save/load/save cycle is byte-identical.
pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let mut sections: Vec<(String, Matrix<f32>)> = Vec::new();
    let meta = Matrix::from_vec(
        1,
        4,
        vec![
            state.model.input_dim() as f32,
            state.model.embed_dim() as f32,
            if state.normalize_embedding { 1.0 } else { 0.0 },
            0.0,
        ],
    )?;
    sections.push(("model.meta".to_string(), meta));
    let names = state.model.params().names().to_vec();
    for (name, value) in names.iter().zip(state.model.params().values()) {
        sections.push((format!("param.{name}"), value.to_f32()));
    }
    let opt_meta = Matrix::from_vec(
        1,
        3,
        vec![
            state.optimizer.step_count() as f32,
            state.optimizer.learning_rate.to_f32(),
            state.optimizer.weight_decay.to_f32(),
        ],
    )?;
    sections.push(("opt.meta".to_string(), opt_meta));
    let (m, v) = state.optimizer.moments();
    for (name, value) in names.iter().zip(m) {
        sections.push((format!("opt.m.{name}"), value.to_f32()));
    }
    for (name, value) in names.iter().zip(v) {
        sections.push((format!("opt.v.{name}"), value.to_f32()));
    }
    let ema_meta = Matrix::from_vec(
        1,
        3,
        vec![
            state.ema.decay.to_f32(),
            state.ema.best_loss() as f32,
            if state.ema.has_snapshot() { 1.0 } else { 0.0 },
        ],
    )?;
    sections.push(("ema.meta".to_string(), ema_meta));
    for (name, value) in names.iter().zip(state.ema.shadow()) {
        sections.push((format!("ema.shadow.{name}"), value.to_f32()));
    }
    if state.ema.has_snapshot() {
        for (name, value) in names.iter().zip(state.ema.best_params()) {
            sections.push((format!("ema.best.{name}"), value.to_f32()));
        }
    }

    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (name, m) in &sections {
        write_section(&mut bytes, name, m);
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Loads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;

    let need = |cond: bool, msg: &str| -> Result<()> {
        if cond {
            Ok(())
        } else {
            Err(Error::parse(path, msg.to_string()))
        }
    };
    need(bytes.len() >= 10, "file too short for a checkpoint header")?;
    need(&bytes[0..4] == CHECKPOINT_MAGIC, "bad checkpoint magic")?;
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::parse(
            path,
            format!("unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let count = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let mut sections: BTreeMap<String, Matrix<f32>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut off = 10usize;
    for _ in 0..count {
        need(off + 2 <= bytes.len(), "truncated section header")?;
        let name_len = u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap()) as usize;
        off += 2;
        need(off + name_len + 8 <= bytes.len(), "truncated section header")?;
        let name = std::str::from_utf8(&bytes[off..off + name_len])
            .map_err(|_| Error::parse(path, "section name is not UTF-8".to_string()))?
            .to_string();
        off += name_len;
        let rows = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap()) as usize;
        off += 8;
        let len = rows
            .checked_mul(cols)
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::parse(path, format!("section {name} shape overflows")))?;
        need(off + len <= bytes.len(), "truncated section payload")?;
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows * cols {
            let p = off + 4 * i;
            data.push(f32::from_le_bytes(bytes[p..p + 4].try_into().unwrap()));
        }
        off += len;
        sections.insert(name.clone(), Matrix::from_vec(rows, cols, data)?);
        order.push(name);
    }
    need(off == bytes.len(), "trailing bytes after the last section")?;

    let take = |sections: &BTreeMap<String, Matrix<f32>>, name: &str| -> Result<Matrix<f32>> {
        sections
            .get(name)
            .cloned()
            .ok_or_else(|| Error::parse(path, format!("missing section {name}")))
    };
    let meta = take(&sections, "model.meta")?;
    let input_dim = meta.get(0, 0) as usize;
    let embed_dim = meta.get(0, 1) as usize;
    let normalize_embedding = meta.get(0, 2) != 0.0;

    // Parameter order: take the "param." sections in file order.
    let mut params = ParamSet::<T>::new();
    for name in &order {
        if let Some(bare) = name.strip_prefix("param.") {
            let m = Matrix::<T>::from_f32(&sections[name]);
            if !m.is_finite() {
                return Err(Error::NonFinite(format!("non-finite parameter {bare}")));
            }
            params.push(bare, m);
        }
    }
    let model = Autoencoder::from_params(input_dim, embed_dim, params)?;
    let names = model.params().names().to_vec();

    let opt_meta = take(&sections, "opt.meta")?;
    let mut m_moms = Vec::with_capacity(names.len());
    let mut v_moms = Vec::with_capacity(names.len());
    for name in &names {
        m_moms.push(Matrix::<T>::from_f32(&take(&sections, &format!("opt.m.{name}"))?));
        v_moms.push(Matrix::<T>::from_f32(&take(&sections, &format!("opt.v.{name}"))?));
    }
    let optimizer = AdamW::restore(
        T::from_f32(opt_meta.get(0, 1)),
        T::from_f32(opt_meta.get(0, 2)),
        opt_meta.get(0, 0) as u64,
        m_moms,
        v_moms,
    );

    let ema_meta = take(&sections, "ema.meta")?;
    let mut shadow = Vec::with_capacity(names.len());
    for name in &names {
        shadow.push(Matrix::<T>::from_f32(&take(
            &sections,
            &format!("ema.shadow.{name}"),
        )?));
    }
    let has_best = ema_meta.get(0, 2) != 0.0;
    let best = if has_best {
        let mut b = Vec::with_capacity(names.len());
        for name in &names {
            b.push(Matrix::<T>::from_f32(&take(
                &sections,
                &format!("ema.best.{name}"),
            )?));
        }
        Some(b)
    } else {
        None
    };
    let ema = Ema::restore(
        T::from_f32(ema_meta.get(0, 0)),
        shadow,
        best,
        ema_meta.get(0, 1) as f64,
    );

    Ok(TrainState {
        model,
        optimizer,
        ema,
        normalize_embedding,
    })
}
