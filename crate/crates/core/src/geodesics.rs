//! Geodesic distance fields on triangle meshes.
//!
//! The production path is the heat method: one implicit heat-diffusion step
//! from the anchor, normalization of the heat gradient into a unit vector
//! field pointing away from the anchor, and a Poisson solve that integrates
//! that field back into a distance function. Both linear systems use the
//! cotangent Laplacian and are factored once per mesh, so distance columns
//! for many anchors reuse the factorizations and may be solved in parallel.
//!
//! An exact edge-graph shortest-path solver (`dijkstra_geodesic`) serves as
//! the validation oracle: it overestimates true surface distance slightly
//! (paths are confined to edges) but is exact for its own metric.
//!
//! All heat-method internals run in `f64` regardless of the mesh scalar
//! type: the Poisson regularization (1e-8) sits below `f32` resolution.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mesh::{build_adjacency, AdjacencyIndex, Mesh};
use crate::scalar::Scalar;
use crate::sparse::{EnvelopeCholesky, SymmetricSparse};
use crate::vec3;

/// Distance columns from a set of anchor vertices. `distances` holds model
/// units; `rescaled` (present after [`rescale_distances`]) is divided by
/// the global maximum so every entry lies in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct GeodesicField<T> {
    pub anchor_indices: Vec<usize>,
    /// `vertex_count x anchor_count`.
    pub distances: Matrix<T>,
    pub rescaled: Option<Matrix<T>>,
}

impl<T: Scalar> GeodesicField<T> {
    /// Debug dump: writes the raw distance matrix in the binary feature
    /// container with the anchor list in the sidecar.
    pub fn save_distances(&self, path: &Path) -> Result<()> {
        crate::features::save_features(&self.distances, path)?;
        let mut meta = std::collections::BTreeMap::new();
        meta.insert(
            "anchors".to_string(),
            self.anchor_indices
                .iter()
                .map(|a| a.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        meta.insert("kind".to_string(), "geodesic-distances".to_string());
        crate::features::write_meta(path, &meta)
    }
}

/// Divides the whole field by its global maximum. The maximum entry maps to
/// exactly 1; an all-zero field is rejected.
pub fn rescale_distances<T: Scalar>(field: &GeodesicField<T>) -> Result<GeodesicField<T>> {
    let mut max = T::zero();
    for &v in field.distances.data() {
        if v < T::zero() {
            return Err(Error::InvalidArgument(
                "negative distance in field; clamp before rescaling".into(),
            ));
        }
        if v > max {
            max = v;
        }
    }
    if max == T::zero() {
        return Err(Error::Degenerate(
            "all geodesic distances are zero; nothing to rescale".into(),
        ));
    }
    let rescaled = field.distances.map(|v| v / max);
    Ok(GeodesicField {
        anchor_indices: field.anchor_indices.clone(),
        distances: field.distances.clone(),
        rescaled: Some(rescaled),
    })
}

fn check_anchors(anchors: &[usize], n: usize) -> Result<()> {
    if anchors.is_empty() {
        return Err(Error::InvalidArgument("anchor list is empty".into()));
    }
    for &a in anchors {
        if a >= n {
            return Err(Error::InvalidArgument(format!(
                "anchor {a} out of range for {n} vertices"
            )));
        }
    }
    Ok(())
}

/// Heat-method solver with both factorizations cached, reusable across any
/// number of anchors on the same mesh.
#[derive(Debug)]
pub struct HeatSolver {
    vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
    /// Face geometry: unit normal and double area, skipped if degenerate.
    face_normal: Vec<[f64; 3]>,
    face_double_area: Vec<f64>,
    heat: EnvelopeCholesky,
    poisson: EnvelopeCholesky,
    time_step: f64,
}

const COTAN_FLOOR: f64 = 1e-8;
const POISSON_SHIFT: f64 = 1e-8;

impl HeatSolver {
    /// Assembles mass and cotangent-Laplacian matrices and factors the heat
    /// operator `M + tL` and the shifted Poisson operator `L + eps I`, with
    /// `t = time_scale * (mean edge length)^2`.
    pub fn new<T: Scalar>(mesh: &Mesh<T>, time_scale: f64) -> Result<Self> {
        if !(time_scale > 0.0) || !time_scale.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "time_scale must be positive and finite, got {time_scale}"
            )));
        }
        let adjacency = build_adjacency(mesh)?;
        if adjacency.connected_components() != 1 {
            return Err(Error::Disconnected(format!(
                "geodesics need an edge-connected mesh; found {} components",
                adjacency.connected_components()
            )));
        }

        let n = mesh.vertices.len();
        let vertices: Vec<[f64; 3]> = mesh
            .vertices
            .iter()
            .map(|p| [p[0].to_f64(), p[1].to_f64(), p[2].to_f64()])
            .collect();
        let faces = mesh.faces.clone();

        // Cotangent edge weights and lumped vertex masses.
        let mut edge_weight: std::collections::BTreeMap<(usize, usize), f64> =
            std::collections::BTreeMap::new();
        let mut mass = vec![0.0f64; n];
        let mut face_normal = Vec::with_capacity(faces.len());
        let mut face_double_area = Vec::with_capacity(faces.len());
        for face in &faces {
            let p = [vertices[face[0]], vertices[face[1]], vertices[face[2]]];
            let cross = vec3::cross(vec3::sub(p[1], p[0]), vec3::sub(p[2], p[0]));
            let double_area = vec3::norm(cross);
            if double_area > 0.0 {
                face_normal.push(vec3::scale(cross, 1.0 / double_area));
                face_double_area.push(double_area);
            } else {
                face_normal.push([0.0; 3]);
                face_double_area.push(0.0);
            }
            let area3 = double_area / 6.0;
            for k in 0..3 {
                mass[face[k]] += area3;
                // Corner k faces the edge (k+1, k+2); its cotangent weights
                // that edge.
                let (i, j) = (face[(k + 1) % 3], face[(k + 2) % 3]);
                let u = vec3::sub(p[(k + 1) % 3], p[k]);
                let v = vec3::sub(p[(k + 2) % 3], p[k]);
                let sin = vec3::norm(vec3::cross(u, v));
                let cot = if sin > 0.0 { vec3::dot(u, v) / sin } else { 0.0 };
                *edge_weight.entry((i.min(j), i.max(j))).or_insert(0.0) += cot / 2.0;
            }
        }

        let mut heat_mat = SymmetricSparse::new(n);
        let mut poisson_mat = SymmetricSparse::new(n);
        let h = adjacency.mean_edge_length().to_f64();
        let time_step = time_scale * h * h;
        for i in 0..n {
            heat_mat.add(i, i, mass[i]);
            poisson_mat.add(i, i, POISSON_SHIFT);
        }
        for (&(i, j), &w) in &edge_weight {
            let w = w.max(COTAN_FLOOR);
            heat_mat.add(i, i, time_step * w);
            heat_mat.add(j, j, time_step * w);
            heat_mat.add(i, j, -time_step * w);
            poisson_mat.add(i, i, w);
            poisson_mat.add(j, j, w);
            poisson_mat.add(i, j, -w);
        }

        let heat = heat_mat.factor()?;
        let poisson = poisson_mat.factor()?;
        Ok(HeatSolver {
            vertices,
            faces,
            face_normal,
            face_double_area,
            heat,
            poisson,
            time_step,
        })
    }

    pub fn time_step(&self) -> f64 {
        self.time_step
    }

    /// One distance column: heat step, normalized negative gradient,
    /// Poisson integration, anchor shift, clamp at zero.
    fn distance_column(&self, anchor: usize) -> Vec<f64> {
        let n = self.vertices.len();
        let mut delta = vec![0.0f64; n];
        delta[anchor] = 1.0;
        let u = self.heat.solve(&delta);

        // Unit vector field X per face, pointing away from the anchor.
        let mut divergence = vec![0.0f64; n];
        for (f, face) in self.faces.iter().enumerate() {
            let double_area = self.face_double_area[f];
            if double_area <= 0.0 {
                continue;
            }
            let normal = self.face_normal[f];
            let p = [
                self.vertices[face[0]],
                self.vertices[face[1]],
                self.vertices[face[2]],
            ];
            // Gradient of u on the face: sum of u_k * (normal x opposite
            // edge) / (2 area).
            let mut grad = [0.0f64; 3];
            let mut rot = [[0.0f64; 3]; 3];
            for k in 0..3 {
                let opposite = vec3::sub(p[(k + 2) % 3], p[(k + 1) % 3]);
                rot[k] = vec3::cross(normal, opposite);
                grad = vec3::add(grad, vec3::scale(rot[k], u[face[k]] / double_area));
            }
            let len = vec3::norm(grad);
            if len <= 0.0 {
                continue;
            }
            let x = vec3::scale(grad, -1.0 / len);
            // Integrated divergence: each vertex hat gradient dotted with X
            // times the face area.
            for k in 0..3 {
                divergence[face[k]] += vec3::dot(rot[k], x) / 2.0;
            }
        }

        let mut phi = self.poisson.solve(&divergence);
        let shift = phi[anchor];
        for v in phi.iter_mut() {
            *v = (*v - shift).max(0.0);
        }
        phi
    }

    /// Distance columns for every anchor; columns solve in parallel against
    /// the shared factorizations.
    pub fn field<T: Scalar>(&self, anchors: &[usize]) -> Result<GeodesicField<T>> {
        let n = self.vertices.len();
        check_anchors(anchors, n)?;
        let columns: Vec<Vec<f64>> = anchors
            .par_iter()
            .map(|&a| self.distance_column(a))
            .collect();
        let mut distances = Matrix::<T>::zeros(n, anchors.len());
        for (c, col) in columns.iter().enumerate() {
            for (r, &v) in col.iter().enumerate() {
                distances.set(r, c, T::from_f64(v));
            }
        }
        Ok(GeodesicField {
            anchor_indices: anchors.to_vec(),
            distances,
            rescaled: None,
        })
    }
}

/// Heat-method geodesic field in one call (builds a solver, computes all
/// anchor columns). Prefer constructing [`HeatSolver`] once when the same
/// mesh is queried repeatedly.
pub fn heat_geodesic<T: Scalar>(
    mesh: &Mesh<T>,
    anchors: &[usize],
    time_scale: f64,
) -> Result<GeodesicField<T>> {
    HeatSolver::new(mesh, time_scale)?.field(anchors)
}

#[derive(PartialEq)]
struct HeapEntry {
    dist: f64,
    vertex: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reverse on distance for a min-heap; vertex index breaks ties.
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.vertex.cmp(&self.vertex))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Exact shortest-path distances along mesh edges from each anchor.
pub fn dijkstra_geodesic<T: Scalar>(
    adjacency: &AdjacencyIndex<T>,
    anchors: &[usize],
) -> Result<GeodesicField<T>> {
    let n = adjacency.vertex_neighbors.len();
    check_anchors(anchors, n)?;

    let mut graph: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for &(i, j, len) in &adjacency.edges {
        let l = len.to_f64();
        graph[i].push((j, l));
        graph[j].push((i, l));
    }

    let columns: Vec<Result<Vec<f64>>> = anchors
        .par_iter()
        .map(|&a| {
            let mut dist = vec![f64::INFINITY; n];
            dist[a] = 0.0;
            let mut heap = BinaryHeap::new();
            heap.push(HeapEntry { dist: 0.0, vertex: a });
            while let Some(HeapEntry { dist: d, vertex: v }) = heap.pop() {
                if d > dist[v] {
                    continue;
                }
                for &(w, l) in &graph[v] {
                    let cand = d + l;
                    if cand < dist[w] {
                        dist[w] = cand;
                        heap.push(HeapEntry { dist: cand, vertex: w });
                    }
                }
            }
            if dist.iter().any(|d| !d.is_finite()) {
                return Err(Error::Disconnected(format!(
                    "vertex unreachable from anchor {a}"
                )));
            }
            Ok(dist)
        })
        .collect();

    let mut distances = Matrix::<T>::zeros(n, anchors.len());
    for (c, col) in columns.into_iter().enumerate() {
        let col = col?;
        for (r, &v) in col.iter().enumerate() {
            distances.set(r, c, T::from_f64(v));
        }
    }
    Ok(GeodesicField {
        anchor_indices: anchors.to_vec(),
        distances,
        rescaled: None,
    })
}
