//! Symmetric positive-definite sparse systems.
//!
//! Mesh operators at the scales this crate targets are small enough that a
//! reverse Cuthill-McKee reordering followed by an envelope (skyline)
//! Cholesky factorization is simple, exact and fast. Factorizations are
//! built once and reused across many right-hand sides. Everything here runs
//! in `f64`; callers cast at the boundary.

use crate::error::{Error, Result};

/// Builder for a symmetric matrix; only one triangle needs to be pushed,
/// duplicate entries accumulate.
#[derive(Debug, Clone)]
pub struct SymmetricSparse {
    n: usize,
    entries: std::collections::BTreeMap<(usize, usize), f64>,
}

impl SymmetricSparse {
    pub fn new(n: usize) -> Self {
        SymmetricSparse {
            n,
            entries: std::collections::BTreeMap::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Adds `v` at `(i, j)` and, implicitly, at `(j, i)`.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(i < self.n && j < self.n);
        let key = (i.max(j), i.min(j));
        *self.entries.entry(key).or_insert(0.0) += v;
    }

    fn lower_triangle(&self) -> Vec<Vec<(usize, f64)>> {
        // rows[i] holds (j <= i, value)
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.n];
        for (&(i, j), &v) in &self.entries {
            rows[i].push((j, v));
        }
        rows
    }

    pub fn factor(&self) -> Result<EnvelopeCholesky> {
        EnvelopeCholesky::new(self)
    }

    /// Dense symmetric matrix-vector product (diagnostics and tests).
    pub fn multiply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for (&(i, j), &v) in &self.entries {
            y[i] += v * x[j];
            if i != j {
                y[j] += v * x[i];
            }
        }
        y
    }
}

/// Reverse Cuthill-McKee ordering of the sparsity graph. Handles multiple
/// components by restarting from the lowest-degree unvisited vertex.
fn reverse_cuthill_mckee(n: usize, neighbors: &[Vec<usize>]) -> Vec<usize> {
    let degree: Vec<usize> = neighbors.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order: Vec<usize> = Vec::with_capacity(n);

    let bfs_levels = |start: usize, visited: &[bool]| -> Vec<usize> {
        // Returns the last BFS level from `start` within unvisited vertices.
        let mut seen = visited.to_vec();
        let mut frontier = vec![start];
        seen[start] = true;
        let mut last = frontier.clone();
        while !frontier.is_empty() {
            last = frontier.clone();
            let mut next = Vec::new();
            for &v in &frontier {
                for &w in &neighbors[v] {
                    if !seen[w] {
                        seen[w] = true;
                        next.push(w);
                    }
                }
            }
            frontier = next;
        }
        last
    };

    while order.len() < n {
        // Component seed: unvisited vertex of minimum degree, then one
        // double-BFS toward a pseudo-peripheral start.
        let mut start = (0..n)
            .filter(|&v| !visited[v])
            .min_by_key(|&v| (degree[v], v))
            .unwrap();
        let far = bfs_levels(start, &visited);
        if let Some(&better) = far.iter().min_by_key(|&&v| (degree[v], v)) {
            start = better;
        }

        let mut queue = std::collections::VecDeque::new();
        visited[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = neighbors[v].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_unstable_by_key(|&w| (degree[w], w));
            for w in next {
                if !visited[w] {
                    visited[w] = true;
                    queue.push_back(w);
                }
            }
        }
    }

    order.reverse();
    order
}

/// Cholesky factorization stored row-wise within the envelope
/// `first[i]..=i` of the RCM-permuted matrix.
#[derive(Debug, Clone)]
pub struct EnvelopeCholesky {
    n: usize,
    /// perm[k] = original index placed at position k.
    perm: Vec<usize>,
    /// iperm[original] = permuted position.
    iperm: Vec<usize>,
    first: Vec<usize>,
    row_start: Vec<usize>,
    vals: Vec<f64>,
}

impl EnvelopeCholesky {
    fn new(matrix: &SymmetricSparse) -> Result<Self> {
        let n = matrix.n;
        if n == 0 {
            return Err(Error::Solver("empty system".into()));
        }

        let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(i, j) in matrix.entries.keys() {
            if i != j {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }

        let perm = reverse_cuthill_mckee(n, &neighbors);
        let mut iperm = vec![0usize; n];
        for (k, &orig) in perm.iter().enumerate() {
            iperm[orig] = k;
        }

        // Permuted lower-triangle entries per row.
        let lower = matrix.lower_triangle();
        let mut permuted_rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (i, row) in lower.iter().enumerate() {
            for &(j, v) in row {
                let (pi, pj) = (iperm[i], iperm[j]);
                let (r, c) = (pi.max(pj), pi.min(pj));
                permuted_rows[r].push((c, v));
            }
        }

        let mut first = vec![0usize; n];
        for (r, row) in permuted_rows.iter().enumerate() {
            let f = row.iter().map(|&(c, _)| c).min().unwrap_or(r).min(r);
            first[r] = f;
        }
        // The factor's envelope also grows from column dependencies: row i
        // touches rows j in [first[i], i), whose envelopes must reach back
        // at least... no: envelope Cholesky fill stays within each row's own
        // envelope, which is exactly [first[i], i]. Nothing to widen.

        let mut row_start = vec![0usize; n + 1];
        for i in 0..n {
            row_start[i + 1] = row_start[i] + (i - first[i] + 1);
        }
        let mut vals = vec![0.0f64; row_start[n]];
        for (r, row) in permuted_rows.iter().enumerate() {
            for &(c, v) in row {
                let idx = row_start[r] + (c - first[r]);
                vals[idx] += v;
            }
        }

        // In-place factorization: L[i][j] over the envelope.
        for i in 0..n {
            let fi = first[i];
            for j in fi..i {
                let fj = first[j];
                let lo = fi.max(fj);
                let mut sum = vals[row_start[i] + (j - fi)];
                for k in lo..j {
                    sum -= vals[row_start[i] + (k - fi)] * vals[row_start[j] + (k - fj)];
                }
                let diag = vals[row_start[j] + (j - fj)];
                vals[row_start[i] + (j - fi)] = sum / diag;
            }
            let mut d = vals[row_start[i] + (i - fi)];
            for k in fi..i {
                let l = vals[row_start[i] + (k - fi)];
                d -= l * l;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Solver(format!(
                    "matrix is not positive definite (pivot {d:.3e} at row {i})"
                )));
            }
            vals[row_start[i] + (i - fi)] = d.sqrt();
        }

        Ok(EnvelopeCholesky {
            n,
            perm,
            iperm,
            first,
            row_start,
            vals,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        assert_eq!(rhs.len(), self.n);
        let n = self.n;
        let mut y = vec![0.0f64; n];
        for k in 0..n {
            y[k] = rhs[self.perm[k]];
        }

        // Forward: L z = y (in place).
        for i in 0..n {
            let fi = self.first[i];
            let mut sum = y[i];
            for j in fi..i {
                sum -= self.vals[self.row_start[i] + (j - fi)] * y[j];
            }
            y[i] = sum / self.vals[self.row_start[i] + (i - fi)];
        }

        // Backward: L^T x = z, saxpy form to stay row-major.
        for i in (0..n).rev() {
            let fi = self.first[i];
            y[i] /= self.vals[self.row_start[i] + (i - fi)];
            let xi = y[i];
            for j in fi..i {
                y[j] -= self.vals[self.row_start[i] + (j - fi)] * xi;
            }
        }

        let mut x = vec![0.0f64; n];
        for k in 0..n {
            x[self.perm[k]] = y[k];
        }
        x
    }

    /// Total stored entries (diagnostics).
    pub fn envelope_len(&self) -> usize {
        self.vals.len()
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn inverse_permutation(&self) -> &[usize] {
        &self.iperm
    }
}
