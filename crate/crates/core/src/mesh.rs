//! Triangle meshes: OBJ/PLY I/O, adjacency, sampling, extents.
//!
//! Both file formats store 32-bit positions. OBJ is ASCII with 1-indexed
//! faces and an optional per-vertex color extension (`v x y z r g b`);
//! PLY is binary little-endian with optional 8-bit `red`/`green`/`blue`
//! vertex properties. Floats written to OBJ use the shortest decimal form
//! that round-trips, so save/load is bit-exact for `f32` meshes in either
//! format.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vec3;

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh<T> {
    pub vertices: Vec<[T; 3]>,
    pub faces: Vec<[usize; 3]>,
    /// Optional per-vertex RGB in `[0, 1]`, same length as `vertices`.
    pub colors: Option<Vec<[T; 3]>>,
}

impl<T: Scalar> Mesh<T> {
    pub fn new(vertices: Vec<[T; 3]>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = Mesh {
            vertices,
            faces,
            colors: None,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vertices.is_empty() {
            return Err(Error::Degenerate("mesh has no vertices".into()));
        }
        for (f, face) in self.faces.iter().enumerate() {
            for &v in face {
                if v >= self.vertices.len() {
                    return Err(Error::InvalidArgument(format!(
                        "face {f} references vertex {v}, mesh has {}",
                        self.vertices.len()
                    )));
                }
            }
            if face[0] == face[1] || face[1] == face[2] || face[0] == face[2] {
                return Err(Error::Degenerate(format!(
                    "face {f} repeats a vertex index: {face:?}"
                )));
            }
        }
        if let Some(colors) = &self.colors {
            if colors.len() != self.vertices.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} colors for {} vertices",
                    colors.len(),
                    self.vertices.len()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Mesh<U> {
        let conv = |p: &[T; 3]| [U::from_f64(p[0].to_f64()), U::from_f64(p[1].to_f64()), U::from_f64(p[2].to_f64())];
        Mesh {
            vertices: self.vertices.iter().map(conv).collect(),
            faces: self.faces.clone(),
            colors: self.colors.as_ref().map(|cs| cs.iter().map(conv).collect()),
        }
    }

    /// Diagonal of the axis-aligned bounding box.
    pub fn bbox_diagonal(&self) -> T {
        let mut lo = [T::infinity(); 3];
        let mut hi = [T::neg_infinity(); 3];
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        vec3::distance(lo, hi)
    }
}

/// One-ring connectivity derived from the face list.
#[derive(Debug, Clone)]
pub struct AdjacencyIndex<T> {
    /// Sorted ascending, deduplicated.
    pub vertex_neighbors: Vec<Vec<usize>>,
    pub vertex_faces: Vec<Vec<usize>>,
    /// Unique edges `(i, j)` with `i < j` and their lengths.
    pub edges: Vec<(usize, usize, T)>,
}

impl<T: Scalar> AdjacencyIndex<T> {
    pub fn mean_edge_length(&self) -> T {
        if self.edges.is_empty() {
            return T::zero();
        }
        let sum: T = self.edges.iter().map(|&(_, _, l)| l).sum();
        sum / T::from_usize(self.edges.len())
    }

    /// Number of connected components of the edge graph. Vertices with no
    /// incident edges each count as their own component.
    pub fn connected_components(&self) -> usize {
        let n = self.vertex_neighbors.len();
        let mut seen = vec![false; n];
        let mut components = 0;
        let mut stack = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            components += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(v) = stack.pop() {
                for &w in &self.vertex_neighbors[v] {
                    if !seen[w] {
                        seen[w] = true;
                        stack.push(w);
                    }
                }
            }
        }
        components
    }
}

/// Builds the one-ring index, rejecting zero-length edges and edges shared
/// by more than two faces.
pub fn build_adjacency<T: Scalar>(mesh: &Mesh<T>) -> Result<AdjacencyIndex<T>> {
    mesh.validate()?;
    let n = mesh.vertices.len();
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut vertex_faces: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut edge_faces: std::collections::BTreeMap<(usize, usize), usize> =
        std::collections::BTreeMap::new();

    for (f, face) in mesh.faces.iter().enumerate() {
        for &v in face {
            vertex_faces[v].push(f);
        }
        for k in 0..3 {
            let a = face[k];
            let b = face[(k + 1) % 3];
            let key = (a.min(b), a.max(b));
            *edge_faces.entry(key).or_insert(0) += 1;
        }
    }

    let mut edges = Vec::with_capacity(edge_faces.len());
    for (&(a, b), &count) in &edge_faces {
        if count > 2 {
            return Err(Error::Degenerate(format!(
                "edge ({a}, {b}) is shared by {count} faces"
            )));
        }
        let len = vec3::distance(mesh.vertices[a], mesh.vertices[b]);
        if !(len > T::zero()) || !len.is_finite() {
            return Err(Error::Degenerate(format!(
                "edge ({a}, {b}) has non-positive or non-finite length"
            )));
        }
        edges.push((a, b, len));
        neighbors[a].push(b);
        neighbors[b].push(a);
    }

    for list in &mut neighbors {
        list.sort_unstable();
        list.dedup();
    }

    Ok(AdjacencyIndex {
        vertex_neighbors: neighbors,
        vertex_faces,
        edges,
    })
}

/// Greedy farthest-point sampling over arbitrary points.
///
/// The first index is drawn uniformly from `seed`; each following pick
/// maximizes the Euclidean distance to the already-selected set, breaking
/// ties toward the lowest index.
pub fn farthest_point_sampling_points<T: Scalar>(
    points: &[[T; 3]],
    count: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let n = points.len();
    if count == 0 || count > n {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {count} of {n} points"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.gen_range(0..n);

    let mut chosen = vec![false; n];
    let mut min_d2 = vec![T::infinity(); n];
    let mut selected = Vec::with_capacity(count);
    selected.push(first);
    chosen[first] = true;

    while selected.len() < count {
        let last = *selected.last().unwrap();
        let p = points[last];
        for (i, q) in points.iter().enumerate() {
            let d = vec3::sub(*q, p);
            let d2 = vec3::dot(d, d);
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
        }
        let mut best = usize::MAX;
        let mut best_d2 = T::neg_infinity();
        for i in 0..n {
            if !chosen[i] && min_d2[i] > best_d2 {
                best_d2 = min_d2[i];
                best = i;
            }
        }
        selected.push(best);
        chosen[best] = true;
    }
    Ok(selected)
}

/// Farthest-point sampling over mesh vertices (Euclidean metric).
pub fn farthest_point_sampling<T: Scalar>(
    mesh: &Mesh<T>,
    count: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    farthest_point_sampling_points(&mesh.vertices, count, seed)
}

/// Exact maximum pairwise Euclidean distance between vertices.
pub fn max_extent<T: Scalar>(mesh: &Mesh<T>) -> Result<T> {
    if mesh.vertices.is_empty() {
        return Err(Error::Degenerate("mesh has no vertices".into()));
    }
    let mut best = T::zero();
    for i in 0..mesh.vertices.len() {
        for j in (i + 1)..mesh.vertices.len() {
            let d = vec3::sub(mesh.vertices[j], mesh.vertices[i]);
            let d2 = vec3::dot(d, d);
            if d2 > best {
                best = d2;
            }
        }
    }
    Ok(best.sqrt())
}

pub fn load_mesh<T: Scalar>(path: impl AsRef<Path>) -> Result<Mesh<T>> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("obj") => load_obj(path),
        Some("ply") => load_ply(path),
        other => Err(Error::InvalidArgument(format!(
            "unsupported mesh extension {other:?} for {}",
            path.display()
        ))),
    }
}

pub fn save_mesh<T: Scalar>(mesh: &Mesh<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    mesh.validate()?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("obj") => save_obj(mesh, path),
        Some("ply") => save_ply(mesh, path),
        other => Err(Error::InvalidArgument(format!(
            "unsupported mesh extension {other:?} for {}",
            path.display()
        ))),
    }
}

fn load_obj<T: Scalar>(path: &Path) -> Result<Mesh<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut vertices: Vec<[T; 3]> = Vec::new();
    let mut colors: Vec<[T; 3]> = Vec::new();
    let mut faces = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let mut parts = line.split_whitespace();
        let Some(keyword) = parts.next() else { continue };
        match keyword {
            "v" => {
                let nums: Vec<f32> = parts
                    .map(|t| t.parse::<f32>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| {
                        Error::parse(path, format!("line {}: bad vertex number: {e}", lineno + 1))
                    })?;
                if nums.len() != 3 && nums.len() != 6 {
                    return Err(Error::parse(
                        path,
                        format!("line {}: vertex needs 3 or 6 numbers, got {}", lineno + 1, nums.len()),
                    ));
                }
                vertices.push([
                    T::from_f32(nums[0]),
                    T::from_f32(nums[1]),
                    T::from_f32(nums[2]),
                ]);
                if nums.len() == 6 {
                    colors.push([
                        T::from_f32(nums[3]),
                        T::from_f32(nums[4]),
                        T::from_f32(nums[5]),
                    ]);
                }
            }
            "f" => {
                let refs: Vec<&str> = parts.collect();
                if refs.len() != 3 {
                    return Err(Error::parse(
                        path,
                        format!(
                            "line {}: only triangle faces are supported, got {} corners",
                            lineno + 1,
                            refs.len()
                        ),
                    ));
                }
                let mut face = [0usize; 3];
                for (k, r) in refs.iter().enumerate() {
                    let idx_txt = r.split('/').next().unwrap_or("");
                    let idx: i64 = idx_txt.parse().map_err(|e| {
                        Error::parse(path, format!("line {}: bad face index {r:?}: {e}", lineno + 1))
                    })?;
                    if idx < 1 {
                        return Err(Error::parse(
                            path,
                            format!("line {}: face indices are 1-based and positive, got {idx}", lineno + 1),
                        ));
                    }
                    face[k] = (idx - 1) as usize;
                }
                faces.push(face);
            }
            _ => {} // comments, normals, texture coords, groups
        }
    }

    if vertices.is_empty() {
        return Err(Error::parse(path, "no vertices found".to_string()));
    }
    if !colors.is_empty() && colors.len() != vertices.len() {
        return Err(Error::parse(
            path,
            format!(
                "{} of {} vertices carry colors; color is all-or-none",
                colors.len(),
                vertices.len()
            ),
        ));
    }
    for (f, face) in faces.iter().enumerate() {
        for &v in face {
            if v >= vertices.len() {
                return Err(Error::parse(
                    path,
                    format!("face {f} references vertex {}, file has {}", v + 1, vertices.len()),
                ));
            }
        }
    }

    let mut mesh = Mesh {
        vertices,
        faces,
        colors: None,
    };
    if !colors.is_empty() {
        mesh.colors = Some(colors);
    }
    mesh.validate()?;
    Ok(mesh)
}

fn save_obj<T: Scalar>(mesh: &Mesh<T>, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (i, v) in mesh.vertices.iter().enumerate() {
        let (x, y, z) = (v[0].to_f32(), v[1].to_f32(), v[2].to_f32());
        match &mesh.colors {
            Some(colors) => {
                let c = colors[i];
                out.push_str(&format!(
                    "v {} {} {} {} {} {}\n",
                    x,
                    y,
                    z,
                    c[0].to_f32(),
                    c[1].to_f32(),
                    c[2].to_f32()
                ));
            }
            None => out.push_str(&format!("v {} {} {}\n", x, y, z)),
        }
    }
    for f in &mesh.faces {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn save_ply<T: Scalar>(mesh: &Mesh<T>, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    let has_colors = mesh.colors.is_some();
    buf.extend_from_slice(b"ply\nformat binary_little_endian 1.0\n");
    buf.extend_from_slice(format!("element vertex {}\n", mesh.vertices.len()).as_bytes());
    buf.extend_from_slice(b"property float x\nproperty float y\nproperty float z\n");
    if has_colors {
        buf.extend_from_slice(b"property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    buf.extend_from_slice(format!("element face {}\n", mesh.faces.len()).as_bytes());
    buf.extend_from_slice(b"property list uchar int vertex_indices\nend_header\n");

    for (i, v) in mesh.vertices.iter().enumerate() {
        for k in 0..3 {
            buf.extend_from_slice(&v[k].to_f32().to_le_bytes());
        }
        if let Some(colors) = &mesh.colors {
            for k in 0..3 {
                let c = (colors[i][k].to_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
                buf.push(c);
            }
        }
    }
    for f in &mesh.faces {
        buf.push(3u8);
        for &v in f {
            buf.extend_from_slice(&(v as i32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn load_ply<T: Scalar>(path: &Path) -> Result<Mesh<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;

    // The header is ASCII lines terminated by '\n' up to "end_header".
    let mut pos = 0usize;
    let mut lines: Vec<String> = Vec::new();
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(path, "unterminated header".to_string()))?;
        let line = String::from_utf8_lossy(&bytes[pos..pos + end]).trim().to_string();
        pos += end + 1;
        let done = line == "end_header";
        lines.push(line);
        if done {
            break;
        }
        if pos >= bytes.len() {
            return Err(Error::parse(path, "unterminated header".to_string()));
        }
    }

    if lines.first().map(String::as_str) != Some("ply") {
        return Err(Error::parse(path, "missing ply magic".to_string()));
    }

    let mut vertex_count: Option<usize> = None;
    let mut face_count: Option<usize> = None;
    let mut vertex_props: Vec<(String, String)> = Vec::new(); // (type, name)
    let mut face_list_ok = false;
    let mut current: Option<&str> = None;
    let mut format_ok = false;

    for line in &lines[1..] {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("format") => {
                let rest: Vec<&str> = parts.collect();
                if rest != ["binary_little_endian", "1.0"] {
                    return Err(Error::parse(
                        path,
                        format!("unsupported ply format {rest:?}; expected binary_little_endian 1.0"),
                    ));
                }
                format_ok = true;
            }
            Some("comment") => {}
            Some("element") => {
                let kind = parts.next().unwrap_or("");
                let count: usize = parts
                    .next()
                    .unwrap_or("")
                    .parse()
                    .map_err(|e| Error::parse(path, format!("bad element count: {e}")))?;
                match kind {
                    "vertex" => {
                        vertex_count = Some(count);
                        current = Some("vertex");
                    }
                    "face" => {
                        face_count = Some(count);
                        current = Some("face");
                    }
                    other => {
                        return Err(Error::parse(path, format!("unsupported element {other:?}")));
                    }
                }
            }
            Some("property") => match current {
                Some("vertex") => {
                    let ty = parts.next().unwrap_or("").to_string();
                    let name = parts.next().unwrap_or("").to_string();
                    vertex_props.push((ty, name));
                }
                Some("face") => {
                    let rest: Vec<&str> = parts.collect();
                    let ok = matches!(
                        rest.as_slice(),
                        ["list", count_ty, idx_ty, name]
                            if matches!(*count_ty, "uchar" | "uint8")
                                && matches!(*idx_ty, "int" | "int32" | "uint" | "uint32")
                                && matches!(*name, "vertex_indices" | "vertex_index")
                    );
                    if !ok {
                        return Err(Error::parse(
                            path,
                            format!("unsupported face property layout: {rest:?}"),
                        ));
                    }
                    face_list_ok = true;
                }
                _ => {
                    return Err(Error::parse(path, "property before element".to_string()));
                }
            },
            Some("end_header") => break,
            Some(other) => {
                return Err(Error::parse(path, format!("unexpected header line {other:?}")));
            }
            None => {}
        }
    }

    if !format_ok {
        return Err(Error::parse(path, "missing format line".to_string()));
    }
    let vertex_count = vertex_count.ok_or_else(|| Error::parse(path, "missing vertex element".to_string()))?;
    let face_count = face_count.unwrap_or(0);
    if face_count > 0 && !face_list_ok {
        return Err(Error::parse(path, "face element without index list property".to_string()));
    }

    let names: Vec<&str> = vertex_props.iter().map(|(_, n)| n.as_str()).collect();
    let has_colors = match names.as_slice() {
        ["x", "y", "z"] => false,
        ["x", "y", "z", "red", "green", "blue"] => true,
        other => {
            return Err(Error::parse(
                path,
                format!("unsupported vertex property layout {other:?}; expected x y z [red green blue]"),
            ));
        }
    };
    for (i, (ty, name)) in vertex_props.iter().enumerate() {
        let expect = if i < 3 { "float" } else { "uchar" };
        let ok = if i < 3 {
            matches!(ty.as_str(), "float" | "float32")
        } else {
            matches!(ty.as_str(), "uchar" | "uint8")
        };
        if !ok {
            return Err(Error::parse(
                path,
                format!("vertex property {name} has type {ty}, expected {expect}"),
            ));
        }
    }

    let vertex_size = 12 + if has_colors { 3 } else { 0 };
    let need = vertex_count * vertex_size;
    if bytes.len() < pos + need {
        return Err(Error::parse(path, "truncated vertex payload".to_string()));
    }

    let mut vertices = Vec::with_capacity(vertex_count);
    let mut colors = Vec::with_capacity(if has_colors { vertex_count } else { 0 });
    for i in 0..vertex_count {
        let base = pos + i * vertex_size;
        let mut p = [T::zero(); 3];
        for k in 0..3 {
            let b = &bytes[base + 4 * k..base + 4 * k + 4];
            p[k] = T::from_f32(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        }
        vertices.push(p);
        if has_colors {
            let c = &bytes[base + 12..base + 15];
            colors.push([
                T::from_f64(c[0] as f64 / 255.0),
                T::from_f64(c[1] as f64 / 255.0),
                T::from_f64(c[2] as f64 / 255.0),
            ]);
        }
    }
    pos += need;

    let mut faces = Vec::with_capacity(face_count);
    for f in 0..face_count {
        if pos >= bytes.len() {
            return Err(Error::parse(path, format!("truncated face payload at face {f}")));
        }
        let n = bytes[pos];
        pos += 1;
        if n != 3 {
            return Err(Error::parse(
                path,
                format!("face {f} has {n} corners; only triangles are supported"),
            ));
        }
        if bytes.len() < pos + 12 {
            return Err(Error::parse(path, format!("truncated face payload at face {f}")));
        }
        let mut face = [0usize; 3];
        for k in 0..3 {
            let b = &bytes[pos + 4 * k..pos + 4 * k + 4];
            let idx = i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            if idx < 0 || idx as usize >= vertex_count {
                return Err(Error::parse(
                    path,
                    format!("face {f} references vertex {idx}, file has {vertex_count}"),
                ));
            }
            face[k] = idx as usize;
        }
        pos += 12;
        faces.push(face);
    }

    let mesh = Mesh {
        vertices,
        faces,
        colors: if has_colors { Some(colors) } else { None },
    };
    mesh.validate()?;
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn collinear_mesh() -> Mesh<f64> {
        let vertices: Vec<[f64; 3]> = (0..=10).map(|i| [i as f64, 0.0, 0.0]).collect();
        Mesh {
            vertices,
            faces: vec![[0, 1, 2]],
            colors: None,
        }
    }

    #[test]
    fn fps_on_collinear_points_picks_endpoint_then_midpoint() {
        let mesh = collinear_mesh();
        // Find a seed whose uniform draw lands on index 0.
        let seed = (0..1000u64)
            .find(|&s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                rng.gen_range(0..mesh.vertices.len()) == 0
            })
            .unwrap();
        let picks = farthest_point_sampling(&mesh, 3, seed).unwrap();
        assert_eq!(picks, vec![0, 10, 5]);
    }

    #[test]
    fn fps_matches_independent_greedy_reimplementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for seed in 0..20u64 {
            let points: Vec<[f64; 3]> = (0..40)
                .map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()])
                .collect();
            let fast = farthest_point_sampling_points(&points, 12, seed).unwrap();

            // Oracle: recompute min-distances from scratch at every pick.
            let mut start_rng = ChaCha8Rng::seed_from_u64(seed);
            let mut sel = vec![start_rng.gen_range(0..points.len())];
            while sel.len() < 12 {
                let mut best = usize::MAX;
                let mut best_d = f64::NEG_INFINITY;
                for i in 0..points.len() {
                    if sel.contains(&i) {
                        continue;
                    }
                    let d = sel
                        .iter()
                        .map(|&s| {
                            let dx = points[i][0] - points[s][0];
                            let dy = points[i][1] - points[s][1];
                            let dz = points[i][2] - points[s][2];
                            dx * dx + dy * dy + dz * dz
                        })
                        .fold(f64::INFINITY, f64::min);
                    if d > best_d {
                        best_d = d;
                        best = i;
                    }
                }
                sel.push(best);
            }
            assert_eq!(fast, sel, "seed {seed}");
        }
    }

    #[test]
    fn max_extent_of_right_triangle_is_hypotenuse() {
        let mesh = Mesh::new(
            vec![[0.0f64, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0, 4.0, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        assert_eq!(max_extent(&mesh).unwrap(), 5.0);
    }

    #[test]
    fn obj_round_trip_is_bit_exact_including_colors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.obj");
        let mut mesh: Mesh<f32> = Mesh::new(
            vec![
                [0.1, -2.5e-8, 3.0],
                [f32::MIN_POSITIVE, 1.0, -0.0],
                [0.333333343, 100.0, 1.5e-40],
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        mesh.colors = Some(vec![[1.0, 0.0, 0.25], [0.5, 0.5, 0.5], [0.0, 1.0, 0.0]]);
        save_mesh(&mesh, &path).unwrap();
        let back: Mesh<f32> = load_mesh(&path).unwrap();
        for (a, b) in mesh.vertices.iter().zip(&back.vertices) {
            for k in 0..3 {
                assert_eq!(a[k].to_bits(), b[k].to_bits());
            }
        }
        assert_eq!(mesh.faces, back.faces);
        assert_eq!(mesh.colors, back.colors);
    }

    #[test]
    fn ply_round_trip_is_bit_exact_for_positions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        let mut mesh: Mesh<f32> = Mesh::new(
            vec![[0.125, -7.25, 1e-30], [2.0, 3.0, 4.0], [-0.0, 0.5, 9.0]],
            vec![[0, 2, 1]],
        )
        .unwrap();
        mesh.colors = Some(vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        save_mesh(&mesh, &path).unwrap();
        let back: Mesh<f32> = load_mesh(&path).unwrap();
        for (a, b) in mesh.vertices.iter().zip(&back.vertices) {
            for k in 0..3 {
                assert_eq!(a[k].to_bits(), b[k].to_bits());
            }
        }
        assert_eq!(mesh.faces, back.faces);
        assert_eq!(mesh.colors, back.colors);
    }

    #[test]
    fn obj_faces_are_one_indexed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.obj");
        std::fs::write(&path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
        let mesh: Mesh<f32> = load_mesh(&path).unwrap();
        assert_eq!(mesh.faces, vec![[0, 1, 2]]);
    }

    #[test]
    fn obj_out_of_range_face_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.obj");
        std::fs::write(&path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n").unwrap();
        assert!(load_mesh::<f32>(&path).is_err());
    }

    #[test]
    fn obj_slash_references_take_the_position_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.obj");
        std::fs::write(&path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nf 1/1 2/1 3/1\n").unwrap();
        let mesh: Mesh<f32> = load_mesh(&path).unwrap();
        assert_eq!(mesh.faces, vec![[0, 1, 2]]);
    }

    #[test]
    fn adjacency_rejects_zero_length_edges() {
        let mesh = Mesh {
            vertices: vec![[0.0f64, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
            faces: vec![[0, 1, 2]],
            colors: None,
        };
        assert!(matches!(build_adjacency(&mesh), Err(Error::Degenerate(_))));
    }

    #[test]
    fn adjacency_neighbors_are_sorted_and_symmetric() {
        let mesh = Mesh::new(
            vec![
                [0.0f64, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [1.0, 1.0, 0.0],
            ],
            vec![[0, 1, 2], [1, 3, 2]],
        )
        .unwrap();
        let adj = build_adjacency(&mesh).unwrap();
        assert_eq!(adj.vertex_neighbors[0], vec![1, 2]);
        assert_eq!(adj.vertex_neighbors[1], vec![0, 2, 3]);
        for (i, list) in adj.vertex_neighbors.iter().enumerate() {
            for &j in list {
                assert!(adj.vertex_neighbors[j].contains(&i));
            }
        }
        assert_eq!(adj.edges.len(), 5);
        assert_eq!(adj.connected_components(), 1);
    }

    #[test]
    fn disconnected_mesh_has_two_components() {
        let mesh = Mesh::new(
            vec![
                [0.0f64, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [10.0, 0.0, 0.0],
                [11.0, 0.0, 0.0],
                [10.0, 1.0, 0.0],
            ],
            vec![[0, 1, 2], [3, 4, 5]],
        )
        .unwrap();
        let adj = build_adjacency(&mesh).unwrap();
        assert_eq!(adj.connected_components(), 2);
    }
}
