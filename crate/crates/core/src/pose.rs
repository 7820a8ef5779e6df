//! Skeletons, poses, and linear-blend-skinning deformation.
//!
//! A skeleton is a bone tree plus a dense vertex-by-bone skinning weight
//! matrix. A pose assigns each bone an axis-angle rotation about its head,
//! composed through the parent chain, plus a global similarity transform
//! (rotation, translation, uniform scale). `lbs_deform` applies a pose to
//! a rest-pose vertex set.
//!
//! The pose-fitting optimizers (`align_pose`, `align_sequence`,
//! `regress_skinning`) live here too; they are added alongside the autodiff
//! machinery they use.

use std::io::{BufRead, BufReader, Write as IoWrite};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::vec3;

/// One bone: an optional parent index (None for the root bone) and the
/// head position the bone rotates about, in rest coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bone<T> {
    pub parent: Option<usize>,
    pub head: [T; 3],
}

/// Bone tree plus per-vertex skinning weights (rows sum to one).
#[derive(Debug, Clone)]
pub struct Skeleton<T> {
    pub bones: Vec<Bone<T>>,
    /// `vertex_count x bone_count`, convex rows.
    pub weights: Matrix<T>,
}

impl<T: Scalar> Skeleton<T> {
    /// Checks tree shape (parents precede children, exactly one root) and
    /// that weight rows are convex combinations.
    pub fn validate(&self) -> Result<()> {
        if self.bones.is_empty() {
            return Err(Error::InvalidArgument("skeleton has no bones".into()));
        }
        let mut roots = 0;
        for (b, bone) in self.bones.iter().enumerate() {
            match bone.parent {
                None => roots += 1,
                Some(p) => {
                    if p >= b {
                        return Err(Error::InvalidArgument(format!(
                            "bone {b} lists parent {p}; parents must precede children"
                        )));
                    }
                }
            }
        }
        if roots != 1 {
            return Err(Error::InvalidArgument(format!(
                "skeleton must have exactly one root bone, found {roots}"
            )));
        }
        if self.weights.cols() != self.bones.len() {
            return Err(Error::DimensionMismatch(format!(
                "weight matrix has {} columns for {} bones",
                self.weights.cols(),
                self.bones.len()
            )));
        }
        let tol = T::from_f64(1e-4);
        for i in 0..self.weights.rows() {
            let row = self.weights.row(i);
            let mut sum = T::zero();
            for &w in row {
                if w < -tol {
                    return Err(Error::InvalidArgument(format!(
                        "negative skinning weight at vertex {i}"
                    )));
                }
                sum += w;
            }
            if (sum - T::one()).abs() > tol {
                return Err(Error::InvalidArgument(format!(
                    "skinning weights at vertex {i} sum to {sum}, expected 1"
                )));
            }
        }
        Ok(())
    }

    pub fn bone_count(&self) -> usize {
        self.bones.len()
    }

    pub fn cast<U: Scalar>(&self) -> Skeleton<U> {
        Skeleton {
            bones: self
                .bones
                .iter()
                .map(|b| Bone {
                    parent: b.parent,
                    head: [
                        U::from_f64(b.head[0].to_f64()),
                        U::from_f64(b.head[1].to_f64()),
                        U::from_f64(b.head[2].to_f64()),
                    ],
                })
                .collect(),
            weights: self.weights.cast::<U>(),
        }
    }
}

/// Axis-angle rotations per bone, plus a global similarity transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose<T> {
    /// Axis-angle vector per bone; the rotation acts about the bone head.
    pub bone_rotations: Vec<[T; 3]>,
    /// Global rotation (axis-angle) applied after skinning.
    pub root_rotation: [T; 3],
    /// Global translation applied after skinning.
    pub root_translation: [T; 3],
    /// Global uniform scale applied after skinning.
    pub scale: T,
}

impl<T: Scalar> Pose<T> {
    pub fn identity(bone_count: usize) -> Self {
        Pose {
            bone_rotations: vec![[T::zero(); 3]; bone_count],
            root_rotation: [T::zero(); 3],
            root_translation: [T::zero(); 3],
            scale: T::one(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Pose<U> {
        let c3 = |v: [T; 3]| {
            [
                U::from_f64(v[0].to_f64()),
                U::from_f64(v[1].to_f64()),
                U::from_f64(v[2].to_f64()),
            ]
        };
        Pose {
            bone_rotations: self.bone_rotations.iter().map(|&r| c3(r)).collect(),
            root_rotation: c3(self.root_rotation),
            root_translation: c3(self.root_translation),
            scale: U::from_f64(self.scale.to_f64()),
        }
    }
}

/// 3x3 rotation matrix from an axis-angle vector (Rodrigues formula),
/// with the exact small-angle limit at the origin.
pub fn rotation_from_axis_angle(w: [f64; 3]) -> [[f64; 3]; 3] {
    let theta2 = vec3::dot(w, w);
    let theta = theta2.sqrt();
    let k = cross_matrix(w);
    let k2 = mat3_mul(&k, &k);
    let (a, b) = if theta < 1e-6 {
        // sin(t)/t and (1-cos t)/t^2 expanded to avoid cancellation.
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = if i == j { 1.0 } else { 0.0 } + a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// Derivatives of the rotation matrix with respect to each axis-angle
/// component: dR/dw_i = ((w_i [w]x + [w x (I - R) e_i]x) / |w|^2) R,
/// with the limit [e_i]x + (([e_i]x [w]x + [w]x [e_i]x) / 2) near zero.
pub fn rotation_jacobian(w: [f64; 3]) -> ([[f64; 3]; 3], [[[f64; 3]; 3]; 3]) {
    let r = rotation_from_axis_angle(w);
    let theta2 = vec3::dot(w, w);
    let mut grads = [[[0.0; 3]; 3]; 3];
    if theta2.sqrt() < 1e-6 {
        let kw = cross_matrix(w);
        for i in 0..3 {
            let mut e = [0.0; 3];
            e[i] = 1.0;
            let ke = cross_matrix(e);
            let s = mat3_add(&mat3_mul(&ke, &kw), &mat3_mul(&kw, &ke));
            for a in 0..3 {
                for b in 0..3 {
                    grads[i][a][b] = ke[a][b] + 0.5 * s[a][b];
                }
            }
        }
    } else {
        for i in 0..3 {
            let mut e = [0.0; 3];
            e[i] = 1.0;
            // (I - R) e_i
            let mut ime = [0.0; 3];
            for a in 0..3 {
                ime[a] = e[a] - r[a][0] * e[0] - r[a][1] * e[1] - r[a][2] * e[2];
            }
            let wx_ime = vec3::cross(w, ime);
            let mut m = cross_matrix(wx_ime);
            let kw = cross_matrix(w);
            for a in 0..3 {
                for b in 0..3 {
                    m[a][b] = (w[i] * kw[a][b] + m[a][b]) / theta2;
                }
            }
            grads[i] = mat3_mul(&m, &r);
        }
    }
    (r, grads)
}

pub(crate) fn cross_matrix(w: [f64; 3]) -> [[f64; 3]; 3] {
    [
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ]
}

pub(crate) fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    c
}

pub(crate) fn mat3_add(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[i][j] + b[i][j];
        }
    }
    c
}

/// Rigid/affine transform as rotation part plus offset: `x -> m x + o`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Affine3 {
    pub m: [[f64; 3]; 3],
    pub o: [f64; 3],
}

impl Affine3 {
    pub fn identity() -> Self {
        Affine3 {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            o: [0.0; 3],
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        [
            self.m[0][0] * p[0] + self.m[0][1] * p[1] + self.m[0][2] * p[2] + self.o[0],
            self.m[1][0] * p[0] + self.m[1][1] * p[1] + self.m[1][2] * p[2] + self.o[1],
            self.m[2][0] * p[0] + self.m[2][1] * p[1] + self.m[2][2] * p[2] + self.o[2],
        ]
    }

    /// Composition `self . other` (apply `other` first).
    pub fn compose(&self, other: &Affine3) -> Affine3 {
        let m = mat3_mul(&self.m, &other.m);
        let o = [
            self.m[0][0] * other.o[0] + self.m[0][1] * other.o[1] + self.m[0][2] * other.o[2] + self.o[0],
            self.m[1][0] * other.o[0] + self.m[1][1] * other.o[1] + self.m[1][2] * other.o[2] + self.o[1],
            self.m[2][0] * other.o[0] + self.m[2][1] * other.o[1] + self.m[2][2] * other.o[2] + self.o[2],
        ];
        Affine3 { m, o }
    }
}

/// Per-bone world transforms: each bone rotates about its head and inherits
/// its parent's transform (`world_b = world_parent . local_b`).
pub(crate) fn forward_kinematics<T: Scalar>(
    skeleton: &Skeleton<T>,
    pose: &Pose<T>,
) -> Result<Vec<Affine3>> {
    if pose.bone_rotations.len() != skeleton.bones.len() {
        return Err(Error::DimensionMismatch(format!(
            "pose has {} bone rotations for {} bones",
            pose.bone_rotations.len(),
            skeleton.bones.len()
        )));
    }
    let mut world: Vec<Affine3> = Vec::with_capacity(skeleton.bones.len());
    for (b, bone) in skeleton.bones.iter().enumerate() {
        let w = [
            pose.bone_rotations[b][0].to_f64(),
            pose.bone_rotations[b][1].to_f64(),
            pose.bone_rotations[b][2].to_f64(),
        ];
        let r = rotation_from_axis_angle(w);
        let h = [bone.head[0].to_f64(), bone.head[1].to_f64(), bone.head[2].to_f64()];
        // x -> h + R (x - h)
        let o = [
            h[0] - (r[0][0] * h[0] + r[0][1] * h[1] + r[0][2] * h[2]),
            h[1] - (r[1][0] * h[0] + r[1][1] * h[1] + r[1][2] * h[2]),
            h[2] - (r[2][0] * h[0] + r[2][1] * h[1] + r[2][2] * h[2]),
        ];
        let local = Affine3 { m: r, o };
        let w = match bone.parent {
            None => local,
            Some(p) => world[p].compose(&local),
        };
        world.push(w);
    }
    Ok(world)
}

/// Applies a pose to rest-pose points by linear blend skinning:
/// each point is sent through every bone's world transform, the results are
/// blended by the skinning weights, and the global similarity transform
/// (scale, rotation, translation) is applied last.
pub fn lbs_deform<T: Scalar>(
    skeleton: &Skeleton<T>,
    pose: &Pose<T>,
    rest: &[[T; 3]],
) -> Result<Vec<[T; 3]>> {
    if skeleton.weights.rows() != rest.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} skinning rows for {} rest points",
            skeleton.weights.rows(),
            rest.len()
        )));
    }
    let world = forward_kinematics(skeleton, pose)?;
    let root_r = rotation_from_axis_angle([
        pose.root_rotation[0].to_f64(),
        pose.root_rotation[1].to_f64(),
        pose.root_rotation[2].to_f64(),
    ]);
    let s = pose.scale.to_f64();
    let t = [
        pose.root_translation[0].to_f64(),
        pose.root_translation[1].to_f64(),
        pose.root_translation[2].to_f64(),
    ];

    let mut out = Vec::with_capacity(rest.len());
    for (i, p) in rest.iter().enumerate() {
        let p = [p[0].to_f64(), p[1].to_f64(), p[2].to_f64()];
        let wrow = skeleton.weights.row(i);
        // Blend displacements rather than positions: with convex weights the
        // two are identical, but this form reproduces the rest point exactly
        // at the identity pose instead of within round-off.
        let mut blended = p;
        for (b, bw) in world.iter().enumerate() {
            let w = wrow[b].to_f64();
            if w == 0.0 {
                continue;
            }
            let q = bw.apply(p);
            blended[0] += w * (q[0] - p[0]);
            blended[1] += w * (q[1] - p[1]);
            blended[2] += w * (q[2] - p[2]);
        }
        let rq = [
            root_r[0][0] * blended[0] + root_r[0][1] * blended[1] + root_r[0][2] * blended[2],
            root_r[1][0] * blended[0] + root_r[1][1] * blended[1] + root_r[1][2] * blended[2],
            root_r[2][0] * blended[0] + root_r[2][1] * blended[1] + root_r[2][2] * blended[2],
        ];
        out.push([
            T::from_f64(s * rq[0] + t[0]),
            T::from_f64(s * rq[1] + t[1]),
            T::from_f64(s * rq[2] + t[2]),
        ]);
    }
    Ok(out)
}

/// Reposes a mesh: same connectivity, LBS-deformed vertices.
pub fn repose_mesh<T: Scalar>(
    mesh: &crate::mesh::Mesh<T>,
    skeleton: &Skeleton<T>,
    pose: &Pose<T>,
) -> Result<crate::mesh::Mesh<T>> {
    Ok(crate::mesh::Mesh {
        vertices: lbs_deform(skeleton, pose, &mesh.vertices)?,
        faces: mesh.faces.clone(),
        colors: mesh.colors.clone(),
    })
}

// ---------------------------------------------------------------------------
// Skeleton file format
// ---------------------------------------------------------------------------

/// Saves a skeleton as a small text file; the weight matrix goes to a
/// binary feature file referenced by relative path.
///
/// ```text
/// bones <count>
/// <index> <parent-or--1> <head x> <head y> <head z>
/// ...
/// weights <relative-path>
/// ```
pub fn save_skeleton<T: Scalar>(skeleton: &Skeleton<T>, path: &Path) -> Result<()> {
    skeleton.validate()?;
    let weights_name = format!(
        "{}.weights.saf1",
        path.file_stem().and_then(|s| s.to_str()).unwrap_or("skeleton")
    );
    let weights_path = path.with_file_name(&weights_name);
    crate::features::save_features(&skeleton.weights, &weights_path)?;

    let mut text = String::new();
    text.push_str(&format!("bones {}\n", skeleton.bones.len()));
    for (b, bone) in skeleton.bones.iter().enumerate() {
        let parent = bone.parent.map(|p| p as i64).unwrap_or(-1);
        text.push_str(&format!(
            "{b} {parent} {} {} {}\n",
            bone.head[0].to_f64(),
            bone.head[1].to_f64(),
            bone.head[2].to_f64()
        ));
    }
    text.push_str(&format!("weights {weights_name}\n"));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Loads a skeleton saved by `save_skeleton`.
pub fn load_skeleton<T: Scalar>(path: &Path) -> Result<Skeleton<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(f);
    let mut bones: Vec<Bone<T>> = Vec::new();
    let mut expected = None;
    let mut weights: Option<Matrix<T>> = None;
    for (ln, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens[0] {
            "bones" => {
                let n: usize = tokens
                    .get(1)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::parse(path, format!("line {}: bad bone count", ln + 1)))?;
                expected = Some(n);
            }
            "weights" => {
                let name = tokens
                    .get(1)
                    .ok_or_else(|| Error::parse(path, format!("line {}: missing weights path", ln + 1)))?;
                let wpath = path.parent().unwrap_or(Path::new(".")).join(name);
                weights = Some(crate::features::load_features(&wpath)?);
            }
            _ => {
                if tokens.len() != 5 {
                    return Err(Error::parse(
                        path,
                        format!("line {}: expected `index parent hx hy hz`", ln + 1),
                    ));
                }
                let idx: usize = tokens[0]
                    .parse()
                    .map_err(|_| Error::parse(path, format!("line {}: bad bone index", ln + 1)))?;
                if idx != bones.len() {
                    return Err(Error::parse(
                        path,
                        format!("line {}: bone indices must be sequential", ln + 1),
                    ));
                }
                let parent: i64 = tokens[1]
                    .parse()
                    .map_err(|_| Error::parse(path, format!("line {}: bad parent index", ln + 1)))?;
                let mut head = [T::zero(); 3];
                for k in 0..3 {
                    let v: f64 = tokens[2 + k]
                        .parse()
                        .map_err(|_| Error::parse(path, format!("line {}: bad head coordinate", ln + 1)))?;
                    head[k] = T::from_f64(v);
                }
                bones.push(Bone {
                    parent: if parent < 0 { None } else { Some(parent as usize) },
                    head,
                });
            }
        }
    }
    if let Some(n) = expected {
        if bones.len() != n {
            return Err(Error::parse(
                path,
                format!("declared {n} bones but found {}", bones.len()),
            ));
        }
    }
    let weights =
        weights.ok_or_else(|| Error::parse(path, "missing `weights` line".to_string()))?;
    let skeleton = Skeleton { bones, weights };
    skeleton.validate()?;
    Ok(skeleton)
}

// ---------------------------------------------------------------------------
// Pose file format (CSV)
// ---------------------------------------------------------------------------

/// Saves a pose as CSV with header `bone,ax,ay,az,tx,ty,tz,scale`.
/// The `root` row carries the global transform; bone rows carry only the
/// axis-angle columns.
pub fn save_pose<T: Scalar>(pose: &Pose<T>, path: &Path) -> Result<()> {
    let mut text = String::from("bone,ax,ay,az,tx,ty,tz,scale\n");
    text.push_str(&format!(
        "root,{},{},{},{},{},{},{}\n",
        pose.root_rotation[0].to_f64(),
        pose.root_rotation[1].to_f64(),
        pose.root_rotation[2].to_f64(),
        pose.root_translation[0].to_f64(),
        pose.root_translation[1].to_f64(),
        pose.root_translation[2].to_f64(),
        pose.scale.to_f64()
    ));
    for (b, r) in pose.bone_rotations.iter().enumerate() {
        text.push_str(&format!(
            "{b},{},{},{},0,0,0,1\n",
            r[0].to_f64(),
            r[1].to_f64(),
            r[2].to_f64()
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads a pose saved by `save_pose`.
pub fn load_pose<T: Scalar>(path: &Path) -> Result<Pose<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<(usize, [T; 3])> = Vec::new();
    let mut root: Option<([T; 3], [T; 3], T)> = None;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || ln == 0 {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::parse(
                path,
                format!("line {}: expected 8 comma-separated fields", ln + 1),
            ));
        }
        let num = |s: &str| -> Result<T> {
            s.trim()
                .parse::<f64>()
                .map(T::from_f64)
                .map_err(|_| Error::parse(path, format!("line {}: bad number `{s}`", ln + 1)))
        };
        let a = [num(fields[1])?, num(fields[2])?, num(fields[3])?];
        if fields[0].trim() == "root" {
            let t = [num(fields[4])?, num(fields[5])?, num(fields[6])?];
            root = Some((a, t, num(fields[7])?));
        } else {
            let b: usize = fields[0]
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, format!("line {}: bad bone index", ln + 1)))?;
            rows.push((b, a));
        }
    }
    let bone_count = rows.iter().map(|&(b, _)| b + 1).max().unwrap_or(0);
    let mut pose = Pose::identity(bone_count);
    for (b, a) in rows {
        pose.bone_rotations[b] = a;
    }
    if let Some((a, t, s)) = root {
        pose.root_rotation = a;
        pose.root_translation = t;
        pose.scale = s;
    }
    Ok(pose)
}

// ---------------------------------------------------------------------------
// Alignment losses
// ---------------------------------------------------------------------------

/// Mean L1 distance between paired points: for each pair the coordinate
/// absolute differences are summed, then averaged over points.
pub fn point_loss<T: Scalar>(deformed: &[[T; 3]], target: &[[T; 3]]) -> Result<T> {
    if deformed.len() != target.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} deformed points for {} targets",
            deformed.len(),
            target.len()
        )));
    }
    if deformed.is_empty() {
        return Err(Error::InvalidArgument("no correspondence points".into()));
    }
    let mut sum = T::zero();
    for (p, q) in deformed.iter().zip(target) {
        for k in 0..3 {
            sum += (p[k] - q[k]).abs();
        }
    }
    Ok(sum / T::from_usize(deformed.len()))
}

/// Mean absolute edge-length deviation from the rest lengths carried on the
/// edge list (as produced by [`crate::mesh::build_adjacency`]).
pub fn arap_loss<T: Scalar>(edges: &[(usize, usize, T)], deformed: &[[T; 3]]) -> Result<T> {
    if edges.is_empty() {
        return Ok(T::zero());
    }
    let mut sum = T::zero();
    for &(i, j, rest_len) in edges {
        if i >= deformed.len() || j >= deformed.len() {
            return Err(Error::DimensionMismatch(format!(
                "edge ({i}, {j}) out of range for {} points",
                deformed.len()
            )));
        }
        let len = vec3::distance(deformed[i], deformed[j]);
        sum += (rest_len - len).abs();
    }
    Ok(sum / T::from_usize(edges.len()))
}

/// Mean squared per-point displacement between consecutive frames,
/// averaged over points and frame transitions.
pub fn smooth_loss<T: Scalar>(frames: &[Vec<[T; 3]>]) -> Result<T> {
    if frames.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "temporal smoothness needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let n = frames[0].len();
    if n == 0 || frames.iter().any(|f| f.len() != n) {
        return Err(Error::DimensionMismatch(
            "all frames must have the same nonzero point count".into(),
        ));
    }
    let mut sum = T::zero();
    for t in 0..frames.len() - 1 {
        for (p, q) in frames[t].iter().zip(&frames[t + 1]) {
            let d = vec3::sub(*p, *q);
            sum += vec3::dot(d, d);
        }
    }
    Ok(sum / T::from_usize(n * (frames.len() - 1)))
}

// ---------------------------------------------------------------------------
// Correspondence targets (shared CSV format with evaluation ground truth)
// ---------------------------------------------------------------------------

/// Pinned targets for alignment: selected rest-mesh vertices and the world
/// positions they should deform onto.
#[derive(Debug, Clone)]
pub struct CorrespondencePoints<T> {
    pub source_indices: Vec<usize>,
    pub target_positions: Vec<[T; 3]>,
}

impl<T: Scalar> CorrespondencePoints<T> {
    pub fn validate(&self, vertex_count: usize) -> Result<()> {
        if self.source_indices.len() != self.target_positions.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} source indices for {} target positions",
                self.source_indices.len(),
                self.target_positions.len()
            )));
        }
        if self.source_indices.is_empty() {
            return Err(Error::InvalidArgument("no correspondence points".into()));
        }
        if let Some(&bad) = self.source_indices.iter().find(|&&i| i >= vertex_count) {
            return Err(Error::InvalidArgument(format!(
                "source index {bad} out of range for {vertex_count} vertices"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.source_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_indices.is_empty()
    }

    /// Keeps a well-spread subset of the correspondences: farthest-point
    /// sampling over the rest positions of the pinned vertices.
    pub fn sparse_subset(
        &self,
        rest: &[[T; 3]],
        fraction: f64,
        seed: u64,
    ) -> Result<CorrespondencePoints<T>> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "sparse fraction must be in (0, 1], got {fraction}"
            )));
        }
        self.validate(rest.len())?;
        let count = ((self.len() as f64 * fraction).ceil() as usize).max(1);
        let points: Vec<[T; 3]> = self.source_indices.iter().map(|&i| rest[i]).collect();
        let picks = crate::mesh::farthest_point_sampling_points(&points, count, seed)?;
        Ok(CorrespondencePoints {
            source_indices: picks.iter().map(|&k| self.source_indices[k]).collect(),
            target_positions: picks.iter().map(|&k| self.target_positions[k]).collect(),
        })
    }
}

/// Writes correspondences as CSV with header
/// `source_index,target_x,target_y,target_z`.
pub fn save_correspondence_points<T: Scalar>(
    corr: &CorrespondencePoints<T>,
    path: &Path,
) -> Result<()> {
    if corr.source_indices.len() != corr.target_positions.len() {
        return Err(Error::DimensionMismatch(
            "correspondence index/position length mismatch".into(),
        ));
    }
    let mut text = String::from("source_index,target_x,target_y,target_z\n");
    for (&i, p) in corr.source_indices.iter().zip(&corr.target_positions) {
        text.push_str(&format!(
            "{i},{},{},{}\n",
            p[0].to_f64(),
            p[1].to_f64(),
            p[2].to_f64()
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads the CSV written by [`save_correspondence_points`].
pub fn load_correspondence_points<T: Scalar>(path: &Path) -> Result<CorrespondencePoints<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut corr = CorrespondencePoints {
        source_indices: Vec::new(),
        target_positions: Vec::new(),
    };
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || ln == 0 {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                path,
                format!("line {}: expected 4 comma-separated fields", ln + 1),
            ));
        }
        let idx: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, format!("line {}: bad source index", ln + 1)))?;
        let mut p = [T::zero(); 3];
        for k in 0..3 {
            let v: f64 = fields[1 + k].trim().parse().map_err(|_| {
                Error::parse(path, format!("line {}: bad target coordinate", ln + 1))
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "non-finite target coordinate at line {}",
                    ln + 1
                )));
            }
            p[k] = T::from_f64(v);
        }
        corr.source_indices.push(idx);
        corr.target_positions.push(p);
    }
    if corr.source_indices.is_empty() {
        return Err(Error::parse(path, "no correspondence rows".to_string()));
    }
    Ok(corr)
}

// ---------------------------------------------------------------------------
// Analytic pose gradients
// ---------------------------------------------------------------------------

/// Gradient of a scalar objective with respect to every pose parameter
/// (double precision regardless of the mesh scalar type).
#[derive(Debug, Clone)]
pub struct PoseGradient {
    pub bone_rotations: Vec<[f64; 3]>,
    pub root_rotation: [f64; 3],
    pub root_translation: [f64; 3],
    pub scale: f64,
}

impl PoseGradient {
    fn zeros(bone_count: usize) -> Self {
        PoseGradient {
            bone_rotations: vec![[0.0; 3]; bone_count],
            root_rotation: [0.0; 3],
            root_translation: [0.0; 3],
            scale: 0.0,
        }
    }
}

/// Skeleton, rest geometry, and targets lowered to double precision with
/// per-bone root chains precomputed; reused across optimizer iterations.
struct AlignProblem {
    parents: Vec<Option<usize>>,
    heads: Vec<[f64; 3]>,
    /// Root-to-bone index path per bone.
    chains: Vec<Vec<usize>>,
    weights: Matrix<f64>,
    rest: Vec<[f64; 3]>,
    edges: Vec<(usize, usize, f64)>,
    corr_idx: Vec<usize>,
    corr_target: Vec<[f64; 3]>,
}

impl AlignProblem {
    fn new<T: Scalar>(
        skeleton: &Skeleton<T>,
        rest: &[[T; 3]],
        edges: &[(usize, usize, T)],
        corr: &CorrespondencePoints<T>,
    ) -> Result<AlignProblem> {
        skeleton.validate()?;
        corr.validate(rest.len())?;
        if skeleton.weights.rows() != rest.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} skinning rows for {} rest points",
                skeleton.weights.rows(),
                rest.len()
            )));
        }
        let c3 = |v: [T; 3]| [v[0].to_f64(), v[1].to_f64(), v[2].to_f64()];
        let parents: Vec<Option<usize>> = skeleton.bones.iter().map(|b| b.parent).collect();
        let mut chains = Vec::with_capacity(parents.len());
        for b in 0..parents.len() {
            let mut chain = vec![b];
            let mut c = b;
            while let Some(p) = parents[c] {
                chain.push(p);
                c = p;
            }
            chain.reverse();
            chains.push(chain);
        }
        Ok(AlignProblem {
            parents,
            heads: skeleton.bones.iter().map(|b| c3(b.head)).collect(),
            chains,
            weights: skeleton.weights.cast::<f64>(),
            rest: rest.iter().map(|&p| c3(p)).collect(),
            edges: edges
                .iter()
                .map(|&(i, j, l)| (i, j, l.to_f64()))
                .collect(),
            corr_idx: corr.source_indices.clone(),
            corr_target: corr.target_positions.iter().map(|&p| c3(p)).collect(),
        })
    }

    fn bone_count(&self) -> usize {
        self.parents.len()
    }
}

/// Forward pass retaining everything the chain rule needs.
struct PoseEval {
    positions: Vec<[f64; 3]>,
    blended: Vec<[f64; 3]>,
    locals: Vec<Affine3>,
    world: Vec<Affine3>,
    bone_jacobians: Vec<[[[f64; 3]; 3]; 3]>,
    root_rotation: [[f64; 3]; 3],
    root_jacobian: [[[f64; 3]; 3]; 3],
    scale: f64,
}

fn evaluate_pose(problem: &AlignProblem, pose: &Pose<f64>) -> Result<PoseEval> {
    let bone_count = problem.bone_count();
    if pose.bone_rotations.len() != bone_count {
        return Err(Error::DimensionMismatch(format!(
            "pose has {} bone rotations for {} bones",
            pose.bone_rotations.len(),
            bone_count
        )));
    }
    if !(pose.scale > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "pose scale must be positive, got {}",
            pose.scale
        )));
    }
    let mut locals = Vec::with_capacity(bone_count);
    let mut world: Vec<Affine3> = Vec::with_capacity(bone_count);
    let mut bone_jacobians = Vec::with_capacity(bone_count);
    for b in 0..bone_count {
        let (r, jac) = rotation_jacobian(pose.bone_rotations[b]);
        let h = problem.heads[b];
        let o = [
            h[0] - (r[0][0] * h[0] + r[0][1] * h[1] + r[0][2] * h[2]),
            h[1] - (r[1][0] * h[0] + r[1][1] * h[1] + r[1][2] * h[2]),
            h[2] - (r[2][0] * h[0] + r[2][1] * h[1] + r[2][2] * h[2]),
        ];
        let local = Affine3 { m: r, o };
        let w = match problem.parents[b] {
            None => local,
            Some(p) => world[p].compose(&local),
        };
        locals.push(local);
        world.push(w);
        bone_jacobians.push(jac);
    }
    let (root_rotation, root_jacobian) = rotation_jacobian(pose.root_rotation);
    let s = pose.scale;
    let t = pose.root_translation;

    let n = problem.rest.len();
    let mut blended = vec![[0.0f64; 3]; n];
    let mut positions = vec![[0.0f64; 3]; n];
    for i in 0..n {
        let p = problem.rest[i];
        let wrow = problem.weights.row(i);
        // Displacement blend, matching `lbs_deform`: exact at the identity.
        let mut v = p;
        for (b, bw) in world.iter().enumerate() {
            let w = wrow[b];
            if w == 0.0 {
                continue;
            }
            let q = bw.apply(p);
            v[0] += w * (q[0] - p[0]);
            v[1] += w * (q[1] - p[1]);
            v[2] += w * (q[2] - p[2]);
        }
        blended[i] = v;
        let rv = [
            root_rotation[0][0] * v[0] + root_rotation[0][1] * v[1] + root_rotation[0][2] * v[2],
            root_rotation[1][0] * v[0] + root_rotation[1][1] * v[1] + root_rotation[1][2] * v[2],
            root_rotation[2][0] * v[0] + root_rotation[2][1] * v[1] + root_rotation[2][2] * v[2],
        ];
        positions[i] = [s * rv[0] + t[0], s * rv[1] + t[1], s * rv[2] + t[2]];
    }
    Ok(PoseEval {
        positions,
        blended,
        locals,
        world,
        bone_jacobians,
        root_rotation,
        root_jacobian,
        scale: s,
    })
}

/// Pulls per-output-point gradients back through the global similarity
/// transform and the bone tree to every pose parameter.
fn backpropagate_pose(
    problem: &AlignProblem,
    eval: &PoseEval,
    dldx: &[[f64; 3]],
) -> PoseGradient {
    let bone_count = problem.bone_count();
    let mut grad = PoseGradient::zeros(bone_count);
    let r = &eval.root_rotation;
    let s = eval.scale;

    // Per-bone gradient of the world affine entries: for the blended point
    // v_i = sum_b w_ib (M_b p_i + o_b), dL/dM_b = sum_i w_ib dldv_i p_i^T
    // and dL/do_b = sum_i w_ib dldv_i.
    let mut g_m = vec![[[0.0f64; 3]; 3]; bone_count];
    let mut g_o = vec![[0.0f64; 3]; bone_count];

    for i in 0..problem.rest.len() {
        let g = dldx[i];
        let v = eval.blended[i];
        grad.root_translation[0] += g[0];
        grad.root_translation[1] += g[1];
        grad.root_translation[2] += g[2];
        let rv = [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ];
        grad.scale += g[0] * rv[0] + g[1] * rv[1] + g[2] * rv[2];
        for j in 0..3 {
            let dr = &eval.root_jacobian[j];
            let drv = [
                dr[0][0] * v[0] + dr[0][1] * v[1] + dr[0][2] * v[2],
                dr[1][0] * v[0] + dr[1][1] * v[1] + dr[1][2] * v[2],
                dr[2][0] * v[0] + dr[2][1] * v[1] + dr[2][2] * v[2],
            ];
            grad.root_rotation[j] += s * (g[0] * drv[0] + g[1] * drv[1] + g[2] * drv[2]);
        }
        // dL/dv = s R^T dldx.
        let dv = [
            s * (r[0][0] * g[0] + r[1][0] * g[1] + r[2][0] * g[2]),
            s * (r[0][1] * g[0] + r[1][1] * g[1] + r[2][1] * g[2]),
            s * (r[0][2] * g[0] + r[1][2] * g[1] + r[2][2] * g[2]),
        ];
        let p = problem.rest[i];
        let wrow = problem.weights.row(i);
        for b in 0..bone_count {
            let w = wrow[b];
            if w == 0.0 {
                continue;
            }
            for a in 0..3 {
                g_m[b][a][0] += w * dv[a] * p[0];
                g_m[b][a][1] += w * dv[a] * p[1];
                g_m[b][a][2] += w * dv[a] * p[2];
                g_o[b][a] += w * dv[a];
            }
        }
    }

    // Chain rule down each bone's root path. With W_b = A_c0 ... A_ck and
    // A_c = (R_c, h_c - R_c h_c), the derivative of W_b in the rotation
    // component j of chain bone c is the affine pair
    //   (M_P dR_c^j M_S,  M_P dR_c^j (o_S - h_c))
    // where P is the composed prefix above c and S the composed suffix
    // below it.
    for b in 0..bone_count {
        let chain = &problem.chains[b];
        let mut suffix = Affine3::identity();
        for pos in (0..chain.len()).rev() {
            let c = chain[pos];
            let prefix_m = match problem.parents[c] {
                None => None,
                Some(p) => Some(&eval.world[p].m),
            };
            let h = problem.heads[c];
            let os_minus_h = [
                suffix.o[0] - h[0],
                suffix.o[1] - h[1],
                suffix.o[2] - h[2],
            ];
            for j in 0..3 {
                let dr = &eval.bone_jacobians[c][j];
                let dm_inner = mat3_mul(dr, &suffix.m);
                let do_inner = [
                    dr[0][0] * os_minus_h[0] + dr[0][1] * os_minus_h[1] + dr[0][2] * os_minus_h[2],
                    dr[1][0] * os_minus_h[0] + dr[1][1] * os_minus_h[1] + dr[1][2] * os_minus_h[2],
                    dr[2][0] * os_minus_h[0] + dr[2][1] * os_minus_h[1] + dr[2][2] * os_minus_h[2],
                ];
                let (dm, d_o) = match prefix_m {
                    None => (dm_inner, do_inner),
                    Some(pm) => (
                        mat3_mul(pm, &dm_inner),
                        [
                            pm[0][0] * do_inner[0] + pm[0][1] * do_inner[1] + pm[0][2] * do_inner[2],
                            pm[1][0] * do_inner[0] + pm[1][1] * do_inner[1] + pm[1][2] * do_inner[2],
                            pm[2][0] * do_inner[0] + pm[2][1] * do_inner[1] + pm[2][2] * do_inner[2],
                        ],
                    ),
                };
                let mut acc = 0.0;
                for a in 0..3 {
                    acc += g_m[b][a][0] * dm[a][0]
                        + g_m[b][a][1] * dm[a][1]
                        + g_m[b][a][2] * dm[a][2]
                        + g_o[b][a] * d_o[a];
                }
                grad.bone_rotations[c][j] += acc;
            }
            suffix = eval.locals[c].compose(&suffix);
        }
    }
    grad
}

/// Evaluates the alignment objective
/// `w_p * point + w_a * arap` at a pose and returns its analytic gradient
/// with respect to every pose parameter.
pub fn pose_loss_and_gradient<T: Scalar>(
    skeleton: &Skeleton<T>,
    rest: &[[T; 3]],
    edges: &[(usize, usize, T)],
    corr: &CorrespondencePoints<T>,
    pose: &Pose<T>,
    point_weight: f64,
    arap_weight: f64,
) -> Result<(f64, PoseGradient)> {
    let problem = AlignProblem::new(skeleton, rest, edges, corr)?;
    let pose = pose.cast::<f64>();
    let eval = evaluate_pose(&problem, &pose)?;
    let mut dldx = vec![[0.0f64; 3]; problem.rest.len()];
    let loss = accumulate_frame_loss(&problem, &eval, point_weight, arap_weight, &mut dldx)?;
    Ok((loss, backpropagate_pose(&problem, &eval, &dldx)))
}

/// Adds the point and edge-preservation losses (and their position
/// gradients) for one frame.
fn accumulate_frame_loss(
    problem: &AlignProblem,
    eval: &PoseEval,
    point_weight: f64,
    arap_weight: f64,
    dldx: &mut [[f64; 3]],
) -> Result<f64> {
    let mut loss = 0.0;
    if point_weight != 0.0 {
        let n = problem.corr_idx.len() as f64;
        let mut sum = 0.0;
        for (&i, target) in problem.corr_idx.iter().zip(&problem.corr_target) {
            let x = eval.positions[i];
            for k in 0..3 {
                let d = x[k] - target[k];
                sum += d.abs();
                let sign = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                dldx[i][k] += point_weight * sign / n;
            }
        }
        loss += point_weight * sum / n;
    }
    if arap_weight != 0.0 && !problem.edges.is_empty() {
        let e = problem.edges.len() as f64;
        let mut sum = 0.0;
        for &(i, j, rest_len) in &problem.edges {
            let d = vec3::sub(eval.positions[i], eval.positions[j]);
            let len = vec3::norm(d);
            sum += (rest_len - len).abs();
            if len > 0.0 {
                let sign = if len > rest_len {
                    1.0
                } else if len < rest_len {
                    -1.0
                } else {
                    0.0
                };
                let coeff = arap_weight * sign / (e * len);
                for k in 0..3 {
                    dldx[i][k] += coeff * d[k];
                    dldx[j][k] -= coeff * d[k];
                }
            }
            // A fully collapsed edge is a corner of the absolute value;
            // take the zero subgradient.
        }
        loss += arap_weight * sum / e;
    }
    Ok(loss)
}

/// Sequence objective: the per-frame point and edge losses summed over
/// frames (flat sum, so zero smoothing decouples the frames exactly) plus
/// the temporal smoothness term across consecutive frames.
pub fn sequence_loss_and_gradient<T: Scalar>(
    skeleton: &Skeleton<T>,
    rest: &[[T; 3]],
    edges: &[(usize, usize, T)],
    corrs: &[CorrespondencePoints<T>],
    poses: &[Pose<T>],
    point_weight: f64,
    arap_weight: f64,
    smooth_weight: f64,
) -> Result<(f64, Vec<PoseGradient>)> {
    if corrs.len() != poses.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} correspondence frames for {} poses",
            corrs.len(),
            poses.len()
        )));
    }
    if corrs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "sequence alignment needs at least 2 frames, got {}",
            corrs.len()
        )));
    }
    let mut total = 0.0;
    let mut evals = Vec::with_capacity(poses.len());
    let mut problems = Vec::with_capacity(poses.len());
    let mut dldx: Vec<Vec<[f64; 3]>> = Vec::with_capacity(poses.len());
    for (corr, pose) in corrs.iter().zip(poses) {
        let problem = AlignProblem::new(skeleton, rest, edges, corr)?;
        let pose = pose.cast::<f64>();
        let eval = evaluate_pose(&problem, &pose)?;
        let mut g = vec![[0.0f64; 3]; problem.rest.len()];
        total += accumulate_frame_loss(&problem, &eval, point_weight, arap_weight, &mut g)?;
        problems.push(problem);
        evals.push(eval);
        dldx.push(g);
    }
    if smooth_weight != 0.0 {
        let n = problems[0].rest.len() as f64;
        let transitions = (poses.len() - 1) as f64;
        let norm = smooth_weight / (n * transitions);
        let mut sum = 0.0;
        for t in 0..poses.len() - 1 {
            for i in 0..problems[0].rest.len() {
                let d = vec3::sub(evals[t].positions[i], evals[t + 1].positions[i]);
                sum += vec3::dot(d, d);
                for k in 0..3 {
                    dldx[t][i][k] += 2.0 * norm * d[k];
                    dldx[t + 1][i][k] -= 2.0 * norm * d[k];
                }
            }
        }
        total += norm * sum;
    }
    let grads = (0..poses.len())
        .map(|t| backpropagate_pose(&problems[t], &evals[t], &dldx[t]))
        .collect();
    Ok((total, grads))
}

// ---------------------------------------------------------------------------
// Pose alignment optimizers
// ---------------------------------------------------------------------------

/// Settings for [`align_pose`] and [`align_sequence`].
#[derive(Debug, Clone)]
pub struct AlignConfig {
    /// Total optimizer iterations; the first half optimizes only the global
    /// rotation/translation/scale, the second half additionally the bones.
    pub iterations: usize,
    /// Peak step size, linearly decayed to zero across the run (the L1
    /// losses keep gradient magnitudes constant near the optimum, so a
    /// fixed step cannot settle).
    pub learning_rate: f64,
    pub point_weight: f64,
    pub arap_weight: f64,
    /// Temporal smoothness weight; only used by sequence alignment.
    pub smooth_weight: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            iterations: 4000,
            learning_rate: 0.01,
            point_weight: 1.0,
            arap_weight: 1.0,
            smooth_weight: 0.0,
        }
    }
}

/// Result of a single-frame alignment.
#[derive(Debug, Clone)]
pub struct AlignRun<T> {
    pub pose: Pose<T>,
    /// Pose at the end of the root-only phase; its bone rotations are
    /// bitwise untouched from the identity start.
    pub pose_after_phase_one: Pose<T>,
    /// Objective value per iteration.
    pub loss_trace: Vec<f64>,
}

/// Result of a sequence alignment.
#[derive(Debug, Clone)]
pub struct AlignSequenceRun<T> {
    pub poses: Vec<Pose<T>>,
    pub loss_trace: Vec<f64>,
}

/// Pose parameters packed as optimizer tensors. Scale is optimized in log
/// space so it stays positive by construction.
fn pose_param_set(frames: usize, bone_count: usize) -> crate::net::ParamSet<f64> {
    let mut params = crate::net::ParamSet::new();
    for t in 0..frames {
        let prefix = if frames == 1 {
            String::new()
        } else {
            format!("frame{t}.")
        };
        params.push(format!("{prefix}root.rotation"), Matrix::zeros(1, 3));
        params.push(format!("{prefix}root.translation"), Matrix::zeros(1, 3));
        params.push(format!("{prefix}root.log_scale"), Matrix::zeros(1, 1));
        params.push(format!("{prefix}bones"), Matrix::zeros(bone_count, 3));
    }
    params
}

fn unpack_pose(params: &crate::net::ParamSet<f64>, frame: usize, bone_count: usize) -> Pose<f64> {
    let base = frame * 4;
    let values = params.values();
    let rr = values[base].row(0);
    let rt = values[base + 1].row(0);
    let sigma = values[base + 2].get(0, 0);
    let bones = &values[base + 3];
    Pose {
        bone_rotations: (0..bone_count)
            .map(|b| [bones.get(b, 0), bones.get(b, 1), bones.get(b, 2)])
            .collect(),
        root_rotation: [rr[0], rr[1], rr[2]],
        root_translation: [rt[0], rt[1], rt[2]],
        scale: sigma.exp(),
    }
}

fn pack_gradient(grad: &PoseGradient, scale: f64, bone_count: usize) -> Vec<Matrix<f64>> {
    let mut out = Vec::with_capacity(4);
    out.push(Matrix::from_vec(1, 3, grad.root_rotation.to_vec()).expect("1x3"));
    out.push(Matrix::from_vec(1, 3, grad.root_translation.to_vec()).expect("1x3"));
    // d/d(log s) = s * d/ds.
    out.push(Matrix::from_vec(1, 1, vec![grad.scale * scale]).expect("1x1"));
    let mut bones = Matrix::zeros(bone_count, 3);
    for b in 0..bone_count {
        for j in 0..3 {
            bones.set(b, j, grad.bone_rotations[b][j]);
        }
    }
    out.push(bones);
    out
}

/// Fits a pose so the deformed rest mesh meets the correspondence targets,
/// regularized by edge-length preservation. Two phases: the first half of
/// the iterations updates only the global rotation, translation and scale
/// (bone rotations stay bitwise at the identity); the second half updates
/// everything. Linearly decayed AdamW without weight decay.
pub fn align_pose<T: Scalar>(
    skeleton: &Skeleton<T>,
    rest_mesh: &crate::mesh::Mesh<T>,
    corr: &CorrespondencePoints<T>,
    config: &AlignConfig,
) -> Result<AlignRun<T>> {
    let adjacency = crate::mesh::build_adjacency(rest_mesh)?;
    let problem = AlignProblem::new(skeleton, &rest_mesh.vertices, &adjacency.edges, corr)?;
    let bone_count = problem.bone_count();

    let mut params = pose_param_set(1, bone_count);
    let mut opt = crate::net::AdamW::new(config.learning_rate, 0.0, &params);
    let root_mask = vec![true, true, true, false];
    let full_mask = vec![true; 4];
    let phase_one = config.iterations / 2;

    let mut trace = Vec::with_capacity(config.iterations);
    let mut snapshot: Option<Pose<f64>> = None;
    for iter in 0..config.iterations {
        if iter == phase_one {
            snapshot = Some(unpack_pose(&params, 0, bone_count));
        }
        let pose = unpack_pose(&params, 0, bone_count);
        let eval = evaluate_pose(&problem, &pose)?;
        let mut dldx = vec![[0.0f64; 3]; problem.rest.len()];
        let loss = accumulate_frame_loss(
            &problem,
            &eval,
            config.point_weight,
            config.arap_weight,
            &mut dldx,
        )?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "alignment objective became non-finite at iteration {iter}"
            )));
        }
        trace.push(loss);
        let grad = backpropagate_pose(&problem, &eval, &dldx);
        let grads = pack_gradient(&grad, pose.scale, bone_count);
        opt.learning_rate =
            config.learning_rate * (1.0 - iter as f64 / config.iterations as f64);
        let mask = if iter < phase_one { &root_mask } else { &full_mask };
        opt.step_masked(&mut params, &grads, mask)?;
    }
    let final_pose = unpack_pose(&params, 0, bone_count);
    let phase_pose = snapshot.unwrap_or_else(|| final_pose.clone());
    Ok(AlignRun {
        pose: final_pose.cast::<T>(),
        pose_after_phase_one: phase_pose.cast::<T>(),
        loss_trace: trace,
    })
}

/// Fits one pose per frame with the temporal smoothness term coupling
/// consecutive frames; the same two-phase schedule applies across all
/// frames at once. With `smooth_weight = 0` the frames decouple and match
/// independent [`align_pose`] runs.
pub fn align_sequence<T: Scalar>(
    skeleton: &Skeleton<T>,
    rest_mesh: &crate::mesh::Mesh<T>,
    corrs: &[CorrespondencePoints<T>],
    config: &AlignConfig,
) -> Result<AlignSequenceRun<T>> {
    if corrs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "sequence alignment needs at least 2 frames, got {}",
            corrs.len()
        )));
    }
    let adjacency = crate::mesh::build_adjacency(rest_mesh)?;
    let problems: Vec<AlignProblem> = corrs
        .iter()
        .map(|corr| AlignProblem::new(skeleton, &rest_mesh.vertices, &adjacency.edges, corr))
        .collect::<Result<_>>()?;
    let frames = corrs.len();
    let bone_count = problems[0].bone_count();

    let mut params = pose_param_set(frames, bone_count);
    let mut opt = crate::net::AdamW::new(config.learning_rate, 0.0, &params);
    let mut root_mask = Vec::with_capacity(frames * 4);
    for _ in 0..frames {
        root_mask.extend_from_slice(&[true, true, true, false]);
    }
    let full_mask = vec![true; frames * 4];
    let phase_one = config.iterations / 2;

    let n_points = problems[0].rest.len() as f64;
    let transitions = (frames - 1) as f64;
    let mut trace = Vec::with_capacity(config.iterations);
    for iter in 0..config.iterations {
        let poses: Vec<Pose<f64>> = (0..frames)
            .map(|t| unpack_pose(&params, t, bone_count))
            .collect();
        let mut evals = Vec::with_capacity(frames);
        let mut dldx: Vec<Vec<[f64; 3]>> = Vec::with_capacity(frames);
        let mut total = 0.0;
        for t in 0..frames {
            let eval = evaluate_pose(&problems[t], &poses[t])?;
            let mut g = vec![[0.0f64; 3]; problems[t].rest.len()];
            total += accumulate_frame_loss(
                &problems[t],
                &eval,
                config.point_weight,
                config.arap_weight,
                &mut g,
            )?;
            evals.push(eval);
            dldx.push(g);
        }
        if config.smooth_weight != 0.0 {
            let norm = config.smooth_weight / (n_points * transitions);
            for t in 0..frames - 1 {
                for i in 0..problems[0].rest.len() {
                    let d = vec3::sub(evals[t].positions[i], evals[t + 1].positions[i]);
                    total += norm * vec3::dot(d, d);
                    for k in 0..3 {
                        dldx[t][i][k] += 2.0 * norm * d[k];
                        dldx[t + 1][i][k] -= 2.0 * norm * d[k];
                    }
                }
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "sequence objective became non-finite at iteration {iter}"
            )));
        }
        trace.push(total);
        let mut grads = Vec::with_capacity(frames * 4);
        for t in 0..frames {
            let g = backpropagate_pose(&problems[t], &evals[t], &dldx[t]);
            grads.extend(pack_gradient(&g, poses[t].scale, bone_count));
        }
        opt.learning_rate =
            config.learning_rate * (1.0 - iter as f64 / config.iterations as f64);
        let mask = if iter < phase_one { &root_mask } else { &full_mask };
        opt.step_masked(&mut params, &grads, mask)?;
    }
    let poses = (0..frames)
        .map(|t| unpack_pose(&params, t, bone_count).cast::<T>())
        .collect();
    Ok(AlignSequenceRun {
        poses,
        loss_trace: trace,
    })
}

// ---------------------------------------------------------------------------
// Skinning-weight regression
// ---------------------------------------------------------------------------

/// Linear map plus row-softmax: predicted skinning rows are convex by
/// construction.
#[derive(Debug, Clone)]
pub struct SkinningRegressor<T> {
    /// `bone_count x feature_dim`.
    pub weight: Matrix<T>,
    /// `1 x bone_count`.
    pub bias: Matrix<T>,
}

impl<T: Scalar> SkinningRegressor<T> {
    pub fn predict(&self, features: &Matrix<T>) -> Result<Matrix<T>> {
        let mut tape = crate::net::Tape::new();
        let x = tape.leaf(features.clone());
        let w = tape.leaf(self.weight.clone());
        let b = tape.leaf(self.bias.clone());
        let logits = tape.affine(x, w, b)?;
        let probs = tape.row_softmax(logits)?;
        Ok(tape.value(probs).clone())
    }
}

/// Settings for [`regress_skinning`].
#[derive(Debug, Clone)]
pub struct RegressionConfig {
    /// Full-batch gradient steps per fold (and for the final fit).
    pub epochs: usize,
    pub learning_rate: f64,
    /// Cross-validation fold count.
    pub folds: usize,
    /// Seed for the index shuffle and parameter initialization.
    pub seed: u64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        RegressionConfig {
            epochs: 2000,
            learning_rate: 0.05,
            folds: 5,
            seed: 0,
        }
    }
}

/// Cross-validated regression outcome.
#[derive(Debug, Clone)]
pub struct RegressionReport<T> {
    /// Regressor fitted on all rows.
    pub regressor: SkinningRegressor<T>,
    /// Held-out mean squared error per fold.
    pub fold_mse: Vec<f64>,
    pub mean_mse: f64,
}

fn init_regressor(feature_dim: usize, bone_count: usize, seed: u64) -> crate::net::ParamSet<f64> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (feature_dim as f64).sqrt();
    let mut weight = Matrix::<f64>::zeros(bone_count, feature_dim);
    for v in weight.data_mut() {
        *v = rng.gen_range(-bound..bound);
    }
    let mut bias = Matrix::<f64>::zeros(1, bone_count);
    for v in bias.data_mut() {
        *v = rng.gen_range(-bound..bound);
    }
    let mut params = crate::net::ParamSet::new();
    params.push("weight", weight);
    params.push("bias", bias);
    params
}

fn fit_regressor(
    features: &Matrix<f64>,
    targets: &Matrix<f64>,
    config: &RegressionConfig,
    init_seed: u64,
) -> Result<crate::net::ParamSet<f64>> {
    let mut params = init_regressor(features.cols(), targets.cols(), init_seed);
    let mut opt = crate::net::AdamW::new(config.learning_rate, 0.0, &params);
    for _ in 0..config.epochs {
        let mut tape = crate::net::Tape::new();
        let x = tape.leaf(features.clone());
        let w = tape.leaf(params.values()[0].clone());
        let b = tape.leaf(params.values()[1].clone());
        let logits = tape.affine(x, w, b)?;
        let probs = tape.row_softmax(logits)?;
        let loss = tape.mean_squared_error(probs, targets)?;
        let mut grads = tape.backward(loss)?;
        let gw = grads.take_or_zeros(w, params.values()[0].rows(), params.values()[0].cols());
        let gb = grads.take_or_zeros(b, 1, params.values()[1].cols());
        opt.step(&mut params, &[gw, gb])?;
    }
    Ok(params)
}

fn mse_between(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    let mut sum = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = x - y;
        sum += d * d;
    }
    sum / (a.rows() * a.cols()) as f64
}

/// Fits the skinning regressor with k-fold cross validation (contiguous
/// blocks of a seeded shuffle), reporting per-fold held-out MSE, then fits
/// the returned regressor on all rows.
pub fn regress_skinning<T: Scalar>(
    features: &Matrix<T>,
    true_weights: &Matrix<T>,
    config: &RegressionConfig,
) -> Result<RegressionReport<T>> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    if true_weights.cols() < 2 {
        return Err(Error::InvalidArgument(format!(
            "skinning regression needs at least 2 bones, got {}",
            true_weights.cols()
        )));
    }
    if features.rows() != true_weights.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature rows for {} weight rows",
            features.rows(),
            true_weights.rows()
        )));
    }
    if config.folds < 2 || features.rows() < config.folds {
        return Err(Error::InvalidArgument(format!(
            "degenerate split: {} rows into {} folds",
            features.rows(),
            config.folds
        )));
    }
    let tol = 1e-4;
    for i in 0..true_weights.rows() {
        let sum: f64 = true_weights.row(i).iter().map(|&v| Scalar::to_f64(v)).sum();
        if (sum - 1.0).abs() > tol {
            return Err(Error::InvalidArgument(format!(
                "target weight row {i} sums to {sum}, expected 1"
            )));
        }
    }

    let x = features.cast::<f64>();
    let y = true_weights.cast::<f64>();
    let n = x.rows();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    indices.shuffle(&mut rng);

    let mut fold_mse = Vec::with_capacity(config.folds);
    for fold in 0..config.folds {
        let start = fold * n / config.folds;
        let end = (fold + 1) * n / config.folds;
        let test: Vec<usize> = indices[start..end].to_vec();
        let train: Vec<usize> = indices[..start]
            .iter()
            .chain(&indices[end..])
            .copied()
            .collect();
        if test.is_empty() || train.is_empty() {
            return Err(Error::InvalidArgument("degenerate split: empty fold".into()));
        }
        let params = fit_regressor(
            &x.select_rows(&train),
            &y.select_rows(&train),
            config,
            config.seed ^ (0xf01d_0000 + fold as u64),
        )?;
        let regressor = SkinningRegressor {
            weight: params.values()[0].clone(),
            bias: params.values()[1].clone(),
        };
        let predicted = regressor.predict(&x.select_rows(&test))?;
        fold_mse.push(mse_between(&predicted, &y.select_rows(&test)));
    }
    let mean_mse = fold_mse.iter().sum::<f64>() / fold_mse.len() as f64;

    let final_params = fit_regressor(&x, &y, config, config.seed ^ 0xf01d_ffff)?;
    Ok(RegressionReport {
        regressor: SkinningRegressor {
            weight: final_params.values()[0].cast::<T>(),
            bias: final_params.values()[1].cast::<T>(),
        },
        fold_mse,
        mean_mse,
    })
}

#[cfg(test)]
mod pose_tests {
    use super::*;

    fn toy_skeleton() -> Skeleton<f64> {
        // Root at origin, one child at (1, 0, 0); two points each fully
        // bound to one bone.
        let bones = vec![
            Bone { parent: None, head: [0.0, 0.0, 0.0] },
            Bone { parent: Some(0), head: [1.0, 0.0, 0.0] },
        ];
        let weights = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        Skeleton { bones, weights }
    }

    #[test]
    fn identity_pose_is_a_no_op() {
        let sk = toy_skeleton();
        let rest = vec![[0.5, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let out = lbs_deform(&sk, &Pose::identity(2), &rest).unwrap();
        assert_eq!(out, rest);
    }

    #[test]
    fn rotation_matches_rodrigues_on_quarter_turn() {
        let r = rotation_from_axis_angle([0.0, 0.0, std::f64::consts::FRAC_PI_2]);
        // z-rotation by 90 degrees sends x to y.
        let p = [1.0, 0.0, 0.0];
        let q = [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
        ];
        assert!((q[0]).abs() < 1e-12 && (q[1] - 1.0).abs() < 1e-12 && q[2].abs() < 1e-12);
    }

    #[test]
    fn child_rotation_pivots_about_its_head() {
        let sk = toy_skeleton();
        let mut pose = Pose::identity(2);
        pose.bone_rotations[1] = [0.0, 0.0, std::f64::consts::FRAC_PI_2];
        let rest = vec![[0.5, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let out = lbs_deform(&sk, &pose, &rest).unwrap();
        // Point on the root bone is unaffected.
        assert!(vec3::distance(out[0], [0.5, 0.0, 0.0]) < 1e-12);
        // Point at distance 1 from the child head swings to (1, 1, 0).
        assert!(vec3::distance(out[1], [1.0, 1.0, 0.0]) < 1e-12);
    }

    #[test]
    fn parent_rotation_carries_children_along() {
        let sk = toy_skeleton();
        let mut pose = Pose::identity(2);
        pose.bone_rotations[0] = [0.0, 0.0, std::f64::consts::FRAC_PI_2];
        let rest = vec![[0.5, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let out = lbs_deform(&sk, &pose, &rest).unwrap();
        assert!(vec3::distance(out[0], [0.0, 0.5, 0.0]) < 1e-12);
        assert!(vec3::distance(out[1], [0.0, 2.0, 0.0]) < 1e-12);
    }

    #[test]
    fn global_transform_applies_after_skinning() {
        let sk = toy_skeleton();
        let mut pose = Pose::identity(2);
        pose.scale = 2.0;
        pose.root_translation = [0.0, 0.0, 3.0];
        let rest = vec![[0.5, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let out = lbs_deform(&sk, &pose, &rest).unwrap();
        assert!(vec3::distance(out[0], [1.0, 0.0, 3.0]) < 1e-12);
        assert!(vec3::distance(out[1], [4.0, 0.0, 3.0]) < 1e-12);
    }

    #[test]
    fn rotation_jacobian_matches_finite_differences() {
        let samples = [
            [0.3, -0.7, 0.2],
            [1e-8, 0.0, 0.0],
            [0.0, 0.0, 0.0],
            [2.1, 0.4, -1.3],
        ];
        for w in samples {
            let (_, grads) = rotation_jacobian(w);
            for i in 0..3 {
                let h = 1e-6;
                let mut wp = w;
                wp[i] += h;
                let mut wm = w;
                wm[i] -= h;
                let rp = rotation_from_axis_angle(wp);
                let rm = rotation_from_axis_angle(wm);
                for a in 0..3 {
                    for b in 0..3 {
                        let fd = (rp[a][b] - rm[a][b]) / (2.0 * h);
                        assert!(
                            (grads[i][a][b] - fd).abs() < 1e-5,
                            "w={w:?} d{i} [{a}][{b}]: analytic {} vs fd {fd}",
                            grads[i][a][b]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn skeleton_round_trips_through_files() {
        let sk = toy_skeleton();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rig.skel");
        save_skeleton(&sk, &path).unwrap();
        let back: Skeleton<f64> = load_skeleton(&path).unwrap();
        assert_eq!(back.bones, sk.bones);
        assert_eq!(back.weights.data(), sk.weights.data());
    }

    #[test]
    fn pose_round_trips_through_csv() {
        let mut pose = Pose::<f64>::identity(3);
        pose.bone_rotations[1] = [0.25, -0.5, 0.125];
        pose.root_rotation = [0.0, 0.5, 0.0];
        pose.root_translation = [1.0, 2.0, 3.0];
        pose.scale = 1.5;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pose.csv");
        save_pose(&pose, &path).unwrap();
        let back: Pose<f64> = load_pose(&path).unwrap();
        assert_eq!(back, pose);
    }

    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    #[test]
    fn point_loss_identities_and_brute_force() {
        let a = random_points(100, 1);
        assert_eq!(point_loss(&a, &a).unwrap(), 0.0);
        let p = vec![[0.0f64, 0.0, 0.0]];
        let q = vec![[1.0f64, 2.0, 0.0]];
        assert_eq!(point_loss(&p, &q).unwrap(), 3.0);
        let b = random_points(100, 2);
        let mut expected = 0.0;
        for (x, y) in a.iter().zip(&b) {
            expected += (x[0] - y[0]).abs() + (x[1] - y[1]).abs() + (x[2] - y[2]).abs();
        }
        expected /= 100.0;
        assert!((point_loss(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn edge_preservation_loss_identities() {
        let pts = random_points(20, 3);
        let edges: Vec<(usize, usize, f64)> = (0..19)
            .map(|i| (i, i + 1, vec3::distance(pts[i], pts[i + 1])))
            .collect();
        assert_eq!(arap_loss(&edges, &pts).unwrap(), 0.0);

        // Uniform scale by 2: every deviation is the original length.
        let doubled: Vec<[f64; 3]> = pts.iter().map(|p| vec3::scale(*p, 2.0)).collect();
        let mean_len: f64 = edges.iter().map(|e| e.2).sum::<f64>() / edges.len() as f64;
        assert!((arap_loss(&edges, &doubled).unwrap() - mean_len).abs() < 1e-12);

        // Rigid motion leaves edge lengths alone.
        let r = rotation_from_axis_angle([0.3, -0.2, 0.9]);
        let moved: Vec<[f64; 3]> = pts
            .iter()
            .map(|p| {
                [
                    r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + 5.0,
                    r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] - 2.0,
                    r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + 0.5,
                ]
            })
            .collect();
        assert!(arap_loss(&edges, &moved).unwrap() < 1e-6);
    }

    #[test]
    fn smoothness_loss_identities_and_brute_force() {
        let f0 = random_points(10, 4);
        assert_eq!(smooth_loss(&[f0.clone(), f0.clone()]).unwrap(), 0.0);

        // One point (N = 1) moved by distance 1 across two frames.
        let a = vec![[0.0f64, 0.0, 0.0]];
        let b = vec![[1.0f64, 0.0, 0.0]];
        assert_eq!(smooth_loss(&[a, b]).unwrap(), 1.0);

        let frames = vec![random_points(7, 5), random_points(7, 6), random_points(7, 7)];
        let mut expected = 0.0;
        for t in 0..2 {
            for (p, q) in frames[t].iter().zip(&frames[t + 1]) {
                let d = vec3::sub(*p, *q);
                expected += vec3::dot(d, d);
            }
        }
        expected /= 7.0 * 2.0;
        assert!((smooth_loss(&frames).unwrap() - expected).abs() < 1e-12);
        assert!(smooth_loss(&[frames[0].clone()]).is_err());
    }

    /// Small three-bone skeleton over a random blob with smooth weights.
    fn blob_rig(n: usize, seed: u64) -> (Skeleton<f64>, crate::mesh::Mesh<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // A strip of vertices along x in [-1, 2], fanned into triangles.
        let mut vertices = Vec::with_capacity(n);
        for i in 0..n {
            let t = i as f64 / (n - 1) as f64;
            vertices.push([
                -1.0 + 3.0 * t,
                0.3 * rng.gen_range(-1.0..1.0),
                0.3 * rng.gen_range(-1.0..1.0),
            ]);
        }
        let faces: Vec<[usize; 3]> = (0..n - 2).map(|i| [i, i + 1, i + 2]).collect();
        let bones = vec![
            Bone { parent: None, head: [0.0, 0.0, 0.0] },
            Bone { parent: Some(0), head: [1.0, 0.0, 0.0] },
            Bone { parent: Some(1), head: [1.5, 0.0, 0.0] },
        ];
        let heads = [0.0, 1.0, 1.5];
        let mut weights = Matrix::zeros(n, 3);
        for (i, v) in vertices.iter().enumerate() {
            let mut row = [0.0f64; 3];
            for b in 0..3 {
                let d = (v[0] - heads[b]).abs();
                row[b] = (-3.0 * d).exp();
            }
            let sum: f64 = row.iter().sum();
            for b in 0..3 {
                weights.set(i, b, row[b] / sum);
            }
        }
        let mesh = crate::mesh::Mesh {
            vertices,
            faces,
            colors: None,
        };
        (Skeleton { bones, weights }, mesh)
    }

    fn wiggled_pose() -> Pose<f64> {
        Pose {
            bone_rotations: vec![[0.05, -0.1, 0.2], [0.3, 0.1, -0.2], [-0.15, 0.25, 0.1]],
            root_rotation: [0.2, -0.3, 0.1],
            root_translation: [0.4, -0.2, 0.3],
            scale: 1.2,
        }
    }

    /// Central finite difference over every pose parameter.
    fn fd_pose_gradient<F>(pose: &Pose<f64>, mut eval: F, step: f64) -> PoseGradient
    where
        F: FnMut(&Pose<f64>) -> f64,
    {
        let mut g = PoseGradient::zeros(pose.bone_rotations.len());
        let mut diff = |setter: &dyn Fn(&mut Pose<f64>, f64)| {
            let mut hi = pose.clone();
            setter(&mut hi, step);
            let mut lo = pose.clone();
            setter(&mut lo, -step);
            (eval(&hi) - eval(&lo)) / (2.0 * step)
        };
        for b in 0..pose.bone_rotations.len() {
            for j in 0..3 {
                g.bone_rotations[b][j] = diff(&|p, h| p.bone_rotations[b][j] += h);
            }
        }
        for j in 0..3 {
            g.root_rotation[j] = diff(&|p, h| p.root_rotation[j] += h);
            g.root_translation[j] = diff(&|p, h| p.root_translation[j] += h);
        }
        g.scale = diff(&|p, h| p.scale += h);
        g
    }

    fn assert_grad_close(analytic: &PoseGradient, fd: &PoseGradient, tol: f64, what: &str) {
        let rel = |a: f64, f: f64| (a - f).abs() / a.abs().max(f.abs()).max(1e-7);
        for (b, (ga, gf)) in analytic
            .bone_rotations
            .iter()
            .zip(&fd.bone_rotations)
            .enumerate()
        {
            for j in 0..3 {
                assert!(
                    rel(ga[j], gf[j]) < tol,
                    "{what}: bone {b} comp {j}: {} vs {}",
                    ga[j],
                    gf[j]
                );
            }
        }
        for j in 0..3 {
            assert!(
                rel(analytic.root_rotation[j], fd.root_rotation[j]) < tol,
                "{what}: root rotation {j}"
            );
            assert!(
                rel(analytic.root_translation[j], fd.root_translation[j]) < tol,
                "{what}: translation {j}"
            );
        }
        assert!(rel(analytic.scale, fd.scale) < tol, "{what}: scale");
    }

    #[test]
    fn alignment_objective_gradients_match_fd() {
        let (sk, mesh) = blob_rig(24, 11);
        let adjacency = crate::mesh::build_adjacency(&mesh).unwrap();
        let corr = CorrespondencePoints {
            source_indices: (0..mesh.vertices.len()).step_by(3).collect(),
            target_positions: random_points(8, 12),
        };
        let pose = wiggled_pose();
        for (wp, wa, what) in [
            (1.0, 0.0, "point term"),
            (0.0, 1.0, "edge term"),
            (1.0, 0.5, "combined"),
        ] {
            let (_, analytic) = pose_loss_and_gradient(
                &sk,
                &mesh.vertices,
                &adjacency.edges,
                &corr,
                &pose,
                wp,
                wa,
            )
            .unwrap();
            let fd = fd_pose_gradient(
                &pose,
                |p| {
                    pose_loss_and_gradient(
                        &sk,
                        &mesh.vertices,
                        &adjacency.edges,
                        &corr,
                        p,
                        wp,
                        wa,
                    )
                    .unwrap()
                    .0
                },
                1e-4,
            );
            assert_grad_close(&analytic, &fd, 1e-4, what);
        }
    }

    #[test]
    fn sequence_objective_gradient_matches_fd() {
        let (sk, mesh) = blob_rig(18, 21);
        let adjacency = crate::mesh::build_adjacency(&mesh).unwrap();
        let corrs: Vec<CorrespondencePoints<f64>> = (0..2)
            .map(|f| CorrespondencePoints {
                source_indices: (0..mesh.vertices.len()).step_by(2).collect(),
                target_positions: random_points(9, 30 + f),
            })
            .collect();
        let poses = vec![wiggled_pose(), {
            let mut p = wiggled_pose();
            p.root_translation = [0.1, 0.3, -0.2];
            p
        }];
        let (_, analytic) = sequence_loss_and_gradient(
            &sk,
            &mesh.vertices,
            &adjacency.edges,
            &corrs,
            &poses,
            1.0,
            1.0,
            1.0,
        )
        .unwrap();
        for t in 0..2 {
            let fd = fd_pose_gradient(
                &poses[t],
                |p| {
                    let mut ps = poses.clone();
                    ps[t] = p.clone();
                    sequence_loss_and_gradient(
                        &sk,
                        &mesh.vertices,
                        &adjacency.edges,
                        &corrs,
                        &ps,
                        1.0,
                        1.0,
                        1.0,
                    )
                    .unwrap()
                    .0
                },
                1e-4,
            );
            assert_grad_close(&analytic[t], &fd, 1e-4, &format!("frame {t}"));
        }
    }

    #[test]
    fn zero_iterations_returns_identity_and_rest_target_does_not_drift() {
        let (sk, mesh) = blob_rig(20, 31);
        let corr = CorrespondencePoints {
            source_indices: (0..mesh.vertices.len()).collect(),
            target_positions: mesh.vertices.clone(),
        };
        let run = align_pose(
            &sk,
            &mesh,
            &corr,
            &AlignConfig {
                iterations: 0,
                ..AlignConfig::default()
            },
        )
        .unwrap();
        assert_eq!(run.pose, Pose::identity(3));

        // Rest targets: the identity is already optimal, and every gradient
        // is exactly zero there, so optimization must not move anything.
        let run = align_pose(
            &sk,
            &mesh,
            &corr,
            &AlignConfig {
                iterations: 50,
                ..AlignConfig::default()
            },
        )
        .unwrap();
        assert_eq!(run.pose, Pose::identity(3));
        assert!(run.loss_trace.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn alignment_recovers_a_known_pose_and_freezes_bones_in_phase_one() {
        let (sk, mesh) = blob_rig(40, 41);
        let truth = Pose {
            bone_rotations: vec![[0.0, 0.0, 0.15], [0.0, 0.0, -0.2], [0.1, 0.0, 0.0]],
            root_rotation: [0.0, 0.2, 0.0],
            root_translation: [0.2, -0.1, 0.15],
            scale: 1.1,
        };
        let targets = lbs_deform(&sk, &truth, &mesh.vertices).unwrap();
        let corr = CorrespondencePoints {
            source_indices: (0..mesh.vertices.len()).collect(),
            target_positions: targets.clone(),
        };
        let config = AlignConfig {
            iterations: 1500,
            ..AlignConfig::default()
        };
        let run = align_pose(&sk, &mesh, &corr, &config).unwrap();

        // Bone rotations bitwise untouched through the root-only phase.
        for r in &run.pose_after_phase_one.bone_rotations {
            for k in 0..3 {
                assert_eq!(r[k].to_bits(), 0.0f64.to_bits());
            }
        }

        let recovered = lbs_deform(&sk, &run.pose, &mesh.vertices).unwrap();
        let diag = mesh.bbox_diagonal();
        let mean_err: f64 = recovered
            .iter()
            .zip(&targets)
            .map(|(a, b)| vec3::distance(*a, *b))
            .sum::<f64>()
            / targets.len() as f64;
        assert!(
            mean_err < 1e-3 * diag,
            "mean recovery error {mean_err} vs diag {diag}"
        );
        // The trace starts higher than it ends.
        assert!(run.loss_trace[0] > *run.loss_trace.last().unwrap());
    }

    #[test]
    fn sequence_with_zero_smoothing_matches_independent_runs() {
        let (sk, mesh) = blob_rig(16, 51);
        let truth = wiggled_pose();
        let targets = lbs_deform(&sk, &truth, &mesh.vertices).unwrap();
        let corr0 = CorrespondencePoints {
            source_indices: (0..mesh.vertices.len()).collect(),
            target_positions: targets,
        };
        let shifted: Vec<[f64; 3]> = corr0
            .target_positions
            .iter()
            .map(|p| [p[0] + 0.1, p[1], p[2]])
            .collect();
        let corr1 = CorrespondencePoints {
            source_indices: corr0.source_indices.clone(),
            target_positions: shifted,
        };
        let config = AlignConfig {
            iterations: 60,
            smooth_weight: 0.0,
            ..AlignConfig::default()
        };
        let seq = align_sequence(&sk, &mesh, &[corr0.clone(), corr1.clone()], &config).unwrap();
        let solo0 = align_pose(&sk, &mesh, &corr0, &config).unwrap();
        let solo1 = align_pose(&sk, &mesh, &corr1, &config).unwrap();
        for (joint, solo) in [(&seq.poses[0], &solo0.pose), (&seq.poses[1], &solo1.pose)] {
            for (a, b) in joint.bone_rotations.iter().zip(&solo.bone_rotations) {
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() < 1e-5);
                }
            }
            for k in 0..3 {
                assert!((joint.root_rotation[k] - solo.root_rotation[k]).abs() < 1e-5);
                assert!((joint.root_translation[k] - solo.root_translation[k]).abs() < 1e-5);
            }
            assert!((joint.scale - solo.scale).abs() < 1e-5);
        }
    }

    #[test]
    fn identical_frames_align_identically_and_smoothly() {
        let (sk, mesh) = blob_rig(16, 61);
        let truth = wiggled_pose();
        let targets = lbs_deform(&sk, &truth, &mesh.vertices).unwrap();
        let corr = CorrespondencePoints {
            source_indices: (0..mesh.vertices.len()).collect(),
            target_positions: targets,
        };
        let config = AlignConfig {
            iterations: 200,
            smooth_weight: 1.0,
            ..AlignConfig::default()
        };
        let seq = align_sequence(&sk, &mesh, &[corr.clone(), corr], &config).unwrap();
        let (a, b) = (&seq.poses[0], &seq.poses[1]);
        let mut max_dev = (a.scale - b.scale).abs();
        for k in 0..3 {
            max_dev = max_dev
                .max((a.root_rotation[k] - b.root_rotation[k]).abs())
                .max((a.root_translation[k] - b.root_translation[k]).abs());
        }
        for (ra, rb) in a.bone_rotations.iter().zip(&b.bone_rotations) {
            for k in 0..3 {
                max_dev = max_dev.max((ra[k] - rb[k]).abs());
            }
        }
        assert!(max_dev <= 1e-3, "poses deviate by {max_dev}");

        let f0 = lbs_deform(&sk, &seq.poses[0], &mesh.vertices).unwrap();
        let f1 = lbs_deform(&sk, &seq.poses[1], &mesh.vertices).unwrap();
        assert!(smooth_loss(&[f0, f1]).unwrap() <= 1e-6);
    }

    #[test]
    fn correspondence_csv_round_trips_and_sparse_subset_spreads() {
        let corr = CorrespondencePoints::<f64> {
            source_indices: vec![3, 1, 7, 2],
            target_positions: random_points(4, 71),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corr.csv");
        save_correspondence_points(&corr, &path).unwrap();
        let back: CorrespondencePoints<f64> = load_correspondence_points(&path).unwrap();
        assert_eq!(back.source_indices, corr.source_indices);
        for (a, b) in back.target_positions.iter().zip(&corr.target_positions) {
            assert_eq!(a, b);
        }

        let rest = random_points(10, 72);
        let dense = CorrespondencePoints {
            source_indices: (0..10).collect(),
            target_positions: random_points(10, 73),
        };
        let sparse = dense.sparse_subset(&rest, 0.5, 9).unwrap();
        assert_eq!(sparse.len(), 5);
        for (&i, p) in sparse.source_indices.iter().zip(&sparse.target_positions) {
            let k = dense.source_indices.iter().position(|&d| d == i).unwrap();
            assert_eq!(*p, dense.target_positions[k]);
        }
    }

    #[test]
    fn skinning_regression_fits_a_separable_instance() {
        // Features: noisy one-hot of the bone id.
        let n = 150;
        let bones = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let mut features = Matrix::<f64>::zeros(n, 6);
        let mut targets = Matrix::<f64>::zeros(n, bones);
        for i in 0..n {
            let b = i % bones;
            targets.set(i, b, 1.0);
            for c in 0..6 {
                let base = if c == b { 1.0 } else { 0.0 };
                features.set(i, c, base + 0.05 * rng.gen_range(-1.0..1.0));
            }
        }
        let config = RegressionConfig {
            epochs: 800,
            learning_rate: 0.05,
            folds: 5,
            seed: 3,
        };
        let report = regress_skinning(&features, &targets, &config).unwrap();
        assert_eq!(report.fold_mse.len(), 5);
        assert!(
            report.mean_mse < 1e-3,
            "cross-validated MSE {}",
            report.mean_mse
        );

        // Predicted rows are convex combinations for any parameters.
        let arbitrary = SkinningRegressor {
            weight: Matrix::from_vec(
                3,
                2,
                vec![0.5, -2.0, 1.5, 0.25, -0.75, 3.0],
            )
            .unwrap(),
            bias: Matrix::from_vec(1, 3, vec![0.1, -0.4, 2.0]).unwrap(),
        };
        let probe = Matrix::from_vec(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let pred = arbitrary.predict(&probe).unwrap();
        for r in 0..pred.rows() {
            let sum: f64 = pred.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(pred.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn zero_learning_rate_keeps_regressor_fixed() {
        let features = Matrix::<f64>::from_vec(
            6,
            2,
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.5, 0.25, 0.1, 0.9, 0.3, 0.7],
        )
        .unwrap();
        let mut targets = Matrix::<f64>::zeros(6, 2);
        for i in 0..6 {
            targets.set(i, i % 2, 1.0);
        }
        let report_a = regress_skinning(
            &features,
            &targets,
            &RegressionConfig {
                epochs: 50,
                learning_rate: 0.0,
                folds: 2,
                seed: 4,
            },
        )
        .unwrap();
        let report_b = regress_skinning(
            &features,
            &targets,
            &RegressionConfig {
                epochs: 0,
                learning_rate: 0.3,
                folds: 2,
                seed: 4,
            },
        )
        .unwrap();
        assert_eq!(
            report_a.regressor.weight.data(),
            report_b.regressor.weight.data()
        );
        assert_eq!(report_a.fold_mse, report_b.fold_mse);
    }
}
