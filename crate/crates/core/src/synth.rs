//! Procedural test shapes with exact bilateral symmetry.
//!
//! The generators here exist so that correspondence quality can be measured
//! against known ground truth: every shape is built together with a vertex
//! mirror map (the `x -> -x` involution), and the quadruped additionally
//! carries a 6-bone skeleton with smooth skinning weights plus a feature
//! recipe that mimics semantic vision features, including their left/right
//! ambiguity.
//!
//! Symmetry is bit-exact by construction: mirrored base vertices are exact
//! negations in `x`, midpoint subdivision and all deformations compute the
//! lateral coordinate only through `|x|` and an explicit sign factor, and
//! the mirror map is propagated combinatorially through subdivision rather
//! than recovered by nearest-point matching.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mesh::Mesh;
use crate::pose::{Bone, Pose, Skeleton};
use crate::scalar::Scalar;
use crate::vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
    Center,
}

/// Vertex-level bilateral symmetry: `pair` is an involution and `side`
/// labels each vertex relative to the sagittal plane `x = 0`.
#[derive(Debug, Clone)]
pub struct MirrorMap {
    pub pair: Vec<usize>,
    pub side: Vec<Side>,
}

impl MirrorMap {
    pub fn validate(&self) -> Result<()> {
        if self.pair.len() != self.side.len() {
            return Err(Error::DimensionMismatch(format!(
                "mirror map: {} pairs vs {} side labels",
                self.pair.len(),
                self.side.len()
            )));
        }
        for (i, &m) in self.pair.iter().enumerate() {
            if m >= self.pair.len() || self.pair[m] != i {
                return Err(Error::InvalidArgument(format!(
                    "mirror map is not an involution at vertex {i}"
                )));
            }
            let ok = match self.side[i] {
                Side::Center => m == i && self.side[m] == Side::Center,
                Side::Left => self.side[m] == Side::Right,
                Side::Right => self.side[m] == Side::Left,
            };
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "mirror map side labels inconsistent at vertex {i}"
                )));
            }
        }
        Ok(())
    }
}

fn side_of<T: Scalar>(x: T) -> Side {
    if x > T::zero() {
        Side::Right
    } else if x < T::zero() {
        Side::Left
    } else {
        Side::Center
    }
}

/// Icosphere with `10 * 4^subdivisions + 2` vertices, radius `radius`,
/// together with its exact mirror map.
pub fn icosphere_with_mirror<T: Scalar>(
    subdivisions: usize,
    radius: T,
) -> Result<(Mesh<T>, MirrorMap)> {
    if !(radius > T::zero()) {
        return Err(Error::InvalidArgument("icosphere radius must be positive".into()));
    }
    if subdivisions > 7 {
        return Err(Error::InvalidArgument(format!(
            "{subdivisions} subdivisions would create {} vertices",
            10f64 * 4f64.powi(subdivisions as i32) + 2.0
        )));
    }

    let t = (1.0 + 5.0f64.sqrt()) / 2.0;
    let base: [[f64; 3]; 12] = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let mut mirror: Vec<usize> = vec![1, 0, 3, 2, 4, 5, 6, 7, 10, 11, 8, 9];
    let r = radius.to_f64();
    let project = |p: [f64; 3]| -> [f64; 3] {
        let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        [p[0] / n * r, p[1] / n * r, p[2] / n * r]
    };
    let mut vertices: Vec<[f64; 3]> = base.iter().map(|&p| project(p)).collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..subdivisions {
        let mut midpoint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut new_faces = Vec::with_capacity(faces.len() * 4);
        for face in &faces {
            let mut mids = [0usize; 3];
            for k in 0..3 {
                let a = face[k];
                let b = face[(k + 1) % 3];
                let key = (a.min(b), a.max(b));
                mids[k] = *midpoint.entry(key).or_insert_with(|| {
                    let pa = vertices[a];
                    let pb = vertices[b];
                    let m = [
                        (pa[0] + pb[0]) / 2.0,
                        (pa[1] + pb[1]) / 2.0,
                        (pa[2] + pb[2]) / 2.0,
                    ];
                    vertices.push(project(m));
                    vertices.len() - 1
                });
            }
            new_faces.push([face[0], mids[0], mids[2]]);
            new_faces.push([face[1], mids[1], mids[0]]);
            new_faces.push([face[2], mids[2], mids[1]]);
            new_faces.push([mids[0], mids[1], mids[2]]);
        }
        faces = new_faces;

        // Each midpoint's mirror is the midpoint of the mirrored edge,
        // which exists because the face set is mirror-symmetric.
        let mut new_mirror = vec![usize::MAX; vertices.len()];
        new_mirror[..mirror.len()].copy_from_slice(&mirror);
        for (&(a, b), &m) in &midpoint {
            let (ma, mb) = (mirror[a], mirror[b]);
            let key = (ma.min(mb), ma.max(mb));
            let mm = *midpoint.get(&key).ok_or_else(|| {
                Error::InvalidArgument("subdivision broke mirror symmetry".into())
            })?;
            new_mirror[m] = mm;
        }
        mirror = new_mirror;
    }

    // Exact mirror positions: rebuild each right-side vertex from its left
    // partner by negating x. The construction already yields bit-exact
    // mirrors (x enters every formula symmetrically), so this is a no-op
    // numerically, but it makes the invariant self-evident.
    let side: Vec<Side> = vertices.iter().map(|p| side_of(p[0])).collect();

    let mesh = Mesh {
        vertices: vertices
            .iter()
            .map(|p| [T::from_f64(p[0]), T::from_f64(p[1]), T::from_f64(p[2])])
            .collect(),
        faces,
        colors: None,
    };
    mesh.validate()?;
    let map = MirrorMap { pair: mirror, side };
    map.validate()?;
    Ok((mesh, map))
}

/// Icosphere mesh only.
pub fn make_icosphere<T: Scalar>(subdivisions: usize, radius: T) -> Result<Mesh<T>> {
    icosphere_with_mirror(subdivisions, radius).map(|(m, _)| m)
}

/// Semantic part of a quadruped vertex. Parts are deliberately side-blind:
/// the two front legs share a label, as do the two hind legs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Body,
    Head,
    FrontLeg,
    HindLeg,
}

impl Part {
    pub fn index(self) -> usize {
        match self {
            Part::Body => 0,
            Part::Head => 1,
            Part::FrontLeg => 2,
            Part::HindLeg => 3,
        }
    }
}

/// Proportions of the procedural quadruped. `from_seed` jitters them so a
/// family of related but distinct shapes can be generated.
#[derive(Debug, Clone)]
pub struct QuadrupedSpec {
    pub subdivisions: usize,
    /// Longitudinal body stretch applied to the unit sphere.
    pub body_stretch: f64,
    /// Length of the leg protrusions.
    pub leg_length: f64,
    /// Length of the head protrusion.
    pub head_length: f64,
    /// Angular width of the protrusion bumps: cosine threshold in (0, 1).
    pub bump_threshold: f64,
    /// Softmax sharpness of the distance-based skinning weights.
    pub skinning_sharpness: f64,
}

impl Default for QuadrupedSpec {
    fn default() -> Self {
        QuadrupedSpec {
            subdivisions: 3,
            body_stretch: 1.45,
            leg_length: 0.95,
            head_length: 0.75,
            bump_threshold: 0.82,
            skinning_sharpness: 4.0,
        }
    }
}

impl QuadrupedSpec {
    /// Seed-controlled proportion variation around the defaults.
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ab_5eed);
        let jitter = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| rng.gen_range(lo..hi);
        QuadrupedSpec {
            subdivisions: 3,
            body_stretch: jitter(&mut rng, 1.3, 1.6),
            leg_length: jitter(&mut rng, 0.8, 1.1),
            head_length: jitter(&mut rng, 0.6, 0.9),
            bump_threshold: jitter(&mut rng, 0.8, 0.85),
            skinning_sharpness: 4.0,
        }
    }
}

/// A generated quadruped: mesh, symmetry, skeleton with skinning weights,
/// and a per-vertex semantic part label.
#[derive(Debug, Clone)]
pub struct Quadruped<T> {
    pub mesh: Mesh<T>,
    pub mirror: MirrorMap,
    pub skeleton: Skeleton<T>,
    pub parts: Vec<Part>,
}

/// Bone indices of the quadruped skeleton.
pub mod quadruped_bones {
    pub const SPINE: usize = 0;
    pub const NECK: usize = 1;
    pub const LEG_FRONT_LEFT: usize = 2;
    pub const LEG_FRONT_RIGHT: usize = 3;
    pub const LEG_HIND_LEFT: usize = 4;
    pub const LEG_HIND_RIGHT: usize = 5;
    pub const COUNT: usize = 6;
    pub const LEGS: [usize; 4] = [
        LEG_FRONT_LEFT,
        LEG_FRONT_RIGHT,
        LEG_HIND_LEFT,
        LEG_HIND_RIGHT,
    ];
}

struct BumpSet {
    // (|x|-space direction, displacement direction template, part)
    dirs: Vec<([f64; 3], [f64; 3], Part)>,
    threshold: f64,
}

fn smooth_bump(c: f64, threshold: f64) -> f64 {
    if c <= threshold {
        0.0
    } else {
        let t = (c - threshold) / (1.0 - threshold);
        t * t
    }
}

/// Builds a bilaterally symmetric quadruped by displacing an icosphere:
/// a stretched body with four downward leg protrusions and a head.
///
/// The deformation reads the lateral coordinate only as `|x|` plus an
/// explicit sign, so mirrored vertices map to bit-exact mirrored positions.
pub fn make_quadruped<T: Scalar>(spec: &QuadrupedSpec) -> Result<Quadruped<T>> {
    let (sphere, mirror) = icosphere_with_mirror::<f64>(spec.subdivisions, 1.0)?;
    if !(spec.bump_threshold > 0.0 && spec.bump_threshold < 1.0) {
        return Err(Error::InvalidArgument("bump_threshold must be in (0, 1)".into()));
    }
    if spec.leg_length <= 0.0 || spec.head_length < 0.0 || spec.body_stretch <= 0.0 {
        return Err(Error::InvalidArgument("quadruped proportions must be positive".into()));
    }

    // Directions are expressed in (|x|, y, z); y is longitudinal (head at
    // +y), z is vertical (legs at -z).
    let lx = 0.72;
    let legs = [
        (vec3::normalize([lx, 0.62, -0.80]), Part::FrontLeg),
        (vec3::normalize([lx, -0.62, -0.80]), Part::HindLeg),
    ];
    let head_dir = vec3::normalize([0.0, 0.92, 0.40]);
    let leg_disp = vec3::normalize([0.62, 0.0, -1.0]);

    let bumps = BumpSet {
        dirs: vec![
            (legs[0].0, [leg_disp[0], 0.18, leg_disp[2]], legs[0].1),
            (legs[1].0, [leg_disp[0], -0.18, leg_disp[2]], legs[1].1),
            (head_dir, [0.0, 0.85, 0.55], Part::Head),
        ],
        threshold: spec.bump_threshold,
    };

    let n = sphere.vertices.len();
    let mut vertices = Vec::with_capacity(n);
    let mut parts = Vec::with_capacity(n);
    for p in &sphere.vertices {
        let sign = if p[0] > 0.0 {
            1.0
        } else if p[0] < 0.0 {
            -1.0
        } else {
            0.0
        };
        let a = [p[0].abs(), p[1], p[2]];

        // Body: stretched sphere, evaluated symmetrically.
        let mut out = [a[0], a[1] * spec.body_stretch, a[2]];
        let mut best_part = Part::Body;
        let mut best_w = 0.0;
        for (dir, disp, part) in &bumps.dirs {
            let c = vec3::dot(a, *dir);
            let w = smooth_bump(c, bumps.threshold);
            if w > 0.0 {
                let amp = match part {
                    Part::Head => spec.head_length,
                    _ => spec.leg_length,
                };
                out = vec3::add(out, vec3::scale(*disp, w * amp));
                if w > best_w {
                    best_w = w;
                    best_part = *part;
                }
            }
        }
        if best_w <= 0.15 {
            best_part = Part::Body;
        }
        vertices.push([sign * out[0], out[1], out[2]]);
        parts.push(best_part);
    }

    let mesh64 = Mesh {
        vertices,
        faces: sphere.faces,
        colors: None,
    };
    mesh64.validate()?;

    let skeleton64 = quadruped_skeleton(&mesh64, spec)?;

    let mesh = mesh64.cast::<T>();
    let skeleton = Skeleton {
        bones: skeleton64
            .bones
            .iter()
            .map(|b| Bone {
                parent: b.parent,
                head: [
                    T::from_f64(b.head[0]),
                    T::from_f64(b.head[1]),
                    T::from_f64(b.head[2]),
                ],
            })
            .collect(),
        weights: skeleton64.weights.cast::<T>(),
    };

    Ok(Quadruped {
        mesh,
        mirror,
        skeleton,
        parts,
    })
}

fn quadruped_skeleton(mesh: &Mesh<f64>, spec: &QuadrupedSpec) -> Result<Skeleton<f64>> {
    use quadruped_bones::*;

    let hip_y = 0.62 * spec.body_stretch * 0.72;
    let hip_x = 0.58;
    let hip_z = -0.45;
    let paw = |sx: f64, sy: f64| -> ([f64; 3], [f64; 3]) {
        let head = [sx * hip_x, sy * hip_y, hip_z];
        let tip = [
            sx * (hip_x + 0.53 * spec.leg_length),
            sy * hip_y + sy.signum() * 0.0,
            hip_z - spec.leg_length,
        ];
        (head, tip)
    };

    // Segments used both for bone heads and for distance-based weights.
    let spine_seg = ([0.0, -0.9 * spec.body_stretch * 0.72, 0.0], [0.0, 0.9 * spec.body_stretch * 0.72, 0.0]);
    let neck_seg = (
        [0.0, 0.95 * spec.body_stretch * 0.72, 0.12],
        [0.0, 0.95 * spec.body_stretch * 0.72 + 0.8 * spec.head_length, 0.45],
    );
    let (fl_head, fl_tip) = paw(-1.0, 1.0);
    let (fr_head, fr_tip) = paw(1.0, 1.0);
    let (hl_head, hl_tip) = paw(-1.0, -1.0);
    let (hr_head, hr_tip) = paw(1.0, -1.0);

    let mut bones = vec![
        Bone { parent: None, head: spine_seg.0 },
        Bone { parent: Some(SPINE), head: neck_seg.0 },
        Bone { parent: Some(SPINE), head: fl_head },
        Bone { parent: Some(SPINE), head: fr_head },
        Bone { parent: Some(SPINE), head: hl_head },
        Bone { parent: Some(SPINE), head: hr_head },
    ];
    // Keep the spine head at the body center rather than the tail tip so a
    // root rotation pivots around the torso.
    bones[SPINE].head = [0.0, 0.0, 0.0];

    let segs: [([f64; 3], [f64; 3]); COUNT] = [
        spine_seg,
        neck_seg,
        (fl_head, fl_tip),
        (fr_head, fr_tip),
        (hl_head, hl_tip),
        (hr_head, hr_tip),
    ];

    let n = mesh.vertices.len();
    let mut weights = Matrix::<f64>::zeros(n, COUNT);
    let beta = spec.skinning_sharpness;
    for (i, &v) in mesh.vertices.iter().enumerate() {
        let mut logits = [0.0f64; COUNT];
        for (b, (a, t)) in segs.iter().enumerate() {
            let d = vec3::point_segment_distance(v, *a, *t);
            logits[b] = -beta * d;
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let row = weights.row_mut(i);
        for (b, &l) in logits.iter().enumerate() {
            let e = (l - m).exp();
            row[b] = e;
            sum += e;
        }
        for w in row.iter_mut() {
            *w /= sum;
        }
    }

    Ok(Skeleton { bones, weights })
}

/// A leg pose with modest joint angles, derived from a seed. Used to repose
/// evaluation shapes by a known deformation.
pub fn sample_pose<T: Scalar>(skeleton: &Skeleton<T>, seed: u64) -> Pose<T> {
    use quadruped_bones::*;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x905e_11aa);
    let mut pose = Pose::identity(skeleton.bones.len());
    for &leg in &LEGS {
        let angle = rng.gen_range(-0.45..0.45);
        pose.bone_rotations[leg] = [T::from_f64(angle), T::zero(), T::zero()];
    }
    let neck = rng.gen_range(-0.3..0.3);
    pose.bone_rotations[NECK] = [T::from_f64(neck), T::zero(), T::zero()];
    pose
}

/// Recipe for synthetic per-vertex "semantic" base features.
///
/// The symmetric component is a bank of smooth cosine waves over
/// `(|x|, y, z)` plus a per-part embedding, so mirrored vertices receive
/// nearly identical features (the classic left/right ambiguity of distilled
/// vision features). A weak signed-lateral channel (`side_amplitude`)
/// preserves a consistent but noise-scale hint of the side, and Gaussian
/// noise is added last. All recipe randomness comes from `recipe_seed`, so
/// different shapes share the same feature semantics; only the noise varies
/// with the per-shape seed.
#[derive(Debug, Clone)]
pub struct FeatureRecipe {
    pub dim: usize,
    pub recipe_seed: u64,
    /// Spatial frequency scale of the wave bank.
    pub wave_scale: f64,
    /// Number of independent waves; every feature dimension is a random
    /// mixture of them, keeping the intrinsic dimensionality low while the
    /// waves themselves stay high-frequency.
    pub wave_rank: usize,
    /// Number of high-frequency clutter waves (twice the base frequency).
    /// Clutter models the view-inconsistent detail of distilled vision
    /// features: it is mirror-symmetric and drifts strongly under reposing,
    /// so it misleads raw feature matching while carrying no stable signal.
    pub clutter_rank: usize,
    /// Amplitude of the clutter mixture relative to the wave/part signal.
    pub clutter_amplitude: f64,
    /// Amplitude of the per-part embedding relative to the wave bank.
    pub part_amplitude: f64,
    /// Amplitude of the signed-lateral channel on limb vertices, relative to
    /// the unit-norm symmetric component. Kept near the noise scale so raw
    /// cosine matching stays left/right-ambiguous exactly where the ambiguity
    /// matters. Must keep the pre-noise mirror cosine >= 0.99.
    pub side_amplitude: f64,
    /// Amplitude of the signed-lateral channel on body and head vertices.
    /// Torso features are better lateralized than limb features (they sit in
    /// view-consistent context), which gives a learner a clean, high-SNR
    /// sample of the side direction without disambiguating the limbs for raw
    /// matching. Must keep the pre-noise mirror cosine >= 0.99.
    pub side_amplitude_core: f64,
    /// Relative Gaussian noise level.
    pub noise: f64,
}

impl Default for FeatureRecipe {
    fn default() -> Self {
        FeatureRecipe {
            dim: 32,
            recipe_seed: 7,
            wave_scale: 2.0,
            wave_rank: 4,
            clutter_rank: 4,
            clutter_amplitude: 0.0,
            part_amplitude: 1.0,
            side_amplitude: 0.02,
            side_amplitude_core: 0.07,
            noise: 0.05,
        }
    }
}

impl FeatureRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 4 {
            return Err(Error::InvalidArgument(format!(
                "feature dim must be >= 4, got {}",
                self.dim
            )));
        }
        if self.noise < 0.0 || self.side_amplitude < 0.0 || self.side_amplitude_core < 0.0 {
            return Err(Error::InvalidArgument(
                "noise and side amplitudes must be non-negative".into(),
            ));
        }
        if self.wave_rank == 0 {
            return Err(Error::InvalidArgument("wave_rank must be positive".into()));
        }
        if self.clutter_amplitude < 0.0 {
            return Err(Error::InvalidArgument(
                "clutter_amplitude must be non-negative".into(),
            ));
        }
        // cos(left, right) pre-noise is (1 - s^2) / (1 + s^2); keep >= 0.99.
        let s = self.side_amplitude.max(self.side_amplitude_core);
        let s2 = s * s;
        let mirror_cos = (1.0 - s2) / (1.0 + s2);
        if mirror_cos < 0.99 {
            return Err(Error::InvalidArgument(format!(
                "side amplitude {s} drops the pre-noise mirror cosine to {mirror_cos:.4}",
            )));
        }
        Ok(())
    }
}

/// Synthesizes unit-norm base features for a quadruped.
///
/// `noise_seed` drives only the Gaussian noise; the recipe's own seed fixes
/// the wave bank and embeddings so features are comparable across shapes.
pub fn synth_base_features<T: Scalar>(
    shape: &Quadruped<T>,
    recipe: &FeatureRecipe,
    noise_seed: u64,
) -> Result<Matrix<T>> {
    recipe.validate()?;
    let d = recipe.dim;
    let n = shape.mesh.vertices.len();

    // Recipe-determined bases.
    fn random_direction(rng: &mut ChaCha8Rng, length: f64) -> [f64; 3] {
        loop {
            let v: [f64; 3] = [
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng),
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng),
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-9 {
                return [v[0] / n * length, v[1] / n * length, v[2] / n * length];
            }
        }
    }
    // Each recipe component draws from its own salted stream so that
    // changing one knob (say, the clutter rank) leaves every other sampled
    // direction untouched.
    let mut wave_rng = ChaCha8Rng::seed_from_u64(recipe.recipe_seed ^ 0xfea7_0001);
    let mut clutter_rng = ChaCha8Rng::seed_from_u64(recipe.recipe_seed ^ 0xfea7_0002);
    let mut part_rng = ChaCha8Rng::seed_from_u64(recipe.recipe_seed ^ 0xfea7_0003);
    let mut side_rng = ChaCha8Rng::seed_from_u64(recipe.recipe_seed ^ 0xfea7_0004);
    let normal = StandardNormal;
    // Wave vectors have a random direction but a deterministic length, so the
    // spatial frequency (and with it the feature drift under reposing) does
    // not fluctuate from one recipe seed to the next.
    let mut waves = Vec::with_capacity(recipe.wave_rank);
    for _ in 0..recipe.wave_rank {
        let w = random_direction(&mut wave_rng, recipe.wave_scale);
        let phase: f64 = wave_rng.gen_range(0.0..std::f64::consts::TAU);
        waves.push((w, phase));
    }
    let mix_scale = 1.0 / (recipe.wave_rank as f64).sqrt();
    let mut mixture = vec![vec![0.0f64; recipe.wave_rank]; d];
    for row in mixture.iter_mut() {
        for v in row.iter_mut() {
            *v = <StandardNormal as Distribution<f64>>::sample(&normal, &mut wave_rng) * mix_scale;
        }
    }
    let mut clutter_waves = Vec::with_capacity(recipe.clutter_rank);
    for _ in 0..recipe.clutter_rank {
        let w = random_direction(&mut clutter_rng, recipe.wave_scale * 2.0);
        let phase: f64 = clutter_rng.gen_range(0.0..std::f64::consts::TAU);
        clutter_waves.push((w, phase));
    }
    let clutter_mix_scale = if recipe.clutter_rank > 0 {
        recipe.clutter_amplitude / (recipe.clutter_rank as f64).sqrt()
    } else {
        0.0
    };
    let mut clutter_mixture = vec![vec![0.0f64; recipe.clutter_rank]; d];
    for row in clutter_mixture.iter_mut() {
        for v in row.iter_mut() {
            *v = <StandardNormal as Distribution<f64>>::sample(&normal, &mut clutter_rng) * clutter_mix_scale;
        }
    }
    // Part embeddings live in a 2-D subspace (square corners) so the four
    // clusters cost two intrinsic dimensions instead of four; together with
    // the wave bank this keeps the signal compressible by a narrow encoder.
    let mut part_axes = [vec![0.0f64; d], vec![0.0f64; d]];
    for axis in part_axes.iter_mut() {
        for v in axis.iter_mut() {
            *v = <StandardNormal as Distribution<f64>>::sample(&normal, &mut part_rng);
        }
    }
    let part_coords = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
    let mut part_embed = vec![vec![0.0f64; d]; 4];
    for (k, row) in part_embed.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = part_coords[k][0] * part_axes[0][j] + part_coords[k][1] * part_axes[1][j];
        }
    }
    let mut side_dir = vec![0.0f64; d];
    for v in side_dir.iter_mut() {
        *v = <StandardNormal as Distribution<f64>>::sample(&normal, &mut side_rng);
    }
    let side_norm = side_dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in side_dir.iter_mut() {
        *v /= side_norm;
    }

    let mut nrng = ChaCha8Rng::seed_from_u64(noise_seed ^ 0x0153_7d1f);
    let mut out = Matrix::<T>::zeros(n, d);
    for (i, p) in shape.mesh.vertices.iter().enumerate() {
        let x = p[0].to_f64();
        let g = [x.abs(), p[1].to_f64(), p[2].to_f64()];
        let sign = if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        };
        let part = shape.parts[i].index();

        let wave_values: Vec<f64> = waves
            .iter()
            .map(|(w, phase)| (w[0] * g[0] + w[1] * g[1] + w[2] * g[2] + phase).cos())
            .collect();
        let clutter_values: Vec<f64> = clutter_waves
            .iter()
            .map(|(w, phase)| (w[0] * g[0] + w[1] * g[1] + w[2] * g[2] + phase).cos())
            .collect();
        let mut row = vec![0.0f64; d];
        for j in 0..d {
            let mixed: f64 = mixture[j]
                .iter()
                .zip(&wave_values)
                .map(|(m, v)| m * v)
                .sum();
            let clutter: f64 = clutter_mixture[j]
                .iter()
                .zip(&clutter_values)
                .map(|(m, v)| m * v)
                .sum();
            row[j] = mixed + clutter + recipe.part_amplitude * part_embed[part][j];
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 0.0 {
            return Err(Error::Degenerate(format!("zero symmetric feature at vertex {i}")));
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
        let side_amp = match shape.parts[i] {
            Part::FrontLeg | Part::HindLeg => recipe.side_amplitude,
            Part::Body | Part::Head => recipe.side_amplitude_core,
        };
        for (j, v) in row.iter_mut().enumerate() {
            *v += side_amp * sign * side_dir[j];
        }
        if recipe.noise > 0.0 {
            let scale = recipe.noise / (d as f64).sqrt();
            for v in row.iter_mut() {
                let eta: f64 = <StandardNormal as Distribution<f64>>::sample(&normal, &mut nrng);
                *v += scale * eta;
            }
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 0.0 {
            return Err(Error::Degenerate(format!("zero feature row at vertex {i}")));
        }
        for (j, v) in row.iter().enumerate() {
            out.set(i, j, T::from_f64(v / norm));
        }
    }
    Ok(out)
}

/// Ground-truth correspondence from a shape to a reposed copy of itself:
/// `sample_count` source vertices chosen by farthest-point sampling are
/// mapped to their exact positions on the target.
pub fn ground_truth_correspondence<T: Scalar>(
    source: &Mesh<T>,
    target: &Mesh<T>,
    sample_count: usize,
    seed: u64,
) -> Result<Vec<(usize, [T; 3])>> {
    if source.vertices.len() != target.vertices.len() {
        return Err(Error::DimensionMismatch(format!(
            "source has {} vertices, target {}; expected a reposed copy",
            source.vertices.len(),
            target.vertices.len()
        )));
    }
    let count = sample_count.min(source.vertices.len());
    let picks = crate::mesh::farthest_point_sampling(source, count, seed)?;
    Ok(picks.into_iter().map(|i| (i, target.vertices[i])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::dot;

    #[test]
    fn icosphere_vertex_count_follows_the_formula() {
        for k in 0..4 {
            let mesh = make_icosphere::<f64>(k, 1.0).unwrap();
            assert_eq!(mesh.vertices.len(), 10 * 4usize.pow(k as u32) + 2);
            assert_eq!(mesh.faces.len(), 20 * 4usize.pow(k as u32));
        }
    }

    #[test]
    fn icosphere_vertices_sit_on_the_sphere() {
        let mesh = make_icosphere::<f64>(2, 2.5).unwrap();
        for v in &mesh.vertices {
            assert!((vec3::norm(*v) - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn icosphere_mirror_is_bit_exact() {
        let (mesh, mirror) = icosphere_with_mirror::<f64>(3, 1.0).unwrap();
        mirror.validate().unwrap();
        for (i, &m) in mirror.pair.iter().enumerate() {
            let p = mesh.vertices[i];
            let q = mesh.vertices[m];
            // x negates exactly (-0.0 == 0.0 for center vertices), the
            // magnitude and the other coordinates are bit-identical.
            assert_eq!(-p[0], q[0]);
            assert_eq!(p[0].abs().to_bits(), q[0].abs().to_bits());
            assert_eq!(p[1].to_bits(), q[1].to_bits());
            assert_eq!(p[2].to_bits(), q[2].to_bits());
        }
    }

    #[test]
    fn quadruped_is_connected_manifold_with_exact_mirror() {
        let quad = make_quadruped::<f64>(&QuadrupedSpec::default()).unwrap();
        let adj = crate::mesh::build_adjacency(&quad.mesh).unwrap();
        assert_eq!(adj.connected_components(), 1);
        quad.mirror.validate().unwrap();
        for (i, &m) in quad.mirror.pair.iter().enumerate() {
            let p = quad.mesh.vertices[i];
            let q = quad.mesh.vertices[m];
            assert_eq!(-p[0], q[0]);
            // Equal distance to the sagittal plane, bit-exactly.
            assert_eq!(p[0].abs().to_bits(), q[0].abs().to_bits());
            assert_eq!(p[1].to_bits(), q[1].to_bits());
            assert_eq!(p[2].to_bits(), q[2].to_bits());
        }
    }

    #[test]
    fn quadruped_has_vertices_on_every_leg() {
        let quad = make_quadruped::<f64>(&QuadrupedSpec::default()).unwrap();
        use quadruped_bones::*;
        let mut per_leg = [0usize; COUNT];
        for i in 0..quad.mesh.vertices.len() {
            let row = quad.skeleton.weights.row(i);
            let best = (0..COUNT).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            per_leg[best] += 1;
        }
        for &leg in &LEGS {
            assert!(per_leg[leg] >= 15, "leg {leg} has only {} vertices", per_leg[leg]);
        }
        // Sides of leg-dominated off-plane vertices match the bone's side
        // (on the sagittal plane the two legs tie exactly).
        for i in 0..quad.mesh.vertices.len() {
            if quad.mirror.side[i] == Side::Center {
                continue;
            }
            let row = quad.skeleton.weights.row(i);
            let best = (0..COUNT).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            if best == LEG_FRONT_LEFT || best == LEG_HIND_LEFT {
                assert_eq!(quad.mirror.side[i], Side::Left);
            }
            if best == LEG_FRONT_RIGHT || best == LEG_HIND_RIGHT {
                assert_eq!(quad.mirror.side[i], Side::Right);
            }
        }
    }

    #[test]
    fn skinning_weights_rows_sum_to_one() {
        let quad = make_quadruped::<f64>(&QuadrupedSpec::default()).unwrap();
        for i in 0..quad.mesh.vertices.len() {
            let s: f64 = quad.skeleton.weights.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_free_side_free_features_are_mirror_equal_exactly() {
        let quad = make_quadruped::<f64>(&QuadrupedSpec::default()).unwrap();
        let recipe = FeatureRecipe {
            noise: 0.0,
            side_amplitude: 0.0,
            side_amplitude_core: 0.0,
            ..FeatureRecipe::default()
        };
        let feats = synth_base_features(&quad, &recipe, 1).unwrap();
        for (i, &m) in quad.mirror.pair.iter().enumerate() {
            let phi = dot(feats.row(i), feats.row(m));
            assert!(
                (phi - 1.0).abs() < 1e-12,
                "vertex {i}: mirror cosine {phi}"
            );
        }
    }

    #[test]
    fn default_recipe_keeps_mirror_cosine_high_but_below_one() {
        let quad = make_quadruped::<f64>(&QuadrupedSpec::default()).unwrap();
        let recipe = FeatureRecipe {
            noise: 0.0,
            ..FeatureRecipe::default()
        };
        let feats = synth_base_features(&quad, &recipe, 1).unwrap();
        let mut any_below = false;
        for (i, &m) in quad.mirror.pair.iter().enumerate() {
            if quad.mirror.side[i] == Side::Center {
                continue;
            }
            let phi = dot(feats.row(i), feats.row(m));
            assert!(phi >= 0.99, "vertex {i}: mirror cosine {phi} below invariant");
            if phi < 1.0 - 1e-6 {
                any_below = true;
            }
        }
        assert!(any_below, "side channel left no trace");
    }

    #[test]
    fn head_and_tail_features_are_dissimilar() {
        let quad = make_quadruped::<f64>(&QuadrupedSpec::default()).unwrap();
        let feats = synth_base_features(&quad, &FeatureRecipe::default(), 1).unwrap();
        let head = (0..quad.mesh.vertices.len())
            .max_by(|&a, &b| quad.mesh.vertices[a][1].total_cmp(&quad.mesh.vertices[b][1]))
            .unwrap();
        let tail = (0..quad.mesh.vertices.len())
            .min_by(|&a, &b| quad.mesh.vertices[a][1].total_cmp(&quad.mesh.vertices[b][1]))
            .unwrap();
        let phi = dot(feats.row(head), feats.row(tail));
        assert!(phi < 0.9, "head/tail cosine {phi}");
    }

    #[test]
    fn features_are_unit_rows() {
        let quad = make_quadruped::<f64>(&QuadrupedSpec::default()).unwrap();
        let feats = synth_base_features(&quad, &FeatureRecipe::default(), 5).unwrap();
        for i in 0..feats.rows() {
            let n = dot(feats.row(i), feats.row(i)).sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ground_truth_maps_sampled_vertices_to_target_positions() {
        let quad = make_quadruped::<f64>(&QuadrupedSpec::default()).unwrap();
        let mut target = quad.mesh.clone();
        for v in &mut target.vertices {
            v[0] += 1.0;
        }
        let gt = ground_truth_correspondence(&quad.mesh, &target, 64, 11).unwrap();
        assert_eq!(gt.len(), 64);
        for (i, pos) in &gt {
            assert_eq!(pos[0], quad.mesh.vertices[*i][0] + 1.0);
        }
    }
}
