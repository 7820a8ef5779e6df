//! Training loop for the surface-aware embedding model.
//!
//! The trainer pairs meshes with per-vertex base feature rows and fits the
//! contrastive autoencoder so that embedding-space angles reproduce rescaled
//! on-surface distances. Every iteration samples one training mesh uniformly,
//! draws fresh distance anchors by farthest-point sampling, evaluates the
//! configured objective over a (capped) full-mesh batch, and applies one
//! decoupled-weight-decay Adam step followed by an EMA update. At a fixed
//! interval the EMA weights are scored on the validation meshes — forward
//! only, never contributing gradients — and snapshotted when the score
//! improves. The best snapshot is what [`embed`] uses.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geodesics::{rescale_distances, GeodesicField, HeatSolver};
use crate::losses::{self, LossWeights};
use crate::matrix::Matrix;
use crate::mesh::{farthest_point_sampling, Mesh};
use crate::net::{load_checkpoint, Autoencoder, Tape, TrainState, ValueId};
use crate::scalar::Scalar;

/// Which objective drives the optimization. [`LossVariant::parse`] accepts
/// the same tokens as the command-line `--loss` flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    /// Weighted sum of the contrastive distance term and the cosine
    /// reconstruction term — the default objective (`full`).
    Full,
    /// Contrastive distance term alone (`only-lc`).
    ContrastiveOnly,
    /// Cosine reconstruction term alone (`only-lr`).
    ReconstructionOnly,
    /// Relative squared fit of embedding distances to raw on-surface
    /// distances (`rgl`). Embeddings stay unnormalized so their magnitudes
    /// can carry absolute distance.
    RelativeDistanceFit,
    /// Plain squared fit of embedding distances to raw on-surface distances
    /// (`ngl`). Embeddings stay unnormalized.
    PlainDistanceFit,
    /// Neighborhood-shape objective (`gsl`): the vector of embedding
    /// distances from each point to its nearest embedding neighbors should
    /// be parallel to the matching on-surface distance vector.
    NeighborhoodShape,
}

impl LossVariant {
    pub const ALL: [LossVariant; 6] = [
        LossVariant::Full,
        LossVariant::ContrastiveOnly,
        LossVariant::ReconstructionOnly,
        LossVariant::RelativeDistanceFit,
        LossVariant::PlainDistanceFit,
        LossVariant::NeighborhoodShape,
    ];

    /// Command-line / config-file token.
    pub fn token(self) -> &'static str {
        match self {
            LossVariant::Full => "full",
            LossVariant::ContrastiveOnly => "only-lc",
            LossVariant::ReconstructionOnly => "only-lr",
            LossVariant::RelativeDistanceFit => "rgl",
            LossVariant::PlainDistanceFit => "ngl",
            LossVariant::NeighborhoodShape => "gsl",
        }
    }

    pub fn parse(token: &str) -> Result<LossVariant> {
        LossVariant::ALL
            .into_iter()
            .find(|v| v.token() == token)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown loss variant `{token}`; expected full, only-lc, only-lr, rgl, ngl or gsl"
                ))
            })
    }

    /// Whether encoder outputs are projected onto the unit sphere. The
    /// distance-fit objectives need unnormalized embeddings because their
    /// target is an absolute distance, not an angle.
    pub fn normalized_embedding(self) -> bool {
        !matches!(
            self,
            LossVariant::RelativeDistanceFit | LossVariant::PlainDistanceFit
        )
    }

    /// Whether the objective consumes per-iteration anchor distance fields.
    fn uses_anchors(self) -> bool {
        matches!(
            self,
            LossVariant::Full
                | LossVariant::ContrastiveOnly
                | LossVariant::RelativeDistanceFit
                | LossVariant::PlainDistanceFit
        )
    }

    /// Whether the objective needs the full vertex-to-vertex distance matrix.
    fn uses_all_pairs(self) -> bool {
        matches!(self, LossVariant::NeighborhoodShape)
    }
}

/// Hyperparameters for [`train`]. The defaults are the production settings;
/// [`load_train_config`] reads overrides from a `key=value` text file.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Output width of the encoder.
    pub embed_dim: usize,
    /// Distance anchors drawn per iteration.
    pub anchor_count: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Decay of the exponential moving average tracked for validation.
    pub ema_decay: f64,
    /// Term weights for the combined objective.
    pub weights: LossWeights<f64>,
    pub variant: LossVariant,
    pub seed: u64,
    /// The EMA weights are scored on the validation meshes every this many
    /// iterations.
    pub validation_interval: usize,
    /// Seed for the fixed validation anchor sets; independent of `seed` so
    /// reseeding a run keeps the validation measurements comparable.
    pub validation_seed: u64,
    /// Multiplier on the heat-method diffusion time.
    pub time_scale: f64,
    /// Iteration batches are capped at this many vertices; larger meshes are
    /// uniformly subsampled (anchors always kept).
    pub max_batch_vertices: usize,
    /// Neighbors per point for the neighborhood-shape objective.
    pub neighbor_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            embed_dim: 256,
            anchor_count: 100,
            iterations: 50_000,
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            ema_decay: 0.999,
            weights: LossWeights {
                reconstruction: 1.0,
                contrastive: 1.0,
            },
            variant: LossVariant::Full,
            seed: 0,
            validation_interval: 500,
            validation_seed: 4242,
            time_scale: 1.0,
            max_batch_vertices: 20_000,
            neighbor_count: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::InvalidArgument("embed_dim must be positive".into()));
        }
        if self.anchor_count == 0 {
            return Err(Error::InvalidArgument(
                "anchor_count must be positive".into(),
            ));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument(
                "iterations must be positive".into(),
            ));
        }
        if self.validation_interval == 0 {
            return Err(Error::InvalidArgument(
                "validation_interval must be positive".into(),
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be finite and nonnegative, got {}",
                self.learning_rate
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "weight_decay must be finite and nonnegative, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidArgument(format!(
                "ema_decay must lie in [0, 1), got {}",
                self.ema_decay
            )));
        }
        if !(self.time_scale > 0.0) || !self.time_scale.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "time_scale must be positive and finite, got {}",
                self.time_scale
            )));
        }
        if self.max_batch_vertices < self.anchor_count.max(1) {
            return Err(Error::InvalidArgument(format!(
                "max_batch_vertices ({}) must cover the anchor count ({})",
                self.max_batch_vertices, self.anchor_count
            )));
        }
        if self.neighbor_count == 0 {
            return Err(Error::InvalidArgument(
                "neighbor_count must be positive".into(),
            ));
        }
        let w = LossWeights::<f64> {
            reconstruction: self.weights.reconstruction,
            contrastive: self.weights.contrastive,
        };
        match self.variant {
            LossVariant::Full => w.validate()?,
            LossVariant::ContrastiveOnly => {
                if !(w.contrastive > 0.0) {
                    return Err(Error::InvalidArgument(
                        "contrastive_weight must be positive for the only-lc objective".into(),
                    ));
                }
            }
            LossVariant::ReconstructionOnly => {
                if !(w.reconstruction > 0.0) {
                    return Err(Error::InvalidArgument(
                        "reconstruction_weight must be positive for the only-lr objective".into(),
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// The config as `key=value` lines in a fixed order.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "embed_dim={}", self.embed_dim);
        let _ = writeln!(s, "anchor_count={}", self.anchor_count);
        let _ = writeln!(s, "iterations={}", self.iterations);
        let _ = writeln!(s, "learning_rate={}", self.learning_rate);
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        let _ = writeln!(s, "ema_decay={}", self.ema_decay);
        let _ = writeln!(s, "contrastive_weight={}", self.weights.contrastive);
        let _ = writeln!(s, "reconstruction_weight={}", self.weights.reconstruction);
        let _ = writeln!(s, "loss={}", self.variant.token());
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "validation_interval={}", self.validation_interval);
        let _ = writeln!(s, "validation_seed={}", self.validation_seed);
        let _ = writeln!(s, "time_scale={}", self.time_scale);
        let _ = writeln!(s, "max_batch_vertices={}", self.max_batch_vertices);
        let _ = writeln!(s, "neighbor_count={}", self.neighbor_count);
        s
    }

    /// Applies one `key=value` override; also used for command-line
    /// overrides, which take precedence over the config file.
    pub fn apply_key_value(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<F: std::str::FromStr>(key: &str, value: &str) -> Result<F>
        where
            F::Err: std::fmt::Display,
        {
            value.parse::<F>().map_err(|e| {
                Error::InvalidArgument(format!("config key {key}: bad value `{value}`: {e}"))
            })
        }
        match key {
            "embed_dim" => self.embed_dim = num(key, value)?,
            "anchor_count" => self.anchor_count = num(key, value)?,
            "iterations" => self.iterations = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "ema_decay" => self.ema_decay = num(key, value)?,
            "contrastive_weight" => self.weights.contrastive = num(key, value)?,
            "reconstruction_weight" => self.weights.reconstruction = num(key, value)?,
            "loss" => self.variant = LossVariant::parse(value)?,
            "seed" => self.seed = num(key, value)?,
            "validation_interval" => self.validation_interval = num(key, value)?,
            "validation_seed" => self.validation_seed = num(key, value)?,
            "time_scale" => self.time_scale = num(key, value)?,
            "max_batch_vertices" => self.max_batch_vertices = num(key, value)?,
            "neighbor_count" => self.neighbor_count = num(key, value)?,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown config key `{other}`"
                )));
            }
        }
        Ok(())
    }
}

/// Parses a `key=value` config text (blank lines and `#` comments allowed).
/// Missing keys keep their defaults; `origin` labels error messages.
pub fn parse_train_config(text: &str, origin: &Path) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    for (index, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::parse(
                origin,
                format!("line {}: missing `=` in `{line}`", index + 1),
            )
        })?;
        config
            .apply_key_value(key.trim(), value.trim())
            .map_err(|e| Error::parse(origin, format!("line {}: {e}", index + 1)))?;
    }
    config.validate()?;
    Ok(config)
}

pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_train_config(&text, path)
}

pub fn save_train_config(config: &TrainConfig, path: &Path) -> Result<()> {
    std::fs::write(path, config.to_key_values()).map_err(|e| Error::io(path, e))
}

/// One mesh paired with its per-vertex base feature rows.
#[derive(Debug, Clone)]
pub struct TrainingMesh<T> {
    pub name: String,
    pub mesh: Mesh<T>,
    pub features: Matrix<T>,
}

/// Per-mesh state reused across iterations: the factored heat-method solver
/// (built once per mesh), the validated feature rows, and — for the
/// neighborhood-shape objective only — the full vertex-to-vertex distance
/// matrix.
pub struct PreparedMesh<T> {
    pub name: String,
    pub mesh: Mesh<T>,
    pub features: Matrix<T>,
    pub solver: HeatSolver,
    /// Column `j` holds on-surface distances from vertex `j` to every vertex.
    pub all_pairs: Option<Matrix<T>>,
}

impl<T: Scalar> PreparedMesh<T> {
    pub fn new(source: &TrainingMesh<T>, config: &TrainConfig) -> Result<Self> {
        source.mesh.validate()?;
        let n = source.mesh.vertices.len();
        if source.features.rows() != n {
            return Err(Error::DimensionMismatch(format!(
                "mesh {}: {} feature rows for {} vertices",
                source.name,
                source.features.rows(),
                n
            )));
        }
        for r in 0..n {
            let norm: f64 = source
                .features
                .row(r)
                .iter()
                .map(|&v| {
                    let x = Scalar::to_f64(v);
                    x * x
                })
                .sum::<f64>()
                .sqrt();
            if (norm - 1.0).abs() > 1e-3 {
                return Err(Error::InvalidArgument(format!(
                    "mesh {}: feature row {r} has norm {norm}; base rows must be unit",
                    source.name
                )));
            }
        }
        let solver = HeatSolver::new(&source.mesh, config.time_scale)?;
        let all_pairs = if config.variant.uses_all_pairs() {
            let every: Vec<usize> = (0..n).collect();
            Some(solver.field::<T>(&every)?.distances)
        } else {
            None
        };
        Ok(PreparedMesh {
            name: source.name.clone(),
            mesh: source.mesh.clone(),
            features: source.features.clone(),
            solver,
            all_pairs,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.features.rows()
    }
}

/// Draws `anchor_count` farthest-point anchors — the greedy walk starts at a
/// vertex chosen uniformly from `seed` — and solves their rescaled distance
/// field with the mesh's cached factorization. The returned field keeps both
/// the raw distances (for the distance-fit objectives) and the `[0, 1]`
/// rescaling (for the contrastive objective).
pub fn prepare_sample<T: Scalar>(
    prepared: &PreparedMesh<T>,
    anchor_count: usize,
    seed: u64,
) -> Result<GeodesicField<T>> {
    let anchors = farthest_point_sampling(&prepared.mesh, anchor_count, seed)?;
    let field = prepared.solver.field::<T>(&anchors)?;
    rescale_distances(&field)
}

/// One row of the training log. `validation` is populated on iterations
/// where the EMA weights were scored on the validation meshes.
#[derive(Debug, Clone, Copy)]
pub struct IterationRecord {
    pub iteration: usize,
    pub total: f64,
    pub contrastive: Option<f64>,
    pub reconstruction: Option<f64>,
    pub validation: Option<f64>,
}

/// Outcome of [`train`]: final optimization state (including the best EMA
/// snapshot), the full per-iteration log, the snapshot history, and a
/// per-mesh count of backward passes.
pub struct TrainRun<T> {
    pub state: TrainState<T>,
    pub log: Vec<IterationRecord>,
    /// `(iteration, validation loss)` for every EMA snapshot; losses are
    /// strictly decreasing because snapshots require strict improvement.
    pub snapshots: Vec<(usize, f64)>,
    /// Backward passes per mesh name. Validation meshes appear with count
    /// zero: they are scored forward-only and never contribute gradients.
    pub backward_passes: BTreeMap<String, usize>,
}

impl<T: Scalar> TrainRun<T> {
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        crate::net::save_checkpoint(&self.state, path)
    }
}

/// Writes the per-iteration log as CSV with columns
/// `iteration,total,contrastive,reconstruction,validation`; components a
/// variant does not produce are left empty.
pub fn save_loss_log(log: &[IterationRecord], path: &Path) -> Result<()> {
    let mut text = String::from("iteration,total,contrastive,reconstruction,validation\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in log {
        let _ = writeln!(
            text,
            "{},{},{},{},{}",
            r.iteration,
            r.total,
            opt(r.contrastive),
            opt(r.reconstruction),
            opt(r.validation)
        );
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Fits the embedding model on `training`, scoring EMA weights on
/// `validation` every [`TrainConfig::validation_interval`] iterations.
pub fn train<T: Scalar>(
    training: &[TrainingMesh<T>],
    validation: &[TrainingMesh<T>],
    config: &TrainConfig,
) -> Result<TrainRun<T>> {
    config.validate()?;
    if training.is_empty() {
        return Err(Error::InvalidArgument(
            "need at least one training mesh".into(),
        ));
    }
    let input_dim = training[0].features.cols();
    let mut names = BTreeSet::new();
    for source in training.iter().chain(validation) {
        if source.features.cols() != input_dim {
            return Err(Error::DimensionMismatch(format!(
                "mesh {}: feature dim {} but the first training mesh has {}",
                source.name,
                source.features.cols(),
                input_dim
            )));
        }
        if !names.insert(source.name.clone()) {
            return Err(Error::InvalidArgument(format!(
                "duplicate mesh name `{}`; names must be unique and validation meshes disjoint from training",
                source.name
            )));
        }
    }

    let prepared_train: Vec<PreparedMesh<T>> = training
        .iter()
        .map(|m| PreparedMesh::new(m, config))
        .collect::<Result<_>>()?;
    let prepared_val: Vec<PreparedMesh<T>> = validation
        .iter()
        .map(|m| PreparedMesh::new(m, config))
        .collect::<Result<_>>()?;

    for p in prepared_train.iter().chain(&prepared_val) {
        if config.variant.uses_anchors() && config.anchor_count > p.vertex_count() {
            return Err(Error::InvalidArgument(format!(
                "mesh {}: cannot draw {} anchors from {} vertices",
                p.name,
                config.anchor_count,
                p.vertex_count()
            )));
        }
        if config.variant.uses_all_pairs() {
            let batch = p.vertex_count().min(config.max_batch_vertices);
            if config.neighbor_count + 1 > batch {
                return Err(Error::InvalidArgument(format!(
                    "mesh {}: neighborhood objective needs more than {} batch points for {} neighbors",
                    p.name, batch, config.neighbor_count
                )));
            }
        }
    }

    let mut state = TrainState::fresh(
        input_dim,
        config.embed_dim,
        config.seed,
        T::from_f64(config.learning_rate),
        T::from_f64(config.weight_decay),
        T::from_f64(config.ema_decay),
        config.variant.normalized_embedding(),
    )?;

    // Validation anchors are fixed for the whole run so successive
    // measurements are comparable.
    let val_fields: Vec<Option<GeodesicField<T>>> = prepared_val
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if config.variant.uses_anchors() {
                prepare_sample(p, config.anchor_count, config.validation_seed.wrapping_add(i as u64))
                    .map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;

    let mut log = Vec::with_capacity(config.iterations);
    let mut snapshots = Vec::new();
    let mut backward_passes: BTreeMap<String, usize> = BTreeMap::new();
    for source in training.iter().chain(validation) {
        backward_passes.insert(source.name.clone(), 0);
    }

    for iteration in 0..config.iterations {
        // Independent, reproducible randomness per iteration.
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(iteration as u64 + 1);

        let pick = rng.gen_range(0..prepared_train.len());
        let prepared = &prepared_train[pick];

        let step = run_step(&mut state, prepared, config, &mut rng)?;
        if !step.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss diverged at iteration {iteration} on mesh {}",
                prepared.name
            )));
        }
        *backward_passes.get_mut(&prepared.name).expect("counted") += 1;

        let mut record = IterationRecord {
            iteration,
            total: step.total,
            contrastive: step.contrastive,
            reconstruction: step.reconstruction,
            validation: None,
        };

        if !prepared_val.is_empty() && (iteration + 1) % config.validation_interval == 0 {
            let shadow = shadow_model(&state)?;
            let mut sum = 0.0;
            for (p, f) in prepared_val.iter().zip(&val_fields) {
                sum += evaluate_objective(&shadow, config, p, f.as_ref())?;
            }
            let score = sum / prepared_val.len() as f64;
            if !score.is_finite() {
                return Err(Error::NonFinite(format!(
                    "validation loss diverged at iteration {iteration}"
                )));
            }
            record.validation = Some(score);
            if state.ema.maybe_snapshot(score) {
                snapshots.push((iteration, score));
            }
        }
        log.push(record);
    }

    Ok(TrainRun {
        state,
        log,
        snapshots,
        backward_passes,
    })
}

/// Embeds base feature rows with the best-validation EMA weights (falling
/// back to the current EMA when no validation snapshot was ever taken).
pub fn embed<T: Scalar>(state: &TrainState<T>, base: &Matrix<T>) -> Result<Matrix<T>> {
    let model = state.embedding_model()?;
    model.encode(base, state.normalize_embedding)
}

/// Loads a checkpoint and embeds `base` with its best EMA weights.
pub fn embed_from_checkpoint<T: Scalar>(path: &Path, base: &Matrix<T>) -> Result<Matrix<T>> {
    let state = load_checkpoint::<T>(path)?;
    embed(&state, base)
}

struct StepLoss {
    total: f64,
    contrastive: Option<f64>,
    reconstruction: Option<f64>,
}

/// One optimization step on one mesh: sample anchors, build the objective on
/// the tape, backpropagate, and update parameters and EMA. Parameters the
/// objective never touches (e.g. the decoder under `only-lc`) are left
/// bitwise untouched, moments included.
fn run_step<T: Scalar>(
    state: &mut TrainState<T>,
    prepared: &PreparedMesh<T>,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepLoss> {
    let n = prepared.vertex_count();

    let (field, anchors) = if config.variant.uses_anchors() {
        let anchor_seed: u64 = rng.gen();
        let field = prepare_sample(prepared, config.anchor_count, anchor_seed)?;
        let anchors = field.anchor_indices.clone();
        (Some(field), anchors)
    } else {
        (None, Vec::new())
    };

    let (batch, anchor_rows) = choose_batch(n, config.max_batch_vertices, &anchors, rng);
    let base = prepared.features.select_rows(&batch);

    let mut tape = Tape::new();
    let bound = state.model.bind(&mut tape);
    let input = tape.leaf(base.clone());
    let emb = state
        .model
        .encode_on(&mut tape, &bound, input, state.normalize_embedding)?;

    let w_c = T::from_f64(config.weights.contrastive);
    let w_r = T::from_f64(config.weights.reconstruction);

    let missing = || Error::InvalidArgument("anchor field missing for anchored objective".into());
    let (root, lc_node, lr_node): (ValueId, Option<ValueId>, Option<ValueId>) = match config.variant
    {
        LossVariant::Full => {
            let field = field.as_ref().ok_or_else(missing)?;
            let targets = field.rescaled.as_ref().ok_or_else(missing)?;
            let lc = tape.contrastive_geodesic(emb, &anchor_rows, &targets.select_rows(&batch))?;
            let dec = state.model.decode_on(&mut tape, &bound, emb)?;
            let lr = tape.cosine_reconstruction(dec, &base)?;
            let root = tape.weighted_sum(&[(lc, w_c), (lr, w_r)])?;
            (root, Some(lc), Some(lr))
        }
        LossVariant::ContrastiveOnly => {
            let field = field.as_ref().ok_or_else(missing)?;
            let targets = field.rescaled.as_ref().ok_or_else(missing)?;
            let lc = tape.contrastive_geodesic(emb, &anchor_rows, &targets.select_rows(&batch))?;
            let root = tape.weighted_sum(&[(lc, w_c)])?;
            (root, Some(lc), None)
        }
        LossVariant::ReconstructionOnly => {
            let dec = state.model.decode_on(&mut tape, &bound, emb)?;
            let lr = tape.cosine_reconstruction(dec, &base)?;
            let root = tape.weighted_sum(&[(lr, w_r)])?;
            (root, None, Some(lr))
        }
        LossVariant::RelativeDistanceFit | LossVariant::PlainDistanceFit => {
            let relative = config.variant == LossVariant::RelativeDistanceFit;
            let field = field.as_ref().ok_or_else(missing)?;
            let raw = field.distances.select_rows(&batch);
            let (fit, _excluded) = tape.distance_fit(emb, &anchor_rows, &raw, relative)?;
            (fit, None, None)
        }
        LossVariant::NeighborhoodShape => {
            let neighbors =
                losses::k_nearest_embedding_neighbors(tape.value(emb), config.neighbor_count)?;
            let all_pairs = prepared
                .all_pairs
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("distance matrix missing".into()))?;
            let geo = gather_neighbor_distances(all_pairs, &batch, &neighbors)?;
            let node = tape.neighbor_cosine(emb, &neighbors, &geo)?;
            (node, None, None)
        }
    };

    let scalar_of = |tape: &Tape<T>, id: ValueId| Scalar::to_f64(tape.value(id).get(0, 0));
    let total = scalar_of(&tape, root);
    let contrastive = lc_node.map(|id| scalar_of(&tape, id));
    let reconstruction = lr_node.map(|id| scalar_of(&tape, id));

    let mut grads = tape.backward(root)?;
    let count = state.model.params().len();
    let mut gvec = Vec::with_capacity(count);
    let mut mask = Vec::with_capacity(count);
    for (i, &id) in bound.ids.iter().enumerate() {
        let shape = &state.model.params().values()[i];
        let (rows, cols) = (shape.rows(), shape.cols());
        if grads.get(id).is_some() {
            mask.push(true);
            gvec.push(grads.take_or_zeros(id, rows, cols));
        } else {
            mask.push(false);
            gvec.push(Matrix::zeros(rows, cols));
        }
    }

    let state = &mut *state;
    state
        .optimizer
        .step_masked(state.model.params_mut(), &gvec, &mask)?;
    state.ema.update(state.model.params());

    Ok(StepLoss {
        total,
        contrastive,
        reconstruction,
    })
}

/// Selects the iteration batch: every vertex when the mesh fits the cap,
/// otherwise the anchors plus a uniform sample of the remaining vertices.
/// Returns the selected vertex ids and the batch-row positions of the
/// anchors.
fn choose_batch(
    n: usize,
    cap: usize,
    anchors: &[usize],
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    if n <= cap {
        return ((0..n).collect(), anchors.to_vec());
    }
    let mut in_batch = vec![false; n];
    for &a in anchors {
        in_batch[a] = true;
    }
    let others: Vec<usize> = (0..n).filter(|&i| !in_batch[i]).collect();
    let take = cap.saturating_sub(anchors.len()).min(others.len());
    let mut extra: Vec<usize> = rand::seq::index::sample(rng, others.len(), take)
        .iter()
        .map(|i| others[i])
        .collect();
    extra.sort_unstable();
    let mut batch = anchors.to_vec();
    batch.extend(extra);
    let anchor_rows = (0..anchors.len()).collect();
    (batch, anchor_rows)
}

/// `all_pairs` column `j` holds distances from vertex `j`. Builds the
/// batch-local `B x k` matrix whose `(i, c)` entry is the on-surface
/// distance from batch vertex `i` to its `c`-th embedding neighbor
/// (`neighbors` indexes batch rows).
fn gather_neighbor_distances<T: Scalar>(
    all_pairs: &Matrix<T>,
    batch: &[usize],
    neighbors: &[Vec<usize>],
) -> Result<Matrix<T>> {
    let k = neighbors.first().map(|l| l.len()).unwrap_or(0);
    let mut geo = Matrix::zeros(neighbors.len(), k);
    for (i, list) in neighbors.iter().enumerate() {
        if list.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "point {i}: {} neighbors, expected {k}",
                list.len()
            )));
        }
        for (c, &j) in list.iter().enumerate() {
            geo.set(i, c, all_pairs.get(batch[j], batch[i]));
        }
    }
    Ok(geo)
}

/// The current EMA weights as a standalone model, for validation scoring.
fn shadow_model<T: Scalar>(state: &TrainState<T>) -> Result<Autoencoder<T>> {
    let mut model = state.model.clone();
    model.set_params(state.ema.shadow().to_vec())?;
    Ok(model)
}

/// Forward-only objective on one whole mesh with the given weights. Anchored
/// variants read the precomputed validation field; the neighborhood variant
/// re-selects embedding neighbors at evaluation time.
fn evaluate_objective<T: Scalar>(
    model: &Autoencoder<T>,
    config: &TrainConfig,
    prepared: &PreparedMesh<T>,
    field: Option<&GeodesicField<T>>,
) -> Result<f64> {
    let emb = model.encode(&prepared.features, config.variant.normalized_embedding())?;
    let weights = LossWeights {
        contrastive: T::from_f64(config.weights.contrastive),
        reconstruction: T::from_f64(config.weights.reconstruction),
    };
    let missing = || Error::InvalidArgument("anchor field missing for anchored objective".into());
    let value: T = match config.variant {
        LossVariant::Full => {
            let field = field.ok_or_else(missing)?;
            let targets = field.rescaled.as_ref().ok_or_else(missing)?;
            let lc = losses::contrastive_loss(&emb, &field.anchor_indices, targets)?.value;
            let decoded = model.decode(&emb)?;
            let lr = losses::reconstruction_loss(&prepared.features, &decoded)?.value;
            losses::combined_loss(weights, lc, lr).value
        }
        LossVariant::ContrastiveOnly => {
            let field = field.ok_or_else(missing)?;
            let targets = field.rescaled.as_ref().ok_or_else(missing)?;
            weights.contrastive
                * losses::contrastive_loss(&emb, &field.anchor_indices, targets)?.value
        }
        LossVariant::ReconstructionOnly => {
            let decoded = model.decode(&emb)?;
            weights.reconstruction
                * losses::reconstruction_loss(&prepared.features, &decoded)?.value
        }
        LossVariant::RelativeDistanceFit | LossVariant::PlainDistanceFit => {
            let relative = config.variant == LossVariant::RelativeDistanceFit;
            let field = field.ok_or_else(missing)?;
            losses::distance_fit_loss(&emb, &field.anchor_indices, &field.distances, relative)?
                .value
        }
        LossVariant::NeighborhoodShape => {
            let neighbors = losses::k_nearest_embedding_neighbors(&emb, config.neighbor_count)?;
            let all_pairs = prepared
                .all_pairs
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("distance matrix missing".into()))?;
            let batch: Vec<usize> = (0..prepared.vertex_count()).collect();
            let geo = gather_neighbor_distances(all_pairs, &batch, &neighbors)?;
            losses::neighborhood_shape_loss(&emb, &neighbors, &geo)?.value
        }
    };
    Ok(Scalar::to_f64(value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::normalize_rows;
    use crate::synth::make_icosphere;

    fn toy_meshes(input_dim: usize) -> (TrainingMesh<f32>, TrainingMesh<f32>) {
        let train_mesh = make_icosphere::<f32>(1, 1.0).unwrap();
        let val_mesh = make_icosphere::<f32>(0, 1.0).unwrap();
        (
            TrainingMesh {
                name: "toy-train".to_string(),
                features: random_unit_features(train_mesh.vertices.len(), input_dim, 11),
                mesh: train_mesh,
            },
            TrainingMesh {
                name: "toy-val".to_string(),
                features: random_unit_features(val_mesh.vertices.len(), input_dim, 12),
                mesh: val_mesh,
            },
        )
    }

    fn random_unit_features(rows: usize, cols: usize, seed: u64) -> Matrix<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        normalize_rows(&Matrix::from_vec(rows, cols, data).unwrap()).unwrap()
    }

    fn toy_config() -> TrainConfig {
        TrainConfig {
            embed_dim: 4,
            anchor_count: 6,
            iterations: 1,
            validation_interval: 10,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_text_round_trips_and_rejects_bad_input() {
        let mut config = TrainConfig::default();
        config.embed_dim = 8;
        config.variant = LossVariant::NeighborhoodShape;
        config.learning_rate = 3e-3;
        config.seed = 77;
        let origin = Path::new("inline");
        let text = config.to_key_values();
        let back = parse_train_config(&text, origin).unwrap();
        assert_eq!(back.to_key_values(), text);
        assert_eq!(back.variant, LossVariant::NeighborhoodShape);
        assert_eq!(back.embed_dim, 8);

        assert!(matches!(
            parse_train_config("bogus_key=1", origin),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            parse_train_config("iterations=abc", origin),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            parse_train_config("no equals sign", origin),
            Err(Error::Parse { .. })
        ));
        // comments and blanks are fine; defaults fill the rest
        let sparse = parse_train_config("# comment\n\nembed_dim=16\n", origin).unwrap();
        assert_eq!(sparse.embed_dim, 16);
        assert_eq!(sparse.anchor_count, 100);
        // invalid combinations are rejected at parse time
        assert!(parse_train_config("ema_decay=1.5", origin).is_err());
        for v in LossVariant::ALL {
            assert_eq!(LossVariant::parse(v.token()).unwrap(), v);
        }
    }

    #[test]
    fn sampled_anchors_are_greedy_farthest_points_and_cover_all_when_asked() {
        let (train, _) = toy_meshes(16);
        let config = toy_config();
        let prepared = PreparedMesh::new(&train, &config).unwrap();
        let n = prepared.vertex_count();

        let field = prepare_sample(&prepared, 8, 123).unwrap();
        assert_eq!(field.anchor_indices.len(), 8);
        assert_eq!(field.distances.rows(), n);
        assert_eq!(field.distances.cols(), 8);
        let rescaled = field.rescaled.as_ref().unwrap();
        assert!(rescaled.data().iter().all(|&v| (0.0..=1.0).contains(&v)));

        // Greedy property: each anchor after the first maximizes the minimum
        // Euclidean distance to the anchors already chosen.
        let dist = |a: usize, b: usize| {
            crate::vec3::distance(prepared.mesh.vertices[a], prepared.mesh.vertices[b])
        };
        for step in 1..field.anchor_indices.len() {
            let chosen = &field.anchor_indices[..step];
            let min_to = |candidate: usize| {
                chosen
                    .iter()
                    .map(|&c| dist(candidate, c))
                    .fold(f32::INFINITY, f32::min)
            };
            let picked = min_to(field.anchor_indices[step]);
            let best = (0..n)
                .filter(|v| !chosen.contains(v))
                .map(min_to)
                .fold(f32::NEG_INFINITY, f32::max);
            assert!(
                picked >= best - 1e-6,
                "step {step}: picked min-distance {picked} but best candidate has {best}"
            );
        }

        // Same seed, same anchors; every vertex can serve as an anchor.
        let again = prepare_sample(&prepared, 8, 123).unwrap();
        assert_eq!(again.anchor_indices, field.anchor_indices);
        let full = prepare_sample(&prepared, n, 5).unwrap();
        let mut sorted = full.anchor_indices.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..n).collect::<Vec<_>>());

        assert!(prepare_sample(&prepared, n + 1, 5).is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged_but_logs_the_loss() {
        let (train, _) = toy_meshes(16);
        let mut config = toy_config();
        config.learning_rate = 0.0;
        let run = train_run(&[train], &[], &config);
        assert_eq!(run.log.len(), 1);
        assert!(run.log[0].total.is_finite());
        assert!(run.log[0].contrastive.is_some());
        assert!(run.log[0].reconstruction.is_some());

        let reference = Autoencoder::<f32>::new(16, config.embed_dim, config.seed).unwrap();
        for (a, b) in run
            .state
            .model
            .params()
            .values()
            .iter()
            .zip(reference.params().values())
        {
            assert_eq!(a.data(), b.data());
        }
    }

    fn train_run(
        training: &[TrainingMesh<f32>],
        validation: &[TrainingMesh<f32>],
        config: &TrainConfig,
    ) -> TrainRun<f32> {
        train(training, validation, config).unwrap()
    }

    #[test]
    fn reconstruction_objective_descends_on_a_toy_problem() {
        let (train_mesh, _) = toy_meshes(16);
        let mut config = toy_config();
        config.variant = LossVariant::ReconstructionOnly;
        config.iterations = 2000;
        let run = train_run(&[train_mesh], &[], &config);
        let smooth = |range: std::ops::Range<usize>| {
            let slice = &run.log[range];
            slice.iter().map(|r| r.total).sum::<f64>() / slice.len() as f64
        };
        let early = smooth(0..100);
        let late = smooth(1900..2000);
        assert!(
            late < early,
            "smoothed loss should strictly decrease: first 100 avg {early}, last 100 avg {late}"
        );
    }

    #[test]
    fn same_seed_runs_save_bitwise_identical_checkpoints() {
        let (train_mesh, val_mesh) = toy_meshes(16);
        let mut config = toy_config();
        config.iterations = 30;
        config.validation_interval = 10;

        let dir = tempfile::tempdir().unwrap();
        let mut paths = Vec::new();
        for i in 0..2 {
            let run = train_run(
                std::slice::from_ref(&train_mesh),
                std::slice::from_ref(&val_mesh),
                &config,
            );
            // Validation is scored forward-only.
            assert_eq!(run.backward_passes["toy-val"], 0);
            assert_eq!(run.backward_passes["toy-train"], 30);
            // Validation scores appear exactly on the interval.
            let val_iters: Vec<usize> = run
                .log
                .iter()
                .filter(|r| r.validation.is_some())
                .map(|r| r.iteration)
                .collect();
            assert_eq!(val_iters, vec![9, 19, 29]);
            // The first validation always snapshots; recorded losses strictly
            // decrease by construction.
            assert!(!run.snapshots.is_empty());
            assert!(run
                .snapshots
                .windows(2)
                .all(|w| w[1].1 < w[0].1 && w[1].0 > w[0].0));
            assert!(run.state.ema.has_snapshot());
            // The log is monotone in iteration index.
            assert!(run
                .log
                .iter()
                .enumerate()
                .all(|(i, r)| r.iteration == i));

            let path = dir.path().join(format!("run{i}.ckpt"));
            run.save_checkpoint(&path).unwrap();
            paths.push(path);
        }
        let a = std::fs::read(&paths[0]).unwrap();
        let b = std::fs::read(&paths[1]).unwrap();
        assert_eq!(a, b, "same-seed runs must produce identical checkpoints");

        // The checkpoint reproduces in-memory embeddings bitwise.
        let state = load_checkpoint::<f32>(&paths[0]).unwrap();
        let direct = embed(&state, &train_mesh.features).unwrap();
        let via_file = embed_from_checkpoint::<f32>(&paths[0], &train_mesh.features).unwrap();
        assert_eq!(direct.data(), via_file.data());
        for r in 0..direct.rows() {
            let norm: f32 = direct.row(r).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-6, "row {r} norm {norm}");
        }
    }

    #[test]
    fn loss_log_csv_has_header_and_blank_optional_fields() {
        let log = vec![
            IterationRecord {
                iteration: 0,
                total: 1.5,
                contrastive: Some(1.0),
                reconstruction: Some(0.5),
                validation: None,
            },
            IterationRecord {
                iteration: 1,
                total: 0.25,
                contrastive: None,
                reconstruction: None,
                validation: Some(0.75),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        save_loss_log(&log, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines,
            vec![
                "iteration,total,contrastive,reconstruction,validation",
                "0,1.5,1,0.5,",
                "1,0.25,,,0.75",
            ]
        );
    }

    #[test]
    fn distance_fit_variants_train_unnormalized_embeddings() {
        let (train_mesh, _) = toy_meshes(16);
        for variant in [
            LossVariant::RelativeDistanceFit,
            LossVariant::PlainDistanceFit,
        ] {
            let mut config = toy_config();
            config.variant = variant;
            config.iterations = 3;
            let run = train_run(std::slice::from_ref(&train_mesh), &[], &config);
            assert!(!run.state.normalize_embedding);
            assert!(run.log.iter().all(|r| r.total.is_finite()));
            assert!(run
                .log
                .iter()
                .all(|r| r.contrastive.is_none() && r.reconstruction.is_none()));
            // embed() honors the flag: output equals a plain unnormalized encode.
            let expected = run
                .state
                .embedding_model()
                .unwrap()
                .encode(&train_mesh.features, false)
                .unwrap();
            let got = embed(&run.state, &train_mesh.features).unwrap();
            assert_eq!(got.data(), expected.data());
        }
    }

    #[test]
    fn neighborhood_objective_uses_the_cached_distance_matrix() {
        let (train_mesh, val_mesh) = toy_meshes(16);
        let mut config = toy_config();
        config.variant = LossVariant::NeighborhoodShape;
        config.neighbor_count = 4;
        config.iterations = 4;
        config.validation_interval = 2;
        let run = train_run(
            std::slice::from_ref(&train_mesh),
            std::slice::from_ref(&val_mesh),
            &config,
        );
        assert!(run.log.iter().all(|r| r.total.is_finite()));
        assert_eq!(
            run.log
                .iter()
                .filter(|r| r.validation.is_some())
                .count(),
            2
        );
        assert_eq!(run.backward_passes["toy-val"], 0);
    }

    #[test]
    fn oversized_meshes_are_subsampled_with_anchors_kept() {
        // Unit behavior of the batch chooser.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (batch, rows) = choose_batch(100, 16, &[5, 50, 95], &mut rng);
        assert_eq!(batch.len(), 16);
        assert_eq!(&batch[..3], &[5, 50, 95]);
        assert_eq!(rows, vec![0, 1, 2]);
        let mut rest = batch[3..].to_vec();
        rest.dedup();
        assert_eq!(rest.len(), 13);
        assert!(rest.iter().all(|v| ![5usize, 50, 95].contains(v) && *v < 100));
        assert!(rest.windows(2).all(|w| w[0] < w[1]));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (batch, rows) = choose_batch(10, 16, &[3, 7], &mut rng);
        assert_eq!(batch, (0..10).collect::<Vec<_>>());
        assert_eq!(rows, vec![3, 7]);

        // And end to end: a capped run still trains.
        let (train_mesh, _) = toy_meshes(16);
        let mut config = toy_config();
        config.max_batch_vertices = 24; // icosphere(1) has 42 vertices
        config.anchor_count = 5;
        config.iterations = 3;
        let run = train_run(&[train_mesh], &[], &config);
        assert!(run.log.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let (train_mesh, val_mesh) = toy_meshes(16);
        let config = toy_config();

        assert!(matches!(
            train::<f32>(&[], &[], &config),
            Err(Error::InvalidArgument(_))
        ));

        let mut wrong_rows = train_mesh.clone();
        wrong_rows.features = random_unit_features(7, 16, 3);
        assert!(matches!(
            train(&[wrong_rows], &[], &config),
            Err(Error::DimensionMismatch(_))
        ));

        let mut not_unit = train_mesh.clone();
        not_unit.features = not_unit.features.map(|v| v * 2.0);
        assert!(matches!(
            train(&[not_unit], &[], &config),
            Err(Error::InvalidArgument(_))
        ));

        let mut duplicate = val_mesh.clone();
        duplicate.name = train_mesh.name.clone();
        assert!(matches!(
            train(std::slice::from_ref(&train_mesh), &[duplicate], &config),
            Err(Error::InvalidArgument(_))
        ));

        let mut too_many_anchors = toy_config();
        too_many_anchors.anchor_count = 500;
        too_many_anchors.max_batch_vertices = 20_000;
        assert!(matches!(
            train(std::slice::from_ref(&train_mesh), &[], &too_many_anchors),
            Err(Error::InvalidArgument(_))
        ));

        let mut narrow = val_mesh.clone();
        narrow.name = "narrow".to_string();
        narrow.features = random_unit_features(narrow.mesh.vertices.len(), 8, 4);
        assert!(matches!(
            train(std::slice::from_ref(&train_mesh), &[narrow], &config),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
