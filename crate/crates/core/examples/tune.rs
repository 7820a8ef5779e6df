//! Scratch harness for sizing the synthetic-suite experiments.

use std::time::Instant;

use geodistill_core::matching::{correspondence_error, match_points};
use geodistill_core::matrix::Matrix;
use geodistill_core::mesh::Mesh;
use geodistill_core::pose::{
    align_pose, lbs_deform, regress_skinning, AlignConfig, CorrespondencePoints, Pose,
    RegressionConfig, Skeleton,
};
use geodistill_core::synth::{
    make_quadruped, quadruped_bones, sample_pose, synth_base_features, FeatureRecipe, Part,
    Quadruped, QuadrupedSpec, Side,
};

fn amp_pose(skeleton: &Skeleton<S>, seed: u64, amp: f64) -> Pose<S> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x905e_11aa);
    let mut pose = Pose::identity(skeleton.bones.len());
    for &leg in &quadruped_bones::LEGS {
        let angle = rng.gen_range(-amp..amp);
        pose.bone_rotations[leg] = [angle as f32, 0.0, 0.0];
    }
    let neck = rng.gen_range(-amp * 2.0 / 3.0..amp * 2.0 / 3.0);
    pose.bone_rotations[quadruped_bones::NECK] = [neck as f32, 0.0, 0.0];
    pose
}
use geodistill_core::train::{embed, train, LossVariant, TrainConfig, TrainingMesh};

type S = f32;

struct HeldOut {
    source: Quadruped<S>,
    source_features: Matrix<S>,
    target_features: Matrix<S>,
    target_mesh: Mesh<S>,
}

fn side_confusion(held: &HeldOut, src: &Matrix<S>, tgt: &Matrix<S>) -> f64 {
    let m = match_points(src, tgt).unwrap();
    let mirror = &held.source.mirror;
    let mut limb = 0usize;
    let mut flipped = 0usize;
    for i in 0..held.source.parts.len() {
        let is_limb = matches!(held.source.parts[i], Part::FrontLeg | Part::HindLeg);
        if !is_limb || mirror.side[i] == Side::Center {
            continue;
        }
        limb += 1;
        let t = m.targets[i];
        let opposite = match mirror.side[i] {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
            Side::Center => unreachable!(),
        };
        if mirror.side[t] == opposite {
            flipped += 1;
        }
    }
    100.0 * flipped as f64 / limb as f64
}

fn corr_err(held: &HeldOut, src: &Matrix<S>, tgt: &Matrix<S>) -> f64 {
    let m = match_points(src, tgt).unwrap();
    let gt = held.target_mesh.vertices.clone();
    correspondence_error(&m, &held.target_mesh, &gt).unwrap() as f64
}

fn main() {
    let t0 = Instant::now();
    let recipe = FeatureRecipe::default();
    let mut shapes = Vec::new();
    let mut features = Vec::new();
    for i in 0..8u64 {
        let spec = QuadrupedSpec::from_seed(i);
        let q = make_quadruped::<S>(&spec).unwrap();
        let f = synth_base_features(&q, &recipe, 100 + i).unwrap();
        shapes.push(q);
        features.push(f);
    }
    println!(
        "suite built in {:?}; vertices {}",
        t0.elapsed(),
        shapes[0].mesh.vertices.len()
    );

    let args: Vec<String> = std::env::args().collect();
    if args.get(1).map(String::as_str) == Some("ampscan") {
        let init_state = {
            let training: Vec<TrainingMesh<S>> = (0..6)
                .map(|i| TrainingMesh {
                    name: format!("quad{i}"),
                    mesh: shapes[i].mesh.clone(),
                    features: features[i].clone(),
                })
                .collect();
            let mut config = TrainConfig::default();
            config.embed_dim = 8;
            config.anchor_count = 32;
            config.iterations = 1;
            config.learning_rate = 0.0;
            config.seed = 11;
            train(&training, &[], &config).unwrap().state
        };
        // Oracle: matching through an exact top-8 PCA projection of the
        // combined source+target features.
        let pca8 = |src: &Matrix<S>, tgt: &Matrix<S>| -> (Matrix<S>, Matrix<S>) {
            let n = src.rows() + tgt.rows();
            let d = src.cols();
            let mut mean = vec![0.0f64; d];
            for m in [src, tgt] {
                for i in 0..m.rows() {
                    for j in 0..d {
                        mean[j] += m.get(i, j) as f64 / n as f64;
                    }
                }
            }
            let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
            for m in [src, tgt] {
                for i in 0..m.rows() {
                    for a in 0..d {
                        for b in 0..d {
                            cov[(a, b)] += (m.get(i, a) as f64 - mean[a])
                                * (m.get(i, b) as f64 - mean[b])
                                / (n - 1) as f64;
                        }
                    }
                }
            }
            let eig = nalgebra::SymmetricEigen::new(cov);
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
            let project = |m: &Matrix<S>| {
                let mut out = Matrix::<S>::zeros(m.rows(), 8);
                for i in 0..m.rows() {
                    for (c, &k) in order[..8].iter().enumerate() {
                        let mut v = 0.0f64;
                        for j in 0..d {
                            v += (m.get(i, j) as f64 - mean[j]) * eig.eigenvectors[(j, k)];
                        }
                        out.set(i, c, v as S);
                    }
                }
                out
            };
            (project(src), project(tgt))
        };
        for amp in [0.2f64, 0.3, 0.45, 0.6] {
            for idx in [6usize, 7] {
                let q = &shapes[idx];
                let mut sides = Vec::new();
                let mut errs = Vec::new();
                let mut ierrs = Vec::new();
                let mut perrs = Vec::new();
                for pose_seed in 910..914u64 {
                    let pose = amp_pose(&q.skeleton, pose_seed, amp);
                    let deformed = lbs_deform(&q.skeleton, &pose, &q.mesh.vertices).unwrap();
                    let target_mesh = Mesh {
                        vertices: deformed.clone(),
                        faces: q.mesh.faces.clone(),
                        colors: None,
                    };
                    let target_quad = Quadruped {
                        mesh: target_mesh.clone(),
                        mirror: q.mirror.clone(),
                        skeleton: q.skeleton.clone(),
                        parts: q.parts.clone(),
                    };
                    let tf = synth_base_features(&target_quad, &recipe, 500 + idx as u64).unwrap();
                    let h = HeldOut {
                        source: q.clone(),
                        source_features: features[idx].clone(),
                        target_features: tf,
                        target_mesh,
                    };
                    sides.push(side_confusion(&h, &h.source_features, &h.target_features));
                    errs.push(corr_err(&h, &h.source_features, &h.target_features));
                    let es = embed(&init_state, &h.source_features).unwrap();
                    let et = embed(&init_state, &h.target_features).unwrap();
                    ierrs.push(corr_err(&h, &es, &et));
                    let (ps, pt) = pca8(&h.source_features, &h.target_features);
                    perrs.push(corr_err(&h, &ps, &pt));
                }
                let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
                println!(
                    "amp {amp} shape {idx}: raw side {:.1}%  raw err {:.4}  init-enc err {:.4}  pca8 err {:.4}",
                    mean(&sides),
                    mean(&errs),
                    mean(&ierrs),
                    mean(&perrs)
                );
            }
        }
        return;
    }
    if args.get(1).map(String::as_str) == Some("align") {
        let q = &shapes[0];
        let pose = sample_pose(&q.skeleton, 42);
        let deformed = lbs_deform(&q.skeleton, &pose, &q.mesh.vertices).unwrap();
        let mut mn = [f64::INFINITY; 3];
        let mut mx = [f64::NEG_INFINITY; 3];
        for v in &q.mesh.vertices {
            for a in 0..3 {
                mn[a] = mn[a].min(v[a] as f64);
                mx[a] = mx[a].max(v[a] as f64);
            }
        }
        let diag = ((mx[0] - mn[0]).powi(2) + (mx[1] - mn[1]).powi(2) + (mx[2] - mn[2]).powi(2)).sqrt();
        let dense = CorrespondencePoints {
            source_indices: (0..q.mesh.vertices.len()).collect(),
            target_positions: deformed.clone(),
        };
        let config = AlignConfig::default();
        for (name, corr) in [
            ("dense", dense.clone()),
            ("sparse5%", dense.sparse_subset(&q.mesh.vertices, 0.05, 9).unwrap()),
        ] {
            let t0 = std::time::Instant::now();
            let run = align_pose(&q.skeleton, &q.mesh, &corr, &config).unwrap();
            let rec = lbs_deform(&q.skeleton, &run.pose, &q.mesh.vertices).unwrap();
            let mean_err = rec
                .iter()
                .zip(&deformed)
                .map(|(a, b)| {
                    (((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)) as f64).sqrt()
                })
                .sum::<f64>()
                / rec.len() as f64;
            let frozen = run
                .pose_after_phase_one
                .bone_rotations
                .iter()
                .all(|r| r.iter().all(|v| v.to_bits() == 0.0f32.to_bits()));
            println!(
                "align {name}: pts {}  mean err {:.3e}  /diag {:.3e}  rot-frozen-phase1 {frozen}  {:.1}s",
                corr.len(),
                mean_err,
                mean_err / diag,
                t0.elapsed().as_secs_f64()
            );
        }
        return;
    }
    if args.get(1).map(String::as_str) == Some("skin") {
        let sharp: f64 = std::env::var("TUNE_SHARP").ok().and_then(|v| v.parse().ok()).unwrap_or(4.0);
        let shapes: Vec<Quadruped<S>> = (0..8)
            .map(|i| {
                let mut spec = QuadrupedSpec::from_seed(i);
                spec.skinning_sharpness = sharp;
                make_quadruped::<S>(&spec).unwrap()
            })
            .collect();
        let mut recipe2 = recipe.clone();
        if let Ok(nz) = std::env::var("TUNE_NOISE") {
            recipe2.noise = nz.parse().unwrap();
        }
        let features: Vec<Matrix<S>> = (0..8)
            .map(|i| synth_base_features(&shapes[i], &recipe2, 100 + i as u64).unwrap())
            .collect();
        let mut config = TrainConfig::default();
        config.embed_dim = std::env::var("TUNE_EMBED").ok().and_then(|v| v.parse().ok()).unwrap_or(8);
        config.anchor_count = 32;
        config.learning_rate = 1e-3;
        config.iterations = 5000;
        config.variant = LossVariant::Full;
        config.seed = 11;
        let training: Vec<TrainingMesh<S>> = (0..6)
            .map(|i| TrainingMesh {
                name: format!("quad{i}"),
                mesh: shapes[i].mesh.clone(),
                features: features[i].clone(),
            })
            .collect();
        let t0 = std::time::Instant::now();
        let state = train(&training, &[], &config).unwrap().state;
        println!("trained in {:.0}s", t0.elapsed().as_secs_f64());
        for idx in [0usize, 6, 7] {
            let q = &shapes[idx];
            let raw = &features[idx];
            let emb = embed(&state, raw).unwrap();
            let weights = q.skeleton.weights.clone();
            let mut rcfg = RegressionConfig::default();
            if let Ok(ep) = std::env::var("TUNE_EPOCHS") {
                rcfg.epochs = ep.parse().unwrap();
            }
            if let Ok(rl) = std::env::var("TUNE_RLR") {
                rcfg.learning_rate = rl.parse().unwrap();
            }
            let rep_emb = regress_skinning(&emb, &weights, &rcfg).unwrap();
            let rep_raw = regress_skinning(raw, &weights, &rcfg).unwrap();
            let pred = rep_emb.regressor.predict(&emb).unwrap();
            let mut worst_sum_dev = 0.0f64;
            for i in 0..pred.rows() {
                let s: f64 = (0..pred.cols()).map(|j| pred.get(i, j) as f64).sum();
                worst_sum_dev = worst_sum_dev.max((s - 1.0).abs());
            }
            println!(
                "skin shape {idx}: emb mse {:.3e}  raw mse {:.3e}  worst row-sum dev {:.2e}",
                rep_emb.mean_mse as f64,
                rep_raw.mean_mse as f64,
                worst_sum_dev
            );
        }
        return;
    }
    if args.get(1).map(String::as_str) == Some("rawscan") {
        for idx in [6usize, 7] {
            let q = &shapes[idx];
            for pose_seed in 900..916u64 {
                let pose = sample_pose(&q.skeleton, pose_seed);
                let deformed = lbs_deform(&q.skeleton, &pose, &q.mesh.vertices).unwrap();
                let target_mesh = Mesh {
                    vertices: deformed.clone(),
                    faces: q.mesh.faces.clone(),
                    colors: None,
                };
                let target_quad = Quadruped {
                    mesh: target_mesh.clone(),
                    mirror: q.mirror.clone(),
                    skeleton: q.skeleton.clone(),
                    parts: q.parts.clone(),
                };
                let tf = synth_base_features(&target_quad, &recipe, 500 + idx as u64).unwrap();
                let h = HeldOut {
                    source: q.clone(),
                    source_features: features[idx].clone(),
                    target_features: tf,
                    target_mesh,
                };
                println!(
                    "shape {idx} pose_seed {pose_seed}: raw side {:.1}%  err {:.5}",
                    side_confusion(&h, &h.source_features, &h.target_features),
                    corr_err(&h, &h.source_features, &h.target_features)
                );
            }
        }
        return;
    }

    let mut held = Vec::new();
    for (slot, &idx) in [6usize, 7].iter().enumerate() {
        let q = &shapes[idx];
        let pose = sample_pose(&q.skeleton, [915u64, 906][slot]);
        let deformed = lbs_deform(&q.skeleton, &pose, &q.mesh.vertices).unwrap();
        let target_mesh = Mesh {
            vertices: deformed.clone(),
            faces: q.mesh.faces.clone(),
            colors: None,
        };
        let target_quad = Quadruped {
            mesh: target_mesh,
            mirror: q.mirror.clone(),
            skeleton: q.skeleton.clone(),
            parts: q.parts.clone(),
        };
        let tf = synth_base_features(&target_quad, &recipe, 500 + idx as u64).unwrap();
        held.push(HeldOut {
            source: q.clone(),
            source_features: features[idx].clone(),
            target_features: tf,
            target_mesh: target_quad.mesh.clone(),
        });
    }

    for h in &held {
        println!(
            "raw: side {:.1}%  err {:.5}",
            side_confusion(h, &h.source_features, &h.target_features),
            corr_err(h, &h.source_features, &h.target_features)
        );
    }

    let training: Vec<TrainingMesh<S>> = (0..6)
        .map(|i| TrainingMesh {
            name: format!("quad{i}"),
            mesh: shapes[i].mesh.clone(),
            features: features[i].clone(),
        })
        .collect();

    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let iters: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5000);
    let which = args.get(3).cloned().unwrap_or_else(|| "all".into());
    let rec_weight: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let variants = [
        LossVariant::Full,
        LossVariant::ContrastiveOnly,
        LossVariant::ReconstructionOnly,
        LossVariant::RelativeDistanceFit,
        LossVariant::PlainDistanceFit,
        LossVariant::NeighborhoodShape,
    ];
    for variant in variants {
        if which != "all" && variant.token() != which {
            continue;
        }
        let mut config = TrainConfig::default();
        config.embed_dim = 8;
        config.anchor_count = 32;
        config.iterations = iters;
        config.learning_rate = lr;
        if let Ok(wd) = std::env::var("TUNE_WD") {
            config.weight_decay = wd.parse().unwrap();
        }
        config.weights.reconstruction = rec_weight;
        config.variant = variant;
        config.seed = 11;
        let t = Instant::now();
        let run = train(&training, &[], &config).unwrap();
        let train_time = t.elapsed();
        let window = |a: usize, b: usize| {
            let slice = &run.log[a..b];
            let tot = slice.iter().map(|r| r.total).sum::<f64>() / slice.len() as f64;
            let lc = slice
                .iter()
                .filter_map(|r| r.contrastive)
                .collect::<Vec<_>>();
            let lcm = if lc.is_empty() { f64::NAN } else { lc.iter().sum::<f64>() / lc.len() as f64 };
            (tot, lcm)
        };
        let n = run.log.len();
        let (t0v, c0) = window(0, 200.min(n));
        let (t1v, c1) = window(n - 200.min(n), n);
        let mut line = format!(
            "{:8}  lr {lr}  {:?}  loss {t0v:.4}->{t1v:.4} (lc {c0:.4}->{c1:.4})",
            variant.token(),
            train_time
        );
        for h in &held {
            let es = embed(&run.state, &h.source_features).unwrap();
            let et = embed(&run.state, &h.target_features).unwrap();
            line += &format!(
                "   side {:.1}% err {:.5}",
                side_confusion(h, &es, &et),
                corr_err(h, &es, &et)
            );
        }
        println!("{line}");
    }
    println!("total {:?}", t0.elapsed());
}
