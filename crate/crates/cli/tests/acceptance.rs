//! Acceptance suite: prints one PASS/FAIL line per criterion and exits non-zero if any fail.
//! `ACCEPTANCE_ONLY=2,3` runs a subset.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Matrix4, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fmba::config::{DepthInit, FeatureSource, InitConfig, PoseInit, RunConfig};
use fmba::solve::run_solve;
use fmba::synthgen::run_synthgen;
use fmba::train_demo::{run_train_demo, CURVE_FILE};
use fmba_core::ba::{
    ba_backward, ba_solve, evaluate_level, feature_residual, BaInputs, BaState, DampingMlp, LevelProblem, Schedule,
    StateGrad, TraceRecord,
};
use fmba_core::eval::{ate_rmse, depth_metrics, horn_align, median_scale, AlignMode, DELTA_BASE};
use fmba_core::features::FeaturePyramid;
use fmba_core::geometry::{exp_coords, left_gradient, project, project_with_jacobian, se3_log, Pixel};
use fmba_core::synth::{make_sequence, perturb_depth, perturb_poses, random_twist, render_feature_pyramid, SceneSpec};
use fmba_core::synthesis::{loss_match, loss_photo, loss_smooth, ssim, synthesize_view, total_loss, ImageScales, LossWeights, WarpedView};
use fmba_core::{CameraIntrinsics, DepthMap, Raster, SE3Pose};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, &str, Duration, fn() -> Outcome); 9] = [
        (1, "gradient correctness", Duration::from_secs(60), gradient_correctness),
        (2, "ground-truth fixed point", Duration::from_secs(10), fixed_point),
        (3, "convergence basin", Duration::from_secs(600), convergence_basin),
        (4, "schedule conformance", Duration::MAX, schedule_conformance),
        (5, "metric oracle equivalence", Duration::MAX, metric_oracles),
        (6, "Horn recovery", Duration::MAX, horn_recovery),
        (7, "loss constants", Duration::MAX, loss_constants),
        (8, "end-to-end learning signal", Duration::from_secs(900), learning_signal),
        (9, "determinism", Duration::MAX, determinism),
    ];
    let mut failed = 0;
    for (n, name, limit, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let in_time = elapsed <= limit;
        let pass = result.pass && in_time;
        failed += usize::from(!pass);
        let budget = if limit == Duration::MAX {
            String::new()
        } else {
            format!(" (limit {} s)", limit.as_secs())
        };
        println!(
            "criterion {n} [{name}]: {} in {:.1} s{budget}; {}",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            result.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------------------
// Criterion 1.

/// `|fd − an|` relative to the larger magnitude, floored at `1e-5·scale` so entries that are
/// zero up to rounding do not dominate.
fn rel_err(fd: f64, an: f64, scale: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-5 * scale).max(f64::MIN_POSITIVE)
}

/// Central difference of `f` at 0, or `None` when the one-sided differences disagree,
/// i.e. the function is not smooth within `h` (a pixel entering or leaving the valid set).
fn smooth_central(f: impl Fn(f64) -> f64, h: f64) -> Option<f64> {
    let (fp, f0, fm) = (f(h), f(0.0), f(-h));
    let (right, left) = ((fp - f0) / h, (f0 - fm) / h);
    ((right - left).abs() <= 1e-3 * right.abs().max(left.abs()).max(1e-3)).then_some((fp - fm) / (2.0 * h))
}

fn smooth_raster(rng: &mut ChaCha8Rng, c: usize, n: usize) -> Raster {
    let p: Vec<[f64; 4]> = (0..c)
        .map(|_| {
            [
                rng.random_range(0.0..6.0),
                rng.random_range(0.0..6.0),
                rng.random_range(0.3..0.9),
                rng.random_range(0.3..0.9),
            ]
        })
        .collect();
    Raster::from_fn(c, n, n, |ch, y, x| {
        let q = p[ch];
        0.5 + 0.25 * (q[2] * x as f64 + q[0]).sin() + 0.25 * (q[3] * y as f64 + q[1]).cos()
    })
}

fn gradient_correctness() -> Outcome {
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |k: &'static str, e: f64| {
        let w = worst.entry(k).or_insert(0.0);
        *w = w.max(e);
    };
    let mut redrawn = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        note("projection", check_projection(&mut rng));
        note("bilinear", check_bilinear(&mut rng));
        note("residual_jacobian", check_residual_jacobian(&mut rng));
        let (e, r) = check_total_loss(&mut rng);
        note("total_loss", e);
        redrawn += r;
        note("ba_backward", check_ba_backward(seed));
    }
    let pass = worst
        .iter()
        .all(|(k, e)| *e <= if *k == "ba_backward" { 1e-3 } else { 1e-4 });
    let detail = worst
        .iter()
        .map(|(k, e)| format!("{k} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        pass,
        format!("worst relative errors over 20 seeds: {detail}; loss instances redrawn at a mask discontinuity: {redrawn}"),
    )
}

fn check_projection(rng: &mut ChaCha8Rng) -> f64 {
    let k = CameraIntrinsics::new(8.0, 8.0, 4.0, 4.0).unwrap();
    let pose = exp_coords(&random_twist(rng, 0.2, 0.5, 0.0));
    let depth = rng.random_range(2.0..6.0);
    let p = Pixel::new(rng.random_range(0.0..8.0), rng.random_range(0.0..8.0));
    let j = project_with_jacobian(&k, &pose, depth, &p).unwrap();
    let h = 1e-6;
    let px = |pose: &SE3Pose, d: f64| project(&k, pose, d, &p).unwrap().pixel;
    let mut cols: Vec<([f64; 2], [f64; 2])> = Vec::new();
    let (a, b) = (px(&pose, depth + h), px(&pose, depth - h));
    cols.push((
        [(a.x - b.x) / (2.0 * h), (a.y - b.y) / (2.0 * h)],
        [j.d_depth[0], j.d_depth[1]],
    ));
    for dim in 0..6 {
        let mut d = Vector6::zeros();
        d[dim] = h;
        let (a, b) = (px(&exp_coords(&d).compose(&pose), depth), px(&exp_coords(&-d).compose(&pose), depth));
        cols.push((
            [(a.x - b.x) / (2.0 * h), (a.y - b.y) / (2.0 * h)],
            [j.d_twist[(0, dim)], j.d_twist[(1, dim)]],
        ));
    }
    let scale = cols.iter().flat_map(|(_, an)| an.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    cols.iter()
        .flat_map(|(fd, an)| (0..2).map(move |r| rel_err(fd[r], an[r], scale)))
        .fold(0.0, f64::max)
}

fn check_bilinear(rng: &mut ChaCha8Rng) -> f64 {
    let r = Raster::from_fn(3, 8, 8, |_, _, _| rng.random_range(0.0..1.0));
    let p = Pixel::new(
        rng.random_range(0..7) as f64 + rng.random_range(0.05..0.95),
        rng.random_range(0..7) as f64 + rng.random_range(0.05..0.95),
    );
    let up: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let f = |r: &Raster, p: Pixel| -> f64 {
        r.bilinear_sample(p).unwrap().unwrap().iter().zip(&up).map(|(a, b)| a * b).sum()
    };
    let vjp = r.bilinear_sample_vjp(p, &up).unwrap().unwrap();
    let h = 1e-6;
    let mut pairs = vec![
        (
            (f(&r, Pixel::new(p.x + h, p.y)) - f(&r, Pixel::new(p.x - h, p.y))) / (2.0 * h),
            vjp.grad_position[0],
        ),
        (
            (f(&r, Pixel::new(p.x, p.y + h)) - f(&r, Pixel::new(p.x, p.y - h))) / (2.0 * h),
            vjp.grad_position[1],
        ),
    ];
    let mut analytic = Raster::zeros(3, 8, 8);
    for c in 0..3 {
        for &(x, y, w) in &vjp.cells {
            analytic.set(c, y, x, analytic.get(c, y, x) + up[c] * w);
        }
    }
    for c in 0..3 {
        for y in 0..8 {
            for x in 0..8 {
                let mut rp = r.clone();
                rp.set(c, y, x, r.get(c, y, x) + h);
                let mut rm = r.clone();
                rm.set(c, y, x, r.get(c, y, x) - h);
                pairs.push(((f(&rp, p) - f(&rm, p)) / (2.0 * h), analytic.get(c, y, x)));
            }
        }
    }
    let scale = pairs.iter().fold(0.0f64, |m, (_, a)| m.max(a.abs()));
    pairs.iter().map(|(fd, an)| rel_err(*fd, *an, scale)).fold(0.0, f64::max)
}

fn check_residual_jacobian(rng: &mut ChaCha8Rng) -> f64 {
    let t = smooth_raster(rng, 3, 8);
    let s = [smooth_raster(rng, 3, 8)];
    let k = CameraIntrinsics::new(8.0, 8.0, 4.0, 4.0).unwrap();
    let problem = LevelProblem { target: &t, sources: &s, k };
    let depth = DepthMap::new(8, 8, (0..64).map(|_| rng.random_range(4.0..6.0)).collect()).unwrap();
    let poses = vec![exp_coords(&random_twist(rng, 0.02, 0.3, 0.5))];
    let (e0, j) = evaluate_level(&problem, &depth, &poses, true).unwrap();
    let j = j.unwrap();
    let eval = |d: &DepthMap, p: &[SE3Pose]| evaluate_level(&problem, d, p, false).unwrap().0;
    let h = 1e-6;
    let scale = j.max_abs();
    let mut worst = 0.0f64;
    for q in 0..64 {
        let shifted = |s: f64| {
            let mut v = depth.values().to_vec();
            v[q] += s;
            eval(&DepthMap::new(8, 8, v).unwrap(), &poses)
        };
        let (ep, em) = (shifted(h), shifted(-h));
        for qq in 0..64 {
            if !(e0.is_valid(qq, 0) && ep.is_valid(qq, 0) && em.is_valid(qq, 0)) {
                continue;
            }
            for ch in 0..3 {
                let fd = (ep.row(qq, 0)[ch] - em.row(qq, 0)[ch]) / (2.0 * h);
                let an = if qq == q { j.rows(qq, 0).0[ch] } else { 0.0 };
                worst = worst.max(rel_err(fd, an, scale));
            }
        }
    }
    for dim in 0..6 {
        let mut d = Vector6::zeros();
        d[dim] = h;
        let ep = eval(&depth, &[exp_coords(&d).compose(&poses[0])]);
        let em = eval(&depth, &[exp_coords(&-d).compose(&poses[0])]);
        for q in 0..64 {
            if !(e0.is_valid(q, 0) && ep.is_valid(q, 0) && em.is_valid(q, 0)) {
                continue;
            }
            for ch in 0..3 {
                let fd = (ep.row(q, 0)[ch] - em.row(q, 0)[ch]) / (2.0 * h);
                worst = worst.max(rel_err(fd, j.rows(q, 0).1[ch][dim], scale));
            }
        }
    }
    worst
}

/// Worst error over one smooth instance and the number of instances redrawn because a
/// finite difference straddled a discontinuity.
fn check_total_loss(rng: &mut ChaCha8Rng) -> (f64, usize) {
    for redrawn in 0.. {
        if let Some(e) = total_loss_instance(rng) {
            return (e, redrawn);
        }
    }
    unreachable!()
}

fn total_loss_instance(rng: &mut ChaCha8Rng) -> Option<f64> {
    let t = smooth_raster(rng, 1, 16);
    let s = smooth_raster(rng, 1, 16);
    let k = CameraIntrinsics::new(16.0, 16.0, 8.0, 8.0).unwrap();
    let weights = LossWeights::default();
    let images = ImageScales::new(&t, &[s], &weights.scales).unwrap();
    let depth = DepthMap::new(16, 16, (0..256).map(|_| rng.random_range(4.0..6.0)).collect()).unwrap();
    let pose = exp_coords(&random_twist(rng, 0.02, 0.2, 0.5));
    let state = BaState::new(depth, vec![pose]).unwrap();
    let (_, g) = total_loss(&state, &images, &k, &weights, true).unwrap();
    let g = g.unwrap();
    let f = |st: &BaState| total_loss(st, &images, &k, &weights, false).unwrap().0.l_total;
    let h = 1e-6;
    let mut pairs = Vec::new();
    for q in 0..256 {
        let at = |s: f64| {
            let mut v = state.depth.values().to_vec();
            v[q] += s;
            f(&BaState::new(DepthMap::new(16, 16, v).unwrap(), state.poses.clone()).unwrap())
        };
        pairs.push((smooth_central(at, h)?, g.depth[q]));
    }
    let gl = left_gradient(&pose, &g.rotation[0], &g.translation[0]);
    for dim in 0..6 {
        let at = |s: f64| {
            let mut d = Vector6::zeros();
            d[dim] = s;
            f(&BaState::new(state.depth.clone(), vec![exp_coords(&d).compose(&pose)]).unwrap())
        };
        pairs.push((smooth_central(at, h)?, gl[dim]));
    }
    let scale = pairs.iter().fold(0.0f64, |m, (_, a)| m.max(a.abs()));
    Some(pairs.iter().map(|(fd, an)| rel_err(*fd, *an, scale)).fold(0.0, f64::max))
}

/// `⟨upstream, solve(init)⟩` differentiated with respect to the MLP weights, the feature
/// maps and the initial state. Level-1 features are 8×8.
fn check_ba_backward(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
    let c = 3;
    let inputs = BaInputs {
        target: FeaturePyramid::from_image(&smooth_raster(&mut rng, c, 16)).unwrap(),
        sources: vec![FeaturePyramid::from_image(&smooth_raster(&mut rng, c, 16)).unwrap()],
        k: CameraIntrinsics::new(16.0, 16.0, 8.0, 8.0).unwrap(),
    };
    let depth = DepthMap::new(16, 16, (0..256).map(|_| rng.random_range(4.0..6.0)).collect()).unwrap();
    let init = BaState::new(depth, vec![exp_coords(&Vector6::new(0.01, -0.015, 0.02, 0.3, -0.1, 0.05))]).unwrap();
    let mut mlp = DampingMlp::seeded_with_bias(c, seed, 1.0);
    for l in &mut mlp.layers[..2] {
        l.weights.iter_mut().for_each(|w| *w *= 10.0);
    }
    let up = StateGrad {
        depth: (0..256).map(|_| rng.random_range(-1.0..1.0)).collect(),
        rotation: vec![Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0))],
        translation: vec![Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))],
    };
    let sched = if seed % 2 == 0 {
        Schedule { levels: vec![1], iterations: 1 }
    } else {
        Schedule { levels: vec![2, 1], iterations: 2 }
    };
    let objective = |inputs: &BaInputs, init: &BaState, mlp: &DampingMlp| -> f64 {
        let (out, _) = ba_solve(init, inputs, mlp, &sched).unwrap();
        let mut s: f64 = out.depth.values().iter().zip(&up.depth).map(|(a, b)| a * b).sum();
        for (i, p) in out.poses.iter().enumerate() {
            s += p.rotation().component_mul(&up.rotation[i]).sum() + p.translation().dot(&up.translation[i]);
        }
        s
    };
    let (_, trace) = ba_solve(&init, &inputs, &mlp, &sched).unwrap();
    let g = ba_backward(&trace, &inputs, &mlp, &up).unwrap();
    let h = 1e-5;
    let mut pairs = Vec::new();
    for (layer, idx) in [(0, 1), (0, 200), (1, 1000), (1, 5000), (2, 7), (2, 100)] {
        let mut p = mlp.clone();
        p.layers[layer].weights[idx] += h;
        let mut m = mlp.clone();
        m.layers[layer].weights[idx] -= h;
        pairs.push((
            (objective(&inputs, &init, &p) - objective(&inputs, &init, &m)) / (2.0 * h),
            g.mlp.layers[layer].weights[idx],
        ));
    }
    let mut p = mlp.clone();
    p.layers[2].bias[0] += h;
    let mut m = mlp.clone();
    m.layers[2].bias[0] -= h;
    pairs.push((
        (objective(&inputs, &init, &p) - objective(&inputs, &init, &m)) / (2.0 * h),
        g.mlp.layers[2].bias[0],
    ));

    let direction = |pyr: &FeaturePyramid, rng: &mut ChaCha8Rng| -> [Raster; 3] {
        std::array::from_fn(|k| {
            let l = pyr.level(k + 1);
            Raster::from_fn(l.channels(), l.height(), l.width(), |_, _, _| rng.random_range(-1.0..1.0))
        })
    };
    let dir_t = direction(&inputs.target, &mut rng);
    let dir_s = direction(&inputs.sources[0], &mut rng);
    let moved = |pyr: &FeaturePyramid, dir: &[Raster; 3], s: f64| {
        FeaturePyramid::new(std::array::from_fn(|k| {
            let mut r = pyr.level(k + 1).clone();
            r.data_mut().iter_mut().zip(dir[k].data()).for_each(|(a, b)| *a += s * b);
            r
        }))
        .unwrap()
    };
    let with = |s: f64| {
        let mut inp = inputs.clone();
        inp.target = moved(&inputs.target, &dir_t, s);
        inp.sources[0] = moved(&inputs.sources[0], &dir_s, s);
        objective(&inp, &init, &mlp)
    };
    let dot = |a: &[Raster; 3], b: &[Raster; 3]| -> f64 {
        a.iter().zip(b).map(|(x, y)| x.data().iter().zip(y.data()).map(|(u, v)| u * v).sum::<f64>()).sum()
    };
    pairs.push((
        (with(h) - with(-h)) / (2.0 * h),
        dot(&g.target_features, &dir_t) + dot(&g.source_features[0], &dir_s),
    ));

    let dir: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
    let shifted = |s: f64| {
        let d = DepthMap::new(16, 16, init.depth.values().iter().zip(&dir).map(|(a, b)| a + s * b).collect()).unwrap();
        objective(&inputs, &BaState::new(d, init.poses.clone()).unwrap(), &mlp)
    };
    pairs.push((
        (shifted(h) - shifted(-h)) / (2.0 * h),
        g.init.depth.iter().zip(&dir).map(|(a, b)| a * b).sum(),
    ));
    for dim in 0..6 {
        let mut d = Vector6::zeros();
        d[dim] = h;
        let at = |d: Vector6<f64>| {
            let p = exp_coords(&d).compose(&init.poses[0]);
            objective(&inputs, &BaState::new(init.depth.clone(), vec![p]).unwrap(), &mlp)
        };
        pairs.push(((at(d) - at(-d)) / (2.0 * h), g.init_pose_left[0][dim]));
    }
    let scale = pairs.iter().fold(0.0f64, |m, (_, a)| m.max(a.abs()));
    pairs.iter().map(|(fd, an)| rel_err(*fd, *an, scale)).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------------------
// Criteria 2-4: the BA layer on the default scene with view-consistent features.

struct SceneProblem {
    inputs: BaInputs,
    gt_depth: DepthMap,
    gt_poses: Vec<SE3Pose>,
    mlp: DampingMlp,
}

fn scene_problem(seed: u64) -> SceneProblem {
    let spec = SceneSpec::default_scene(3, seed);
    let seq = make_sequence(&spec, 3).unwrap();
    let inputs = BaInputs {
        target: render_feature_pyramid(&spec, &seq.poses[seq.target]).unwrap(),
        sources: seq.sources.iter().map(|&s| render_feature_pyramid(&spec, &seq.poses[s]).unwrap()).collect(),
        k: seq.intrinsics,
    };
    let mlp = DampingMlp::seeded(inputs.target.channels(), seed);
    SceneProblem {
        gt_depth: seq.depths[seq.target].clone(),
        gt_poses: seq.relative_poses(),
        inputs,
        mlp,
    }
}

fn median_of(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn twist_error(a: &[SE3Pose], b: &[SE3Pose]) -> f64 {
    a.iter().zip(b).map(|(p, q)| se3_log(&p.compose(&q.inverse())).norm()).fold(0.0, f64::max)
}

fn fixed_point() -> Outcome {
    let mut worst_pose = 0.0f64;
    let mut worst_depth = 0.0f64;
    for seed in 0..4 {
        let p = scene_problem(seed);
        let gt = BaState::new(p.gt_depth.clone(), p.gt_poses.clone()).unwrap();
        let (fin, trace) = ba_solve(&gt, &p.inputs, &p.mlp, &Schedule::default()).unwrap();
        assert_eq!(trace.records.len(), 18);
        worst_pose = worst_pose.max(twist_error(&fin.poses, &p.gt_poses));
        let change = (median_of(fin.depth.values()) / median_of(p.gt_depth.values()) - 1.0).abs();
        worst_depth = worst_depth.max(change);
    }
    outcome(
        worst_pose < 1e-4 && worst_depth < 1e-3,
        format!("scene seeds 0-3: max pose twist change {worst_pose:.2e} (< 1e-4), max median depth change {worst_depth:.2e} (< 1e-3)"),
    )
}

fn abs_rel(pred: &[f64], gt: &[f64]) -> f64 {
    pred.iter().zip(gt).map(|(p, g)| (p - g).abs() / g).sum::<f64>() / gt.len() as f64
}

fn convergence_basin() -> Outcome {
    let p = scene_problem(0);
    let gt = p.gt_depth.values();
    let mut passed = 0;
    let mut worst_pose_ratio = 0.0f64;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let d0 = perturb_depth(&p.gt_depth, 0.1, &mut rng);
        let p0 = perturb_poses(&p.gt_poses, 0.02, 0.1, &mut rng);
        let init = BaState::new(d0.clone(), p0.clone()).unwrap();
        let (fin, _) = ba_solve(&init, &p.inputs, &p.mlp, &Schedule::default()).unwrap();
        let e0 = feature_residual(&init, &p.inputs, 1).unwrap().norm();
        let e1 = feature_residual(&fin, &p.inputs, 1).unwrap().norm();
        let s0 = median_scale(d0.values(), gt, None).unwrap();
        let s1 = median_scale(fin.depth.values(), gt, None).unwrap();
        let scaled = |poses: &[SE3Pose], s: f64| -> Vec<SE3Pose> {
            poses.iter().map(|q| SE3Pose::new(*q.rotation(), q.translation() * s).unwrap()).collect()
        };
        let pose0 = twist_error(&p0, &p.gt_poses);
        let pose1 = twist_error(&scaled(&fin.poses, s1), &p.gt_poses);
        let depth0 = abs_rel(&d0.values().iter().map(|v| v * s0).collect::<Vec<_>>(), gt);
        let depth1 = abs_rel(&fin.depth.values().iter().map(|v| v * s1).collect::<Vec<_>>(), gt);
        worst_pose_ratio = worst_pose_ratio.max(pose1 / pose0);
        if e1 <= e0 && pose1 < 0.1 * pose0 && 5.0 * depth1 <= depth0 {
            passed += 1;
        }
    }
    outcome(
        passed >= 95,
        format!("{passed}/100 runs converged (need 95); worst final/initial pose error {worst_pose_ratio:.3}"),
    )
}

fn expected_levels() -> Vec<(usize, usize)> {
    [3, 2, 1].iter().flat_map(|&l| (0..6).map(move |i| (l, i))).collect()
}

fn conforms(records: &[TraceRecord]) -> bool {
    records.len() == 18
        && records.iter().map(|r| (r.level, r.iter)).collect::<Vec<_>>() == expected_levels()
        && records.iter().all(|r| r.lambda >= 0.0 && r.lambda.is_finite())
}

fn schedule_conformance() -> Outcome {
    let schedule = Schedule::default();
    if schedule.total_iterations() != 18 {
        return outcome(false, format!("default schedule has {} iterations", schedule.total_iterations()));
    }
    let p = scene_problem(1);
    let channels = p.inputs.target.channels();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut random = DampingMlp::seeded_with_bias(channels, 9, 0.0);
    for l in &mut random.layers {
        l.weights.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        l.bias.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
    }
    let mlps = [p.mlp.clone(), DampingMlp::zeros(channels), random];
    let mut solves = 0;
    for (m, mlp) in mlps.iter().enumerate() {
        for trial in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let init = BaState::new(
                perturb_depth(&p.gt_depth, 0.1, &mut rng),
                perturb_poses(&p.gt_poses, 0.02, 0.1, &mut rng),
            )
            .unwrap();
            let (_, trace) = ba_solve(&init, &p.inputs, mlp, &schedule).unwrap();
            if !conforms(&trace.records) {
                return outcome(false, format!("MLP {m} trial {trial}: trace does not conform"));
            }
            solves += 1;
        }
    }
    // The CLI writes the same trace per tracklet.
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let mut cfg = RunConfig { output: Some(data.clone()), ..RunConfig::default() };
    cfg.synth.frames = 5;
    run_synthgen(&cfg).unwrap();
    cfg.dataset = Some(data);
    cfg.output = Some(dir.path().join("solve"));
    let manifest = run_solve(&cfg).unwrap();
    for t in &manifest.tracklets {
        let path = dir.path().join("solve/tracklets").join(&t.target).join("trace.jsonl");
        let text = std::fs::read_to_string(&path).unwrap();
        let records: Vec<TraceRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        if !conforms(&records) {
            return outcome(false, format!("{} does not conform", path.display()));
        }
        solves += 1;
    }
    outcome(true, format!("{solves} traces with 3 levels × 6 iterations and λ ≥ 0"))
}

// ---------------------------------------------------------------------------------------
// Criterion 5.

fn oracle_depth_metrics(pred: &[f64], gt: &[f64], mask: &[bool], cap: f64) -> [f64; 7] {
    let pairs: Vec<(f64, f64)> = (0..gt.len())
        .filter(|&i| mask[i] && gt[i] > 0.0 && gt[i] <= cap)
        .map(|i| (pred[i].max(1e-3).min(cap), gt[i]))
        .collect();
    let n = pairs.len() as f64;
    let mean = |f: &dyn Fn(f64, f64) -> f64| pairs.iter().map(|&(p, g)| f(p, g)).sum::<f64>() / n;
    let within = |t: f64| mean(&|p, g| if p / g < t && g / p < t { 1.0 } else { 0.0 });
    [
        mean(&|p, g| (p - g).abs() / g),
        mean(&|p, g| (p - g).powi(2) / g),
        mean(&|p, g| (p - g).powi(2)).sqrt(),
        mean(&|p, g| (p.ln() - g.ln()).powi(2)).sqrt(),
        within(1.25),
        within(1.5625),
        within(1.953125),
    ]
}

fn report_array(r: &fmba_core::eval::DepthEvalReport) -> [f64; 7] {
    [r.abs_rel, r.sq_rel, r.rmse, r.rmse_log, r.a1, r.a2, r.a3]
}

/// Horn's closed form with unit quaternions: the rotation is the top eigenvector of the
/// 4×4 matrix built from the cross-covariance.
fn oracle_ate(p: &[Vector3<f64>], q: &[Vector3<f64>], similarity: bool) -> f64 {
    let n = p.len() as f64;
    let cp = p.iter().sum::<Vector3<f64>>() / n;
    let cq = q.iter().sum::<Vector3<f64>>() / n;
    let mut s = Matrix3::zeros();
    for (a, b) in p.iter().zip(q) {
        s += (a - cp) * (b - cq).transpose();
    }
    let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    let nm = Matrix4::new(
        sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
        syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
        szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
        sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz,
    );
    let eig = nm.symmetric_eigen();
    let best = (0..4).max_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j])).unwrap();
    let v = eig.eigenvectors.column(best);
    let quat = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(v[0], v[1], v[2], v[3]));
    let r = quat.to_rotation_matrix().into_inner();
    let scale = if similarity {
        let num: f64 = p.iter().zip(q).map(|(a, b)| (b - cq).dot(&(r * (a - cp)))).sum();
        let den: f64 = p.iter().map(|a| (a - cp).norm_squared()).sum();
        num / den
    } else {
        1.0
    };
    let t = cq - r * cp * scale;
    (p.iter().zip(q).map(|(a, b)| (r * a * scale + t - b).norm_squared()).sum::<f64>() / n).sqrt()
}

fn metric_oracles() -> Outcome {
    let mut worst_depth = 0.0f64;
    let mut worst_ate = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(5..60);
        let cap = 80.0;
        let gt: Vec<f64> = (0..n)
            .map(|_| match rng.random_range(0..10) {
                0 => 0.0,
                1 => rng.random_range(80.5..120.0),
                _ => rng.random_range(0.5..79.0),
            })
            .collect();
        let pred: Vec<f64> = gt
            .iter()
            .map(|g| match rng.random_range(0..12) {
                0 => 1e-5,
                1 => 200.0,
                _ => (g.max(1.0)) * rng.random_range(0.5..2.2),
            })
            .collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.85)).collect();
        mask[0] = true;
        let mut gt = gt;
        gt[0] = 10.0;
        let ours = report_array(&depth_metrics(&pred, &gt, Some(&mask), cap).unwrap());
        let oracle = oracle_depth_metrics(&pred, &gt, &mask, cap);
        worst_depth = ours.iter().zip(&oracle).fold(worst_depth, |m, (a, b)| m.max((a - b).abs()));

        let pts: Vec<Vector3<f64>> = (0..rng.random_range(3..12))
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)))
            .collect();
        let rot = exp_coords(&random_twist(&mut rng, 3.0, 2.0, 0.0));
        let s = rng.random_range(0.3..3.0);
        let q: Vec<Vector3<f64>> = pts
            .iter()
            .map(|x| rot.rotation() * x * s + rot.translation() + Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3)))
            .collect();
        for (mode, sim) in [(AlignMode::Rigid, false), (AlignMode::Similarity, true)] {
            let ours = ate_rmse(&pts, &q, mode).unwrap();
            worst_ate = worst_ate.max((ours - oracle_ate(&pts, &q, sim)).abs());
        }
    }
    let gt: Vec<f64> = (1..=20).map(|i| i as f64).collect();
    let doubled: Vec<f64> = gt.iter().map(|g| 2.0 * g).collect();
    let r = depth_metrics(&doubled, &gt, None, 80.0).unwrap();
    let doubled_ok = r.abs_rel == 1.0 && r.a1 == 0.0 && r.a2 == 0.0 && r.a3 == 0.0;
    let at = |ratio: f64| report_array(&depth_metrics(&[10.0 * ratio], &[10.0], None, 80.0).unwrap());
    let thresholds_ok = DELTA_BASE == 1.25
        && at(1.2499)[4..] == [1.0, 1.0, 1.0]
        && at(1.2501)[4..] == [0.0, 1.0, 1.0]
        && at(1.5624)[4..] == [0.0, 1.0, 1.0]
        && at(1.5626)[4..] == [0.0, 0.0, 1.0]
        && at(1.9531)[4..] == [0.0, 0.0, 1.0]
        && at(1.9532)[4..] == [0.0, 0.0, 0.0];
    outcome(
        worst_depth <= 1e-12 && worst_ate <= 1e-12 && doubled_ok && thresholds_ok,
        format!(
            "50 instances: depth max diff {worst_depth:.1e}, ATE max diff {worst_ate:.1e}; pred = 2·gt {}; thresholds 1.25/1.25²/1.25³ {}",
            if doubled_ok { "ok" } else { "wrong" },
            if thresholds_ok { "ok" } else { "wrong" }
        ),
    )
}

// ---------------------------------------------------------------------------------------
// Criterion 6.

fn horn_recovery() -> Outcome {
    let mut worst = 0.0f64;
    let mut self_ate = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<Vector3<f64>> = (0..rng.random_range(4..15))
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-10.0..10.0)))
            .collect();
        let truth = exp_coords(&random_twist(&mut rng, 3.0, 20.0, 0.0));
        for (mode, s) in [(AlignMode::Rigid, 1.0), (AlignMode::Similarity, rng.random_range(0.1..10.0))] {
            let q: Vec<Vector3<f64>> = p.iter().map(|x| truth.rotation() * x * s + truth.translation()).collect();
            let a = horn_align(&p, &q, mode).unwrap();
            let err = (a.pose.rotation() - truth.rotation())
                .abs()
                .max()
                .max((a.pose.translation() - truth.translation()).abs().max())
                .max((a.scale - s).abs());
            worst = worst.max(err);
            self_ate = self_ate.max(ate_rmse(&p, &p, mode).unwrap());
        }
    }
    outcome(
        worst <= 1e-9 && self_ate <= 1e-12,
        format!("100 seeds, rigid and similarity: max parameter error {worst:.1e}; self-ATE {self_ate:.1e} (zero up to rounding, ≤ 1e-12)"),
    )
}

// ---------------------------------------------------------------------------------------
// Criterion 7.

fn loss_constants() -> Outcome {
    let w = LossWeights::default();
    let constants_ok = w.alpha == 0.85 && [1usize, 2, 4].iter().all(|&r| w.smooth_weight(r) == 0.1 / r as f64);
    let mut endpoints_ok = true;
    let mut worst_blend = 0.0f64;
    let mut worst_ssim = 0.0f64;
    let mut smooth_zero = true;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = if seed % 2 == 0 { 1 } else { 3 };
        let target = Raster::from_fn(c, 12, 12, |_, _, _| rng.random_range(0.0..1.0));
        let source = Raster::from_fn(c, 12, 12, |_, _, _| rng.random_range(0.0..1.0));
        let k = CameraIntrinsics::new(12.0, 12.0, 6.0, 6.0).unwrap();
        let depth = DepthMap::new(12, 12, (0..144).map(|_| rng.random_range(4.0..6.0)).collect()).unwrap();
        let pose = exp_coords(&random_twist(&mut rng, 0.02, 0.5, 0.5));
        let views = [synthesize_view(&source, &depth, &pose, &k).unwrap()];
        let (l1, dssim) = pure_terms(&target, &views[0]);
        let m0 = loss_match(&target, &views, 0.0).unwrap();
        let m1 = loss_match(&target, &views, 1.0).unwrap();
        endpoints_ok &= m0 == loss_photo(&target, &views).unwrap();
        worst_blend = worst_blend.max(((m0 - l1) / l1).abs()).max(((m1 - dssim) / dssim).abs());
        let s = ssim(&target, &target).unwrap();
        worst_ssim = s.data().iter().fold(worst_ssim, |m, v| m.max((v - 1.0).abs()));
        for normalize in [true, false] {
            let flat = DepthMap::constant(12, 12, rng.random_range(1.0..50.0)).unwrap();
            smooth_zero &= loss_smooth(&flat, &target, normalize).unwrap() == 0.0;
        }
    }
    outcome(
        constants_ok && endpoints_ok && worst_blend <= 1e-14 && worst_ssim <= 1e-12 && smooth_zero,
        format!(
            "α = 0.85, λ_s = 0.1/r {}; blend endpoints max rel diff {worst_blend:.1e}; |ssim(x,x) − 1| ≤ {worst_ssim:.1e}; constant-depth smoothness {}",
            if constants_ok { "ok" } else { "wrong" },
            if smooth_zero { "0" } else { "non-zero" }
        ),
    )
}

/// Mean L1 and mean `(1 − SSIM)/2` over valid pixels and channels.
fn pure_terms(target: &Raster, view: &WarpedView) -> (f64, f64) {
    let s = ssim(target, &view.image).unwrap();
    let (c, h, w) = target.shape();
    let (mut l1, mut ds, mut n) = (0.0, 0.0, 0.0);
    for ch in 0..c {
        for q in (0..h * w).filter(|&q| view.valid[q]) {
            let (y, x) = (q / w, q % w);
            l1 += (target.get(ch, y, x) - view.image.get(ch, y, x)).abs();
            ds += (1.0 - s.get(ch, y, x)) / 2.0;
            n += 1.0;
        }
    }
    (l1 / n, ds / n)
}

// ---------------------------------------------------------------------------------------
// Criteria 8 and 9: the command pipeline.

fn synth_dataset(dir: &Path, frames: usize, seed: u64) -> RunConfig {
    let data = dir.join("data");
    let mut cfg = RunConfig { seed, output: Some(data.clone()), ..RunConfig::default() };
    cfg.synth.frames = frames;
    run_synthgen(&cfg).unwrap();
    RunConfig { seed, dataset: Some(data), ..RunConfig::default() }
}

fn learning_signal() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let base = synth_dataset(dir.path(), 3, 0);
    let mut ratios = Vec::new();
    let mut curves = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("train{run}"));
        let cfg = RunConfig { output: Some(out.clone()), ..base.clone() };
        let report = run_train_demo(&cfg).unwrap();
        ratios.push((report.initial, report.last, report.ratio));
        curves.push(std::fs::read(out.join(CURVE_FILE)).unwrap());
    }
    let (initial, last, ratio) = ratios[0];
    let deterministic = curves[0] == curves[1];
    outcome(
        ratio < 0.5 && deterministic,
        format!(
            "default scene, seed 0, {} steps: total loss {initial:.4} -> {last:.4}, ratio {ratio:.3} (need < 0.5); repeat run {}",
            base.train.steps,
            if deterministic { "byte-identical" } else { "differs" }
        ),
    )
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let base = synth_dataset(dir.path(), 5, 3);
    let mut solve = base.clone();
    solve.workers = 2;
    solve.init = InitConfig {
        depth: DepthInit::Constant { value: None },
        poses: PoseInit::Identity,
    };
    let mut train = base.clone();
    train.train.steps = 4;
    let mut trees = Vec::new();
    for run in 0..2 {
        let s = dir.path().join(format!("solve{run}"));
        run_solve(&RunConfig { output: Some(s.clone()), ..solve.clone() }).unwrap();
        let t = dir.path().join(format!("train{run}"));
        run_train_demo(&RunConfig { output: Some(t.clone()), ..train.clone() }).unwrap();
        trees.push((read_tree(&s), read_tree(&t)));
    }
    let files = trees[0].0.len() + trees[0].1.len();
    let same = trees[0] == trees[1];
    let scene = RunConfig {
        features: fmba::config::FeatureConfig { source: FeatureSource::Scene, ..Default::default() },
        ..solve
    };
    let mut scene_trees = Vec::new();
    for run in 0..2 {
        let s = dir.path().join(format!("scene{run}"));
        run_solve(&RunConfig { output: Some(s.clone()), ..scene.clone() }).unwrap();
        scene_trees.push(read_tree(&s));
    }
    let scene_same = scene_trees[0] == scene_trees[1];
    outcome(
        same && scene_same && files > 0,
        format!(
            "two solve runs (network and scene features, 2 workers) and two 4-step train-demo runs: {} files {}",
            files + scene_trees[0].len(),
            if same && scene_same { "byte-identical" } else { "differ" }
        ),
    )
}
