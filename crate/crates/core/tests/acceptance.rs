//! Acceptance suite: one pass/fail line per criterion.
//!
//! `UNIF_ACCEPTANCE=1,2,7` restricts the run to the listed criteria.

use std::io::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use unif_core::dataio::{generate_frame, generate_sequence, pose_from_joint_angles, CapsuleBody, PoseSchedule, ScanFrame};
use unif_core::deform::{blend_weights, DeformOptions, PoseContext, RigidnessCoeffs};
use unif_core::evalmetrics::{chamfer_and_f1, p2s, sample_mesh, MeshIndex};
use unif_core::mlp::InitConfig;
use unif_core::neural_sdf::{union_min, union_smooth, ModelConfig, PartSamples, UnifModel, UnionMode};
use unif_core::objective::{
    loss_and_grad, perim_loss, sample_batch, section_normal, total_loss, Field, LossWeights, SampleBatch, SampleCounts,
    PERIM_BETA,
};
use unif_core::skeleton::{bone_frames, Pose, Skeleton, Vec3};
use unif_core::surface::{extract_part, extract_union, marching_cubes, Aabb, Grid, Mesh};
use unif_core::trainer::{log_csv, train, EpochLog, TrainConfig};

const DESK_SEED: u64 = 2024;
const DESK_FRAMES: usize = 20;
const DESK_EPOCHS: usize = 2000;
const DESK_RADIUS: f64 = 0.045;
const EXTRACT_RES: usize = 96;
const GT_POINTS: usize = 20_000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn arm() -> Skeleton {
    Skeleton::preset("arm2").unwrap()
}

fn elbow_pose(s: &Skeleton, degrees: f64) -> Pose {
    let mut angles = vec![0.0; s.joint_count()];
    angles[s.joint_index("elbow").unwrap()] = degrees.to_radians();
    pose_from_joint_angles(s, &angles).unwrap()
}

fn criterion_1() -> Outcome {
    let s = arm();
    let cfg = ModelConfig { init: InitConfig { fit_steps: 0, ..InitConfig::default() }, ..ModelConfig::default() };
    let mut model = UnifModel::new_random(s.clone(), cfg, 31);
    let (_, a_off, b_off) = model.param_offsets();
    model.rigidness.alpha[1] = 1.7;
    model.rigidness.beta[2] = 0.25;
    let pose = elbow_pose(&s, 50.0);
    let body = CapsuleBody::uniform(2, DESK_RADIUS).unwrap();
    let frame = generate_frame(&s, &body, &pose, 400, 3).unwrap();
    let batch = sample_batch(&frame, SampleCounts { surface: 24, local: 24, global: 12 }, 0.1, 1.5, 4).unwrap();
    let w = LossWeights::default();
    let (_, grad) = loss_and_grad(&model, &batch, &pose, &w).unwrap();
    let flat = model.params_flat();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut idx: Vec<usize> = (0..24).map(|_| rng.gen_range(0..a_off)).collect();
    idx.extend([a_off + 1, a_off + 2, b_off + 1, b_off + 2]);
    let loss = |p: &[f64]| {
        let mut m = model.clone();
        m.set_params_flat(p).unwrap();
        total_loss(&m, &batch, &s, &pose, &w).unwrap().total
    };
    let mut worst_param: f64 = 0.0;
    for &i in &idx {
        let h = 1e-5 * (1.0 + flat[i].abs());
        let mut p = flat.clone();
        p[i] += h;
        let up = loss(&p);
        p[i] -= 2.0 * h;
        let down = loss(&p);
        worst_param = worst_param.max(rel_err((up - down) / (2.0 * h), grad[i], 1e-6));
    }
    // spatial gradients of the union at points where no two parts tie
    let ctx = model.pose_context(&pose).unwrap();
    let mut worst_x: f64 = 0.0;
    let mut checked = 0;
    while checked < 100 {
        let x = Vec3::new(rng.gen_range(-0.1..0.66), rng.gen_range(-0.2..0.4), rng.gen_range(-0.15..0.15));
        let s0 = model.eval_union_batch(&ctx, &[x], UnionMode::Smooth).unwrap().remove(0);
        let mut sorted = s0.parts.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted[1] - sorted[0] < 1e-3 {
            continue;
        }
        checked += 1;
        let h = 1e-6;
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = h;
            let f = |y: Vec3| model.eval_union_batch(&ctx, &[y], UnionMode::Smooth).unwrap()[0].d;
            let fd = (f(x + e) - f(x - e)) / (2.0 * h);
            worst_x = worst_x.max(rel_err(fd, s0.grad[k], 1e-3));
        }
    }
    outcome(
        worst_param < 1e-4 && worst_x < 1e-5,
        format!("max param rel err {worst_param:.2e} over {} params, max spatial rel err {worst_x:.2e} at 100 points", idx.len()),
    )
}

fn criterion_2() -> Outcome {
    let s = arm();
    let elbow = s.joint_index("elbow").unwrap();
    let mut rc = RigidnessCoeffs::new(2);
    rc.alpha = vec![2.0, 1.3, 2.6, 2.0];
    rc.beta = vec![0.0, 0.2, -0.1, 0.0];
    let mut exact = true;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10_000 {
        let (w1, w2) = blend_weights(rng.gen_range(1e-3..1e3), rng.gen_range(1e-3..1e3)).unwrap();
        exact &= w1 + w2 == 1.0;
    }
    let mut worst_gap: f64 = 0.0;
    let mut worst_sum: f64 = 0.0;
    for theta in [15.0, 45.0, 90.0] {
        let pose = elbow_pose(&s, theta);
        let ctx = PoseContext::new(&s, &Pose::identity(2), &pose, &DeformOptions::default()).unwrap();
        let frames = bone_frames(&s, &pose).unwrap();
        let j = s.posed_joint(&pose, elbow);
        let normal = section_normal(&s, &frames, &pose, 0, 1, elbow);
        let u = normal.cross(&Vec3::z()).normalize();
        let v = normal.cross(&u);
        for _ in 0..200 {
            let x = j + u * rng.gen_range(-0.06..0.06) + v * rng.gen_range(-0.06..0.06);
            let rest: Vec<Vec3> = (0..2)
                .map(|n| {
                    let p = &ctx.parts[n];
                    s.rest_frame(n).from_local(&p.canonicalize_local(&p.to_local(&x), &rc))
                })
                .collect();
            worst_gap = worst_gap.max((rest[0] - rest[1]).norm());
            let w: Vec<f64> = (0..2)
                .map(|n| {
                    let p = &ctx.parts[n];
                    p.seams[0].weight::<f64>(p.to_local(&x).into(), p.seams[0].coeffs(&rc))
                })
                .collect();
            worst_sum = worst_sum.max((w[0] + w[1] - 1.0).abs());
        }
    }
    outcome(
        exact && worst_gap < 1e-9,
        format!("w1+w2==1 exactly: {exact}; cross-part weight sum deviation {worst_sum:.1e}; max section canonical gap {worst_gap:.2e} m"),
    )
}

/// Analytic field with one surface (`‖x‖ = r`) or two concentric ones.
struct Shells {
    two: bool,
}

impl Field for Shells {
    fn part_count(&self) -> usize {
        1
    }
    fn union_beta(&self) -> f64 {
        200.0
    }
    fn eval_parts(&self, _pose: &Pose, xs: &[Vec3]) -> unif_core::Result<PartSamples> {
        let (mut d, mut g) = (Vec::new(), Vec::new());
        for x in xs {
            let r = x.norm();
            let radial = x / r;
            if self.two {
                let t = r - 0.1;
                d.push(t.abs() - 0.05);
                g.push(radial * t.signum());
            } else {
                d.push(r - 0.15);
                g.push(radial);
            }
        }
        Ok(PartSamples { d: vec![d], grad: vec![g] })
    }
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut bounds_ok, mut gap_ok, mut gapped) = (true, true, 0);
    let mut worst_gap_err: f64 = 0.0;
    for _ in 0..100_000 {
        let n = rng.gen_range(2..9);
        let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (m, _) = union_min(&d).unwrap();
        let max_delta = d.iter().map(|v| v - m).fold(0.0, f64::max);
        let u = union_smooth(&d, 200.0).unwrap();
        bounds_ok &= m <= u && u <= m + max_delta;
        let mut sorted = d.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted[1] - sorted[0] > 0.1 {
            gapped += 1;
            worst_gap_err = worst_gap_err.max(u - m);
            gap_ok &= (u - m).abs() < 1e-6;
        }
    }
    outcome(
        bounds_ok && gap_ok,
        format!("bounds hold: {bounds_ok}; {gapped} gapped vectors, max |smooth - min| {worst_gap_err:.1e}"),
    )
}

fn point_triangle_brute(p: &Vec3, t: &[Vec3; 3]) -> f64 {
    // plane projection when it lands inside, else the nearest edge
    let [a, b, c] = t;
    let n = (b - a).cross(&(c - a)).normalize();
    let q = p - n * n.dot(&(p - a));
    let inside = [(a, b), (b, c), (c, a)].iter().all(|(u, v)| (*v - *u).cross(&(q - *u)).dot(&n) >= 0.0);
    if inside {
        return (p - q).norm();
    }
    [(a, b), (b, c), (c, a)]
        .iter()
        .map(|(u, v)| {
            let e = *v - *u;
            let s = ((p - *u).dot(&e) / e.norm_squared()).clamp(0.0, 1.0);
            (p - (*u + e * s)).norm()
        })
        .fold(f64::INFINITY, f64::min)
}

fn criterion_8() -> Outcome {
    let grid = Grid::from_fn(Aabb::cube(Vec3::zeros(), 0.1).unwrap(), 24, |x| {
        (x - Vec3::new(0.02, 0.0, 0.0)).norm() - 0.06
    })
    .unwrap();
    let mesh = marching_cubes(&grid, 0.0).unwrap();
    let index = MeshIndex::new(&mesh).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let p = Vec3::new(rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15));
        let brute = (0..mesh.triangles.len()).map(|t| point_triangle_brute(&p, &mesh.triangle(t))).fold(f64::INFINITY, f64::min);
        worst = worst.max((index.distance(&p) - brute).abs());
    }
    let pts = sample_mesh(&mesh, 20_000, 9).unwrap();
    let r = chamfer_and_f1(&pts, &mesh, 1.0, 20_000, 9).unwrap();
    outcome(
        worst < 1e-9 && r.f1_pct > 99.9 && r.chamfer_mm < 1e-6,
        format!("max |bvh - brute| {worst:.1e} m; self f1 {:.3}%, chamfer {:.1e} mm", r.f1_pct, r.chamfer_mm),
    )
}

fn criterion_9() -> Outcome {
    let grid = Grid::from_fn(Aabb::cube(Vec3::zeros(), 1.0).unwrap(), 64, |x| x.norm() - 0.5).unwrap();
    let mesh = marching_cubes(&grid, 0.0).unwrap();
    let h = grid.cell_diagonal();
    let worst = mesh.vertices.iter().map(|v| (v.norm() - 0.5).abs()).fold(0.0, f64::max);
    let chi = mesh.euler_characteristic();
    outcome(worst <= h && chi == 2, format!("max radius error {worst:.2e} (cell diagonal {h:.2e}), Euler characteristic {chi}"))
}

struct DeskRun {
    model: UnifModel,
    logs: Vec<EpochLog>,
    model_hash: String,
    seconds: f64,
}

fn desk_data() -> (Skeleton, CapsuleBody, Vec<ScanFrame>) {
    let s = arm();
    let body = CapsuleBody::uniform(2, DESK_RADIUS).unwrap();
    let sched: PoseSchedule = "sweep:elbow:0:90".parse().unwrap();
    let frames = generate_sequence(&s, &body, &sched, DESK_FRAMES, 2000, DESK_SEED).unwrap();
    (s, body, frames)
}

fn desk_train() -> DeskRun {
    let (s, _, frames) = desk_data();
    let start = Instant::now();
    let cfg = ModelConfig::default();
    let model = UnifModel::new(s, cfg, DESK_SEED).unwrap();
    let tc = TrainConfig {
        epochs: DESK_EPOCHS,
        seed: DESK_SEED,
        counts: SampleCounts { surface: 128, local: 96, global: 32 },
        ..TrainConfig::default()
    };
    let (model, logs) = train(&tc, &frames, model).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    model.save(&path).unwrap();
    let model_hash = format!("{:x}", Sha256::digest(std::fs::read(&path).unwrap()));
    DeskRun { model, logs, model_hash, seconds: start.elapsed().as_secs_f64() }
}

fn part_box(s: &Skeleton, pose: &Pose, n: usize) -> Aabb {
    let [a, b] = s.bones()[n];
    let (pa, pb) = (s.posed_joint(pose, a), s.posed_joint(pose, b));
    let pad = Vec3::repeat(DESK_RADIUS + 0.04);
    Aabb::new(pa.inf(&pb) - pad, pa.sup(&pb) + pad).unwrap()
}

fn union_box(s: &Skeleton, pose: &Pose) -> Aabb {
    Aabb::around_pose(s, pose, DESK_RADIUS + 0.04).unwrap()
}

/// Ground-truth visible samples at `pose`, labelled by nearest capsule.
fn labelled_truth(s: &Skeleton, body: &CapsuleBody, pose: &Pose) -> (Vec<Vec3>, Vec<usize>) {
    let f = generate_frame(s, body, pose, GT_POINTS, DESK_SEED + 1).unwrap();
    let labels = f.points.iter().map(|x| body.union_sdf(s, pose, x).unwrap().1).collect();
    (f.points, labels)
}

fn criterion_3(run: &DeskRun) -> Outcome {
    let (s, body, _) = desk_data();
    let mut pass = run.seconds < 1800.0;
    let mut detail = format!("trained {DESK_EPOCHS} epochs in {:.0} s;", run.seconds);
    for theta in [0.0, 90.0] {
        let pose = elbow_pose(&s, theta);
        let (pts, labels) = labelled_truth(&s, &body, &pose);
        let ctx = run.model.pose_context(&pose).unwrap();
        let d = run.model.eval_part_values(&ctx, &pts).unwrap();
        for n in 0..2 {
            let own: Vec<Vec3> = pts.iter().zip(&labels).filter(|(_, &l)| l == n).map(|(p, _)| *p).collect();
            let mesh = extract_part(&run.model, &pose, n, part_box(&s, &pose, n), EXTRACT_RES).unwrap();
            let dist = if mesh.is_empty() { f64::INFINITY } else { p2s(&own, &mesh).unwrap() };
            let hits = (0..pts.len()).filter(|&i| labels[i] == n && (d[n][i] < d[1 - n][i])).count();
            let pct = 100.0 * hits as f64 / own.len() as f64;
            pass &= dist < 5.0 && pct > 95.0;
            detail += &format!(" θ={theta}° part {n}: p2s {dist:.2} mm, assigned {pct:.1}%;");
        }
    }
    outcome(pass, detail)
}

fn union_chamfer(model: &UnifModel, s: &Skeleton, body: &CapsuleBody, pose: &Pose) -> f64 {
    let truth = generate_frame(s, body, pose, GT_POINTS, DESK_SEED + 2).unwrap();
    let mesh = extract_union(model, pose, union_box(s, pose), EXTRACT_RES).unwrap();
    if mesh.is_empty() {
        return f64::INFINITY;
    }
    chamfer_and_f1(&truth.points, &mesh, 1.0, GT_POINTS, DESK_SEED + 3).unwrap().chamfer_mm
}

fn criterion_4(run: &DeskRun) -> Outcome {
    let (s, body, frames) = desk_data();
    let pose = elbow_pose(&s, 60.0);
    let held_out = frames.iter().all(|f| f.pose != pose);
    let with = union_chamfer(&run.model, &s, &body, &pose);
    let mut no_aps = run.model.clone();
    no_aps.config.deform.aps = false;
    let without = union_chamfer(&no_aps, &s, &body, &pose);
    outcome(
        held_out && with < 8.0 && without > with,
        format!("θ=60° held out: {held_out}; chamfer with seaming {with:.2} mm, without {without:.2} mm"),
    )
}

fn criterion_5(run: &DeskRun) -> Outcome {
    let s = arm();
    let pose = Pose::identity(2);
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let frame = ScanFrame {
        points: (0..500)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize() * 0.15)
            .collect(),
        normals: vec![Vec3::x(); 500],
        pose: pose.clone(),
        frame_id: 0,
    };
    let frame = ScanFrame { normals: frame.points.iter().map(|p| p.normalize()).collect(), ..frame };
    let batch: SampleBatch = sample_batch(&frame, SampleCounts { surface: 500, local: 2000, global: 2000 }, 0.1, 1.5, 6).unwrap();
    let one = perim_loss(&Shells { two: false }, &batch, &pose, PERIM_BETA).unwrap();
    let two = perim_loss(&Shells { two: true }, &batch, &pose, PERIM_BETA).unwrap();
    let counts: Vec<usize> = (0..2)
        .map(|n| extract_part(&run.model, &pose, n, part_box(&s, &pose, n), EXTRACT_RES).unwrap().connected_components())
        .collect();
    let union: Mesh = extract_union(&run.model, &pose, union_box(&s, &pose), EXTRACT_RES).unwrap();
    outcome(
        two > one && counts.iter().all(|&c| c == 1),
        format!(
            "perim one shell {one:.4}, two shells {two:.4}; components per part at θ=0 {counts:?}, union mesh {}",
            union.connected_components()
        ),
    )
}

fn criterion_6(run: &DeskRun) -> Outcome {
    let (s, _, frames) = desk_data();
    let elbow = s.joint_index("elbow").unwrap();
    let (mut worst_d, mut worst_angle): (f64, f64) = (0.0, 0.0);
    for f in &frames {
        let bf = bone_frames(&s, &f.pose).unwrap();
        let ctx = run.model.pose_context(&f.pose).unwrap();
        for (n, nb) in [(0, 1), (1, 0)] {
            let x = s.posed_joint_on_bone(&f.pose, n, elbow);
            let ps = run.model.eval_parts(&ctx, &[x]).unwrap();
            let nj = section_normal(&s, &bf, &f.pose, n, nb, elbow);
            let g = ps.grad[n][0];
            worst_d = worst_d.max(ps.d[n][0].abs());
            worst_angle = worst_angle.max((g.dot(&nj) / g.norm()).clamp(-1.0, 1.0).acos().to_degrees());
        }
    }
    outcome(
        worst_d < 0.002 && worst_angle < 15.0,
        format!("over {} training poses: max |d| at joint {:.2} mm, max normal angle {worst_angle:.1}°", frames.len(), worst_d * 1000.0),
    )
}

fn criterion_10(a: &DeskRun, b: &DeskRun) -> Outcome {
    let same_log = log_csv(&a.logs) == log_csv(&b.logs);
    let same_model = a.model_hash == b.model_hash;
    outcome(same_log && same_model, format!("identical loss logs: {same_log}; model sha256 equal: {same_model}"))
}

fn main() {
    let only: Option<Vec<u32>> =
        std::env::var("UNIF_ACCEPTANCE").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |c: u32| only.as_ref().map_or(true, |o| o.contains(&c));
    let names = [
        "",
        "gradient integrity",
        "seam closure",
        "partition from motion",
        "novel pose with seaming",
        "perimeter suppression",
        "bone limit and section normal",
        "union operator bounds",
        "metrics oracle equivalence",
        "marching cubes fidelity",
        "reproducibility",
    ];
    let mut failed = Vec::new();
    let mut report = |c: u32, o: Outcome| {
        println!("criterion {c:>2} {:<30} {}  {}", names[c as usize], if o.pass { "PASS" } else { "FAIL" }, o.detail);
        std::io::stdout().flush().unwrap();
        if !o.pass {
            failed.push(c);
        }
    };
    let cheap: [(u32, fn() -> Outcome); 5] =
        [(1, criterion_1), (2, criterion_2), (7, criterion_7), (8, criterion_8), (9, criterion_9)];
    for (c, f) in cheap {
        if wanted(c) {
            report(c, f());
        }
    }
    if [3, 4, 5, 6, 10].iter().any(|&c| wanted(c)) {
        let run = desk_train();
        for (c, f) in [(3, criterion_3 as fn(&DeskRun) -> Outcome), (4, criterion_4), (5, criterion_5), (6, criterion_6)] {
            if wanted(c) {
                report(c, f(&run));
            }
        }
        if wanted(10) {
            report(10, criterion_10(&run, &desk_train()));
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
