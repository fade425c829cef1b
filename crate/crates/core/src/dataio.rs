//! Synthetic articulated scans of capsule bodies and their on-disk format.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mix_seed;
use crate::ply;
use crate::skeleton::{bone_frames, poses_from_json, poses_to_json, rotation, Frame, Pose, Skeleton, Vec3};

/// Scan points keep only samples with union SDF at least this value.
pub const VISIBILITY_EPS: f64 = -1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ScanFrame {
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub pose: Pose,
    pub frame_id: usize,
}

impl ScanFrame {
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Empty("scan frame"));
        }
        if self.points.len() != self.normals.len() {
            return Err(Error::Shape("points and normals differ in length".into()));
        }
        if self.normals.iter().any(|n| (n.norm() - 1.0).abs() > 1e-6) {
            return Err(Error::Degenerate("normals must be unit length".into()));
        }
        Ok(())
    }
}

/// Per-bone capsules; radius along the bone is `r0 + a·sin²(πs)`, `s ∈ [0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapsuleBody {
    pub radii: Vec<f64>,
    #[serde(default)]
    pub bulge: Vec<f64>,
}

impl CapsuleBody {
    pub fn new(radii: Vec<f64>) -> Result<Self> {
        let n = radii.len();
        Self::with_bulge(radii, vec![0.0; n])
    }

    pub fn uniform(parts: usize, radius: f64) -> Result<Self> {
        Self::new(vec![radius; parts])
    }

    pub fn with_bulge(radii: Vec<f64>, bulge: Vec<f64>) -> Result<Self> {
        if radii.len() != bulge.len() {
            return Err(Error::Shape("one bulge amplitude per radius".into()));
        }
        for (r, a) in radii.iter().zip(&bulge) {
            if !(r.is_finite() && a.is_finite() && *r > 0.0 && r + a.min(0.0) > 0.0) {
                return Err(Error::Config(format!("capsule radius must stay positive (r={r}, bulge={a})")));
            }
        }
        Ok(Self { radii, bulge })
    }

    fn check(&self, skeleton: &Skeleton) -> Result<()> {
        if self.radii.len() != skeleton.part_count() {
            return Err(Error::Shape(format!(
                "{} capsule radii for {} bones",
                self.radii.len(),
                skeleton.part_count()
            )));
        }
        Ok(())
    }

    fn radius_at(&self, n: usize, s: f64) -> (f64, f64) {
        let a = self.bulge.get(n).copied().unwrap_or(0.0);
        let sn = (PI * s).sin();
        (self.radii[n] + a * sn * sn, a * PI * (2.0 * PI * s).sin())
    }

    /// Capsule field of bone `n` in its local frame with its gradient.
    fn local_sdf(&self, skeleton: &Skeleton, n: usize, x: &Vec3) -> (f64, Vec3) {
        let len = skeleton.bone_length(n);
        let s = ((x.x + 0.5 * len) / len).clamp(0.0, 1.0);
        let c = Vec3::new(-0.5 * len + s * len, 0.0, 0.0);
        let rel = x - c;
        let dist = rel.norm();
        let (r, dr) = self.radius_at(n, s);
        let radial = if dist > 0.0 { rel / dist } else { Vec3::y() };
        let grad = if s > 0.0 && s < 1.0 { radial - Vec3::x() * (dr / len) } else { radial };
        (dist - r, grad)
    }

    /// Field of the capsule around bone `n` at `pose` and its unit outward normal.
    pub fn capsule_sdf(&self, skeleton: &Skeleton, frames: &[Frame], n: usize, x: &Vec3) -> (f64, Vec3) {
        let (d, g) = self.local_sdf(skeleton, n, &frames[n].to_local(x));
        (d, (frames[n].rot * g).normalize())
    }

    /// Union field (minimum over capsules) and the index of the nearest capsule.
    pub fn union_sdf(&self, skeleton: &Skeleton, pose: &Pose, x: &Vec3) -> Result<(f64, usize)> {
        self.check(skeleton)?;
        let frames = bone_frames(skeleton, pose)?;
        Ok(self.union_sdf_frames(skeleton, &frames, x))
    }

    pub fn union_sdf_frames(&self, skeleton: &Skeleton, frames: &[Frame], x: &Vec3) -> (f64, usize) {
        (0..self.radii.len())
            .map(|n| (self.capsule_sdf(skeleton, frames, n, x).0, n))
            .fold((f64::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a })
    }

    // side area by midpoint quadrature; caps are two hemispheres of radius r0
    fn areas(&self, skeleton: &Skeleton, n: usize) -> (f64, f64) {
        let len = skeleton.bone_length(n);
        let k = 256;
        let side: f64 = (0..k)
            .map(|i| {
                let s = (i as f64 + 0.5) / k as f64;
                let (r, dr) = self.radius_at(n, s);
                2.0 * PI * r * (1.0 + (dr / len).powi(2)).sqrt() * len / k as f64
            })
            .sum();
        (side, 4.0 * PI * self.radii[n] * self.radii[n])
    }

    /// Area-uniform point on capsule `n` in its local frame, with the local normal
    /// and the index of the bone it was drawn from.
    fn sample_local(&self, skeleton: &Skeleton, n: usize, side: f64, caps: f64, rng: &mut impl Rng) -> (Vec3, Vec3) {
        let len = skeleton.bone_length(n);
        let r0 = self.radii[n];
        if rng.gen::<f64>() * (side + caps) < caps {
            let mut d = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
            while d.norm() < 1e-12 {
                d = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
            }
            let d = d.normalize();
            let end = if d.x < 0.0 { -0.5 * len } else { 0.5 * len };
            return (Vec3::new(end, 0.0, 0.0) + d * r0, d);
        }
        let a = self.bulge.get(n).copied().unwrap_or(0.0).abs();
        let bound = (r0 + a) * (1.0 + (a * PI / len).powi(2)).sqrt();
        loop {
            let s: f64 = rng.gen();
            let (r, dr) = self.radius_at(n, s);
            if rng.gen::<f64>() * bound <= r * (1.0 + (dr / len).powi(2)).sqrt() {
                let phi = rng.gen::<f64>() * 2.0 * PI;
                let radial = Vec3::new(0.0, phi.cos(), phi.sin());
                let p = Vec3::new(-0.5 * len + s * len, 0.0, 0.0) + radial * r;
                let normal = (radial - Vec3::x() * (dr / len)).normalize();
                return (p, normal);
            }
        }
    }
}

/// Samples the visible surface of the posed body.
pub fn generate_frame(
    skeleton: &Skeleton,
    body: &CapsuleBody,
    pose: &Pose,
    points_per_frame: usize,
    seed: u64,
) -> Result<ScanFrame> {
    generate_frame_with(skeleton, body, pose, points_per_frame, seed, 0.0, 0)
}

pub fn generate_frame_with(
    skeleton: &Skeleton,
    body: &CapsuleBody,
    pose: &Pose,
    points_per_frame: usize,
    seed: u64,
    jitter: f64,
    frame_id: usize,
) -> Result<ScanFrame> {
    body.check(skeleton)?;
    if points_per_frame == 0 {
        return Err(Error::Empty("points per frame"));
    }
    let frames = bone_frames(skeleton, pose)?;
    let areas: Vec<(f64, f64)> = (0..skeleton.part_count()).map(|n| body.areas(skeleton, n)).collect();
    let pick = WeightedIndex::new(areas.iter().map(|(s, c)| s + c)).map_err(|e| Error::Degenerate(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, jitter.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut points = Vec::with_capacity(points_per_frame);
    let mut normals = Vec::with_capacity(points_per_frame);
    let max_tries = 1000 * points_per_frame;
    let mut tries = 0;
    while points.len() < points_per_frame {
        tries += 1;
        if tries > max_tries {
            return Err(Error::Degenerate("body surface is almost entirely hidden".into()));
        }
        let n = pick.sample(&mut rng);
        let (p, nl) = body.sample_local(skeleton, n, areas[n].0, areas[n].1, &mut rng);
        let x = frames[n].from_local(&p);
        if body.union_sdf_frames(skeleton, &frames, &x).0 < VISIBILITY_EPS {
            continue;
        }
        let x = if jitter > 0.0 {
            x + Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng))
        } else {
            x
        };
        points.push(x);
        normals.push((frames[n].rot * nl).normalize());
    }
    Ok(ScanFrame { points, normals, pose: pose.clone(), frame_id })
}

/// Pose from per-joint bend angles (radians) about world `z` at each joint's
/// rest position; bones inherit their parent's motion. Root angles are ignored.
pub fn pose_from_joint_angles(skeleton: &Skeleton, angles: &[f64]) -> Result<Pose> {
    if angles.len() != skeleton.joint_count() {
        return Err(Error::Shape(format!("{} angles for {} joints", angles.len(), skeleton.joint_count())));
    }
    let n = skeleton.part_count();
    let mut motions: Vec<Option<Frame>> = vec![None; n];
    // bones are resolved once their head joint's parent bone is known
    for _ in 0..n {
        for b in 0..n {
            if motions[b].is_some() {
                continue;
            }
            let head = skeleton.bones()[b][0];
            let parent = match skeleton.bone_of_joint(head) {
                None => Some(Frame::identity()),
                Some(pb) => motions[pb],
            };
            if let Some(pm) = parent {
                let m = if skeleton.bone_of_joint(head).is_some() {
                    let c = skeleton.joints()[head].rest_pos;
                    let r = rotation(&Vec3::z(), angles[head]);
                    pm.compose(&Frame::new(r, c - r * c))
                } else {
                    pm
                };
                motions[b] = Some(m);
            }
        }
    }
    Ok(Pose { motions: motions.into_iter().map(|m| m.expect("tree skeleton")).collect() })
}

#[derive(Clone, Debug, PartialEq)]
pub enum PoseSchedule {
    Static,
    /// Bend one joint linearly from `from` to `to` (degrees) over the sequence.
    Sweep { joint: String, from: f64, to: f64 },
    /// Gaussian random walk of every bendable joint, step std in degrees,
    /// clamped to ±90°.
    Walk { step: f64 },
}

impl FromStr for PoseSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::Config(format!("bad number `{v}` in schedule `{s}`")))
        };
        match parts.as_slice() {
            ["static"] => Ok(Self::Static),
            ["sweep", joint, from, to] => Ok(Self::Sweep { joint: joint.to_string(), from: num(from)?, to: num(to)? }),
            ["walk", step] => Ok(Self::Walk { step: num(step)? }),
            _ => Err(Error::Config(format!(
                "unknown schedule `{s}` (expected static, sweep:<joint>:<from>:<to> or walk:<step>)"
            ))),
        }
    }
}

impl fmt::Display for PoseSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Static => write!(f, "static"),
            Self::Sweep { joint, from, to } => write!(f, "sweep:{joint}:{from}:{to}"),
            Self::Walk { step } => write!(f, "walk:{step}"),
        }
    }
}

impl PoseSchedule {
    pub fn poses(&self, skeleton: &Skeleton, frames: usize, seed: u64) -> Result<Vec<Pose>> {
        if frames == 0 {
            return Err(Error::Empty("frame count"));
        }
        let nj = skeleton.joint_count();
        match self {
            Self::Static => Ok(vec![Pose::identity(skeleton.part_count()); frames]),
            Self::Sweep { joint, from, to } => {
                let j = skeleton
                    .joint_index(joint)
                    .or_else(|| joint.parse::<usize>().ok().filter(|&j| j < nj))
                    .ok_or_else(|| Error::Config(format!("unknown joint `{joint}`")))?;
                if skeleton.bone_of_joint(j).is_none() || !skeleton.bones().iter().any(|b| b[0] == j) {
                    return Err(Error::Config(format!("joint `{joint}` does not connect two bones")));
                }
                (0..frames)
                    .map(|i| {
                        let t = if frames == 1 { 0.0 } else { i as f64 / (frames - 1) as f64 };
                        let mut angles = vec![0.0; nj];
                        angles[j] = (from + (to - from) * t).to_radians();
                        pose_from_joint_angles(skeleton, &angles)
                    })
                    .collect()
            }
            Self::Walk { step } => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, u64::MAX));
                let noise = Normal::new(0.0, step.abs().to_radians()).map_err(|e| Error::Config(e.to_string()))?;
                let mut angles = vec![0.0; nj];
                let mut out = Vec::with_capacity(frames);
                for i in 0..frames {
                    if i > 0 {
                        for a in angles.iter_mut() {
                            *a = (*a + noise.sample(&mut rng)).clamp(-PI / 2.0, PI / 2.0);
                        }
                    }
                    out.push(pose_from_joint_angles(skeleton, &angles)?);
                }
                Ok(out)
            }
        }
    }
}

pub fn generate_sequence(
    skeleton: &Skeleton,
    body: &CapsuleBody,
    schedule: &PoseSchedule,
    frames: usize,
    points_per_frame: usize,
    seed: u64,
) -> Result<Vec<ScanFrame>> {
    schedule
        .poses(skeleton, frames, seed)?
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            generate_frame_with(skeleton, body, pose, points_per_frame, mix_seed(seed, i as u64), 0.0, i)
        })
        .collect()
}

/// Frame indices of the train / interpolation / extrapolation splits: the last
/// 20% is held out for extrapolation; the rest gives every tenth frame to
/// training and the fifth of every ten to interpolation.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub interp: Vec<usize>,
    pub extrap: Vec<usize>,
}

pub fn splits(frames: usize) -> Splits {
    let head = frames - frames / 5;
    Splits {
        train: (0..head).step_by(10).collect(),
        interp: (5..head).step_by(10).collect(),
        extrap: (head..frames).step_by(10).collect(),
    }
}

fn pose_path(ply_path: &Path) -> PathBuf {
    let stem = ply_path.file_stem().and_then(|s| s.to_str()).unwrap_or("frame");
    ply_path.with_file_name(format!("{stem}.pose.json"))
}

/// Writes `path` (binary PLY with x, y, z, nx, ny, nz doubles) and its sibling
/// `<stem>.pose.json`.
pub fn save_frame(frame: &ScanFrame, path: &Path) -> Result<()> {
    frame.validate()?;
    let mut out = format!(
        "ply\nformat binary_little_endian 1.0\ncomment frame {}\nelement vertex {}\n\
         property double x\nproperty double y\nproperty double z\n\
         property double nx\nproperty double ny\nproperty double nz\nend_header\n",
        frame.frame_id,
        frame.points.len()
    )
    .into_bytes();
    out.reserve(48 * frame.points.len());
    for (p, n) in frame.points.iter().zip(&frame.normals) {
        for v in p.iter().chain(n.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
    let pp = pose_path(path);
    std::fs::write(&pp, poses_to_json(std::slice::from_ref(&frame.pose))?).map_err(|e| Error::io(&pp, e))
}

pub fn load_frame(path: &Path) -> Result<ScanFrame> {
    let ply = ply::read(path)?;
    let v = ply.element("vertex").ok_or_else(|| Error::format(path, "no vertex element"))?;
    let col = |name: &str| v.column(name).ok_or_else(|| Error::format(path, format!("missing `{name}` property")));
    let (x, y, z) = (col("x")?, col("y")?, col("z")?);
    let (nx, ny, nz) = (col("nx")?, col("ny")?, col("nz")?);
    let points = (0..v.count).map(|i| Vec3::new(x[i], y[i], z[i])).collect();
    let normals = (0..v.count).map(|i| Vec3::new(nx[i], ny[i], nz[i])).collect();
    let pp = pose_path(path);
    let text = std::fs::read_to_string(&pp).map_err(|e| Error::io(&pp, e))?;
    let pose = poses_from_json(&text)
        .map_err(|e| Error::format(&pp, e.to_string()))?
        .into_iter()
        .next()
        .ok_or_else(|| Error::format(&pp, "no pose"))?;
    let frame_id = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()).unwrap_or(0);
    Ok(ScanFrame { points, normals, pose, frame_id })
}

/// Contents of `dataset.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub skeleton: String,
    pub schedule: String,
    pub frames: usize,
    pub points_per_frame: usize,
    pub seed: u64,
    pub body: CapsuleBody,
    pub splits: Splits,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub skeleton: Skeleton,
    pub meta: DatasetMeta,
    pub frames: Vec<ScanFrame>,
}

pub fn frame_file(dir: &Path, i: usize) -> PathBuf {
    dir.join("frames").join(format!("{i:04}.ply"))
}

/// Writes `frames/NNNN.ply`, `frames/NNNN.pose.json`, `skeleton.json` and `dataset.json`.
pub fn save_dataset(dir: &Path, skeleton: &Skeleton, meta: &DatasetMeta, frames: &[ScanFrame]) -> Result<()> {
    let fdir = dir.join("frames");
    std::fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
    for (i, f) in frames.iter().enumerate() {
        save_frame(f, &frame_file(dir, i))?;
    }
    let sp = dir.join("skeleton.json");
    std::fs::write(&sp, skeleton.to_json()?).map_err(|e| Error::io(&sp, e))?;
    let mp = dir.join("dataset.json");
    std::fs::write(&mp, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(&mp, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let sp = dir.join("skeleton.json");
    let skeleton = Skeleton::from_json(&std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?)?;
    let mp = dir.join("dataset.json");
    let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?)
        .map_err(|e| Error::format(&mp, e.to_string()))?;
    let frames = (0..meta.frames)
        .map(|i| load_frame(&frame_file(dir, i)))
        .collect::<Result<Vec<_>>>()?;
    for f in &frames {
        f.pose.validate(skeleton.part_count())?;
    }
    Ok(Dataset { skeleton, meta, frames })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arm() -> (Skeleton, CapsuleBody) {
        let s = Skeleton::preset("arm2").unwrap();
        (s, CapsuleBody::uniform(2, 0.05).unwrap())
    }

    #[test]
    fn single_bone_points_lie_on_capsule() {
        let s = Skeleton::preset("single").unwrap();
        let body = CapsuleBody::uniform(1, 0.04).unwrap();
        let f = generate_frame(&s, &body, &Pose::identity(1), 2000, 1).unwrap();
        let (a, b) = (Vec3::new(-0.15, 0.0, 0.0), Vec3::new(0.15, 0.0, 0.0));
        for (p, n) in f.points.iter().zip(&f.normals) {
            let t = ((p - a).dot(&(b - a)) / (b - a).norm_squared()).clamp(0.0, 1.0);
            let c = a + (b - a) * t;
            assert!(((p - c).norm() - 0.04).abs() < 1e-9);
            assert!(n.dot(&(p - c)) > 0.0);
            assert!((n.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn samples_are_visible_and_on_union_surface() {
        let (s, body) = arm();
        let pose = PoseSchedule::from_str("sweep:elbow:0:90").unwrap().poses(&s, 3, 0).unwrap()[2].clone();
        let f = generate_frame(&s, &body, &pose, 3000, 2).unwrap();
        for p in &f.points {
            let (d, _) = body.union_sdf(&s, &pose, p).unwrap();
            assert!(d.abs() < 1e-9, "{d}");
        }
    }

    #[test]
    fn bulged_normals_match_field_gradient() {
        let s = Skeleton::preset("single").unwrap();
        let body = CapsuleBody::with_bulge(vec![0.04], vec![0.01]).unwrap();
        let pose = Pose::identity(1);
        let f = generate_frame(&s, &body, &pose, 300, 3).unwrap();
        let h = 1e-6;
        for (p, n) in f.points.iter().zip(&f.normals) {
            assert!(body.union_sdf(&s, &pose, p).unwrap().0.abs() < 1e-9);
            let g = Vec3::from_fn(|k, _| {
                let mut e = Vec3::zeros();
                e[k] = h;
                (body.union_sdf(&s, &pose, &(p + e)).unwrap().0 - body.union_sdf(&s, &pose, &(p - e)).unwrap().0)
                    / (2.0 * h)
            });
            assert!((g.normalize() - n).norm() < 1e-5);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (s, body) = arm();
        let sched = PoseSchedule::Walk { step: 10.0 };
        let a = generate_sequence(&s, &body, &sched, 4, 100, 9).unwrap();
        let b = generate_sequence(&s, &body, &sched, 4, 100, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_sequence(&s, &body, &sched, 4, 100, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn static_schedule_repeats_pose_not_samples() {
        let (s, body) = arm();
        let seq = generate_sequence(&s, &body, &PoseSchedule::Static, 3, 50, 1).unwrap();
        assert_eq!(seq[0].pose, seq[2].pose);
        assert_ne!(seq[0].points, seq[1].points);
    }

    #[test]
    fn sweep_brackets_its_range() {
        let (s, _) = arm();
        let poses = PoseSchedule::from_str("sweep:elbow:0:90").unwrap().poses(&s, 5, 0).unwrap();
        assert_eq!(poses[0], Pose::identity(2));
        let r = poses[4].motions[1].rot;
        assert!((r - rotation(&Vec3::z(), PI / 2.0)).abs().max() < 1e-15);
        assert!(PoseSchedule::from_str("sweep:knee:0:90").unwrap().poses(&s, 5, 0).is_err());
        assert!(PoseSchedule::from_str("sweep:elbow:0").is_err());
        assert!(PoseSchedule::from_str("twist").is_err());
    }

    #[test]
    fn joint_angles_keep_joints_connected() {
        let s = Skeleton::preset("arm3").unwrap();
        let pose = pose_from_joint_angles(&s, &[0.0, 0.4, -0.9, 0.0]).unwrap();
        for j in 1..3 {
            let a = s.posed_joint_on_bone(&pose, j - 1, j);
            let b = s.posed_joint_on_bone(&pose, j, j);
            assert!((a - b).norm() < 1e-15);
        }
    }

    #[test]
    fn split_protocol() {
        let sp = splits(100);
        assert_eq!(sp.train, (0..80).step_by(10).collect::<Vec<_>>());
        assert_eq!(sp.interp, vec![5, 15, 25, 35, 45, 55, 65, 75]);
        assert_eq!(sp.extrap, vec![80, 90]);
        assert!(sp.train.iter().all(|i| !sp.interp.contains(i)));
    }

    #[test]
    fn frame_roundtrip_is_bit_exact() {
        let (s, body) = arm();
        let f = generate_frame_with(&s, &body, &Pose::identity(2), 5000, 4, 0.0, 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("0012.ply");
        save_frame(&f, &path).unwrap();
        assert_eq!(load_frame(&path).unwrap(), f);
        let header_len = std::fs::read(&path).unwrap().windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, header_len + 5000 * 48);
    }

    #[test]
    fn missing_normals_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("0000.ply");
        let mut b = b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty double x\nproperty double y\nproperty double z\nend_header\n".to_vec();
        for v in [0.0f64, 1.0, 2.0] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, b).unwrap();
        std::fs::write(dir.path().join("0000.pose.json"), poses_to_json(&[Pose::identity(1)]).unwrap()).unwrap();
        let err = load_frame(&path).unwrap_err().to_string();
        assert!(err.contains("nx"), "{err}");
    }
}
