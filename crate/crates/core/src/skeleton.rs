//! Skeleton topology, bone-centred coordinate frames and pose descriptors.
//!
//! A [`Pose`] stores one rigid motion per bone, applied to the rest skeleton;
//! the identity pose is the rest configuration. Bone frames sit at the bone
//! midpoint with their first axis along the bone.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const WORLD_UP: [f64; 3] = [0.0, 1.0, 0.0];
const WORLD_X: [f64; 3] = [1.0, 0.0, 0.0];
/// Axis reported for a zero rotation.
pub const ZERO_ROTATION_AXIS: [f64; 3] = [0.0, 0.0, 1.0];

/// A rigid transform `x -> rot * x + trans`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub rot: Mat3,
    pub trans: Vec3,
}

impl Frame {
    pub fn identity() -> Self {
        Self {
            rot: Mat3::identity(),
            trans: Vec3::zeros(),
        }
    }

    pub fn new(rot: Mat3, trans: Vec3) -> Self {
        Self { rot, trans }
    }

    /// `R^T (x - t)`
    pub fn to_local(&self, x: &Vec3) -> Vec3 {
        self.rot.tr_mul(&(x - self.trans))
    }

    /// `R x + t`
    pub fn from_local(&self, x: &Vec3) -> Vec3 {
        self.rot * x + self.trans
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &Frame) -> Frame {
        Frame {
            rot: self.rot * other.rot,
            trans: self.rot * other.trans + self.trans,
        }
    }

    pub fn inverse(&self) -> Frame {
        let rt = self.rot.transpose();
        Frame {
            rot: rt,
            trans: -(rt * self.trans),
        }
    }

    /// Infinity norm of `RᵀR − I`, or `None` when the determinant is not +1.
    fn orthonormality_error(&self) -> Option<f64> {
        let e = (self.rot.transpose() * self.rot - Mat3::identity()).abs().max();
        (self.rot.determinant() > 0.0).then_some(e)
    }
}

/// `x ↦ Rᵀ(x − t)` for a frame `(R, t)`.
pub fn to_local(x: &Vec3, frame: &Frame) -> Vec3 {
    frame.to_local(x)
}

pub fn from_local(x: &Vec3, frame: &Frame) -> Vec3 {
    frame.from_local(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    pub rest_pos: Vec3,
}

/// A bone adjacent to some part, and the joint they share.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Neighbor {
    pub bone: usize,
    pub joint: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    joints: Vec<Joint>,
    bones: Vec<[usize; 2]>,
    bone_of_joint: Vec<Option<usize>>,
    rest_frames: Vec<Frame>,
    neighbors: Vec<Vec<Neighbor>>,
}

impl Skeleton {
    pub fn new(joints: Vec<Joint>, bones: Vec<[usize; 2]>) -> Result<Self> {
        let jn = joints.len();
        if jn < 2 {
            return Err(Error::Skeleton("need at least two joints".into()));
        }
        let mut roots = 0;
        for (j, joint) in joints.iter().enumerate() {
            match joint.parent {
                None => roots += 1,
                Some(p) if p >= jn || p == j => {
                    return Err(Error::Skeleton(format!("joint {j} has invalid parent {p}")))
                }
                Some(_) => {}
            }
            if !joint.rest_pos.iter().all(|v| v.is_finite()) {
                return Err(Error::Skeleton(format!("joint {j} position is not finite")));
            }
        }
        if roots != 1 {
            return Err(Error::Skeleton(format!("expected one root joint, found {roots}")));
        }
        for start in 0..jn {
            let mut cur = start;
            let mut steps = 0;
            while let Some(p) = joints[cur].parent {
                cur = p;
                steps += 1;
                if steps > jn {
                    return Err(Error::Skeleton(format!("cycle through joint {start}")));
                }
            }
        }

        let mut bone_of_joint = vec![None; jn];
        for (b, &[head, tail]) in bones.iter().enumerate() {
            if head >= jn || tail >= jn {
                return Err(Error::Skeleton(format!("bone {b} references a missing joint")));
            }
            if joints[tail].parent != Some(head) {
                return Err(Error::Skeleton(format!(
                    "bone {b}: joint {head} is not the parent of joint {tail}"
                )));
            }
            if bone_of_joint[tail].replace(b).is_some() {
                return Err(Error::Skeleton(format!("joint {tail} ends two bones")));
            }
        }
        for (j, joint) in joints.iter().enumerate() {
            if joint.parent.is_some() && bone_of_joint[j].is_none() {
                return Err(Error::Skeleton(format!("joint {j} belongs to no bone")));
            }
        }

        let rest_frames = bones
            .iter()
            .enumerate()
            .map(|(b, &[h, t])| {
                frame_from_endpoints(&joints[h].rest_pos, &joints[t].rest_pos)
                    .ok_or(Error::DegenerateBone { bone: b })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut neighbors = vec![Vec::new(); bones.len()];
        for (n, bn) in bones.iter().enumerate() {
            for (b, bb) in bones.iter().enumerate() {
                if n == b {
                    continue;
                }
                for &j in bn {
                    if bb.contains(&j) {
                        neighbors[n].push(Neighbor { bone: b, joint: j });
                    }
                }
            }
        }

        Ok(Self {
            joints,
            bones,
            bone_of_joint,
            rest_frames,
            neighbors,
        })
    }

    /// Number of parts `N` (one per bone).
    pub fn part_count(&self) -> usize {
        self.bones.len()
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn bones(&self) -> &[[usize; 2]] {
        &self.bones
    }

    pub fn bone_of_joint(&self, j: usize) -> Option<usize> {
        self.bone_of_joint[j]
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    /// Adjacent bones of `n`, each with the joint they share.
    pub fn neighbors(&self, n: usize) -> &[Neighbor] {
        &self.neighbors[n]
    }

    /// Joints of bone `n` shared with another bone (the set `J^(n)`).
    pub fn adjacent_joints(&self, n: usize) -> Vec<usize> {
        let mut js: Vec<usize> = self.neighbors[n].iter().map(|nb| nb.joint).collect();
        js.dedup();
        js.sort_unstable();
        js.dedup();
        js
    }

    pub fn rest_frame(&self, n: usize) -> &Frame {
        &self.rest_frames[n]
    }

    pub fn bone_length(&self, n: usize) -> f64 {
        let [h, t] = self.bones[n];
        (self.joints[t].rest_pos - self.joints[h].rest_pos).norm()
    }

    /// The endpoint of bone `n` that is not `joint`.
    pub fn far_end(&self, n: usize, joint: usize) -> usize {
        let [h, t] = self.bones[n];
        if h == joint {
            t
        } else {
            h
        }
    }

    /// Rest position of joint `j` in the rest local frame of bone `n`.
    pub fn joint_in_bone(&self, n: usize, j: usize) -> Vec3 {
        self.rest_frames[n].to_local(&self.joints[j].rest_pos)
    }

    /// Posed world position of joint `j`, carried by the bone it ends (or the
    /// first bone it starts, for the root).
    pub fn posed_joint(&self, pose: &Pose, j: usize) -> Vec3 {
        let bone = self.bone_of_joint[j]
            .or_else(|| self.bones.iter().position(|b| b[0] == j))
            .expect("validated skeleton: every joint touches a bone");
        pose.motions[bone].from_local(&self.joints[j].rest_pos)
    }

    /// Joints posed by bone `n`'s motion; consistent poses agree at shared joints.
    pub fn posed_joint_on_bone(&self, pose: &Pose, n: usize, j: usize) -> Vec3 {
        pose.motions[n].from_local(&self.joints[j].rest_pos)
    }

    /// Largest distance from the rest joints to their centroid.
    pub fn rest_extent(&self) -> f64 {
        let c = self
            .joints
            .iter()
            .fold(Vec3::zeros(), |acc, j| acc + j.rest_pos)
            / self.joints.len() as f64;
        self.joints
            .iter()
            .map(|j| (j.rest_pos - c).norm())
            .fold(0.0, f64::max)
    }

    /// Built-in skeletons used by the synthetic generator.
    pub fn preset(name: &str) -> Result<Self> {
        let j = |name: &str, parent: Option<usize>, p: [f64; 3]| Joint {
            name: name.to_string(),
            parent,
            rest_pos: Vec3::from(p),
        };
        match name {
            "single" => Self::new(
                vec![j("base", None, [-0.15, 0.0, 0.0]), j("tip", Some(0), [0.15, 0.0, 0.0])],
                vec![[0, 1]],
            ),
            "arm2" => Self::new(
                vec![
                    j("shoulder", None, [0.0, 0.0, 0.0]),
                    j("elbow", Some(0), [0.3, 0.0, 0.0]),
                    j("wrist", Some(1), [0.56, 0.0, 0.0]),
                ],
                vec![[0, 1], [1, 2]],
            ),
            "arm3" => Self::new(
                vec![
                    j("shoulder", None, [0.0, 0.0, 0.0]),
                    j("elbow", Some(0), [0.3, 0.0, 0.0]),
                    j("wrist", Some(1), [0.56, 0.0, 0.0]),
                    j("fingertip", Some(2), [0.72, 0.0, 0.0]),
                ],
                vec![[0, 1], [1, 2], [2, 3]],
            ),
            "star" => Self::new(
                vec![
                    j("pelvis", None, [0.0, 0.0, 0.0]),
                    j("neck", Some(0), [0.0, 0.45, 0.0]),
                    j("left_knee", Some(0), [-0.12, -0.4, 0.0]),
                    j("right_knee", Some(0), [0.12, -0.4, 0.0]),
                    j("head", Some(1), [0.0, 0.65, 0.0]),
                ],
                vec![[0, 1], [0, 2], [0, 3], [1, 4]],
            ),
            other => Err(Error::Skeleton(format!("unknown skeleton preset `{other}`"))),
        }
    }
}

/// Bone frame from its endpoints: first axis along the bone, second axis
/// `normalize(up × dir)` (world-x instead of up when nearly parallel), third
/// axis completing a right-handed basis. `None` for zero-length bones.
pub fn frame_from_endpoints(head: &Vec3, tail: &Vec3) -> Option<Frame> {
    let dir = tail - head;
    let len = dir.norm();
    if !(len > 1e-12) {
        return None;
    }
    let e1 = dir / len;
    let mut up = Vec3::from(WORLD_UP);
    if up.dot(&e1).abs() > 0.99 {
        up = Vec3::from(WORLD_X);
    }
    let e2 = up.cross(&e1).normalize();
    let e3 = e1.cross(&e2);
    Some(Frame {
        rot: Mat3::from_columns(&[e1, e2, e3]),
        trans: (head + tail) * 0.5,
    })
}

/// Per-bone rigid motions relative to the rest skeleton.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub motions: Vec<Frame>,
}

impl Pose {
    pub fn identity(parts: usize) -> Self {
        Self {
            motions: vec![Frame::identity(); parts],
        }
    }

    /// The same rigid motion applied to every bone.
    pub fn rigid(parts: usize, motion: Frame) -> Self {
        Self {
            motions: vec![motion; parts],
        }
    }

    pub fn part_count(&self) -> usize {
        self.motions.len()
    }

    /// Left-multiplies every bone motion by `g`.
    pub fn transformed(&self, g: &Frame) -> Self {
        Self {
            motions: self.motions.iter().map(|m| g.compose(m)).collect(),
        }
    }

    pub fn validate(&self, parts: usize) -> Result<()> {
        if self.motions.len() != parts {
            return Err(Error::Pose(format!(
                "pose has {} bone motions, skeleton has {parts} bones",
                self.motions.len()
            )));
        }
        for (n, m) in self.motions.iter().enumerate() {
            if !m.rot.iter().chain(m.trans.iter()).all(|v| v.is_finite()) {
                return Err(Error::Pose(format!("bone {n} motion is not finite")));
            }
            match m.orthonormality_error() {
                Some(e) if e < 1e-9 => {}
                _ => return Err(Error::Pose(format!("bone {n} rotation is not orthonormal"))),
            }
        }
        Ok(())
    }
}

/// Posed coordinate frame `(R_n, t_n)` of bone `n`.
pub fn bone_frame(skeleton: &Skeleton, pose: &Pose, n: usize) -> Result<Frame> {
    if n >= skeleton.part_count() || n >= pose.part_count() {
        return Err(Error::Shape(format!("bone index {n} out of range")));
    }
    let [h, t] = skeleton.bones[n];
    if skeleton.joints[h].rest_pos == skeleton.joints[t].rest_pos {
        return Err(Error::DegenerateBone { bone: n });
    }
    Ok(pose.motions[n].compose(&skeleton.rest_frames[n]))
}

pub fn bone_frames(skeleton: &Skeleton, pose: &Pose) -> Result<Vec<Frame>> {
    (0..skeleton.part_count())
        .map(|n| bone_frame(skeleton, pose, n))
        .collect()
}

/// Pose condition vector of part `n` from the posed bone frames: for every
/// bone `j`, the nine entries of `R_nᵀR_j` (row-major) followed by
/// `R_nᵀ(t_j − t_n)`.
pub fn pose_condition_from_frames(frames: &[Frame], n: usize) -> Vec<f64> {
    let fnn = &frames[n];
    let mut z = Vec::with_capacity(12 * frames.len());
    for fj in frames {
        let r = fnn.rot.tr_mul(&fj.rot);
        for row in 0..3 {
            for col in 0..3 {
                z.push(r[(row, col)]);
            }
        }
        let t = fnn.rot.tr_mul(&(fj.trans - fnn.trans));
        z.extend_from_slice(t.as_slice());
    }
    z
}

pub fn pose_condition(skeleton: &Skeleton, pose: &Pose, n: usize) -> Result<Vec<f64>> {
    let frames = bone_frames(skeleton, pose)?;
    Ok(pose_condition_from_frames(&frames, n))
}

/// Rotation of a neighbour relative to part `n`, measured against the rest pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeltaRotation {
    pub axis: Vec3,
    pub angle: f64,
    /// Shared joint in part `n`'s local coordinates.
    pub center: Vec3,
}

pub fn relative_delta_rotation(
    skeleton: &Skeleton,
    rest_pose: &Pose,
    pose: &Pose,
    n: usize,
    neighbor: Neighbor,
) -> Result<DeltaRotation> {
    let posed_n = bone_frame(skeleton, pose, n)?;
    let posed_b = bone_frame(skeleton, pose, neighbor.bone)?;
    let rest_n = bone_frame(skeleton, rest_pose, n)?;
    let rest_b = bone_frame(skeleton, rest_pose, neighbor.bone)?;
    let delta = posed_n.rot.tr_mul(&posed_b.rot) * rest_n.rot.tr_mul(&rest_b.rot).transpose();
    let (axis, angle) = axis_angle(&delta);
    Ok(DeltaRotation {
        axis,
        angle,
        center: skeleton.joint_in_bone(n, neighbor.joint),
    })
}

/// Axis-angle decomposition with the angle in `[0, π]`.
pub fn axis_angle(m: &Mat3) -> (Vec3, f64) {
    let v = Vec3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    ) * 0.5;
    let s = v.norm();
    let c = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = s.atan2(c);
    if c >= 0.0 {
        if s > 0.0 {
            return (v / s, angle);
        }
        return (Vec3::from(ZERO_ROTATION_AXIS), 0.0);
    }
    // Past a right angle the symmetric part is better conditioned:
    // (R + Rᵀ)/2 − c I = (1 − c) a aᵀ.
    let sym = ((m + m.transpose()) * 0.5 - Mat3::identity() * c) / (1.0 - c);
    let k = (0..3)
        .max_by(|&a, &b| sym[(a, a)].total_cmp(&sym[(b, b)]))
        .unwrap_or(0);
    let mut axis = sym.column(k).into_owned().normalize();
    if axis.dot(&v) < 0.0 {
        axis = -axis;
    }
    (axis, angle)
}

/// Rodrigues rotation matrix.
pub fn rotation(axis: &Vec3, angle: f64) -> Mat3 {
    let k = axis;
    let kx = Mat3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Mat3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}

// ---------------------------------------------------------------------------
// File formats

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ParentRef {
    Index(usize),
    Name(String),
}

#[derive(Serialize, Deserialize)]
struct JointRecord {
    name: String,
    parent: Option<ParentRef>,
    rest_pos: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct SkeletonFile {
    joints: Vec<JointRecord>,
    bones: Vec<[usize; 2]>,
}

#[derive(Serialize, Deserialize)]
struct PoseRecord {
    #[serde(rename = "R")]
    rot: Vec<[f64; 9]>,
    t: Vec<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
struct PoseFile {
    frames: Vec<PoseRecord>,
}

impl Skeleton {
    pub fn to_json(&self) -> Result<String> {
        let file = SkeletonFile {
            joints: self
                .joints
                .iter()
                .map(|j| JointRecord {
                    name: j.name.clone(),
                    parent: j.parent.map(ParentRef::Index),
                    rest_pos: [j.rest_pos.x, j.rest_pos.y, j.rest_pos.z],
                })
                .collect(),
            bones: self.bones.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SkeletonFile = serde_json::from_str(text)?;
        let names: Vec<&str> = file.joints.iter().map(|j| j.name.as_str()).collect();
        let joints = file
            .joints
            .iter()
            .map(|j| {
                let parent = match &j.parent {
                    None => None,
                    Some(ParentRef::Index(i)) => Some(*i),
                    Some(ParentRef::Name(name)) => Some(
                        names
                            .iter()
                            .position(|n| n == name)
                            .ok_or_else(|| Error::Skeleton(format!("unknown parent `{name}`")))?,
                    ),
                };
                Ok(Joint {
                    name: j.name.clone(),
                    parent,
                    rest_pos: Vec3::from(j.rest_pos),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Skeleton::new(joints, file.bones)
    }
}

fn pose_to_record(pose: &Pose) -> PoseRecord {
    PoseRecord {
        rot: pose
            .motions
            .iter()
            .map(|m| {
                let r = &m.rot;
                [
                    r[(0, 0)],
                    r[(0, 1)],
                    r[(0, 2)],
                    r[(1, 0)],
                    r[(1, 1)],
                    r[(1, 2)],
                    r[(2, 0)],
                    r[(2, 1)],
                    r[(2, 2)],
                ]
            })
            .collect(),
        t: pose.motions.iter().map(|m| [m.trans.x, m.trans.y, m.trans.z]).collect(),
    }
}

fn pose_from_record(rec: &PoseRecord) -> Result<Pose> {
    if rec.rot.len() != rec.t.len() {
        return Err(Error::Pose(format!(
            "{} rotations but {} translations",
            rec.rot.len(),
            rec.t.len()
        )));
    }
    Ok(Pose {
        motions: rec
            .rot
            .iter()
            .zip(&rec.t)
            .map(|(r, t)| Frame::new(Mat3::from_row_slice(r), Vec3::from(*t)))
            .collect(),
    })
}

/// Single pose as a JSON value (`{"R": [...], "t": [...]}`).
pub fn pose_to_value(pose: &Pose) -> serde_json::Value {
    serde_json::to_value(pose_to_record(pose)).expect("pose record serializes")
}

pub fn pose_from_value(value: &serde_json::Value) -> Result<Pose> {
    let rec: PoseRecord = serde_json::from_value(value.clone())?;
    pose_from_record(&rec)
}

pub fn poses_to_json(poses: &[Pose]) -> Result<String> {
    let file = PoseFile {
        frames: poses.iter().map(pose_to_record).collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn poses_from_json(text: &str) -> Result<Vec<Pose>> {
    let file: PoseFile = serde_json::from_str(text)?;
    file.frames.iter().map(pose_from_record).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_joint() -> Skeleton {
        Skeleton::new(
            vec![
                Joint { name: "a".into(), parent: None, rest_pos: Vec3::zeros() },
                Joint { name: "b".into(), parent: Some(0), rest_pos: Vec3::new(0.0, 1.0, 0.0) },
            ],
            vec![[0, 1]],
        )
        .unwrap()
    }

    pub(crate) fn random_rotation(rng: &mut impl Rng) -> Mat3 {
        let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            .normalize();
        rotation(&axis, rng.gen_range(0.0..std::f64::consts::PI))
    }

    #[test]
    fn rest_frame_of_vertical_bone() {
        let s = two_joint();
        let f = bone_frame(&s, &Pose::identity(1), 0).unwrap();
        assert!((f.trans - Vec3::new(0.0, 0.5, 0.0)).norm() < 1e-15);
        assert!((f.rot.column(0) - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
        assert!((f.rot.determinant() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rotated_bone_frame() {
        let s = two_joint();
        let rz = rotation(&Vec3::z(), std::f64::consts::FRAC_PI_2);
        let pose = Pose::rigid(1, Frame::new(rz, Vec3::zeros()));
        let f = bone_frame(&s, &pose, 0).unwrap();
        assert!((f.rot.column(0) - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-15);
        assert!((f.trans - Vec3::new(-0.5, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn frame_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Skeleton::preset("star").unwrap();
        for _ in 0..20 {
            let r = random_rotation(&mut rng);
            let t = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            let g = Frame::new(r, t);
            let pose = Pose::rigid(s.part_count(), g);
            for n in 0..s.part_count() {
                let posed = bone_frame(&s, &pose, n).unwrap();
                let rest = bone_frame(&s, &Pose::identity(s.part_count()), n).unwrap();
                assert!((posed.rot - r * rest.rot).abs().max() < 1e-12);
                assert!((posed.trans - (r * rest.trans + t)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn local_examples() {
        let id = Frame::identity();
        assert_eq!(to_local(&Vec3::new(1.0, 2.0, 3.0), &id), Vec3::new(1.0, 2.0, 3.0));
        let f = Frame::new(rotation(&Vec3::z(), std::f64::consts::FRAC_PI_2), Vec3::new(1.0, 0.0, 0.0));
        let x = to_local(&Vec3::new(1.0, 1.0, 0.0), &f);
        assert!((x - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn local_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let f = Frame::new(random_rotation(&mut rng), Vec3::new(rng.gen(), rng.gen(), rng.gen()));
            let x = Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            assert!((from_local(&to_local(&x, &f), &f) - x).norm() < 1e-12);
        }
    }

    #[test]
    fn pose_condition_identity_frames() {
        let frames = vec![Frame::identity(); 20];
        let z = pose_condition_from_frames(&frames, 3);
        assert_eq!(z.len(), 240);
        for block in z.chunks(12) {
            assert_eq!(&block[..9], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
            assert_eq!(&block[9..], &[0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn pose_condition_self_block_and_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Skeleton::preset("star").unwrap();
        let n = s.part_count();
        let pose = Pose {
            motions: (0..n)
                .map(|_| Frame::new(random_rotation(&mut rng), Vec3::new(rng.gen(), rng.gen(), rng.gen())))
                .collect(),
        };
        let g = Frame::new(random_rotation(&mut rng), Vec3::new(2.0, -1.0, 0.5));
        for part in 0..n {
            let z = pose_condition(&s, &pose, part).unwrap();
            let self_block = &z[12 * part..12 * part + 12];
            for (a, b) in self_block.iter().zip([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]) {
                assert!((a - b).abs() < 1e-12);
            }
            let zg = pose_condition(&s, &pose.transformed(&g), part).unwrap();
            for (a, b) in z.iter().zip(&zg) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn delta_rotation_rest_is_zero() {
        let s = Skeleton::preset("star").unwrap();
        let rest = Pose::identity(s.part_count());
        for n in 0..s.part_count() {
            for &nb in s.neighbors(n) {
                let d = relative_delta_rotation(&s, &rest, &rest, n, nb).unwrap();
                assert_eq!(d.angle, 0.0);
            }
        }
    }

    #[test]
    fn delta_rotation_right_angle_bend() {
        let s = Skeleton::preset("arm2").unwrap();
        let elbow = s.joints()[1].rest_pos;
        let rz = rotation(&Vec3::z(), std::f64::consts::FRAC_PI_2);
        let bend = Frame::new(rz, elbow - rz * elbow);
        let pose = Pose { motions: vec![Frame::identity(), bend] };
        let nb = s.neighbors(0)[0];
        let d = relative_delta_rotation(&s, &Pose::identity(2), &pose, 0, nb).unwrap();
        assert!((d.angle - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        // bone-0 frame: e1 = x, e2 = normalize(y × x) = -z, so world z maps to local -e2
        let world_axis = s.rest_frame(0).rot * d.axis;
        assert!((world_axis.z.abs() - 1.0).abs() < 1e-12);
        assert!((d.center - s.joint_in_bone(0, 1)).norm() < 1e-15);
    }

    #[test]
    fn axis_angle_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in 0..200 {
            let m = if i % 10 == 0 {
                // near-π rotations
                let axis = Vec3::new(rng.gen(), rng.gen(), rng.gen()).normalize();
                rotation(&axis, std::f64::consts::PI - 1e-9 * rng.gen::<f64>())
            } else {
                random_rotation(&mut rng)
            };
            let (axis, angle) = axis_angle(&m);
            assert!((0.0..=std::f64::consts::PI).contains(&angle));
            assert!((rotation(&axis, angle) - m).abs().max() < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_skeletons() {
        let j = |parent, p: [f64; 3]| Joint { name: String::new(), parent, rest_pos: Vec3::from(p) };
        let zero = Skeleton::new(vec![j(None, [0.0; 3]), j(Some(0), [0.0; 3])], vec![[0, 1]]);
        assert!(matches!(zero, Err(Error::DegenerateBone { bone: 0 })));
        let cyc = Skeleton::new(
            vec![j(None, [0.0; 3]), j(Some(2), [1.0, 0.0, 0.0]), j(Some(1), [2.0, 0.0, 0.0])],
            vec![[2, 1], [1, 2]],
        );
        assert!(cyc.is_err());
        let missing = Skeleton::new(vec![j(None, [0.0; 3]), j(Some(0), [1.0, 0.0, 0.0])], vec![]);
        assert!(missing.is_err());
    }

    #[test]
    fn json_roundtrip() {
        let s = Skeleton::preset("star").unwrap();
        let back = Skeleton::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(s, back);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let poses: Vec<Pose> = (0..3)
            .map(|_| Pose::rigid(4, Frame::new(random_rotation(&mut rng), Vec3::new(rng.gen(), 0.0, 1.0))))
            .collect();
        assert_eq!(poses_from_json(&poses_to_json(&poses).unwrap()).unwrap(), poses);
    }

    #[test]
    fn parent_by_name() {
        let text = r#"{"joints":[{"name":"a","parent":null,"rest_pos":[0,0,0]},
            {"name":"b","parent":"a","rest_pos":[0,1,0]}],"bones":[[0,1]]}"#;
        let s = Skeleton::from_json(text).unwrap();
        assert_eq!(s.joints()[1].parent, Some(0));
    }
}
