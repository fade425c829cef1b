//! Adjacent part seaming: a non-rigid deformation that rotates each point of a
//! part partially back toward the rest pose of every neighbouring bone, with
//! the rotation share decided by the competing rigidness of the two bones.

use serde::{Deserialize, Serialize};

use crate::dual::{v3, Dual, Real};
use crate::error::{Error, Result};
use crate::skeleton::{
    bone_frames, relative_delta_rotation, rotation, Frame, Mat3, Neighbor, Pose, Skeleton, Vec3,
};

/// Initial value of the rigidness scale matrix.
pub const ALPHA_INIT: f64 = 2.0;
/// Initial value of the rigidness bias matrix.
pub const BETA_INIT: f64 = 0.0;

/// Learnable rigidness coefficients, dense `N×N`. Entry `(n, b)` describes the
/// rigidness of bone `n` when competing with its neighbour `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct RigidnessCoeffs {
    parts: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl RigidnessCoeffs {
    pub fn new(parts: usize) -> Self {
        Self {
            parts,
            alpha: vec![ALPHA_INIT; parts * parts],
            beta: vec![BETA_INIT; parts * parts],
        }
    }

    pub fn from_parts(parts: usize, alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if alpha.len() != parts * parts || beta.len() != parts * parts {
            return Err(Error::Shape("rigidness matrices must be N×N".into()));
        }
        if !alpha.iter().chain(&beta).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("rigidness coefficients".into()));
        }
        Ok(Self { parts, alpha, beta })
    }

    pub fn part_count(&self) -> usize {
        self.parts
    }

    pub fn index(&self, n: usize, b: usize) -> usize {
        n * self.parts + b
    }

    pub fn alpha(&self, n: usize, b: usize) -> f64 {
        self.alpha[self.index(n, b)]
    }

    pub fn beta(&self, n: usize, b: usize) -> f64 {
        self.beta[self.index(n, b)]
    }
}

/// Which way the connecting line is split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QRatio {
    /// `|AQ| / |QB| = len(bone n) / len(neighbour)`.
    #[default]
    BoneOverNeighbor,
    /// `|AQ| / |QB| = len(neighbour) / len(bone n)`.
    NeighborOverBone,
}

/// Configuration used to place the neighbour's far endpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeamGeometry {
    #[default]
    Posed,
    Rest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeformOptions {
    pub aps: bool,
    pub q_ratio: QRatio,
    pub geometry: SeamGeometry,
}

impl Default for DeformOptions {
    fn default() -> Self {
        Self {
            aps: true,
            q_ratio: QRatio::default(),
            geometry: SeamGeometry::default(),
        }
    }
}

/// Joint `o`, far end `a` of the part's bone, far end `b` of the neighbour and
/// the split point `q` on `ab`, all in the part's local frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeighborGeometry {
    pub o: Vec3,
    pub a: Vec3,
    pub b: Vec3,
    pub q: Vec3,
}

/// Point on `ab` with `|aq| / |qb| = len1 / len2`.
pub fn split_point(a: &Vec3, b: &Vec3, len1: f64, len2: f64) -> Result<Vec3> {
    if !(len1 > 0.0 && len2 > 0.0) {
        return Err(Error::Degenerate(format!("bone lengths {len1}, {len2}")));
    }
    if (b - a).norm() <= 1e-12 {
        return Err(Error::Degenerate("coincident bone endpoints".into()));
    }
    Ok(a + (b - a) * (len1 / (len1 + len2)))
}

/// Rigidness of the two competing bones at `x`:
/// `r1 = exp(α1 QP·QA/|QA|² + β1)`, `r2 = exp(α2 QP·QB/|QB|² + β2)`
/// where `P` is the projection of `x` on the line `AB`.
pub fn rigidness(x: &Vec3, geo: &NeighborGeometry, a1: f64, b1: f64, a2: f64, b2: f64) -> (f64, f64) {
    let u = (geo.b - geo.a).normalize();
    let p = geo.a + u * (x - geo.a).dot(&u);
    let qp = p - geo.q;
    let qa = geo.a - geo.q;
    let qb = geo.b - geo.q;
    let r1 = (a1 * qp.dot(&qa) / qa.norm_squared() + b1).exp();
    let r2 = (a2 * qp.dot(&qb) / qb.norm_squared() + b2).exp();
    (r1, r2)
}

/// Normalised blending weights; `w2` is computed as `1 − w1` so the pair sums
/// to one exactly.
pub fn blend_weights(r1: f64, r2: f64) -> Result<(f64, f64)> {
    if !(r1 > 0.0 && r2 > 0.0) {
        return Err(Error::Degenerate(format!("non-positive rigidness ({r1}, {r2})")));
    }
    let w1 = (r1 / (r1 + r2)).clamp(0.0, 1.0);
    Ok((w1, 1.0 - w1))
}

/// Rotation by `w·θ` about `axis`.
pub fn scaled_rotation(axis: &Vec3, angle: f64, w: f64) -> Mat3 {
    rotation(axis, w * angle)
}

/// One neighbour's contribution to the seam offset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeamTerm {
    pub axis: Vec3,
    pub angle: f64,
    pub center: Vec3,
    pub weight: f64,
}

/// `Σ_b (R_{w_b θ_b}ᵀ (x − t_b) + t_b − x)`.
pub fn aps_offset(x: &Vec3, terms: &[SeamTerm]) -> Vec3 {
    terms.iter().fold(Vec3::zeros(), |acc, t| {
        let r = scaled_rotation(&t.axis, t.angle, t.weight);
        acc + r.tr_mul(&(x - t.center)) + t.center - x
    })
}

/// Everything needed to deform points of one part for one neighbour at one pose.
#[derive(Clone, Debug, PartialEq)]
pub struct Seam {
    pub neighbor: Neighbor,
    pub axis: [f64; 3],
    pub angle: f64,
    pub center: [f64; 3],
    pub geometry: NeighborGeometry,
    /// Flat indices into the coefficient matrices: `(n, b)` then `(b, n)`.
    pub self_index: usize,
    pub neighbor_index: usize,
    // linear maps x -> QP·QA/|QA|² and x -> QP·QB/|QB|²
    proj_self: [f64; 3],
    proj_neighbor: [f64; 3],
    q: [f64; 3],
}

impl Seam {
    fn new(
        neighbor: Neighbor,
        axis: Vec3,
        angle: f64,
        center: Vec3,
        geometry: NeighborGeometry,
        self_index: usize,
        neighbor_index: usize,
    ) -> Self {
        let u = (geometry.b - geometry.a).normalize();
        let qa = geometry.a - geometry.q;
        let qb = geometry.b - geometry.q;
        let ps = u * (u.dot(&qa) / qa.norm_squared());
        let pn = u * (u.dot(&qb) / qb.norm_squared());
        Self {
            neighbor,
            axis: axis.into(),
            angle,
            center: center.into(),
            geometry,
            self_index,
            neighbor_index,
            proj_self: ps.into(),
            proj_neighbor: pn.into(),
            q: geometry.q.into(),
        }
    }

    /// Share of the neighbour's rotation applied at `x`, i.e. the neighbour's
    /// blending weight `r_b / (r_n + r_b)`.
    /// `coeffs = [α(n,b), β(n,b), α(b,n), β(b,n)]`.
    pub fn weight<T: Real>(&self, x: [T; 3], coeffs: [T; 4]) -> T {
        let rel = v3::sub(x, v3::cst(self.q));
        let s_self = v3::dot(rel, v3::cst(self.proj_self));
        let s_nb = v3::dot(rel, v3::cst(self.proj_neighbor));
        let log_ratio = (coeffs[0] * s_self + coeffs[1]) - (coeffs[2] * s_nb + coeffs[3]);
        let one = T::cst(1.0);
        if log_ratio.re() > 0.0 {
            let e = (-log_ratio).exp();
            e / (one + e)
        } else {
            one / (one + log_ratio.exp())
        }
    }

    /// `R_{wθ}ᵀ (x − t) + t − x`.
    pub fn offset<T: Real>(&self, x: [T; 3], coeffs: [T; 4]) -> [T; 3] {
        let w = self.weight(x, coeffs);
        let phi = w.scale(self.angle);
        let (c, s) = (phi.cos(), phi.sin());
        let k = v3::cst::<T>(self.axis);
        let t = v3::cst::<T>(self.center);
        let v = v3::sub(x, t);
        let kv = v3::dot(k, v);
        let rotated = v3::add(
            v3::sub(v3::mul(v, c), v3::mul(v3::cross(k, v), s)),
            v3::mul(k, kv * (T::cst(1.0) - c)),
        );
        v3::sub(v3::add(rotated, t), x)
    }

    pub fn coeffs(&self, rc: &RigidnessCoeffs) -> [f64; 4] {
        [
            rc.alpha[self.self_index],
            rc.beta[self.self_index],
            rc.alpha[self.neighbor_index],
            rc.beta[self.neighbor_index],
        ]
    }
}

/// Per-part, per-pose deformation context.
#[derive(Clone, Debug, PartialEq)]
pub struct PartPose {
    pub frame: Frame,
    pub seams: Vec<Seam>,
    pub condition: Vec<f64>,
}

impl PartPose {
    pub fn to_local(&self, x: &Vec3) -> Vec3 {
        self.frame.to_local(x)
    }

    /// Canonical position of a point given in the part's local frame.
    pub fn canonicalize_local(&self, x: &Vec3, rc: &RigidnessCoeffs) -> Vec3 {
        let xa: [f64; 3] = (*x).into();
        let mut out = xa;
        for seam in &self.seams {
            let off = seam.offset(xa, seam.coeffs(rc));
            out = v3::add(out, off);
        }
        Vec3::from(out)
    }

    /// Canonical position and its spatial Jacobian.
    pub fn canonicalize_with_jacobian(&self, x: &Vec3, rc: &RigidnessCoeffs) -> CanonJet {
        type D = Dual<f64, 3>;
        let xs: [D; 3] = std::array::from_fn(|i| D::variable(x[i], i));
        let mut out = xs;
        for seam in &self.seams {
            let c = seam.coeffs(rc).map(D::constant);
            out = v3::add(out, seam.offset(xs, c));
        }
        CanonJet {
            xbar: out.map(|d| d.v),
            jac: out.map(|d| d.d),
        }
    }

    /// Canonical position together with its spatial Jacobian and the
    /// coefficient sensitivities of both.
    pub fn canonicalize_jet(&self, x: &Vec3, rc: &RigidnessCoeffs, seams_out: &mut Vec<SeamJet>) -> CanonJet {
        type Inner = Dual<f64, 3>;
        type Outer = Dual<Inner, 4>;
        let xs: [Outer; 3] =
            std::array::from_fn(|i| Outer::constant(Inner::variable(x[i], i)));
        let mut xbar: [f64; 3] = (*x).into();
        let mut jac = [[0.0; 3]; 3];
        for (i, row) in jac.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for seam in &self.seams {
            let c = seam.coeffs(rc);
            let p: [Outer; 4] = std::array::from_fn(|k| Outer::variable(Inner::constant(c[k]), k));
            let off = seam.offset(xs, p);
            let mut sj = SeamJet {
                self_index: seam.self_index,
                neighbor_index: seam.neighbor_index,
                dp: [[0.0; 3]; 4],
                djac: [[[0.0; 3]; 3]; 4],
            };
            for i in 0..3 {
                xbar[i] += off[i].v.v;
                for j in 0..3 {
                    jac[i][j] += off[i].v.d[j];
                }
                for k in 0..4 {
                    sj.dp[k][i] = off[i].d[k].v;
                    for j in 0..3 {
                        sj.djac[k][i][j] = off[i].d[k].d[j];
                    }
                }
            }
            seams_out.push(sj);
        }
        CanonJet { xbar, jac }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CanonJet {
    pub xbar: [f64; 3],
    /// `jac[i][j] = ∂x̄_i / ∂x_j` with `x` in the part's local frame.
    pub jac: [[f64; 3]; 3],
}

/// Sensitivities of one seam offset to its four coefficients
/// `[α(n,b), β(n,b), α(b,n), β(b,n)]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeamJet {
    pub self_index: usize,
    pub neighbor_index: usize,
    pub dp: [[f64; 3]; 4],
    pub djac: [[[f64; 3]; 3]; 4],
}

impl SeamJet {
    /// Accumulates coefficient gradients from adjoints of `x̄` and of the Jacobian.
    pub fn backprop(&self, xbar_adj: &[f64; 3], jac_adj: &[[f64; 3]; 3], alpha: &mut [f64], beta: &mut [f64]) {
        let mut g = [0.0; 4];
        for (k, gk) in g.iter_mut().enumerate() {
            let mut s = 0.0;
            for i in 0..3 {
                s += xbar_adj[i] * self.dp[k][i];
                for j in 0..3 {
                    s += jac_adj[i][j] * self.djac[k][i][j];
                }
            }
            *gk = s;
        }
        alpha[self.self_index] += g[0];
        beta[self.self_index] += g[1];
        alpha[self.neighbor_index] += g[2];
        beta[self.neighbor_index] += g[3];
    }
}

/// Per-pose context for all parts: frames, seams and pose conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseContext {
    pub parts: Vec<PartPose>,
}

impl PoseContext {
    pub fn new(skeleton: &Skeleton, rest_pose: &Pose, pose: &Pose, options: &DeformOptions) -> Result<Self> {
        let n_parts = skeleton.part_count();
        pose.validate(n_parts)?;
        rest_pose.validate(n_parts)?;
        let frames = bone_frames(skeleton, pose)?;
        let rest_frames = bone_frames(skeleton, rest_pose)?;
        let mut parts = Vec::with_capacity(n_parts);
        for n in 0..n_parts {
            let mut seams = Vec::new();
            if options.aps {
                for &nb in skeleton.neighbors(n) {
                    let delta = relative_delta_rotation(skeleton, rest_pose, pose, n, nb)?;
                    let geometry = neighbor_geometry(skeleton, pose, &frames, &rest_frames, n, nb, options)?;
                    seams.push(Seam::new(
                        nb,
                        delta.axis,
                        delta.angle,
                        delta.center,
                        geometry,
                        n * n_parts + nb.bone,
                        nb.bone * n_parts + n,
                    ));
                }
            }
            parts.push(PartPose {
                frame: frames[n],
                seams,
                condition: crate::skeleton::pose_condition_from_frames(&frames, n),
            });
        }
        Ok(Self { parts })
    }
}

/// Seam geometry of part `n` against neighbour `nb`, in part `n`'s local frame.
pub fn neighbor_geometry(
    skeleton: &Skeleton,
    pose: &Pose,
    frames: &[Frame],
    rest_frames: &[Frame],
    n: usize,
    nb: Neighbor,
    options: &DeformOptions,
) -> Result<NeighborGeometry> {
    let o = skeleton.joint_in_bone(n, nb.joint);
    let a = skeleton.joint_in_bone(n, skeleton.far_end(n, nb.joint));
    let far_b = skeleton.far_end(nb.bone, nb.joint);
    let b = match options.geometry {
        SeamGeometry::Posed => {
            frames[n].to_local(&skeleton.posed_joint_on_bone(pose, nb.bone, far_b))
        }
        SeamGeometry::Rest => rest_frames[n].to_local(&skeleton.joints()[far_b].rest_pos),
    };
    let (len_n, len_b) = (skeleton.bone_length(n), skeleton.bone_length(nb.bone));
    let q = match options.q_ratio {
        QRatio::BoneOverNeighbor => split_point(&a, &b, len_n, len_b)?,
        QRatio::NeighborOverBone => split_point(&a, &b, len_b, len_n)?,
    };
    Ok(NeighborGeometry { o, a, b, q })
}

/// Canonical position `x̄_n` of a global point for part `n`.
pub fn canonicalize(
    x: &Vec3,
    skeleton: &Skeleton,
    rest_pose: &Pose,
    pose: &Pose,
    coeffs: &RigidnessCoeffs,
    n: usize,
) -> Result<Vec3> {
    canonicalize_with(x, skeleton, rest_pose, pose, coeffs, n, &DeformOptions::default())
}

pub fn canonicalize_with(
    x: &Vec3,
    skeleton: &Skeleton,
    rest_pose: &Pose,
    pose: &Pose,
    coeffs: &RigidnessCoeffs,
    n: usize,
    options: &DeformOptions,
) -> Result<Vec3> {
    if n >= skeleton.part_count() {
        return Err(Error::Shape(format!("part {n} out of range")));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("query point".into()));
    }
    let ctx = PoseContext::new(skeleton, rest_pose, pose, options)?;
    let part = &ctx.parts[n];
    Ok(part.canonicalize_local(&part.to_local(x), coeffs))
}
