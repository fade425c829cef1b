//! Per-part neural SDFs and their union.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::deform::{DeformOptions, PoseContext, RigidnessCoeffs};
use crate::error::{Error, Result};
use crate::mix_seed;
use crate::mlp::{InitConfig, NetShape, PartNet};
use crate::skeleton::{pose_from_value, pose_to_value, Pose, Skeleton, Vec3};

pub const FORMAT_TAG: &str = "UNIF-1";
pub const UNION_BETA: f64 = 200.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnionMode {
    Smooth,
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub init: InitConfig,
    pub deform: DeformOptions,
    pub union_beta: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { init: InitConfig::default(), deform: DeformOptions::default(), union_beta: UNION_BETA }
    }
}

/// Hard union: minimum and the first index achieving it.
pub fn union_min(d: &[f64]) -> Result<(f64, usize)> {
    let mut it = d.iter().enumerate();
    let (_, &first) = it.next().ok_or(Error::Empty("union of zero parts"))?;
    Ok(it.fold((first, 0), |(m, k), (i, &v)| if v < m { (v, i) } else { (m, k) }))
}

/// `min d + Σ Δd e^{−βΔd} / Σ e^{−βΔd}` with `Δd = d − min d`.
pub fn union_smooth(d: &[f64], beta: f64) -> Result<f64> {
    Ok(union_smooth_weights(d, beta)?.0)
}

/// Smooth union value with its softmax weights `p` and its partials `c = ∂d/∂d_n`.
pub fn union_smooth_weights(d: &[f64], beta: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!("union steepness must be positive, got {beta}")));
    }
    let (m, _) = union_min(d)?;
    let e: Vec<f64> = d.iter().map(|&v| (-beta * (v - m)).exp()).collect();
    let z: f64 = e.iter().sum();
    let p: Vec<f64> = e.iter().map(|v| v / z).collect();
    let delta: f64 = d.iter().zip(&p).map(|(&v, &pi)| (v - m) * pi).sum();
    let value = m + delta;
    let c = d.iter().zip(&p).map(|(&v, &pi)| pi * (1.0 - beta * (v - value))).collect();
    Ok((value, p, c))
}

/// `∂c_n/∂d_m` of the smooth union, row-major `N×N`.
pub fn union_smooth_hessian(d: &[f64], beta: f64, value: f64, p: &[f64], c: &[f64]) -> Vec<f64> {
    let n = d.len();
    let mut h = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            let kd = if a == b { 1.0 } else { 0.0 };
            h[a * n + b] = -beta * p[a] * (kd - p[b]) * (1.0 - beta * (d[a] - value)) - beta * p[a] * (kd - c[b]);
        }
    }
    h
}

/// Union value at one point with its global gradient and the per-part values.
#[derive(Clone, Debug, PartialEq)]
pub struct UnionSample {
    pub d: f64,
    pub grad: Vec3,
    pub parts: Vec<f64>,
    pub argmin: usize,
}

/// Per-part values and global-frame gradients at a batch of points:
/// `d[n][i]`, `grad[n][i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PartSamples {
    pub d: Vec<Vec<f64>>,
    pub grad: Vec<Vec<Vec3>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnifModel {
    pub skeleton: Skeleton,
    pub rest_pose: Pose,
    pub parts: Vec<PartNet>,
    pub rigidness: RigidnessCoeffs,
    pub config: ModelConfig,
}

const EVAL_CHUNK: usize = 4096;

impl UnifModel {
    /// Geometric initialisation: every part starts as a small sphere at its bone centre.
    pub fn new(skeleton: Skeleton, config: ModelConfig, seed: u64) -> Result<Self> {
        let n = skeleton.part_count();
        let shape = NetShape::new(12 * n);
        let parts = (0..n)
            .map(|k| PartNet::init_geometric(shape, &config.init, mix_seed(seed, k as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rest_pose: Pose::identity(n), rigidness: RigidnessCoeffs::new(n), skeleton, parts, config })
    }

    /// Random (non-geometric) initialisation, mostly for derivative checks.
    pub fn new_random(skeleton: Skeleton, config: ModelConfig, seed: u64) -> Self {
        let n = skeleton.part_count();
        let shape = NetShape::new(12 * n);
        let parts = (0..n).map(|k| PartNet::init_random(shape, mix_seed(seed, k as u64))).collect();
        Self { rest_pose: Pose::identity(n), rigidness: RigidnessCoeffs::new(n), skeleton, parts, config }
    }

    pub fn part_count(&self) -> usize {
        self.parts.len()
    }

    pub fn pose_context(&self, pose: &Pose) -> Result<PoseContext> {
        PoseContext::new(&self.skeleton, &self.rest_pose, pose, &self.config.deform)
    }

    /// Total number of trainable scalars: all part networks, then α, then β.
    pub fn param_count(&self) -> usize {
        self.parts.iter().map(|p| p.param_count()).sum::<usize>() + 2 * self.rigidness.alpha.len()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.parts {
            out.extend_from_slice(&p.params);
        }
        out.extend_from_slice(&self.rigidness.alpha);
        out.extend_from_slice(&self.rigidness.beta);
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.param_count(), flat.len())));
        }
        let mut off = 0;
        for p in &mut self.parts {
            let n = p.params.len();
            p.params.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        let nn = self.rigidness.alpha.len();
        self.rigidness.alpha.copy_from_slice(&flat[off..off + nn]);
        self.rigidness.beta.copy_from_slice(&flat[off + nn..off + 2 * nn]);
        Ok(())
    }

    /// Offsets of each part's block in the flat parameter vector, then α and β.
    pub fn param_offsets(&self) -> (Vec<usize>, usize, usize) {
        let mut offs = Vec::with_capacity(self.parts.len());
        let mut off = 0;
        for p in &self.parts {
            offs.push(off);
            off += p.param_count();
        }
        let nn = self.rigidness.alpha.len();
        (offs, off, off + nn)
    }

    /// `d^(n)` and its gradient for a canonical (part-local) point.
    pub fn eval_part(&self, n: usize, xbar: &Vec3, z: &[f64]) -> Result<(f64, Vec3)> {
        let part = self.parts.get(n).ok_or_else(|| Error::Shape(format!("part {n} out of range")))?;
        let ev = part.eval(&[(*xbar).into()], z)?;
        Ok((ev.values[0], Vec3::from(ev.grads[0])))
    }

    /// Values and global gradients of every part at global points.
    pub fn eval_parts(&self, ctx: &PoseContext, xs: &[Vec3]) -> Result<PartSamples> {
        let mut d = Vec::with_capacity(self.parts.len());
        let mut grad = Vec::with_capacity(self.parts.len());
        for (n, net) in self.parts.iter().enumerate() {
            let pp = &ctx.parts[n];
            let mut dn = Vec::with_capacity(xs.len());
            let mut gn = Vec::with_capacity(xs.len());
            for chunk in xs.chunks(EVAL_CHUNK) {
                let jets: Vec<_> = chunk
                    .iter()
                    .map(|x| pp.canonicalize_with_jacobian(&pp.to_local(x), &self.rigidness))
                    .collect();
                let xbars: Vec<[f64; 3]> = jets.iter().map(|j| j.xbar).collect();
                let ev = net.eval(&xbars, &pp.condition)?;
                for (jet, (v, g)) in jets.iter().zip(ev.values.iter().zip(&ev.grads)) {
                    let local = jac_t_mul(&jet.jac, g);
                    dn.push(*v);
                    gn.push(pp.frame.rot * local);
                }
            }
            d.push(dn);
            grad.push(gn);
        }
        Ok(PartSamples { d, grad })
    }

    /// Per-part values only.
    pub fn eval_part_values(&self, ctx: &PoseContext, xs: &[Vec3]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(self.parts.len());
        for (n, net) in self.parts.iter().enumerate() {
            let pp = &ctx.parts[n];
            let prep = net.prepare();
            let mut dn = Vec::with_capacity(xs.len());
            for chunk in xs.chunks(EVAL_CHUNK) {
                let xbars: Vec<[f64; 3]> = chunk
                    .iter()
                    .map(|x| pp.canonicalize_local(&pp.to_local(x), &self.rigidness).into())
                    .collect();
                dn.extend(net.eval_values_prepared(&prep, &xbars, &pp.condition)?);
            }
            out.push(dn);
        }
        Ok(out)
    }

    /// Union value, gradient and per-part values at one global point.
    pub fn eval_union(&self, x: &Vec3, pose: &Pose, mode: UnionMode) -> Result<UnionSample> {
        let ctx = self.pose_context(pose)?;
        Ok(self.eval_union_batch(&ctx, std::slice::from_ref(x), mode)?.remove(0))
    }

    pub fn eval_union_batch(&self, ctx: &PoseContext, xs: &[Vec3], mode: UnionMode) -> Result<Vec<UnionSample>> {
        let ps = self.eval_parts(ctx, xs)?;
        let n = self.parts.len();
        (0..xs.len())
            .map(|i| {
                let parts: Vec<f64> = (0..n).map(|k| ps.d[k][i]).collect();
                let (m, argmin) = union_min(&parts)?;
                let (d, grad) = match mode {
                    UnionMode::Min => (m, ps.grad[argmin][i]),
                    UnionMode::Smooth => {
                        let (v, _, c) = union_smooth_weights(&parts, self.config.union_beta)?;
                        (v, (0..n).fold(Vec3::zeros(), |acc, k| acc + ps.grad[k][i] * c[k]))
                    }
                };
                Ok(UnionSample { d, grad, parts, argmin })
            })
            .collect()
    }

    pub fn to_value(&self) -> Result<serde_json::Value> {
        let n = self.parts.len();
        let matrix = |v: &[f64]| v.chunks(n).map(|r| r.to_vec()).collect::<Vec<_>>();
        let file = ModelFile {
            format: FORMAT_TAG.to_string(),
            config: self.config,
            skeleton: serde_json::from_str(&self.skeleton.to_json()?)?,
            rest_pose: pose_to_value(&self.rest_pose),
            rigidness: RigidnessFile { alpha: matrix(&self.rigidness.alpha), beta: matrix(&self.rigidness.beta) },
            parts: self
                .parts
                .iter()
                .map(|p| PartFile {
                    shape: p.shape(),
                    layers: p
                        .block_shapes()
                        .into_iter()
                        .map(|(name, rows, cols)| LayerFile { name, rows, cols })
                        .collect(),
                    params: p.params.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_value(file)?)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        let file: ModelFile = serde_json::from_value(value)?;
        if file.format != FORMAT_TAG {
            return Err(Error::Config(format!("unsupported model format `{}`", file.format)));
        }
        let skeleton = Skeleton::from_json(&file.skeleton.to_string())?;
        let n = skeleton.part_count();
        if file.parts.len() != n {
            return Err(Error::Shape(format!("{} part networks for {} bones", file.parts.len(), n)));
        }
        let flatten = |m: Vec<Vec<f64>>| -> Result<Vec<f64>> {
            if m.len() != n || m.iter().any(|r| r.len() != n) {
                return Err(Error::Shape("rigidness matrix must be N×N".into()));
            }
            Ok(m.into_iter().flatten().collect())
        };
        let rigidness = RigidnessCoeffs::from_parts(n, flatten(file.rigidness.alpha)?, flatten(file.rigidness.beta)?)?;
        let parts = file
            .parts
            .into_iter()
            .map(|p| PartNet::from_params(p.shape, p.params))
            .collect::<Result<Vec<_>>>()?;
        if parts.iter().any(|p| p.shape().pose_dim != 12 * n) {
            return Err(Error::Shape("pose head input does not match bone count".into()));
        }
        let rest_pose = pose_from_value(&file.rest_pose)?;
        rest_pose.validate(n)?;
        Ok(Self { skeleton, rest_pose, parts, rigidness, config: file.config })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_value()?)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        Self::from_value(value)
    }
}

/// `Jᵀ g` for a row-major Jacobian.
pub(crate) fn jac_t_mul(j: &[[f64; 3]; 3], g: &[f64; 3]) -> Vec3 {
    Vec3::new(
        j[0][0] * g[0] + j[1][0] * g[1] + j[2][0] * g[2],
        j[0][1] * g[0] + j[1][1] * g[1] + j[2][1] * g[2],
        j[0][2] * g[0] + j[1][2] * g[1] + j[2][2] * g[2],
    )
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct PartFile {
    shape: NetShape,
    layers: Vec<LayerFile>,
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RigidnessFile {
    alpha: Vec<Vec<f64>>,
    beta: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    config: ModelConfig,
    skeleton: serde_json::Value,
    rest_pose: serde_json::Value,
    rigidness: RigidnessFile,
    parts: Vec<PartFile>,
}
