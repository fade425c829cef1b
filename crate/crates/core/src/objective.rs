//! Point sampling and the training losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::ScanFrame;
use crate::deform::{CanonJet, SeamJet};
use crate::error::{Error, Result};
use crate::neural_sdf::{jac_t_mul, union_smooth_hessian, union_smooth_weights, PartSamples, UnifModel};
use crate::skeleton::{bone_frames, Frame, Pose, Skeleton, Vec3};

pub const LAMBDA_NORMAL: f64 = 0.01;
pub const PERIM_BETA: f64 = 10.0;

/// Weights of the regularisers relative to the reconstruction term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub unit: f64,
    pub lim: f64,
    pub sec: f64,
    pub perim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { unit: 0.1, lim: 1.0, sec: 0.01, perim: 0.001 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub recon: f64,
    pub unit: f64,
    pub lim: f64,
    pub sec: f64,
    pub perim: f64,
    pub total: f64,
}

impl LossReport {
    fn finish(mut self, w: &LossWeights) -> Result<Self> {
        for (name, v) in [
            ("recon", self.recon),
            ("unit", self.unit),
            ("lim", self.lim),
            ("sec", self.sec),
            ("perim", self.perim),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss(name));
            }
        }
        self.total = self.recon + w.unit * self.unit + w.lim * self.lim + w.sec * self.sec + w.perim * self.perim;
        Ok(self)
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let k = reports.len().max(1) as f64;
        let mut out = LossReport::default();
        for r in reports {
            out.recon += r.recon / k;
            out.unit += r.unit / k;
            out.lim += r.lim / k;
            out.sec += r.sec / k;
            out.perim += r.perim / k;
            out.total += r.total / k;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub surface: usize,
    pub local: usize,
    pub global: usize,
}

impl Default for SampleCounts {
    fn default() -> Self {
        Self { surface: 5000, local: 5000, global: 5000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub surface: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    /// `local[i]` perturbs `surface[i % surface.len()]`.
    pub local: Vec<Vec3>,
    pub global: Vec<Vec3>,
}

impl SampleBatch {
    /// Local then global points: the expectation set of the regularisers.
    pub fn regularization_points(&self) -> Vec<Vec3> {
        self.local.iter().chain(&self.global).copied().collect()
    }
}

/// Axis-aligned bounds of the frame, scaled by `scale` about their centre.
pub fn enlarged_bbox(points: &[Vec3], scale: f64) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let c = (lo + hi) * 0.5;
    let h = (hi - lo) * (0.5 * scale);
    (c - h, c + h)
}

pub fn sample_batch(
    frame: &ScanFrame,
    counts: SampleCounts,
    sigma_local: f64,
    box_scale: f64,
    seed: u64,
) -> Result<SampleBatch> {
    if frame.points.is_empty() || frame.normals.len() != frame.points.len() {
        return Err(Error::Empty("scan frame with normals"));
    }
    if counts.surface == 0 && counts.local > 0 {
        return Err(Error::Config("local samples need surface samples".into()));
    }
    let noise = Normal::new(0.0, sigma_local).map_err(|e| Error::Config(format!("σ_local: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = frame.points.len();
    let picks: Vec<usize> = (0..counts.surface).map(|_| rng.gen_range(0..m)).collect();
    let surface: Vec<Vec3> = picks.iter().map(|&i| frame.points[i]).collect();
    let normals = picks.iter().map(|&i| frame.normals[i]).collect();
    let local = (0..counts.local)
        .map(|i| {
            surface[i % counts.surface]
                + Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng))
        })
        .collect();
    let (lo, hi) = enlarged_bbox(&frame.points, box_scale);
    let global = (0..counts.global)
        .map(|_| Vec3::from_fn(|k, _| if hi[k] > lo[k] { rng.gen_range(lo[k]..=hi[k]) } else { lo[k] }))
        .collect();
    Ok(SampleBatch { surface, normals, local, global })
}

/// Anything that yields per-part values and global gradients at a pose.
pub trait Field {
    fn part_count(&self) -> usize;
    fn union_beta(&self) -> f64;
    fn eval_parts(&self, pose: &Pose, xs: &[Vec3]) -> Result<PartSamples>;
}

impl Field for UnifModel {
    fn part_count(&self) -> usize {
        self.parts.len()
    }

    fn union_beta(&self) -> f64 {
        self.config.union_beta
    }

    fn eval_parts(&self, pose: &Pose, xs: &[Vec3]) -> Result<PartSamples> {
        UnifModel::eval_parts(self, &self.pose_context(pose)?, xs)
    }
}

/// `|d| + λ_normal ‖∇d − n‖`.
pub fn recon_term(d: f64, g: &Vec3, n: &Vec3) -> f64 {
    d.abs() + LAMBDA_NORMAL * (g - n).norm()
}

/// `(‖∇d‖ − 1)²`.
pub fn unit_term(g: &Vec3) -> f64 {
    (g.norm() - 1.0).powi(2)
}

/// `‖∇σ(d)‖² = (β σ(d)(1 − σ(d)))² ‖∇d‖²`.
pub fn perim_term(d: f64, g: &Vec3, beta: f64) -> f64 {
    let s = sigmoid(beta * d);
    (beta * s * (1.0 - s)).powi(2) * g.norm_squared()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Unit normal of the section between part `n` and its neighbour across
/// `joint`: `normalize(û_b − û_n)`, with `û` pointing from the joint to each
/// posed bone centre.
pub fn section_normal(skeleton: &Skeleton, frames: &[Frame], pose: &Pose, n: usize, nb: usize, joint: usize) -> Vec3 {
    let j = skeleton.posed_joint_on_bone(pose, n, joint);
    let un = (frames[n].trans - j).normalize();
    let ub = (frames[nb].trans - j).normalize();
    let v = ub - un;
    if v.norm() > 1e-12 {
        v.normalize()
    } else {
        // fully folded bones: fall back to the direction away from part n
        -un
    }
}

fn union_at(ps: &PartSamples, i: usize, beta: f64) -> Result<(f64, Vec3)> {
    let d: Vec<f64> = ps.d.iter().map(|dn| dn[i]).collect();
    let (v, _, c) = union_smooth_weights(&d, beta)?;
    Ok((v, ps.grad.iter().zip(&c).fold(Vec3::zeros(), |acc, (g, ck)| acc + g[i] * *ck)))
}

fn mean(sum: f64, count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

pub fn recon_loss(field: &impl Field, batch: &SampleBatch, pose: &Pose) -> Result<f64> {
    let ps = field.eval_parts(pose, &batch.surface)?;
    let mut sum = 0.0;
    for (i, n) in batch.normals.iter().enumerate() {
        let (d, g) = union_at(&ps, i, field.union_beta())?;
        sum += recon_term(d, &g, n);
    }
    Ok(mean(sum, batch.surface.len()))
}

pub fn unit_loss(field: &impl Field, batch: &SampleBatch, pose: &Pose) -> Result<f64> {
    let xs = batch.regularization_points();
    let ps = field.eval_parts(pose, &xs)?;
    let k = field.part_count() as f64;
    let mut sum = 0.0;
    for i in 0..xs.len() {
        let (_, g) = union_at(&ps, i, field.union_beta())?;
        sum += unit_term(&g) + ps.grad.iter().map(|gn| unit_term(&gn[i])).sum::<f64>() / k;
    }
    Ok(mean(sum, xs.len()))
}

pub fn perim_loss(field: &impl Field, batch: &SampleBatch, pose: &Pose, beta: f64) -> Result<f64> {
    let xs = batch.regularization_points();
    let ps = field.eval_parts(pose, &xs)?;
    let k = field.part_count() as f64;
    let mut sum = 0.0;
    for i in 0..xs.len() {
        let (d, g) = union_at(&ps, i, field.union_beta())?;
        sum += perim_term(d, &g, beta)
            + ps.d.iter().zip(&ps.grad).map(|(dn, gn)| perim_term(dn[i], &gn[i], beta)).sum::<f64>() / k;
    }
    Ok(mean(sum, xs.len()))
}

/// `(part, joint)` pairs of the bone-limit term and the posed joint positions.
fn lim_queries(skeleton: &Skeleton, pose: &Pose) -> Vec<(usize, Vec3)> {
    (0..skeleton.part_count())
        .flat_map(|n| {
            skeleton
                .adjacent_joints(n)
                .into_iter()
                .map(move |j| (n, skeleton.posed_joint_on_bone(pose, n, j)))
        })
        .collect()
}

/// `(part, joint position, section normal)` for every adjacent pair.
fn sec_queries(skeleton: &Skeleton, pose: &Pose) -> Result<Vec<(usize, Vec3, Vec3)>> {
    let frames = bone_frames(skeleton, pose)?;
    Ok((0..skeleton.part_count())
        .flat_map(|n| {
            let frames = &frames;
            skeleton.neighbors(n).iter().map(move |nb| {
                (
                    n,
                    skeleton.posed_joint_on_bone(pose, n, nb.joint),
                    section_normal(skeleton, frames, pose, n, nb.bone, nb.joint),
                )
            })
        })
        .collect())
}

pub fn lim_loss(field: &impl Field, skeleton: &Skeleton, pose: &Pose) -> Result<f64> {
    let q = lim_queries(skeleton, pose);
    let xs: Vec<Vec3> = q.iter().map(|(_, x)| *x).collect();
    let ps = field.eval_parts(pose, &xs)?;
    Ok(mean(q.iter().enumerate().map(|(i, (n, _))| ps.d[*n][i].abs()).sum(), q.len()))
}

pub fn sec_loss(field: &impl Field, skeleton: &Skeleton, pose: &Pose) -> Result<f64> {
    let q = sec_queries(skeleton, pose)?;
    let xs: Vec<Vec3> = q.iter().map(|(_, x, _)| *x).collect();
    let ps = field.eval_parts(pose, &xs)?;
    Ok(mean(
        q.iter().enumerate().map(|(i, (n, _, nj))| (ps.grad[*n][i] - nj).norm()).sum(),
        q.len(),
    ))
}

pub fn total_loss(
    field: &impl Field,
    batch: &SampleBatch,
    skeleton: &Skeleton,
    pose: &Pose,
    weights: &LossWeights,
) -> Result<LossReport> {
    LossReport {
        recon: recon_loss(field, batch, pose)?,
        unit: unit_loss(field, batch, pose)?,
        lim: lim_loss(field, skeleton, pose)?,
        sec: sec_loss(field, skeleton, pose)?,
        perim: perim_loss(field, batch, pose, PERIM_BETA)?,
        total: 0.0,
    }
    .finish(weights)
}

/// Adds the chain rule of the smooth union: given adjoints of the union value
/// and gradient at point `i`, accumulate per-part value and gradient adjoints.
#[allow(clippy::too_many_arguments)]
fn union_backprop(
    d: &[f64],
    grads: &[Vec3],
    beta: f64,
    d_adj: f64,
    g_adj: &Vec3,
    f_adj: &mut [Vec<f64>],
    gg_adj: &mut [Vec<Vec3>],
    i: usize,
) -> Result<()> {
    let (v, p, c) = union_smooth_weights(d, beta)?;
    let h = union_smooth_hessian(d, beta, v, &p, &c);
    let k = d.len();
    let proj: Vec<f64> = grads.iter().map(|g| g_adj.dot(g)).collect();
    for n in 0..k {
        let mut ub = d_adj * c[n];
        for m in 0..k {
            ub += proj[m] * h[m * k + n];
        }
        f_adj[n][i] += ub;
        gg_adj[n][i] += g_adj * c[n];
    }
    Ok(())
}

fn unit_adj(g: &Vec3) -> Vec3 {
    let n = g.norm();
    if n > 0.0 {
        g * (2.0 * (n - 1.0) / n)
    } else {
        Vec3::zeros()
    }
}

/// Value and (d, g) adjoints of the perimeter term.
fn perim_adj(d: f64, g: &Vec3, beta: f64) -> (f64, f64, Vec3) {
    let s = sigmoid(beta * d);
    let q = beta * s * (1.0 - s);
    let dq = beta * q * (1.0 - 2.0 * s);
    let gg = g.norm_squared();
    (q * q * gg, 2.0 * q * dq * gg, g * (2.0 * q * q))
}

fn unit_or_zero(v: &Vec3) -> Vec3 {
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        Vec3::zeros()
    }
}

/// Loss report for one frame and the gradient of its total with respect to
/// every model parameter (flat order of [`UnifModel::params_flat`]).
pub fn loss_and_grad(
    model: &UnifModel,
    batch: &SampleBatch,
    pose: &Pose,
    weights: &LossWeights,
) -> Result<(LossReport, Vec<f64>)> {
    let ctx = model.pose_context(pose)?;
    let skeleton = &model.skeleton;
    let k = model.part_count();
    let kf = k as f64;
    let beta_u = model.config.union_beta;
    let ns = batch.surface.len();
    let reg = batch.regularization_points();
    let ne = reg.len();
    let lim_q = lim_queries(skeleton, pose);
    let sec_q = sec_queries(skeleton, pose)?;

    // per part: shared points, then its own joint queries
    let mut joint_rows: Vec<Vec<Vec3>> = vec![Vec::new(); k];
    let mut lim_row = Vec::with_capacity(lim_q.len());
    for (n, x) in &lim_q {
        lim_row.push(ns + ne + joint_rows[*n].len());
        joint_rows[*n].push(*x);
    }
    let mut sec_row = Vec::with_capacity(sec_q.len());
    for (n, x, _) in &sec_q {
        sec_row.push(ns + ne + joint_rows[*n].len());
        joint_rows[*n].push(*x);
    }

    struct PartPass {
        jets: Vec<CanonJet>,
        seam_jets: Vec<SeamJet>,
        d: Vec<f64>,
        gamma: Vec<[f64; 3]>,
        g: Vec<Vec3>,
        prep: crate::mlp::Prepared,
        tape: crate::mlp::Tape,
    }
    let mut passes = Vec::with_capacity(k);
    for n in 0..k {
        let pp = &ctx.parts[n];
        let pts = batch.surface.iter().chain(&reg).chain(&joint_rows[n]);
        let mut jets = Vec::with_capacity(ns + ne + joint_rows[n].len());
        let mut seam_jets = Vec::with_capacity(jets.capacity() * pp.seams.len());
        for x in pts {
            let xl = pp.to_local(x);
            jets.push(if pp.seams.is_empty() {
                CanonJet { xbar: xl.into(), jac: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] }
            } else {
                pp.canonicalize_jet(&xl, &model.rigidness, &mut seam_jets)
            });
        }
        let xbars: Vec<[f64; 3]> = jets.iter().map(|j| j.xbar).collect();
        let net = &model.parts[n];
        let prep = net.prepare();
        let (ev, tape) = net.forward(&prep, &xbars, &pp.condition)?;
        let g = jets.iter().zip(&ev.grads).map(|(j, gm)| pp.frame.rot * jac_t_mul(&j.jac, gm)).collect();
        passes.push(PartPass { jets, seam_jets, d: ev.values, gamma: ev.grads, g, prep, tape });
    }

    let mut f_adj: Vec<Vec<f64>> = passes.iter().map(|p| vec![0.0; p.d.len()]).collect();
    let mut gg_adj: Vec<Vec<Vec3>> = passes.iter().map(|p| vec![Vec3::zeros(); p.d.len()]).collect();
    let mut report = LossReport::default();
    let mut dvec = vec![0.0; k];
    let mut gvec = vec![Vec3::zeros(); k];

    for i in 0..ns + ne {
        for n in 0..k {
            dvec[n] = passes[n].d[i];
            gvec[n] = passes[n].g[i];
        }
        let (d, _, c) = union_smooth_weights(&dvec, beta_u)?;
        let g = gvec.iter().zip(&c).fold(Vec3::zeros(), |acc, (gn, cn)| acc + gn * *cn);
        if i < ns {
            let nrm = &batch.normals[i];
            report.recon += recon_term(d, &g, nrm);
            let w = 1.0 / ns as f64;
            let ga = unit_or_zero(&(g - nrm)) * (LAMBDA_NORMAL * w);
            union_backprop(&dvec, &gvec, beta_u, d.signum() * w, &ga, &mut f_adj, &mut gg_adj, i)?;
        } else {
            let w = 1.0 / ne as f64;
            report.unit += unit_term(&g);
            let (pv, pd, pg) = perim_adj(d, &g, PERIM_BETA);
            report.perim += pv;
            let ga = unit_adj(&g) * (weights.unit * w) + pg * (weights.perim * w);
            union_backprop(&dvec, &gvec, beta_u, pd * weights.perim * w, &ga, &mut f_adj, &mut gg_adj, i)?;
            for n in 0..k {
                report.unit += unit_term(&gvec[n]) / kf;
                let (pv, pd, pg) = perim_adj(dvec[n], &gvec[n], PERIM_BETA);
                report.perim += pv / kf;
                gg_adj[n][i] += unit_adj(&gvec[n]) * (weights.unit * w / kf) + pg * (weights.perim * w / kf);
                f_adj[n][i] += pd * weights.perim * w / kf;
            }
        }
    }
    report.recon = mean(report.recon, ns);
    report.unit = mean(report.unit, ne);
    report.perim = mean(report.perim, ne);

    for (q, (n, _)) in lim_q.iter().enumerate() {
        let r = lim_row[q];
        let d = passes[*n].d[r];
        report.lim += d.abs();
        f_adj[*n][r] += weights.lim * d.signum() / lim_q.len() as f64;
    }
    report.lim = mean(report.lim, lim_q.len());
    for (q, (n, _, nj)) in sec_q.iter().enumerate() {
        let r = sec_row[q];
        let diff = passes[*n].g[r] - nj;
        report.sec += diff.norm();
        gg_adj[*n][r] += unit_or_zero(&diff) * (weights.sec / sec_q.len() as f64);
    }
    report.sec = mean(report.sec, sec_q.len());
    let report = report.finish(weights)?;

    let mut grad = vec![0.0; model.param_count()];
    let (offs, alpha_off, beta_off) = model.param_offsets();
    let nn = k * k;
    let mut alpha_grad = vec![0.0; nn];
    let mut beta_grad = vec![0.0; nn];
    for n in 0..k {
        let pass = &passes[n];
        let rot = ctx.parts[n].frame.rot;
        let m = pass.d.len();
        let mut gamma_adj = vec![[0.0; 3]; m];
        let mut jac_adj = vec![[[0.0; 3]; 3]; m];
        for i in 0..m {
            let hb = rot.tr_mul(&gg_adj[n][i]);
            let j = &pass.jets[i].jac;
            let gm = &pass.gamma[i];
            for r in 0..3 {
                gamma_adj[i][r] = j[r][0] * hb[0] + j[r][1] * hb[1] + j[r][2] * hb[2];
                for c in 0..3 {
                    jac_adj[i][r][c] = hb[c] * gm[r];
                }
            }
        }
        let net = &model.parts[n];
        let slice = &mut grad[offs[n]..offs[n] + net.param_count()];
        let x_adj = net.backward(&pass.prep, &pass.tape, &f_adj[n], &gamma_adj, slice);
        let seams = ctx.parts[n].seams.len();
        if seams > 0 {
            for i in 0..m {
                for sj in &pass.seam_jets[i * seams..(i + 1) * seams] {
                    sj.backprop(&x_adj[i], &jac_adj[i], &mut alpha_grad, &mut beta_grad);
                }
            }
        }
    }
    grad[alpha_off..alpha_off + nn].copy_from_slice(&alpha_grad);
    grad[beta_off..beta_off + nn].copy_from_slice(&beta_grad);
    Ok((report, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_frame, CapsuleBody};
    use crate::mlp::InitConfig;
    use crate::neural_sdf::ModelConfig;
    use crate::skeleton::rotation;

    /// `scale·(‖x − c‖ − r)`, one part.
    struct Sphere {
        c: Vec3,
        r: f64,
        scale: f64,
    }

    impl Field for Sphere {
        fn part_count(&self) -> usize {
            1
        }
        fn union_beta(&self) -> f64 {
            200.0
        }
        fn eval_parts(&self, _: &Pose, xs: &[Vec3]) -> Result<PartSamples> {
            let d = xs.iter().map(|x| self.scale * ((x - self.c).norm() - self.r)).collect();
            let g = xs.iter().map(|x| (x - self.c).normalize() * self.scale).collect();
            Ok(PartSamples { d: vec![d], grad: vec![g] })
        }
    }

    fn sphere_frame(r: f64, m: usize) -> ScanFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normals: Vec<Vec3> = (0..m)
            .map(|_| {
                Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize()
            })
            .collect();
        ScanFrame { points: normals.iter().map(|n| n * r).collect(), normals, pose: Pose::identity(1), frame_id: 0 }
    }

    #[test]
    fn point_term_examples() {
        let n = Vec3::z();
        assert_eq!(recon_term(0.0, &n, &n), 0.0);
        assert!((recon_term(0.1, &(n * 3.0), &n) - 0.12).abs() < 1e-15);
        assert_eq!(unit_term(&Vec3::new(0.0, 0.6, 0.8)), 0.0);
        assert!((unit_term(&(n * 2.0)) - 1.0).abs() < 1e-15);
        assert!((perim_term(0.0, &n, 10.0) - 6.25).abs() < 1e-12);
        let s = sigmoid(10.0);
        assert!((s * (1.0 - s) - 4.54e-5).abs() < 1e-7);
        assert!(perim_term(1.0, &n, 10.0) < 2.1e-7);
    }

    #[test]
    fn batch_sizes_and_containment() {
        let f = sphere_frame(0.3, 200);
        let b = sample_batch(&f, SampleCounts::default(), 0.1, 1.5, 1).unwrap();
        assert_eq!((b.surface.len(), b.local.len(), b.global.len()), (5000, 5000, 5000));
        for seed in 0..10 {
            let b = sample_batch(&f, SampleCounts { surface: 10, local: 10, global: 500 }, 0.1, 1.5, seed).unwrap();
            let (lo, hi) = enlarged_bbox(&f.points, 1.5);
            assert!(b.global.iter().all(|p| (0..3).all(|k| p[k] >= lo[k] && p[k] <= hi[k])));
            assert!(b.normals.iter().all(|n| (n.norm() - 1.0).abs() < 1e-6));
        }
        let b = sample_batch(&f, SampleCounts { surface: 7, local: 20, global: 0 }, 0.0, 1.5, 2).unwrap();
        for (i, p) in b.local.iter().enumerate() {
            assert_eq!(*p, b.surface[i % 7]);
        }
        assert_eq!(sample_batch(&f, SampleCounts::default(), 0.1, 1.5, 4).unwrap().global, {
            sample_batch(&f, SampleCounts::default(), 0.1, 1.5, 4).unwrap().global
        });
        let empty = ScanFrame { points: vec![], normals: vec![], pose: Pose::identity(1), frame_id: 0 };
        assert!(sample_batch(&empty, SampleCounts::default(), 0.1, 1.5, 0).is_err());
    }

    #[test]
    fn analytic_sphere_losses() {
        let f = sphere_frame(0.3, 500);
        let b = sample_batch(&f, SampleCounts { surface: 500, local: 300, global: 300 }, 0.05, 1.5, 1).unwrap();
        let pose = Pose::identity(1);
        let sphere = Sphere { c: Vec3::zeros(), r: 0.3, scale: 1.0 };
        assert!(recon_loss(&sphere, &b, &pose).unwrap() < 1e-10);
        assert!(unit_loss(&sphere, &b, &pose).unwrap() < 1e-20);
        let doubled = Sphere { scale: 2.0, ..sphere };
        // global term 1 plus per-part term 1 at every point
        assert!((unit_loss(&doubled, &b, &pose).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn two_shells_have_more_perimeter_than_one() {
        struct Shells(bool);
        impl Field for Shells {
            fn part_count(&self) -> usize {
                1
            }
            fn union_beta(&self) -> f64 {
                200.0
            }
            fn eval_parts(&self, _: &Pose, xs: &[Vec3]) -> Result<PartSamples> {
                let f = |x: &Vec3| {
                    let r = x.norm();
                    if self.0 {
                        ((r - 0.5).abs() - 0.2, x / r * (r - 0.5).signum())
                    } else {
                        (r - 0.3, x / r)
                    }
                };
                let (d, g) = xs.iter().map(f).unzip();
                Ok(PartSamples { d: vec![d], grad: vec![g] })
            }
        }
        let f = sphere_frame(0.7, 300);
        let b = sample_batch(&f, SampleCounts { surface: 300, local: 2000, global: 2000 }, 0.1, 1.5, 5).unwrap();
        let pose = Pose::identity(1);
        let one = perim_loss(&Shells(false), &b, &pose, PERIM_BETA).unwrap();
        let two = perim_loss(&Shells(true), &b, &pose, PERIM_BETA).unwrap();
        assert!(two > one, "{two} vs {one}");
    }

    #[test]
    fn joint_terms_on_sphere_parts() {
        // each part a sphere of radius 0.01 at its bone centre
        struct Balls<'a>(&'a Skeleton);
        impl Field for Balls<'_> {
            fn part_count(&self) -> usize {
                self.0.part_count()
            }
            fn union_beta(&self) -> f64 {
                200.0
            }
            fn eval_parts(&self, pose: &Pose, xs: &[Vec3]) -> Result<PartSamples> {
                let frames = bone_frames(self.0, pose)?;
                let (d, grad) = frames
                    .iter()
                    .map(|f| {
                        xs.iter()
                            .map(|x| ((x - f.trans).norm() - 0.01, (x - f.trans).normalize()))
                            .unzip::<_, _, Vec<_>, Vec<_>>()
                    })
                    .unzip();
                Ok(PartSamples { d, grad })
            }
        }
        let s = Skeleton::preset("arm2").unwrap();
        let pose = Pose::identity(2);
        let lim = lim_loss(&Balls(&s), &s, &pose).unwrap();
        let expect = (0.15 - 0.01 + 0.13 - 0.01) / 2.0;
        assert!((lim - expect).abs() < 1e-12);
        // ball gradients at the elbow point away from each part's centre: the
        // section normal of a straight arm, so the term vanishes
        assert!(sec_loss(&Balls(&s), &s, &pose).unwrap() < 1e-12);
        let g = Frame::new(rotation(&Vec3::new(0.3, 1.0, -0.2).normalize(), 1.1), Vec3::new(0.5, -1.0, 2.0));
        let moved = pose.transformed(&g);
        assert!((lim_loss(&Balls(&s), &s, &moved).unwrap() - lim).abs() < 1e-12);
    }

    #[test]
    fn section_normal_examples() {
        let s = Skeleton::preset("arm2").unwrap();
        let straight = Pose::identity(2);
        let fr = bone_frames(&s, &straight).unwrap();
        assert!((section_normal(&s, &fr, &straight, 0, 1, 1) - Vec3::x()).norm() < 1e-12);
        assert!((section_normal(&s, &fr, &straight, 1, 0, 1) + Vec3::x()).norm() < 1e-12);
        let elbow = s.joints()[1].rest_pos;
        let r = rotation(&Vec3::z(), std::f64::consts::FRAC_PI_2);
        let bent = Pose { motions: vec![Frame::identity(), Frame::new(r, elbow - r * elbow)] };
        let fr = bone_frames(&s, &bent).unwrap();
        let n = section_normal(&s, &fr, &bent, 0, 1, 1);
        for b in 0..2 {
            let axis = (fr[b].trans - elbow).normalize();
            assert!((n.dot(&axis).abs() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        }
    }

    fn toy_model() -> (UnifModel, SampleBatch, Pose) {
        let s = Skeleton::preset("arm2").unwrap();
        let cfg = ModelConfig { init: InitConfig { fit_steps: 0, ..InitConfig::default() }, ..ModelConfig::default() };
        let mut model = UnifModel::new_random(s.clone(), cfg, 17);
        model.rigidness.alpha[1] = 1.6;
        model.rigidness.beta[2] = -0.3;
        let elbow = s.joints()[1].rest_pos;
        let r = rotation(&Vec3::z(), 0.9);
        let pose = Pose { motions: vec![Frame::identity(), Frame::new(r, elbow - r * elbow)] };
        let body = CapsuleBody::uniform(2, 0.05).unwrap();
        let frame = generate_frame(&s, &body, &pose, 200, 1).unwrap();
        let batch = sample_batch(&frame, SampleCounts { surface: 12, local: 10, global: 6 }, 0.05, 1.5, 2).unwrap();
        (model, batch, pose)
    }

    #[test]
    fn engine_report_matches_field_evaluation() {
        let (model, batch, pose) = toy_model();
        let w = LossWeights::default();
        let (a, _) = loss_and_grad(&model, &batch, &pose, &w).unwrap();
        let b = total_loss(&model, &batch, &model.skeleton, &pose, &w).unwrap();
        for (x, y) in [(a.recon, b.recon), (a.unit, b.unit), (a.lim, b.lim), (a.sec, b.sec), (a.perim, b.perim)] {
            assert!((x - y).abs() < 1e-12 * (1.0 + y.abs()), "{x} vs {y}");
        }
        assert!(a.unit > 0.0 && a.perim > 0.0);
        let manual = b.recon + 0.1 * b.unit + b.lim + 0.01 * b.sec + 0.001 * b.perim;
        assert!((b.total - manual).abs() <= 1e-15 * manual.abs().max(1.0));
        let zero = LossWeights { unit: 0.0, lim: 0.0, sec: 0.0, perim: 0.0 };
        let z = total_loss(&model, &batch, &model.skeleton, &pose, &zero).unwrap();
        assert_eq!(z.total, z.recon);
    }

    #[test]
    fn engine_gradient_matches_finite_differences() {
        let (model, batch, pose) = toy_model();
        let w = LossWeights::default();
        let (_, grad) = loss_and_grad(&model, &batch, &pose, &w).unwrap();
        let flat = model.params_flat();
        let (offs, a_off, b_off) = model.param_offsets();
        let mut idx: Vec<usize> = (0..30).map(|i| (i * 7919) % offs[1]).collect();
        idx.extend((0..15).map(|i| offs[1] + (i * 104729) % (a_off - offs[1])));
        // adjacent rigidness entries (0,1) and (1,0)
        idx.extend([a_off + 1, a_off + 2, b_off + 1, b_off + 2]);
        let eval = |p: &[f64]| {
            let mut m = model.clone();
            m.set_params_flat(p).unwrap();
            loss_and_grad(&m, &batch, &pose, &w).unwrap().0.total
        };
        let mut worst: f64 = 0.0;
        for &i in &idx {
            let h = 1e-5 * (1.0 + flat[i].abs());
            let mut p = flat.clone();
            p[i] += h;
            let lp = eval(&p);
            p[i] -= 2.0 * h;
            let lm = eval(&p);
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            worst = worst.max(err);
            assert!(err < 1e-4, "param {i}: fd {fd} vs {}", grad[i]);
        }
        assert!(worst < 1e-4);
        // non-adjacent rigidness entries never receive gradient
        assert_eq!(grad[a_off], 0.0);
        assert_eq!(grad[b_off + 3], 0.0);
    }
}
