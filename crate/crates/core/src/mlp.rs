//! Batched part network with exact spatial gradients and their parameter
//! adjoints.
//!
//! A batch of `B` points is pushed through the net as a `4B`-row matrix:
//! rows `0..B` carry values and rows `B(k+1)..B(k+2)` carry the tangent along
//! input axis `k`. The backward pass runs reverse mode over that forward-mode
//! computation, so losses that involve `∇x f` get exact parameter gradients.

use ndarray::{concatenate, linalg::general_mat_mul, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::AdamState;

pub const SOFTPLUS_BETA: f64 = 100.0;
/// Standard deviation of the last pose-head layer at init.
pub const POSE_HEAD_INIT_STD: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub width: usize,
    pub pose_dim: usize,
    pub pose_width: usize,
}

impl NetShape {
    pub fn new(pose_dim: usize) -> Self {
        Self { width: 64, pose_dim, pose_width: 64 }
    }

    /// `(in, out)` of the five trunk layers. The second layer is narrowed by
    /// three so the skip concatenation restores the full width.
    pub fn trunk_dims(&self) -> [(usize, usize); 5] {
        let w = self.width;
        [(3, w), (w, w - 3), (w, w), (w, w), (w, 1)]
    }

    pub fn head_dims(&self) -> [(usize, usize); 2] {
        [(self.pose_dim, self.pose_width), (self.pose_width, self.width)]
    }
}

const SKIP_LAYER: usize = 2;
const LAST: usize = 4;

#[derive(Clone, Copy, Debug)]
struct WnSlot {
    v: usize,
    g: usize,
    b: usize,
    inp: usize,
    out: usize,
}

#[derive(Clone, Copy, Debug)]
struct LinSlot {
    w: usize,
    b: usize,
    inp: usize,
    out: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    trunk: [WnSlot; 5],
    head: [LinSlot; 2],
    trunk_len: usize,
    len: usize,
}

impl Layout {
    fn new(shape: &NetShape) -> Self {
        let mut off = 0;
        let trunk = shape.trunk_dims().map(|(inp, out)| {
            let slot = WnSlot { v: off, g: off + inp * out, b: off + inp * out + out, inp, out };
            off += inp * out + 2 * out;
            slot
        });
        let trunk_len = off;
        let head = shape.head_dims().map(|(inp, out)| {
            let slot = LinSlot { w: off, b: off + inp * out, inp, out };
            off += inp * out + out;
            slot
        });
        Self { trunk, head, trunk_len, len: off }
    }
}

/// One part network: weight-normalised trunk plus pose-conditioning head,
/// stored as a flat parameter vector.
#[derive(Clone, Debug)]
pub struct PartNet {
    shape: NetShape,
    layout: Layout,
    pub params: Vec<f64>,
}

impl PartialEq for PartNet {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.params == other.params
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub radius: f64,
    /// Adam steps of the sphere refit after the analytic init; 0 skips it.
    pub fit_steps: usize,
    pub fit_points: usize,
    pub fit_half_width: f64,
    pub fit_lr: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { radius: 0.01, fit_steps: 300, fit_points: 512, fit_half_width: 0.3, fit_lr: 1e-3 }
    }
}

fn softplus(h: f64) -> f64 {
    let t = SOFTPLUS_BETA * h;
    if t > 0.0 {
        h + (-t).exp().ln_1p() / SOFTPLUS_BETA
    } else {
        t.exp().ln_1p() / SOFTPLUS_BETA
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Effective weights derived from the flat parameters.
#[derive(Clone, Debug)]
pub struct Prepared {
    w: Vec<Array2<f64>>,
    bias: Vec<Array1<f64>>,
    // unit row directions and 1/‖v‖ for the weight-norm chain rule
    vhat: Vec<Array2<f64>>,
    inv_norm: Vec<Array1<f64>>,
    head_w: Vec<Array2<f64>>,
    head_b: Vec<Array1<f64>>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug)]
pub struct Tape {
    b: usize,
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    z: Array1<f64>,
    head_pre: Array1<f64>,
    head_act: Array1<f64>,
}

/// Values and spatial gradients of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub values: Vec<f64>,
    pub grads: Vec<[f64; 3]>,
}

impl PartNet {
    /// Zero-parameter net of the given shape; use [`PartNet::init`] for a usable one.
    pub fn zeros(shape: NetShape) -> Self {
        let layout = Layout::new(&shape);
        let params = vec![0.0; layout.len];
        Self { shape, layout, params }
    }

    pub fn from_params(shape: NetShape, params: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(&shape);
        if params.len() != layout.len {
            return Err(Error::Shape(format!("expected {} parameters, got {}", layout.len, params.len())));
        }
        if !params.iter().all(|p| p.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        Ok(Self { shape, layout, params })
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn param_count(&self) -> usize {
        self.layout.len
    }

    /// Number of leading parameters that belong to the trunk.
    pub fn trunk_param_count(&self) -> usize {
        self.layout.trunk_len
    }

    /// Shapes `(rows, cols)` of every parameter block in storage order.
    pub fn block_shapes(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for (i, t) in self.layout.trunk.iter().enumerate() {
            out.push((format!("trunk{i}.v"), t.out, t.inp));
            out.push((format!("trunk{i}.g"), t.out, 1));
            out.push((format!("trunk{i}.b"), t.out, 1));
        }
        for (i, h) in self.layout.head.iter().enumerate() {
            out.push((format!("head{i}.w"), h.out, h.inp));
            out.push((format!("head{i}.b"), h.out, 1));
        }
        out
    }

    /// Random init with a near-zero pose head. Trunk: plain Gaussian (used for
    /// non-geometric tests); see [`PartNet::init_geometric`].
    pub fn init_random(shape: NetShape, seed: u64) -> Self {
        let mut net = Self::zeros(shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in net.layout.trunk {
            let n = Normal::new(0.0, (2.0 / t.inp as f64).sqrt()).unwrap();
            for p in &mut net.params[t.v..t.v + t.inp * t.out] {
                *p = n.sample(&mut rng);
            }
            for p in &mut net.params[t.b..t.b + t.out] {
                *p = 0.1 * n.sample(&mut rng);
            }
        }
        net.set_row_norm_gains();
        net.init_head(&mut rng);
        net
    }

    /// Small sphere of `config.radius` around the local origin.
    pub fn init_geometric(shape: NetShape, config: &InitConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, t) in net.layout.trunk.into_iter().enumerate() {
            let (mean, std) = if i == LAST {
                (std::f64::consts::PI.sqrt() / (t.inp as f64).sqrt(), 1e-5)
            } else {
                (0.0, 2f64.sqrt() / (t.out as f64).sqrt())
            };
            let n = Normal::new(mean, std).unwrap();
            for p in &mut net.params[t.v..t.v + t.inp * t.out] {
                *p = n.sample(&mut rng);
            }
            let bias = if i == LAST { -config.radius } else { 0.0 };
            net.params[t.b..t.b + t.out].fill(bias);
        }
        net.set_row_norm_gains();
        net.init_head(&mut rng);
        net.calibrate_center(config.radius);
        if config.fit_steps > 0 {
            net.fit_sphere(config, &mut rng)?;
            net.calibrate_center(config.radius);
        }
        Ok(net)
    }

    fn set_row_norm_gains(&mut self) {
        for t in self.layout.trunk {
            for r in 0..t.out {
                let row = &self.params[t.v + r * t.inp..t.v + (r + 1) * t.inp];
                self.params[t.g + r] = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            }
        }
    }

    fn init_head(&mut self, rng: &mut ChaCha8Rng) {
        let [h0, h1] = self.layout.head;
        let kaiming = Normal::new(0.0, (2.0 / h0.inp.max(1) as f64).sqrt()).unwrap();
        for p in &mut self.params[h0.w..h0.w + h0.inp * h0.out] {
            *p = kaiming.sample(rng);
        }
        self.params[h0.b..h0.b + h0.out].fill(0.0);
        let tiny = Normal::new(0.0, POSE_HEAD_INIT_STD).unwrap();
        for p in &mut self.params[h1.w..h1.w + h1.inp * h1.out] {
            *p = tiny.sample(rng);
        }
        self.params[h1.b..h1.b + h1.out].fill(0.0);
    }

    /// Shifts the output bias so `f(0) = −radius` with a zero pose condition.
    fn calibrate_center(&mut self, radius: f64) {
        let z = vec![0.0; self.shape.pose_dim];
        let f0 = self.eval_values(&[[0.0; 3]], &z).expect("finite origin")[0];
        let last = self.layout.trunk[LAST];
        self.params[last.b] -= f0 + radius;
    }

    fn fit_sphere(&mut self, config: &InitConfig, rng: &mut ChaCha8Rng) -> Result<()> {
        let trunk = self.layout.trunk_len;
        let mut adam = AdamState::new(trunk);
        let z = vec![0.0; self.shape.pose_dim];
        let side = Uniform::new_inclusive(-config.fit_half_width, config.fit_half_width);
        let m = config.fit_points as f64;
        let mut grad = vec![0.0; self.layout.len];
        for _ in 0..config.fit_steps {
            let xs: Vec<[f64; 3]> = (0..config.fit_points)
                .map(|_| [side.sample(rng), side.sample(rng), side.sample(rng)])
                .collect();
            let prep = self.prepare();
            let (ev, tape) = self.forward(&prep, &xs, &z)?;
            let mut f_adj = vec![0.0; xs.len()];
            let mut g_adj = vec![[0.0; 3]; xs.len()];
            for (i, x) in xs.iter().enumerate() {
                let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt().max(1e-12);
                let resid = ev.values[i] - (r - config.radius);
                f_adj[i] = resid.signum() / m;
                let d: [f64; 3] = std::array::from_fn(|k| ev.grads[i][k] - x[k] / r);
                let dn = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                if dn > 0.0 {
                    g_adj[i] = d.map(|v| 0.1 * v / dn / m);
                }
            }
            grad.fill(0.0);
            self.backward(&prep, &tape, &f_adj, &g_adj, &mut grad);
            adam.step(&mut self.params[..trunk], &grad[..trunk], config.fit_lr)?;
        }
        Ok(())
    }

    pub fn prepare(&self) -> Prepared {
        let p = &self.params;
        let mut w = Vec::with_capacity(5);
        let mut bias = Vec::with_capacity(5);
        let mut vhat = Vec::with_capacity(5);
        let mut inv_norm = Vec::with_capacity(5);
        for t in self.layout.trunk {
            let v = ArrayView2::from_shape((t.out, t.inp), &p[t.v..t.v + t.out * t.inp]).unwrap();
            let norms: Array1<f64> = v.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(1e-300));
            let inv = norms.mapv(|n| 1.0 / n);
            let dir = &v * &inv.view().insert_axis(Axis(1));
            let g = ArrayView1::from(&p[t.g..t.g + t.out]);
            w.push(&dir * &g.insert_axis(Axis(1)));
            vhat.push(dir);
            inv_norm.push(inv);
            bias.push(ArrayView1::from(&p[t.b..t.b + t.out]).to_owned());
        }
        let mut head_w = Vec::with_capacity(2);
        let mut head_b = Vec::with_capacity(2);
        for h in self.layout.head {
            head_w.push(ArrayView2::from_shape((h.out, h.inp), &p[h.w..h.w + h.out * h.inp]).unwrap().to_owned());
            head_b.push(ArrayView1::from(&p[h.b..h.b + h.out]).to_owned());
        }
        Prepared { w, bias, vhat, inv_norm, head_w, head_b }
    }

    /// Effective trunk weight matrices `g·v/‖v‖`.
    pub fn effective_weights(&self) -> Vec<Array2<f64>> {
        self.prepare().w
    }

    fn check_inputs(&self, xs: &[[f64; 3]], z: &[f64]) -> Result<()> {
        if z.len() != self.shape.pose_dim {
            return Err(Error::Shape(format!("pose condition has {} entries, expected {}", z.len(), self.shape.pose_dim)));
        }
        if !xs.iter().flatten().chain(z).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        Ok(())
    }

    fn head(&self, prep: &Prepared, z: &[f64]) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
        let z = ArrayView1::from(z);
        let pre = prep.head_w[0].dot(&z) + &prep.head_b[0];
        let act = pre.mapv(softplus);
        let out = prep.head_w[1].dot(&act) + &prep.head_b[1];
        (pre, act, out)
    }

    /// Values only.
    pub fn eval_values(&self, xs: &[[f64; 3]], z: &[f64]) -> Result<Vec<f64>> {
        self.eval_values_prepared(&self.prepare(), xs, z)
    }

    pub fn eval_values_prepared(&self, prep: &Prepared, xs: &[[f64; 3]], z: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(xs, z)?;
        let (_, _, pose) = self.head(prep, z);
        let x = Array2::from_shape_fn((xs.len(), 3), |(i, k)| xs[i][k]);
        let mut a = x.clone();
        for l in 0..5 {
            if l == SKIP_LAYER {
                a = concatenate(Axis(1), &[a.view(), x.view()]).unwrap() * std::f64::consts::FRAC_1_SQRT_2;
            }
            let mut h = a.dot(&prep.w[l].t());
            h += &prep.bias[l];
            if l == LAST {
                return Ok(h.column(0).to_vec());
            }
            h.mapv_inplace(softplus);
            if l == 0 {
                h += &pose;
            }
            a = h;
        }
        unreachable!()
    }

    /// Values and spatial gradients.
    pub fn eval(&self, xs: &[[f64; 3]], z: &[f64]) -> Result<Evaluation> {
        Ok(self.forward(&self.prepare(), xs, z)?.0)
    }

    /// Forward pass keeping the tape for [`PartNet::backward`].
    pub fn forward(&self, prep: &Prepared, xs: &[[f64; 3]], z: &[f64]) -> Result<(Evaluation, Tape)> {
        self.check_inputs(xs, z)?;
        let b = xs.len();
        let (head_pre, head_act, pose) = self.head(prep, z);
        let x = Array2::from_shape_fn((4 * b, 3), |(r, k)| {
            let blk = r / b.max(1);
            if blk == 0 {
                xs[r][k]
            } else if blk == k + 1 {
                1.0
            } else {
                0.0
            }
        });
        let mut inputs = Vec::with_capacity(5);
        let mut pre = Vec::with_capacity(5);
        let mut a = x.clone();
        for l in 0..5 {
            if l == SKIP_LAYER {
                a = concatenate(Axis(1), &[a.view(), x.view()]).unwrap() * std::f64::consts::FRAC_1_SQRT_2;
            }
            let mut h = a.dot(&prep.w[l].t());
            {
                let mut hv = h.slice_mut(s![..b, ..]);
                hv += &prep.bias[l];
            }
            inputs.push(a);
            if l == LAST {
                pre.push(h);
                break;
            }
            let mut act = Array2::zeros(h.raw_dim());
            let cols = h.ncols();
            for i in 0..b {
                for j in 0..cols {
                    let hv = h[(i, j)];
                    act[(i, j)] = softplus(hv);
                    let sg = sigmoid(SOFTPLUS_BETA * hv);
                    for k in 1..4 {
                        act[(k * b + i, j)] = sg * h[(k * b + i, j)];
                    }
                }
            }
            if l == 0 {
                let mut av = act.slice_mut(s![..b, ..]);
                av += &pose;
            }
            pre.push(h);
            a = act;
        }
        let out = &pre[LAST];
        let values = (0..b).map(|i| out[(i, 0)]).collect();
        let grads = (0..b).map(|i| [out[(b + i, 0)], out[(2 * b + i, 0)], out[(3 * b + i, 0)]]).collect();
        let tape = Tape { b, inputs, pre, z: ArrayView1::from(z).to_owned(), head_pre, head_act };
        Ok((Evaluation { values, grads }, tape))
    }

    /// Accumulates into `param_grad` the gradient of a loss whose adjoints
    /// with respect to the outputs are `f_adj` and `grad_adj`. Returns the
    /// adjoint with respect to each input point.
    pub fn backward(
        &self,
        prep: &Prepared,
        tape: &Tape,
        f_adj: &[f64],
        grad_adj: &[[f64; 3]],
        param_grad: &mut [f64],
    ) -> Vec<[f64; 3]> {
        let b = tape.b;
        let mut x_adj = vec![[0.0; 3]; b];
        let mut adj = Array2::from_shape_fn((4 * b, 1), |(r, _)| {
            let blk = r / b.max(1);
            if blk == 0 {
                f_adj[r]
            } else {
                grad_adj[r - (blk) * b][blk - 1]
            }
        });
        let mut wbar = Vec::new();
        for l in (0..5).rev() {
            let t = self.layout.trunk[l];
            // adj holds the adjoint of this layer's output (post-activation
            // for hidden layers); turn it into the pre-activation adjoint.
            if l != LAST {
                let h = &tape.pre[l];
                if l == 0 {
                    let pbar = adj.slice(s![..b, ..]).sum_axis(Axis(0));
                    self.head_backward(prep, tape, &pbar, param_grad);
                }
                let cols = h.ncols();
                for i in 0..b {
                    for j in 0..cols {
                        let sg = sigmoid(SOFTPLUS_BETA * h[(i, j)]);
                        let d2 = SOFTPLUS_BETA * sg * (1.0 - sg);
                        let mut hv = adj[(i, j)] * sg;
                        for k in 1..4 {
                            let ak = adj[(k * b + i, j)];
                            hv += ak * d2 * h[(k * b + i, j)];
                            adj[(k * b + i, j)] = ak * sg;
                        }
                        adj[(i, j)] = hv;
                    }
                }
            }
            let inp = &tape.inputs[l];
            wbar = if wbar.len() == t.out * t.inp { wbar } else { vec![0.0; t.out * t.inp] };
            {
                let mut wb = ndarray::ArrayViewMut2::from_shape((t.out, t.inp), &mut wbar[..]).unwrap();
                general_mat_mul(1.0, &adj.t(), inp, 0.0, &mut wb);
            }
            let bbar = adj.slice(s![..b, ..]).sum_axis(Axis(0));
            for (r, bb) in bbar.iter().enumerate() {
                param_grad[t.b + r] += bb;
            }
            let vhat = &prep.vhat[l];
            for r in 0..t.out {
                let wrow = &wbar[r * t.inp..(r + 1) * t.inp];
                let vrow = vhat.row(r);
                let proj: f64 = wrow.iter().zip(vrow.iter()).map(|(a, c)| a * c).sum();
                param_grad[t.g + r] += proj;
                let scale = self.params[t.g + r] * prep.inv_norm[l][r];
                let dst = &mut param_grad[t.v + r * t.inp..t.v + (r + 1) * t.inp];
                for ((d, wv), vv) in dst.iter_mut().zip(wrow).zip(vrow.iter()) {
                    *d += scale * (wv - proj * vv);
                }
            }
            let in_adj = adj.dot(&prep.w[l]);
            if l == SKIP_LAYER {
                let c = std::f64::consts::FRAC_1_SQRT_2;
                let split = t.inp - 3;
                for i in 0..b {
                    for k in 0..3 {
                        x_adj[i][k] += c * in_adj[(i, split + k)];
                    }
                }
                adj = in_adj.slice(s![.., ..split]).mapv(|v| v * c);
            } else if l == 0 {
                for i in 0..b {
                    for k in 0..3 {
                        x_adj[i][k] += in_adj[(i, k)];
                    }
                }
            } else {
                adj = in_adj;
            }
        }
        x_adj
    }

    fn head_backward(&self, prep: &Prepared, tape: &Tape, pbar: &Array1<f64>, param_grad: &mut [f64]) {
        let [h0, h1] = self.layout.head;
        for r in 0..h1.out {
            param_grad[h1.b + r] += pbar[r];
            for c in 0..h1.inp {
                param_grad[h1.w + r * h1.inp + c] += pbar[r] * tape.head_act[c];
            }
        }
        let abar = prep.head_w[1].t().dot(pbar);
        for r in 0..h0.out {
            let hb = abar[r] * sigmoid(SOFTPLUS_BETA * tape.head_pre[r]);
            param_grad[h0.b + r] += hb;
            for c in 0..h0.inp {
                param_grad[h0.w + r * h0.inp + c] += hb * tape.z[c];
            }
        }
    }
}
