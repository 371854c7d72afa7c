//! Neural residual model: an ensemble of three small MLPs whose outputs are summed.
//!
//! Each sub-network maps the 6-dimensional state through
//! `tanh(W1 x + b1)`, an affine second hidden layer, and an affine output layer:
//!
//! ```text
//! d̂(x) = Σ_i W3ⁱ (W2ⁱ tanh(W1ⁱ x + b1ⁱ) + b2ⁱ) + b3ⁱ
//! ```
//!
//! Parameters live in one flat vector so the trainer can treat them as a
//! single point in parameter space. The per-sub-network layout is
//! `W1 (H×6, row-major) | b1 (H) | W2 (H×H) | b2 (H) | W3 (6×H) | b3 (6)`.

use nalgebra::Matrix6;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{StateDerivative, Vec6};
use crate::error::TrainError;

pub const STATE_DIM: usize = 6;
pub const ENSEMBLE: usize = 3;
pub const DEFAULT_HIDDEN: usize = 16;

/// Flat, ordered parameter vector of a [`ResidualNet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm_squared(&self) -> f64 {
        self.0.iter().map(|p| p * p).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|p| p.is_finite())
    }
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    hidden: usize,
}

impl Layout {
    fn per_net(&self) -> usize {
        let h = self.hidden;
        STATE_DIM * h + h + h * h + h + STATE_DIM * h + STATE_DIM
    }
    fn w1(&self) -> usize {
        0
    }
    fn b1(&self) -> usize {
        STATE_DIM * self.hidden
    }
    fn w2(&self) -> usize {
        self.b1() + self.hidden
    }
    fn b2(&self) -> usize {
        self.w2() + self.hidden * self.hidden
    }
    fn w3(&self) -> usize {
        self.b2() + self.hidden
    }
    fn b3(&self) -> usize {
        self.w3() + STATE_DIM * self.hidden
    }
}

/// The residual model `d̂_θ(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualNet {
    hidden: usize,
    params: Vec<f64>,
}

/// Intermediate activations kept from a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct NetCache {
    x: Vec6,
    /// Per sub-network: tanh output of the first hidden layer, then the second hidden layer.
    act: Vec<f64>,
}

impl NetCache {
    pub(crate) fn new(hidden: usize) -> Self {
        NetCache {
            x: Vec6::zeros(),
            act: vec![0.0; ENSEMBLE * 2 * hidden],
        }
    }
}

impl ResidualNet {
    pub fn param_count(hidden: usize) -> usize {
        ENSEMBLE * Layout { hidden }.per_net()
    }

    pub fn zeros(hidden: usize) -> Self {
        ResidualNet {
            hidden,
            params: vec![0.0; Self::param_count(hidden)],
        }
    }

    /// Training initialization: hidden weights uniform in `±1/√fan_in`, biases zero and a zero
    /// output layer, so the freshly initialized model predicts exactly no residual.
    pub fn init(hidden: usize, seed: u64) -> Self {
        let mut net = Self::zeros(hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lay = net.layout();
        let per = lay.per_net();
        for s in 0..ENSEMBLE {
            let base = s * per;
            fill_uniform(&mut rng, &mut net.params[base + lay.w1()..base + lay.b1()], STATE_DIM);
            fill_uniform(&mut rng, &mut net.params[base + lay.w2()..base + lay.b2()], hidden);
        }
        net
    }

    /// Every parameter (including biases and the output layer) uniform in `±1/√fan_in`.
    pub fn random(hidden: usize, seed: u64) -> Self {
        let mut net = Self::zeros(hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lay = net.layout();
        let per = lay.per_net();
        for s in 0..ENSEMBLE {
            let p = &mut net.params[s * per..(s + 1) * per];
            fill_uniform(&mut rng, &mut p[lay.w1()..lay.w2()], STATE_DIM);
            fill_uniform(&mut rng, &mut p[lay.w2()..lay.w3()], hidden);
            fill_uniform(&mut rng, &mut p[lay.w3()..], hidden);
        }
        net
    }

    pub fn from_params(hidden: usize, params: ParamVector) -> Result<Self, TrainError> {
        let expected = Self::param_count(hidden);
        if params.len() != expected {
            return Err(TrainError::ParamCount {
                expected,
                got: params.len(),
            });
        }
        Ok(ResidualNet {
            hidden,
            params: params.0,
        })
    }

    pub fn flatten(&self) -> ParamVector {
        ParamVector(self.params.clone())
    }

    pub fn into_params(self) -> ParamVector {
        ParamVector(self.params)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn param_len(&self) -> usize {
        self.params.len()
    }

    fn layout(&self) -> Layout {
        Layout { hidden: self.hidden }
    }

    /// Parameter slice of sub-network `i` (0..3).
    pub fn subnet_params(&self, i: usize) -> &[f64] {
        let per = self.layout().per_net();
        &self.params[i * per..(i + 1) * per]
    }

    /// Output of a single sub-network.
    pub fn subnet_forward(&self, i: usize, x: &Vec6) -> Vec6 {
        let mut out = Vec6::zeros();
        let mut scratch = vec![0.0; 2 * self.hidden];
        subnet_eval(self.layout(), self.subnet_params(i), x, &mut scratch, &mut out);
        out
    }

    /// `d̂_θ(x)`.
    pub fn forward(&self, x: &Vec6) -> StateDerivative {
        let mut cache = NetCache::new(self.hidden);
        self.forward_cached(x, &mut cache)
    }

    pub(crate) fn forward_cached(&self, x: &Vec6, cache: &mut NetCache) -> Vec6 {
        let lay = self.layout();
        let per = lay.per_net();
        let h2 = 2 * self.hidden;
        cache.x = *x;
        let mut out = Vec6::zeros();
        for s in 0..ENSEMBLE {
            subnet_eval(
                lay,
                &self.params[s * per..(s + 1) * per],
                x,
                &mut cache.act[s * h2..(s + 1) * h2],
                &mut out,
            );
        }
        out
    }

    /// `∂d̂_θ/∂x` as a 6×6 matrix: `Σ_i W3ⁱ W2ⁱ diag(1 − tanh²(W1ⁱx + b1ⁱ)) W1ⁱ`.
    pub fn jacobian(&self, x: &Vec6) -> Matrix6<f64> {
        self.forward_and_jacobian(x).1
    }

    pub fn forward_and_jacobian(&self, x: &Vec6) -> (StateDerivative, Matrix6<f64>) {
        let mut cache = NetCache::new(self.hidden);
        let value = self.forward_cached(x, &mut cache);
        let lay = self.layout();
        let per = lay.per_net();
        let h = self.hidden;
        let mut jac = Matrix6::zeros();
        // Row o of W3 W2 diag(s), reused per output.
        let mut m = vec![0.0; h];
        for sidx in 0..ENSEMBLE {
            let p = &self.params[sidx * per..(sidx + 1) * per];
            let z1 = &cache.act[sidx * 2 * h..sidx * 2 * h + h];
            let (w1, w2, w3) = (&p[lay.w1()..], &p[lay.w2()..], &p[lay.w3()..]);
            for o in 0..STATE_DIM {
                m.iter_mut().for_each(|v| *v = 0.0);
                for k in 0..h {
                    let w = w3[o * h + k];
                    if w == 0.0 {
                        continue;
                    }
                    let row = &w2[k * h..(k + 1) * h];
                    for j in 0..h {
                        m[j] += w * row[j];
                    }
                }
                for j in 0..h {
                    let c = m[j] * (1.0 - z1[j] * z1[j]);
                    for col in 0..STATE_DIM {
                        jac[(o, col)] += c * w1[j * STATE_DIM + col];
                    }
                }
            }
        }
        (value, jac)
    }

    /// `∂(upstream · d̂_θ(x))/∂θ`.
    pub fn param_gradient(&self, x: &Vec6, upstream: &Vec6) -> ParamVector {
        let folded = self.folded();
        let mut cache = FoldCache::new(self.hidden);
        folded.forward(x, &mut cache);
        let mut acc = GradAccum::new(self);
        folded.backward(&cache, upstream, &mut acc);
        let mut grad = vec![0.0; self.params.len()];
        acc.finish(self, &mut grad);
        ParamVector(grad)
    }

    /// Training view with the two affine layers folded together.
    pub(crate) fn folded(&self) -> FoldedNet<'_> {
        let lay = self.layout();
        let per = lay.per_net();
        let h = self.hidden;
        let mut m = vec![0.0; ENSEMBLE * STATE_DIM * h];
        let mut c = Vec6::zeros();
        for s in 0..ENSEMBLE {
            let p = &self.params[s * per..(s + 1) * per];
            let (w2, b2, w3, b3) = (&p[lay.w2()..], &p[lay.b2()..], &p[lay.w3()..], &p[lay.b3()..]);
            let ms = &mut m[s * STATE_DIM * h..(s + 1) * STATE_DIM * h];
            for o in 0..STATE_DIM {
                let w3o = &w3[o * h..(o + 1) * h];
                let mut acc = b3[o];
                for k in 0..h {
                    let w = w3o[k];
                    acc += w * b2[k];
                    if w == 0.0 {
                        continue;
                    }
                    let row = &w2[k * h..(k + 1) * h];
                    let mo = &mut ms[o * h..(o + 1) * h];
                    for j in 0..h {
                        mo[j] += w * row[j];
                    }
                }
                c[o] += acc;
            }
        }
        FoldedNet { net: self, m, c }
    }

    /// Offset of the output-layer bias of sub-network `i` inside the flat vector.
    pub fn output_bias_offset(&self, i: usize) -> usize {
        let lay = self.layout();
        i * lay.per_net() + lay.b3()
    }
}

/// `d̂(x) = c + Σ_i Mⁱ tanh(W1ⁱ x + b1ⁱ)` with `Mⁱ = W3ⁱ W2ⁱ` and `c = Σ_i W3ⁱ b2ⁱ + b3ⁱ`.
///
/// The parameter gradient only needs `Σ u zᵀ` and `Σ u` per sub-network over all backward
/// calls, so [`GradAccum`] collects those and expands them into the W2, b2, W3, b3 entries once.
pub(crate) struct FoldedNet<'a> {
    net: &'a ResidualNet,
    m: Vec<f64>,
    c: Vec6,
}

/// Input and first-layer activations of one folded forward pass.
#[derive(Clone, Debug)]
pub(crate) struct FoldCache {
    x: Vec6,
    z: Vec<f64>,
}

impl FoldCache {
    pub(crate) fn new(hidden: usize) -> Self {
        FoldCache {
            x: Vec6::zeros(),
            z: vec![0.0; ENSEMBLE * hidden],
        }
    }
}

/// Gradient accumulator for [`FoldedNet::backward`].
pub(crate) struct GradAccum {
    /// W1 and b1 entries, laid out like the flat parameter vector (other entries unused).
    first: Vec<f64>,
    /// Per sub-network `Σ u zᵀ` (6×H, row-major).
    uz: Vec<f64>,
    /// `Σ u`, shared by every sub-network.
    u_sum: Vec6,
    scratch: Vec<f64>,
}

impl GradAccum {
    pub(crate) fn new(net: &ResidualNet) -> Self {
        GradAccum {
            first: vec![0.0; net.params.len()],
            uz: vec![0.0; ENSEMBLE * STATE_DIM * net.hidden],
            u_sum: Vec6::zeros(),
            scratch: vec![0.0; net.hidden],
        }
    }

    pub(crate) fn reset(&mut self) {
        self.first.iter_mut().for_each(|v| *v = 0.0);
        self.uz.iter_mut().for_each(|v| *v = 0.0);
        self.u_sum = Vec6::zeros();
    }

    /// Adds the accumulated gradient to `grad`.
    pub(crate) fn finish(&self, net: &ResidualNet, grad: &mut [f64]) {
        let lay = net.layout();
        let per = lay.per_net();
        let h = net.hidden;
        for s in 0..ENSEMBLE {
            let p = &net.params[s * per..(s + 1) * per];
            let g = &mut grad[s * per..(s + 1) * per];
            let first = &self.first[s * per..(s + 1) * per];
            for k in lay.w1()..lay.w2() {
                g[k] += first[k];
            }
            let uz = &self.uz[s * STATE_DIM * h..(s + 1) * STATE_DIM * h];
            let (w2, b2, w3) = (&p[lay.w2()..], &p[lay.b2()..], &p[lay.w3()..]);
            for o in 0..STATE_DIM {
                let uzo = &uz[o * h..(o + 1) * h];
                let uo = self.u_sum[o];
                g[lay.b3() + o] += uo;
                for k in 0..h {
                    // ∂/∂W3[o][k] = Σ u_o (W2 z + b2)_k
                    let row = &w2[k * h..(k + 1) * h];
                    let mut a = uo * b2[k];
                    for j in 0..h {
                        a += uzo[j] * row[j];
                    }
                    g[lay.w3() + o * h + k] += a;
                    // ∂/∂W2[k][j] = Σ (W3ᵀu)_k z_j and ∂/∂b2 = W3ᵀ Σu
                    let w = w3[o * h + k];
                    if w == 0.0 {
                        continue;
                    }
                    g[lay.b2() + k] += w * uo;
                    let gw2 = &mut g[lay.w2() + k * h..lay.w2() + (k + 1) * h];
                    for j in 0..h {
                        gw2[j] += w * uzo[j];
                    }
                }
            }
        }
    }
}

impl FoldedNet<'_> {
    pub(crate) fn forward(&self, x: &Vec6, cache: &mut FoldCache) -> Vec6 {
        let net = self.net;
        let lay = net.layout();
        let per = lay.per_net();
        let h = net.hidden;
        cache.x = *x;
        let mut out = self.c;
        for s in 0..ENSEMBLE {
            let p = &net.params[s * per..(s + 1) * per];
            let (w1, b1) = (&p[lay.w1()..lay.b1()], &p[lay.b1()..lay.w2()]);
            let z = &mut cache.z[s * h..(s + 1) * h];
            for j in 0..h {
                let row = &w1[j * STATE_DIM..(j + 1) * STATE_DIM];
                let mut a = b1[j];
                for k in 0..STATE_DIM {
                    a += row[k] * x[k];
                }
                z[j] = a.tanh();
            }
            let ms = &self.m[s * STATE_DIM * h..(s + 1) * STATE_DIM * h];
            for o in 0..STATE_DIM {
                let row = &ms[o * h..(o + 1) * h];
                let mut a = 0.0;
                for j in 0..h {
                    a += row[j] * z[j];
                }
                out[o] += a;
            }
        }
        out
    }

    /// Accumulates `∂(u·d̂)/∂θ` into `acc` and returns `∂(u·d̂)/∂x`.
    pub(crate) fn backward(&self, cache: &FoldCache, u: &Vec6, acc: &mut GradAccum) -> Vec6 {
        let net = self.net;
        let lay = net.layout();
        let per = lay.per_net();
        let h = net.hidden;
        acc.u_sum += u;
        let mut gx = Vec6::zeros();
        for s in 0..ENSEMBLE {
            let p = &net.params[s * per..(s + 1) * per];
            let z = &cache.z[s * h..(s + 1) * h];
            let ms = &self.m[s * STATE_DIM * h..(s + 1) * STATE_DIM * h];
            let uz = &mut acc.uz[s * STATE_DIM * h..(s + 1) * STATE_DIM * h];
            let gz = &mut acc.scratch;
            gz.iter_mut().for_each(|v| *v = 0.0);
            for o in 0..STATE_DIM {
                let uo = u[o];
                if uo == 0.0 {
                    continue;
                }
                let row = &ms[o * h..(o + 1) * h];
                let uzo = &mut uz[o * h..(o + 1) * h];
                for j in 0..h {
                    gz[j] += row[j] * uo;
                    uzo[j] += uo * z[j];
                }
            }
            let first = &mut acc.first[s * per..(s + 1) * per];
            let w1 = &p[lay.w1()..lay.b1()];
            for j in 0..h {
                let gj = gz[j] * (1.0 - z[j] * z[j]);
                first[lay.b1() + j] += gj;
                let row = &w1[j * STATE_DIM..(j + 1) * STATE_DIM];
                let gw1 = &mut first[j * STATE_DIM..(j + 1) * STATE_DIM];
                for k in 0..STATE_DIM {
                    gw1[k] += gj * cache.x[k];
                    gx[k] += row[k] * gj;
                }
            }
        }
        gx
    }
}

fn fill_uniform(rng: &mut ChaCha8Rng, out: &mut [f64], fan_in: usize) {
    let s = 1.0 / (fan_in as f64).sqrt();
    for v in out {
        *v = rng.gen_range(-s..=s);
    }
}

/// Evaluates one sub-network, writing its activations to `scratch` and adding its output to `out`.
#[inline]
fn subnet_eval(lay: Layout, p: &[f64], x: &Vec6, scratch: &mut [f64], out: &mut Vec6) {
    let h = lay.hidden;
    let (z1, a2) = scratch.split_at_mut(h);
    let w1 = &p[lay.w1()..lay.b1()];
    let b1 = &p[lay.b1()..lay.w2()];
    for j in 0..h {
        let row = &w1[j * STATE_DIM..(j + 1) * STATE_DIM];
        let mut a = b1[j];
        for k in 0..STATE_DIM {
            a += row[k] * x[k];
        }
        z1[j] = a.tanh();
    }
    let w2 = &p[lay.w2()..lay.b2()];
    let b2 = &p[lay.b2()..lay.w3()];
    for j in 0..h {
        let row = &w2[j * h..(j + 1) * h];
        let mut a = b2[j];
        for k in 0..h {
            a += row[k] * z1[k];
        }
        a2[j] = a;
    }
    let w3 = &p[lay.w3()..lay.b3()];
    let b3 = &p[lay.b3()..];
    for o in 0..STATE_DIM {
        let row = &w3[o * h..(o + 1) * h];
        let mut a = b3[o];
        for k in 0..h {
            a += row[k] * a2[k];
        }
        out[o] += a;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    /// Straight-line matrix arithmetic over the documented layout, independent of the loops above.
    fn oracle_forward(net: &ResidualNet, x: &Vec6) -> Vec6 {
        let h = net.hidden();
        let xv = DVector::from_column_slice(x.as_slice());
        let mut total = DVector::zeros(6);
        for i in 0..ENSEMBLE {
            let p = net.subnet_params(i);
            let mut off = 0;
            let mut take = |n: usize| {
                let s = &p[off..off + n];
                off += n;
                s.to_vec()
            };
            let w1 = DMatrix::from_row_slice(h, 6, &take(6 * h));
            let b1 = DVector::from_vec(take(h));
            let w2 = DMatrix::from_row_slice(h, h, &take(h * h));
            let b2 = DVector::from_vec(take(h));
            let w3 = DMatrix::from_row_slice(6, h, &take(6 * h));
            let b3 = DVector::from_vec(take(6));
            let z1 = (&w1 * &xv + b1).map(f64::tanh);
            total += &w3 * (&w2 * z1 + b2) + b3;
        }
        Vec6::from_column_slice(total.as_slice())
    }

    fn probe() -> Vec6 {
        Vec6::new(0.7, -1.3, 0.4, 0.2, 0.9, -0.5)
    }

    #[test]
    fn parameter_count() {
        assert_eq!(ResidualNet::param_count(16), 3 * (6 * 16 + 16 + 256 + 16 + 6 * 16 + 6));
        assert_eq!(ResidualNet::zeros(64).param_len(), 3 * (6 * 64 + 64 + 64 * 64 + 64 + 6 * 64 + 6));
    }

    #[test]
    fn zero_network() {
        let net = ResidualNet::zeros(16);
        assert_eq!(net.forward(&probe()), Vec6::zeros());
        assert_eq!(net.jacobian(&probe()), Matrix6::zeros());
        let init = ResidualNet::init(16, 3);
        assert_eq!(init.forward(&probe()), Vec6::zeros());
    }

    #[test]
    fn constant_network() {
        // W1 = 0, b1 = 0, W2 = 0, b2 = c, W3 = [I 0], b3 = e: output W3 c + b3 for every x.
        let h = 16;
        let mut net = ResidualNet::zeros(h);
        let lay = net.layout();
        let c: Vec<f64> = (0..h).map(|j| 0.1 * j as f64 - 0.3).collect();
        let e = [0.5, -0.25, 0.0, 1.0, 2.0, -1.0];
        {
            let p = &mut net.params_mut()[..lay.per_net()];
            p[lay.b2()..lay.b2() + h].copy_from_slice(&c);
            for o in 0..6 {
                p[lay.w3() + o * h + o] = 1.0;
            }
            p[lay.b3()..lay.b3() + 6].copy_from_slice(&e);
        }
        let expected = Vec6::from_fn(|o, _| c[o] + e[o]);
        for x in [probe(), Vec6::zeros(), Vec6::repeat(10.0)] {
            assert_eq!(net.forward(&x), expected);
            assert_eq!(net.jacobian(&x), Matrix6::zeros());
        }
    }

    #[test]
    fn forward_matches_matrix_oracle() {
        for seed in 0..5 {
            let net = ResidualNet::random(16, seed);
            let x = probe() * (seed as f64 + 1.0) * 0.5;
            let diff = (net.forward(&x) - oracle_forward(&net, &x)).abs().max();
            assert!(diff <= 1e-12, "seed {seed}: {diff}");
        }
    }

    #[test]
    fn forward_is_sum_of_subnets() {
        let net = ResidualNet::random(16, 11);
        let x = probe();
        let sum: Vec6 = (0..ENSEMBLE).map(|i| net.subnet_forward(i, &x)).sum();
        assert!((net.forward(&x) - sum).abs().max() <= 1e-14);
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let net = ResidualNet::random(16, 7);
        let x = probe();
        let jac = net.jacobian(&x);
        let eps = 1e-5;
        for col in 0..6 {
            let mut xp = x;
            let mut xm = x;
            xp[col] += eps;
            xm[col] -= eps;
            let fd = (net.forward(&xp) - net.forward(&xm)) / (2.0 * eps);
            for row in 0..6 {
                let a = jac[(row, col)];
                let rel = (a - fd[row]).abs() / a.abs().max(1e-3);
                assert!(rel <= 1e-6, "J[{row},{col}] = {a} vs fd {}", fd[row]);
            }
        }
    }

    #[test]
    fn jacobian_closed_form_matches_loops() {
        // J = Σ W3 W2 diag(1 − tanh²(W1 x + b1)) W1 written with dense matrices.
        let net = ResidualNet::random(8, 2);
        let h = 8;
        let x = probe();
        let mut expected = DMatrix::<f64>::zeros(6, 6);
        for i in 0..ENSEMBLE {
            let p = net.subnet_params(i);
            let lay = net.layout();
            let w1 = DMatrix::from_row_slice(h, 6, &p[lay.w1()..lay.b1()]);
            let b1 = DVector::from_column_slice(&p[lay.b1()..lay.w2()]);
            let w2 = DMatrix::from_row_slice(h, h, &p[lay.w2()..lay.b2()]);
            let w3 = DMatrix::from_row_slice(6, h, &p[lay.w3()..lay.b3()]);
            let pre = &w1 * DVector::from_column_slice(x.as_slice()) + b1;
            let d = DMatrix::from_diagonal(&pre.map(|a| 1.0 - a.tanh().powi(2)));
            expected += w3 * w2 * d * w1;
        }
        let got = net.jacobian(&x);
        for r in 0..6 {
            for c in 0..6 {
                assert!((got[(r, c)] - expected[(r, c)]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn param_gradient_matches_finite_differences() {
        let net = ResidualNet::random(6, 5);
        let x = probe();
        let upstream = Vec6::new(0.3, -1.0, 0.5, 2.0, -0.7, 0.1);
        let grad = net.param_gradient(&x, &upstream);
        let eps = 1e-5;
        let scalar = |n: &ResidualNet| upstream.dot(&n.forward(&x));
        for idx in 0..net.param_len() {
            let mut plus = net.clone();
            let mut minus = net.clone();
            plus.params_mut()[idx] += eps;
            minus.params_mut()[idx] -= eps;
            let fd = (scalar(&plus) - scalar(&minus)) / (2.0 * eps);
            let a = grad.0[idx];
            let rel = (a - fd).abs() / a.abs().max(1e-3);
            assert!(rel <= 1e-6, "param {idx}: {a} vs {fd}");
        }
    }

    #[test]
    fn param_gradient_edge_cases() {
        let net = ResidualNet::random(16, 9);
        let x = probe();
        let zero = net.param_gradient(&x, &Vec6::zeros());
        assert!(zero.0.iter().all(|g| *g == 0.0));

        let upstream = Vec6::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0);
        let grad = net.param_gradient(&x, &upstream);
        for i in 0..ENSEMBLE {
            let off = net.output_bias_offset(i);
            assert_eq!(&grad.0[off..off + 6], upstream.as_slice());
        }
    }

    #[test]
    fn wrong_param_count_rejected() {
        assert!(ResidualNet::from_params(16, ParamVector::zeros(10)).is_err());
    }

    proptest! {
        #[test]
        fn jacobian_predicts_small_steps(seed in 0u64..1000, dir in prop::array::uniform6(-1.0f64..1.0)) {
            let net = ResidualNet::random(16, seed);
            let x = probe();
            let mut delta = Vec6::from_column_slice(&dir);
            if delta.norm() < 1e-3 { delta = Vec6::repeat(1.0); }
            let delta = delta.normalize() * 1e-6;
            let lin = net.forward(&x) + net.jacobian(&x) * delta;
            let err = (net.forward(&(x + delta)) - lin).norm();
            prop_assert!(err <= 1e-10 + 1e-4 * delta.norm_squared());
        }

        #[test]
        fn flatten_roundtrip(seed in 0u64..1000) {
            let net = ResidualNet::random(16, seed);
            let back = ResidualNet::from_params(16, net.flatten()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..100 {
                let x = Vec6::from_fn(|_, _| rand::Rng::gen_range(&mut rng, -4.0..4.0));
                prop_assert_eq!(net.forward(&x), back.forward(&x));
            }
        }
    }
}
