//! From-scratch recurrent Q-network: a linear input projection, a GRU cell,
//! a ReLU, and a linear head producing one Q-value per power level.
//!
//! Everything is plain `f64` on flat slices. Gradients are computed by
//! backpropagation through time over full episode sequences and checked
//! against central finite differences in the tests; the optimizer is a
//! standard Adam with bias correction.
//!
//! Parameter values are immutable snapshots from the caller's point of view:
//! `forward` and `bptt_gradients` never mutate, and only `adam_step` writes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NeuralError {
    #[error("parameter vector length {got}, architecture needs {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("shape mismatch between parameters and {0}")]
    ShapeMismatch(&'static str),
    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),
}

/// Layer sizes of the Q-network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetDims {
    /// Observation length.
    pub input: usize,
    /// Width of the input projection feeding the GRU.
    pub fc1: usize,
    /// GRU hidden units.
    pub hidden: usize,
    /// Q-values, one per action.
    pub actions: usize,
}

impl NetDims {
    /// The production architecture: 12 observation values in, 64-wide
    /// projection, 64 GRU units, 7 Q-values out.
    pub const DEFAULT: NetDims = NetDims {
        input: 12,
        fc1: 64,
        hidden: 64,
        actions: 7,
    };

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let NetDims {
            input,
            fc1,
            hidden,
            actions,
        } = *self;
        fc1 * input + fc1
            + 3 * (hidden * fc1 + hidden * hidden + hidden)
            + actions * hidden
            + actions
    }

    /// Wire descriptor used by the snapshot format.
    pub fn descriptor(&self) -> [u32; 4] {
        [
            self.input as u32,
            self.fc1 as u32,
            self.hidden as u32,
            self.actions as u32,
        ]
    }

    pub fn from_descriptor(d: &[u32]) -> Option<NetDims> {
        // The upper bound keeps param_count far from usize overflow even on
        // corrupted input.
        if d.len() != 4 || d.iter().any(|&v| v == 0 || v > (1 << 16)) {
            return None;
        }
        Some(NetDims {
            input: d[0] as usize,
            fc1: d[1] as usize,
            hidden: d[2] as usize,
            actions: d[3] as usize,
        })
    }
}

/// All weights of the network. Matrices are row-major with the output index
/// on rows; `wz/wr/wh` act on the projected input, `uz/ur/uh` on the
/// recurrent state, in update/reset/candidate order. The flatten order is
/// `w1 b1 wz uz bz wr ur br wh uh bh w2 b2`, and doubles as the snapshot
/// payload order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNetParams {
    pub dims: NetDims,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub wz: Vec<f64>,
    pub uz: Vec<f64>,
    pub bz: Vec<f64>,
    pub wr: Vec<f64>,
    pub ur: Vec<f64>,
    pub br: Vec<f64>,
    pub wh: Vec<f64>,
    pub uh: Vec<f64>,
    pub bh: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl QNetParams {
    pub fn zeros(dims: NetDims) -> QNetParams {
        QNetParams {
            dims,
            w1: vec![0.0; dims.fc1 * dims.input],
            b1: vec![0.0; dims.fc1],
            wz: vec![0.0; dims.hidden * dims.fc1],
            uz: vec![0.0; dims.hidden * dims.hidden],
            bz: vec![0.0; dims.hidden],
            wr: vec![0.0; dims.hidden * dims.fc1],
            ur: vec![0.0; dims.hidden * dims.hidden],
            br: vec![0.0; dims.hidden],
            wh: vec![0.0; dims.hidden * dims.fc1],
            uh: vec![0.0; dims.hidden * dims.hidden],
            bh: vec![0.0; dims.hidden],
            w2: vec![0.0; dims.actions * dims.hidden],
            b2: vec![0.0; dims.actions],
        }
    }

    fn arrays(&self) -> [&[f64]; 13] {
        [
            &self.w1, &self.b1, &self.wz, &self.uz, &self.bz, &self.wr, &self.ur, &self.br,
            &self.wh, &self.uh, &self.bh, &self.w2, &self.b2,
        ]
    }

    fn arrays_mut(&mut self) -> [&mut Vec<f64>; 13] {
        [
            &mut self.w1, &mut self.b1, &mut self.wz, &mut self.uz, &mut self.bz, &mut self.wr,
            &mut self.ur, &mut self.br, &mut self.wh, &mut self.uh, &mut self.bh, &mut self.w2,
            &mut self.b2,
        ]
    }

    /// Concatenates every array in the canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dims.param_count());
        for a in self.arrays() {
            out.extend_from_slice(a);
        }
        out
    }

    /// Rebuilds parameters from a flat vector; the inverse of [`flatten`].
    ///
    /// [`flatten`]: QNetParams::flatten
    pub fn unflatten(dims: NetDims, flat: &[f64]) -> Result<QNetParams, NeuralError> {
        if flat.len() != dims.param_count() {
            return Err(NeuralError::LengthMismatch {
                expected: dims.param_count(),
                got: flat.len(),
            });
        }
        let mut params = QNetParams::zeros(dims);
        let mut offset = 0;
        for a in params.arrays_mut() {
            let len = a.len();
            a.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(params)
    }

    pub fn all_finite(&self) -> bool {
        self.arrays().iter().all(|a| a.iter().all(|v| v.is_finite()))
    }
}

/// Recurrent state of the GRU; reset to zeros at episode boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct GruState {
    pub h: Vec<f64>,
}

impl GruState {
    pub fn zeros(hidden: usize) -> GruState {
        GruState {
            h: vec![0.0; hidden],
        }
    }
}

/// Seeded initialization: each weight uniform in `+-1/sqrt(fan_in)` drawn in
/// flatten order, biases zero.
pub fn init_params(dims: NetDims, seed: u64) -> QNetParams {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut params = QNetParams::zeros(dims);
    let fan_in = [
        dims.input, // w1
        0,          // b1
        dims.fc1,   // wz
        dims.hidden,
        0,
        dims.fc1, // wr
        dims.hidden,
        0,
        dims.fc1, // wh
        dims.hidden,
        0,
        dims.hidden, // w2
        0,
    ];
    for (a, &fan) in params.arrays_mut().into_iter().zip(fan_in.iter()) {
        if fan == 0 {
            continue; // bias, stays zero
        }
        let bound = 1.0 / (fan as f64).sqrt();
        for w in a.iter_mut() {
            *w = rng.gen_range(-bound..=bound);
        }
    }
    params
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Four-lane dot product; fixed summation order keeps results reproducible.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let split = a.len() & !3;
    let (a4, a_tail) = a.split_at(split);
    let (b4, b_tail) = b.split_at(split);
    let mut acc = [0.0f64; 4];
    for (ca, cb) in a4.chunks_exact(4).zip(b4.chunks_exact(4)) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in a_tail.iter().zip(b_tail) {
        s += x * y;
    }
    s
}

/// `out[i] += sum_j w[i][j] * x[j]` for a row-major `w`.
#[inline]
fn matvec_acc(w: &[f64], x: &[f64], out: &mut [f64]) {
    for (row, o) in w.chunks_exact(x.len()).zip(out.iter_mut()) {
        *o += dot(row, x);
    }
}

/// `out[j] += sum_i w[i][j] * d[i]` (transposed accumulate).
#[inline]
fn matvec_t_acc(w: &[f64], d: &[f64], out: &mut [f64]) {
    for (row, &di) in w.chunks_exact(out.len()).zip(d.iter()) {
        if di != 0.0 {
            for (o, &wij) in out.iter_mut().zip(row) {
                *o += di * wij;
            }
        }
    }
}

/// `gw[i][j] += d[i] * x[j]` (outer-product accumulate).
#[inline]
fn outer_acc(gw: &mut [f64], d: &[f64], x: &[f64]) {
    for (row, &di) in gw.chunks_exact_mut(x.len()).zip(d.iter()) {
        if di != 0.0 {
            for (g, &xj) in row.iter_mut().zip(x) {
                *g += di * xj;
            }
        }
    }
}

#[inline]
fn add_acc(acc: &mut [f64], v: &[f64]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

struct CellOut {
    x: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    c: Vec<f64>,
    rh: Vec<f64>,
    h: Vec<f64>,
    q: Vec<f64>,
}

fn cell(params: &QNetParams, obs: &[f64], h_prev: &[f64]) -> CellOut {
    let d = params.dims;
    let mut x = params.b1.clone();
    matvec_acc(&params.w1, obs, &mut x);

    let mut z = params.bz.clone();
    matvec_acc(&params.wz, &x, &mut z);
    matvec_acc(&params.uz, h_prev, &mut z);
    for v in z.iter_mut() {
        *v = sigmoid(*v);
    }

    let mut r = params.br.clone();
    matvec_acc(&params.wr, &x, &mut r);
    matvec_acc(&params.ur, h_prev, &mut r);
    for v in r.iter_mut() {
        *v = sigmoid(*v);
    }

    let rh: Vec<f64> = r.iter().zip(h_prev).map(|(&ri, &hi)| ri * hi).collect();

    let mut c = params.bh.clone();
    matvec_acc(&params.wh, &x, &mut c);
    matvec_acc(&params.uh, &rh, &mut c);
    for v in c.iter_mut() {
        *v = v.tanh();
    }

    let h: Vec<f64> = (0..d.hidden)
        .map(|k| (1.0 - z[k]) * h_prev[k] + z[k] * c[k])
        .collect();

    let relu_h: Vec<f64> = h.iter().map(|&v| v.max(0.0)).collect();
    let mut q = params.b2.clone();
    matvec_acc(&params.w2, &relu_h, &mut q);

    CellOut {
        x,
        z,
        r,
        c,
        rh,
        h,
        q,
    }
}

/// One step of the recurrent network: Q-values for every action plus the new
/// hidden state. Pure in all arguments.
pub fn forward(
    params: &QNetParams,
    obs: &[f64],
    state: &GruState,
) -> Result<(Vec<f64>, GruState), NeuralError> {
    let d = params.dims;
    if obs.len() != d.input {
        return Err(NeuralError::ShapeMismatch("observation"));
    }
    if state.h.len() != d.hidden {
        return Err(NeuralError::ShapeMismatch("hidden state"));
    }
    if obs.iter().any(|v| !v.is_finite()) {
        return Err(NeuralError::NonFinite("observation"));
    }
    let out = cell(params, obs, &state.h);
    if out.q.iter().any(|v| !v.is_finite()) || out.h.iter().any(|v| !v.is_finite()) {
        return Err(NeuralError::NonFinite("forward pass"));
    }
    Ok((out.q, GruState { h: out.h }))
}

/// Q-values at every step of a sequence, unrolled from a zero hidden state.
pub fn forward_sequence(
    params: &QNetParams,
    obs_seq: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>, NeuralError> {
    let mut state = GruState::zeros(params.dims.hidden);
    let mut qs = Vec::with_capacity(obs_seq.len());
    for obs in obs_seq {
        let (q, next) = forward(params, obs, &state)?;
        qs.push(q);
        state = next;
    }
    Ok(qs)
}

/// One training sequence: observations, the action taken at each slot, and
/// the TD target for that (slot, action) pair.
#[derive(Debug, Clone)]
pub struct SequenceSample {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub targets: Vec<f64>,
}

/// Gradients of the mean squared TD error over every (slot, taken-action)
/// pair in the batch, backpropagated through the full recurrence from a zero
/// initial hidden state. Returns the gradients (same shape as the
/// parameters) and the loss.
pub fn bptt_gradients(
    params: &QNetParams,
    batch: &[SequenceSample],
) -> Result<(QNetParams, f64), NeuralError> {
    let d = params.dims;
    let pair_count: usize = batch.iter().map(|s| s.actions.len()).sum();
    if pair_count == 0 {
        return Ok((QNetParams::zeros(d), 0.0));
    }
    let m = pair_count as f64;

    let mut grads = QNetParams::zeros(d);
    let mut loss = 0.0;

    for sample in batch {
        let t_len = sample.obs.len();
        if sample.actions.len() != t_len || sample.targets.len() != t_len {
            return Err(NeuralError::ShapeMismatch("sequence sample"));
        }
        if sample
            .targets
            .iter()
            .any(|v| !v.is_finite())
        {
            return Err(NeuralError::NonFinite("TD targets"));
        }

        // Forward pass, keeping per-step activations.
        let mut steps: Vec<CellOut> = Vec::with_capacity(t_len);
        let zero_h = vec![0.0; d.hidden];
        for t in 0..t_len {
            if sample.obs[t].len() != d.input {
                return Err(NeuralError::ShapeMismatch("observation"));
            }
            let h_prev = if t == 0 { &zero_h } else { &steps[t - 1].h };
            let out = cell(params, &sample.obs[t], h_prev);
            steps.push(out);
        }

        // Backward through time.
        let mut dh_next = vec![0.0; d.hidden];
        for t in (0..t_len).rev() {
            let step = &steps[t];
            let h_prev = if t == 0 { &zero_h } else { &steps[t - 1].h };

            let a = sample.actions[t];
            if a >= d.actions {
                return Err(NeuralError::ShapeMismatch("action index"));
            }
            let err = step.q[a] - sample.targets[t];
            loss += err * err / m;

            // Head: dq is nonzero only at the taken action.
            let dq_a = 2.0 * err / m;
            let relu_h: Vec<f64> = step.h.iter().map(|&v| v.max(0.0)).collect();
            let w2_row = &mut grads.w2[a * d.hidden..(a + 1) * d.hidden];
            for (g, &u) in w2_row.iter_mut().zip(&relu_h) {
                *g += dq_a * u;
            }
            grads.b2[a] += dq_a;

            // dh = relu'(h) . W2^T dq + recurrent gradient.
            let mut dh = dh_next.clone();
            let w2_row = &params.w2[a * d.hidden..(a + 1) * d.hidden];
            for k in 0..d.hidden {
                if step.h[k] > 0.0 {
                    dh[k] += dq_a * w2_row[k];
                }
            }

            // Gate backsolve.
            let mut dz = vec![0.0; d.hidden];
            let mut dc = vec![0.0; d.hidden];
            let mut dh_prev = vec![0.0; d.hidden];
            for k in 0..d.hidden {
                dz[k] = dh[k] * (step.c[k] - h_prev[k]);
                dc[k] = dh[k] * step.z[k];
                dh_prev[k] = dh[k] * (1.0 - step.z[k]);
            }

            let da_c: Vec<f64> = (0..d.hidden)
                .map(|k| dc[k] * (1.0 - step.c[k] * step.c[k]))
                .collect();
            outer_acc(&mut grads.wh, &da_c, &step.x);
            outer_acc(&mut grads.uh, &da_c, &step.rh);
            add_acc(&mut grads.bh, &da_c);

            let mut drh = vec![0.0; d.hidden];
            matvec_t_acc(&params.uh, &da_c, &mut drh);
            let mut dr = vec![0.0; d.hidden];
            for k in 0..d.hidden {
                dr[k] = drh[k] * h_prev[k];
                dh_prev[k] += drh[k] * step.r[k];
            }

            let da_r: Vec<f64> = (0..d.hidden)
                .map(|k| dr[k] * step.r[k] * (1.0 - step.r[k]))
                .collect();
            outer_acc(&mut grads.wr, &da_r, &step.x);
            outer_acc(&mut grads.ur, &da_r, h_prev);
            add_acc(&mut grads.br, &da_r);
            matvec_t_acc(&params.ur, &da_r, &mut dh_prev);

            let da_z: Vec<f64> = (0..d.hidden)
                .map(|k| dz[k] * step.z[k] * (1.0 - step.z[k]))
                .collect();
            outer_acc(&mut grads.wz, &da_z, &step.x);
            outer_acc(&mut grads.uz, &da_z, h_prev);
            add_acc(&mut grads.bz, &da_z);
            matvec_t_acc(&params.uz, &da_z, &mut dh_prev);

            // Input projection.
            let mut dx = vec![0.0; d.fc1];
            matvec_t_acc(&params.wz, &da_z, &mut dx);
            matvec_t_acc(&params.wr, &da_r, &mut dx);
            matvec_t_acc(&params.wh, &da_c, &mut dx);
            outer_acc(&mut grads.w1, &dx, &sample.obs[t]);
            add_acc(&mut grads.b1, &dx);

            dh_next = dh_prev;
        }
    }

    if !grads.all_finite() || !loss.is_finite() {
        return Err(NeuralError::NonFinite("gradients"));
    }
    Ok((grads, loss))
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(dims: NetDims) -> AdamState {
        let count = dims.param_count();
        AdamState {
            m: vec![0.0; count],
            v: vec![0.0; count],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update with bias correction, in place.
pub fn adam_step(
    params: &mut QNetParams,
    grads: &QNetParams,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<(), NeuralError> {
    if grads.dims != params.dims {
        return Err(NeuralError::ShapeMismatch("gradients"));
    }
    if state.m.len() != params.dims.param_count() {
        return Err(NeuralError::ShapeMismatch("optimizer state"));
    }
    state.t += 1;
    let bc1 = 1.0 - hyper.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(state.t as i32);

    let mut offset = 0;
    let grad_arrays = grads.arrays();
    for (idx, p) in params.arrays_mut().into_iter().enumerate() {
        let g = grad_arrays[idx];
        for (i, (pv, &gv)) in p.iter_mut().zip(g.iter()).enumerate() {
            let m = &mut state.m[offset + i];
            let v = &mut state.v[offset + i];
            *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * gv;
            *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * gv * gv;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *pv -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
        offset += g.len();
    }
    if !params.all_finite() {
        return Err(NeuralError::NonFinite("adam update"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SMALL: NetDims = NetDims {
        input: 3,
        fc1: 4,
        hidden: 5,
        actions: 3,
    };

    fn random_sample(dims: NetDims, t_len: usize, rng: &mut ChaCha8Rng) -> SequenceSample {
        SequenceSample {
            obs: (0..t_len)
                .map(|_| (0..dims.input).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
            actions: (0..t_len).map(|_| rng.gen_range(0..dims.actions)).collect(),
            targets: (0..t_len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    fn batch_loss(params: &QNetParams, batch: &[SequenceSample]) -> f64 {
        let m: usize = batch.iter().map(|s| s.actions.len()).sum();
        let mut loss = 0.0;
        for s in batch {
            let qs = forward_sequence(params, &s.obs).unwrap();
            for t in 0..s.actions.len() {
                let err = qs[t][s.actions[t]] - s.targets[t];
                loss += err * err;
            }
        }
        loss / m as f64
    }

    #[test]
    fn default_parameter_count() {
        // 64*12+64 + 3*(64*64+64*64+64) + 7*64+7
        let expected = 64 * 12 + 64 + 3 * (64 * 64 + 64 * 64 + 64) + 7 * 64 + 7;
        assert_eq!(NetDims::DEFAULT.param_count(), expected);
        assert_eq!(expected, 26_055);
        assert_eq!(
            init_params(NetDims::DEFAULT, 0).flatten().len(),
            26_055
        );
    }

    #[test]
    fn init_reproducible_and_bounded() {
        let a = init_params(NetDims::DEFAULT, 42);
        let b = init_params(NetDims::DEFAULT, 42);
        assert_eq!(a, b);
        let c = init_params(NetDims::DEFAULT, 43);
        assert_ne!(a, c);

        let bound_w1 = 1.0 / (12f64).sqrt();
        assert!(a.w1.iter().all(|&w| w.abs() <= bound_w1));
        let bound_rec = 1.0 / 8.0;
        assert!(a.uz.iter().all(|&w| w.abs() <= bound_rec));
        assert!(a.b1.iter().chain(&a.bz).chain(&a.b2).all(|&b| b == 0.0));
    }

    #[test]
    fn zero_params_give_zero_output() {
        // With zero weights the gates sit at 0.5 and the candidate at 0, so a
        // zero hidden state stays zero and the head outputs zeros.
        let params = QNetParams::zeros(SMALL);
        let state = GruState::zeros(SMALL.hidden);
        let (q, next) = forward(&params, &[0.3, -0.2, 0.9], &state).unwrap();
        assert_eq!(q, vec![0.0; 3]);
        assert_eq!(next.h, vec![0.0; 5]);
    }

    #[test]
    fn forward_shapes_and_purity() {
        let params = init_params(NetDims::DEFAULT, 7);
        let obs = vec![0.1; 12];
        let state = GruState::zeros(64);
        let (q1, h1) = forward(&params, &obs, &state).unwrap();
        let (q2, h2) = forward(&params, &obs, &state).unwrap();
        assert_eq!(q1.len(), 7);
        assert_eq!(q1, q2);
        assert_eq!(h1, h2);
        assert!(forward(&params, &[0.0; 5], &state).is_err());
        assert!(forward(&params, &[f64::NAN; 12], &state).is_err());
    }

    #[test]
    fn flatten_unflatten_bijection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let seed = rng.gen::<u64>();
            let params = init_params(SMALL, seed);
            let flat = params.flatten();
            let back = QNetParams::unflatten(SMALL, &flat).unwrap();
            assert_eq!(params, back);
            assert_eq!(back.flatten(), flat);
        }
        let short = vec![0.0; SMALL.param_count() - 1];
        assert!(matches!(
            QNetParams::unflatten(SMALL, &short),
            Err(NeuralError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn zero_loss_gives_zero_gradients() {
        let params = init_params(SMALL, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut sample = random_sample(SMALL, 6, &mut rng);
        let qs = forward_sequence(&params, &sample.obs).unwrap();
        for t in 0..6 {
            sample.targets[t] = qs[t][sample.actions[t]];
        }
        let (grads, loss) = bptt_gradients(&params, &[sample]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn head_gradient_matches_hand_derivation() {
        // One slot, one sample: the head weight gradient for the taken action
        // is 2 (q_a - y) relu(h') / batch pairs, everything else in the head
        // rows stays zero.
        let params = init_params(SMALL, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sample = random_sample(SMALL, 1, &mut rng);
        let a = sample.actions[0];

        let (q, state) = forward(
            &params,
            &sample.obs[0],
            &GruState::zeros(SMALL.hidden),
        )
        .unwrap();
        let relu_h: Vec<f64> = state.h.iter().map(|&v| v.max(0.0)).collect();
        let coeff = 2.0 * (q[a] - sample.targets[0]);

        let (grads, _) = bptt_gradients(&params, &[sample]).unwrap();
        for k in 0..SMALL.hidden {
            let expected = coeff * relu_h[k];
            assert!((grads.w2[a * SMALL.hidden + k] - expected).abs() < 1e-12);
        }
        for other in 0..SMALL.actions {
            if other != a {
                assert!(grads.w2[other * SMALL.hidden..(other + 1) * SMALL.hidden]
                    .iter()
                    .all(|&g| g == 0.0));
                assert_eq!(grads.b2[other], 0.0);
            }
        }
        assert!((grads.b2[a] - coeff).abs() < 1e-12);
    }

    /// Central finite differences over every coordinate of a small instance.
    /// Instances whose hidden activations sit within 1e-4 of the ReLU kink
    /// are re-drawn: the loss is not differentiable there.
    fn gradient_check_instance(seed: u64) -> Option<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(SMALL, rng.gen());
        let batch: Vec<SequenceSample> = (0..2).map(|_| random_sample(SMALL, 4, &mut rng)).collect();

        for s in &batch {
            let mut state = GruState::zeros(SMALL.hidden);
            for obs in &s.obs {
                let (_, next) = forward(&params, obs, &state).unwrap();
                if next.h.iter().any(|&h| h.abs() < 1e-4) {
                    return None;
                }
                state = next;
            }
        }

        let (grads, _) = bptt_gradients(&params, &batch).unwrap();
        let analytic = grads.flatten();
        let flat = params.flatten();
        let step = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += step;
            let mut minus = flat.clone();
            minus[i] -= step;
            let lp = batch_loss(&QNetParams::unflatten(SMALL, &plus).unwrap(), &batch);
            let lm = batch_loss(&QNetParams::unflatten(SMALL, &minus).unwrap(), &batch);
            let numeric = (lp - lm) / (2.0 * step);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
        Some(worst)
    }

    #[test]
    fn bptt_matches_finite_differences() {
        let mut checked = 0;
        let mut seed = 0u64;
        while checked < 5 {
            seed += 1;
            if let Some(worst) = gradient_check_instance(seed) {
                assert!(worst < 1e-4, "seed {seed}: relative error {worst}");
                checked += 1;
            }
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut params = init_params(SMALL, 9);
        let before = params.clone();
        let grads = QNetParams::zeros(SMALL);
        let mut state = AdamState::new(SMALL);
        adam_step(&mut params, &grads, &mut state, &AdamHyper::default()).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adam_first_step_closed_form() {
        // After one step from zero moments the update is
        // -lr * g / (|g| + eps) per coordinate.
        let mut params = init_params(SMALL, 13);
        let before = params.flatten();
        let grad_params = init_params(SMALL, 14); // arbitrary non-zero values
        let grads = grad_params.flatten();
        let mut state = AdamState::new(SMALL);
        let hyper = AdamHyper::default();
        adam_step(&mut params, &grad_params, &mut state, &hyper).unwrap();
        let after = params.flatten();
        for i in 0..before.len() {
            let expected = -hyper.lr * grads[i] / (grads[i].abs() + hyper.eps);
            assert!(
                (after[i] - before[i] - expected).abs() < 1e-12,
                "coordinate {i}"
            );
        }
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_deterministic() {
        let run = || {
            let mut params = init_params(SMALL, 1);
            let mut state = AdamState::new(SMALL);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            for _ in 0..5 {
                let batch = vec![random_sample(SMALL, 3, &mut rng)];
                let (grads, _) = bptt_gradients(&params, &batch).unwrap();
                adam_step(&mut params, &grads, &mut state, &AdamHyper::default()).unwrap();
            }
            params.flatten()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut params = init_params(SMALL, 1);
        let grads = QNetParams::zeros(NetDims {
            input: 2,
            fc1: 4,
            hidden: 5,
            actions: 3,
        });
        let mut state = AdamState::new(SMALL);
        assert!(matches!(
            adam_step(&mut params, &grads, &mut state, &AdamHyper::default()),
            Err(NeuralError::ShapeMismatch(_))
        ));
    }
}
