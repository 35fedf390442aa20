//! Shared-trunk actor-critic MLP with hand-written reverse mode.
//!
//! All weights live in one flat vector so the optimizer, gradient clipping,
//! checkpoints and finite-difference checks treat them uniformly. Layer `k`
//! stores its `out × in` weight matrix column-major followed by its bias.

use nalgebra::{DMatrix, DMatrixView};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{RlError, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Layer widths. The trunk is one tanh layer shared by both branches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkShape {
    pub input: usize,
    pub shared: usize,
    pub actor: Vec<usize>,
    pub critic: Vec<usize>,
}

impl NetworkShape {
    /// 512 shared, then 256 → 128 in each branch.
    pub fn standard(input: usize) -> Self {
        Self {
            input,
            shared: 512,
            actor: vec![256, 128],
            critic: vec![256, 128],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = std::iter::once(&self.input)
            .chain(std::iter::once(&self.shared))
            .chain(&self.actor)
            .chain(&self.critic);
        for &w in all {
            if w == 0 {
                return Err(crate::error::invalid_config("network", "layer widths must be positive"));
            }
        }
        Ok(())
    }

    /// `(out, in)` of every dense layer in storage order: trunk, actor
    /// hidden layers, actor head, critic hidden layers, critic head.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![(self.shared, self.input)];
        let mut prev = self.shared;
        for &w in &self.actor {
            dims.push((w, prev));
            prev = w;
        }
        dims.push((1, prev));
        prev = self.shared;
        for &w in &self.critic {
            dims.push((w, prev));
            prev = w;
        }
        dims.push((1, prev));
        dims
    }

    /// Total parameter count including the single `log_std` entry.
    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(o, i)| o * i + o).sum::<usize>() + 1
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    rows: usize,
    cols: usize,
    w: usize,
    b: usize,
}

/// Actor-critic parameters plus the layout needed to read them.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorCritic {
    shape: NetworkShape,
    params: Vec<f64>,
}

/// Activations kept from a forward pass for the backward pass.
pub struct ForwardCache {
    input: DMatrix<f64>,
    trunk: DMatrix<f64>,
    actor: Vec<DMatrix<f64>>,
    critic: Vec<DMatrix<f64>>,
    pub mean: Vec<f64>,
    pub value: Vec<f64>,
}

fn slots(shape: &NetworkShape) -> Vec<Slot> {
    let mut off = 0;
    shape
        .layer_dims()
        .into_iter()
        .map(|(rows, cols)| {
            let s = Slot {
                rows,
                cols,
                w: off,
                b: off + rows * cols,
            };
            off += rows * cols + rows;
            s
        })
        .collect()
}

/// `tanh(W a + b)` when `act`, else the affine map.
fn dense(params: &[f64], s: Slot, a: &DMatrix<f64>, act: bool) -> DMatrix<f64> {
    let w = DMatrixView::from_slice(&params[s.w..s.w + s.rows * s.cols], s.rows, s.cols);
    let mut z = w * a;
    let b = &params[s.b..s.b + s.rows];
    for mut col in z.column_iter_mut() {
        for (v, bi) in col.iter_mut().zip(b) {
            *v += bi;
            if act {
                *v = v.tanh();
            }
        }
    }
    z
}

/// Accumulates weight and bias gradients of one layer and returns the
/// gradient with respect to its input.
fn dense_backward(params: &[f64], grad: &mut [f64], s: Slot, a_in: &DMatrix<f64>, dz: &DMatrix<f64>) -> DMatrix<f64> {
    let gw = dz * a_in.transpose();
    for (g, v) in grad[s.w..s.w + s.rows * s.cols].iter_mut().zip(gw.as_slice()) {
        *g += v;
    }
    for (r, g) in grad[s.b..s.b + s.rows].iter_mut().enumerate() {
        *g += dz.row(r).sum();
    }
    let w = DMatrixView::from_slice(&params[s.w..s.w + s.rows * s.cols], s.rows, s.cols);
    w.transpose() * dz
}

/// `d ⊙ (1 − a²)`: back through a tanh whose output was `a`.
fn through_tanh(mut d: DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    d.zip_apply(a, |g, y| *g *= 1.0 - y * y);
    d
}

impl ActorCritic {
    pub fn zeros(shape: NetworkShape) -> Result<Self> {
        shape.validate()?;
        let n = shape.param_count();
        Ok(Self {
            shape,
            params: vec![0.0; n],
        })
    }

    /// Orthogonal init: gain sqrt(2) on hidden layers, 0.01 on the policy
    /// head, 1 on the value head; zero biases; `log_std = initial_log_std`.
    pub fn init<R: Rng>(shape: NetworkShape, initial_log_std: f64, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(shape)?;
        let slots = slots(&net.shape);
        let actor_head = net.shape.actor.len() + 1;
        let critic_head = slots.len() - 1;
        for (k, s) in slots.iter().enumerate() {
            let gain = if k == actor_head {
                0.01
            } else if k == critic_head {
                1.0
            } else {
                std::f64::consts::SQRT_2
            };
            let q = orthogonal(s.rows, s.cols, rng);
            for (dst, v) in net.params[s.w..s.w + s.rows * s.cols].iter_mut().zip(q.as_slice()) {
                *dst = gain * v;
            }
        }
        net.set_log_std(initial_log_std);
        Ok(net)
    }

    pub fn from_params(shape: NetworkShape, params: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        let expected = shape.param_count();
        if params.len() != expected {
            return Err(RlError::ShapeMismatch {
                what: "parameter vector",
                expected,
                found: params.len(),
            });
        }
        Ok(Self { shape, params })
    }

    pub fn shape(&self) -> &NetworkShape {
        &self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn log_std(&self) -> f64 {
        self.params[self.params.len() - 1]
    }

    pub fn set_log_std(&mut self, v: f64) {
        let n = self.params.len();
        self.params[n - 1] = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
    }

    /// Re-imposes the `log_std` bounds after an optimizer step.
    pub fn clamp_log_std(&mut self) {
        self.set_log_std(self.log_std());
    }

    /// Weight matrices in storage order, for norm bounds and inspection.
    pub fn weight_matrices(&self) -> Vec<DMatrix<f64>> {
        slots(&self.shape)
            .iter()
            .map(|s| DMatrix::from_column_slice(s.rows, s.cols, &self.params[s.w..s.w + s.rows * s.cols]))
            .collect()
    }

    /// Batched forward pass; `obs` is `input × batch`.
    pub fn forward_batch(&self, obs: &DMatrix<f64>) -> Result<ForwardCache> {
        if obs.nrows() != self.shape.input {
            return Err(RlError::ShapeMismatch {
                what: "observation",
                expected: self.shape.input,
                found: obs.nrows(),
            });
        }
        let slots = slots(&self.shape);
        let na = self.shape.actor.len();
        let trunk = dense(&self.params, slots[0], obs, true);

        let mut actor = Vec::with_capacity(na);
        let mut a = trunk.clone();
        for s in &slots[1..=na] {
            a = dense(&self.params, *s, &a, true);
            actor.push(a.clone());
        }
        let mean = dense(&self.params, slots[na + 1], &a, false);

        let mut critic = Vec::with_capacity(self.shape.critic.len());
        let mut c = trunk.clone();
        for s in &slots[na + 2..slots.len() - 1] {
            c = dense(&self.params, *s, &c, true);
            critic.push(c.clone());
        }
        let value = dense(&self.params, slots[slots.len() - 1], &c, false);

        let cache = ForwardCache {
            input: obs.clone(),
            trunk,
            actor,
            critic,
            mean: mean.as_slice().to_vec(),
            value: value.as_slice().to_vec(),
        };
        if cache.mean.iter().chain(&cache.value).any(|v| !v.is_finite()) {
            return Err(RlError::NonFiniteOutput);
        }
        Ok(cache)
    }

    /// `(mean, log_std, value)` for a single observation.
    pub fn forward(&self, obs: &[f64]) -> Result<(f64, f64, f64)> {
        let cache = self.forward_batch(&DMatrix::from_column_slice(obs.len(), 1, obs))?;
        Ok((cache.mean[0], self.log_std(), cache.value[0]))
    }

    /// Adds parameter gradients for upstream gradients on the per-sample
    /// means and values and on `log_std`.
    pub fn backward(&self, cache: &ForwardCache, d_mean: &[f64], d_value: &[f64], d_log_std: f64, grad: &mut [f64]) {
        let slots = slots(&self.shape);
        let na = self.shape.actor.len();
        let batch = d_mean.len();

        let mut d = DMatrix::from_row_slice(1, batch, d_mean);
        for k in (0..=na).rev() {
            let a_in = if k == 0 { &cache.trunk } else { &cache.actor[k - 1] };
            let da = dense_backward(&self.params, grad, slots[k + 1], a_in, &d);
            d = through_tanh(da, a_in);
        }
        let mut d_trunk = d;

        let nc = self.shape.critic.len();
        let mut d = DMatrix::from_row_slice(1, batch, d_value);
        for k in (0..=nc).rev() {
            let a_in = if k == 0 { &cache.trunk } else { &cache.critic[k - 1] };
            let da = dense_backward(&self.params, grad, slots[na + 2 + k], a_in, &d);
            d = through_tanh(da, a_in);
        }
        d_trunk += d;

        dense_backward(&self.params, grad, slots[0], &cache.input, &d_trunk);
        let n = grad.len();
        grad[n - 1] += d_log_std;
    }
}

/// `rows × cols` matrix with orthonormal rows or columns.
fn orthogonal<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let g = DMatrix::from_fn(tall, short, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // sign fix makes the distribution uniform
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if rows >= cols {
        q
    } else {
        q.transpose()
    }
}

/// Spectral norm, for Lipschitz bounds.
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().iter().cloned().fold(0.0, f64::max)
}

/// Column-stacked observation batch from row-major samples.
pub fn obs_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let dim = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(dim, rows.len(), |i, j| rows[j][i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standard_shape_layout() {
        let s = NetworkShape::standard(2);
        assert_eq!(s.layer_dims(), vec![(512, 2), (256, 512), (128, 256), (1, 128), (256, 512), (128, 256), (1, 128)]);
        let expected = 512 * 3 + (256 * 513 + 128 * 257 + 129) * 2 + 1;
        assert_eq!(s.param_count(), expected);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = ActorCritic::zeros(NetworkShape::standard(2)).unwrap();
        let (m, ls, v) = net.forward(&[3.0, -1.0]).unwrap();
        assert_eq!((m, ls, v), (0.0, 0.0, 0.0));
    }

    #[test]
    fn orthogonal_init_has_unit_singular_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = orthogonal(7, 3, &mut rng);
        let gram = q.transpose() * &q;
        assert!((gram - DMatrix::identity(3, 3)).norm() < 1e-12);
        let q = orthogonal(3, 7, &mut rng);
        assert!((&q * q.transpose() - DMatrix::identity(3, 3)).norm() < 1e-12);
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let net = ActorCritic::zeros(NetworkShape::standard(2)).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(RlError::ShapeMismatch { .. })));
    }

    #[test]
    fn log_std_is_clamped() {
        let mut net = ActorCritic::zeros(NetworkShape::standard(2)).unwrap();
        net.set_log_std(10.0);
        assert_eq!(net.log_std(), LOG_STD_MAX);
        *net.params_mut().last_mut().unwrap() = -9.0;
        net.clamp_log_std();
        assert_eq!(net.log_std(), LOG_STD_MIN);
    }
}
