//! Small configurable embedding MLP with exact hand-derived backward passes.
//!
//! The network is a stack of linear layers with ReLU on every hidden layer
//! and a plain linear output (there is no classification head; distance to
//! prototypes plays that role). Batch normalization can be enabled on the
//! hidden layers; its running statistics live in the parameter set so they
//! are averaged by federated aggregation like every other value.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;

/// Shape of the embedding network. Hidden layers use ReLU; the output layer
/// is linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    #[serde(default)]
    pub use_batch_norm: bool,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("network.input_dim must be >= 1".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("network.embedding_dim must be >= 1".into()));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::Config("network.hidden_dims entries must be >= 1".into()));
        }
        Ok(())
    }

    /// Layer widths from input to embedding.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.embedding_dim);
        dims
    }

    fn n_linear(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    fn n_bn(&self) -> usize {
        if self.use_batch_norm {
            self.hidden_dims.len()
        } else {
            0
        }
    }

    /// Tensors per hidden layer in the trainable list.
    fn stride(&self) -> usize {
        if self.use_batch_norm {
            4
        } else {
            2
        }
    }

    /// Total trainable scalar count (weights, biases, batch-norm scale/shift).
    pub fn param_count(&self) -> usize {
        let dims = self.dims();
        let mut n = 0;
        for i in 0..self.n_linear() {
            n += dims[i] * dims[i + 1] + dims[i + 1];
        }
        for h in 0..self.n_bn() {
            n += 2 * self.hidden_dims[h];
        }
        n
    }
}

/// Model weights with paired gradient storage, optimizer state and (when
/// batch norm is on) running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<F = f32> {
    pub(crate) layers: Vec<Tensor<F>>,
    pub(crate) grads: Vec<Tensor<F>>,
    pub(crate) rms: Vec<Tensor<F>>,
    /// Running mean/variance pairs for each batch-norm layer.
    pub(crate) running: Vec<Tensor<F>>,
}

impl<F: Real> ParameterSet<F> {
    /// He-uniform fan-in initialization with zero biases, seeded. Weights are
    /// drawn in f64 and converted, so every precision sees the same values.
    pub fn init(config: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let dims = config.dims();
        let mut layers = Vec::new();
        let mut running = Vec::new();
        for i in 0..config.n_linear() {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            let w: Vec<F> = (0..fan_in * fan_out)
                .map(|_| F::from_f64_c(rng.gen_range(-limit..limit)))
                .collect();
            layers.push(Tensor::from_vec(&[fan_in, fan_out], w).unwrap());
            layers.push(Tensor::zeros(&[fan_out]));
            if config.use_batch_norm && i < config.n_linear() - 1 {
                layers.push(Tensor::filled(&[fan_out], F::one())); // scale
                layers.push(Tensor::zeros(&[fan_out])); // shift
                running.push(Tensor::zeros(&[fan_out])); // running mean
                running.push(Tensor::filled(&[fan_out], F::one())); // running var
            }
        }
        let grads = layers.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let rms = layers.iter().map(|t| Tensor::zeros(t.shape())).collect();
        ParameterSet {
            layers,
            grads,
            rms,
            running,
        }
    }

    pub(crate) fn from_values(layers: Vec<Tensor<F>>, running: Vec<Tensor<F>>) -> Self {
        let grads = layers.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let rms = layers.iter().map(|t| Tensor::zeros(t.shape())).collect();
        ParameterSet {
            layers,
            grads,
            rms,
            running,
        }
    }

    pub fn trainable(&self) -> &[Tensor<F>] {
        &self.layers
    }

    pub fn grads(&self) -> &[Tensor<F>] {
        &self.grads
    }

    pub fn rms_state(&self) -> &[Tensor<F>] {
        &self.rms
    }

    pub fn running_stats(&self) -> &[Tensor<F>] {
        &self.running
    }

    /// Total number of scalar values carried (trainable plus running stats).
    pub fn num_values(&self) -> usize {
        self.layers.iter().map(Tensor::numel).sum::<usize>()
            + self.running.iter().map(Tensor::numel).sum::<usize>()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v = F::zero();
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Tensor::is_finite) && self.running.iter().all(Tensor::is_finite)
    }

    /// Checks that shapes are compatible with `config`.
    pub fn matches(&self, config: &NetworkConfig) -> Result<()> {
        let dims = config.dims();
        let stride = config.stride();
        let expected = config.n_linear() * 2 + config.n_bn() * 2;
        if self.layers.len() != expected {
            return Err(Error::shape("ParameterSet tensors", expected, self.layers.len()));
        }
        for i in 0..config.n_linear() {
            let base = i * stride;
            let w = &self.layers[base];
            if w.shape() != [dims[i], dims[i + 1]] {
                return Err(Error::shape(
                    format!("layer {i} weight"),
                    format!("[{}, {}]", dims[i], dims[i + 1]),
                    format!("{:?}", w.shape()),
                ));
            }
            if self.layers[base + 1].shape() != [dims[i + 1]] {
                return Err(Error::shape(
                    format!("layer {i} bias"),
                    format!("[{}]", dims[i + 1]),
                    format!("{:?}", self.layers[base + 1].shape()),
                ));
            }
        }
        if self.running.len() != config.n_bn() * 2 {
            return Err(Error::shape(
                "ParameterSet running stats",
                config.n_bn() * 2,
                self.running.len(),
            ));
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> ParameterSet<G> {
        ParameterSet {
            layers: self.layers.iter().map(Tensor::cast).collect(),
            grads: self.grads.iter().map(Tensor::cast).collect(),
            rms: self.rms.iter().map(Tensor::cast).collect(),
            running: self.running.iter().map(Tensor::cast).collect(),
        }
    }
}

struct LayerCache<F> {
    /// Input to the linear layer.
    input: Tensor<F>,
    /// Normalized activations (batch-norm layers only).
    xhat: Option<Tensor<F>>,
    /// Per-feature 1/sqrt(var + eps) (batch-norm layers only).
    inv_std: Option<Vec<F>>,
    /// Layer output after activation; doubles as the ReLU mask.
    output: Tensor<F>,
}

struct Cache<F> {
    layers: Vec<LayerCache<F>>,
}

/// The embedding network: configuration, parameters and the activation cache
/// connecting `forward` to `backward`.
pub struct EmbeddingNet<F = f32> {
    config: NetworkConfig,
    params: ParameterSet<F>,
    cache: Option<Cache<F>>,
}

impl<F: Real> EmbeddingNet<F> {
    pub fn new(config: NetworkConfig, params: ParameterSet<F>) -> Result<Self> {
        config.validate()?;
        params.matches(&config)?;
        Ok(EmbeddingNet {
            config,
            params,
            cache: None,
        })
    }

    pub fn init(config: NetworkConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let params = ParameterSet::init(&config, rng);
        Ok(EmbeddingNet {
            config,
            params,
            cache: None,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet<F> {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterSet<F> {
        self.params
    }

    fn check_batch(&self, batch: &Tensor<F>) -> Result<()> {
        if batch.shape().len() != 2 || batch.cols() != self.config.input_dim {
            return Err(Error::shape(
                "layer 0 input",
                format!("[B, {}]", self.config.input_dim),
                format!("{:?}", batch.shape()),
            ));
        }
        Ok(())
    }

    /// Training-mode forward pass: batch statistics for batch norm (running
    /// statistics are updated) and activations cached for `backward`.
    pub fn forward(&mut self, batch: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_batch(batch)?;
        let n_linear = self.config.n_linear();
        let stride = self.config.stride();
        let mut caches = Vec::with_capacity(n_linear);
        let mut x = batch.clone();
        for i in 0..n_linear {
            let base = i * stride;
            let mut z = linear_forward(&x, &self.params.layers[base], &self.params.layers[base + 1]);
            let hidden = i < n_linear - 1;
            let (mut xhat, mut inv_std) = (None, None);
            if hidden && self.config.use_batch_norm {
                let gamma = &self.params.layers[base + 2];
                let beta = &self.params.layers[base + 3];
                let (normed, hat, istd, mean, var) = bn_forward_train(&z, gamma, beta);
                update_running(&mut self.params.running[2 * i], &mean);
                update_running(&mut self.params.running[2 * i + 1], &var);
                z = normed;
                xhat = Some(hat);
                inv_std = Some(istd);
            }
            let output = if hidden { relu(&z) } else { z };
            caches.push(LayerCache {
                input: x,
                xhat,
                inv_std,
                output: output.clone(),
            });
            x = output;
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("forward embeddings".into()));
        }
        self.cache = Some(Cache { layers: caches });
        Ok(x)
    }

    /// Evaluation-mode forward pass: running statistics, no cache.
    pub fn infer(&self, batch: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_batch(batch)?;
        let n_linear = self.config.n_linear();
        let stride = self.config.stride();
        let mut x = batch.clone();
        for i in 0..n_linear {
            let base = i * stride;
            let mut z = linear_forward(&x, &self.params.layers[base], &self.params.layers[base + 1]);
            let hidden = i < n_linear - 1;
            if hidden && self.config.use_batch_norm {
                let gamma = &self.params.layers[base + 2];
                let beta = &self.params.layers[base + 3];
                bn_forward_eval(
                    &mut z,
                    gamma,
                    beta,
                    &self.params.running[2 * i],
                    &self.params.running[2 * i + 1],
                );
            }
            x = if hidden { relu(&z) } else { z };
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("infer embeddings".into()));
        }
        Ok(x)
    }

    /// Backward pass from an upstream gradient on the embeddings; gradients
    /// accumulate into `params.grads`. Consumes the cache of the matching
    /// `forward` call.
    pub fn backward(&mut self, upstream: &Tensor<F>) -> Result<()> {
        let cache = self.cache.take().ok_or(Error::BackwardBeforeForward)?;
        let n_linear = self.config.n_linear();
        let stride = self.config.stride();
        let last = cache.layers.last().unwrap();
        if upstream.shape() != last.output.shape() {
            return Err(Error::shape(
                "backward upstream gradient",
                format!("{:?}", last.output.shape()),
                format!("{:?}", upstream.shape()),
            ));
        }
        let mut grad = upstream.clone();
        for i in (0..n_linear).rev() {
            let lc = &cache.layers[i];
            let base = i * stride;
            let hidden = i < n_linear - 1;
            if hidden {
                relu_backward_in_place(&mut grad, &lc.output);
            }
            if hidden && self.config.use_batch_norm {
                let xhat = lc.xhat.as_ref().unwrap();
                let inv_std = lc.inv_std.as_ref().unwrap();
                let gamma = self.params.layers[base + 2].clone();
                let (dgamma, dbeta, dz) = bn_backward(&grad, xhat, inv_std, &gamma);
                accumulate(&mut self.params.grads[base + 2], &dgamma);
                accumulate(&mut self.params.grads[base + 3], &dbeta);
                grad = dz;
            }
            let (dw, db, dx) = linear_backward(&grad, &lc.input, &self.params.layers[base]);
            accumulate(&mut self.params.grads[base], &dw);
            accumulate(&mut self.params.grads[base + 1], &db);
            grad = dx;
        }
        Ok(())
    }
}

fn linear_forward<F: Real>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (batch, fan_in) = (x.rows(), x.cols());
    let fan_out = w.cols();
    let mut out = Tensor::zeros(&[batch, fan_out]);
    for r in 0..batch {
        let xr = x.row(r);
        let or = out.row_mut(r);
        or.copy_from_slice(b.data());
        for (k, &xv) in xr.iter().enumerate() {
            if xv == F::zero() {
                continue;
            }
            let wr = w.row(k);
            for j in 0..fan_out {
                or[j] += xv * wr[j];
            }
        }
        debug_assert_eq!(xr.len(), fan_in);
    }
    out
}

/// dW = x^T g, db = column sums of g, dx = g W^T.
fn linear_backward<F: Real>(
    g: &Tensor<F>,
    x: &Tensor<F>,
    w: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (batch, fan_out) = (g.rows(), g.cols());
    let fan_in = x.cols();
    let mut dw = Tensor::zeros(&[fan_in, fan_out]);
    let mut db = Tensor::zeros(&[fan_out]);
    let mut dx = Tensor::zeros(&[batch, fan_in]);
    for r in 0..batch {
        let gr = g.row(r);
        let xr = x.row(r);
        for (j, &gv) in gr.iter().enumerate() {
            db.data_mut()[j] += gv;
        }
        for k in 0..fan_in {
            let xv = xr[k];
            let dwr = dw.row_mut(k);
            for (j, &gv) in gr.iter().enumerate() {
                dwr[j] += xv * gv;
            }
        }
        let dxr = dx.row_mut(r);
        for k in 0..fan_in {
            let wr = w.row(k);
            let mut acc = F::zero();
            for (j, &gv) in gr.iter().enumerate() {
                acc += gv * wr[j];
            }
            dxr[k] = acc;
        }
    }
    (dw, db, dx)
}

fn relu<F: Real>(z: &Tensor<F>) -> Tensor<F> {
    let mut out = z.clone();
    for v in out.data_mut() {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
    out
}

fn relu_backward_in_place<F: Real>(grad: &mut Tensor<F>, output: &Tensor<F>) {
    for (g, &o) in grad.data_mut().iter_mut().zip(output.data().iter()) {
        if o <= F::zero() {
            *g = F::zero();
        }
    }
}

/// Batch-norm training forward; returns (out, xhat, inv_std, mean, var).
#[allow(clippy::type_complexity)]
fn bn_forward_train<F: Real>(
    z: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Vec<F>, Vec<F>, Vec<F>) {
    let (batch, width) = (z.rows(), z.cols());
    let bf = F::from_f64_c(batch as f64);
    let eps = F::from_f64_c(BN_EPS);
    let mut mean = vec![F::zero(); width];
    let mut var = vec![F::zero(); width];
    for r in 0..batch {
        for (j, &v) in z.row(r).iter().enumerate() {
            mean[j] += v;
        }
    }
    for m in &mut mean {
        *m = *m / bf;
    }
    for r in 0..batch {
        for (j, &v) in z.row(r).iter().enumerate() {
            let d = v - mean[j];
            var[j] += d * d;
        }
    }
    for v in &mut var {
        *v = *v / bf;
    }
    let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(&[batch, width]);
    let mut out = Tensor::zeros(&[batch, width]);
    for r in 0..batch {
        let zr = z.row(r);
        let hr = xhat.row_mut(r);
        for j in 0..width {
            hr[j] = (zr[j] - mean[j]) * inv_std[j];
        }
        let or = out.row_mut(r);
        for j in 0..width {
            or[j] = gamma.data()[j] * xhat.get2(r, j) + beta.data()[j];
        }
    }
    (out, xhat, inv_std, mean, var)
}

fn bn_forward_eval<F: Real>(
    z: &mut Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    run_mean: &Tensor<F>,
    run_var: &Tensor<F>,
) {
    let eps = F::from_f64_c(BN_EPS);
    let width = z.cols();
    let inv_std: Vec<F> = run_var
        .data()
        .iter()
        .map(|&v| F::one() / (v + eps).sqrt())
        .collect();
    for r in 0..z.rows() {
        let zr = z.row_mut(r);
        for j in 0..width {
            zr[j] = gamma.data()[j] * (zr[j] - run_mean.data()[j]) * inv_std[j] + beta.data()[j];
        }
    }
}

fn update_running<F: Real>(running: &mut Tensor<F>, batch_stat: &[F]) {
    let momentum = F::from_f64_c(BN_MOMENTUM);
    let rest = F::one() - momentum;
    for (r, &b) in running.data_mut().iter_mut().zip(batch_stat.iter()) {
        *r = momentum * *r + rest * b;
    }
}

/// Gradient through batch statistics:
/// dz = inv_std/B * (B*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat)).
fn bn_backward<F: Real>(
    g: &Tensor<F>,
    xhat: &Tensor<F>,
    inv_std: &[F],
    gamma: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (batch, width) = (g.rows(), g.cols());
    let bf = F::from_f64_c(batch as f64);
    let mut dgamma = Tensor::zeros(&[width]);
    let mut dbeta = Tensor::zeros(&[width]);
    let mut sum_dxhat = vec![F::zero(); width];
    let mut sum_dxhat_xhat = vec![F::zero(); width];
    for r in 0..batch {
        let gr = g.row(r);
        let hr = xhat.row(r);
        for j in 0..width {
            dgamma.data_mut()[j] += gr[j] * hr[j];
            dbeta.data_mut()[j] += gr[j];
            let dxh = gr[j] * gamma.data()[j];
            sum_dxhat[j] += dxh;
            sum_dxhat_xhat[j] += dxh * hr[j];
        }
    }
    let mut dz = Tensor::zeros(&[batch, width]);
    for r in 0..batch {
        let gr = g.row(r);
        let hr = xhat.row(r);
        let dr = dz.row_mut(r);
        for j in 0..width {
            let dxh = gr[j] * gamma.data()[j];
            dr[j] = inv_std[j] / bf * (bf * dxh - sum_dxhat[j] - hr[j] * sum_dxhat_xhat[j]);
        }
    }
    (dgamma, dbeta, dz)
}

fn accumulate<F: Real>(into: &mut Tensor<F>, from: &Tensor<F>) {
    for (a, &b) in into.data_mut().iter_mut().zip(from.data().iter()) {
        *a += b;
    }
}
