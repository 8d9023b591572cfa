//! Minimal feedforward network engine for the neural multi-user detector:
//! dense layers, batch normalization, ReLU, inverted dropout, a sigmoid
//! head with binary cross-entropy, Adam, and mini-batch training.

mod checkpoint;
mod train;

pub use train::{train, EpochStats, TrainReport};

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Forward-pass mode: training uses batch statistics and active dropout,
/// inference uses running statistics and identity dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Fully connected layer computing `x W + b` on row-major batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T: Scalar> {
    /// `in x out` weight matrix.
    pub w: Array2<T>,
    pub b: Array1<T>,
}

/// Per-feature batch normalization with learned scale/shift and running
/// statistics for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T: Scalar> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub momentum: T,
    pub eps: T,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T: Scalar> {
    Dense(Dense<T>),
    BatchNorm(BatchNorm<T>),
    Relu,
    /// Inverted dropout with the given drop probability.
    Dropout(T),
}

/// Per-layer forward cache consumed by the backward pass.
pub enum Cache<T: Scalar> {
    Dense { x: Array2<T> },
    BatchNorm { xc: Array2<T>, xhat: Array2<T>, inv_std: Array1<T> },
    Relu { mask: Array2<T> },
    Dropout { mask: Array2<T> },
}

/// Parameter gradients, mirroring [`Layer`].
pub enum LayerGrads<T: Scalar> {
    Dense { dw: Array2<T>, db: Array1<T> },
    BatchNorm { dgamma: Array1<T>, dbeta: Array1<T> },
    None,
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig<T: Scalar> {
    pub learning_rate: T,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout_p: T,
    pub hidden_width: usize,
    /// Dense layers before the output dense; 3 gives the 4-dense stack.
    pub hidden_dense: usize,
    pub adam_beta1: T,
    pub adam_beta2: T,
    pub adam_eps: T,
    pub seed: u64,
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            learning_rate: T::from_f64_c(1e-3),
            batch_size: 1000,
            epochs: 20,
            dropout_p: T::from_f64_c(0.1),
            hidden_width: 256,
            hidden_dense: 3,
            adam_beta1: T::from_f64_c(0.9),
            adam_beta2: T::from_f64_c(0.999),
            adam_eps: T::from_f64_c(1e-8),
            seed: 0,
        }
    }
}

impl<T: Scalar> TrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let p = self.dropout_p.to_f64().unwrap_or(-1.0);
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout_p {p} not in [0,1)")));
        }
        if self.learning_rate < T::zero()
            || self.batch_size == 0
            || self.hidden_width == 0
            || self.hidden_dense == 0
        {
            return Err(Error::Config("train config values must be positive".into()));
        }
        Ok(())
    }
}

/// The detector network: dense blocks with batchnorm + ReLU, one dropout
/// after the last hidden block, and a dense sigmoid head.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel<T: Scalar> {
    pub layers: Vec<Layer<T>>,
    pub input_width: usize,
    pub output_width: usize,
    /// Hash of the codebook this model was trained for.
    pub codebook_hash: String,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;

impl<T: Scalar> MlpModel<T> {
    /// He-style fan-in uniform initialization of the standard architecture.
    pub fn new(
        input_width: usize,
        output_width: usize,
        config: &TrainConfig<T>,
        codebook_hash: String,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut layers = Vec::new();
        let mut prev = input_width;
        for block in 0..config.hidden_dense {
            layers.push(Layer::Dense(Dense::init(prev, config.hidden_width, rng)));
            layers.push(Layer::BatchNorm(BatchNorm::new(config.hidden_width)));
            layers.push(Layer::Relu);
            if block + 1 == config.hidden_dense {
                layers.push(Layer::Dropout(config.dropout_p));
            }
            prev = config.hidden_width;
        }
        layers.push(Layer::Dense(Dense::init(prev, output_width, rng)));
        Self { layers, input_width, output_width, codebook_hash }
    }

    /// Forward pass returning per-device probabilities in (0,1).
    ///
    /// `rng` drives dropout and is only consulted in train mode.
    pub fn forward(
        &mut self,
        batch: &Array2<T>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array2<T>> {
        let (z, _) = self.forward_cached(batch, mode, rng, false)?;
        Ok(z.mapv(sigmoid))
    }

    /// Forward pass keeping per-layer caches; returns the pre-sigmoid
    /// logits. `keep_caches = false` skips cache allocation.
    pub fn forward_cached(
        &mut self,
        batch: &Array2<T>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        keep_caches: bool,
    ) -> Result<(Array2<T>, Vec<Cache<T>>)> {
        if batch.ncols() != self.input_width {
            return Err(Error::Shape(format!(
                "batch width {} != model input width {}",
                batch.ncols(),
                self.input_width
            )));
        }
        let mut x = batch.clone();
        let mut caches = Vec::with_capacity(if keep_caches { self.layers.len() } else { 0 });
        for layer in &mut self.layers {
            let (y, cache) = layer.forward(&x, mode, rng, keep_caches)?;
            x = y;
            if keep_caches {
                caches.push(cache);
            }
        }
        Ok((x, caches))
    }

    /// Inference-mode forward pass without mutable state: batchnorm uses
    /// running statistics and dropout is identity, so the model can be
    /// shared across evaluation workers.
    pub fn infer(&self, batch: &Array2<T>) -> Result<Array2<T>> {
        if batch.ncols() != self.input_width {
            return Err(Error::Shape(format!(
                "batch width {} != model input width {}",
                batch.ncols(),
                self.input_width
            )));
        }
        let mut x = batch.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::Dense(d) => d.forward(&x),
                Layer::BatchNorm(bn) => {
                    let width = x.ncols();
                    let inv_std = bn.running_var.mapv(|v| T::one() / (v + bn.eps).sqrt());
                    let mut y = x;
                    for mut row in y.axis_iter_mut(Axis(0)) {
                        for j in 0..width {
                            row[j] = bn.gamma[j] * (row[j] - bn.running_mean[j]) * inv_std[j]
                                + bn.beta[j];
                        }
                    }
                    y
                }
                Layer::Relu => x.mapv(|v| v.max(T::zero())),
                Layer::Dropout(_) => x,
            };
        }
        Ok(x.mapv(sigmoid))
    }

    /// Backpropagates `dloss/dlogits` through all layers, returning parameter
    /// gradients in layer order.
    pub fn backward(&self, caches: &[Cache<T>], dlogits: Array2<T>) -> Vec<LayerGrads<T>> {
        let mut grad = dlogits;
        let mut out: Vec<LayerGrads<T>> = Vec::with_capacity(self.layers.len());
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            let (dx, g) = layer.backward(cache, &grad);
            grad = dx;
            out.push(g);
        }
        out.reverse();
        out
    }

    /// All trainable tensors as flat slices, in declaration order.
    pub fn param_tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.push(d.w.as_slice_mut().unwrap());
                    out.push(d.b.as_slice_mut().unwrap());
                }
                Layer::BatchNorm(bn) => {
                    out.push(bn.gamma.as_slice_mut().unwrap());
                    out.push(bn.beta.as_slice_mut().unwrap());
                }
                _ => {}
            }
        }
        out
    }

    /// Checks every parameter for NaN/Inf; index of the first offender.
    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|layer| match layer {
            Layer::Dense(d) => {
                d.w.iter().all(|v| v.is_finite()) && d.b.iter().all(|v| v.is_finite())
            }
            Layer::BatchNorm(bn) => {
                bn.gamma.iter().all(|v| v.is_finite())
                    && bn.beta.iter().all(|v| v.is_finite())
                    && bn.running_mean.iter().all(|v| v.is_finite())
                    && bn.running_var.iter().all(|v| v.is_finite())
            }
            _ => true,
        })
    }
}

impl<T: Scalar> Dense<T> {
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = T::from_f64_c((6.0 / fan_in as f64).sqrt());
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| {
            rng.gen_range(-limit..=limit)
        });
        Self { w, b: Array1::zeros(fan_out) }
    }

    fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    fn backward(&self, x: &Array2<T>, dy: &Array2<T>) -> (Array2<T>, Array2<T>, Array1<T>) {
        let dw = x.t().dot(dy);
        let db = dy.sum_axis(Axis(0));
        let dx = dy.dot(&self.w.t());
        (dx, dw, db)
    }
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
            momentum: T::from_f64_c(BN_MOMENTUM),
            eps: T::from_f64_c(BN_EPS),
        }
    }
}

impl<T: Scalar> Layer<T> {
    fn forward(
        &mut self,
        x: &Array2<T>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        keep_cache: bool,
    ) -> Result<(Array2<T>, Cache<T>)> {
        match self {
            Layer::Dense(d) => {
                let y = d.forward(x);
                Ok((y, Cache::Dense { x: if keep_cache { x.clone() } else { Array2::zeros((0, 0)) } }))
            }
            Layer::BatchNorm(bn) => {
                let b = x.nrows();
                let width = x.ncols();
                let (mean, var) = match mode {
                    Mode::Train => {
                        if b < 2 {
                            return Err(Error::Config(
                                "batchnorm needs batch size >= 2 in train mode".into(),
                            ));
                        }
                        let mean = x.mean_axis(Axis(0)).unwrap();
                        let mut var = Array1::<T>::zeros(width);
                        for row in x.axis_iter(Axis(0)) {
                            for j in 0..width {
                                let d = row[j] - mean[j];
                                var[j] = var[j] + d * d;
                            }
                        }
                        let inv_b = T::one() / T::from_usize(b).unwrap();
                        var.mapv_inplace(|v| v * inv_b);
                        // exponential moving average of the batch statistics
                        let m = bn.momentum;
                        let om = T::one() - m;
                        for j in 0..width {
                            bn.running_mean[j] = m * bn.running_mean[j] + om * mean[j];
                            bn.running_var[j] = m * bn.running_var[j] + om * var[j];
                        }
                        (mean, var)
                    }
                    Mode::Inference => (bn.running_mean.clone(), bn.running_var.clone()),
                };
                let inv_std = var.mapv(|v| T::one() / (v + bn.eps).sqrt());
                let mut xc = x.clone();
                for mut row in xc.axis_iter_mut(Axis(0)) {
                    for j in 0..width {
                        row[j] = row[j] - mean[j];
                    }
                }
                let mut xhat = xc.clone();
                for mut row in xhat.axis_iter_mut(Axis(0)) {
                    for j in 0..width {
                        row[j] = row[j] * inv_std[j];
                    }
                }
                let mut y = xhat.clone();
                for mut row in y.axis_iter_mut(Axis(0)) {
                    for j in 0..width {
                        row[j] = bn.gamma[j] * row[j] + bn.beta[j];
                    }
                }
                let cache = if keep_cache {
                    Cache::BatchNorm { xc, xhat, inv_std }
                } else {
                    Cache::BatchNorm {
                        xc: Array2::zeros((0, 0)),
                        xhat: Array2::zeros((0, 0)),
                        inv_std: Array1::zeros(0),
                    }
                };
                Ok((y, cache))
            }
            Layer::Relu => {
                let mask = x.mapv(|v| if v > T::zero() { T::one() } else { T::zero() });
                let y = x * &mask;
                Ok((y, Cache::Relu { mask: if keep_cache { mask } else { Array2::zeros((0, 0)) } }))
            }
            Layer::Dropout(p) => match mode {
                Mode::Inference => Ok((
                    x.clone(),
                    Cache::Dropout { mask: Array2::from_elem((0, 0), T::one()) },
                )),
                Mode::Train => {
                    let keep = T::one() - *p;
                    if keep >= T::one() {
                        let mask = Array2::from_elem(x.dim(), T::one());
                        let y = x.clone();
                        return Ok((y, Cache::Dropout { mask }));
                    }
                    let scale = T::one() / keep;
                    let keep64 = keep.to_f64().unwrap();
                    let mask = Array2::from_shape_fn(x.dim(), |_| {
                        if rng.gen::<f64>() < keep64 {
                            scale
                        } else {
                            T::zero()
                        }
                    });
                    let y = x * &mask;
                    Ok((y, Cache::Dropout { mask }))
                }
            },
        }
    }

    fn backward(&self, cache: &Cache<T>, dy: &Array2<T>) -> (Array2<T>, LayerGrads<T>) {
        match (self, cache) {
            (Layer::Dense(d), Cache::Dense { x }) => {
                let (dx, dw, db) = d.backward(x, dy);
                (dx, LayerGrads::Dense { dw, db })
            }
            (Layer::BatchNorm(bn), Cache::BatchNorm { xc, xhat, inv_std }) => {
                let b = xc.nrows();
                let width = xc.ncols();
                let inv_b = T::one() / T::from_usize(b).unwrap();
                let mut dgamma = Array1::<T>::zeros(width);
                let mut dbeta = Array1::<T>::zeros(width);
                for i in 0..b {
                    for j in 0..width {
                        dgamma[j] = dgamma[j] + dy[[i, j]] * xhat[[i, j]];
                        dbeta[j] = dbeta[j] + dy[[i, j]];
                    }
                }
                // dxhat = dy * gamma; standard batch-statistics backward
                let mut sum_dxhat = Array1::<T>::zeros(width);
                let mut sum_dxhat_xhat = Array1::<T>::zeros(width);
                for i in 0..b {
                    for j in 0..width {
                        let dxh = dy[[i, j]] * bn.gamma[j];
                        sum_dxhat[j] = sum_dxhat[j] + dxh;
                        sum_dxhat_xhat[j] = sum_dxhat_xhat[j] + dxh * xhat[[i, j]];
                    }
                }
                let mut dx = Array2::<T>::zeros((b, width));
                for i in 0..b {
                    for j in 0..width {
                        let dxh = dy[[i, j]] * bn.gamma[j];
                        dx[[i, j]] = inv_std[j]
                            * (dxh
                                - inv_b * sum_dxhat[j]
                                - inv_b * xhat[[i, j]] * sum_dxhat_xhat[j]);
                    }
                }
                (dx, LayerGrads::BatchNorm { dgamma, dbeta })
            }
            (Layer::Relu, Cache::Relu { mask }) => (dy * mask, LayerGrads::None),
            (Layer::Dropout(_), Cache::Dropout { mask }) => {
                if mask.is_empty() {
                    (dy.clone(), LayerGrads::None)
                } else {
                    (dy * mask, LayerGrads::None)
                }
            }
            _ => unreachable!("cache/layer mismatch"),
        }
    }
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

const BCE_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy over all device slots, with predictions clamped
/// to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss<T: Scalar>(predictions: &Array2<T>, labels: &Array2<T>) -> Result<T> {
    if predictions.dim() != labels.dim() {
        return Err(Error::Shape(format!(
            "predictions {:?} vs labels {:?}",
            predictions.dim(),
            labels.dim()
        )));
    }
    let lo = T::from_f64_c(BCE_CLAMP);
    let hi = T::one() - lo;
    let mut acc = T::zero();
    for (p, y) in predictions.iter().zip(labels.iter()) {
        let p = p.max(lo).min(hi);
        acc = acc - (*y * p.ln() + (T::one() - *y) * (T::one() - p).ln());
    }
    Ok(acc / T::from_usize(predictions.len()).unwrap())
}

/// Standalone dropout mask draw (unit-level contract; the layer uses the
/// same construction).
pub fn dropout_mask<T: Scalar>(width: usize, p_dr: T, rng: &mut ChaCha8Rng) -> Result<Vec<T>> {
    let p = p_dr.to_f64().unwrap_or(-1.0);
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability {p} not in [0,1)")));
    }
    let keep = 1.0 - p;
    let scale = T::one() / T::from_f64_c(keep);
    Ok((0..width)
        .map(|_| if rng.gen::<f64>() < keep { scale } else { T::zero() })
        .collect())
}
