//! Mini-batch Adam training of the detector network on BCE gradients.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::metrics;
use crate::scalar::Scalar;

use super::{bce_loss, sigmoid, LayerGrads, MlpModel, Mode, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_precision: Option<f64>,
    pub val_recall: Option<f64>,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    pub best_val_loss: f64,
    pub steps: usize,
}

struct Adam<T: Scalar> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
}

impl<T: Scalar> Adam<T> {
    fn new(shapes: &[usize], config: &TrainConfig<T>) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
            lr: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
        }
    }

    fn step(&mut self, params: &mut [&mut [T]], grads: &[Vec<T>]) {
        self.t += 1;
        let t = T::from_u64(self.t).unwrap();
        let bc1 = T::one() - self.beta1.powf(t);
        let bc2 = T::one() - self.beta2.powf(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] = p[i] - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Flattens layer gradients into the same order as
/// [`MlpModel::param_tensors_mut`].
fn flatten_grads<T: Scalar>(grads: Vec<LayerGrads<T>>) -> Vec<Vec<T>> {
    let mut out = Vec::new();
    for g in grads {
        match g {
            LayerGrads::Dense { dw, db } => {
                out.push(dw.into_raw_vec_and_offset().0);
                out.push(db.into_raw_vec_and_offset().0);
            }
            LayerGrads::BatchNorm { dgamma, dbeta } => {
                out.push(dgamma.into_raw_vec_and_offset().0);
                out.push(dbeta.into_raw_vec_and_offset().0);
            }
            LayerGrads::None => {}
        }
    }
    out
}

fn to_scalar<T: Scalar>(view: ArrayView2<'_, f32>) -> Array2<T> {
    view.mapv(|v| T::from_f32(v).unwrap())
}

fn labels_to_scalar<T: Scalar>(view: ArrayView2<'_, u8>) -> Array2<T> {
    view.mapv(|v| T::from_u8(v).unwrap())
}

fn gather_rows<T: Scalar>(src: &Array2<T>, idx: &[usize]) -> Array2<T> {
    let mut out = Array2::<T>::zeros((idx.len(), src.ncols()));
    for (k, &i) in idx.iter().enumerate() {
        out.row_mut(k).assign(&src.row(i));
    }
    out
}

/// Validation metrics at threshold 0.5 plus rank AUC over pooled slots.
fn evaluate_split<T: Scalar>(
    model: &mut MlpModel<T>,
    inputs: &Array2<T>,
    labels: &Array2<T>,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Option<f64>, Option<f64>, Option<f64>)> {
    let rows = inputs.nrows();
    let mut loss_sum = 0.0;
    let mut scores: Vec<T> = Vec::with_capacity(rows * labels.ncols());
    let mut lab: Vec<u8> = Vec::with_capacity(rows * labels.ncols());
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    let half = T::from_f64_c(0.5);
    let mut lo = 0;
    while lo < rows {
        let hi = (lo + batch).min(rows);
        let x = inputs.slice(ndarray::s![lo..hi, ..]).to_owned();
        let y = labels.slice(ndarray::s![lo..hi, ..]);
        let (z, _) = model.forward_cached(&x, Mode::Inference, rng, false)?;
        let p = z.mapv(sigmoid);
        loss_sum += bce_loss(&p, &y.to_owned())?.to_f64().unwrap() * (hi - lo) as f64;
        for (pi, yi) in p.iter().zip(y.iter()) {
            let label = u8::from(*yi > half);
            let pred = *pi >= half;
            match (label == 1, pred) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
            scores.push(*pi);
            lab.push(label);
        }
        lo = hi;
    }
    let loss = loss_sum / rows as f64;
    let precision = (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
    let recall = (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64);
    let auc = metrics::rank_auc(&scores, &lab);
    Ok((loss, precision, recall, auc))
}

/// Trains `model` on the dataset's train split, tracking validation stats per
/// epoch and retaining the weights with the best validation loss.
pub fn train<T: Scalar>(
    model: &mut MlpModel<T>,
    dataset: &Dataset,
    config: &TrainConfig<T>,
) -> Result<TrainReport> {
    config.validate()?;
    if dataset.input_width() != model.input_width {
        return Err(Error::Shape(format!(
            "dataset width {} != model input {}",
            dataset.input_width(),
            model.input_width
        )));
    }
    if dataset.n_devices() != model.output_width {
        return Err(Error::Shape(format!(
            "dataset devices {} != model output {}",
            dataset.n_devices(),
            model.output_width
        )));
    }
    let train_x = to_scalar::<T>(dataset.train_inputs());
    let train_y = labels_to_scalar::<T>(dataset.train_labels());
    let val_x = to_scalar::<T>(dataset.val_inputs());
    let val_y = labels_to_scalar::<T>(dataset.val_labels());
    let n_train = train_x.nrows();
    if n_train == 0 || val_x.nrows() == 0 {
        return Err(Error::Config("train and validation splits must be non-empty".into()));
    }

    let shapes: Vec<usize> = model.param_tensors_mut().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(&shapes, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n_train).collect();

    let mut history = Vec::with_capacity(config.epochs);
    let mut best_val = f64::INFINITY;
    let mut best_model: Option<MlpModel<T>> = None;
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue; // batchnorm needs at least two rows
            }
            let x = gather_rows(&train_x, chunk);
            let y = gather_rows(&train_y, chunk);
            let (z, caches) = model.forward_cached(&x, Mode::Train, &mut rng, true)?;
            let p = z.mapv(sigmoid);
            let loss = bce_loss(&p, &y)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step });
            }
            epoch_loss += loss.to_f64().unwrap();
            batches += 1;
            // d(BCE)/d(logits) for the sigmoid head
            let scale = T::one() / T::from_usize(p.len()).unwrap();
            let dlogits = (&p - &y).mapv(|v| v * scale);
            let grads = flatten_grads(model.backward(&caches, dlogits));
            let mut params = model.param_tensors_mut();
            adam.step(&mut params, &grads);
            step += 1;
            // BCE clamping can hide NaN activations, so check the weights too
            if !model.all_finite() {
                return Err(Error::Diverged { step });
            }
        }

        let (val_loss, precision, recall, auc) =
            evaluate_split(model, &val_x, &val_y, config.batch_size, &mut rng)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        if val_loss < best_val {
            best_val = val_loss;
            best_model = Some(model.clone());
        }
        history.push(EpochStats {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_loss,
            val_precision: precision,
            val_recall: recall,
            val_auc: auc,
        });
    }
    if let Some(best) = best_model {
        *model = best;
    }
    Ok(TrainReport { history, best_val_loss: best_val, steps: step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SplitCounts;
    use crate::nn::{Layer, TrainConfig};
    use ndarray::Array2;
    use rand::Rng;

    fn tiny_model(seed: u64) -> (MlpModel<f64>, TrainConfig<f64>) {
        let cfg = TrainConfig::<f64> {
            hidden_width: 4,
            hidden_dense: 2,
            dropout_p: 0.0,
            batch_size: 5,
            seed,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = MlpModel::new(4, 3, &cfg, String::new(), &mut rng);
        (model, cfg)
    }

    /// Central finite-difference gradient of the training loss with respect
    /// to every parameter, compared to backprop.
    #[test]
    fn backprop_matches_finite_differences() {
        let (model, _cfg) = tiny_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0));
        let y = Array2::from_shape_fn((5, 3), |_| f64::from(rng.gen::<f64>() < 0.4));

        let loss_of = |m: &MlpModel<f64>| -> f64 {
            let mut m = m.clone();
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let (z, _) = m.forward_cached(&x, Mode::Train, &mut r, false).unwrap();
            bce_loss(&z.mapv(sigmoid), &y).unwrap()
        };

        // analytic gradients
        let mut work = model.clone();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let (z, caches) = work.forward_cached(&x, Mode::Train, &mut r, true).unwrap();
        let p = z.mapv(sigmoid);
        let scale = 1.0 / p.len() as f64;
        let dlogits = (&p - &y).mapv(|v| v * scale);
        let grads = flatten_grads(work.backward(&caches, dlogits));

        let h = 1e-5;
        let mut checked = 0usize;
        let shapes: Vec<usize> = {
            let mut m = model.clone();
            m.param_tensors_mut().iter().map(|t| t.len()).collect()
        };
        for (ti, &len) in shapes.iter().enumerate() {
            for i in (0..len).step_by(3.max(len / 7)) {
                let mut plus = model.clone();
                plus.param_tensors_mut()[ti][i] += h;
                let mut minus = model.clone();
                minus.param_tensors_mut()[ti][i] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let an = grads[ti][i];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    ((fd - an) / denom).abs() < 1e-4,
                    "tensor {ti} index {i}: fd {fd} vs backprop {an}"
                );
                checked += 1;
            }
        }
        assert!(checked > 20, "checked only {checked} parameters");
    }

    fn toy_dataset(seed: u64) -> Dataset {
        // linearly separable: label j = 1 iff input feature j > 0
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 300;
        let inputs = Array2::from_shape_fn((d, 4), |_| rng.gen_range(-1.0f32..1.0));
        let labels = Array2::from_shape_fn((d, 3), |(i, j)| u8::from(inputs[[i, j]] > 0.0));
        Dataset {
            inputs,
            labels,
            split: SplitCounts { train: 240, val: 30, test: 30 },
            config_blob: String::new(),
        }
    }

    #[test]
    fn separable_toy_problem_trains_below_threshold() {
        let (_, mut cfg) = tiny_model(5);
        cfg.hidden_width = 8;
        cfg.batch_size = 30;
        cfg.epochs = 40; // 8 steps/epoch -> 320 steps
        cfg.learning_rate = 0.02;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = MlpModel::new(4, 3, &cfg, String::new(), &mut rng);
        let ds = toy_dataset(6);
        let report = train(&mut model, &ds, &cfg).unwrap();
        assert!(report.steps <= 320);
        assert!(
            report.best_val_loss < 0.05,
            "val loss {} after {} steps",
            report.best_val_loss,
            report.steps
        );
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let (mut model, mut cfg) = tiny_model(9);
        cfg.learning_rate = 0.0;
        cfg.epochs = 2;
        cfg.batch_size = 20;
        let before = model.clone();
        let ds = toy_dataset(2);
        train(&mut model, &ds, &cfg).unwrap();
        // weights identical; only batchnorm running stats may move
        for (la, lb) in before.layers.iter().zip(&model.layers) {
            if let (Layer::Dense(a), Layer::Dense(b)) = (la, lb) {
                assert_eq!(a.w, b.w);
                assert_eq!(a.b, b.b);
            }
        }
    }

    #[test]
    fn training_is_seed_deterministic() {
        let ds = toy_dataset(4);
        let (mut m1, cfg) = tiny_model(11);
        let r1 = train(&mut m1, &ds, &cfg).unwrap();
        let (mut m2, cfg2) = tiny_model(11);
        let r2 = train(&mut m2, &ds, &cfg2).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn validation_loss_not_worse_than_init() {
        let ds = toy_dataset(8);
        let (mut model, mut cfg) = tiny_model(13);
        cfg.epochs = 10;
        cfg.batch_size = 30;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let val_x = to_scalar::<f64>(ds.val_inputs());
        let val_y = labels_to_scalar::<f64>(ds.val_labels());
        let (init_loss, _, _, _) =
            evaluate_split(&mut model.clone(), &val_x, &val_y, 30, &mut rng).unwrap();
        let report = train(&mut model, &ds, &cfg).unwrap();
        assert!(report.best_val_loss <= init_loss + 1e-9);
    }

    #[test]
    fn divergence_is_reported() {
        let (mut model, mut cfg) = tiny_model(15);
        cfg.learning_rate = f64::NAN;
        cfg.epochs = 2;
        cfg.batch_size = 20;
        let ds = toy_dataset(3);
        match train(&mut model, &ds, &cfg) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
