use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{LossParts, VaeModel};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 32,
            learning_rate: 1e-3,
            beta: 0.1,
            validation_fraction: 0.3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidInput("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidInput("learning_rate must be positive".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::InvalidInput("beta must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidInput("validation_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EpochLoss<T> {
    pub epoch: usize,
    pub train: LossParts<T>,
    pub validation: Option<LossParts<T>>,
}

impl<T: Scalar> EpochLoss<T> {
    /// The quantity the checkpoint is selected on.
    pub fn monitored(&self) -> T {
        self.validation.map_or(self.train.total, |v| v.total)
    }
}

struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
    lr: T,
}

impl<T: Scalar> Adam<T> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: T) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
            lr,
        }
    }

    fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut T>, grads: impl Iterator<Item = &'a T>) {
        self.t += 1;
        let (b1, b2) = (T::lit(Self::BETA1), T::lit(Self::BETA2));
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let eps = T::lit(Self::EPS);
        for (((p, &g), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= self.lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

fn gather<T: Scalar>(data: &Matrix<T>, idx: &[usize]) -> Matrix<T> {
    let mut out = Vec::with_capacity(idx.len() * data.cols());
    for &i in idx {
        out.extend_from_slice(data.row(i));
    }
    Matrix::from_row_major(idx.len(), data.cols(), out)
}

/// Trains with Adam on shuffled mini-batches and returns the snapshot from
/// the epoch with the lowest validation loss (training loss when the
/// validation fraction is zero), together with the per-epoch history.
///
/// The batch size shrinks to half the training rows when there are fewer
/// than two full batches.
pub fn train<T: Scalar>(
    model: &VaeModel<T>,
    data: &Matrix<T>,
    cfg: &TrainConfig,
) -> Result<(VaeModel<T>, Vec<EpochLoss<T>>)> {
    cfg.validate()?;
    let n = data.rows();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if data.cols() != super::model::HIDDEN {
        return Err(Error::DimensionMismatch {
            expected: super::model::HIDDEN,
            got: data.cols(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((n as f64) * cfg.validation_fraction).floor() as usize;
    let n_val = n_val.min(n - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let val = (n_val > 0).then(|| gather(data, val_idx));
    // Common noise across epochs keeps successive validation losses comparable.
    let val_eps = val.as_ref().map(|v| model.draw_noise(v.rows(), &mut rng));

    let batch_size = if train_idx.len() < 2 * cfg.batch_size {
        (train_idx.len() / 2).max(1)
    } else {
        cfg.batch_size
    };

    let beta = T::lit(cfg.beta);
    let mut current = model.clone();
    current.beta = beta;
    let mut adam = Adam::new(current.parameter_count(), T::lit(cfg.learning_rate));
    let mut best: Option<(T, VaeModel<T>)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut rng);
        let (mut total, mut recon, mut kl) = (T::zero(), T::zero(), T::zero());
        for chunk in train_idx.chunks(batch_size) {
            let batch = gather(data, chunk);
            let eps = current.draw_noise(chunk.len(), &mut rng);
            let (parts, grads) = current.loss_and_gradients(&batch, beta, &eps)?;
            if !parts.total.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            let w = T::from_usize(chunk.len()).unwrap();
            total += parts.total * w;
            recon += parts.recon * w;
            kl += parts.kl * w;
            adam.step(current.parameters_mut(), grads.values());
        }
        if !current.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let nt = T::from_usize(train_idx.len()).unwrap();
        let train_parts = LossParts {
            total: total / nt,
            recon: recon / nt,
            kl: kl / nt,
        };
        let validation = match (&val, &val_eps) {
            (Some(v), Some(e)) => Some(current.loss_with_noise(v, beta, e)?),
            _ => None,
        };
        let record = EpochLoss {
            epoch,
            train: train_parts,
            validation,
        };
        let score = record.monitored();
        if !score.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, current.clone()));
        }
        history.push(record);
    }
    let (_, snapshot) = best.expect("at least one epoch ran");
    Ok((snapshot, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::N_VARIABLE;
    use rand::Rng;

    fn synthetic(rows: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(rows * N_VARIABLE);
        for _ in 0..rows {
            let a: f64 = rng.random_range(0.0..1.0);
            let decay: f64 = rng.random_range(0.6..0.95);
            data.push(a);
            data.extend((1..10).map(|i| decay.powi(i)));
            let b: f64 = rng.random_range(0.0..1.0);
            let d2: f64 = rng.random_range(0.5..0.9);
            data.push(b);
            data.extend((1..9).map(|i| d2.powi(i)));
        }
        Matrix::from_row_major(rows, N_VARIABLE, data)
    }

    #[test]
    fn training_reduces_loss() {
        let data = synthetic(200, 1);
        let model = VaeModel::<f64>::new(2, 0.1, 5).unwrap();
        let cfg = TrainConfig {
            epochs: 150,
            seed: 5,
            ..TrainConfig::default()
        };
        let (_, history) = train(&model, &data, &cfg).unwrap();
        let first = history[0].monitored();
        let best = history.iter().map(|h| h.monitored()).fold(f64::INFINITY, f64::min);
        assert!(best < 0.5 * first, "best {best} vs first {first}");
    }

    #[test]
    fn training_is_reproducible() {
        let data = synthetic(60, 2);
        let model = VaeModel::<f64>::new(2, 0.1, 5).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            seed: 11,
            ..TrainConfig::default()
        };
        let (a, ha) = train(&model, &data, &cfg).unwrap();
        let (b, hb) = train(&model, &data, &cfg).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a, b);
    }

    #[test]
    fn single_epoch_returns_that_snapshot() {
        let data = synthetic(40, 3);
        let model = VaeModel::<f64>::new(2, 0.1, 5).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            validation_fraction: 0.0,
            ..TrainConfig::default()
        };
        let (trained, history) = train(&model, &data, &cfg).unwrap();
        assert_eq!(history.len(), 1);
        assert!(history[0].validation.is_none());
        assert_ne!(trained, model);
    }

    #[test]
    fn divergence_is_reported() {
        let data = synthetic(20, 3);
        let mut model = VaeModel::<f64>::new(2, 0.1, 5).unwrap();
        model.layers[7].biases[0] = f64::NAN;
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&model, &data, &cfg), Err(Error::Divergence { epoch: 1 })));
    }

    #[test]
    fn invalid_config_rejected() {
        let data = synthetic(20, 3);
        let model = VaeModel::<f64>::new(2, 0.1, 5).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(train(&model, &data, &cfg).is_err());
    }
}
