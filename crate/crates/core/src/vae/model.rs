use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::N_VARIABLE;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Width of every hidden layer and of the data vector.
pub const HIDDEN: usize = N_VARIABLE;

const LOGVAR_MIN: f64 = -10.0;
const LOGVAR_MAX: f64 = 10.0;

/// Fully connected layer, `y = W x + b` with `W` stored row-major
/// (`outputs × inputs`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<T>,
    pub biases: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![T::zero(); inputs * outputs],
            biases: vec![T::zero(); outputs],
        }
    }

    /// Glorot-uniform weights, zero biases.
    fn glorot(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let mut layer = Self::zeros(inputs, outputs);
        for w in &mut layer.weights {
            *w = T::lit(rng.random_range(-limit..limit));
        }
        layer
    }

    fn forward(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.inputs);
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.biases)
            .map(|(row, &b)| crate::scalar::dot(row, x) + b)
            .collect()
    }

    /// Accumulates `dW += dy xᵀ`, `db += dy` into `grad` and returns `Wᵀ dy`.
    fn backward(&self, x: &[T], dy: &[T], grad: &mut Dense<T>) -> Vec<T> {
        let mut dx = vec![T::zero(); self.inputs];
        for (o, &g) in dy.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            grad.biases[o] += g;
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut grad.weights[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).all(|x| x.is_finite())
    }
}

fn relu<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v.max(T::zero())).collect()
}

fn relu_backward<T: Scalar>(pre: &[T], dy: &mut [T]) {
    for (g, &p) in dy.iter_mut().zip(pre) {
        if !(p > T::zero()) {
            *g = T::zero();
        }
    }
}

/// Indices into [`VaeModel::layers`].
const ENC0: usize = 0;
const ENC1: usize = 1;
const ENC2: usize = 2;
const MEAN: usize = 3;
const LOGVAR: usize = 4;
const DEC0: usize = 5;
const DEC1: usize = 6;
const DEC2: usize = 7;
const N_LAYERS: usize = 8;

/// β-VAE over the normalized 19-dimensional schedule vector.
///
/// Encoder: `FC-ReLU-FC-ReLU-FC` (19 units each) followed by linear mean and
/// log-variance heads. Decoder: `FC(d→19)-ReLU-FC-ReLU-FC`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct VaeModel<T> {
    pub latent_dim: usize,
    pub beta: T,
    pub seed: u64,
    pub layers: Vec<Dense<T>>,
}

/// Loss components, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LossParts<T> {
    pub total: T,
    pub recon: T,
    pub kl: T,
}

/// Gradients, laid out exactly like [`VaeModel::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Dense<T>>,
}

struct EncoderCache<T> {
    h1: Vec<T>,
    r1: Vec<T>,
    h2: Vec<T>,
    r2: Vec<T>,
    e: Vec<T>,
    mean: Vec<T>,
    logvar_raw: Vec<T>,
    logvar: Vec<T>,
}

struct DecoderCache<T> {
    g1: Vec<T>,
    q1: Vec<T>,
    g2: Vec<T>,
    q2: Vec<T>,
    out: Vec<T>,
}

impl<T: Scalar> VaeModel<T> {
    pub fn new(latent_dim: usize, beta: T, seed: u64) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::InvalidInput("latent dimension must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = [
            (HIDDEN, HIDDEN),
            (HIDDEN, HIDDEN),
            (HIDDEN, HIDDEN),
            (HIDDEN, latent_dim),
            (HIDDEN, latent_dim),
            (latent_dim, HIDDEN),
            (HIDDEN, HIDDEN),
            (HIDDEN, N_VARIABLE),
        ];
        let layers = shapes
            .iter()
            .map(|&(i, o)| Dense::glorot(i, o, &mut rng))
            .collect();
        Ok(Self {
            latent_dim,
            beta,
            seed,
            layers,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Dense::parameter_count).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    /// Checks layer shapes after deserialization.
    pub fn validate(&self) -> Result<()> {
        let d = self.latent_dim;
        let expected = [
            (HIDDEN, HIDDEN),
            (HIDDEN, HIDDEN),
            (HIDDEN, HIDDEN),
            (HIDDEN, d),
            (HIDDEN, d),
            (d, HIDDEN),
            (HIDDEN, HIDDEN),
            (HIDDEN, N_VARIABLE),
        ];
        if self.layers.len() != N_LAYERS {
            return Err(Error::Version(format!(
                "expected {N_LAYERS} layers, found {}",
                self.layers.len()
            )));
        }
        for (k, (l, &(i, o))) in self.layers.iter().zip(&expected).enumerate() {
            if l.inputs != i || l.outputs != o || l.weights.len() != i * o || l.biases.len() != o {
                return Err(Error::Version(format!("layer {k} has the wrong shape")));
            }
        }
        if !self.is_finite() {
            return Err(Error::Numerical("model contains non-finite weights".into()));
        }
        Ok(())
    }

    fn encode_cached(&self, x: &[T]) -> EncoderCache<T> {
        let l = &self.layers;
        let h1 = l[ENC0].forward(x);
        let r1 = relu(&h1);
        let h2 = l[ENC1].forward(&r1);
        let r2 = relu(&h2);
        let e = l[ENC2].forward(&r2);
        let mean = l[MEAN].forward(&e);
        let logvar_raw = l[LOGVAR].forward(&e);
        let (lo, hi) = (T::lit(LOGVAR_MIN), T::lit(LOGVAR_MAX));
        let logvar = logvar_raw.iter().map(|&v| v.max(lo).min(hi)).collect();
        EncoderCache {
            h1,
            r1,
            h2,
            r2,
            e,
            mean,
            logvar_raw,
            logvar,
        }
    }

    fn decode_cached(&self, z: &[T]) -> DecoderCache<T> {
        let l = &self.layers;
        let g1 = l[DEC0].forward(z);
        let q1 = relu(&g1);
        let g2 = l[DEC1].forward(&q1);
        let q2 = relu(&g2);
        let out = l[DEC2].forward(&q2);
        DecoderCache { g1, q1, g2, q2, out }
    }

    /// Posterior mean and (clamped) log-variance.
    pub fn encode(&self, x: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        check_input(x, N_VARIABLE)?;
        let c = self.encode_cached(x);
        if !c.mean.iter().chain(&c.logvar).all(|v| v.is_finite()) {
            return Err(Error::Numerical("encoder produced non-finite output".into()));
        }
        Ok((c.mean, c.logvar))
    }

    pub fn decode(&self, z: &[T]) -> Result<Vec<T>> {
        check_input(z, self.latent_dim)?;
        let out = self.decode_cached(z).out;
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("decoder produced non-finite output".into()));
        }
        Ok(out)
    }

    /// Standard-normal reparameterization noise, one row per datum.
    pub fn draw_noise(&self, rows: usize, rng: &mut impl Rng) -> Matrix<T> {
        let data = (0..rows * self.latent_dim)
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Matrix::from_row_major(rows, self.latent_dim, data)
    }

    /// Loss of `batch` with noise drawn from `seed`.
    pub fn loss(&self, batch: &Matrix<T>, beta: T, seed: u64) -> Result<LossParts<T>> {
        let eps = self.draw_noise(batch.rows(), &mut ChaCha8Rng::seed_from_u64(seed));
        self.loss_with_noise(batch, beta, &eps)
    }

    pub fn loss_with_noise(&self, batch: &Matrix<T>, beta: T, eps: &Matrix<T>) -> Result<LossParts<T>> {
        self.evaluate(batch, beta, eps, None)
    }

    /// Batch loss and its gradient with respect to every parameter.
    pub fn loss_and_gradients(
        &self,
        batch: &Matrix<T>,
        beta: T,
        eps: &Matrix<T>,
    ) -> Result<(LossParts<T>, Gradients<T>)> {
        let mut grads = Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
        };
        let parts = self.evaluate(batch, beta, eps, Some(&mut grads))?;
        Ok((parts, grads))
    }

    fn evaluate(
        &self,
        batch: &Matrix<T>,
        beta: T,
        eps: &Matrix<T>,
        mut grads: Option<&mut Gradients<T>>,
    ) -> Result<LossParts<T>> {
        let n = batch.rows();
        if n == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        if batch.cols() != N_VARIABLE {
            return Err(Error::DimensionMismatch {
                expected: N_VARIABLE,
                got: batch.cols(),
            });
        }
        if eps.rows() != n || eps.cols() != self.latent_dim {
            return Err(Error::DimensionMismatch {
                expected: n * self.latent_dim,
                got: eps.rows() * eps.cols(),
            });
        }
        let half = T::lit(0.5);
        let inv_n = T::one() / T::from_usize(n).unwrap();
        let (mut recon_sum, mut kl_sum) = (T::zero(), T::zero());
        for r in 0..n {
            let x = batch.row(r);
            let noise = eps.row(r);
            let enc = self.encode_cached(x);
            let std: Vec<T> = enc.logvar.iter().map(|&lv| (half * lv).exp()).collect();
            let z: Vec<T> = (0..self.latent_dim)
                .map(|k| enc.mean[k] + std[k] * noise[k])
                .collect();
            let dec = self.decode_cached(&z);

            let diff: Vec<T> = dec.out.iter().zip(x).map(|(&a, &b)| a - b).collect();
            recon_sum += half * diff.iter().map(|&d| d * d).sum::<T>();
            kl_sum += half
                * enc
                    .mean
                    .iter()
                    .zip(&enc.logvar)
                    .map(|(&m, &lv)| m * m + lv.exp() - T::one() - lv)
                    .sum::<T>();

            let Some(g) = grads.as_deref_mut() else {
                continue;
            };
            let l = &self.layers;
            let gl = &mut g.layers;
            // Decoder.
            let dout: Vec<T> = diff.iter().map(|&d| d * inv_n).collect();
            let mut dg2 = l[DEC2].backward(&dec.q2, &dout, &mut gl[DEC2]);
            relu_backward(&dec.g2, &mut dg2);
            let mut dg1 = l[DEC1].backward(&dec.q1, &dg2, &mut gl[DEC1]);
            relu_backward(&dec.g1, &mut dg1);
            let dz = l[DEC0].backward(&z, &dg1, &mut gl[DEC0]);
            // Reparameterization and KL.
            let (lo, hi) = (T::lit(LOGVAR_MIN), T::lit(LOGVAR_MAX));
            let mut dmean = vec![T::zero(); self.latent_dim];
            let mut dlogvar = vec![T::zero(); self.latent_dim];
            for k in 0..self.latent_dim {
                dmean[k] = dz[k] + beta * inv_n * enc.mean[k];
                let raw = enc.logvar_raw[k];
                if raw > lo && raw < hi {
                    dlogvar[k] = dz[k] * noise[k] * half * std[k]
                        + beta * inv_n * half * (enc.logvar[k].exp() - T::one());
                }
            }
            // Encoder.
            let de_m = l[MEAN].backward(&enc.e, &dmean, &mut gl[MEAN]);
            let de_l = l[LOGVAR].backward(&enc.e, &dlogvar, &mut gl[LOGVAR]);
            let de: Vec<T> = de_m.iter().zip(&de_l).map(|(&a, &b)| a + b).collect();
            let mut dh2 = l[ENC2].backward(&enc.r2, &de, &mut gl[ENC2]);
            relu_backward(&enc.h2, &mut dh2);
            let mut dh1 = l[ENC1].backward(&enc.r1, &dh2, &mut gl[ENC1]);
            relu_backward(&enc.h1, &mut dh1);
            l[ENC0].backward(x, &dh1, &mut gl[ENC0]);
        }
        let recon = recon_sum * inv_n;
        let kl = kl_sum * inv_n;
        Ok(LossParts {
            total: recon + beta * kl,
            recon,
            kl,
        })
    }

    /// Every parameter in a fixed order: per layer, weights then biases.
    pub fn parameters(&self) -> impl Iterator<Item = &T> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.biases))
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }
}

impl<T: Scalar> Gradients<T> {
    pub fn values(&self) -> impl Iterator<Item = &T> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.biases))
    }
}

/// Closed-form KL divergence of a diagonal Gaussian from the standard normal.
pub fn kl_divergence<T: Scalar>(mean: &[T], logvar: &[T]) -> T {
    let half = T::lit(0.5);
    half * mean
        .iter()
        .zip(logvar)
        .map(|(&m, &lv)| m * m + lv.exp() - T::one() - lv)
        .sum::<T>()
}

fn check_input<T: Scalar>(x: &[T], dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: x.len(),
        });
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("non-finite input".into()));
    }
    Ok(())
}

/// Anything that maps a latent point to a normalized schedule vector.
pub trait LatentDecoder {
    fn latent_dim(&self) -> usize;
    fn decode_latent(&self, z: &[f64]) -> Result<Vec<f64>>;
}

impl<T: Scalar> LatentDecoder for VaeModel<T> {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn decode_latent(&self, z: &[f64]) -> Result<Vec<f64>> {
        let zt: Vec<T> = z.iter().map(|&v| T::lit(v)).collect();
        Ok(self.decode(&zt)?.iter().map(|v| v.to_f64_lossy()).collect())
    }
}
