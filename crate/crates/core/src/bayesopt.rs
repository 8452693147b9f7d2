//! Candidate proposal: UCB maximization over the variable-parameter latent
//! box with the fixed-parameter coordinates pinned to the target's.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{self, Classification};
use crate::dataset::{NormStats, Schedule};
use crate::error::{Error, Result};
use crate::gpr::GprModel;
use crate::scalar::Scalar;
use crate::vae::LatentDecoder;

/// Latent search region clipped to this half-width.
pub const LATENT_LIMIT: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct BoundingBox<T> {
    pub lo: Vec<T>,
    pub hi: Vec<T>,
}

impl<T: Scalar> BoundingBox<T> {
    /// Per-dimension extent of `latents`, intersected with `[−2, 2]^d`.
    pub fn from_points(latents: &[Vec<T>]) -> Result<Self> {
        let first = latents.first().ok_or(Error::EmptyDataset)?;
        let d = first.len();
        let limit = T::lit(LATENT_LIMIT);
        let mut lo = vec![T::infinity(); d];
        let mut hi = vec![T::neg_infinity(); d];
        for z in latents {
            if z.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: z.len(),
                });
            }
            for k in 0..d {
                lo[k] = lo[k].min(z[k]);
                hi[k] = hi[k].max(z[k]);
            }
        }
        for k in 0..d {
            lo[k] = lo[k].max(-limit).min(limit);
            hi[k] = hi[k].max(-limit).min(limit);
        }
        Ok(Self { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn width(&self, k: usize) -> T {
        self.hi[k] - self.lo[k]
    }

    pub fn contains(&self, z: &[T]) -> bool {
        z.len() == self.dim() && z.iter().enumerate().all(|(k, &v)| v >= self.lo[k] && v <= self.hi[k])
    }

    fn clamp(&self, k: usize, v: T) -> T {
        v.max(self.lo[k]).min(self.hi[k])
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<T> {
        (0..self.dim())
            .map(|k| {
                let u: f64 = rng.random();
                self.lo[k] + T::lit(u) * self.width(k)
            })
            .collect()
    }
}

pub fn bounding_box<T: Scalar>(latents: &[Vec<T>]) -> Result<BoundingBox<T>> {
    BoundingBox::from_points(latents)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    Exploration,
    Intermediate,
    Exploitation,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Exploration, Strategy::Intermediate, Strategy::Exploitation];

    pub fn label(self) -> &'static str {
        match self {
            Strategy::Exploration => "exploration",
            Strategy::Intermediate => "intermediate",
            Strategy::Exploitation => "exploitation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.label().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// UCB weight per strategy. The default gives exploration the smallest
/// weight and exploitation the largest; see [`KappaMap::warn_if_inverted`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KappaMap {
    pub exploration: f64,
    pub intermediate: f64,
    pub exploitation: f64,
}

impl Default for KappaMap {
    fn default() -> Self {
        Self {
            exploration: 0.001,
            intermediate: 0.5,
            exploitation: 1.0,
        }
    }
}

impl KappaMap {
    pub fn get(&self, s: Strategy) -> f64 {
        match s {
            Strategy::Exploration => self.exploration,
            Strategy::Intermediate => self.intermediate,
            Strategy::Exploitation => self.exploitation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if Strategy::ALL.iter().all(|&s| self.get(s) >= 0.0 && self.get(s).is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidInput("kappa values must be finite and non-negative".into()))
        }
    }

    /// Logs when the mapping runs against the usual UCB reading, where a
    /// larger weight means more exploration.
    pub fn warn_if_inverted(&self) {
        if self.exploration < self.exploitation {
            log::warn!(
                "kappa map gives exploration ({}) less weight than exploitation ({}); \
                 larger kappa favours uncertain regions",
                self.exploration,
                self.exploitation
            );
        }
    }
}

/// `mu + kappa · sigma`, where `mu` is the posterior mean of the negated
/// standardized weighing error.
pub fn ucb(mu_neg_err: f64, sigma: f64, kappa: f64) -> f64 {
    mu_neg_err + kappa * sigma
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    pub n_samples: usize,
    pub n_refine: usize,
    pub refine_iters: usize,
    pub step_fraction: f64,
    /// Repair budget for decoded schedules; `None` uses 20% of the norm.
    pub max_repair_dist: Option<f64>,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            n_samples: 2048,
            n_refine: 8,
            refine_iters: 100,
            step_fraction: 0.05,
            max_repair_dist: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    Valid,
    Repaired,
    Rejected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub candidate_id: String,
    pub strategy: Strategy,
    pub kappa: f64,
    pub latent: Vec<f64>,
    /// Decoded schedule before any repair.
    pub raw_schedule: Schedule,
    /// Schedule to run: the decode itself, its projection, or the raw decode
    /// when rejected.
    pub schedule: Schedule,
    pub acquisition: f64,
    pub predicted_mean: f64,
    pub predicted_sigma: f64,
    pub status: CandidateStatus,
}

/// Models and inputs shared by every proposal in a round.
pub struct ProposalContext<'a, T: Scalar, D: LatentDecoder> {
    pub decoder: &'a D,
    pub stats: &'a NormStats,
    pub gpr: &'a GprModel<T>,
    pub bbox: &'a BoundingBox<f64>,
    pub z_f_target: &'a [f64],
    pub config: &'a ProposalConfig,
}

struct Acquisition<'a, T: Scalar> {
    gpr: &'a GprModel<T>,
    z_f: Vec<T>,
    kappa: f64,
}

impl<T: Scalar> Acquisition<'_, T> {
    fn eval(&self, z_v: &[f64]) -> Result<(f64, f64, f64)> {
        let mut x: Vec<T> = z_v.iter().map(|&v| T::lit(v)).collect();
        x.extend_from_slice(&self.z_f);
        let (mu, sigma) = self.gpr.predict(&x)?;
        let (mu, sigma) = (mu.to_f64_lossy(), sigma.to_f64_lossy());
        let a = ucb(mu, sigma, self.kappa);
        if !a.is_finite() {
            return Err(Error::Numerical("acquisition is not finite".into()));
        }
        Ok((a, mu, sigma))
    }
}

/// Maximizes UCB over the box: seeded uniform screening, then coordinate
/// hill climbing from the best few samples. Returns `(z_v, acquisition, mu, sigma)`.
pub fn maximize_acquisition<T: Scalar>(
    gpr: &GprModel<T>,
    bbox: &BoundingBox<f64>,
    z_f_target: &[f64],
    kappa: f64,
    cfg: &ProposalConfig,
    seed: u64,
) -> Result<(Vec<f64>, f64, f64, f64)> {
    let d = bbox.dim();
    if d + z_f_target.len() != gpr.dim() {
        return Err(Error::DimensionMismatch {
            expected: gpr.dim(),
            got: d + z_f_target.len(),
        });
    }
    if cfg.n_samples == 0 {
        return Err(Error::InvalidInput("n_samples must be at least 1".into()));
    }
    let acq = Acquisition {
        gpr,
        z_f: z_f_target.iter().map(|&v| T::lit(v)).collect(),
        kappa,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<Vec<f64>> = (0..cfg.n_samples).map(|_| bbox.sample(&mut rng)).collect();
    let mut scored = Vec::with_capacity(samples.len());
    for (i, z) in samples.iter().enumerate() {
        scored.push((acq.eval(z)?.0, i));
    }
    // Highest acquisition first; lowest index wins ties.
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));

    let mut best: Option<(Vec<f64>, (f64, f64, f64))> = None;
    for &(_, idx) in scored.iter().take(cfg.n_refine.max(1)) {
        let mut z = samples[idx].clone();
        let mut cur = acq.eval(&z)?;
        let mut steps: Vec<f64> = (0..d).map(|k| cfg.step_fraction * bbox.width(k)).collect();
        let mut order: Vec<usize> = (0..d).collect();
        for _ in 0..cfg.refine_iters {
            if steps.iter().enumerate().all(|(k, &s)| s <= 1e-12 * bbox.width(k).max(1e-300)) {
                break;
            }
            order.shuffle(&mut rng);
            for &k in &order {
                if steps[k] <= 0.0 {
                    continue;
                }
                let mut improved = false;
                for dir in [1.0, -1.0] {
                    let mut trial = z.clone();
                    trial[k] = bbox.clamp(k, z[k] + dir * steps[k]);
                    if trial[k] == z[k] {
                        continue;
                    }
                    let val = acq.eval(&trial)?;
                    if val.0 > cur.0 {
                        z = trial;
                        cur = val;
                        improved = true;
                        break;
                    }
                }
                if !improved {
                    steps[k] *= 0.5;
                }
            }
        }
        if best.as_ref().is_none_or(|(_, b)| cur.0 > b.0) {
            best = Some((z, cur));
        }
    }
    let (z, (a, mu, sigma)) = best.expect("at least one refinement start");
    Ok((z, a, mu, sigma))
}

/// Decodes a latent point and sorts it into valid, repaired or rejected.
pub fn decode_candidate(
    decoder: &impl LatentDecoder,
    stats: &NormStats,
    z_v: &[f64],
    max_repair_dist: Option<f64>,
) -> Result<(Schedule, Schedule, CandidateStatus)> {
    let raw = stats.denormalize_schedule(&decoder.decode_latent(z_v)?)?;
    Ok(match constraints::classify(&raw, max_repair_dist) {
        Classification::Valid => (raw.clone(), raw, CandidateStatus::Valid),
        Classification::Repairable { projected, .. } => (raw, projected, CandidateStatus::Repaired),
        Classification::Reject { .. } => (raw.clone(), raw, CandidateStatus::Rejected),
    })
}

pub fn propose<T: Scalar, D: LatentDecoder>(
    ctx: &ProposalContext<'_, T, D>,
    strategy: Strategy,
    kappa: f64,
    seed: u64,
) -> Result<Candidate> {
    if ctx.decoder.latent_dim() != ctx.bbox.dim() {
        return Err(Error::DimensionMismatch {
            expected: ctx.decoder.latent_dim(),
            got: ctx.bbox.dim(),
        });
    }
    let (latent, acquisition, mu, sigma) =
        maximize_acquisition(ctx.gpr, ctx.bbox, ctx.z_f_target, kappa, ctx.config, seed)?;
    let (raw_schedule, schedule, status) =
        decode_candidate(ctx.decoder, ctx.stats, &latent, ctx.config.max_repair_dist)?;
    Ok(Candidate {
        candidate_id: strategy.label().to_string(),
        strategy,
        kappa,
        latent,
        raw_schedule,
        schedule,
        acquisition,
        predicted_mean: mu,
        predicted_sigma: sigma,
        status,
    })
}

/// SplitMix64 step, used to derive independent stream seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One independent proposal per strategy.
pub fn propose_all<T: Scalar, D: LatentDecoder>(
    ctx: &ProposalContext<'_, T, D>,
    kappas: &KappaMap,
    seed: u64,
) -> Result<Vec<Candidate>> {
    kappas.validate()?;
    Strategy::ALL
        .iter()
        .enumerate()
        .map(|(i, &s)| propose(ctx, s, kappas.get(s), derive_seed(seed, i as u64 + 1)))
        .collect()
}
