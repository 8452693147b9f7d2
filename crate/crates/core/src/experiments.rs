//! Reproduction runs: constraint-violation sweeps over β and latent size,
//! and closed-loop optimization on simulated held-out powders.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bayesopt::{decode_candidate, derive_seed, CandidateStatus, Strategy};
use crate::constraints;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::pipeline::{training_matrix, ModelBundle};
use crate::session::{Outcome, SessionConfig, SessionState, TARGET_REL_ERROR};
use crate::simulator::{random_schedule, run_trial_recorded, Powder, SimConfig};
use crate::vae::{self, violation_sweep, TrainConfig, VaeModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Experiment1Config {
    pub betas: Vec<f64>,
    pub latent_dims: Vec<usize>,
    pub seeds: Vec<u64>,
    pub n_samples: usize,
    pub radius: f64,
    pub train: TrainConfig,
}

impl Default for Experiment1Config {
    fn default() -> Self {
        Self {
            betas: vec![0.1, 0.5, 1.0],
            latent_dims: vec![2, 4, 8],
            seeds: (0..5).collect(),
            n_samples: 1000,
            radius: 2.0,
            train: TrainConfig::default(),
        }
    }
}

/// One cell of the sweep for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment1Row {
    pub beta: f64,
    pub latent_dim: usize,
    pub seed: u64,
    pub samples: usize,
    /// Decodes with a negative entry.
    pub nonneg: usize,
    /// Decodes with an increasing step.
    pub monotone: usize,
    /// Decodes breaking either constraint.
    pub either: usize,
    pub best_loss: f64,
}

/// Trains one β-VAE per `(β, d_v, seed)` on the cleaned, deduplicated
/// history and counts constraint violations among ball samples.
pub fn run_experiment1(d: &Dataset, models: &crate::pipeline::ModelConfig, cfg: &Experiment1Config) -> Result<Vec<Experiment1Row>> {
    let (stats, data) = training_matrix(d, models)?;
    let mut rows = Vec::new();
    for &latent_dim in &cfg.latent_dims {
        for &beta in &cfg.betas {
            for &seed in &cfg.seeds {
                let train = TrainConfig {
                    beta,
                    seed,
                    ..cfg.train.clone()
                };
                let init = VaeModel::new(latent_dim, beta, seed)?;
                let (model, losses) = vae::train(&init, &data, &train)?;
                let counts = violation_sweep(&model, &stats, cfg.n_samples, cfg.radius, derive_seed(seed, 7))?;
                let best_loss = losses.iter().map(|l| l.monitored()).fold(f64::INFINITY, f64::min);
                log::info!("experiment 1: beta {beta} d_v {latent_dim} seed {seed}: {counts:?}");
                rows.push(Experiment1Row {
                    beta,
                    latent_dim,
                    seed,
                    samples: counts.samples,
                    nonneg: counts.nonneg,
                    monotone: counts.monotone,
                    either: counts.either,
                    best_loss,
                });
            }
        }
    }
    Ok(rows)
}

/// Median violation count (either constraint) over seeds for one cell.
pub fn median_violations(rows: &[Experiment1Row], beta: f64, latent_dim: usize) -> Option<f64> {
    let mut v: Vec<usize> = rows
        .iter()
        .filter(|r| r.beta == beta && r.latent_dim == latent_dim)
        .map(|r| r.either)
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_unstable();
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    })
}

pub fn write_rows<W: Write, R: Serialize>(w: W, rows: &[R]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bo,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub method: Method,
    pub powder_id: String,
    pub seed: u64,
    pub trial: usize,
    pub strategy: Option<Strategy>,
    pub status: Option<CandidateStatus>,
    pub penalized: bool,
    pub weighing_error: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopRun {
    pub method: Method,
    pub powder_id: String,
    pub seed: u64,
    pub trials: Vec<TrialRecord>,
    /// 1-based index of the first trial under the target error.
    pub trials_to_target: Option<usize>,
}

impl LoopRun {
    /// Trials used, counting an unsuccessful run as the full budget.
    pub fn censored_trials(&self, max_trials: usize) -> usize {
        self.trials_to_target.unwrap_or(max_trials)
    }

    pub fn penalties(&self) -> usize {
        self.trials.iter().filter(|t| t.penalized).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Experiment2Config {
    pub max_trials: usize,
    /// Strategy for trial `k` is `policy[k % len]`.
    pub policy: Vec<Strategy>,
    pub seeds: Vec<u64>,
    pub session: SessionConfig,
    pub sim: SimConfig,
    pub baseline: Baseline,
}

impl Default for Experiment2Config {
    fn default() -> Self {
        Self {
            max_trials: 20,
            policy: vec![Strategy::Intermediate],
            seeds: (0..20).collect(),
            session: SessionConfig::default(),
            sim: SimConfig::default(),
            baseline: Baseline::default(),
        }
    }
}

fn noise_seed(seed: u64, powder: &Powder, trial: usize) -> u64 {
    let tag = powder.id.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(u64::from(b)));
    derive_seed(derive_seed(seed, tag), 500 + trial as u64)
}

/// Propose, pick by policy, run on the simulator (or penalize a rejected
/// candidate), report, until the target error or the trial budget.
pub fn run_bo_loop(
    models: &ModelBundle,
    cleaned: &Dataset,
    powder: &Powder,
    cfg: &Experiment2Config,
    seed: u64,
) -> Result<LoopRun> {
    if cfg.policy.is_empty() {
        return Err(Error::InvalidInput("strategy policy is empty".into()));
    }
    let setup = &powder.setup;
    let mut session = SessionState::from_models(models.clone(), cleaned, setup, &cfg.session, seed)?;
    let mut trials = Vec::new();
    let mut first = None;
    for k in 0..cfg.max_trials {
        let strategy = cfg.policy[k % cfg.policy.len()];
        let cand = session
            .candidates()?
            .iter()
            .find(|c| c.strategy == strategy)
            .cloned()
            .ok_or_else(|| Error::UnknownCandidate(strategy.label().into()))?;
        let outcome = if cand.status == CandidateStatus::Rejected {
            Outcome::Penalized
        } else {
            let r = run_trial_recorded(&cand.schedule, setup, noise_seed(seed, powder, k), &cfg.sim)?;
            Outcome::Measured(r.weighing_error)
        };
        session.report(&cand.candidate_id, outcome)?;
        let h = session.history.last().expect("just reported");
        trials.push(TrialRecord {
            method: Method::Bo,
            powder_id: powder.id.clone(),
            seed,
            trial: k + 1,
            strategy: Some(strategy),
            status: Some(cand.status),
            penalized: outcome == Outcome::Penalized,
            weighing_error: h.weighing_error,
            relative_error: h.relative_error,
        });
        if h.relative_error < TARGET_REL_ERROR {
            first = Some(k + 1);
            break;
        }
    }
    Ok(LoopRun {
        method: Method::Bo,
        powder_id: powder.id.clone(),
        seed,
        trials,
        trials_to_target: first,
    })
}

/// Where the random baseline draws its schedules from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Uniform points in the session's latent bounding box, decoded and
    /// screened exactly like BO candidates.
    #[default]
    LatentBox,
    /// Sorted uniform draws in the raw schedule box `[0, D]^10 x [0, R]^9`.
    ScheduleBox,
}

/// Baseline: independent uniform draws under the same budget and the same
/// simulator noise seeds.
pub fn run_random_loop(
    models: &ModelBundle,
    cleaned: &Dataset,
    powder: &Powder,
    cfg: &Experiment2Config,
    seed: u64,
) -> Result<LoopRun> {
    let setup = &powder.setup;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xBA5E));
    let session = match cfg.baseline {
        Baseline::LatentBox => Some(SessionState::from_models(models.clone(), cleaned, setup, &cfg.session, seed)?),
        Baseline::ScheduleBox => None,
    };
    let mut trials = Vec::new();
    let mut first = None;
    for k in 0..cfg.max_trials {
        let (schedule, status) = match &session {
            Some(sess) => {
                let z = sess.bbox.sample(&mut rng);
                let (_, s, status) =
                    decode_candidate(&models.vae, &models.stats, &z, cfg.session.proposal.max_repair_dist)?;
                (s, Some(status))
            }
            None => (random_schedule(setup, &mut rng), None),
        };
        let penalized = status == Some(CandidateStatus::Rejected);
        let weighing_error = if penalized {
            constraints::penalty_error(setup)
        } else {
            run_trial_recorded(&schedule, setup, noise_seed(seed, powder, k), &cfg.sim)?.weighing_error
        };
        let rel = weighing_error / setup.required_weight;
        trials.push(TrialRecord {
            method: Method::Random,
            powder_id: powder.id.clone(),
            seed,
            trial: k + 1,
            strategy: None,
            status,
            penalized,
            weighing_error,
            relative_error: rel,
        });
        if rel < TARGET_REL_ERROR {
            first = Some(k + 1);
            break;
        }
    }
    Ok(LoopRun {
        method: Method::Random,
        powder_id: powder.id.clone(),
        seed,
        trials,
        trials_to_target: first,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: usize,
    pub reached: usize,
    pub mean_trials_to_target: f64,
    pub penalties: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment2Report {
    pub max_trials: usize,
    pub runs: Vec<LoopRun>,
    pub bo: MethodSummary,
    pub random: MethodSummary,
}

impl Experiment2Report {
    pub fn records(&self) -> Vec<TrialRecord> {
        self.runs.iter().flat_map(|r| r.trials.iter().cloned()).collect()
    }
}

fn summarize(runs: &[LoopRun], method: Method, max_trials: usize) -> MethodSummary {
    let mine: Vec<&LoopRun> = runs.iter().filter(|r| r.method == method).collect();
    let total: usize = mine.iter().map(|r| r.censored_trials(max_trials)).sum();
    MethodSummary {
        method,
        runs: mine.len(),
        reached: mine.iter().filter(|r| r.trials_to_target.is_some()).count(),
        mean_trials_to_target: if mine.is_empty() {
            f64::NAN
        } else {
            total as f64 / mine.len() as f64
        },
        penalties: mine.iter().map(|r| r.penalties()).sum(),
    }
}

/// Every powder under every seed, with the optimizer and the baseline.
pub fn run_experiment2(
    models: &ModelBundle,
    cleaned: &Dataset,
    powders: &[Powder],
    cfg: &Experiment2Config,
) -> Result<Experiment2Report> {
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        for p in powders {
            let bo = run_bo_loop(models, cleaned, p, cfg, seed)?;
            log::info!(
                "experiment 2: powder {} seed {seed}: {:?} trials",
                p.id,
                bo.trials_to_target
            );
            runs.push(bo);
            runs.push(run_random_loop(models, cleaned, p, cfg, seed)?);
        }
    }
    Ok(Experiment2Report {
        max_trials: cfg.max_trials,
        bo: summarize(&runs, Method::Bo, cfg.max_trials),
        random: summarize(&runs, Method::Random, cfg.max_trials),
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{gen_dataset, held_out_presets};

    fn row(beta: f64, d: usize, either: usize) -> Experiment1Row {
        Experiment1Row {
            beta,
            latent_dim: d,
            seed: 0,
            samples: 10,
            nonneg: either,
            monotone: 0,
            either,
            best_loss: 0.0,
        }
    }

    #[test]
    fn median_of_cells() {
        let rows = vec![row(0.1, 2, 3), row(0.1, 2, 9), row(0.1, 2, 4), row(0.5, 2, 1), row(0.5, 2, 2)];
        assert_eq!(median_violations(&rows, 0.1, 2), Some(4.0));
        assert_eq!(median_violations(&rows, 0.5, 2), Some(1.5));
        assert_eq!(median_violations(&rows, 1.0, 2), None);
    }

    #[test]
    fn small_sweep_is_reproducible() {
        let d = gen_dataset(6, 10, 3).unwrap();
        let cfg = Experiment1Config {
            betas: vec![0.1, 1.0],
            latent_dims: vec![2],
            seeds: vec![0],
            n_samples: 50,
            train: TrainConfig {
                epochs: 3,
                ..TrainConfig::default()
            },
            ..Experiment1Config::default()
        };
        let models = crate::pipeline::ModelConfig::default();
        let a = run_experiment1(&d, &models, &cfg).unwrap();
        assert_eq!(a.len(), 2);
        for r in &a {
            assert!(r.either >= r.nonneg && r.either >= r.monotone);
            assert!(r.either <= r.nonneg + r.monotone);
        }
        assert_eq!(a, run_experiment1(&d, &models, &cfg).unwrap());
        let mut buf = Vec::new();
        write_rows(&mut buf, &a).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("beta,latent_dim,seed"));
    }

    #[test]
    fn random_baseline_stops_at_target() {
        let d = gen_dataset(12, 15, 4).unwrap();
        let mc = crate::pipeline::ModelConfig {
            train: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
            ..Default::default()
        };
        let (models, cleaned) = ModelBundle::fit(&d, &mc).unwrap();
        let p = &held_out_presets()[1];
        for baseline in [Baseline::LatentBox, Baseline::ScheduleBox] {
            let mut cfg = Experiment2Config {
                max_trials: 5,
                baseline,
                ..Experiment2Config::default()
            };
            cfg.session.min_filtered_trials = 1;
            let run = run_random_loop(&models, &cleaned, p, &cfg, 1).unwrap();
            assert!(run.trials.len() <= cfg.max_trials);
            if let Some(k) = run.trials_to_target {
                assert_eq!(k, run.trials.len());
                assert!(run.trials[k - 1].relative_error < TARGET_REL_ERROR);
            }
            assert_eq!(run.trials.iter().all(|t| t.status.is_some()), baseline == Baseline::LatentBox);
            assert_eq!(run, run_random_loop(&models, &cleaned, p, &cfg, 1).unwrap());
        }
    }
}
