//! Scripted tuning histories standing in for operator logs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use super::powder::{gen_powder, Powder};
use super::{run_trial_recorded, SimConfig};
use crate::bayesopt::derive_seed;
use crate::dataset::{Dataset, Schedule, Trial, TrialSetup, N_SWITCHES, N_VALVES};
use crate::error::{Error, Result};

const SUCCESS_REL_ERROR: f64 = 0.01;
const PERTURBATION: f64 = 0.03;
const REQUIRED_WEIGHTS: [f64; 6] = [5.0, 8.0, 10.0, 12.0, 15.0, 18.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_powders: usize,
    pub mean_trials: usize,
    /// Gamma shape of the per-powder Poisson rate; smaller means more spread
    /// in history length between powders.
    pub trial_count_shape: f64,
    pub max_jobs: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_powders: 60,
            mean_trials: 30,
            trial_count_shape: 2.5,
            max_jobs: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedDataset {
    pub dataset: Dataset,
    pub powders: Vec<Powder>,
}

/// Greedy tuner over a few knobs: first opening, tail ratio of the openings
/// and the share of the target handled by the switching stages. The curve
/// shapes of both sequences are an operator habit fixed per job.
#[derive(Clone, Debug)]
pub struct Tuner {
    v0: f64,
    ratio: f64,
    share: f64,
    valve_curve: f64,
    switch_curve: f64,
    diameter: f64,
    required: f64,
}

impl Tuner {
    pub fn new(setup: &TrialSetup, rng: &mut impl Rng) -> Self {
        let diameter = f64::from(setup.valve_diameter);
        Self {
            v0: diameter * rng.random_range(0.6..1.0),
            ratio: rng.random_range(0.02f64.ln()..0.5f64.ln()).exp(),
            share: rng.random_range(0.2..0.5),
            valve_curve: rng.random_range(0.25f64.ln()..3f64.ln()).exp(),
            switch_curve: rng.random_range(0.25f64.ln()..4f64.ln()).exp(),
            diameter,
            required: setup.required_weight,
        }
    }

    /// Next schedule to try: the knob schedule with a little multiplicative
    /// jitter, made monotone and rounded to machine resolution.
    pub fn propose(&self, rng: &mut impl Rng) -> Schedule {
        let jitter = LogNormal::new(0.0, PERTURBATION).expect("valid sigma");
        let mut v = [0.0; N_VALVES];
        let mut s = [0.0; N_SWITCHES];
        for (i, x) in v.iter_mut().enumerate() {
            *x = self.v0 * self.ratio.powf((i as f64 / 9.0).powf(self.valve_curve)) * jitter.sample(rng);
        }
        for (i, x) in s.iter_mut().enumerate() {
            let frac = (N_SWITCHES - i) as f64 / 9.0;
            *x = self.required * self.share * frac.powf(self.switch_curve) * jitter.sample(rng);
        }
        v[0] = v[0].min(self.diameter);
        cumulative_min(&mut v);
        cumulative_min(&mut s);
        v.iter_mut().for_each(|x| *x = quantize(*x, 0.1));
        s.iter_mut().for_each(|x| *x = quantize(*x, 0.01));
        Schedule {
            valve_degrees: v,
            switching_weights: s,
        }
    }

    /// Adjusts the knobs after a trial that ended `final_weight` kg on the scale.
    pub fn observe(&mut self, final_weight: f64, rng: &mut impl Rng) {
        let signed = (final_weight - self.required) / self.required;
        if signed < -SUCCESS_REL_ERROR {
            // Ran out of time or stalled: open the tail, switch later.
            self.ratio *= 1.5;
            self.share *= 0.85;
        } else if signed > SUCCESS_REL_ERROR {
            let rel = signed.min(0.5);
            self.share = (self.share * (1.0 + rel)).min(0.95);
            self.ratio *= (-(5.0 * rel).min(1.0)).exp() * rng.random_range(0.8..1.1);
        } else {
            self.share *= rng.random_range(0.97..1.01);
            self.ratio *= rng.random_range(0.95..1.15);
        }
        self.ratio = self.ratio.clamp(1e-3, 1.0);
        self.share = self.share.clamp(0.02, 0.95);
    }
}

fn cumulative_min(xs: &mut [f64]) {
    for i in 1..xs.len() {
        xs[i] = xs[i].min(xs[i - 1]);
    }
}

fn quantize(x: f64, step: f64) -> f64 {
    (x / step).round() * step
}

/// Sorted uniform draws: openings in `[0, diameter]`, switching weights in
/// `[0, required]`. Always feasible.
pub fn random_schedule(setup: &TrialSetup, rng: &mut impl Rng) -> Schedule {
    let d = f64::from(setup.valve_diameter);
    let mut v: Vec<f64> = (0..N_VALVES).map(|_| rng.random_range(0.0..=d)).collect();
    let mut s: Vec<f64> = (0..N_SWITCHES)
        .map(|_| rng.random_range(0.0..=setup.required_weight))
        .collect();
    v.sort_by(|a, b| b.total_cmp(a));
    s.sort_by(|a, b| b.total_cmp(a));
    Schedule::new(&v, &s).expect("lengths are fixed")
}

pub fn gen_dataset(n_powders: usize, mean_trials: usize, seed: u64) -> Result<Dataset> {
    let cfg = GeneratorConfig {
        n_powders,
        mean_trials,
        seed,
        ..GeneratorConfig::default()
    };
    Ok(gen_dataset_with(&cfg, &SimConfig::default())?.dataset)
}

/// Tuning histories for `n_powders` random powders. Each powder is weighed
/// in one to `max_jobs` jobs; every job starts a fresh tuner.
pub fn gen_dataset_with(cfg: &GeneratorConfig, sim: &SimConfig) -> Result<GeneratedDataset> {
    if cfg.n_powders == 0 {
        return Err(Error::InvalidInput("n_powders must be at least 1".into()));
    }
    if cfg.mean_trials == 0 || cfg.max_jobs == 0 || !(cfg.trial_count_shape > 0.0) {
        return Err(Error::InvalidInput(
            "mean_trials, max_jobs and trial_count_shape must be positive".into(),
        ));
    }
    let mut trials = Vec::new();
    let mut powders = Vec::with_capacity(cfg.n_powders);
    for p in 0..cfg.n_powders {
        let powder_seed = derive_seed(cfg.seed, p as u64);
        let mut powder = gen_powder(powder_seed);
        powder.id = format!("P{:03}", p + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(powder_seed, 1));

        let mean = cfg.mean_trials as f64;
        let rate = Gamma::new(cfg.trial_count_shape, mean / cfg.trial_count_shape)
            .expect("positive parameters")
            .sample(&mut rng);
        let count = if rate > 0.0 {
            Poisson::new(rate).expect("positive rate").sample(&mut rng) as usize
        } else {
            0
        }
        .max(1);
        let jobs = rng.random_range(1..=cfg.max_jobs).min(count);

        let mut trial_no = 0u64;
        for j in 0..jobs {
            let setup = if j == 0 {
                powder.setup.clone()
            } else {
                let r = REQUIRED_WEIGHTS[rng.random_range(0..REQUIRED_WEIGHTS.len())];
                powder.with_job(r, powder.setup.input_weight)
            };
            let n = count / jobs + usize::from(j < count % jobs);
            let mut tuner = Tuner::new(&setup, &mut rng);
            for _ in 0..n {
                let schedule = tuner.propose(&mut rng);
                let r = run_trial_recorded(&schedule, &setup, derive_seed(powder_seed, 1000 + trial_no), sim)?;
                trial_no += 1;
                tuner.observe(r.final_weight, &mut rng);
                trials.push(Trial {
                    powder_id: powder.id.clone(),
                    setup: setup.clone(),
                    schedule,
                    weighing_error: r.weighing_error,
                });
            }
        }
        powders.push(powder);
    }
    Ok(GeneratedDataset {
        dataset: Dataset::new(trials),
        powders,
    })
}
