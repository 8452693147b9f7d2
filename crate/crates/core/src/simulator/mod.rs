//! Discrete-time model of the weighing machine and a synthetic history
//! generator.
//!
//! Powder leaves the upper container at a rate proportional to the valve
//! opening and lands on the scale after a fixed fall delay. The controller
//! reads the scale, treats switching weights as remaining-weight thresholds
//! and closes the valve once the scale reaches the required weight, so any
//! mass still falling at that moment becomes overshoot.

mod generator;
mod powder;

use std::collections::VecDeque;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::constraints;
use crate::dataset::{Schedule, TrialSetup, N_SWITCHES};
use crate::error::{Error, Result};

pub use generator::{gen_dataset, gen_dataset_with, random_schedule, GeneratedDataset, GeneratorConfig, Tuner};
pub use powder::{gen_powder, powder_from_factors, held_out_presets, Powder, PROPERTY_RANGES};

/// Physics coefficients. Key names are the JSON field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// kg / (s · mm²): flow per mm of opening per mm of valve diameter.
    pub base_flow_coeff: f64,
    /// Seconds between release and landing.
    pub fall_delay: f64,
    pub timestep: f64,
    /// Log-scale standard deviation of the per-step flow noise.
    pub noise_sigma: f64,
    /// Used instead of `noise_sigma` when pre-vibration is on.
    pub noise_sigma_pre_vibration: f64,
    pub timeout: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            base_flow_coeff: 1.0e-4,
            fall_delay: 1.0,
            timestep: 0.02,
            noise_sigma: 0.05,
            noise_sigma_pre_vibration: 0.03,
            timeout: 300.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_flow_coeff", self.base_flow_coeff),
            ("timestep", self.timestep),
            ("timeout", self.timeout),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be > 0, got {v}")));
            }
        }
        let nonneg = [
            ("fall_delay", self.fall_delay),
            ("noise_sigma", self.noise_sigma),
            ("noise_sigma_pre_vibration", self.noise_sigma_pre_vibration),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be ≥ 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Noise-free variant, handy for tests and oracles.
    pub fn noiseless(mut self) -> Self {
        self.noise_sigma = 0.0;
        self.noise_sigma_pre_vibration = 0.0;
        self
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sigma_for(&self, setup: &TrialSetup) -> f64 {
        if setup.pre_vibration {
            self.noise_sigma_pre_vibration
        } else {
            self.noise_sigma
        }
    }

    fn delay_steps(&self) -> usize {
        (self.fall_delay / self.timestep).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub final_weight: f64,
    pub weighing_error: f64,
    pub duration: f64,
    /// `(time, stage)` each time the controller moves to a new valve stage;
    /// stage 10 is the closed valve.
    pub switch_trace: Vec<(f64, usize)>,
}

impl SimResult {
    pub fn relative_error(&self, setup: &TrialSetup) -> f64 {
        self.weighing_error / setup.required_weight
    }
}

/// Powder-dependent part of the flow rate, `0.4 + 1.2 · p̄`.
pub fn powder_factor(setup: &TrialSetup) -> f64 {
    let p = &setup.physical_properties;
    let jet = PROPERTY_RANGES[powder::JETTING].unit(p[powder::JETTING]);
    let flow = PROPERTY_RANGES[powder::FLOWABILITY].unit(p[powder::FLOWABILITY]);
    let loose = (1.0 - p[powder::COMPRESSIBILITY] / 100.0).clamp(0.0, 1.0);
    0.4 + 1.2 * (jet + flow + loose) / 3.0
}

pub fn mode_factor(setup: &TrialSetup) -> f64 {
    let mut f = 1.0;
    if setup.vibration {
        f *= 1.2;
    }
    if setup.shaking {
        f *= 1.1;
    }
    f
}

/// Flow in kg/s through an opening of `v` mm.
pub fn flow_rate(v: f64, setup: &TrialSetup, noise_factor: f64, cfg: &SimConfig) -> f64 {
    cfg.base_flow_coeff
        * v.max(0.0)
        * f64::from(setup.valve_diameter)
        * powder_factor(setup)
        * mode_factor(setup)
        * noise_factor
}

/// Stepwise state of one weighing. [`run_trial`] drives it to completion;
/// tests step it directly to observe the invariants.
pub struct Simulation<'a> {
    schedule: &'a Schedule,
    setup: &'a TrialSetup,
    cfg: &'a SimConfig,
    noise: Option<LogNormal<f64>>,
    rng: ChaCha8Rng,
    /// Mass released in each of the last `delay_steps` steps, oldest first.
    falling: VecDeque<f64>,
    delay_steps: usize,
    stage: usize,
    valve: f64,
    closed: bool,
    released: f64,
    landed: f64,
    supply: f64,
    steps: u64,
    trace: Vec<(f64, usize)>,
}

impl<'a> Simulation<'a> {
    pub fn new(schedule: &'a Schedule, setup: &'a TrialSetup, seed: u64, cfg: &'a SimConfig) -> Result<Self> {
        cfg.validate()?;
        setup.validate()?;
        schedule.ensure_finite()?;
        if !constraints::check(schedule).is_valid() {
            return Err(Error::InvalidInput(
                "schedule violates the inequality constraints; repair it first".into(),
            ));
        }
        let sigma = cfg.sigma_for(setup);
        let noise = (sigma > 0.0).then(|| LogNormal::new(0.0, sigma).expect("finite positive sigma"));
        let delay_steps = cfg.delay_steps();
        Ok(Self {
            schedule,
            setup,
            cfg,
            noise,
            rng: ChaCha8Rng::seed_from_u64(seed),
            falling: VecDeque::with_capacity(delay_steps + 1),
            delay_steps,
            stage: 0,
            valve: schedule.valve_degrees[0],
            closed: false,
            released: 0.0,
            landed: 0.0,
            supply: f64::from(setup.input_weight),
            steps: 0,
            trace: vec![(0.0, 0)],
        })
    }

    pub fn time(&self) -> f64 {
        self.steps as f64 * self.cfg.timestep
    }

    /// Scale reading, kg.
    pub fn measured(&self) -> f64 {
        self.landed
    }

    pub fn released(&self) -> f64 {
        self.released
    }

    pub fn in_flight(&self) -> f64 {
        self.falling.iter().sum()
    }

    pub fn valve(&self) -> f64 {
        self.valve
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    /// Valve shut (by the controller or a zero stage) and nothing left falling.
    pub fn is_finished(&self) -> bool {
        let stalled = self.valve == 0.0 || self.supply <= 0.0;
        stalled && self.falling.iter().all(|&m| m == 0.0)
    }

    fn update_controller(&mut self) {
        if self.closed {
            return;
        }
        let remaining = self.setup.required_weight - self.landed;
        if remaining <= 0.0 {
            self.closed = true;
            self.valve = 0.0;
            self.stage = N_SWITCHES + 1;
            self.trace.push((self.time(), self.stage));
            return;
        }
        while self.stage < N_SWITCHES && remaining <= self.schedule.switching_weights[self.stage] {
            self.stage += 1;
            self.valve = self.schedule.valve_degrees[self.stage];
            self.trace.push((self.time(), self.stage));
        }
    }

    /// Advances one timestep.
    pub fn step(&mut self) {
        self.update_controller();
        let noise = match &self.noise {
            Some(d) => d.sample(&mut self.rng),
            None => 1.0,
        };
        let q = (flow_rate(self.valve, self.setup, noise, self.cfg) * self.cfg.timestep).min(self.supply);
        self.supply -= q;
        self.released += q;
        self.falling.push_back(q);
        while self.falling.len() > self.delay_steps {
            self.landed += self.falling.pop_front().unwrap_or(0.0);
        }
        self.steps += 1;
    }

    fn result(&self) -> SimResult {
        SimResult {
            final_weight: self.landed,
            weighing_error: (self.landed - self.setup.required_weight).abs(),
            duration: self.time(),
            switch_trace: self.trace.clone(),
        }
    }

    pub fn run(mut self) -> Result<SimResult> {
        // Finished-ness is only meaningful once the controller has seen the scale.
        self.update_controller();
        while !self.is_finished() {
            if self.time() >= self.cfg.timeout {
                return Err(Error::Timeout(Box::new(self.result())));
            }
            self.step();
            self.update_controller();
        }
        Ok(self.result())
    }
}

/// Runs one weighing. `seed` drives the flow noise.
pub fn run_trial(schedule: &Schedule, setup: &TrialSetup, seed: u64, cfg: &SimConfig) -> Result<SimResult> {
    Simulation::new(schedule, setup, seed, cfg)?.run()
}

/// Like [`run_trial`] but a timeout is returned as its partial result,
/// which is what an operator would record.
pub fn run_trial_recorded(schedule: &Schedule, setup: &TrialSetup, seed: u64, cfg: &SimConfig) -> Result<SimResult> {
    match run_trial(schedule, setup, seed, cfg) {
        Err(Error::Timeout(partial)) => Ok(*partial),
        other => other,
    }
}
