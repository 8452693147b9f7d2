//! The interactive optimization loop for one target job: similar-powder
//! filtering, the latent-space GP, candidate proposal and trial ingestion.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bayesopt::{self, BoundingBox, Candidate, CandidateStatus, KappaMap, ProposalConfig, ProposalContext};
use crate::constraints;
use crate::dataset::{self, Dataset, Schedule, TrialSetup};
use crate::error::{Error, Result};
use crate::gpr::{FitOptions, GprModel};
use crate::pipeline::{ModelBundle, ModelConfig, SCHEMA_VERSION};

/// Success threshold on `error / required_weight`.
pub const TARGET_REL_ERROR: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub models: ModelConfig,
    /// Powders kept by similarity filtering.
    pub n_similar: usize,
    pub min_filtered_trials: usize,
    /// Share of filtered trials the GP starts from.
    pub gpr_train_fraction: f64,
    pub kappas: KappaMap,
    pub proposal: ProposalConfig,
    pub initial_fit: FitOptions,
    /// Refits start from the previous hyperparameters, so fewer restarts do.
    pub refit: FitOptions,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            models: ModelConfig::default(),
            n_similar: 7,
            min_filtered_trials: 10,
            gpr_train_fraction: 0.8,
            kappas: KappaMap::default(),
            proposal: ProposalConfig::default(),
            initial_fit: FitOptions::default(),
            refit: FitOptions {
                restarts: 2,
                max_iters: 60,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// Weighing error read off the machine, kg.
    Measured(f64),
    /// Not run; recorded as 10% of the required weight.
    Penalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub trial: usize,
    pub candidate: Candidate,
    pub outcome: Outcome,
    pub weighing_error: f64,
    pub relative_error: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub history_len: usize,
    pub best_rel_error: f64,
    pub target_reached: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowderPoint {
    pub powder_id: String,
    pub z_f: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulePoint {
    /// Powder id, or `target` for session trials.
    pub source: String,
    pub z_v: Vec<f64>,
    pub weighing_error: f64,
}

/// Coordinates for plotting the similar powders around the target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentMap {
    pub powders: Vec<PowderPoint>,
    pub target_z_f: Vec<f64>,
    pub schedules: Vec<SchedulePoint>,
    pub bounding_box: BoundingBox<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SessionState {
    pub schema_version: u32,
    pub id: String,
    pub seed: u64,
    pub config: SessionConfig,
    pub target: TrialSetup,
    pub models: ModelBundle,
    pub filtered: Dataset,
    /// GP inputs `[z_v, z_f]` and targets (negated standardized error) from
    /// the filtered history.
    base_x: Vec<Vec<f64>>,
    base_y: Vec<f64>,
    pub bbox: BoundingBox<f64>,
    pub z_f_target: Vec<f64>,
    pub gpr: GprModel<f64>,
    pub history: Vec<HistoryEntry>,
    /// Rebuilt on demand; never persisted.
    #[serde(skip)]
    pending: Option<Vec<Candidate>>,
}

/// Fits the encoders and opens a session in one call.
pub fn create_session(d: &Dataset, target: &TrialSetup, config: &SessionConfig, seed: u64) -> Result<SessionState> {
    let mut models_cfg = config.models.clone();
    models_cfg.train.seed = seed;
    let (bundle, cleaned) = ModelBundle::fit(d, &models_cfg)?;
    SessionState::from_models(bundle, &cleaned, target, config, seed)
}

impl SessionState {
    /// Opens a session on already trained models. `cleaned` is the history the
    /// models were fitted on (outliers removed).
    pub fn from_models(
        models: ModelBundle,
        cleaned: &Dataset,
        target: &TrialSetup,
        config: &SessionConfig,
        seed: u64,
    ) -> Result<Self> {
        models.check_version()?;
        target.validate()?;
        config.kappas.validate()?;
        config.kappas.warn_if_inverted();
        if cleaned.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let filtered = dataset::filter_similar(cleaned, &models.stats, target, config.n_similar)?;
        if filtered.len() < config.min_filtered_trials {
            return Err(Error::InsufficientData(format!(
                "{} trials after filtering, need at least {}",
                filtered.len(),
                config.min_filtered_trials
            )));
        }

        let mut points = Vec::with_capacity(filtered.len());
        for t in &filtered.trials {
            let z_v = match models.encode_schedule(&t.schedule) {
                Ok(z) => z,
                Err(Error::DegenerateSchedule(_)) => continue,
                Err(e) => return Err(e),
            };
            let mut x = z_v;
            x.extend(models.encode_setup(&t.setup)?);
            points.push((x, -models.stats.standardize_error(t.weighing_error)?));
        }
        let d_v = models.config.latent_dim;
        let latents: Vec<Vec<f64>> = points.iter().map(|(x, _)| x[..d_v].to_vec()).collect();
        let bbox = BoundingBox::from_points(&latents)?;
        let (train, _) = dataset::split_items(&points, config.gpr_train_fraction, seed)?;
        let (base_x, base_y): (Vec<_>, Vec<_>) = train.into_iter().unzip();
        let gpr = GprModel::fit_with(
            base_x.clone(),
            base_y.clone(),
            bayesopt::derive_seed(seed, 100),
            &config.initial_fit,
            None,
        )?;
        let z_f_target = models.encode_setup(target)?;
        log::info!(
            "session: {} filtered trials, GP on {}, box {:?}..{:?}",
            filtered.len(),
            base_x.len(),
            bbox.lo,
            bbox.hi
        );
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            id: format!("session-{seed}"),
            seed,
            config: config.clone(),
            target: target.clone(),
            models,
            filtered,
            base_x,
            base_y,
            bbox,
            z_f_target,
            gpr,
            history: Vec::new(),
            pending: None,
        })
    }

    fn context(&self) -> ProposalContext<'_, f64, crate::vae::VaeModel<f64>> {
        ProposalContext {
            decoder: &self.models.vae,
            stats: &self.models.stats,
            gpr: &self.gpr,
            bbox: &self.bbox,
            z_f_target: &self.z_f_target,
            config: &self.config.proposal,
        }
    }

    /// The three strategy candidates for the current GP. Computed once per
    /// GP state from the session seed.
    pub fn candidates(&mut self) -> Result<&[Candidate]> {
        if self.pending.is_none() {
            let c = bayesopt::propose_all(&self.context(), &self.config.kappas, self.seed)?;
            self.pending = Some(c);
        }
        Ok(self.pending.as_deref().unwrap_or_default())
    }

    /// Cached candidates without computing new ones.
    pub fn pending(&self) -> Option<&[Candidate]> {
        self.pending.as_deref()
    }

    /// Records the outcome of a pending candidate and refits the GP.
    pub fn report(&mut self, candidate_id: &str, outcome: Outcome) -> Result<ReportSummary> {
        let candidate = self
            .pending
            .as_ref()
            .and_then(|p| p.iter().find(|c| c.candidate_id == candidate_id))
            .cloned()
            .ok_or_else(|| Error::UnknownCandidate(candidate_id.to_string()))?;
        let error = match outcome {
            Outcome::Measured(e) => {
                if !(e >= 0.0 && e.is_finite()) {
                    return Err(Error::InvalidInput(format!("measured error must be ≥ 0, got {e}")));
                }
                if candidate.status == CandidateStatus::Rejected {
                    return Err(Error::InvalidInput(
                        "a rejected candidate cannot be run; penalize it instead".into(),
                    ));
                }
                e
            }
            Outcome::Penalized => constraints::penalty_error(&self.target),
        };

        let mut x = self.gpr.inputs().to_vec();
        let mut y = self.gpr.targets().to_vec();
        x.push(self.history_input(&candidate.latent));
        y.push(-self.models.stats.standardize_error(error)?);
        let refit_seed = bayesopt::derive_seed(self.seed, 1000 + self.history.len() as u64);
        let gpr = GprModel::fit_with(x, y, refit_seed, &self.config.refit, Some(self.gpr.params()))?;

        self.gpr = gpr;
        self.history.push(HistoryEntry {
            trial: self.history.len() + 1,
            candidate,
            outcome,
            weighing_error: error,
            relative_error: error / self.target.required_weight,
        });
        self.pending = None;
        Ok(self.summary())
    }

    /// History trials enter the GP at the latent point they were proposed
    /// from; the target's setup code fills the fixed part.
    fn history_input(&self, z_v: &[f64]) -> Vec<f64> {
        let mut x = z_v.to_vec();
        x.extend_from_slice(&self.z_f_target);
        x
    }

    pub fn summary(&self) -> ReportSummary {
        let best = self.best_rel_error();
        ReportSummary {
            history_len: self.history.len(),
            best_rel_error: best,
            target_reached: best < TARGET_REL_ERROR,
        }
    }

    /// Smallest relative error so far; infinite before the first report.
    pub fn best_rel_error(&self) -> f64 {
        self.history.iter().map(|h| h.relative_error).fold(f64::INFINITY, f64::min)
    }

    pub fn target_reached(&self) -> bool {
        self.best_rel_error() < TARGET_REL_ERROR
    }

    /// Number of filtered-history points the GP was seeded with.
    pub fn base_len(&self) -> usize {
        self.base_x.len()
    }

    pub fn best_schedule(&self) -> Option<&Schedule> {
        self.history
            .iter()
            .min_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
            .map(|h| &h.candidate.schedule)
    }

    pub fn latent_map(&self) -> Result<LatentMap> {
        let mut powders: Vec<PowderPoint> = Vec::new();
        for t in &self.filtered.trials {
            if powders.iter().any(|p| p.powder_id == t.powder_id) {
                continue;
            }
            powders.push(PowderPoint {
                powder_id: t.powder_id.clone(),
                z_f: self.models.encode_setup(&t.setup)?,
            });
        }
        let mut schedules = Vec::new();
        for t in &self.filtered.trials {
            if let Ok(z_v) = self.models.encode_schedule(&t.schedule) {
                schedules.push(SchedulePoint {
                    source: t.powder_id.clone(),
                    z_v,
                    weighing_error: t.weighing_error,
                });
            }
        }
        schedules.extend(self.history.iter().map(|h| SchedulePoint {
            source: "target".into(),
            z_v: h.candidate.latent.clone(),
            weighing_error: h.weighing_error,
        }));
        Ok(LatentMap {
            powders,
            target_z_f: self.z_f_target.clone(),
            schedules,
            bounding_box: self.bbox.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let state: Self = serde_json::from_str(s)?;
        if state.schema_version != SCHEMA_VERSION {
            return Err(Error::Version(format!(
                "session has schema version {}, expected {SCHEMA_VERSION}",
                state.schema_version
            )));
        }
        state.models.check_version()?;
        Ok(state)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{gen_dataset_with, held_out_presets, GeneratorConfig, SimConfig};
    use crate::vae::TrainConfig;
    use std::sync::OnceLock;

    fn config() -> SessionConfig {
        SessionConfig {
            models: ModelConfig {
                train: TrainConfig {
                    epochs: 20,
                    ..TrainConfig::default()
                },
                ..ModelConfig::default()
            },
            initial_fit: FitOptions {
                restarts: 2,
                max_iters: 40,
            },
            refit: FitOptions {
                restarts: 1,
                max_iters: 20,
            },
            proposal: ProposalConfig {
                n_samples: 256,
                refine_iters: 20,
                ..ProposalConfig::default()
            },
            ..SessionConfig::default()
        }
    }

    fn fixture() -> &'static (ModelBundle, Dataset) {
        static CELL: OnceLock<(ModelBundle, Dataset)> = OnceLock::new();
        CELL.get_or_init(|| {
            let gen = GeneratorConfig {
                n_powders: 20,
                mean_trials: 12,
                seed: 4,
                ..GeneratorConfig::default()
            };
            let d = gen_dataset_with(&gen, &SimConfig::default()).unwrap().dataset;
            ModelBundle::fit(&d, &config().models).unwrap()
        })
    }

    fn session(seed: u64) -> SessionState {
        let (b, cleaned) = fixture();
        SessionState::from_models(b.clone(), cleaned, &held_out_presets()[0].setup, &config(), seed).unwrap()
    }

    #[test]
    fn three_labeled_candidates_and_caching() {
        let mut s = session(1);
        let c = s.candidates().unwrap().to_vec();
        let ids: Vec<&str> = c.iter().map(|c| c.candidate_id.as_str()).collect();
        assert_eq!(ids, ["exploration", "intermediate", "exploitation"]);
        assert_eq!(s.candidates().unwrap(), &c[..]);
        assert_eq!(session(1).candidates().unwrap(), &c[..]);
        for cand in &c {
            assert!(s.bbox.contains(&cand.latent));
        }
    }

    #[test]
    fn report_measured_and_penalized() {
        let mut s = session(2);
        s.candidates().unwrap();
        let base = s.gpr.len();
        let r = s.report("intermediate", Outcome::Measured(0.05)).unwrap();
        assert_eq!(r.history_len, 1);
        assert!((s.history[0].relative_error - 0.005).abs() < 1e-15);
        assert!(r.target_reached);
        assert_eq!(s.gpr.len(), base + 1);
        assert!(s.pending().is_none());
        assert!(matches!(
            s.report("intermediate", Outcome::Measured(0.05)),
            Err(Error::UnknownCandidate(_))
        ));

        s.candidates().unwrap();
        s.report("exploration", Outcome::Penalized).unwrap();
        assert_eq!(s.history[1].weighing_error, 1.0);
        assert_eq!(s.gpr.len(), s.base_len() + s.history.len());
        assert!(s.report("bogus", Outcome::Penalized).is_err());
    }

    #[test]
    fn penalty_for_heavier_job() {
        let (b, cleaned) = fixture();
        let mut s = SessionState::from_models(b.clone(), cleaned, &held_out_presets()[1].setup, &config(), 3).unwrap();
        s.candidates().unwrap();
        s.report("exploitation", Outcome::Penalized).unwrap();
        assert!((s.history[0].weighing_error - 1.8).abs() < 1e-12);
        assert!(!s.target_reached());
    }

    #[test]
    fn negative_measurement_rejected() {
        let mut s = session(4);
        s.candidates().unwrap();
        assert!(matches!(
            s.report("exploration", Outcome::Measured(-1.0)),
            Err(Error::InvalidInput(_))
        ));
        assert!(s.history.is_empty());
    }

    #[test]
    fn json_round_trip_preserves_candidates() {
        let mut s = session(5);
        s.candidates().unwrap();
        s.report("intermediate", Outcome::Measured(0.4)).unwrap();
        let expected = s.candidates().unwrap().to_vec();
        let mut back = SessionState::from_json(&s.to_json().unwrap()).unwrap();
        assert!(back.pending().is_none());
        assert_eq!(back.candidates().unwrap(), &expected[..]);
        assert_eq!(back.history, s.history);
    }

    #[test]
    fn too_few_similar_trials() {
        let (b, cleaned) = fixture();
        let cfg = SessionConfig {
            n_similar: 1,
            min_filtered_trials: 10_000,
            ..config()
        };
        assert!(matches!(
            SessionState::from_models(b.clone(), cleaned, &held_out_presets()[0].setup, &cfg, 0),
            Err(Error::InsufficientData(_))
        ));
        assert!(SessionState::from_models(b.clone(), &Dataset::default(), &held_out_presets()[0].setup, &cfg, 0).is_err());
    }

    #[test]
    fn latent_map_lists_similar_powders() {
        let s = session(6);
        let m = s.latent_map().unwrap();
        assert_eq!(m.powders.len(), s.filtered.powder_ids().len());
        assert!(m.powders.len() <= 7);
        assert_eq!(m.target_z_f.len(), 3);
    }
}
