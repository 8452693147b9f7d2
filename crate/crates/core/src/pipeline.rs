//! Offline stage: clean the history and fit the frozen encoders (β-VAE for
//! schedules, split PCA for setups). The result is saved as one JSON bundle.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{self, Dataset, NormStats, RelativeEncoding, TrialSetup};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::pca::{PcaPair, DEFAULT_PHYS_COMPONENTS, DEFAULT_SETTINGS_COMPONENTS};
use crate::vae::{self, EpochLoss, TrainConfig, VaeModel};

/// Version stamped into saved bundles and sessions.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub train: TrainConfig,
    pub encoding: RelativeEncoding,
    /// Trials above this relative error are dropped as outliers.
    pub outlier_rel_error: f64,
    pub phys_components: usize,
    pub settings_components: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            train: TrainConfig::default(),
            encoding: RelativeEncoding::Ratio,
            outlier_rel_error: 0.5,
            phys_components: DEFAULT_PHYS_COMPONENTS,
            settings_components: DEFAULT_SETTINGS_COMPONENTS,
        }
    }
}

/// Counts reported by preprocessing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub input_trials: usize,
    pub outliers_removed: usize,
    pub unique_setups: usize,
    pub unique_schedules: usize,
    /// Unique schedules the ratio encoding cannot represent (zero first step).
    pub degenerate_schedules: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub stats: NormStats,
    pub vae: VaeModel<f64>,
    pub pca: PcaPair<f64>,
    pub summary: PreprocessSummary,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub losses: Vec<EpochLoss<f64>>,
}

/// Outlier removal followed by normalization statistics on what is left.
pub fn clean(d: &Dataset, cfg: &ModelConfig) -> Result<(Dataset, NormStats, usize)> {
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (kept, removed) = dataset::remove_outliers(d, cfg.outlier_rel_error);
    if kept.is_empty() {
        return Err(Error::InsufficientData("every trial was an outlier".into()));
    }
    let stats = NormStats::fit(&kept, cfg.encoding)?;
    Ok((kept, stats, removed))
}

fn schedule_matrix(rows: &[Vec<f64>]) -> Matrix<f64> {
    let cols = rows.first().map_or(0, Vec::len);
    Matrix::from_row_major(rows.len(), cols, rows.concat())
}

struct Prepared {
    cleaned: Dataset,
    stats: NormStats,
    removed: usize,
    unique: dataset::DedupRows,
    rows: Vec<Vec<f64>>,
    degenerate: usize,
}

fn prepare(d: &Dataset, cfg: &ModelConfig) -> Result<Prepared> {
    let (cleaned, stats, removed) = clean(d, cfg)?;
    let unique = dataset::dedup(&cleaned);
    let mut degenerate = 0;
    let mut rows = Vec::with_capacity(unique.schedules.len());
    for s in &unique.schedules {
        match stats.normalize_schedule(s) {
            Ok(x) => rows.push(x),
            Err(Error::DegenerateSchedule(_)) => degenerate += 1,
            Err(e) => return Err(e),
        }
    }
    if rows.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} usable schedules after preprocessing",
            rows.len()
        )));
    }
    Ok(Prepared {
        cleaned,
        stats,
        removed,
        unique,
        rows,
        degenerate,
    })
}

/// Normalization statistics and the β-VAE training matrix (cleaned,
/// deduplicated, normalized schedules) for a raw history.
pub fn training_matrix(d: &Dataset, cfg: &ModelConfig) -> Result<(NormStats, Matrix<f64>)> {
    let p = prepare(d, cfg)?;
    Ok((p.stats, schedule_matrix(&p.rows)))
}

impl ModelBundle {
    /// Full offline stage on a raw history. Returns the bundle and the cleaned trials.
    pub fn fit(d: &Dataset, cfg: &ModelConfig) -> Result<(Self, Dataset)> {
        let Prepared {
            cleaned,
            stats,
            removed,
            unique,
            rows,
            degenerate,
        } = prepare(d, cfg)?;
        let setups: Vec<Vec<f64>> = unique.setups.iter().map(|t| stats.normalize_setup(t)).collect();
        let pca = PcaPair::fit(&setups, cfg.phys_components, cfg.settings_components)?;

        let init = VaeModel::new(cfg.latent_dim, cfg.train.beta, cfg.train.seed)?;
        let (vae, losses) = vae::train(&init, &schedule_matrix(&rows), &cfg.train)?;
        log::info!(
            "encoders: {} trials, {removed} outliers, {} setups, {} schedules, best val loss {:.4}",
            d.len(),
            unique.setups.len(),
            rows.len(),
            losses.iter().map(EpochLoss::monitored).fold(f64::INFINITY, f64::min)
        );
        let bundle = Self {
            schema_version: SCHEMA_VERSION,
            config: cfg.clone(),
            stats,
            vae,
            pca,
            summary: PreprocessSummary {
                input_trials: d.len(),
                outliers_removed: removed,
                unique_setups: unique.setups.len(),
                unique_schedules: unique.schedules.len(),
                degenerate_schedules: degenerate,
            },
            losses,
        };
        Ok((bundle, cleaned))
    }

    /// Latent code of a setup, `z_f`.
    pub fn encode_setup(&self, t: &TrialSetup) -> Result<Vec<f64>> {
        self.pca.encode_fixed(&self.stats.normalize_setup(t))
    }

    /// Posterior mean of a schedule, `z_v`.
    pub fn encode_schedule(&self, s: &dataset::Schedule) -> Result<Vec<f64>> {
        Ok(self.vae.encode(&self.stats.normalize_schedule(s)?)?.0)
    }

    pub fn check_version(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Version(format!(
                "model bundle has schema version {}, expected {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        self.vae.validate()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let w = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let r = std::io::BufReader::new(std::fs::File::open(path)?);
        let b: Self = serde_json::from_reader(r)?;
        b.check_version()?;
        Ok(b)
    }
}
