//! Trial records, the on-disk CSV schema and the preprocessing chain
//! (normalization, outlier removal, duplicate removal, similarity filtering,
//! train/test split).

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints;
use crate::error::{Error, Result};

pub const N_VALVES: usize = 10;
pub const N_SWITCHES: usize = 9;
pub const N_VARIABLE: usize = N_VALVES + N_SWITCHES;
pub const N_PROPERTIES: usize = 11;
pub const N_SETTINGS: usize = 6;
pub const N_FIXED: usize = N_PROPERTIES + N_SETTINGS;
pub const N_COLUMNS: usize = 1 + N_FIXED + N_VARIABLE + 1;

/// Physical property columns, in order.
pub const PROPERTY_NAMES: [&str; N_PROPERTIES] = [
    "particle_size_um",
    "bulk_density_loose",
    "bulk_density_firm",
    "compressibility_pct",
    "angle_of_repose_deg",
    "spatula_angle_deg",
    "flowability_index",
    "collapse_angle_deg",
    "difference_angle_deg",
    "dispersion_pct",
    "jetting_index",
];

pub const SETTING_NAMES: [&str; N_SETTINGS] = [
    "required_weight",
    "valve_diameter",
    "input_weight",
    "shaking",
    "vibration",
    "pre_vibration",
];

/// Relative rounding used for duplicate detection.
const DEDUP_DECIMALS: i32 = 6;

/// The variable parameters: ten valve opening degrees (mm) and nine
/// switching weights (kg).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub valve_degrees: [f64; N_VALVES],
    pub switching_weights: [f64; N_SWITCHES],
}

impl Schedule {
    pub fn new(valve_degrees: &[f64], switching_weights: &[f64]) -> Result<Self> {
        if valve_degrees.len() != N_VALVES {
            return Err(Error::DimensionMismatch {
                expected: N_VALVES,
                got: valve_degrees.len(),
            });
        }
        if switching_weights.len() != N_SWITCHES {
            return Err(Error::DimensionMismatch {
                expected: N_SWITCHES,
                got: switching_weights.len(),
            });
        }
        let mut v = [0.0; N_VALVES];
        let mut s = [0.0; N_SWITCHES];
        v.copy_from_slice(valve_degrees);
        s.copy_from_slice(switching_weights);
        let sched = Self {
            valve_degrees: v,
            switching_weights: s,
        };
        sched.ensure_finite()?;
        Ok(sched)
    }

    /// Builds a schedule from the flat `v0..v9, s1..s9` layout.
    pub fn from_flat(x: &[f64]) -> Result<Self> {
        if x.len() != N_VARIABLE {
            return Err(Error::DimensionMismatch {
                expected: N_VARIABLE,
                got: x.len(),
            });
        }
        Self::new(&x[..N_VALVES], &x[N_VALVES..])
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.valve_degrees
            .iter()
            .chain(self.switching_weights.iter())
            .copied()
            .collect()
    }

    pub fn ensure_finite(&self) -> Result<()> {
        if self.to_flat().iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidInput("schedule contains non-finite entries".into()))
        }
    }

    pub fn zeros() -> Self {
        Self {
            valve_degrees: [0.0; N_VALVES],
            switching_weights: [0.0; N_SWITCHES],
        }
    }
}

/// The fixed parameters of a weighing job.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSetup {
    pub physical_properties: [f64; N_PROPERTIES],
    pub required_weight: f64,
    pub valve_diameter: u32,
    pub input_weight: u32,
    pub shaking: bool,
    pub vibration: bool,
    pub pre_vibration: bool,
}

impl TrialSetup {
    pub fn validate(&self) -> Result<()> {
        if !(self.required_weight > 0.0) || !self.required_weight.is_finite() {
            return Err(Error::InvalidInput("required_weight must be > 0".into()));
        }
        if self.valve_diameter == 0 {
            return Err(Error::InvalidInput("valve_diameter must be > 0".into()));
        }
        if f64::from(self.input_weight) < self.required_weight {
            return Err(Error::InvalidInput(
                "input_weight must be at least required_weight".into(),
            ));
        }
        if !self.physical_properties.iter().all(|p| p.is_finite()) {
            return Err(Error::InvalidInput("non-finite physical property".into()));
        }
        Ok(())
    }

    /// Raw 17-vector: 11 properties followed by the 6 settings, booleans as 0/1.
    pub fn to_vector(&self) -> [f64; N_FIXED] {
        let mut x = [0.0; N_FIXED];
        x[..N_PROPERTIES].copy_from_slice(&self.physical_properties);
        x[N_PROPERTIES] = self.required_weight;
        x[N_PROPERTIES + 1] = f64::from(self.valve_diameter);
        x[N_PROPERTIES + 2] = f64::from(self.input_weight);
        x[N_PROPERTIES + 3] = bool_f(self.shaking);
        x[N_PROPERTIES + 4] = bool_f(self.vibration);
        x[N_PROPERTIES + 5] = bool_f(self.pre_vibration);
        x
    }

    /// Inverse of [`to_vector`](Self::to_vector); integers are rounded and
    /// booleans thresholded at 0.5.
    pub fn from_vector(x: &[f64]) -> Result<Self> {
        if x.len() != N_FIXED {
            return Err(Error::DimensionMismatch {
                expected: N_FIXED,
                got: x.len(),
            });
        }
        let mut props = [0.0; N_PROPERTIES];
        props.copy_from_slice(&x[..N_PROPERTIES]);
        Ok(Self {
            physical_properties: props,
            required_weight: x[N_PROPERTIES],
            valve_diameter: x[N_PROPERTIES + 1].round().max(0.0) as u32,
            input_weight: x[N_PROPERTIES + 2].round().max(0.0) as u32,
            shaking: x[N_PROPERTIES + 3] > 0.5,
            vibration: x[N_PROPERTIES + 4] > 0.5,
            pre_vibration: x[N_PROPERTIES + 5] > 0.5,
        })
    }
}

fn bool_f(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// One executed weighing with its outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub powder_id: String,
    pub setup: TrialSetup,
    pub schedule: Schedule,
    /// |measured − required|, kg.
    pub weighing_error: f64,
}

impl Trial {
    pub fn relative_error(&self) -> f64 {
        self.weighing_error / self.setup.required_weight
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub trials: Vec<Trial>,
}

impl Dataset {
    pub fn new(trials: Vec<Trial>) -> Self {
        Self { trials }
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    /// Distinct powder ids in order of first appearance.
    pub fn powder_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.trials
            .iter()
            .filter(|t| seen.insert(t.powder_id.as_str()))
            .map(|t| t.powder_id.clone())
            .collect()
    }

    pub fn without_powders(&self, excluded: &[&str]) -> Self {
        Self::new(
            self.trials
                .iter()
                .filter(|t| !excluded.contains(&t.powder_id.as_str()))
                .cloned()
                .collect(),
        )
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(file)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(file)
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr.headers()?.clone();
        let expected = csv_header();
        if header.len() != N_COLUMNS {
            return Err(Error::Schema(format!(
                "header has {} columns, expected {N_COLUMNS}",
                header.len()
            )));
        }
        for (got, want) in header.iter().zip(&expected) {
            if !got.eq_ignore_ascii_case(want) {
                return Err(Error::Schema(format!(
                    "unexpected column `{got}`, expected `{want}`"
                )));
            }
        }
        let mut trials = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let row = i + 1;
            let record = record?;
            if record.len() != N_COLUMNS {
                return Err(Error::Schema(format!(
                    "row {row} has {} columns, expected {N_COLUMNS}",
                    record.len()
                )));
            }
            trials.push(parse_record(row, &record, &expected)?);
        }
        Ok(Self { trials })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(csv_header())?;
        for t in &self.trials {
            let mut rec: Vec<String> = Vec::with_capacity(N_COLUMNS);
            rec.push(t.powder_id.clone());
            rec.extend(t.setup.physical_properties.iter().map(|p| p.to_string()));
            rec.push(t.setup.required_weight.to_string());
            rec.push(t.setup.valve_diameter.to_string());
            rec.push(t.setup.input_weight.to_string());
            rec.push(t.setup.shaking.to_string());
            rec.push(t.setup.vibration.to_string());
            rec.push(t.setup.pre_vibration.to_string());
            rec.extend(t.schedule.to_flat().iter().map(|x| x.to_string()));
            rec.push(t.weighing_error.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// The 38-column header of the dataset CSV.
pub fn csv_header() -> Vec<String> {
    let mut h = Vec::with_capacity(N_COLUMNS);
    h.push("powder_id".to_string());
    h.extend(PROPERTY_NAMES.iter().map(|s| s.to_string()));
    h.extend(SETTING_NAMES.iter().map(|s| s.to_string()));
    h.extend((0..N_VALVES).map(|i| format!("v{i}")));
    h.extend((1..=N_SWITCHES).map(|i| format!("s{i}")));
    h.push("weighing_error".to_string());
    h
}

fn parse_record(row: usize, rec: &csv::StringRecord, header: &[String]) -> Result<Trial> {
    let cell = |c: usize| -> &str { rec.get(c).unwrap_or("") };
    let err = |c: usize, message: String| Error::Parse {
        row,
        column: header[c].clone(),
        message,
    };
    let real = |c: usize| -> Result<f64> {
        let s = cell(c);
        match s.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(x),
            Ok(_) => Err(err(c, format!("non-finite value `{s}`"))),
            Err(_) => Err(err(c, format!("cannot parse `{s}` as a number"))),
        }
    };
    let integer = |c: usize| -> Result<u32> {
        let s = cell(c);
        s.parse::<u32>()
            .or_else(|_| {
                // Accept integral floats such as "150.0".
                s.parse::<f64>()
                    .ok()
                    .filter(|x| x.fract() == 0.0 && *x >= 0.0 && *x <= f64::from(u32::MAX))
                    .map(|x| x as u32)
                    .ok_or(())
            })
            .map_err(|_| err(c, format!("cannot parse `{s}` as an integer")))
    };
    let boolean = |c: usize| -> Result<bool> {
        let s = cell(c);
        if s.eq_ignore_ascii_case("true") {
            Ok(true)
        } else if s.eq_ignore_ascii_case("false") {
            Ok(false)
        } else {
            Err(err(c, format!("expected true/false, got `{s}`")))
        }
    };

    let powder_id = cell(0).to_string();
    if powder_id.is_empty() {
        return Err(err(0, "empty powder id".into()));
    }
    let mut props = [0.0; N_PROPERTIES];
    for (k, p) in props.iter_mut().enumerate() {
        *p = real(1 + k)?;
    }
    let base = 1 + N_PROPERTIES;
    let setup = TrialSetup {
        physical_properties: props,
        required_weight: real(base)?,
        valve_diameter: integer(base + 1)?,
        input_weight: integer(base + 2)?,
        shaking: boolean(base + 3)?,
        vibration: boolean(base + 4)?,
        pre_vibration: boolean(base + 5)?,
    };
    let vbase = 1 + N_FIXED;
    let mut flat = [0.0; N_VARIABLE];
    for (k, x) in flat.iter_mut().enumerate() {
        *x = real(vbase + k)?;
    }
    let ecol = N_COLUMNS - 1;
    let weighing_error = real(ecol)?;
    if weighing_error < 0.0 {
        return Err(err(ecol, "weighing error must be non-negative".into()));
    }
    Ok(Trial {
        powder_id,
        setup,
        schedule: Schedule::from_flat(&flat)?,
        weighing_error,
    })
}

/// How steps after the first are expressed relative to the first step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelativeEncoding {
    /// `v_i / v0` and `s_i / s1`.
    #[default]
    Ratio,
    /// `(v_i − v0) / max(v0)` and `(s_i − s1) / max(s1)`.
    Difference,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    fn fit(xs: impl Iterator<Item = f64>) -> Self {
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for x in xs {
            min = min.min(x);
            max = max.max(x);
        }
        Self { min, max }
    }

    /// Min-max scaling; a constant dimension maps to 0.
    pub fn scale(&self, x: f64) -> f64 {
        let w = self.max - self.min;
        if w > 0.0 {
            (x - self.min) / w
        } else {
            0.0
        }
    }

    pub fn unscale(&self, u: f64) -> f64 {
        self.min + u * (self.max - self.min)
    }
}

/// Normalization statistics fitted on a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub fixed: Vec<Range>,
    pub v0: Range,
    pub s1: Range,
    pub error_mean: f64,
    pub error_std: f64,
    pub encoding: RelativeEncoding,
}

impl NormStats {
    pub fn fit(d: &Dataset, encoding: RelativeEncoding) -> Result<Self> {
        if d.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let fixed = (0..N_FIXED)
            .map(|k| Range::fit(d.trials.iter().map(|t| t.setup.to_vector()[k])))
            .collect();
        let v0 = Range::fit(d.trials.iter().map(|t| t.schedule.valve_degrees[0]));
        let s1 = Range::fit(d.trials.iter().map(|t| t.schedule.switching_weights[0]));
        let n = d.len() as f64;
        let error_mean = d.trials.iter().map(|t| t.weighing_error).sum::<f64>() / n;
        let var = d
            .trials
            .iter()
            .map(|t| (t.weighing_error - error_mean).powi(2))
            .sum::<f64>()
            / n;
        Ok(Self {
            fixed,
            v0,
            s1,
            error_mean,
            error_std: var.sqrt(),
            encoding,
        })
    }

    pub fn normalize_schedule(&self, s: &Schedule) -> Result<Vec<f64>> {
        s.ensure_finite()?;
        let v0 = s.valve_degrees[0];
        let s1 = s.switching_weights[0];
        let mut x = Vec::with_capacity(N_VARIABLE);
        x.push(self.v0.scale(v0));
        match self.encoding {
            RelativeEncoding::Ratio => {
                if v0 == 0.0 {
                    return Err(Error::DegenerateSchedule("v0 = 0".into()));
                }
                if s1 == 0.0 {
                    return Err(Error::DegenerateSchedule("s1 = 0".into()));
                }
                x.extend(s.valve_degrees[1..].iter().map(|v| v / v0));
                x.push(self.s1.scale(s1));
                x.extend(s.switching_weights[1..].iter().map(|w| w / s1));
            }
            RelativeEncoding::Difference => {
                let (vs, ss) = (self.diff_scale_v(), self.diff_scale_s());
                x.extend(s.valve_degrees[1..].iter().map(|v| (v - v0) / vs));
                x.push(self.s1.scale(s1));
                x.extend(s.switching_weights[1..].iter().map(|w| (w - s1) / ss));
            }
        }
        Ok(x)
    }

    /// Inverse of [`normalize_schedule`](Self::normalize_schedule). Never
    /// fails on finite input; the result may violate the inequality
    /// constraints (decoded latent points often do).
    pub fn denormalize_schedule(&self, x: &[f64]) -> Result<Schedule> {
        if x.len() != N_VARIABLE {
            return Err(Error::DimensionMismatch {
                expected: N_VARIABLE,
                got: x.len(),
            });
        }
        let v0 = self.v0.unscale(x[0]);
        let s1 = self.s1.unscale(x[N_VALVES]);
        let mut v = [0.0; N_VALVES];
        let mut s = [0.0; N_SWITCHES];
        v[0] = v0;
        s[0] = s1;
        match self.encoding {
            RelativeEncoding::Ratio => {
                for i in 1..N_VALVES {
                    v[i] = x[i] * v0;
                }
                for i in 1..N_SWITCHES {
                    s[i] = x[N_VALVES + i] * s1;
                }
            }
            RelativeEncoding::Difference => {
                let (vs, ss) = (self.diff_scale_v(), self.diff_scale_s());
                for i in 1..N_VALVES {
                    v[i] = v0 + x[i] * vs;
                }
                for i in 1..N_SWITCHES {
                    s[i] = s1 + x[N_VALVES + i] * ss;
                }
            }
        }
        let sched = Schedule {
            valve_degrees: v,
            switching_weights: s,
        };
        sched.ensure_finite()?;
        Ok(sched)
    }

    fn diff_scale_v(&self) -> f64 {
        if self.v0.max > 0.0 {
            self.v0.max
        } else {
            1.0
        }
    }

    fn diff_scale_s(&self) -> f64 {
        if self.s1.max > 0.0 {
            self.s1.max
        } else {
            1.0
        }
    }

    pub fn normalize_setup(&self, t: &TrialSetup) -> Vec<f64> {
        self.normalize_setup_vector(&t.to_vector())
    }

    pub fn normalize_setup_vector(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.fixed).map(|(&v, r)| r.scale(v)).collect()
    }

    pub fn denormalize_setup_vector(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(&self.fixed).map(|(&v, r)| r.unscale(v)).collect()
    }

    pub fn standardize_error(&self, y: f64) -> Result<f64> {
        self.check_std()?;
        Ok((y - self.error_mean) / self.error_std)
    }

    pub fn destandardize_error(&self, z: f64) -> Result<f64> {
        self.check_std()?;
        Ok(z * self.error_std + self.error_mean)
    }

    fn check_std(&self) -> Result<()> {
        if self.error_std > 0.0 && self.error_std.is_finite() {
            Ok(())
        } else {
            Err(Error::DegenerateStatistics(format!(
                "weighing error standard deviation is {}",
                self.error_std
            )))
        }
    }
}

/// Drops trials whose relative error exceeds `max_rel_error` and trials whose
/// schedule violates the inequality constraints.
pub fn remove_outliers(d: &Dataset, max_rel_error: f64) -> (Dataset, usize) {
    let kept: Vec<Trial> = d
        .trials
        .iter()
        .filter(|t| t.relative_error() <= max_rel_error && constraints::check(&t.schedule).is_valid())
        .cloned()
        .collect();
    let removed = d.len() - kept.len();
    (Dataset::new(kept), removed)
}

/// Unique fixed-parameter and variable-parameter rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DedupRows {
    pub setups: Vec<TrialSetup>,
    pub schedules: Vec<Schedule>,
}

fn round_key(xs: &[f64]) -> Vec<i64> {
    let scale = 10f64.powi(DEDUP_DECIMALS);
    xs.iter().map(|x| (x * scale).round() as i64).collect()
}

/// Removes duplicate rows independently in the fixed and variable views,
/// keeping first occurrences.
pub fn dedup(d: &Dataset) -> DedupRows {
    let mut seen_f = HashSet::new();
    let mut seen_v = HashSet::new();
    let mut out = DedupRows::default();
    for t in &d.trials {
        if seen_f.insert(round_key(&t.setup.to_vector())) {
            out.setups.push(t.setup.clone());
        }
        if seen_v.insert(round_key(&t.schedule.to_flat())) {
            out.schedules.push(t.schedule.clone());
        }
    }
    out
}

/// Powders ranked by the Euclidean distance between their normalized setup
/// and the normalized target. A powder with several distinct setups is
/// represented by its closest one.
pub fn rank_powders(d: &Dataset, stats: &NormStats, target: &TrialSetup) -> Vec<(String, f64)> {
    let goal = stats.normalize_setup(target);
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    for t in &d.trials {
        let x = stats.normalize_setup(&t.setup);
        let dist = crate::scalar::distance(&x, &goal);
        best.entry(t.powder_id.as_str())
            .and_modify(|b| *b = b.min(dist))
            .or_insert(dist);
    }
    let mut ranked: Vec<(String, f64)> = best.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    // BTreeMap order is lexicographic; a stable sort keeps that as the tie-break.
    ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
    ranked
}

/// All trials of the `k` powders closest to `target`.
pub fn filter_similar(d: &Dataset, stats: &NormStats, target: &TrialSetup, k: usize) -> Result<Dataset> {
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let chosen: HashSet<String> = rank_powders(d, stats, target)
        .into_iter()
        .take(k)
        .map(|(id, _)| id)
        .collect();
    Ok(Dataset::new(
        d.trials
            .iter()
            .filter(|t| chosen.contains(&t.powder_id))
            .cloned()
            .collect(),
    ))
}

/// Seeded shuffle-and-cut; the first `floor(n · train_fraction)` items go to train.
pub fn split_items<T: Clone>(items: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    if items.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "cannot split {} items",
            items.len()
        )));
    }
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (items.len() as f64 * train_fraction).floor() as usize;
    let train = idx[..n_train].iter().map(|&i| items[i].clone()).collect();
    let test = idx[n_train..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, test))
}

pub fn split(d: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (a, b) = split_items(&d.trials, train_fraction, seed)?;
    Ok((Dataset::new(a), Dataset::new(b)))
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn setup(seed: f64, required: f64) -> TrialSetup {
        let mut p = [0.0; N_PROPERTIES];
        for (k, x) in p.iter_mut().enumerate() {
            *x = seed * (k as f64 + 1.0);
        }
        TrialSetup {
            physical_properties: p,
            required_weight: required,
            valve_diameter: 150,
            input_weight: 150,
            shaking: false,
            vibration: true,
            pre_vibration: false,
        }
    }

    pub fn schedule(v0: f64, s1: f64) -> Schedule {
        let v: Vec<f64> = (0..N_VALVES).map(|i| v0 * (1.0 - i as f64 / 10.0)).collect();
        let s: Vec<f64> = (0..N_SWITCHES).map(|i| s1 * (1.0 - i as f64 / 9.0)).collect();
        Schedule::new(&v, &s).unwrap()
    }

    pub fn trial(id: &str, setup: TrialSetup, schedule: Schedule, err: f64) -> Trial {
        Trial {
            powder_id: id.to_string(),
            setup,
            schedule,
            weighing_error: err,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn small_dataset() -> Dataset {
        Dataset::new(vec![
            trial("P1", setup(1.0, 10.0), schedule(100.0, 5.0), 0.05),
            trial("P1", setup(1.0, 10.0), schedule(120.0, 6.0), 0.30),
            trial("P2", setup(2.0, 18.0), schedule(80.0, 9.0), 0.10),
        ])
    }

    #[test]
    fn csv_round_trip_preserves_count() {
        let d = small_dataset();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back, d);
    }

    #[test]
    fn header_only_file_is_empty_dataset() {
        let text = csv_header().join(",") + "\n";
        let d = Dataset::read_csv(text.as_bytes()).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn bad_cell_reports_row_and_column() {
        let d = small_dataset();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        let mut cells: Vec<String> = lines[2].split(',').map(str::to_string).collect();
        cells[1 + N_FIXED + 3] = "abc".into();
        lines[2] = cells.join(",");
        let err = Dataset::read_csv(lines.join("\n").as_bytes()).unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "v3");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn booleans_are_case_insensitive() {
        let d = small_dataset();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap().replace("true", "TRUE").replace("false", "False");
        let back = Dataset::read_csv(text.as_bytes()).unwrap();
        assert!(back.trials[0].setup.vibration);
        assert!(!back.trials[0].setup.shaking);
    }

    #[test]
    fn wrong_column_count_is_schema_error() {
        let text = "powder_id,a,b\nP,1,2\n";
        assert!(matches!(Dataset::read_csv(text.as_bytes()), Err(Error::Schema(_))));
        let d = small_dataset();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let short = lines[1].rsplit_once(',').unwrap().0.to_string();
        lines[1] = &short;
        assert!(matches!(
            Dataset::read_csv(lines.join("\n").as_bytes()),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn ratio_encoding_examples() {
        let stats = NormStats::fit(&small_dataset(), RelativeEncoding::Ratio).unwrap();
        let mut v = [5.0; N_VALVES];
        v[0] = 10.0;
        v[3] = 2.5;
        let s = Schedule {
            valve_degrees: v,
            switching_weights: [1.0; N_SWITCHES],
        };
        let x = stats.normalize_schedule(&s).unwrap();
        assert_abs_diff_eq!(x[3], 0.25);

        let flat = Schedule {
            valve_degrees: [7.0; N_VALVES],
            switching_weights: [3.0; N_SWITCHES],
        };
        let x = stats.normalize_schedule(&flat).unwrap();
        for i in (1..N_VALVES).chain(N_VALVES + 1..N_VARIABLE) {
            assert_abs_diff_eq!(x[i], 1.0);
        }
    }

    #[test]
    fn degenerate_schedule_rejected() {
        let stats = NormStats::fit(&small_dataset(), RelativeEncoding::Ratio).unwrap();
        let mut s = schedule(10.0, 5.0);
        s.valve_degrees[0] = 0.0;
        assert!(matches!(stats.normalize_schedule(&s), Err(Error::DegenerateSchedule(_))));
        let mut s = schedule(10.0, 5.0);
        s.switching_weights[0] = 0.0;
        assert!(matches!(stats.normalize_schedule(&s), Err(Error::DegenerateSchedule(_))));
    }

    #[test]
    fn schedule_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for encoding in [RelativeEncoding::Ratio, RelativeEncoding::Difference] {
            let stats = NormStats::fit(&small_dataset(), encoding).unwrap();
            for _ in 0..100 {
                let mut v: Vec<f64> = (0..N_VALVES).map(|_| rng.random_range(0.1..150.0)).collect();
                let mut s: Vec<f64> = (0..N_SWITCHES).map(|_| rng.random_range(0.01..10.0)).collect();
                v.sort_by(|a, b| b.partial_cmp(a).unwrap());
                s.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let sched = Schedule::new(&v, &s).unwrap();
                let back = stats
                    .denormalize_schedule(&stats.normalize_schedule(&sched).unwrap())
                    .unwrap();
                for (a, b) in back.to_flat().iter().zip(sched.to_flat()) {
                    assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn setup_min_max_and_constant_dims() {
        let d = small_dataset();
        let stats = NormStats::fit(&d, RelativeEncoding::Ratio).unwrap();
        let lo = stats.normalize_setup(&d.trials[0].setup);
        let hi = stats.normalize_setup(&d.trials[2].setup);
        assert_abs_diff_eq!(lo[0], 0.0);
        assert_abs_diff_eq!(hi[0], 1.0);
        assert_abs_diff_eq!(hi[N_PROPERTIES], 1.0);
        // Valve diameter and the booleans never vary here.
        let mut other = d.trials[0].setup.clone();
        other.valve_diameter = 999;
        other.shaking = true;
        let x = stats.normalize_setup(&other);
        assert_eq!(x[N_PROPERTIES + 1], 0.0);
        assert_eq!(x[N_PROPERTIES + 3], 0.0);
        // Round trip on observed values.
        let back = stats.denormalize_setup_vector(&hi);
        for (a, b) in back.iter().zip(d.trials[2].setup.to_vector()) {
            assert!((a - b).abs() < 1e-9 || stats.fixed.iter().any(|r| r.max == r.min));
        }
    }

    #[test]
    fn boolean_with_both_values_maps_to_one() {
        let mut d = small_dataset();
        d.trials[1].setup.shaking = true;
        let stats = NormStats::fit(&d, RelativeEncoding::Ratio).unwrap();
        let x = stats.normalize_setup(&d.trials[1].setup);
        assert_eq!(x[N_PROPERTIES + 3], 1.0);
    }

    #[test]
    fn standardize_examples() {
        let stats = NormStats::fit(&small_dataset(), RelativeEncoding::Ratio).unwrap();
        assert_abs_diff_eq!(stats.standardize_error(stats.error_mean).unwrap(), 0.0);
        assert_abs_diff_eq!(
            stats.standardize_error(stats.error_mean + stats.error_std).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        let y = 0.1234;
        let back = stats.destandardize_error(stats.standardize_error(y).unwrap()).unwrap();
        assert_abs_diff_eq!(back, y, epsilon = 1e-12);

        let one = Dataset::new(vec![small_dataset().trials[0].clone()]);
        let flat = NormStats::fit(&one, RelativeEncoding::Ratio).unwrap();
        assert!(matches!(flat.standardize_error(0.1), Err(Error::DegenerateStatistics(_))));
    }

    #[test]
    fn outlier_rules() {
        let d = small_dataset();
        let (kept, removed) = remove_outliers(&d, 0.2);
        assert_eq!(removed, 0);
        assert_eq!(kept.len(), 3);

        let mut bad = d.clone();
        bad.trials.push(trial("P3", setup(3.0, 10.0), schedule(50.0, 2.0), 5.0));
        let mut rising = schedule(50.0, 2.0);
        for (i, v) in rising.valve_degrees.iter_mut().enumerate() {
            *v = i as f64 + 1.0;
        }
        bad.trials.push(trial("P3", setup(3.0, 10.0), rising, 0.01));
        let (once, removed) = remove_outliers(&bad, 0.2);
        assert_eq!(removed, 2);
        let (twice, removed_again) = remove_outliers(&once, 0.2);
        assert_eq!(removed_again, 0);
        assert_eq!(once, twice);
    }

    #[test]
    fn dedup_views_are_independent() {
        let t = trial("P1", setup(1.0, 10.0), schedule(100.0, 5.0), 0.05);
        let rows = dedup(&Dataset::new(vec![t.clone(), t.clone()]));
        assert_eq!((rows.setups.len(), rows.schedules.len()), (1, 1));

        let u = trial("P1", setup(1.0, 10.0), schedule(90.0, 5.0), 0.05);
        let rows = dedup(&Dataset::new(vec![t, u]));
        assert_eq!((rows.setups.len(), rows.schedules.len()), (1, 2));
    }

    #[test]
    fn filter_examples() {
        let d = small_dataset();
        let stats = NormStats::fit(&d, RelativeEncoding::Ratio).unwrap();
        let ranked = rank_powders(&d, &stats, &d.trials[2].setup);
        assert_eq!(ranked[0].0, "P2");
        assert_eq!(ranked[0].1, 0.0);
        let all = filter_similar(&d, &stats, &d.trials[0].setup, 7).unwrap();
        assert_eq!(all.powder_ids().len(), 2);
        let one = filter_similar(&d, &stats, &d.trials[0].setup, 1).unwrap();
        assert_eq!(one.powder_ids(), vec!["P1".to_string()]);
        assert!(filter_similar(&Dataset::default(), &stats, &d.trials[0].setup, 7).is_err());
    }

    #[test]
    fn filter_matches_brute_force_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut trials = Vec::new();
        for p in 0..10 {
            let setup = setup(rng.random_range(0.5..3.0), rng.random_range(5.0..20.0));
            for _ in 0..3 {
                trials.push(trial(&format!("P{p:02}"), setup.clone(), schedule(100.0, 5.0), 0.1));
            }
        }
        let d = Dataset::new(trials);
        let stats = NormStats::fit(&d, RelativeEncoding::Ratio).unwrap();
        let target = setup(1.7, 12.0);
        let goal = stats.normalize_setup(&target);
        // Independent brute force: every powder has a single setup here.
        let mut dists: Vec<(f64, String)> = d
            .powder_ids()
            .into_iter()
            .map(|id| {
                let t = d.trials.iter().find(|t| t.powder_id == id).unwrap();
                let x = stats.normalize_setup(&t.setup);
                let dd: f64 = x.iter().zip(&goal).map(|(a, b)| (a - b) * (a - b)).sum();
                (dd.sqrt(), id)
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut expected: Vec<String> = dists.into_iter().take(7).map(|x| x.1).collect();
        expected.sort();
        let mut got = filter_similar(&d, &stats, &target, 7).unwrap().powder_ids();
        got.sort();
        assert_eq!(got, expected);
    }

    #[test]
    fn split_examples() {
        let items: Vec<usize> = (0..10).collect();
        let (a, b) = split_items(&items, 0.7, 3).unwrap();
        assert_eq!((a.len(), b.len()), (7, 3));
        let (a2, b2) = split_items(&items, 0.7, 3).unwrap();
        assert_eq!((a.clone(), b.clone()), (a2, b2));
        let mut all: Vec<usize> = a.into_iter().chain(b).collect();
        all.sort();
        assert_eq!(all, items);
        assert!(split_items(&items[..1], 0.7, 3).is_err());
        assert!(split_items(&items, 1.0, 3).is_err());
    }
}
