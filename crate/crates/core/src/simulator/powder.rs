//! Synthetic powders.
//!
//! Each powder is driven by two hidden factors in [0, 1]: `fluidity`
//! (free flowing, aerates easily) and `coarseness` (large, dense grains).
//! Every property is a fixed linear blend of the two, mapped into its range
//! and blurred with a little independent noise, so the property block is
//! close to rank two the way real characterization tables are.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{TrialSetup, N_PROPERTIES};

pub(super) const COMPRESSIBILITY: usize = 3;
pub(super) const FLOWABILITY: usize = 6;
pub(super) const JETTING: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PropertyRange {
    pub name: &'static str,
    pub min: f64,
    pub max: f64,
}

impl PropertyRange {
    pub fn unit(&self, x: f64) -> f64 {
        ((x - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
    }

    fn at(&self, u: f64) -> f64 {
        self.min + u.clamp(0.0, 1.0) * (self.max - self.min)
    }
}

/// Declared property ranges, in dataset column order. Version 1.
pub const PROPERTY_RANGES: [PropertyRange; N_PROPERTIES] = [
    PropertyRange { name: "particle_size_um", min: 5.0, max: 300.0 },
    PropertyRange { name: "bulk_density_loose", min: 0.2, max: 1.2 },
    PropertyRange { name: "bulk_density_firm", min: 0.3, max: 1.5 },
    PropertyRange { name: "compressibility_pct", min: 5.0, max: 50.0 },
    PropertyRange { name: "angle_of_repose_deg", min: 25.0, max: 60.0 },
    PropertyRange { name: "spatula_angle_deg", min: 30.0, max: 80.0 },
    PropertyRange { name: "flowability_index", min: 20.0, max: 95.0 },
    PropertyRange { name: "collapse_angle_deg", min: 10.0, max: 50.0 },
    PropertyRange { name: "difference_angle_deg", min: 5.0, max: 30.0 },
    PropertyRange { name: "dispersion_pct", min: 0.0, max: 60.0 },
    PropertyRange { name: "jetting_index", min: 20.0, max: 95.0 },
];

/// `(offset, fluidity weight, coarseness weight)` per property, on the unit scale.
const LOADINGS: [(f64, f64, f64); N_PROPERTIES] = [
    (0.05, 0.0, 0.9),
    (0.1, 0.3, 0.5),
    (0.1, 0.2, 0.6),
    (0.95, -0.8, -0.1),
    (0.95, -0.7, -0.2),
    (0.9, -0.6, -0.2),
    (0.05, 0.9, 0.0),
    (0.9, -0.8, 0.0),
    (0.2, 0.6, -0.1),
    (0.4, 0.5, -0.4),
    (0.1, 0.8, 0.05),
];

const PROPERTY_NOISE: f64 = 0.03;

/// Machine settings a job may use.
const REQUIRED_WEIGHTS: [f64; 6] = [5.0, 8.0, 10.0, 12.0, 15.0, 18.0];
const VALVE_DIAMETERS: [u32; 3] = [100, 150, 200];
const INPUT_WEIGHTS: [u32; 4] = [150, 200, 300, 500];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Powder {
    pub id: String,
    pub fluidity: f64,
    pub coarseness: f64,
    /// Typical job for this powder; `gen_dataset` varies the required weight.
    pub setup: TrialSetup,
}

impl Powder {
    pub fn properties(&self) -> &[f64; N_PROPERTIES] {
        &self.setup.physical_properties
    }

    /// Same powder weighed with a different job.
    pub fn with_job(&self, required_weight: f64, input_weight: u32) -> TrialSetup {
        TrialSetup {
            required_weight,
            input_weight: input_weight.max(required_weight.ceil() as u32),
            ..self.setup.clone()
        }
    }
}

fn properties(fluidity: f64, coarseness: f64, jitter: impl Fn(usize) -> f64) -> [f64; N_PROPERTIES] {
    let mut p = [0.0; N_PROPERTIES];
    for (k, x) in p.iter_mut().enumerate() {
        let (c, a, b) = LOADINGS[k];
        *x = PROPERTY_RANGES[k].at(c + a * fluidity + b * coarseness + jitter(k));
    }
    p
}

/// Noise-free powder at the given hidden factors.
pub fn powder_from_factors(id: &str, fluidity: f64, coarseness: f64, setup: TrialSetup) -> Powder {
    Powder {
        id: id.to_string(),
        fluidity,
        coarseness,
        setup: TrialSetup {
            physical_properties: properties(fluidity, coarseness, |_| 0.0),
            ..setup
        },
    }
}

/// Random powder and a typical job. Vibration is usually on; shaking and
/// pre-vibration usually off.
pub fn gen_powder(seed: u64) -> Powder {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fluidity: f64 = rng.random_range(0.0..1.0);
    let coarseness: f64 = rng.random_range(0.0..1.0);
    let noise: Vec<f64> = (0..N_PROPERTIES)
        .map(|_| PROPERTY_NOISE * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let required_weight = REQUIRED_WEIGHTS[rng.random_range(0..REQUIRED_WEIGHTS.len())];
    let valve_diameter = if rng.random_bool(0.6) {
        150
    } else {
        VALVE_DIAMETERS[rng.random_range(0..VALVE_DIAMETERS.len())]
    };
    let input_weight = INPUT_WEIGHTS[rng.random_range(0..INPUT_WEIGHTS.len())];
    let setup = TrialSetup {
        physical_properties: properties(fluidity, coarseness, |k| noise[k]),
        required_weight,
        valve_diameter,
        input_weight,
        shaking: rng.random_bool(0.1),
        vibration: rng.random_bool(0.85),
        pre_vibration: rng.random_bool(0.1),
    };
    Powder {
        id: format!("P{seed:03}"),
        fluidity,
        coarseness,
        setup,
    }
}

/// Three held-out powders with the machine settings of the evaluation jobs:
/// A and B flow more freely than C, and grain size falls from A to C.
pub fn held_out_presets() -> [Powder; 3] {
    let job = |required_weight: f64, input_weight: u32| TrialSetup {
        physical_properties: [0.0; N_PROPERTIES],
        required_weight,
        valve_diameter: 150,
        input_weight,
        shaking: false,
        vibration: true,
        pre_vibration: false,
    };
    [
        powder_from_factors("A", 0.8, 0.85, job(10.0, 150)),
        powder_from_factors("B", 0.85, 0.6, job(18.0, 500)),
        powder_from_factors("C", 0.55, 0.4, job(10.0, 200)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_in_range() {
        assert_eq!(gen_powder(11), gen_powder(11));
        assert_ne!(gen_powder(11), gen_powder(12));
        for seed in 0..300 {
            let p = gen_powder(seed);
            p.setup.validate().unwrap();
            for (x, r) in p.properties().iter().zip(&PROPERTY_RANGES) {
                assert!((r.min..=r.max).contains(x), "{} = {x}", r.name);
            }
        }
    }

    #[test]
    fn presets_match_evaluation_jobs() {
        let [a, b, c] = held_out_presets();
        let row = |p: &Powder| {
            let s = &p.setup;
            (s.valve_diameter, s.required_weight, s.input_weight, s.shaking, s.vibration, s.pre_vibration)
        };
        assert_eq!(row(&a), (150, 10.0, 150, false, true, false));
        assert_eq!(row(&b), (150, 18.0, 500, false, true, false));
        assert_eq!(row(&c), (150, 10.0, 200, false, true, false));
        let size = |p: &Powder| p.properties()[0];
        assert!(size(&a) > size(&b) && size(&b) > size(&c));
        let flow = |p: &Powder| p.properties()[FLOWABILITY];
        assert!(flow(&a) > flow(&c) && flow(&b) > flow(&c));
    }

    #[test]
    fn with_job_keeps_supply_sufficient() {
        let s = gen_powder(1).with_job(18.0, 10);
        s.validate().unwrap();
        assert_eq!(s.input_weight, 18);
    }
}
