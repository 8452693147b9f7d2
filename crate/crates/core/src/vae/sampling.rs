use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::model::LatentDecoder;
use crate::constraints;
use crate::dataset::{NormStats, Schedule};
use crate::error::{Error, Result};

/// `n` points uniform in the `dim`-ball of the given radius.
pub fn sample_latent_sphere(n: usize, radius: f64, dim: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n == 0 || dim == 0 {
        return Err(Error::InvalidInput("need n ≥ 1 and dim ≥ 1".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::InvalidInput("radius must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let len = crate::scalar::norm(&dir);
        if len == 0.0 {
            continue;
        }
        let u: f64 = rng.random();
        let r = radius * u.powf(1.0 / dim as f64);
        out.push(dir.iter().map(|x| x * r / len).collect());
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationCounts {
    pub samples: usize,
    pub nonneg: usize,
    pub monotone: usize,
    pub either: usize,
}

impl ViolationCounts {
    pub fn record(&mut self, s: &Schedule) {
        let r = constraints::check(s);
        self.samples += 1;
        self.nonneg += usize::from(!r.nonneg_ok);
        self.monotone += usize::from(!r.monotone_ok());
        self.either += usize::from(!r.is_valid());
    }
}

/// Decodes `n` ball samples and counts how many break each constraint class.
pub fn violation_sweep(
    decoder: &impl LatentDecoder,
    stats: &NormStats,
    n: usize,
    radius: f64,
    seed: u64,
) -> Result<ViolationCounts> {
    let mut counts = ViolationCounts::default();
    for z in sample_latent_sphere(n, radius, decoder.latent_dim(), seed)? {
        let s = stats.denormalize_schedule(&decoder.decode_latent(&z)?)?;
        counts.record(&s);
    }
    Ok(counts)
}

/// For each latent axis, decodes `points_per_axis` points with that
/// coordinate swept over `[lo, hi]` and the rest held at 0. Axis-major.
pub fn axis_sweep(
    decoder: &impl LatentDecoder,
    stats: &NormStats,
    points_per_axis: usize,
    lo: f64,
    hi: f64,
) -> Result<Vec<Vec<Schedule>>> {
    if !(lo < hi) {
        return Err(Error::InvalidInput(format!("sweep needs lo < hi, got [{lo}, {hi}]")));
    }
    if points_per_axis < 2 {
        return Err(Error::InvalidInput("need at least 2 points per axis".into()));
    }
    let d = decoder.latent_dim();
    let step = (hi - lo) / (points_per_axis - 1) as f64;
    (0..d)
        .map(|axis| {
            (0..points_per_axis)
                .map(|k| {
                    let mut z = vec![0.0; d];
                    z[axis] = if k + 1 == points_per_axis { hi } else { lo + step * k as f64 };
                    stats.denormalize_schedule(&decoder.decode_latent(&z)?)
                })
                .collect()
        })
        .collect()
}

/// Mean pairwise Euclidean distance between decoded schedules; values near
/// zero indicate the decodes no longer depend on the latent code.
pub fn mean_pairwise_distance(schedules: &[Schedule]) -> f64 {
    let flats: Vec<Vec<f64>> = schedules.iter().map(Schedule::to_flat).collect();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..flats.len() {
        for j in i + 1..flats.len() {
            sum += crate::scalar::distance(&flats[i], &flats[j]);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::fixtures::{schedule, setup, trial};
    use crate::dataset::{Dataset, RelativeEncoding};
    use crate::vae::VaeModel;
    use approx::assert_abs_diff_eq;

    struct Fixed(Vec<f64>);

    impl LatentDecoder for Fixed {
        fn latent_dim(&self) -> usize {
            2
        }
        fn decode_latent(&self, _z: &[f64]) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    fn stats() -> NormStats {
        let d = Dataset::new(vec![
            trial("A", setup(1.0, 10.0), schedule(100.0, 5.0), 0.1),
            trial("B", setup(2.0, 10.0), schedule(50.0, 2.0), 0.2),
        ]);
        NormStats::fit(&d, RelativeEncoding::Ratio).unwrap()
    }

    #[test]
    fn ball_samples_contained_and_reproducible() {
        let a = sample_latent_sphere(500, 2.0, 3, 1).unwrap();
        assert!(a.iter().all(|z| crate::scalar::norm(z) <= 2.0));
        assert_eq!(a, sample_latent_sphere(500, 2.0, 3, 1).unwrap());
        assert!(sample_latent_sphere(5, 0.0, 3, 1).is_err());
    }

    #[test]
    fn ball_radial_law() {
        for d in [1usize, 2, 4, 8] {
            let pts = sample_latent_sphere(1000, 2.0, d, 7).unwrap();
            let mean = pts.iter().map(|z| crate::scalar::norm(z)).sum::<f64>() / 1000.0;
            let expected = 2.0 * d as f64 / (d as f64 + 1.0);
            assert!((mean - expected).abs() <= 0.05 * expected, "d={d}: {mean} vs {expected}");
        }
    }

    #[test]
    fn stub_decoders() {
        let st = stats();
        let valid = st.normalize_schedule(&schedule(80.0, 4.0)).unwrap();
        let c = violation_sweep(&Fixed(valid.clone()), &st, 100, 2.0, 0).unwrap();
        assert_eq!((c.nonneg, c.monotone, c.either), (0, 0, 0));

        let mut neg = valid;
        neg[2] = -0.5;
        let c = violation_sweep(&Fixed(neg), &st, 100, 2.0, 0).unwrap();
        assert_eq!(c.nonneg, 100);
        assert_eq!(c.either, 100);
    }

    #[test]
    fn axis_sweep_layout() {
        let st = stats();
        let m = VaeModel::<f64>::new(2, 0.1, 3).unwrap();
        let grid = axis_sweep(&m, &st, 15, -2.0, 2.0).unwrap();
        assert_eq!(grid.len() * grid[0].len(), 30);
        // Point 7 of 15 is the origin on both axes.
        assert_eq!(grid[0][7], grid[1][7]);
        assert!(axis_sweep(&m, &st, 15, 1.0, 1.0).is_err());
        assert!(mean_pairwise_distance(&grid[0]) > 0.0);
        assert_abs_diff_eq!(mean_pairwise_distance(&[grid[0][0].clone(), grid[0][0].clone()]), 0.0);
    }
}
