//! End-to-end acceptance checks. Run with `cargo test --test acceptance`;
//! prints one line per check and exits nonzero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use powderbo::bayesopt::{self, BoundingBox, ProposalConfig};
use powderbo::constraints;
use powderbo::experiments::{self, Experiment1Config, Experiment2Config, Method};
use powderbo::gpr::{FitOptions, GprModel, KernelParams};
use powderbo::linalg::Matrix;
use powderbo::pipeline::{ModelBundle, ModelConfig};
use powderbo::session::{create_session, SessionConfig, SessionState, TARGET_REL_ERROR};
use powderbo::simulator::{
    gen_dataset, gen_dataset_with, gen_powder, random_schedule, held_out_presets, GeneratorConfig, SimConfig,
    Simulation,
};
use powderbo::vae::{kl_divergence, TrainConfig, VaeModel};
use powderbo::Candidate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(t: Instant, budget: Duration) -> Result<(), String> {
    let e = t.elapsed();
    ensure(e < budget, || format!("took {e:.1?}, budget {budget:?}"))
}

fn vae_gradients() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut m = VaeModel::<f64>::new(2, 0.1, 3).map_err(|e| e.to_string())?;
    for p in m.parameters_mut() {
        *p = rng.random_range(-0.8..0.8);
    }
    let batch = Matrix::from_row_major(4, 19, (0..76).map(|_| rng.random_range(-1.0..1.0)).collect());
    let eps = m.draw_noise(4, &mut rng);
    let beta = 0.5;
    let (_, grads) = m.loss_and_gradients(&batch, beta, &eps).map_err(|e| e.to_string())?;
    let analytic: Vec<f64> = grads.values().copied().collect();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (k, &a) in analytic.iter().enumerate() {
        let mut plus = m.clone();
        *plus.parameters_mut().nth(k).expect("parameter index") += h;
        let mut minus = m.clone();
        *minus.parameters_mut().nth(k).expect("parameter index") -= h;
        let fp = plus.loss_with_noise(&batch, beta, &eps).map_err(|e| e.to_string())?.total;
        let fm = minus.loss_with_noise(&batch, beta, &eps).map_err(|e| e.to_string())?.total;
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    ensure(worst < 1e-4, || format!("worst relative error {worst:.2e}"))?;
    within_budget(t, Duration::from_secs(10))?;
    Ok(format!("{} parameters, worst relative error {worst:.2e}", analytic.len()))
}

fn kl_closed_form() -> Outcome {
    let v: f64 = kl_divergence(&[1.0, 0.0], &[0.0, 0.0]);
    ensure((v - 0.5).abs() <= 1e-12, || format!("kl((1,0), 0) = {v}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut min = f64::INFINITY;
    for _ in 0..1000 {
        let d = rng.random_range(1..=8);
        let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let logvar: Vec<f64> = (0..d).map(|_| rng.random_range(-6.0..6.0)).collect();
        min = min.min(kl_divergence(&mean, &logvar));
    }
    ensure(min >= 0.0, || format!("negative kl {min}"))?;
    Ok(format!("kl((1,0), 0) = {v}, min over 1000 random heads {min:.3e}"))
}

fn violation_trend() -> Outcome {
    let t = Instant::now();
    let d = gen_dataset(60, 30, 0).map_err(|e| e.to_string())?;
    let models = ModelConfig::default();
    let base = Experiment1Config {
        seeds: (0..5).collect(),
        n_samples: 1000,
        radius: 2.0,
        train: TrainConfig::default(),
        ..Experiment1Config::default()
    };
    let betas = vec![0.1, 0.5, 1.0];
    let mut rows = experiments::run_experiment1(
        &d,
        &models,
        &Experiment1Config {
            betas: betas.clone(),
            latent_dims: vec![2],
            ..base.clone()
        },
    )
    .map_err(|e| e.to_string())?;
    rows.extend(
        experiments::run_experiment1(
            &d,
            &models,
            &Experiment1Config {
                betas: vec![0.1],
                latent_dims: vec![8],
                ..base
            },
        )
        .map_err(|e| e.to_string())?,
    );
    let med = |b: f64, dim: usize| experiments::median_violations(&rows, b, dim).expect("cell present");
    let by_beta: Vec<f64> = betas.iter().map(|&b| med(b, 2)).collect();
    let big = med(0.1, 8);
    let detail = format!("d_v=2 medians {by_beta:?} for β {betas:?}; d_v=8 at β=0.1: {big}");
    ensure(by_beta.windows(2).all(|w| w[1] <= w[0]), || format!("not nonincreasing in β: {detail}"))?;
    ensure(big >= by_beta[0], || format!("d_v=8 below d_v=2 at β=0.1: {detail}"))?;
    within_budget(t, Duration::from_secs(600))?;
    Ok(detail)
}

/// Exact projection onto `x_1 ≥ … ≥ x_n ≥ 0` by enumerating active sets:
/// every split into contiguous blocks, each block at its mean, and the last
/// block optionally pinned to zero. The best feasible candidate is the optimum.
fn projection_oracle(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for cuts in 0u32..(1 << (n - 1)) {
        let mut blocks = Vec::new();
        let mut start = 0;
        for i in 0..n {
            if i == n - 1 || cuts & (1 << i) != 0 {
                blocks.push(start..i + 1);
                start = i + 1;
            }
        }
        for pin_last in [false, true] {
            let mut p = vec![0.0; n];
            for (bi, r) in blocks.iter().enumerate() {
                let mean = xs[r.clone()].iter().sum::<f64>() / r.len() as f64;
                let v = if pin_last && bi == blocks.len() - 1 { 0.0 } else { mean };
                p[r.clone()].iter_mut().for_each(|x| *x = v);
            }
            let feasible = p.windows(2).all(|w| w[0] >= w[1] - 1e-12) && p[n - 1] >= -1e-12;
            if !feasible {
                continue;
            }
            let dist: f64 = p.iter().zip(xs).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.as_ref().is_none_or(|(d, _)| dist < *d) {
                best = Some((dist, p));
            }
        }
    }
    best.expect("the zero vector is always feasible").1
}

fn projection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=6);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..10.0)).collect();
        let p = constraints::project_sequence(&xs);
        let o = projection_oracle(&xs);
        let d = p.iter().zip(&o).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        worst = worst.max(d);
    }
    ensure(worst <= 1e-6, || format!("max distance to oracle {worst:.2e}"))?;
    for _ in 0..1000 {
        let xs: Vec<f64> = (0..10).map(|_| rng.random_range(-50.0..150.0)).collect();
        let p = constraints::project_sequence(&xs);
        ensure(p.windows(2).all(|w| w[0] >= w[1]) && p.iter().all(|&v| v >= 0.0), || {
            format!("infeasible projection of {xs:?}: {p:?}")
        })?;
        ensure(constraints::project_sequence(&p) == p, || format!("projection of {xs:?} not idempotent"))?;
    }
    Ok(format!("max distance to active-set oracle {worst:.2e}; 1000 length-10 vectors feasible and idempotent"))
}

/// Log marginal likelihood with a sample-mean prior mean, written out directly.
fn lml_reference(x: &[Vec<f64>], y: &[f64], p: &KernelParams<f64>) -> Option<f64> {
    let n = x.len();
    let mean = y.iter().sum::<f64>() / n as f64;
    let r: Vec<f64> = y.iter().map(|v| v - mean).collect();
    let mut k = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let d2: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            let rho = d2.sqrt() / p.matern_lengthscale;
            let s5 = 5f64.sqrt();
            let matern = (1.0 + s5 * rho + 5.0 / 3.0 * rho * rho) * (-s5 * rho).exp();
            let s: f64 = x[i]
                .iter()
                .zip(&x[j])
                .zip(&p.ard_lengthscales)
                .map(|((a, b), l)| ((a - b) / l).powi(2))
                .sum();
            k[i][j] = p.w_matern * matern + p.w_ard * (-0.5 * s).exp();
        }
        k[i][i] += p.noise_variance;
    }
    // Cholesky, lower triangle.
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|m| l[i][m] * l[j][m]).sum();
            if i == j {
                let d = k[i][i] - s;
                if d <= 0.0 {
                    return None;
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (k[i][j] - s) / l[j][j];
            }
        }
    }
    let mut z = vec![0.0; n];
    for i in 0..n {
        z[i] = (r[i] - (0..i).map(|m| l[i][m] * z[m]).sum::<f64>()) / l[i][i];
    }
    let quad: f64 = z.iter().map(|v| v * v).sum();
    let logdet: f64 = (0..n).map(|i| l[i][i].ln()).sum::<f64>() * 2.0;
    Some(-0.5 * quad - 0.5 * logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())
}

fn gpr_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // Smooth noiseless target on 20 points.
    let x: Vec<Vec<f64>> = (0..20)
        .map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
        .collect();
    let y: Vec<f64> = x.iter().map(|p| (1.3 * p[0]).sin() + 0.5 * (0.7 * p[1]).cos() + 0.2 * p[0] * p[1]).collect();
    let g = GprModel::fit(x.clone(), y.clone(), 1).map_err(|e| e.to_string())?;
    let mut interp = 0.0f64;
    for (xi, yi) in x.iter().zip(&y) {
        interp = interp.max((g.predict(xi).map_err(|e| e.to_string())?.0 - yi).abs());
    }
    ensure(interp <= 1e-3, || format!("interpolation residual {interp:.2e}"))?;

    // Variance is smaller at data than far away.
    for k in 0..100 {
        let n = rng.random_range(3..15);
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = GprModel::fit_with(x.clone(), y, k, &FitOptions { restarts: 2, max_iters: 50 }, None)
            .map_err(|e| e.to_string())?;
        let near = g.predict(&x[0]).map_err(|e| e.to_string())?.1;
        let far = g.predict(&[50.0, -50.0]).map_err(|e| e.to_string())?.1;
        ensure(near < far, || format!("fit {k}: σ at data {near} ≥ σ far {far}"))?;
    }

    // Fitted likelihood against a grid over the hyperparameter box.
    let bounds = KernelParams::<f64>::log_bounds(1);
    let per_axis: usize = 9;
    let mut worst_gap = f64::NEG_INFINITY;
    for k in 0..8u64 {
        let n = rng.random_range(4..=8);
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(0.0..3.0)]).collect();
        let y: Vec<f64> = x.iter().map(|p| p[0].sin() + rng.random_range(-0.1..0.1)).collect();
        let g = GprModel::fit(x.clone(), y.clone(), k).map_err(|e| e.to_string())?;
        let fitted = lml_reference(&x, &y, g.params()).ok_or("fitted kernel not positive definite")?;
        let mut grid_best = f64::NEG_INFINITY;
        let total = per_axis.pow(bounds.len() as u32);
        for idx in 0..total {
            let mut rem = idx;
            let theta: Vec<f64> = bounds
                .iter()
                .map(|&(lo, hi)| {
                    let i = rem % per_axis;
                    rem /= per_axis;
                    lo + (hi - lo) * i as f64 / (per_axis - 1) as f64
                })
                .collect();
            if let Some(v) = lml_reference(&x, &y, &KernelParams::from_log(&theta)) {
                grid_best = grid_best.max(v);
            }
        }
        let gap = (grid_best - fitted) / grid_best.abs();
        worst_gap = worst_gap.max(gap);
        ensure(gap <= 0.01, || format!("n={n}: fitted lml {fitted:.4} vs grid {grid_best:.4}"))?;
    }
    Ok(format!(
        "interpolation residual {interp:.1e}; variance ordering 100/100; worst lml shortfall vs grid {:.2}%",
        100.0 * worst_gap.max(0.0)
    ))
}

fn acquisition_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for inst in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + inst);
        let n = rng.random_range(8..20);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
            .collect();
        let (a, b) = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
        let y: Vec<f64> = x.iter().map(|p| -((p[0] - a).powi(2) + (p[1] - b).powi(2)) + 0.1 * p[0]).collect();
        let g = GprModel::fit(x.clone(), y, inst).map_err(|e| e.to_string())?;
        let bbox = BoundingBox::from_points(&x).map_err(|e| e.to_string())?;
        let (z, ..) = bayesopt::maximize_acquisition(&g, &bbox, &[], 0.0, &ProposalConfig::default(), inst)
            .map_err(|e| e.to_string())?;
        let mut best = (f64::NEG_INFINITY, vec![0.0, 0.0]);
        for i in 0..200 {
            for j in 0..200 {
                let p = vec![
                    bbox.lo[0] + bbox.width(0) * i as f64 / 199.0,
                    bbox.lo[1] + bbox.width(1) * j as f64 / 199.0,
                ];
                let mu = g.predict(&p).map_err(|e| e.to_string())?.0;
                if mu > best.0 {
                    best = (mu, p);
                }
            }
        }
        let d = ((z[0] - best.1[0]).powi(2) + (z[1] - best.1[1]).powi(2)).sqrt();
        worst = worst.max(d);
        ensure(d <= 0.05, || format!("instance {inst}: proposal {z:?} vs grid argmax {:?}", best.1))?;
    }
    Ok(format!("10 instances, max distance to grid argmax {worst:.4}"))
}

fn closed_loop() -> Outcome {
    let t = Instant::now();
    let sim = SimConfig::default();
    let g = gen_dataset_with(&GeneratorConfig::default(), &sim).map_err(|e| e.to_string())?;
    let (models, cleaned) = ModelBundle::fit(&g.dataset, &ModelConfig::default()).map_err(|e| e.to_string())?;
    let presets = held_out_presets();
    let cfg = Experiment2Config::default();
    let rep = experiments::run_experiment2(&models, &cleaned, &presets, &cfg).map_err(|e| e.to_string())?;

    let fixed_seed = cfg.seeds[0];
    let within = rep
        .runs
        .iter()
        .filter(|r| r.method == Method::Bo && r.seed == fixed_seed)
        .filter(|r| r.trials_to_target.is_some_and(|k| k <= 10))
        .count();
    let ratio = rep.bo.mean_trials_to_target / rep.random.mean_trials_to_target;
    let detail = format!(
        "{} trials; seed {fixed_seed}: {within}/3 powders under {:.0}% within 10 trials; \
         mean trials BO {:.2} vs random {:.2} (ratio {ratio:.2}) over {} seeds ({:.0?})",
        g.dataset.len(),
        100.0 * TARGET_REL_ERROR,
        rep.bo.mean_trials_to_target,
        rep.random.mean_trials_to_target,
        cfg.seeds.len(),
        t.elapsed()
    );
    ensure(within >= 2, || detail.clone())?;
    ensure(ratio <= 0.5, || detail.clone())?;
    within_budget(t, Duration::from_secs(900))?;
    Ok(detail)
}

fn same_bits(a: &[Candidate], b: &[Candidate]) -> bool {
    let bits = |c: &[Candidate]| -> Vec<u64> {
        c.iter()
            .flat_map(|c| c.schedule.to_flat().into_iter().chain(c.latent.iter().copied()))
            .map(f64::to_bits)
            .collect()
    };
    a.len() == b.len() && bits(a) == bits(b)
}

fn determinism() -> Outcome {
    let d = gen_dataset(30, 20, 8).map_err(|e| e.to_string())?;
    let target = &held_out_presets()[0].setup;
    let cfg = SessionConfig::default();
    let mut a = create_session(&d, target, &cfg, 42).map_err(|e| e.to_string())?;
    let mut b = create_session(&d, target, &cfg, 42).map_err(|e| e.to_string())?;
    let ca = a.candidates().map_err(|e| e.to_string())?.to_vec();
    let cb = b.candidates().map_err(|e| e.to_string())?.to_vec();
    ensure(same_bits(&ca, &cb), || "two sessions with the same seed disagree".into())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("session.json");
    a.save(&path).map_err(|e| e.to_string())?;
    let mut loaded = SessionState::load(&path).map_err(|e| e.to_string())?;
    let cl = loaded.candidates().map_err(|e| e.to_string())?.to_vec();
    ensure(same_bits(&ca, &cl), || "reloaded session proposes different candidates".into())?;
    Ok("identical candidate bits across two builds and across save/load".into())
}

fn simulator_invariants() -> Outcome {
    let cfg = SimConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut steps = 0u64;
    let mut worst = 0.0f64;
    for k in 0..500u64 {
        let setup = gen_powder(k).setup;
        let s = random_schedule(&setup, &mut rng);
        let mut sim = Simulation::new(&s, &setup, k, &cfg).map_err(|e| e.to_string())?;
        let mut last = sim.measured();
        while !sim.is_finished() && sim.time() < cfg.timeout {
            sim.step();
            steps += 1;
            let gap = (sim.released() - sim.measured() - sim.in_flight()).abs();
            worst = worst.max(gap);
            ensure(gap <= 1e-9, || format!("schedule {k}: mass gap {gap:.2e}"))?;
            ensure(sim.measured() >= last, || format!("schedule {k}: scale reading decreased"))?;
            last = sim.measured();
        }
    }
    Ok(format!("500 schedules, {steps} steps, max mass gap {worst:.1e}, readings nondecreasing"))
}

fn main() -> ExitCode {
    let checks: [Check; 9] = [
        ("vae gradients match finite differences", vae_gradients),
        ("kl closed form", kl_closed_form),
        ("constraint violations fall with beta", violation_trend),
        ("projection matches active-set oracle", projection),
        ("gp interpolation, variance, likelihood", gpr_checks),
        ("acquisition maximizer matches grid", acquisition_oracle),
        ("closed loop beats random search", closed_loop),
        ("sessions are deterministic", determinism),
        ("simulator conserves mass", simulator_invariants),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| *f == n.to_string() || name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        match check() {
            Ok(detail) => println!("[PASS] {n}. {name}: {detail} [{:.1?}]", t.elapsed()),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {n}. {name}: {why} [{:.1?}]", t.elapsed());
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
