use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use powderbo::experiments::{self, Baseline, Experiment1Config, Experiment2Config};
use powderbo::pipeline::{self, ModelBundle, ModelConfig};
use powderbo::simulator::{self, GeneratorConfig, Powder};
use powderbo::vae::TrainConfig;
use powderbo::{CandidateStatus, Dataset, Outcome, SessionConfig, SessionState, SimConfig, Strategy, TrialSetup};

#[derive(Parser)]
#[command(name = "powderbo", version, about = "Latent-space Bayesian optimization of weighing schedules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate tuning histories and write them as CSV.
    GenData(GenDataArgs),
    /// Fit the schedule and setup encoders on a history and save the bundle.
    Train(TrainArgs),
    /// Run the HTTP session API.
    Serve(ServeArgs),
    /// Interactive optimization loop in the terminal.
    Optimize(OptimizeArgs),
    /// Constraint-violation sweep over β and latent size.
    Experiment1(Experiment1Args),
    /// Closed-loop runs on the held-out presets against a random baseline.
    Experiment2(Experiment2Args),
}

/// Overrides for [`SimConfig`]; flags take precedence over `--sim-config`.
#[derive(Args, Clone, Debug, Default)]
struct SimFlags {
    /// JSON file with simulator coefficients.
    #[arg(long)]
    sim_config: Option<PathBuf>,
    #[arg(long)]
    base_flow_coeff: Option<f64>,
    #[arg(long)]
    fall_delay: Option<f64>,
    #[arg(long)]
    timestep: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    noise_sigma_pre_vibration: Option<f64>,
    #[arg(long)]
    timeout: Option<f64>,
}

impl SimFlags {
    fn resolve(&self) -> powderbo::Result<SimConfig> {
        let mut c = match &self.sim_config {
            Some(p) => SimConfig::load(p)?,
            None => SimConfig::default(),
        };
        let overrides = [
            (&mut c.base_flow_coeff, self.base_flow_coeff),
            (&mut c.fall_delay, self.fall_delay),
            (&mut c.timestep, self.timestep),
            (&mut c.noise_sigma, self.noise_sigma),
            (&mut c.noise_sigma_pre_vibration, self.noise_sigma_pre_vibration),
            (&mut c.timeout, self.timeout),
        ];
        for (field, v) in overrides {
            if let Some(v) = v {
                *field = v;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Overrides for [`TrainConfig`] and the encoder sizes.
#[derive(Args, Clone, Debug, Default)]
struct ModelFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    validation_fraction: Option<f64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Trials above this relative error are dropped before training.
    #[arg(long)]
    outlier_rel_error: Option<f64>,
}

impl ModelFlags {
    fn apply_train(&self, t: &mut TrainConfig) {
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = self.beta {
            t.beta = v;
        }
        if let Some(v) = self.validation_fraction {
            t.validation_fraction = v;
        }
    }

    fn model_config(&self, seed: u64) -> ModelConfig {
        let mut c = ModelConfig::default();
        self.apply_train(&mut c.train);
        c.train.seed = seed;
        if let Some(v) = self.latent_dim {
            c.latent_dim = v;
        }
        if let Some(v) = self.outlier_rel_error {
            c.outlier_rel_error = v;
        }
        c
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 60)]
    n_powders: usize,
    #[arg(long, default_value_t = 30)]
    mean_trials: usize,
    #[arg(long, default_value_t = 4)]
    max_jobs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the generated powders (latent factors and setups) as JSON.
    #[arg(long)]
    powders_out: Option<PathBuf>,
    #[command(flatten)]
    sim: SimFlags,
}

#[derive(Args)]
struct TrainArgs {
    /// Trial history CSV.
    #[arg(long, short)]
    data: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    /// Directory that `dataset_ref` and `models_ref` are resolved against.
    #[arg(long, default_value = ".")]
    data_dir: PathBuf,
    /// Persist sessions here and reload them on startup.
    #[arg(long)]
    state_dir: Option<PathBuf>,
    /// Seed for sessions created without one.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    A,
    B,
    C,
}

#[derive(Args)]
struct OptimizeArgs {
    /// Trial history CSV.
    #[arg(long, short)]
    data: Option<PathBuf>,
    /// Saved encoder bundle; trained from `--data` when absent.
    #[arg(long)]
    models: Option<PathBuf>,
    /// Target job as a JSON TrialSetup.
    #[arg(long, conflicts_with = "preset")]
    target: Option<PathBuf>,
    /// Use one of the built-in held-out powders as the target.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Continue a saved session instead of creating one.
    #[arg(long, conflicts_with_all = ["data", "models"])]
    resume: Option<PathBuf>,
    /// Where to save the session on exit.
    #[arg(long)]
    save: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelFlags,
    /// Simulator used to answer `sim <strategy>`.
    #[command(flatten)]
    sim: SimFlags,
}

#[derive(Args)]
struct Experiment1Args {
    /// Trial history CSV; a default synthetic history is generated when absent.
    #[arg(long, short)]
    data: Option<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.5, 1.0])]
    betas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [2, 4, 8])]
    latent_dims: Vec<usize>,
    /// Number of training seeds per cell.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 2.0)]
    radius: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    sim: SimFlags,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BaselineArg {
    LatentBox,
    ScheduleBox,
}

#[derive(Args)]
struct Experiment2Args {
    #[arg(long, short)]
    data: Option<PathBuf>,
    #[arg(long)]
    models: Option<PathBuf>,
    /// Per-trial records as CSV.
    #[arg(long, short)]
    out: PathBuf,
    /// Summary as JSON.
    #[arg(long)]
    summary_out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 20)]
    max_trials: usize,
    /// Strategy per trial, cycled.
    #[arg(long, value_delimiter = ',', default_value = "intermediate")]
    policy: Vec<String>,
    #[arg(long, value_enum, default_value = "latent-box")]
    baseline: BaselineArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    sim: SimFlags,
}

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Serve(a) => serve(a),
        Command::Optimize(a) => optimize(a),
        Command::Experiment1(a) => experiment1(a),
        Command::Experiment2(a) => experiment2(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn gen_data(a: GenDataArgs) -> AnyResult<()> {
    let cfg = GeneratorConfig {
        n_powders: a.n_powders,
        mean_trials: a.mean_trials,
        max_jobs: a.max_jobs,
        seed: a.seed,
        ..GeneratorConfig::default()
    };
    let g = simulator::gen_dataset_with(&cfg, &a.sim.resolve()?)?;
    g.dataset.save_csv(&a.out)?;
    if let Some(p) = a.powders_out {
        write_json(&p, &g.powders)?;
    }
    println!("{} trials for {} powders -> {}", g.dataset.len(), g.powders.len(), a.out.display());
    Ok(())
}

/// History from `--data`, or the default synthetic one at `seed`.
fn load_or_generate(data: Option<&Path>, seed: u64, sim: &SimConfig) -> AnyResult<Dataset> {
    Ok(match data {
        Some(p) => Dataset::load_csv(p)?,
        None => {
            let cfg = GeneratorConfig {
                seed,
                ..GeneratorConfig::default()
            };
            simulator::gen_dataset_with(&cfg, sim)?.dataset
        }
    })
}

fn bundle_for(d: &Dataset, models: Option<&Path>, flags: &ModelFlags, seed: u64) -> AnyResult<(ModelBundle, Dataset)> {
    Ok(match models {
        Some(p) => {
            let b = ModelBundle::load(p)?;
            let (cleaned, _, _) = pipeline::clean(d, &b.config)?;
            (b, cleaned)
        }
        None => ModelBundle::fit(d, &flags.model_config(seed))?,
    })
}

fn train(a: TrainArgs) -> AnyResult<()> {
    let d = Dataset::load_csv(&a.data)?;
    let (b, _) = ModelBundle::fit(&d, &a.model.model_config(a.seed))?;
    b.save(&a.out)?;
    let s = &b.summary;
    println!(
        "{} trials, {} outliers, {} setups, {} schedules -> {}",
        s.input_trials,
        s.outliers_removed,
        s.unique_setups,
        s.unique_schedules,
        a.out.display()
    );
    Ok(())
}

fn serve(a: ServeArgs) -> AnyResult<()> {
    let app = Arc::new(powderbo_service::AppState::new(a.data_dir, a.state_dir, a.seed)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.addr).await?;
        log::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, powderbo_service::router(app))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

fn preset(p: Preset) -> Powder {
    let idx = match p {
        Preset::A => 0,
        Preset::B => 1,
        Preset::C => 2,
    };
    simulator::held_out_presets()[idx].clone()
}

fn optimize(a: OptimizeArgs) -> AnyResult<()> {
    let sim = a.sim.resolve()?;
    let mut session = match &a.resume {
        Some(p) => SessionState::load(p)?,
        None => {
            let target: TrialSetup = match (&a.target, a.preset) {
                (Some(p), _) => serde_json::from_reader(std::fs::File::open(p)?)?,
                (None, Some(p)) => preset(p).setup,
                (None, None) => return Err("one of --target, --preset or --resume is required".into()),
            };
            let d = load_or_generate(a.data.as_deref(), a.seed, &sim)?;
            let (b, cleaned) = bundle_for(&d, a.models.as_deref(), &a.model, a.seed)?;
            SessionState::from_models(b, &cleaned, &target, &SessionConfig::default(), a.seed)?
        }
    };
    println!(
        "session {} for {} kg; {} similar trials",
        session.id,
        session.target.required_weight,
        session.base_len()
    );
    println!("commands: <strategy> <error kg> | <strategy> penalize | sim <strategy> | quit");

    let stdin = std::io::stdin();
    let mut lines = stdin.lock().lines();
    loop {
        for c in session.candidates()? {
            println!(
                "  {:<12} κ={:<6} {:<9} acq={:+.3}  v=[{}]  s=[{}]",
                c.strategy.label(),
                c.kappa,
                format!("{:?}", c.status).to_lowercase(),
                c.acquisition,
                fmt_list(&c.schedule.valve_degrees, 1),
                fmt_list(&c.schedule.switching_weights, 2)
            );
        }
        print!("> ");
        std::io::stdout().flush()?;
        let Some(line) = lines.next().transpose()? else {
            break;
        };
        let words: Vec<&str> = line.split_whitespace().collect();
        let (strategy, outcome) = match words.as_slice() {
            [] => continue,
            ["quit" | "q" | "exit"] => break,
            ["sim", name] => {
                let Some(s) = Strategy::parse(name) else {
                    println!("unknown strategy `{name}`");
                    continue;
                };
                let c = session.candidates()?.iter().find(|c| c.strategy == s).cloned().expect("all strategies");
                if c.status == CandidateStatus::Rejected {
                    (s, Outcome::Penalized)
                } else {
                    let noise = powderbo::bayesopt::derive_seed(a.seed, 7000 + session.history.len() as u64);
                    let r = simulator::run_trial_recorded(&c.schedule, &session.target, noise, &sim)?;
                    println!("  simulated: {:.3} kg in {:.1} s", r.final_weight, r.duration);
                    (s, Outcome::Measured(r.weighing_error))
                }
            }
            [name, "penalize" | "p"] => match Strategy::parse(name) {
                Some(s) => (s, Outcome::Penalized),
                None => {
                    println!("unknown strategy `{name}`");
                    continue;
                }
            },
            [name, value] => match (Strategy::parse(name), value.parse::<f64>()) {
                (Some(s), Ok(v)) => (s, Outcome::Measured(v)),
                _ => {
                    println!("expected `<strategy> <error kg>`");
                    continue;
                }
            },
            _ => {
                println!("unrecognized command");
                continue;
            }
        };
        match session.report(strategy.label(), outcome) {
            Ok(s) => println!(
                "  trial {}: {:.2}% (best {:.2}%){}",
                s.history_len,
                100.0 * session.history.last().map_or(f64::NAN, |h| h.relative_error),
                100.0 * s.best_rel_error,
                if s.target_reached { "  target reached" } else { "" }
            ),
            Err(e) => println!("  rejected: {e}"),
        }
    }
    if let Some(p) = &a.save {
        session.save(p)?;
        println!("saved {}", p.display());
    }
    Ok(())
}

fn fmt_list(xs: &[f64], decimals: usize) -> String {
    xs.iter().map(|x| format!("{x:.decimals$}")).collect::<Vec<_>>().join(", ")
}

fn experiment1(a: Experiment1Args) -> AnyResult<()> {
    let sim = a.sim.resolve()?;
    let d = load_or_generate(a.data.as_deref(), a.seed, &sim)?;
    let models = a.model.model_config(a.seed);
    let mut train = TrainConfig::default();
    a.model.apply_train(&mut train);
    let cfg = Experiment1Config {
        betas: a.betas,
        latent_dims: a.latent_dims,
        seeds: (a.seed..a.seed + a.seeds).collect(),
        n_samples: a.samples,
        radius: a.radius,
        train,
    };
    let rows = experiments::run_experiment1(&d, &models, &cfg)?;
    experiments::write_rows(std::fs::File::create(&a.out)?, &rows)?;
    println!("{:>6} {:>4} {:>8}", "beta", "d_v", "median");
    for &beta in &cfg.betas {
        for &dim in &cfg.latent_dims {
            if let Some(m) = experiments::median_violations(&rows, beta, dim) {
                println!("{beta:>6} {dim:>4} {m:>8.1}");
            }
        }
    }
    Ok(())
}

fn experiment2(a: Experiment2Args) -> AnyResult<()> {
    let sim = a.sim.resolve()?;
    let d = load_or_generate(a.data.as_deref(), a.seed, &sim)?;
    let (b, cleaned) = bundle_for(&d, a.models.as_deref(), &a.model, a.seed)?;
    let policy = a
        .policy
        .iter()
        .map(|s| Strategy::parse(s).ok_or_else(|| format!("unknown strategy `{s}`")))
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = Experiment2Config {
        max_trials: a.max_trials,
        policy,
        seeds: (a.seed..a.seed + a.seeds).collect(),
        sim,
        baseline: match a.baseline {
            BaselineArg::LatentBox => Baseline::LatentBox,
            BaselineArg::ScheduleBox => Baseline::ScheduleBox,
        },
        ..Experiment2Config::default()
    };
    let report = experiments::run_experiment2(&b, &cleaned, &simulator::held_out_presets(), &cfg)?;
    experiments::write_rows(std::fs::File::create(&a.out)?, &report.records())?;
    if let Some(p) = &a.summary_out {
        write_json(p, &(&report.bo, &report.random))?;
    }
    for m in [&report.bo, &report.random] {
        println!(
            "{:<7} reached {}/{}  mean trials {:.2}  penalties {}",
            format!("{:?}", m.method),
            m.reached,
            m.runs,
            m.mean_trials_to_target,
            m.penalties
        );
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> AnyResult<()> {
    serde_json::to_writer_pretty(std::io::BufWriter::new(std::fs::File::create(path)?), value)?;
    Ok(())
}
