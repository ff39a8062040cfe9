//! `rl gen-data|train-idm|train-planner|eval|sweep|probe`.
//!
//! Every task reads the whole configuration, so one file drives the
//! pipeline. Artifacts default to the output directory and can be pointed
//! elsewhere with `data.file`, `idm.file` and `planner.file`.

use std::path::PathBuf;

use super::config::RunConfig;
use super::csv_out::CsvOut;
use super::toy::{drive, read_train};
use super::{start, svg, Base, RlTask};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::fm::{TrainConfig, Trainer};
use crate::nn::{Activation, VelocityModel};
use crate::par::{stream_rng, try_map_range, Execution};
use crate::rl::dataset::DEFAULT_GAMMA;
use crate::rl::planner::{planner_model_config, planner_normalization, DEFAULT_HORIZON};
use crate::rl::{
    evaluate, generate_dataset, ood_probe, train_idm, EvalConfig, IdmConfig, InverseDynamics, OfflineDataset, Planner, Preset,
    RtgRule, WindowData,
};
use crate::sampler::{GuidanceConfig, Solver};
use crate::stats::{mean, sem};

pub const EPISODE_SCHEMA: &str = "gflow.rl-episodes.v1";
pub const EPISODE_HEADER: [&str; 10] =
    ["seed", "episode", "omega", "init_scale", "n_ode", "solver", "nfe", "target_rtg", "rule", "return"];
pub const SWEEP_SCHEMA: &str = "gflow.rl-sweep.v1";
pub const SWEEP_HEADER: [&str; 9] = ["omega", "init_scale", "n_ode", "nfe", "target_rtg", "episodes", "mean_return", "sem_return", "seeds"];
pub const DATASET_SCHEMA: &str = "gflow.rl-dataset.v1";
pub const DATASET_HEADER: [&str; 5] = ["episode", "policy_noise", "return", "discounted_return", "validation"];
pub const IDM_SCHEMA: &str = "gflow.rl-idm.v1";
pub const IDM_HEADER: [&str; 3] = ["step", "train_loss", "val_loss"];
pub const PROBE_SCHEMA: &str = "gflow.rl-probe.v1";
pub const PROBE_HEADER: [&str; 9] = [
    "omega",
    "init_scale",
    "n_ode",
    "target_rtg",
    "windows",
    "generated_smoothness",
    "real_smoothness",
    "generated_dynamics_error",
    "real_dynamics_error",
];

struct Settings {
    base: Base,
    data_file: PathBuf,
    preset: Preset,
    episodes: usize,
    gamma: f64,
    idm_file: PathBuf,
    idm: IdmConfig,
    planner_file: PathBuf,
    horizon: usize,
    widths: Vec<usize>,
    activation: Activation,
    time_embed_dim: usize,
    train: TrainConfig,
    resume: Option<String>,
    eval: EvalSettings,
    sweep_omegas: Vec<f64>,
    sweep_n_odes: Vec<usize>,
    sweep_init_scales: Vec<f64>,
    probe_windows: usize,
}

struct EvalSettings {
    guidance: GuidanceConfig,
    target_rtg: f64,
    rule: RtgRule,
    episodes: usize,
    seeds: Vec<u64>,
}

impl Settings {
    fn read(cfg: &mut RunConfig) -> Result<Self> {
        let base = Base::read(cfg)?;
        let file = |cfg: &mut RunConfig, key: &str, name: &str| -> Result<PathBuf> {
            Ok(cfg.optional::<String>(key)?.map(PathBuf::from).unwrap_or_else(|| base.path(name)))
        };
        let data_file = file(cfg, "data.file", "dataset.gflow")?;
        let preset = cfg.get("data.preset", "medium-replay".to_string())?.parse()?;
        let episodes = cfg.get("data.episodes", 1000usize)?;
        let gamma = cfg.get("data.gamma", DEFAULT_GAMMA)?;
        if episodes == 0 {
            return Err(Error::Config("data.episodes must be positive".into()));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Config(format!("data.gamma must lie in (0, 1], got {gamma}")));
        }

        let idm_file = file(cfg, "idm.file", "idm.gflow")?;
        let d = IdmConfig::default();
        let idm = IdmConfig {
            widths: cfg.list("idm.widths", &d.widths)?,
            activation: cfg.get("idm.activation", d.activation)?,
            dropout: cfg.get("idm.dropout", d.dropout)?,
            lr: cfg.get("idm.lr", d.lr)?,
            iterations: cfg.get("idm.iterations", d.iterations)?,
            batch_size: cfg.get("idm.batch_size", d.batch_size)?,
            eval_every: cfg.get("idm.eval_every", d.eval_every)?,
            seed: base.seed,
        };
        idm.validate()?;

        let planner_file = file(cfg, "planner.file", "planner.gflow")?;
        let horizon = cfg.get("planner.horizon", DEFAULT_HORIZON)?;
        let widths = cfg.list("planner.widths", &[512, 512, 512])?;
        let activation = cfg.get("planner.activation", Activation::Mish)?;
        let time_embed_dim = cfg.get("planner.time_embed_dim", 32usize)?;
        let defaults = TrainConfig { iterations: 100_000, batch_size: 64, lr: 2e-4, ..Default::default() };
        let train = read_train(cfg, "planner", &base, defaults)?;
        let resume = cfg.optional("planner.resume")?;
        planner_model_config(horizon, widths.clone(), activation, time_embed_dim, base.scheduler).validate()?;

        let guidance = GuidanceConfig {
            omega: cfg.get("eval.omega", 1.0)?,
            n_ode: cfg.get("eval.n_ode", 10usize)?,
            solver: cfg.get("eval.solver", Solver::Euler)?,
            init_scale: cfg.get("eval.init_scale", 1.0)?,
        };
        guidance.validate()?;
        let eval = EvalSettings {
            guidance,
            target_rtg: cfg.get("eval.target_rtg", 0.0)?,
            rule: cfg.get("eval.rule", RtgRule::Constant)?,
            episodes: cfg.get("eval.episodes", 20usize)?,
            seeds: cfg.list("eval.seeds", &[0u64, 1, 2, 3, 4])?,
        };
        if eval.episodes == 0 {
            return Err(Error::Config("eval.episodes must be positive".into()));
        }
        let sweep_omegas = cfg.list("sweep.omegas", &[1.0, 1.5, 2.0, 2.5])?;
        let sweep_n_odes = cfg.list("sweep.n_ode", &[2usize, 5, 10, 25, 50, 100, 200])?;
        let sweep_init_scales = cfg.list("sweep.init_scales", &[0.1, 1.0])?;
        for &n_ode in &sweep_n_odes {
            GuidanceConfig { n_ode, ..guidance }.validate()?;
        }
        for &init_scale in &sweep_init_scales {
            GuidanceConfig { init_scale, ..guidance }.validate()?;
        }
        for &omega in &sweep_omegas {
            GuidanceConfig { omega, ..guidance }.validate()?;
        }
        let probe_windows = cfg.get("probe.windows", 64usize)?;
        Ok(Self {
            base,
            data_file,
            preset,
            episodes,
            gamma,
            idm_file,
            idm,
            planner_file,
            horizon,
            widths,
            activation,
            time_embed_dim,
            train,
            resume,
            eval,
            sweep_omegas,
            sweep_n_odes,
            sweep_init_scales,
            probe_windows,
        })
    }

    fn load_planner(&self) -> Result<Planner> {
        Planner::from_checkpoint(&Checkpoint::load(&self.planner_file)?)
    }
}

pub fn run(task: RlTask, mut cfg: RunConfig) -> Result<()> {
    let s = Settings::read(&mut cfg)?;
    start(&cfg, &s.base.output)?;
    match task {
        RlTask::GenData => gen_data(&s),
        RlTask::TrainIdm => train_idm_task(&s),
        RlTask::TrainPlanner => train_planner_task(&s),
        RlTask::Eval => eval_task(&s),
        RlTask::Sweep => sweep_task(&s),
        RlTask::Probe => probe_task(&s),
    }
}

fn gen_data(s: &Settings) -> Result<()> {
    let policies = s.preset.policies();
    let ds = generate_dataset(&policies, s.episodes, s.gamma, s.base.seed)?;
    ds.save(&s.data_file)?;
    let mut csv = CsvOut::create(&s.base.path("dataset_summary.csv"), DATASET_SCHEMA, &DATASET_HEADER)?;
    for (i, ep) in ds.episodes.iter().enumerate() {
        csv.row(&[
            i.to_string(),
            policies[i % policies.len()].noise.to_string(),
            ep.total_return().to_string(),
            crate::rl::discounted_return(&ep.rewards, ds.gamma).to_string(),
            ds.validation[i].to_string(),
        ])?;
    }
    csv.finish()?;
    eprintln!("{} episodes, reward scale {}", ds.episodes.len(), ds.reward_scale);
    Ok(())
}

fn train_idm_task(s: &Settings) -> Result<()> {
    let ds = OfflineDataset::load(&s.data_file)?;
    let (idm, log) = train_idm(&ds, &s.idm)?;
    idm.save(&s.idm_file)?;
    let mut csv = CsvOut::create(&s.base.path("idm_log.csv"), IDM_SCHEMA, &IDM_HEADER)?;
    for r in &log {
        csv.row(&[r.step.to_string(), r.train_loss.to_string(), r.val_loss.to_string()])?;
    }
    csv.finish()?;
    eprintln!("best validation loss {} at step {}", idm.val_loss, idm.step);
    Ok(())
}

fn train_planner_task(s: &Settings) -> Result<()> {
    let ds = OfflineDataset::load(&s.data_file)?;
    let norm = planner_normalization(&ds);
    let model_cfg = planner_model_config(s.horizon, s.widths.clone(), s.activation, s.time_embed_dim, s.base.scheduler);
    let data = WindowData::new(&ds, s.horizon)?;
    let trainer = match &s.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(std::path::Path::new(path))?;
            if ckpt.model.config() != &model_cfg {
                return Err(Error::Config(format!("checkpoint {path} was trained with a different model configuration")));
            }
            ckpt.into_trainer()?
        }
        None => Trainer::new(VelocityModel::new(model_cfg, &mut stream_rng(s.base.seed, 0))?, s.train.clone())?,
    };
    let trainer = drive(trainer, &data, s.train.iterations, &norm, &s.planner_file, &s.base.path("planner_loss.csv"))?;
    eprintln!("trained {} steps", trainer.step);
    Ok(())
}

struct Cell {
    guidance: GuidanceConfig,
    seed: u64,
}

/// Runs every cell and writes one row per episode; returns the per-cell returns.
fn run_cells(s: &Settings, planner: &Planner, idm: &InverseDynamics, cells: &[Cell], csv: &mut CsvOut) -> Result<Vec<Vec<f64>>> {
    let exec = Execution::available_parallel();
    let results = try_map_range(exec, cells.len(), |i| {
        let c = &cells[i];
        let cfg = EvalConfig {
            guidance: c.guidance,
            target_rtg: s.eval.target_rtg,
            rule: s.eval.rule,
            n_episodes: s.eval.episodes,
            seed: c.seed,
        };
        evaluate(planner, idm, &cfg, exec)
    })?;
    let mut returns = Vec::with_capacity(cells.len());
    for (c, outcomes) in cells.iter().zip(&results) {
        for o in outcomes {
            csv.row(&[
                c.seed.to_string(),
                o.episode.to_string(),
                c.guidance.omega.to_string(),
                c.guidance.init_scale.to_string(),
                c.guidance.n_ode.to_string(),
                c.guidance.solver.to_string(),
                nfe(&c.guidance).to_string(),
                s.eval.target_rtg.to_string(),
                s.eval.rule.to_string(),
                o.ret.to_string(),
            ])?;
        }
        returns.push(outcomes.iter().map(|o| o.ret).collect());
    }
    Ok(returns)
}

/// Model evaluations per plan.
fn nfe(g: &GuidanceConfig) -> u64 {
    2 * g.n_ode as u64 * g.solver.evals_per_step()
}

fn load_models(s: &Settings) -> Result<(Planner, InverseDynamics)> {
    Ok((s.load_planner()?, InverseDynamics::load(&s.idm_file)?))
}

fn eval_task(s: &Settings) -> Result<()> {
    let (planner, idm) = load_models(s)?;
    let cells: Vec<Cell> = s.eval.seeds.iter().map(|&seed| Cell { guidance: s.eval.guidance, seed }).collect();
    let mut csv = CsvOut::create(&s.base.path("eval.csv"), EPISODE_SCHEMA, &EPISODE_HEADER)?;
    let returns = run_cells(s, &planner, &idm, &cells, &mut csv)?;
    csv.finish()?;
    let all: Vec<f64> = returns.concat();
    eprintln!("mean return {:.4} +- {:.4} over {} episodes", mean(&all), sem(&all), all.len());
    Ok(())
}

fn sweep_task(s: &Settings) -> Result<()> {
    let (planner, idm) = load_models(s)?;
    let mut grid = Vec::new();
    for &init_scale in &s.sweep_init_scales {
        for &omega in &s.sweep_omegas {
            for &n_ode in &s.sweep_n_odes {
                grid.push(GuidanceConfig { omega, init_scale, n_ode, ..s.eval.guidance });
            }
        }
    }
    let cells: Vec<Cell> =
        grid.iter().flat_map(|g| s.eval.seeds.iter().map(move |&seed| Cell { guidance: *g, seed })).collect();
    let mut csv = CsvOut::create(&s.base.path("sweep_episodes.csv"), EPISODE_SCHEMA, &EPISODE_HEADER)?;
    let returns = run_cells(s, &planner, &idm, &cells, &mut csv)?;
    csv.finish()?;

    let mut summary = CsvOut::create(&s.base.path("sweep_summary.csv"), SWEEP_SCHEMA, &SWEEP_HEADER)?;
    let n_seeds = s.eval.seeds.len();
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for (gi, g) in grid.iter().enumerate() {
        let all: Vec<f64> = returns[gi * n_seeds..(gi + 1) * n_seeds].concat();
        let m = mean(&all);
        summary.row(&[
            g.omega.to_string(),
            g.init_scale.to_string(),
            g.n_ode.to_string(),
            nfe(g).to_string(),
            s.eval.target_rtg.to_string(),
            all.len().to_string(),
            m.to_string(),
            sem(&all).to_string(),
            n_seeds.to_string(),
        ])?;
        let name = format!("omega {} init scale {}", g.omega, g.init_scale);
        match series.last_mut() {
            Some((n, pts)) if *n == name => pts.push(((g.n_ode as f64).ln(), m)),
            _ => series.push((name, vec![((g.n_ode as f64).ln(), m)])),
        }
    }
    summary.finish()?;
    std::fs::write(
        s.base.path("sweep_returns.svg"),
        svg::lines("mean return against ODE steps", "ln(n_ode)", "mean return", &series),
    )?;
    Ok(())
}

fn probe_task(s: &Settings) -> Result<()> {
    let planner = s.load_planner()?;
    let ds = OfflineDataset::load(&s.data_file)?;
    let g = s.eval.guidance;
    let r = ood_probe(&planner, &ds, &g, s.probe_windows, s.base.seed)?;
    let mut csv = CsvOut::create(&s.base.path("probe.csv"), PROBE_SCHEMA, &PROBE_HEADER)?;
    csv.row(&[
        g.omega.to_string(),
        g.init_scale.to_string(),
        g.n_ode.to_string(),
        r.target_rtg.to_string(),
        r.n_windows.to_string(),
        r.generated_smoothness.to_string(),
        r.real_smoothness.to_string(),
        r.generated_dynamics_error.to_string(),
        r.real_dynamics_error.to_string(),
    ])?;
    csv.finish()?;
    Ok(())
}
