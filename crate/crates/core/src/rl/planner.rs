//! Return-conditioned planning: a flow over windows of future states,
//! sampled with the current state clamped, turned into actions by the
//! inverse dynamics model and replanned every step.

use std::str::FromStr;

use ndarray::{s, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::dataset::{OfflineDataset, WindowData};
use super::env::{PointMassEnv, State, DT, EPISODE_LEN, STATE_DIM};
use super::idm::InverseDynamics;
use crate::checkpoint::{Checkpoint, Normalization};
use crate::error::{Error, Result};
use crate::fm::{TrainConfig, Trainer};
use crate::nn::{Activation, ModelConfig, VelocityModel};
use crate::par::{stream_rng, try_map_range, Execution};
use crate::sampler::{integrate, BatchClamp, GuidanceConfig};
use crate::scheduler::Scheduler;

pub const DEFAULT_HORIZON: usize = 64;
/// Episodes simulated in lockstep by one worker during evaluation.
pub const EVAL_GROUP: usize = 10;
/// Out-of-distribution probe target: this fraction of the dataset's return
/// range above its largest window return.
pub const OOD_MARGIN: f64 = 0.3;

pub fn planner_model_config(
    horizon: usize,
    widths: Vec<usize>,
    activation: Activation,
    time_embed_dim: usize,
    scheduler: Scheduler,
) -> ModelConfig {
    ModelConfig { dim: horizon * STATE_DIM, cond_dim: 1, widths, activation, time_embed_dim, horizon, scheduler }
}

/// State statistics and reward scale a planner checkpoint carries.
pub fn planner_normalization(dataset: &OfflineDataset) -> Normalization {
    Normalization {
        mean: dataset.state_mean.to_vec(),
        std: dataset.state_std.to_vec(),
        reward_scale: dataset.reward_scale,
        gamma: dataset.gamma,
    }
}

/// Trains a fresh planner for `train.iterations` steps with null dropout on
/// the return condition only.
pub fn train_planner<F>(dataset: &OfflineDataset, model: ModelConfig, train: TrainConfig, on_step: F) -> Result<Trainer>
where
    F: FnMut(&Trainer, f64) -> Result<()>,
{
    let data = WindowData::new(dataset, model.horizon)?;
    if model.dim != model.horizon * STATE_DIM || model.cond_dim != 1 {
        return Err(Error::Config(format!(
            "planner needs dim = {} and one condition, got dim {} and {}",
            model.horizon * STATE_DIM,
            model.dim,
            model.cond_dim
        )));
    }
    let net = VelocityModel::new(model, &mut stream_rng(train.seed, 0))?;
    let mut trainer = Trainer::new(net, train)?;
    let until = trainer.config.iterations;
    trainer.run_until(&data, until, on_step)?;
    Ok(trainer)
}

/// Deployed planner: velocity model plus the normalization it was trained with.
#[derive(Clone, Debug)]
pub struct Planner {
    pub model: VelocityModel,
    pub state_mean: State,
    pub state_std: State,
    pub reward_scale: f64,
}

impl Planner {
    pub fn new(model: VelocityModel, norm: &Normalization) -> Result<Self> {
        let cfg = model.config();
        if cfg.horizon < 2 || cfg.dim != cfg.horizon * STATE_DIM || cfg.cond_dim != 1 {
            return Err(Error::Config(format!(
                "model (dim {}, horizon {}, condition {}) is not a planner",
                cfg.dim, cfg.horizon, cfg.cond_dim
            )));
        }
        let four = |v: &[f64], what: &str| -> Result<State> {
            v.try_into().map_err(|_| Error::Config(format!("planner {what} needs {STATE_DIM} values, got {}", v.len())))
        };
        if !(norm.reward_scale > 0.0) {
            return Err(Error::Config("planner reward scale must be positive".into()));
        }
        Ok(Self {
            state_mean: four(&norm.mean, "state mean")?,
            state_std: four(&norm.std, "state std")?,
            reward_scale: norm.reward_scale,
            model,
        })
    }

    /// Uses the EMA parameters when the checkpoint has them.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Self::new(ckpt.deployed_model(), &ckpt.norm)
    }

    pub fn horizon(&self) -> usize {
        self.model.config().horizon
    }

    pub fn normalize(&self, s: &State) -> State {
        std::array::from_fn(|j| (s[j] - self.state_mean[j]) / self.state_std[j])
    }

    pub fn denormalize(&self, s: &[f64]) -> State {
        std::array::from_fn(|j| s[j] * self.state_std[j] + self.state_mean[j])
    }

    /// One plan per row: noise from `rngs[i]`, first state clamped to the
    /// normalized `states[i]`, conditioned on `targets[i]`. Returns
    /// normalized plans and the number of model calls.
    pub fn plan(
        &self,
        states: &[State],
        targets: &[f64],
        guidance: &GuidanceConfig,
        rngs: &mut [ChaCha8Rng],
    ) -> Result<(Array2<f64>, u64)> {
        let n = states.len();
        if targets.len() != n || rngs.len() != n {
            return Err(Error::Shape(format!("{n} states, {} targets, {} streams", targets.len(), rngs.len())));
        }
        let d = self.model.config().dim;
        let mut x0 = Array2::zeros((n, d));
        for (mut row, rng) in x0.rows_mut().into_iter().zip(rngs.iter_mut()) {
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = guidance.init_scale * z;
            }
        }
        let clamp = BatchClamp {
            start: 0,
            values: Array2::from_shape_fn((n, STATE_DIM), |(i, j)| self.normalize(&states[i])[j]),
        };
        let cond = Array2::from_shape_fn((n, 1), |(i, _)| targets[i]);
        let (x, stats) = integrate(&self.model, guidance, x0, Some(cond.view()), Some(&clamp))?;
        Ok((x, stats.model_calls))
    }
}

/// How the return target changes after each environment step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RtgRule {
    /// Re-condition on the initial target every step.
    #[default]
    Constant,
    /// `g <- g - r / reward_scale`.
    SubtractReward,
}

impl RtgRule {
    pub fn update(self, g: f64, reward: f64, reward_scale: f64) -> f64 {
        match self {
            RtgRule::Constant => g,
            RtgRule::SubtractReward => g - reward / reward_scale,
        }
    }
}

impl std::fmt::Display for RtgRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RtgRule::Constant => "constant",
            RtgRule::SubtractReward => "subtract-reward",
        })
    }
}

impl FromStr for RtgRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(RtgRule::Constant),
            "subtract-reward" => Ok(RtgRule::SubtractReward),
            other => Err(Error::Config(format!("unknown rtg rule {other:?} (expected constant or subtract-reward)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub guidance: GuidanceConfig,
    /// Initial scaled return target.
    pub target_rtg: f64,
    pub rule: RtgRule,
    pub n_episodes: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub episode: usize,
    pub ret: f64,
    pub model_calls: u64,
}

/// Initial state of evaluation episode `i`; shared by every guidance
/// setting with the same seed so returns can be compared pairwise.
pub fn eval_start(seed: u64, episode: usize) -> PointMassEnv {
    PointMassEnv::random(&mut stream_rng(seed, 2 * episode as u64))
}

/// Runs `n_episodes` full episodes, replanning every step. Episodes are
/// simulated in lockstep groups of [`EVAL_GROUP`]; each episode draws its
/// noise from its own stream, so results do not depend on `exec`.
pub fn evaluate(planner: &Planner, idm: &InverseDynamics, cfg: &EvalConfig, exec: Execution) -> Result<Vec<EpisodeOutcome>> {
    cfg.guidance.validate()?;
    if cfg.n_episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    if !cfg.target_rtg.is_finite() {
        return Err(Error::Config("return target must be finite".into()));
    }
    let groups = try_map_range(exec, cfg.n_episodes.div_ceil(EVAL_GROUP), |gi| {
        let first = gi * EVAL_GROUP;
        let last = (first + EVAL_GROUP).min(cfg.n_episodes);
        run_group(planner, idm, cfg, first..last)
    })?;
    Ok(groups.into_iter().flatten().collect())
}

fn run_group(
    planner: &Planner,
    idm: &InverseDynamics,
    cfg: &EvalConfig,
    episodes: std::ops::Range<usize>,
) -> Result<Vec<EpisodeOutcome>> {
    let n = episodes.len();
    let mut envs: Vec<PointMassEnv> = episodes.clone().map(|i| eval_start(cfg.seed, i)).collect();
    let mut rngs: Vec<ChaCha8Rng> = episodes.clone().map(|i| stream_rng(cfg.seed, 2 * i as u64 + 1)).collect();
    let mut g = vec![cfg.target_rtg; n];
    let mut ret = vec![0.0; n];
    let mut calls = 0;
    for t in 0..EPISODE_LEN {
        let states: Vec<State> = envs.iter().map(PointMassEnv::state).collect();
        let (plans, c) = planner.plan(&states, &g, &cfg.guidance, &mut rngs)?;
        calls += c;
        let mut pairs = Array2::zeros((n, 2 * STATE_DIM));
        pairs.slice_mut(s![.., ..2 * STATE_DIM]).assign(&plans.slice(s![.., ..2 * STATE_DIM]));
        let actions = idm.predict(pairs.view()).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("episode group from {}, step {t}: {msg}", episodes.start)),
            other => other,
        })?;
        for i in 0..n {
            let r = envs[i].step(&[actions[[i, 0]], actions[[i, 1]]]);
            ret[i] += r;
            g[i] = cfg.rule.update(g[i], r, planner.reward_scale);
        }
    }
    // batched calls: every row sees each evaluation once
    Ok(episodes.zip(ret).map(|(episode, ret)| EpisodeOutcome { episode, ret, model_calls: calls }).collect())
}

/// Largest window return plus [`OOD_MARGIN`] of the return range.
pub fn ood_target(dataset: &OfflineDataset, horizon: usize) -> Result<f64> {
    let (lo, hi) = dataset
        .window_rtg_range(horizon)
        .ok_or_else(|| Error::Config(format!("horizon {horizon} exceeds every episode")))?;
    Ok(hi + OOD_MARGIN * (hi - lo))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeReport {
    pub target_rtg: f64,
    pub n_windows: usize,
    /// Mean norm of second differences along the state sequence.
    pub generated_smoothness: f64,
    pub real_smoothness: f64,
    /// Mean `|pos_{k+1} - pos_k - dt vel_k|`.
    pub generated_dynamics_error: f64,
    pub real_dynamics_error: f64,
}

/// Mean second-difference norm and dynamics-consistency error of a state sequence.
pub fn sequence_metrics(states: &[State]) -> (f64, f64) {
    let h = states.len();
    let mut smooth = 0.0;
    for k in 1..h.saturating_sub(1) {
        let d2: f64 = (0..STATE_DIM).map(|j| (states[k + 1][j] - 2.0 * states[k][j] + states[k - 1][j]).powi(2)).sum();
        smooth += d2.sqrt();
    }
    let mut dyn_err = 0.0;
    for k in 0..h.saturating_sub(1) {
        let e: f64 = (0..2).map(|j| (states[k + 1][j] - states[k][j] - DT * states[k][j + 2]).powi(2)).sum();
        dyn_err += e.sqrt();
    }
    (smooth / (h.saturating_sub(2)).max(1) as f64, dyn_err / (h.saturating_sub(1)).max(1) as f64)
}

/// Plans from real window starts under an out-of-distribution return
/// target and compares them with the real windows.
pub fn ood_probe(
    planner: &Planner,
    dataset: &OfflineDataset,
    guidance: &GuidanceConfig,
    n_windows: usize,
    seed: u64,
) -> Result<ProbeReport> {
    let h = planner.horizon();
    let target = ood_target(dataset, h)?;
    if n_windows == 0 {
        return Err(Error::Config("probe needs at least one window".into()));
    }
    let mut rng = stream_rng(seed, 0);
    let starts: Vec<(usize, usize)> = (0..n_windows)
        .map(|_| {
            let ep = rng.random_range(0..dataset.episodes.len());
            let len = dataset.episodes[ep].len();
            (ep, rng.random_range(0..=len.saturating_sub(h)))
        })
        .collect();
    if starts.iter().any(|&(ep, st)| st + h > dataset.episodes[ep].len()) {
        return Err(Error::Config(format!("horizon {h} exceeds an episode")));
    }
    let first: Vec<State> = starts.iter().map(|&(ep, st)| dataset.episodes[ep].states[st]).collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..n_windows).map(|i| stream_rng(seed, i as u64 + 1)).collect();
    let (plans, _) = planner.plan(&first, &vec![target; n_windows], guidance, &mut rngs)?;
    let (mut gs, mut gd, mut rs, mut rd) = (0.0, 0.0, 0.0, 0.0);
    for (i, &(ep, st)) in starts.iter().enumerate() {
        let row = plans.row(i);
        let gen: Vec<State> =
            (0..h).map(|k| planner.denormalize(row.slice(s![k * STATE_DIM..(k + 1) * STATE_DIM]).as_slice().unwrap())).collect();
        let (a, b) = sequence_metrics(&gen);
        let (c, d) = sequence_metrics(&dataset.episodes[ep].states[st..st + h]);
        gs += a;
        gd += b;
        rs += c;
        rd += d;
    }
    let n = n_windows as f64;
    Ok(ProbeReport {
        target_rtg: target,
        n_windows,
        generated_smoothness: gs / n,
        real_smoothness: rs / n,
        generated_dynamics_error: gd / n,
        real_dynamics_error: rd / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::rl::dataset::{generate_dataset, Preset};
    use crate::rl::idm::{train_idm, IdmConfig};

    fn tiny_planner(horizon: usize, norm: &Normalization) -> Planner {
        let cfg = planner_model_config(horizon, vec![16], Activation::Mish, 8, Scheduler::Ot);
        Planner::new(VelocityModel::new(cfg, &mut stream_rng(0, 0)).unwrap(), norm).unwrap()
    }

    #[test]
    fn shapes() {
        let cfg = planner_model_config(DEFAULT_HORIZON, vec![32], Activation::Mish, 8, Scheduler::Ot);
        assert_eq!(cfg.dim, 256);
    }

    #[test]
    fn rtg_rules() {
        assert_eq!(RtgRule::Constant.update(-0.2, -3.0, 10.0), -0.2);
        assert!((RtgRule::SubtractReward.update(-0.2, -3.0, 10.0) - 0.1).abs() < 1e-15);
        assert_eq!("subtract-reward".parse::<RtgRule>().unwrap(), RtgRule::SubtractReward);
        assert!("nope".parse::<RtgRule>().is_err());
    }

    #[test]
    fn plans_start_at_the_observed_state() {
        let ds = generate_dataset(&Preset::Medium.policies(), 4, 0.99, 0).unwrap();
        let planner = tiny_planner(8, &planner_normalization(&ds));
        let states = [ds.episodes[0].states[3], ds.episodes[1].states[7]];
        let mut rngs = vec![stream_rng(1, 0), stream_rng(1, 1)];
        let guidance = GuidanceConfig { omega: 2.0, n_ode: 5, ..Default::default() };
        let (plans, calls) = planner.plan(&states, &[-0.1, -0.2], &guidance, &mut rngs).unwrap();
        assert_eq!(calls, 10);
        for (i, s) in states.iter().enumerate() {
            let n = planner.normalize(s);
            assert_eq!(plans.row(i).slice(s![..STATE_DIM]).to_vec(), n.to_vec());
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_execution_independent() {
        let ds = generate_dataset(&Preset::MediumReplay.policies(), 12, 0.99, 0).unwrap();
        let planner = tiny_planner(4, &planner_normalization(&ds));
        let idm_cfg = IdmConfig { widths: vec![16], iterations: 20, eval_every: 10, ..Default::default() };
        let (idm, _) = train_idm(&ds, &idm_cfg).unwrap();
        let cfg = EvalConfig {
            guidance: GuidanceConfig { n_ode: 2, ..Default::default() },
            target_rtg: -0.05,
            rule: RtgRule::Constant,
            n_episodes: 13,
            seed: 4,
        };
        let a = evaluate(&planner, &idm, &cfg, Execution::Sequential).unwrap();
        let b = evaluate(&planner, &idm, &cfg, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 13);
        assert!(a.iter().all(|o| o.ret <= 0.0 && o.model_calls == 2 * 2 * EPISODE_LEN as u64));
    }

    #[test]
    fn sequence_metrics_of_consistent_rollout() {
        let ds = generate_dataset(&Preset::Medium.policies(), 1, 0.99, 0).unwrap();
        let (_, dyn_err) = sequence_metrics(&ds.episodes[0].states);
        assert!(dyn_err < 1e-12);
        let line: Vec<State> = (0..5).map(|k| [k as f64 * DT, 0.0, 1.0, 0.0]).collect();
        let (smooth, dyn_err) = sequence_metrics(&line);
        assert!(smooth < 1e-12 && dyn_err < 1e-12);
    }

    #[test]
    fn ood_target_is_above_the_data() {
        let ds = generate_dataset(&Preset::MediumReplay.policies(), 10, 0.99, 0).unwrap();
        let (_, hi) = ds.window_rtg_range(16).unwrap();
        assert!(ood_target(&ds, 16).unwrap() > hi);
        let planner = tiny_planner(16, &planner_normalization(&ds));
        let report = ood_probe(&planner, &ds, &GuidanceConfig::default(), 6, 0).unwrap();
        assert!(report.real_dynamics_error < 1e-12);
        assert!(report.generated_smoothness.is_finite());
    }
}
