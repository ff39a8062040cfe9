//! Offline trajectories, return-to-go windows and their on-disk form.

use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::env::{Action, Controller, PointMassEnv, State, ACTION_DIM, EPISODE_LEN, STATE_DIM};
use crate::container::{self, Kind, Reader, Writer};
use crate::error::{Error, Result};
use crate::fm::DataSource;
use crate::par::{map_range, stream_rng, Execution};

pub const DEFAULT_GAMMA: f64 = 0.99;
/// Fraction of episodes held out for inverse-dynamics validation.
pub const VALIDATION_FRACTION: f64 = 0.1;

/// `states` has one more entry than `actions` and `rewards`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub states: Vec<State>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    fn check(&self) -> Result<()> {
        let t = self.actions.len();
        if self.rewards.len() != t || self.states.len() != t + 1 {
            return Err(Error::Format(format!(
                "episode framing: {} states, {} actions, {} rewards",
                self.states.len(),
                t,
                self.rewards.len()
            )));
        }
        Ok(())
    }
}

/// Behaviour-policy mixtures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Controllers with noise 0.1, 0.5 and 1.0 in equal shares.
    MediumReplay,
    /// The low-noise controller alone.
    Medium,
}

impl Preset {
    pub fn policies(self) -> Vec<Controller> {
        match self {
            Preset::MediumReplay => [0.1, 0.5, 1.0].map(Controller::with_noise).to_vec(),
            Preset::Medium => vec![Controller::with_noise(0.1)],
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "medium-replay" => Ok(Preset::MediumReplay),
            "medium" => Ok(Preset::Medium),
            other => Err(Error::Config(format!("unknown dataset preset {other:?} (expected medium-replay or medium)"))),
        }
    }
}

/// `sum_k gamma^k r_k`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, &r| r + gamma * acc)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub episodes: Vec<Episode>,
    pub gamma: f64,
    /// `|min episode return|`; normalized window returns lie in `[-1, 0]`.
    pub reward_scale: f64,
    pub state_mean: State,
    pub state_std: State,
    /// Per-episode validation flag.
    pub validation: Vec<bool>,
    normalized: Vec<Vec<State>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    All,
}

/// Rolls out `n_episodes` episodes, assigning policies round-robin. Episode
/// `i` uses random stream `i`, so generation is independent of scheduling.
pub fn generate_dataset(policies: &[Controller], n_episodes: usize, gamma: f64, seed: u64) -> Result<OfflineDataset> {
    if policies.is_empty() {
        return Err(Error::Config("dataset generation needs at least one policy".into()));
    }
    if n_episodes == 0 {
        return Err(Error::Config("dataset generation needs at least one episode".into()));
    }
    let episodes = map_range(Execution::available_parallel(), n_episodes, |i| {
        let mut rng = stream_rng(seed, i as u64);
        rollout(&policies[i % policies.len()], &mut rng)
    });
    let mut order: Vec<usize> = (0..n_episodes).collect();
    order.shuffle(&mut stream_rng(seed, u64::MAX));
    let n_val = if n_episodes < 2 { 0 } else { ((n_episodes as f64 * VALIDATION_FRACTION).round() as usize).max(1) };
    let mut validation = vec![false; n_episodes];
    for &i in &order[..n_val] {
        validation[i] = true;
    }
    OfflineDataset::from_parts(episodes, gamma, validation)
}

fn rollout(policy: &Controller, rng: &mut ChaCha8Rng) -> Episode {
    let mut env = PointMassEnv::random(rng);
    let mut ep = Episode { states: vec![env.state()], actions: Vec::new(), rewards: Vec::new() };
    while !env.done() {
        let a = policy.act(&env.state(), rng);
        ep.rewards.push(env.step(&a));
        ep.actions.push(a);
        ep.states.push(env.state());
    }
    ep
}

impl OfflineDataset {
    /// Computes the reward scale and the train-split state statistics.
    pub fn from_parts(episodes: Vec<Episode>, gamma: f64, validation: Vec<bool>) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Config(format!("discount {gamma} must lie in (0, 1]")));
        }
        let min_return = episodes.iter().map(Episode::total_return).fold(0.0, f64::min);
        let reward_scale = if min_return < 0.0 { -min_return } else { 1.0 };
        let mut sum = [0.0; STATE_DIM];
        let mut sq = [0.0; STATE_DIM];
        let mut count = 0.0;
        for (ep, _) in episodes.iter().zip(&validation).filter(|(_, &v)| !v) {
            for s in &ep.states {
                for j in 0..STATE_DIM {
                    sum[j] += s[j];
                    sq[j] += s[j] * s[j];
                }
                count += 1.0;
            }
        }
        if count == 0.0 {
            return Err(Error::Config("training split is empty".into()));
        }
        let state_mean = sum.map(|v| v / count);
        let state_std: State = std::array::from_fn(|j| (sq[j] / count - state_mean[j].powi(2)).max(0.0).sqrt().max(1e-6));
        Self::with_stats(episodes, gamma, reward_scale, state_mean, state_std, validation)
    }

    fn with_stats(
        episodes: Vec<Episode>,
        gamma: f64,
        reward_scale: f64,
        state_mean: State,
        state_std: State,
        validation: Vec<bool>,
    ) -> Result<Self> {
        if validation.len() != episodes.len() {
            return Err(Error::Format(format!("{} split flags for {} episodes", validation.len(), episodes.len())));
        }
        for ep in &episodes {
            ep.check()?;
        }
        let mut ds =
            Self { episodes, gamma, reward_scale, state_mean, state_std, validation, normalized: Vec::new() };
        ds.normalized = ds.episodes.iter().map(|ep| ep.states.iter().map(|s| ds.normalize(s)).collect()).collect();
        Ok(ds)
    }

    pub fn normalize(&self, s: &State) -> State {
        std::array::from_fn(|j| (s[j] - self.state_mean[j]) / self.state_std[j])
    }

    pub fn normalized_states(&self, episode: usize) -> &[State] {
        &self.normalized[episode]
    }

    fn in_split(&self, i: usize, split: Split) -> bool {
        match split {
            Split::All => true,
            Split::Train => !self.validation[i],
            Split::Validation => self.validation[i],
        }
    }

    /// Number of length-`h` windows that fit inside an episode.
    pub fn n_windows(&self, h: usize) -> usize {
        self.episodes.iter().map(|ep| (ep.len() + 1).saturating_sub(h)).sum()
    }

    /// Discounted return of the window `start..start + h`, before scaling.
    pub fn window_rtg(&self, episode: usize, start: usize, h: usize) -> Option<f64> {
        let ep = &self.episodes[episode];
        (start + h <= ep.len()).then(|| discounted_return(&ep.rewards[start..start + h], self.gamma))
    }

    /// Flattened normalized states and the scaled return of a window, or
    /// `None` when it would cross the end of the episode.
    pub fn window(&self, episode: usize, start: usize, h: usize) -> Option<(Vec<f64>, f64)> {
        let rtg = self.window_rtg(episode, start, h)?;
        let states = self.normalized[episode][start..start + h].iter().flatten().copied().collect();
        Some((states, rtg / self.reward_scale))
    }

    /// Smallest and largest scaled window return.
    pub fn window_rtg_range(&self, h: usize) -> Option<(f64, f64)> {
        let mut range: Option<(f64, f64)> = None;
        for (i, ep) in self.episodes.iter().enumerate() {
            for start in 0..(ep.len() + 1).saturating_sub(h) {
                let g = self.window_rtg(i, start, h).unwrap() / self.reward_scale;
                range = Some(match range {
                    None => (g, g),
                    Some((lo, hi)) => (lo.min(g), hi.max(g)),
                });
            }
        }
        range
    }

    /// Consecutive normalized state pairs `[s_t, s_{t+1}]` and the actions taken.
    pub fn transition_pairs(&self, split: Split) -> (Array2<f64>, Array2<f64>) {
        let idx: Vec<usize> = (0..self.episodes.len()).filter(|&i| self.in_split(i, split)).collect();
        let n: usize = idx.iter().map(|&i| self.episodes[i].len()).sum();
        let mut x = Array2::zeros((n, 2 * STATE_DIM));
        let mut y = Array2::zeros((n, ACTION_DIM));
        let mut row = 0;
        for &i in &idx {
            let states = &self.normalized[i];
            for (t, a) in self.episodes[i].actions.iter().enumerate() {
                for j in 0..STATE_DIM {
                    x[[row, j]] = states[t][j];
                    x[[row, STATE_DIM + j]] = states[t + 1][j];
                }
                y.row_mut(row).assign(&ArrayView1::from(a));
                row += 1;
            }
        }
        (x, y)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(Kind::Dataset);
        w.u32(self.episodes.len() as u32);
        w.u32(STATE_DIM as u32);
        w.u32(ACTION_DIM as u32);
        w.section_f64(b"DSGM", &[self.gamma, self.reward_scale]);
        w.section_f64(b"SMEA", &self.state_mean);
        w.section_f64(b"SSTD", &self.state_std);
        w.section_u64(b"DVAL", &self.validation.iter().map(|&v| v as u64).collect::<Vec<_>>());
        for ep in &self.episodes {
            w.section_u64(b"EPLN", &[ep.len() as u64]);
            w.section_f64(b"EPST", &ep.states.concat());
            w.section_f64(b"EPAC", &ep.actions.concat());
            w.section_f64(b"EPRW", &ep.rewards);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, Kind::Dataset)?;
        let n = r.u32()? as usize;
        let (sd, ad) = (r.u32()? as usize, r.u32()? as usize);
        if sd != STATE_DIM || ad != ACTION_DIM {
            return Err(Error::Format(format!("dataset dimensions {sd}/{ad} do not match the environment")));
        }
        let head = r.expect_f64(b"DSGM")?;
        if head.len() != 2 {
            return Err(Error::Format("dataset header needs gamma and reward scale".into()));
        }
        let mean = fixed::<STATE_DIM>(r.expect_f64(b"SMEA")?)?;
        let std = fixed::<STATE_DIM>(r.expect_f64(b"SSTD")?)?;
        let validation: Vec<bool> = r.expect_u64(b"DVAL")?.into_iter().map(|v| v != 0).collect();
        let mut episodes = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let len = r.expect_u64(b"EPLN")?;
            let len = *len.first().ok_or_else(|| Error::Format("empty episode length".into()))? as usize;
            let states = chunked::<STATE_DIM>(r.expect_f64(b"EPST")?)?;
            let actions = chunked::<ACTION_DIM>(r.expect_f64(b"EPAC")?)?;
            let rewards = r.expect_f64(b"EPRW")?;
            let ep = Episode { states, actions, rewards };
            if ep.len() != len {
                return Err(Error::Format(format!("episode declares {len} steps, holds {}", ep.len())));
            }
            episodes.push(ep);
        }
        match r.section()? {
            None => {}
            Some((tag, _)) => return Err(Error::Format(format!("unexpected section {}", container::tag_str(&tag)))),
        }
        Self::with_stats(episodes, head[0], head[1], mean, std, validation)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_bytes(&bytes)
    }
}

fn fixed<const N: usize>(v: Vec<f64>) -> Result<[f64; N]> {
    let len = v.len();
    v.try_into().map_err(|_| Error::Format(format!("expected {N} values, got {len}")))
}

fn chunked<const N: usize>(v: Vec<f64>) -> Result<Vec<[f64; N]>> {
    if v.len() % N != 0 {
        return Err(Error::Format(format!("{} values do not split into rows of {N}", v.len())));
    }
    Ok(v.chunks_exact(N).map(|c| c.try_into().unwrap()).collect())
}

/// Uniform `(episode, offset)` windows of `horizon` normalized states with
/// their scaled return as the condition. Windows never cross episode ends.
#[derive(Clone, Debug)]
pub struct WindowData<'a> {
    dataset: &'a OfflineDataset,
    horizon: usize,
    /// Cumulative window counts per episode.
    offsets: Vec<usize>,
}

impl<'a> WindowData<'a> {
    pub fn new(dataset: &'a OfflineDataset, horizon: usize) -> Result<Self> {
        if horizon < 2 {
            return Err(Error::Config(format!("planning horizon {horizon} must be at least 2")));
        }
        let mut offsets = Vec::with_capacity(dataset.episodes.len() + 1);
        offsets.push(0);
        for ep in &dataset.episodes {
            offsets.push(offsets.last().unwrap() + (ep.len() + 1).saturating_sub(horizon));
        }
        if *offsets.last().unwrap() == 0 {
            return Err(Error::Config(format!("horizon {horizon} exceeds every episode")));
        }
        Ok(Self { dataset, horizon, offsets })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    fn locate(&self, flat: usize) -> (usize, usize) {
        let ep = self.offsets.partition_point(|&o| o <= flat) - 1;
        (ep, flat - self.offsets[ep])
    }
}

impl DataSource for WindowData<'_> {
    fn dim(&self) -> usize {
        self.horizon * STATE_DIM
    }

    fn cond_dim(&self) -> usize {
        1
    }

    /// The current state is clamped when planning.
    fn known_prefix(&self) -> usize {
        STATE_DIM
    }

    fn sample_batch(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
        let total = *self.offsets.last().unwrap();
        let mut x = Array2::zeros((n, self.dim()));
        let mut y = Array2::zeros((n, 1));
        for i in 0..n {
            let (ep, start) = self.locate(rng.random_range(0..total));
            let (states, g) = self.dataset.window(ep, start, self.horizon).expect("window inside episode");
            x.row_mut(i).assign(&ArrayView1::from(&states));
            y[[i, 0]] = g;
        }
        Ok((x, Some(y)))
    }
}

/// Windows of length `h` in one full-length episode.
pub fn windows_per_episode(h: usize) -> usize {
    (EPISODE_LEN + 1).saturating_sub(h)
}
