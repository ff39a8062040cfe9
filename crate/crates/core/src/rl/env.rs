//! Deterministic 2D point mass driven toward the origin.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;
pub const DT: f64 = 0.1;
pub const EPISODE_LEN: usize = 100;

pub type State = [f64; STATE_DIM];
pub type Action = [f64; ACTION_DIM];

/// State `(px, py, vx, vy)`; the goal is the origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointMassEnv {
    state: State,
    t: usize,
}

pub fn clip_action(a: Action) -> Action {
    a.map(|v| v.clamp(-1.0, 1.0))
}

/// `-|pos|^2` of the state the action is taken from.
pub fn reward(s: &State) -> f64 {
    -(s[0] * s[0] + s[1] * s[1])
}

/// One transition with a clipped action.
pub fn transition(s: &State, a: &Action) -> State {
    let a = clip_action(*a);
    [s[0] + DT * s[2], s[1] + DT * s[3], s[2] + DT * a[0], s[3] + DT * a[1]]
}

impl PointMassEnv {
    pub fn new(state: State) -> Self {
        Self { state, t: 0 }
    }

    /// Initial state uniform in `[-1, 1]^4`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::new(std::array::from_fn(|_| rng.random_range(-1.0..=1.0)))
    }

    pub fn state(&self) -> State {
        self.state
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn done(&self) -> bool {
        self.t >= EPISODE_LEN
    }

    /// Applies `a` (clipped to the unit box) and returns the reward of the
    /// state it was applied in.
    pub fn step(&mut self, a: &Action) -> f64 {
        let r = reward(&self.state);
        self.state = transition(&self.state, a);
        self.t += 1;
        r
    }
}

/// Proportional controller `a = -k pos - c vel` plus Gaussian noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Controller {
    pub k: f64,
    pub c: f64,
    pub noise: f64,
}

impl Controller {
    pub const DEFAULT_K: f64 = 0.5;
    pub const DEFAULT_C: f64 = 1.0;

    pub fn with_noise(noise: f64) -> Self {
        Self { k: Self::DEFAULT_K, c: Self::DEFAULT_C, noise }
    }

    pub fn act<R: Rng + ?Sized>(&self, s: &State, rng: &mut R) -> Action {
        let mut a = [-self.k * s[0] - self.c * s[2], -self.k * s[1] - self.c * s[3]];
        if self.noise > 0.0 {
            for v in &mut a {
                let z: f64 = StandardNormal.sample(rng);
                *v += self.noise * z;
            }
        }
        clip_action(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::par::stream_rng;

    #[test]
    fn origin_at_rest_stays_put_with_zero_reward() {
        let mut env = PointMassEnv::new([0.0; 4]);
        let ctrl = Controller::with_noise(0.0);
        let mut rng = stream_rng(0, 0);
        let mut total = 0.0;
        while !env.done() {
            let a = ctrl.act(&env.state(), &mut rng);
            total += env.step(&a);
        }
        assert_eq!(total, 0.0);
        assert_eq!(env.state(), [0.0; 4]);
    }

    #[test]
    fn actions_are_clipped() {
        let s = transition(&[0.0; 4], &[5.0, -7.0]);
        assert_eq!(s, [0.0, 0.0, DT, -DT]);
    }

    #[test]
    fn rewards_are_non_positive_and_states_bounded() {
        let mut rng = stream_rng(3, 0);
        let mut env = PointMassEnv::random(&mut rng);
        for _ in 0..EPISODE_LEN {
            let a: Action = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            assert!(env.step(&a) <= 0.0);
        }
        let s = env.state();
        // |vel| <= 1 + T dt, |pos| <= 1 + T dt (1 + T dt)
        assert!(s[2].abs() <= 11.0 && s[0].abs() <= 1.0 + 10.0 * 11.0);
    }
}
