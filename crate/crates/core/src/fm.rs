//! Conditional flow matching: the training objective with null-condition
//! dropout, classifier-free guided velocities, and the velocity/score
//! conversions that tie guided flows to the probability-flow ODE.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_len, Error, Result};
use crate::field::VelocityField;
use crate::nn::{Adam, BatchCond, Ema, VelocityModel};
use crate::par::stream_rng;
use crate::scheduler::Scheduler;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub p_uncond: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub seed: u64,
    pub scheduler: Scheduler,
    pub lr: f64,
    pub ema_decay: f64,
    pub ema_every: u64,
    /// Steps between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p_uncond: 0.25,
            batch_size: 64,
            iterations: 10_000,
            seed: 0,
            scheduler: Scheduler::Ot,
            lr: Adam::DEFAULT_LR,
            ema_decay: Ema::DEFAULT_DECAY,
            ema_every: Ema::DEFAULT_EVERY,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::Config(format!("p_uncond must be in [0, 1], got {}", self.p_uncond)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay must be in [0, 1], got {}", self.ema_decay)));
        }
        Ok(())
    }
}

/// Source of `(x1, y)` training pairs.
pub trait DataSource {
    fn dim(&self) -> usize;
    fn cond_dim(&self) -> usize;
    /// `n x d` data points and, when the data is conditional, `n x k` conditions.
    fn sample_batch(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<(Array2<f64>, Option<Array2<f64>>)>;
    /// Leading coordinates that are observed at sampling time and clamped
    /// (zero for ordinary generation).
    fn known_prefix(&self) -> usize {
        0
    }
}

#[derive(Clone, Debug)]
pub struct LossSample {
    pub loss: f64,
    pub grads: Vec<f64>,
}

/// One Monte Carlo sample of the CFM loss on a batch. Per row: `t ~ U[0,1]`,
/// `x0 ~ N(0, I)`, and with probability `p_uncond` the condition is
/// replaced by the null token. The regression target is
/// `alpha_dot x1 + sigma_dot x0` at `x_t = alpha x1 + sigma x0`. The first
/// `known` coordinates stay at their data values with target velocity zero,
/// matching how the sampler treats clamped coordinates.
pub fn cfm_loss_sample<R: Rng + ?Sized>(
    model: &VelocityModel,
    scheduler: Scheduler,
    x1: ArrayView2<f64>,
    y: Option<ArrayView2<f64>>,
    p_uncond: f64,
    known: usize,
    rng: &mut R,
) -> Result<LossSample> {
    let (n, d) = x1.dim();
    check_len("cfm batch dim", model.config().dim, d)?;
    if known > d {
        return Err(Error::Shape(format!("known prefix {known} exceeds dimension {d}")));
    }
    if let Some(bad) = x1.rows().into_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric(format!("non-finite data point at batch index {bad}")));
    }
    let mut ts = Vec::with_capacity(n);
    let mut xt = Array2::zeros((n, d));
    let mut target = Array2::zeros((n, d));
    let mut null = Vec::with_capacity(n);
    for i in 0..n {
        let t: f64 = rng.random();
        let v = scheduler.eval(t)?;
        for j in 0..known {
            xt[[i, j]] = x1[[i, j]];
        }
        for j in known..d {
            let z: f64 = StandardNormal.sample(rng);
            xt[[i, j]] = v.alpha * x1[[i, j]] + v.sigma * z;
            target[[i, j]] = v.alpha_dot * x1[[i, j]] + v.sigma_dot * z;
        }
        ts.push(t);
        null.push(rng.random::<f64>() < p_uncond);
    }
    let cond = y.map(|values| BatchCond { values, null: &null });
    let (loss, grads) = model.loss_and_grad(&ts, xt.view(), cond, target.view())?;
    if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        let out = model.forward_batch(&ts, xt.view(), cond)?;
        let bad = out
            .rows()
            .into_iter()
            .zip(target.rows())
            .position(|(o, tg)| o.iter().chain(tg.iter()).any(|v| !v.is_finite()))
            .unwrap_or(0);
        return Err(Error::Numeric(format!(
            "non-finite CFM loss (batch index {bad}, t = {})",
            ts.get(bad).copied().unwrap_or(f64::NAN)
        )));
    }
    Ok(LossSample { loss, grads })
}

/// Single-threaded training loop: Adam on the CFM loss, EMA of parameters.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: VelocityModel,
    pub adam: Adam,
    pub ema: Ema,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(model: VelocityModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(model.params().len(), config.lr);
        let ema = Ema::new(model.params(), config.ema_decay, config.ema_every);
        let rng = stream_rng(config.seed, 1);
        Ok(Self { model, adam, ema, rng, step: 0, config })
    }

    /// One optimizer step; returns the batch loss.
    pub fn step<D: DataSource + ?Sized>(&mut self, data: &D) -> Result<f64> {
        check_len("data dim", self.model.config().dim, data.dim())?;
        check_len("data condition dim", self.model.config().cond_dim, data.cond_dim())?;
        let (x1, y) = data.sample_batch(self.config.batch_size, &mut self.rng)?;
        let sample = cfm_loss_sample(
            &self.model,
            self.config.scheduler,
            x1.view(),
            y.as_ref().map(|y| y.view()),
            self.config.p_uncond,
            data.known_prefix(),
            &mut self.rng,
        )
        .map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("step {}: {msg}", self.step + 1)),
            other => other,
        })?;
        self.adam.update(self.model.params_mut(), &sample.grads)?;
        self.step += 1;
        self.ema.observe(self.step, self.model.params())?;
        Ok(sample.loss)
    }

    /// Runs until `self.step == until`, calling `on_step(step, loss)` after each step.
    pub fn run_until<D, F>(&mut self, data: &D, until: u64, mut on_step: F) -> Result<()>
    where
        D: DataSource + ?Sized,
        F: FnMut(&Trainer, f64) -> Result<()>,
    {
        while self.step < until {
            let loss = self.step(data)?;
            on_step(self, loss)?;
        }
        Ok(())
    }

    /// Copy of the model carrying the EMA parameters.
    pub fn ema_model(&self) -> VelocityModel {
        let mut m = self.model.clone();
        m.set_params(&self.ema.shadow).expect("ema shadow matches model");
        m
    }
}

/// Classifier-free guided velocity `(1 - omega) u(t, x, null) + omega u(t, x, y)`.
/// Always costs exactly two field evaluations.
pub fn guided_velocity<F: VelocityField + ?Sized>(
    field: &F,
    t: f64,
    x: ArrayView2<f64>,
    cond: ArrayView2<f64>,
    omega: f64,
) -> Result<Array2<f64>> {
    let u_null = field.velocity(t, x, None)?;
    let u_cond = field.velocity(t, x, Some(cond))?;
    Ok(u_null * (1.0 - omega) + u_cond * omega)
}

/// `s = (u - a_t x) / b_t`.
pub fn velocity_to_score(scheduler: Scheduler, t: f64, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    check_len("velocity_to_score", x.len(), u.len())?;
    let c = scheduler.interior_coefficients(t)?;
    Ok(x.iter().zip(u).map(|(&xi, &ui)| (ui - c.a * xi) / c.b).collect())
}

/// `u = a_t x + b_t s`.
pub fn score_to_velocity(scheduler: Scheduler, t: f64, x: &[f64], s: &[f64]) -> Result<Vec<f64>> {
    check_len("score_to_velocity", x.len(), s.len())?;
    let c = scheduler.interior_coefficients(t)?;
    Ok(x.iter().zip(s).map(|(&xi, &si)| c.a * xi + c.b * si).collect())
}

/// Probability-flow drift `f_t x - g_t^2 / 2 [(1 - omega) s_null + omega s_y]`.
pub fn guided_score_ode_drift(
    scheduler: Scheduler,
    t: f64,
    x: &[f64],
    score_uncond: &[f64],
    score_cond: &[f64],
    omega: f64,
) -> Result<Vec<f64>> {
    check_len("drift uncond score", x.len(), score_uncond.len())?;
    check_len("drift cond score", x.len(), score_cond.len())?;
    let c = scheduler.interior_coefficients(t)?;
    Ok((0..x.len())
        .map(|j| {
            let s = (1.0 - omega) * score_uncond[j] + omega * score_cond[j];
            c.f * x[j] - 0.5 * c.g_sq * s
        })
        .collect())
}

/// Mean CFM loss of an arbitrary field over `n_mc` draws from `data`
/// (no dropout; conditions as drawn). Used to compare candidate fields.
pub fn cfm_loss_of_field<F, D>(field: &F, scheduler: Scheduler, data: &D, n_mc: usize, seed: u64) -> Result<f64>
where
    F: VelocityField + ?Sized,
    D: DataSource + ?Sized,
{
    let mut rng = stream_rng(seed, 0);
    let (x1, y) = data.sample_batch(n_mc, &mut rng)?;
    let mut total = 0.0;
    for i in 0..n_mc {
        let t: f64 = rng.random_range(0.0..1.0);
        let v = scheduler.eval(t)?;
        let row = x1.row(i);
        let z: Vec<f64> = (0..row.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let xt: Array2<f64> = Array2::from_shape_fn((1, row.len()), |(_, j)| v.alpha * row[j] + v.sigma * z[j]);
        let cond = y.as_ref().map(|y| y.row(i).insert_axis(Axis(0)));
        let u = field.velocity(t, xt.view(), cond)?;
        for j in 0..row.len() {
            let target = v.alpha_dot * row[j] + v.sigma_dot * z[j];
            total += (u[[0, j]] - target).powi(2);
        }
    }
    Ok(total / n_mc as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, ModelConfig};
    use crate::scheduler::SINGULARITY_EPS;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Constant {
        value: f64,
        cond_value: f64,
        calls: AtomicUsize,
    }

    impl VelocityField for Constant {
        fn dim(&self) -> usize {
            1
        }
        fn cond_dim(&self) -> usize {
            1
        }
        fn velocity(&self, _t: f64, x: ArrayView2<f64>, cond: Option<ArrayView2<f64>>) -> Result<Array2<f64>> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let v = if cond.is_some() { self.cond_value } else { self.value };
            Ok(Array2::from_elem(x.raw_dim(), v))
        }
    }

    #[test]
    fn guided_velocity_endpoints_and_linearity() {
        let f = Constant { value: 0.5, cond_value: 2.0, calls: AtomicUsize::new(0) };
        let x = Array2::zeros((1, 1));
        let c = Array2::ones((1, 1));
        let g = |w| guided_velocity(&f, 0.3, x.view(), c.view(), w).unwrap()[[0, 0]];
        assert_eq!(g(1.0), 2.0);
        assert_eq!(g(0.0), 0.5);
        for w in [-1.0, 0.5, 2.0, 3.5] {
            assert!((g(w) - (0.5 + w * 1.5)).abs() < 1e-14);
        }
        let zero_null = Constant { value: 0.0, cond_value: 1.25, calls: AtomicUsize::new(0) };
        let u = guided_velocity(&zero_null, 0.3, x.view(), c.view(), 2.0).unwrap();
        assert_eq!(u[[0, 0]], 2.5);
        assert_eq!(zero_null.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn score_velocity_examples() {
        let s = velocity_to_score(Scheduler::Ot, 0.5, &[0.0], &[1.0]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-15);
        assert!(velocity_to_score(Scheduler::Ot, SINGULARITY_EPS / 10.0, &[0.0], &[1.0]).is_err());
        assert!(score_to_velocity(Scheduler::Cosine, 1.0, &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn drift_independent_of_omega_when_scores_agree() {
        let s = [0.3, -1.2];
        let x = [0.5, 0.25];
        let a = guided_score_ode_drift(Scheduler::Cosine, 0.4, &x, &s, &s, 0.0).unwrap();
        for w in [0.5, 1.0, 2.0, 4.0] {
            let b = guided_score_ode_drift(Scheduler::Cosine, 0.4, &x, &s, &s, w).unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn straight_path_target_is_one() {
        // OT, x1 = 1, x0 = 0: x_t = t and the target alpha_dot x1 + sigma_dot x0 = 1
        for i in 0..=10 {
            let v = Scheduler::Ot.eval(i as f64 / 10.0).unwrap();
            assert_eq!(v.alpha_dot * 1.0 + v.sigma_dot * 0.0, 1.0);
        }
    }

    struct OnePoint;

    impl DataSource for OnePoint {
        fn dim(&self) -> usize {
            1
        }
        fn cond_dim(&self) -> usize {
            1
        }
        fn sample_batch(&self, n: usize, _rng: &mut ChaCha8Rng) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
            Ok((Array2::ones((n, 1)), Some(Array2::from_elem((n, 1), 0.7))))
        }
    }

    #[test]
    fn null_token_untouched_without_dropout() {
        let cfg = ModelConfig {
            dim: 1,
            cond_dim: 1,
            widths: vec![8],
            activation: Activation::Mish,
            time_embed_dim: 4,
            horizon: 0,
            scheduler: Scheduler::Ot,
        };
        let model = VelocityModel::new(cfg, &mut stream_rng(0, 0)).unwrap();
        let before = model.null_token().to_vec();
        let mut trainer = Trainer::new(model, TrainConfig { p_uncond: 0.0, batch_size: 8, lr: 1e-2, ..Default::default() }).unwrap();
        trainer.run_until(&OnePoint, 50, |_, _| Ok(())).unwrap();
        assert_eq!(trainer.model.null_token(), before.as_slice());

        let model = VelocityModel::new(trainer.model.config().clone(), &mut stream_rng(0, 0)).unwrap();
        let mut trainer = Trainer::new(model, TrainConfig { p_uncond: 0.5, batch_size: 8, lr: 1e-2, ..Default::default() }).unwrap();
        trainer.run_until(&OnePoint, 5, |_, _| Ok(())).unwrap();
        assert_ne!(trainer.model.null_token(), before.as_slice());
    }

    #[test]
    fn rejects_bad_config_and_non_finite_data() {
        assert!(TrainConfig { p_uncond: 1.5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        let cfg = ModelConfig {
            dim: 1,
            cond_dim: 0,
            widths: vec![4],
            activation: Activation::Tanh,
            time_embed_dim: 2,
            horizon: 0,
            scheduler: Scheduler::Ot,
        };
        let model = VelocityModel::new(cfg, &mut stream_rng(0, 0)).unwrap();
        let x1 = Array2::from_elem((3, 1), f64::NAN);
        let err = cfm_loss_sample(&model, Scheduler::Ot, x1.view(), None, 0.0, 0, &mut stream_rng(0, 1)).unwrap_err();
        assert!(matches!(err, Error::Numeric(m) if m.contains("batch index 0")));
    }
}
