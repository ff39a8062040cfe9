//! Affine Gaussian-path schedulers `(alpha_t, sigma_t)` and the per-time
//! coefficients derived from them.
//!
//! The conditional path is `N(alpha_t * x1, sigma_t^2 I)` with
//! `alpha_0 = 0, sigma_0 = 1` (pure noise) and `alpha_1 = 1, sigma_1 = 0`
//! (data). Both schedulers are closed form so every derivative is exact.
//!
//! New schedulers are added as enum variants with their analytic
//! derivatives in [`Scheduler::eval`]; everything else is derived.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use crate::error::{check_len, Error, Result};

/// Endpoint guard for score/velocity conversions: they are only defined on
/// `[SINGULARITY_EPS, 1 - SINGULARITY_EPS]`.
pub const SINGULARITY_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scheduler {
    /// `alpha_t = t`, `sigma_t = 1 - t`.
    Ot,
    /// `alpha_t = sin(pi t / 2)`, `sigma_t = cos(pi t / 2)`.
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SchedulerValues {
    pub alpha: f64,
    pub sigma: f64,
    pub alpha_dot: f64,
    pub sigma_dot: f64,
}

/// Coefficients relating velocity and score, `u = a x + b grad log p`, and
/// the drift/diffusion pair of the equivalent probability-flow ODE
/// `dx/dt = f x - g_sq / 2 * grad log p`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathCoefficients {
    pub a: f64,
    pub b: f64,
    pub f: f64,
    pub g_sq: f64,
}

impl Scheduler {
    pub const ALL: [Scheduler; 2] = [Scheduler::Ot, Scheduler::Cosine];

    pub fn code(self) -> u8 {
        match self {
            Scheduler::Ot => 0,
            Scheduler::Cosine => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Scheduler::Ot),
            1 => Some(Scheduler::Cosine),
            _ => None,
        }
    }

    pub fn eval(self, t: f64) -> Result<SchedulerValues> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain { t });
        }
        Ok(match self {
            Scheduler::Ot => SchedulerValues {
                alpha: t,
                sigma: 1.0 - t,
                alpha_dot: 1.0,
                sigma_dot: -1.0,
            },
            Scheduler::Cosine => {
                let (s, c) = (FRAC_PI_2 * t).sin_cos();
                SchedulerValues {
                    alpha: s,
                    sigma: c,
                    alpha_dot: FRAC_PI_2 * c,
                    sigma_dot: -FRAC_PI_2 * s,
                }
            }
        })
    }

    /// `a_t = alpha_dot / alpha`, `b_t = (alpha_dot sigma - alpha sigma_dot) sigma / alpha`,
    /// `f_t = a_t` and `g_sq_t = -2 b_t`.
    pub fn path_coefficients(self, t: f64) -> Result<PathCoefficients> {
        let v = self.eval(t)?;
        if v.alpha <= 0.0 {
            return Err(Error::Singularity { t, reason: "alpha_t = 0" });
        }
        let a = v.alpha_dot / v.alpha;
        let b = (v.alpha_dot * v.sigma - v.alpha * v.sigma_dot) * v.sigma / v.alpha;
        Ok(PathCoefficients { a, b, f: a, g_sq: -2.0 * b })
    }

    /// Velocity of the single-point path towards `x1`:
    /// `(sigma_dot / sigma)(x - alpha x1) + alpha_dot x1`.
    pub fn conditional_velocity(self, t: f64, x: &[f64], x1: &[f64]) -> Result<Vec<f64>> {
        check_len("conditional_velocity x1", x.len(), x1.len())?;
        let v = self.eval(t)?;
        if v.sigma <= 0.0 {
            return Err(Error::Singularity { t, reason: "sigma_t = 0" });
        }
        let ratio = v.sigma_dot / v.sigma;
        Ok(x.iter()
            .zip(x1)
            .map(|(&xi, &x1i)| ratio * (xi - v.alpha * x1i) + v.alpha_dot * x1i)
            .collect())
    }

    /// Coefficients for conversions that are only valid away from the endpoints.
    pub(crate) fn interior_coefficients(self, t: f64) -> Result<PathCoefficients> {
        if !(SINGULARITY_EPS..=1.0 - SINGULARITY_EPS).contains(&t) {
            if (0.0..=1.0).contains(&t) {
                return Err(Error::Singularity {
                    t,
                    reason: "score/velocity conversion outside [eps, 1 - eps]",
                });
            }
            return Err(Error::Domain { t });
        }
        let c = self.path_coefficients(t)?;
        if c.b == 0.0 {
            return Err(Error::Singularity { t, reason: "b_t = 0" });
        }
        Ok(c)
    }
}

impl fmt::Display for Scheduler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheduler::Ot => "ot",
            Scheduler::Cosine => "cosine",
        })
    }
}

impl FromStr for Scheduler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ot" => Ok(Scheduler::Ot),
            "cosine" | "cs" => Ok(Scheduler::Cosine),
            other => Err(Error::Config(format!("unknown scheduler `{other}`"))),
        }
    }
}
