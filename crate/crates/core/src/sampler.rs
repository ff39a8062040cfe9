//! Fixed-step ODE integration of guided velocity fields from noise at
//! `t = 0` to data at `t = 1`, optionally with clamped (known) coordinates.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_len, Error, Result};
use crate::field::VelocityField;
use crate::fm::guided_velocity;
use crate::par::{stream_rng, try_map_range, Execution};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Solver {
    Euler,
    Midpoint,
}

impl Solver {
    /// Field evaluations per step of a single (unguided) field.
    pub fn evals_per_step(self) -> u64 {
        match self {
            Solver::Euler => 1,
            Solver::Midpoint => 2,
        }
    }
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Solver::Euler => "euler",
            Solver::Midpoint => "midpoint",
        })
    }
}

impl FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Solver::Euler),
            "midpoint" => Ok(Solver::Midpoint),
            other => Err(Error::Config(format!("unknown solver `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceConfig {
    /// Guidance weight; 1 is plain conditional sampling.
    pub omega: f64,
    pub n_ode: usize,
    pub solver: Solver,
    /// Standard deviation `nu` of the initial noise; below 1 is low-temperature sampling.
    pub init_scale: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { omega: 1.0, n_ode: 10, solver: Solver::Euler, init_scale: 1.0 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ode == 0 {
            return Err(Error::Config("n_ode must be >= 1".into()));
        }
        if !(self.init_scale > 0.0) || !self.init_scale.is_finite() {
            return Err(Error::Config(format!("init_scale must be positive, got {}", self.init_scale)));
        }
        if !self.omega.is_finite() {
            return Err(Error::Config("omega must be finite".into()));
        }
        Ok(())
    }
}

/// Coordinates `start..start + values.len()` held fixed during integration.
#[derive(Clone, Debug, PartialEq)]
pub struct Clamp {
    pub start: usize,
    pub values: Vec<f64>,
}

/// Per-row clamp values over a shared coordinate range.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchClamp {
    pub start: usize,
    /// `n x len` fixed values.
    pub values: Array2<f64>,
}

impl BatchClamp {
    fn end(&self) -> usize {
        self.start + self.values.ncols()
    }

    fn check(&self, n: usize, d: usize) -> Result<()> {
        if self.end() > d {
            return Err(Error::Shape(format!("clamp range {}..{} exceeds dimension {d}", self.start, self.end())));
        }
        check_len("clamp rows", n, self.values.nrows())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRequest {
    pub guidance: GuidanceConfig,
    /// Condition `y`; `None` samples the unconditional field.
    pub cond: Option<Vec<f64>>,
    pub clamp: Option<Clamp>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SampleStats {
    pub steps: u64,
    pub model_calls: u64,
}

fn eval_field<F: VelocityField + ?Sized>(
    field: &F,
    t: f64,
    x: ArrayView2<f64>,
    cond: Option<ArrayView2<f64>>,
    omega: f64,
    clamp: Option<&BatchClamp>,
    calls: &mut u64,
) -> Result<Array2<f64>> {
    let mut u = match cond {
        Some(c) => {
            *calls += 2;
            guided_velocity(field, t, x, c, omega)?
        }
        None => {
            *calls += 1;
            field.velocity(t, x, None)?
        }
    };
    if let Some(c) = clamp {
        u.slice_mut(s![.., c.start..c.end()]).fill(0.0);
    }
    Ok(u)
}

/// Integrates every row of `x0` from `t = 0` to `t = 1` with step
/// `h = 1 / n_ode`. Under a clamp, the clamped coordinates are overwritten
/// before every step and their velocity is zero, so they leave the solver
/// exactly equal to the clamp values.
pub fn integrate<F: VelocityField + ?Sized>(
    field: &F,
    guidance: &GuidanceConfig,
    x0: Array2<f64>,
    cond: Option<ArrayView2<f64>>,
    clamp: Option<&BatchClamp>,
) -> Result<(Array2<f64>, SampleStats)> {
    guidance.validate()?;
    let (n, d) = x0.dim();
    check_len("sampler dim", field.dim(), d)?;
    if let Some(c) = &cond {
        check_len("sampler condition rows", n, c.nrows())?;
        check_len("sampler condition dim", field.cond_dim(), c.ncols())?;
    }
    if let Some(c) = clamp {
        c.check(n, d)?;
    }
    let h = 1.0 / guidance.n_ode as f64;
    let omega = guidance.omega;
    let mut x = x0;
    let mut calls = 0u64;
    for step in 0..guidance.n_ode {
        let t = step as f64 * h;
        if let Some(c) = clamp {
            x.slice_mut(s![.., c.start..c.end()]).assign(&c.values);
        }
        let u = eval_field(field, t, x.view(), cond, omega, clamp, &mut calls)?;
        match guidance.solver {
            Solver::Euler => x.scaled_add(h, &u),
            Solver::Midpoint => {
                let mut mid = x.clone();
                mid.scaled_add(0.5 * h, &u);
                let um = eval_field(field, t + 0.5 * h, mid.view(), cond, omega, clamp, &mut calls)?;
                x.scaled_add(h, &um);
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite state after ODE step {step}")));
        }
        if let Some(c) = clamp {
            assert!(
                x.slice(s![.., c.start..c.end()]) == c.values,
                "clamped coordinates drifted at step {step}"
            );
        }
    }
    Ok((x, SampleStats { steps: guidance.n_ode as u64, model_calls: calls }))
}

/// Rows per independent random stream in [`sample_many`].
pub const SAMPLE_CHUNK: usize = 256;

fn draw_noise(rows: usize, d: usize, scale: f64, seed: u64, stream: u64) -> Array2<f64> {
    let mut rng = stream_rng(seed, stream);
    Array2::from_shape_simple_fn((rows, d), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        scale * z
    })
}

/// Draws `n` samples. Rows are generated in chunks of [`SAMPLE_CHUNK`], each
/// with its own random stream, so the result does not depend on `exec`.
pub fn sample_many<F: VelocityField + ?Sized>(
    field: &F,
    req: &SampleRequest,
    n: usize,
    exec: Execution,
) -> Result<(Array2<f64>, SampleStats)> {
    req.guidance.validate()?;
    let d = field.dim();
    if let Some(y) = &req.cond {
        check_len("condition", field.cond_dim(), y.len())?;
    }
    let n_chunks = n.div_ceil(SAMPLE_CHUNK);
    let chunks = try_map_range(exec, n_chunks, |c| {
        let rows = SAMPLE_CHUNK.min(n - c * SAMPLE_CHUNK);
        let x0 = draw_noise(rows, d, req.guidance.init_scale, req.seed, c as u64);
        let cond = req
            .cond
            .as_ref()
            .map(|y| ndarray::ArrayView1::from(y.as_slice()).insert_axis(Axis(0)).broadcast((rows, y.len())).unwrap().to_owned());
        let clamp = req.clamp.as_ref().map(|cl| BatchClamp {
            start: cl.start,
            values: ndarray::ArrayView1::from(cl.values.as_slice())
                .insert_axis(Axis(0))
                .broadcast((rows, cl.values.len()))
                .unwrap()
                .to_owned(),
        });
        integrate(field, &req.guidance, x0, cond.as_ref().map(|c| c.view()), clamp.as_ref())
    })?;
    let mut out = Array2::zeros((n, d));
    let mut stats = SampleStats::default();
    for (c, (x, st)) in chunks.into_iter().enumerate() {
        let start = c * SAMPLE_CHUNK;
        out.slice_mut(s![start..start + x.nrows(), ..]).assign(&x);
        stats.steps = st.steps;
        stats.model_calls += st.model_calls;
    }
    Ok((out, stats))
}

/// One sample at `t = 1` (the first row of [`sample_many`] with the same request).
pub fn sample<F: VelocityField + ?Sized>(field: &F, req: &SampleRequest) -> Result<Vec<f64>> {
    let (x, _) = sample_many(field, req, 1, Execution::Sequential)?;
    Ok(x.row(0).to_vec())
}

/// Sampling with known coordinates; the request must carry a clamp.
pub fn sample_clamped<F: VelocityField + ?Sized>(field: &F, req: &SampleRequest) -> Result<Vec<f64>> {
    if req.clamp.is_none() {
        return Err(Error::Config("sample_clamped needs a clamp".into()));
    }
    sample(field, req)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    /// `u(t, x) = c` everywhere.
    struct ConstantField(f64);

    impl VelocityField for ConstantField {
        fn dim(&self) -> usize {
            1
        }
        fn cond_dim(&self) -> usize {
            0
        }
        fn velocity(&self, _t: f64, x: ArrayView2<f64>, _c: Option<ArrayView2<f64>>) -> Result<Array2<f64>> {
            Ok(Array2::from_elem(x.raw_dim(), self.0))
        }
    }

    /// `u(t, x) = x` (unconditional), `u(t, x | y) = x + y`.
    struct LinearField(usize);

    impl VelocityField for LinearField {
        fn dim(&self) -> usize {
            self.0
        }
        fn cond_dim(&self) -> usize {
            1
        }
        fn velocity(&self, _t: f64, x: ArrayView2<f64>, c: Option<ArrayView2<f64>>) -> Result<Array2<f64>> {
            let mut u = x.to_owned();
            if let Some(c) = c {
                u += &c.column(0).insert_axis(Axis(1));
            }
            Ok(u)
        }
    }

    struct Exploding;

    impl VelocityField for Exploding {
        fn dim(&self) -> usize {
            1
        }
        fn cond_dim(&self) -> usize {
            0
        }
        fn velocity(&self, _t: f64, x: ArrayView2<f64>, _c: Option<ArrayView2<f64>>) -> Result<Array2<f64>> {
            Ok(x.mapv(|v| v * 1e200 + 1e300))
        }
    }

    fn guidance(n_ode: usize, solver: Solver) -> GuidanceConfig {
        GuidanceConfig { omega: 1.0, n_ode, solver, init_scale: 1.0 }
    }

    #[test]
    fn euler_is_exact_for_constant_fields() {
        for n in [1, 3, 7, 50] {
            let x0 = Array2::from_elem((1, 1), 0.25);
            let (x, st) = integrate(&ConstantField(2.0), &guidance(n, Solver::Euler), x0, None, None).unwrap();
            assert!((x[[0, 0]] - 2.25).abs() < 1e-12, "n = {n}");
            assert_eq!(st.model_calls, n as u64);
        }
    }

    #[test]
    fn midpoint_converges_at_second_order_on_linear_field() {
        let x0v = 0.7;
        let exact = x0v * 1f64.exp();
        let err = |n| {
            let x0 = Array2::from_elem((1, 1), x0v);
            let (x, _) = integrate(&LinearField(1), &guidance(n, Solver::Midpoint), x0, None, None).unwrap();
            (x[[0, 0]] - exact).abs()
        };
        let ratio = err(10) / err(20);
        assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn guided_call_accounting() {
        let x0 = Array2::zeros((2, 1));
        let c = Array2::ones((2, 1));
        let (_, st) = integrate(&LinearField(1), &guidance(5, Solver::Euler), x0.clone(), Some(c.view()), None).unwrap();
        assert_eq!(st.model_calls, 10);
        let (_, st) = integrate(&LinearField(1), &guidance(5, Solver::Midpoint), x0, Some(c.view()), None).unwrap();
        assert_eq!(st.model_calls, 20);
    }

    #[test]
    fn zero_steps_is_a_config_error() {
        let x0 = Array2::zeros((1, 1));
        assert!(matches!(
            integrate(&ConstantField(1.0), &guidance(0, Solver::Euler), x0, None, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn non_finite_state_reports_step() {
        let x0 = Array2::from_elem((1, 1), 1.0);
        let err = integrate(&Exploding, &guidance(10, Solver::Euler), x0, None, None).unwrap_err();
        assert!(matches!(err, Error::Numeric(m) if m.contains("step")));
    }

    #[test]
    fn clamp_everything_returns_clamp_values() {
        let req = SampleRequest {
            guidance: guidance(8, Solver::Midpoint),
            cond: Some(vec![0.5]),
            clamp: Some(Clamp { start: 0, values: vec![1.0, -2.0, 3.0] }),
            seed: 4,
        };
        assert_eq!(sample_clamped(&LinearField(3), &req).unwrap(), vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn empty_clamp_matches_plain_sampling() {
        let mut req = SampleRequest { guidance: guidance(8, Solver::Euler), cond: Some(vec![0.5]), clamp: None, seed: 4 };
        let plain = sample(&LinearField(3), &req).unwrap();
        req.clamp = Some(Clamp { start: 1, values: vec![] });
        assert_eq!(sample_clamped(&LinearField(3), &req).unwrap(), plain);
    }

    #[test]
    fn partial_clamp_is_exact() {
        let req = SampleRequest {
            guidance: GuidanceConfig { omega: 2.5, n_ode: 13, solver: Solver::Midpoint, init_scale: 0.1 },
            cond: Some(vec![0.3]),
            clamp: Some(Clamp { start: 0, values: vec![0.123456789, -9.87654321] }),
            seed: 11,
        };
        let x = sample_clamped(&LinearField(5), &req).unwrap();
        assert_eq!(&x[..2], &[0.123456789, -9.87654321]);
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn clamp_out_of_bounds_is_rejected() {
        let req = SampleRequest {
            guidance: guidance(2, Solver::Euler),
            cond: None,
            clamp: Some(Clamp { start: 2, values: vec![0.0, 0.0] }),
            seed: 0,
        };
        assert!(matches!(sample_clamped(&LinearField(3), &req), Err(Error::Shape(_))));
    }

    #[test]
    fn sampling_is_deterministic_and_execution_independent() {
        let req = SampleRequest { guidance: guidance(4, Solver::Euler), cond: Some(vec![1.0]), clamp: None, seed: 99 };
        let (a, _) = sample_many(&LinearField(2), &req, 700, Execution::Sequential).unwrap();
        let (b, _) = sample_many(&LinearField(2), &req, 700, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        let single = sample(&LinearField(2), &req).unwrap();
        assert_eq!(Array1::from(single), a.row(0));
    }

    #[test]
    fn init_scale_scales_noise() {
        let mut req = SampleRequest { guidance: guidance(1, Solver::Euler), cond: None, clamp: None, seed: 3 };
        let (a, _) = sample_many(&ConstantField(0.0), &req, 10, Execution::Sequential).unwrap();
        req.guidance.init_scale = 0.1;
        let (b, _) = sample_many(&ConstantField(0.0), &req, 10, Execution::Sequential).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x * 0.1 - y).abs() < 1e-15);
        }
    }
}
