//! Closed-form ground truth for isotropic Gaussian mixtures: marginal
//! paths, scores, target velocities and tempered (guided) targets.
//!
//! Under a Gaussian path every mixture component `N(mu, s^2 I)` stays
//! Gaussian, `N(alpha_t mu, (alpha_t^2 s^2 + sigma_t^2) I)`, and the
//! posterior over the endpoint `x1` given `x` is again Gaussian per
//! component. The target velocity is therefore a responsibility-weighted
//! sum of per-component affine maps.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_len, Error, Result};
use crate::field::VelocityField;
use crate::fm::DataSource;
use crate::par::Execution;
use crate::sampler::{sample_many, GuidanceConfig, SampleRequest};
use crate::scheduler::Scheduler;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Isotropic variance `s^2`; zero means a point mass.
    pub variance: f64,
    pub label: usize,
}

/// Labelled mixture of isotropic Gaussians. `q(x | y)` is the mixture of
/// components carrying label `y` (renormalized); `q(x)` is the full mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmSpec {
    components: Vec<GmmComponent>,
    dim: usize,
    n_labels: usize,
}

/// One component of a marginal path `p_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: f64,
}

impl GmmSpec {
    pub fn new(components: Vec<GmmComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::Config("mixture needs at least one component".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::Config("mixture dimension must be positive".into()));
        }
        let mut total = 0.0;
        for (i, c) in components.iter().enumerate() {
            check_len(&format!("component {i} mean"), dim, c.mean.len())?;
            if !(c.weight > 0.0) || !c.weight.is_finite() {
                return Err(Error::Config(format!("component {i}: weight must be positive, got {}", c.weight)));
            }
            if !(c.variance >= 0.0) || !c.variance.is_finite() {
                return Err(Error::Config(format!("component {i}: variance must be >= 0, got {}", c.variance)));
            }
            if c.mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("component {i}: non-finite mean")));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture weights must sum to 1, got {total}")));
        }
        let n_labels = components.iter().map(|c| c.label).max().unwrap() + 1;
        for y in 0..n_labels {
            if !components.iter().any(|c| c.label == y) {
                return Err(Error::Config(format!("label {y} has no component")));
            }
        }
        Ok(Self { components, dim, n_labels })
    }

    /// `n` equally weighted components on a circle of `radius`, one label each.
    pub fn ring(n: usize, radius: f64, variance: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("ring needs at least one component".into()));
        }
        let comps = (0..n)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / n as f64;
                GmmComponent { weight: 1.0 / n as f64, mean: vec![radius * a.cos(), radius * a.sin()], variance, label: i }
            })
            .collect();
        Self::new(comps)
    }

    pub fn gaussian(mean: Vec<f64>, variance: f64) -> Result<Self> {
        Self::new(vec![GmmComponent { weight: 1.0, mean, variance, label: 0 }])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    /// Total weight of each label, i.e. `q(y)`.
    pub fn label_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.n_labels];
        for c in &self.components {
            w[c.label] += c.weight;
        }
        w
    }

    /// Components of `q(x | y)` (or `q(x)` for `None`) with renormalized weights.
    pub fn conditional(&self, label: Option<usize>) -> Result<Vec<GmmComponent>> {
        match label {
            None => Ok(self.components.clone()),
            Some(y) if y < self.n_labels => {
                let sel: Vec<_> = self.components.iter().filter(|c| c.label == y).cloned().collect();
                let total: f64 = sel.iter().map(|c| c.weight).sum();
                Ok(sel.into_iter().map(|c| GmmComponent { weight: c.weight / total, ..c }).collect())
            }
            Some(y) => Err(Error::Config(format!("label {y} out of range (n_labels = {})", self.n_labels))),
        }
    }

    /// The mixture `q(x | y)` as its own spec (single label 0).
    pub fn restricted(&self, label: usize) -> Result<GmmSpec> {
        let comps = self.conditional(Some(label))?.into_iter().map(|c| GmmComponent { label: 0, ..c }).collect();
        GmmSpec::new(comps)
    }

    pub fn one_hot(&self, label: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_labels];
        v[label] = 1.0;
        v
    }

    /// Draws `(x1, component index)`; the component's label is the condition.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, label: Option<usize>) -> Result<(Vec<f64>, usize)> {
        let idx: Vec<usize> = (0..self.components.len())
            .filter(|&i| label.is_none_or(|y| self.components[i].label == y))
            .collect();
        if idx.is_empty() {
            return Err(Error::Config(format!("no component with label {label:?}")));
        }
        let total: f64 = idx.iter().map(|&i| self.components[i].weight).sum();
        let mut u = rng.random::<f64>() * total;
        let mut chosen = *idx.last().unwrap();
        for &i in &idx {
            u -= self.components[i].weight;
            if u < 0.0 {
                chosen = i;
                break;
            }
        }
        let c = &self.components[chosen];
        let s = c.variance.sqrt();
        let x = c
            .mean
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + s * z
            })
            .collect();
        Ok((x, chosen))
    }

    /// Index of the component with the largest posterior `q(i | x)`.
    pub fn assign(&self, x: &[f64]) -> usize {
        let comps: Vec<PathComponent> = self
            .components
            .iter()
            .map(|c| PathComponent { weight: c.weight, mean: c.mean.clone(), variance: c.variance.max(1e-300) })
            .collect();
        let r = responsibilities(&comps, x);
        r.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

fn check_t(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain { t })
    }
}

/// Marginal path `p_t(. | y)`: each component becomes
/// `N(alpha_t mu_i, alpha_t^2 s_i^2 + sigma_t^2)`.
pub fn marginal_path(spec: &GmmSpec, scheduler: Scheduler, t: f64, label: Option<usize>) -> Result<Vec<PathComponent>> {
    check_t(t)?;
    let v = scheduler.eval(t)?;
    Ok(spec
        .conditional(label)?
        .into_iter()
        .map(|c| PathComponent {
            weight: c.weight,
            mean: c.mean.iter().map(|m| v.alpha * m).collect(),
            variance: v.alpha * v.alpha * c.variance + v.sigma * v.sigma,
        })
        .collect())
}

fn log_normal_iso(x: &[f64], mean: &[f64], variance: f64) -> f64 {
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * sq / variance - 0.5 * d * (2.0 * PI * variance).ln()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log density of a path mixture at `x`.
pub fn path_log_density(components: &[PathComponent], x: &[f64]) -> f64 {
    let terms: Vec<f64> = components
        .iter()
        .map(|c| c.weight.ln() + log_normal_iso(x, &c.mean, c.variance))
        .collect();
    log_sum_exp(&terms)
}

fn responsibilities(components: &[PathComponent], x: &[f64]) -> Vec<f64> {
    let terms: Vec<f64> = components
        .iter()
        .map(|c| c.weight.ln() + log_normal_iso(x, &c.mean, c.variance))
        .collect();
    let lse = log_sum_exp(&terms);
    terms.iter().map(|t| (t - lse).exp()).collect()
}

fn nonsingular(path: &[PathComponent], t: f64) -> Result<()> {
    if path.iter().any(|c| c.variance <= 0.0) {
        return Err(Error::Singularity { t, reason: "degenerate marginal (point mass at t = 1)" });
    }
    Ok(())
}

/// Target velocity `u_t(x | y)`: the posterior expectation of the
/// single-point velocity over `x1`, in closed form.
pub fn oracle_velocity(spec: &GmmSpec, scheduler: Scheduler, t: f64, x: &[f64], label: Option<usize>) -> Result<Vec<f64>> {
    check_len("oracle_velocity x", spec.dim(), x.len())?;
    let v = scheduler.eval(t)?;
    let path = marginal_path(spec, scheduler, t, label)?;
    nonsingular(&path, t)?;
    let data = spec.conditional(label)?;
    let r = responsibilities(&path, x);
    let mut out = vec![0.0; x.len()];
    for ((c, p), &ri) in data.iter().zip(&path).zip(&r) {
        if ri == 0.0 {
            continue;
        }
        // posterior mean m = mu + alpha s^2 / v (x - alpha mu);
        // (sigma_dot/sigma)(x - alpha m) = sigma_dot sigma (x - alpha mu) / v
        let gain = v.alpha * c.variance / p.variance;
        let drift = v.sigma_dot * v.sigma / p.variance;
        for j in 0..x.len() {
            let resid = x[j] - v.alpha * c.mean[j];
            let post_mean = c.mean[j] + gain * resid;
            out[j] += ri * (drift * resid + v.alpha_dot * post_mean);
        }
    }
    Ok(out)
}

/// Score `grad_x log p_t(x | y)`.
pub fn oracle_score(spec: &GmmSpec, scheduler: Scheduler, t: f64, x: &[f64], label: Option<usize>) -> Result<Vec<f64>> {
    check_len("oracle_score x", spec.dim(), x.len())?;
    let path = marginal_path(spec, scheduler, t, label)?;
    nonsingular(&path, t)?;
    let r = responsibilities(&path, x);
    let mut out = vec![0.0; x.len()];
    for (p, &ri) in path.iter().zip(&r) {
        for j in 0..x.len() {
            out[j] -= ri * (x[j] - p.mean[j]) / p.variance;
        }
    }
    Ok(out)
}

/// The exact target field of a mixture as a [`VelocityField`]; conditions
/// are one-hot label vectors (argmax is taken).
#[derive(Clone, Debug)]
pub struct OracleField {
    pub spec: GmmSpec,
    pub scheduler: Scheduler,
}

impl OracleField {
    pub fn new(spec: GmmSpec, scheduler: Scheduler) -> Self {
        Self { spec, scheduler }
    }
}

impl VelocityField for OracleField {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn cond_dim(&self) -> usize {
        self.spec.n_labels()
    }

    fn velocity(&self, t: f64, x: ArrayView2<f64>, cond: Option<ArrayView2<f64>>) -> Result<Array2<f64>> {
        check_len("oracle field dim", self.dim(), x.ncols())?;
        let mut out = Array2::zeros(x.raw_dim());
        for (r, row) in x.rows().into_iter().enumerate() {
            let label = match &cond {
                Some(c) => {
                    check_len("oracle condition dim", self.cond_dim(), c.ncols())?;
                    let crow = c.row(r);
                    Some(crow.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap())
                }
                None => None,
            };
            let xs = row.to_vec();
            let u = oracle_velocity(&self.spec, self.scheduler, t, &xs, label)?;
            out.row_mut(r).assign(&ndarray::ArrayView1::from(&u));
        }
        Ok(out)
    }
}

/// Exact fields of two unrelated mixtures: `uncond` under the null
/// condition and `cond` under any condition (`k = 1`, value ignored).
#[derive(Clone, Debug)]
pub struct PairField {
    pub uncond: GmmSpec,
    pub cond: GmmSpec,
    pub scheduler: Scheduler,
}

impl PairField {
    pub fn new(uncond: GmmSpec, cond: GmmSpec, scheduler: Scheduler) -> Result<Self> {
        check_len("pair field dims", uncond.dim(), cond.dim())?;
        Ok(Self { uncond, cond, scheduler })
    }
}

impl VelocityField for PairField {
    fn dim(&self) -> usize {
        self.uncond.dim()
    }

    fn cond_dim(&self) -> usize {
        1
    }

    fn velocity(&self, t: f64, x: ArrayView2<f64>, cond: Option<ArrayView2<f64>>) -> Result<Array2<f64>> {
        check_len("pair field dim", self.dim(), x.ncols())?;
        let spec = if cond.is_some() { &self.cond } else { &self.uncond };
        let mut out = Array2::zeros(x.raw_dim());
        for (r, row) in x.rows().into_iter().enumerate() {
            let u = oracle_velocity(spec, self.scheduler, t, &row.to_vec(), None)?;
            out.row_mut(r).assign(&ndarray::ArrayView1::from(&u));
        }
        Ok(out)
    }
}

/// Training pairs drawn from a mixture. Conditional data carries one-hot
/// labels; unconditional data has no condition at all (`k = 0`).
#[derive(Clone, Debug)]
pub struct GmmData {
    pub spec: GmmSpec,
    pub conditional: bool,
}

impl DataSource for GmmData {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn cond_dim(&self) -> usize {
        if self.conditional {
            self.spec.n_labels()
        } else {
            0
        }
    }

    fn sample_batch(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
        let d = self.spec.dim();
        let mut x = Array2::zeros((n, d));
        let mut y = Array2::zeros((n, self.cond_dim()));
        for i in 0..n {
            let (xi, comp) = self.spec.sample(rng, None)?;
            x.row_mut(i).assign(&ndarray::ArrayView1::from(&xi));
            if self.conditional {
                y[[i, self.spec.components()[comp].label]] = 1.0;
            }
        }
        Ok((x, self.conditional.then_some(y)))
    }
}

/// The guided target `q~(x | y) ∝ q(x)^(1 - omega) q(x | y)^omega`.
#[derive(Clone, Debug, PartialEq)]
pub struct TemperedTarget {
    pub omega: f64,
    uncond: GmmSpec,
    cond: GmmSpec,
}

impl TemperedTarget {
    /// `q` is the full mixture of `base`, `q(. | y)` its `label` components.
    pub fn new(omega: f64, base: &GmmSpec, label: usize) -> Result<Self> {
        let cond = base.restricted(label)?;
        Self::from_pair(omega, base.clone(), cond)
    }

    /// Explicit unconditional and conditional distributions.
    pub fn from_pair(omega: f64, uncond: GmmSpec, cond: GmmSpec) -> Result<Self> {
        check_len("tempered target dims", uncond.dim(), cond.dim())?;
        let target = Self { omega, uncond, cond };
        target.check_normalizable()?;
        Ok(target)
    }

    fn check_normalizable(&self) -> Result<()> {
        let widest = |s: &GmmSpec| s.components().iter().map(|c| c.variance).fold(0.0, f64::max);
        let (vq, vy) = (widest(&self.uncond), widest(&self.cond));
        if vq == 0.0 || vy == 0.0 {
            return Err(Error::Config("tempered density needs positive component variances".into()));
        }
        // leading quadratic decay rate of the log density
        let precision = (1.0 - self.omega) / vq + self.omega / vy;
        if precision <= 0.0 {
            return Err(Error::Numeric(format!(
                "tempered target with omega = {} is not normalizable (precision {precision})",
                self.omega
            )));
        }
        Ok(())
    }

    fn as_path(spec: &GmmSpec) -> Vec<PathComponent> {
        spec.components()
            .iter()
            .map(|c| PathComponent { weight: c.weight, mean: c.mean.clone(), variance: c.variance })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_len("tempered x", self.uncond.dim(), x.len())?;
        let lq = path_log_density(&Self::as_path(&self.uncond), x);
        let ly = path_log_density(&Self::as_path(&self.cond), x);
        Ok((1.0 - self.omega) * lq + self.omega * ly)
    }

    /// Unnormalized density `q(x)^(1-omega) q(x|y)^omega`.
    pub fn density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_density(x)?.exp())
    }

    /// Exact `(mean, variance)` when both `q` and `q(. | y)` are single
    /// Gaussians; `None` for genuine mixtures.
    pub fn gaussian_form(&self) -> Option<(Vec<f64>, f64)> {
        let (q, y) = match (self.uncond.components(), self.cond.components()) {
            ([q], [y]) => (q, y),
            _ => return None,
        };
        let precision = (1.0 - self.omega) / q.variance + self.omega / y.variance;
        let mean = q
            .mean
            .iter()
            .zip(&y.mean)
            .map(|(mq, my)| ((1.0 - self.omega) * mq / q.variance + self.omega * my / y.variance) / precision)
            .collect();
        Some((mean, 1.0 / precision))
    }
}

/// Guided samples with the label each was conditioned on and the mixture
/// component it lands in.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelledSamples {
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
    pub components: Vec<usize>,
    pub model_calls: u64,
}

impl LabelledSamples {
    /// Fraction of samples whose assigned component carries their label.
    pub fn purity(&self, spec: &GmmSpec) -> f64 {
        let hits = self.labels.iter().zip(&self.components).filter(|(&y, &c)| spec.components()[c].label == y).count();
        hits as f64 / self.labels.len().max(1) as f64
    }

    /// Number of samples assigned to each component.
    pub fn component_counts(&self, spec: &GmmSpec) -> Vec<u64> {
        let mut counts = vec![0u64; spec.components().len()];
        for &c in &self.components {
            counts[c] += 1;
        }
        counts
    }
}

/// Draws `n` labels from `q(y)`, then one guided sample per label. Labels
/// come from stream 0 of `seed` (shared by every guidance setting); label
/// `y` samples with seed `seed + 1 + y`. A field without conditions is
/// sampled unconditionally and every label is recorded as the assigned one.
pub fn sample_labelled<F: VelocityField + ?Sized>(
    field: &F,
    spec: &GmmSpec,
    guidance: &GuidanceConfig,
    n: usize,
    seed: u64,
    exec: Execution,
) -> Result<LabelledSamples> {
    check_len("field dim", spec.dim(), field.dim())?;
    let d = spec.dim();
    if field.cond_dim() == 0 {
        let req = SampleRequest { guidance: *guidance, cond: None, clamp: None, seed };
        let (x, stats) = sample_many(field, &req, n, exec)?;
        let components: Vec<usize> = x.rows().into_iter().map(|r| spec.assign(r.as_slice().unwrap())).collect();
        let labels = components.iter().map(|&c| spec.components()[c].label).collect();
        return Ok(LabelledSamples { x, labels, components, model_calls: stats.model_calls });
    }
    check_len("field condition dim", spec.n_labels(), field.cond_dim())?;
    let weights = spec.label_weights();
    let mut rng = crate::par::stream_rng(seed, 0);
    let labels: Vec<usize> = (0..n)
        .map(|_| {
            let mut u: f64 = rng.random();
            for (y, w) in weights.iter().enumerate() {
                u -= w;
                if u < 0.0 {
                    return y;
                }
            }
            weights.len() - 1
        })
        .collect();
    let mut x = Array2::zeros((n, d));
    let mut calls = 0;
    for y in 0..spec.n_labels() {
        let rows: Vec<usize> = (0..n).filter(|&i| labels[i] == y).collect();
        if rows.is_empty() {
            continue;
        }
        let req = SampleRequest { guidance: *guidance, cond: Some(spec.one_hot(y)), clamp: None, seed: seed.wrapping_add(1 + y as u64) };
        let (xy, stats) = sample_many(field, &req, rows.len(), exec)?;
        calls += stats.model_calls;
        for (k, &i) in rows.iter().enumerate() {
            x.row_mut(i).assign(&xy.row(k));
        }
    }
    let components = x.rows().into_iter().map(|r| spec.assign(r.as_slice().unwrap())).collect();
    Ok(LabelledSamples { x, labels, components, model_calls: calls })
}
