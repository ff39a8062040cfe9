//! `bench`: wall time of guided sampling for one batch against step count
//! and batch size.

use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

use super::config::RunConfig;
use super::csv_out::CsvOut;
use super::{start, svg, Base};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Activation, ModelConfig, VelocityModel};
use crate::par::stream_rng;
use crate::sampler::{integrate, GuidanceConfig, Solver};
use crate::stats::{linear_fit, mean, sem};

pub const TIMING_SCHEMA: &str = "gflow.timing.v1";
pub const TIMING_HEADER: [&str; 8] =
    ["batch_size", "n_ode", "nfe", "replications", "mean_seconds", "sem_seconds", "seconds_per_sample", "model_calls"];
pub const FIT_SCHEMA: &str = "gflow.timing-fit.v1";
pub const FIT_HEADER: [&str; 4] = ["batch_size", "slope_seconds_per_step", "intercept_seconds", "r2"];

pub fn run(mut cfg: RunConfig) -> Result<()> {
    let base = Base::read(&mut cfg)?;
    let model_path: Option<String> = cfg.optional("bench.model")?;
    let model_cfg = ModelConfig {
        dim: cfg.get("bench.dim", 64usize)?,
        cond_dim: cfg.get("bench.cond_dim", 1usize)?,
        widths: cfg.list("bench.widths", &[256, 256])?,
        activation: cfg.get("bench.activation", Activation::Mish)?,
        time_embed_dim: cfg.get("bench.time_embed_dim", 32usize)?,
        horizon: 0,
        scheduler: base.scheduler,
    };
    let batch_sizes = cfg.list("bench.batch_sizes", &[1usize, 16, 64])?;
    let n_odes = cfg.list("bench.n_ode", &[10usize, 25, 50, 100, 150, 200])?;
    let replications = cfg.get("bench.replications", 100usize)?;
    let warmup = cfg.get("bench.warmup", 3usize)?;
    let guidance = GuidanceConfig {
        omega: cfg.get("bench.omega", 2.0)?,
        n_ode: 1,
        solver: cfg.get("bench.solver", Solver::Euler)?,
        init_scale: 1.0,
    };
    for &n_ode in &n_odes {
        GuidanceConfig { n_ode, ..guidance }.validate()?;
    }
    if replications == 0 || batch_sizes.contains(&0) {
        return Err(Error::Config("bench.replications and bench.batch_sizes must be positive".into()));
    }
    let model = match &model_path {
        Some(p) => Checkpoint::load(Path::new(p))?.deployed_model(),
        None => {
            model_cfg.validate()?;
            VelocityModel::new(model_cfg, &mut stream_rng(base.seed, 0))?
        }
    };
    start(&cfg, &base.output)?;

    let d = model.config().dim;
    let k = model.config().cond_dim;
    let mut timing = CsvOut::create(&base.path("timing.csv"), TIMING_SCHEMA, &TIMING_HEADER)?;
    let mut fits = CsvOut::create(&base.path("timing_fit.csv"), FIT_SCHEMA, &FIT_HEADER)?;
    let mut series = Vec::new();
    for &b in &batch_sizes {
        let mut rng = stream_rng(base.seed, 1 + b as u64);
        let x0 = Array2::from_shape_simple_fn((b, d), || StandardNormal.sample(&mut rng));
        let cond = Array2::<f64>::zeros((b, k));
        let cond = (k > 0).then(|| cond.view());
        let grid: Vec<GuidanceConfig> = n_odes.iter().map(|&n_ode| GuidanceConfig { n_ode, ..guidance }).collect();
        for g in &grid {
            for _ in 0..warmup {
                integrate(&model, g, x0.clone(), cond, None)?;
            }
        }
        // replications are interleaved across cells so slow drift in machine
        // speed affects every step count alike
        let mut times = vec![Vec::with_capacity(replications); grid.len()];
        let mut calls = vec![0; grid.len()];
        for _ in 0..replications {
            for (i, g) in grid.iter().enumerate() {
                let t0 = Instant::now();
                let (x, stats) = integrate(&model, g, x0.clone(), cond, None)?;
                times[i].push(t0.elapsed().as_secs_f64());
                std::hint::black_box(x);
                calls[i] = stats.model_calls;
            }
        }
        let mut pts = Vec::new();
        for (i, g) in grid.iter().enumerate() {
            let m = mean(&times[i]);
            timing.row(&[
                b.to_string(),
                g.n_ode.to_string(),
                (g.n_ode as u64 * g.solver.evals_per_step() * 2).to_string(),
                replications.to_string(),
                m.to_string(),
                sem(&times[i]).to_string(),
                (m / b as f64).to_string(),
                calls[i].to_string(),
            ])?;
            pts.push((g.n_ode as f64, m));
        }
        if pts.len() >= 2 {
            let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
            let fit = linear_fit(&xs, &ys)?;
            fits.row(&[b.to_string(), fit.slope.to_string(), fit.intercept.to_string(), fit.r2.to_string()])?;
            eprintln!("batch {b}: {:.3e} s/step, r2 {:.5}", fit.slope, fit.r2);
        }
        series.push((format!("batch {b}"), pts));
    }
    timing.finish()?;
    fits.finish()?;
    std::fs::write(base.path("timing.svg"), svg::lines("sampling wall time", "n_ode", "seconds per batch", &series))?;
    Ok(())
}
