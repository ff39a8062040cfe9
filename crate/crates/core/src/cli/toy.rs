//! `train-toy` and `sample`.

use std::path::Path;

use super::config::RunConfig;
use super::csv_out::CsvOut;
use super::{start, svg, Base};
use crate::checkpoint::{Checkpoint, Normalization};
use crate::error::{Error, Result};
use crate::field::VelocityField;
use crate::fm::{TrainConfig, Trainer};
use crate::nn::{Activation, ModelConfig, VelocityModel};
use crate::oracle::{sample_labelled, GmmData, GmmSpec, OracleField};
use crate::par::{stream_rng, Execution};
use crate::sampler::{GuidanceConfig, Solver};
use crate::stats::multinomial_check;

pub const LOSS_SCHEMA: &str = "gflow.loss.v1";
pub const LOSS_HEADER: [&str; 2] = ["step", "loss"];
pub const SAMPLES_SCHEMA: &str = "gflow.samples.v1";
pub const SUMMARY_SCHEMA: &str = "gflow.sample-summary.v1";
pub const SUMMARY_HEADER: [&str; 7] = ["omega", "n", "purity", "weights_chi2", "weights_p", "max_abs_z", "model_calls"];
pub const CHECKPOINT_FILE: &str = "checkpoint.gflow";

/// `[data]`: the mixture and whether its labels are conditions.
fn read_data(cfg: &mut RunConfig) -> Result<(GmmSpec, bool)> {
    let kind: String = cfg.get("data.kind", "ring".to_string())?;
    let variance = cfg.get("data.variance", 0.05)?;
    match kind.as_str() {
        "ring" => {
            let n = cfg.get("data.components", 8usize)?;
            let radius = cfg.get("data.radius", 3.0)?;
            let conditional = cfg.get("data.conditional", true)?;
            Ok((GmmSpec::ring(n, radius, variance)?, conditional))
        }
        "gaussian" => {
            let mean = cfg.list("data.mean", &[0.0])?;
            let conditional = cfg.get("data.conditional", false)?;
            Ok((GmmSpec::gaussian(mean, variance)?, conditional))
        }
        other => Err(Error::Config(format!("unknown data.kind {other:?} (expected ring or gaussian)"))),
    }
}

fn read_model(cfg: &mut RunConfig, base: &Base, dim: usize, cond_dim: usize) -> Result<ModelConfig> {
    let m = ModelConfig {
        dim,
        cond_dim,
        widths: cfg.list("model.widths", &[128, 128])?,
        activation: cfg.get("model.activation", Activation::Mish)?,
        time_embed_dim: cfg.get("model.time_embed_dim", 32usize)?,
        horizon: 0,
        scheduler: base.scheduler,
    };
    m.validate()?;
    Ok(m)
}

pub(super) fn read_train(cfg: &mut RunConfig, prefix: &str, base: &Base, defaults: TrainConfig) -> Result<TrainConfig> {
    let k = |name: &str| format!("{prefix}.{name}");
    let t = TrainConfig {
        p_uncond: cfg.get(&k("p_uncond"), defaults.p_uncond)?,
        batch_size: cfg.get(&k("batch_size"), defaults.batch_size)?,
        iterations: cfg.get(&k("iterations"), defaults.iterations)?,
        seed: base.seed,
        scheduler: base.scheduler,
        lr: cfg.get(&k("lr"), defaults.lr)?,
        ema_decay: cfg.get(&k("ema_decay"), defaults.ema_decay)?,
        ema_every: cfg.get(&k("ema_every"), defaults.ema_every)?,
        checkpoint_every: cfg.get(&k("checkpoint_every"), defaults.checkpoint_every)?,
    };
    t.validate()?;
    Ok(t)
}

/// Runs `trainer` to `iterations`, appending one loss row per step and
/// saving a checkpoint every `checkpoint_every` steps and at the end.
pub(super) fn drive<D: crate::fm::DataSource + ?Sized>(
    mut trainer: Trainer,
    data: &D,
    iterations: u64,
    norm: &Normalization,
    ckpt_path: &Path,
    loss_path: &Path,
) -> Result<Trainer> {
    let mut csv = if trainer.step == 0 {
        CsvOut::create(loss_path, LOSS_SCHEMA, &LOSS_HEADER)?
    } else {
        truncate_loss(loss_path, trainer.step)?;
        CsvOut::append(loss_path, LOSS_SCHEMA, &LOSS_HEADER)?
    };
    let every = trainer.config.checkpoint_every;
    trainer.config.iterations = iterations;
    trainer.run_until(data, iterations, |t, loss| {
        csv.row(&[t.step.to_string(), loss.to_string()])?;
        if every > 0 && t.step % every == 0 && t.step < iterations {
            Checkpoint::from_trainer(t, norm.clone()).save(ckpt_path)?;
        }
        Ok(())
    })?;
    csv.finish()?;
    Checkpoint::from_trainer(&trainer, norm.clone()).save(ckpt_path)?;
    Ok(trainer)
}

/// Keeps the loss rows up to `step` so a resumed run continues the curve;
/// starts a fresh file when none exists.
fn truncate_loss(path: &Path, step: u64) -> Result<()> {
    let text = std::fs::read_to_string(path).unwrap_or_default();
    let mut kept = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i < 2 {
            kept.push(line.to_string());
            continue;
        }
        let s: u64 = line.split(',').next().and_then(|v| v.parse().ok()).unwrap_or(u64::MAX);
        if s <= step {
            kept.push(line.to_string());
        }
    }
    if kept.len() < 2 {
        CsvOut::create(path, LOSS_SCHEMA, &LOSS_HEADER)?.finish()?;
        return Ok(());
    }
    std::fs::write(path, kept.join("\n") + "\n")?;
    Ok(())
}

pub fn train_toy(mut cfg: RunConfig) -> Result<()> {
    let base = Base::read(&mut cfg)?;
    let (spec, conditional) = read_data(&mut cfg)?;
    let data = GmmData { spec, conditional };
    let model_cfg = read_model(&mut cfg, &base, data.spec.dim(), crate::fm::DataSource::cond_dim(&data))?;
    let defaults = TrainConfig { iterations: 50_000, batch_size: 128, lr: 1e-3, ..Default::default() };
    let train = read_train(&mut cfg, "train", &base, defaults)?;
    let resume: Option<String> = cfg.optional("train.resume")?;
    start(&cfg, &base.output)?;

    let trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(Path::new(&path))?;
            if ckpt.model.config() != &model_cfg {
                return Err(Error::Config(format!("checkpoint {path} was trained with a different model configuration")));
            }
            ckpt.into_trainer()?
        }
        None => Trainer::new(VelocityModel::new(model_cfg, &mut stream_rng(base.seed, 0))?, train.clone())?,
    };
    let trainer = drive(
        trainer,
        &data,
        train.iterations,
        &Normalization::default(),
        &base.path(CHECKPOINT_FILE),
        &base.path("loss.csv"),
    )?;
    eprintln!("trained {} steps; checkpoint at {}", trainer.step, base.path(CHECKPOINT_FILE).display());
    Ok(())
}

fn omega_tag(omega: f64) -> String {
    format!("{omega}").replace('.', "p").replace('-', "m")
}

pub fn sample(mut cfg: RunConfig) -> Result<()> {
    let base = Base::read(&mut cfg)?;
    let (spec, _) = read_data(&mut cfg)?;
    let field_kind: String = cfg.get("sample.field", "model".to_string())?;
    let model: Option<String> = cfg.optional("sample.model")?;
    let model_path = match field_kind.as_str() {
        "model" => Some(model.ok_or_else(|| Error::Config("sample.model is missing or empty (path to a trained checkpoint)".into()))?),
        "oracle" => None,
        other => return Err(Error::Config(format!("unknown sample.field {other:?} (expected model or oracle)"))),
    };
    let omegas = cfg.list("sample.omegas", &[1.0, 2.0, 3.0, 4.0])?;
    let n = cfg.get("sample.n_samples", 2000usize)?;
    let base_guidance = GuidanceConfig {
        omega: 1.0,
        n_ode: cfg.get("sample.n_ode", 50usize)?,
        solver: cfg.get("sample.solver", Solver::Midpoint)?,
        init_scale: cfg.get("sample.init_scale", 1.0)?,
    };
    base_guidance.validate()?;
    let write_svg = cfg.get("sample.svg", true)?;
    if n == 0 {
        return Err(Error::Config("sample.n_samples must be positive".into()));
    }
    start(&cfg, &base.output)?;

    let field: Box<dyn VelocityField> = match &model_path {
        Some(p) => {
            let ckpt = Checkpoint::load(Path::new(p))?;
            if ckpt.model.config().scheduler != base.scheduler {
                return Err(Error::Config(format!(
                    "checkpoint uses scheduler {}, config says {}",
                    ckpt.model.config().scheduler,
                    base.scheduler
                )));
            }
            Box::new(ckpt.deployed_model())
        }
        None => Box::new(OracleField::new(spec.clone(), base.scheduler)),
    };
    let d = spec.dim();
    let mut header: Vec<String> = vec!["omega".into(), "label".into()];
    header.extend((0..d).map(|j| format!("x{j}")));
    header.push("component".into());
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut samples_csv = CsvOut::create(&base.path("samples.csv"), SAMPLES_SCHEMA, &header_refs)?;
    let mut summary = CsvOut::create(&base.path("summary.csv"), SUMMARY_SCHEMA, &SUMMARY_HEADER)?;
    let weights: Vec<f64> = spec.components().iter().map(|c| c.weight).collect();
    for &omega in &omegas {
        let guidance = GuidanceConfig { omega, ..base_guidance };
        let out = sample_labelled(field.as_ref(), &spec, &guidance, n, base.seed, Execution::available_parallel())?;
        for i in 0..n {
            let mut row = vec![omega.to_string(), out.labels[i].to_string()];
            row.extend(out.x.row(i).iter().map(|v| v.to_string()));
            row.push(out.components[i].to_string());
            samples_csv.row(&row)?;
        }
        let (chi2, p, z) = if weights.len() > 1 {
            let m = multinomial_check(&out.component_counts(&spec), &weights)?;
            (m.chi2, m.p_value, m.max_abs_z())
        } else {
            (0.0, 1.0, 0.0)
        };
        summary.row(&[
            omega.to_string(),
            n.to_string(),
            out.purity(&spec).to_string(),
            chi2.to_string(),
            p.to_string(),
            z.to_string(),
            out.model_calls.to_string(),
        ])?;
        if write_svg && d >= 2 {
            let pts: Vec<(f64, f64, usize)> = (0..n).map(|i| (out.x[[i, 0]], out.x[[i, 1]], out.labels[i])).collect();
            let title = format!("guidance weight {omega}");
            std::fs::write(base.path(&format!("samples_omega_{}.svg", omega_tag(omega))), svg::scatter(&title, &pts))?;
        }
    }
    samples_csv.finish()?;
    summary.finish()?;
    Ok(())
}
