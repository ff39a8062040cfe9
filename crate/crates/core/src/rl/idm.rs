//! Inverse dynamics: an MLP from normalized `(s_t, s_{t+1})` to `a_t`,
//! kept at its best validation loss.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use super::dataset::{OfflineDataset, Split};
use super::env::{ACTION_DIM, STATE_DIM};
use crate::container::{self, Kind, Reader, Writer};
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Mlp};
use crate::par::stream_rng;

#[derive(Clone, Debug, PartialEq)]
pub struct IdmConfig {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub dropout: f64,
    pub lr: f64,
    pub iterations: u64,
    pub batch_size: usize,
    /// Validation loss is measured every `eval_every` steps and at the end.
    pub eval_every: u64,
    pub seed: u64,
}

impl Default for IdmConfig {
    fn default() -> Self {
        Self {
            widths: vec![1024, 1024],
            activation: Activation::Relu,
            dropout: 0.1,
            lr: 1e-4,
            iterations: 100_000,
            batch_size: 64,
            eval_every: 1000,
            seed: 0,
        }
    }
}

impl IdmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("inverse dynamics widths must be non-empty and positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.iterations == 0 || self.eval_every == 0 {
            return Err(Error::Config("inverse dynamics lr, batch size, iterations and eval interval must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InverseDynamics {
    mlp: Mlp,
    /// Validation loss of the kept parameters.
    pub val_loss: f64,
    /// Step at which the kept parameters were reached.
    pub step: u64,
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdmLogRow {
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub fn train_idm(dataset: &OfflineDataset, cfg: &IdmConfig) -> Result<(InverseDynamics, Vec<IdmLogRow>)> {
    cfg.validate()?;
    let (x, y) = dataset.transition_pairs(Split::Train);
    let (vx, vy) = dataset.transition_pairs(Split::Validation);
    if x.nrows() == 0 {
        return Err(Error::Config("no training transitions".into()));
    }
    let (vx, vy) = if vx.nrows() == 0 { (x.clone(), y.clone()) } else { (vx, vy) };
    let mut dims = vec![2 * STATE_DIM];
    dims.extend(&cfg.widths);
    dims.push(ACTION_DIM);
    let mut rng = stream_rng(cfg.seed, 0);
    let mut mlp = Mlp::new(dims, cfg.activation, cfg.dropout, &mut rng);
    let mut adam = Adam::new(mlp.params().len(), cfg.lr);
    let mut best = InverseDynamics { mlp: mlp.clone(), val_loss: f64::INFINITY, step: 0 };
    let mut log = Vec::new();
    let mut running = 0.0;
    let mut since = 0u64;
    let mut bx = Array2::zeros((cfg.batch_size, x.ncols()));
    let mut by = Array2::zeros((cfg.batch_size, y.ncols()));
    for step in 1..=cfg.iterations {
        for i in 0..cfg.batch_size {
            let r = rng.random_range(0..x.nrows());
            bx.row_mut(i).assign(&x.row(r));
            by.row_mut(i).assign(&y.row(r));
        }
        let (loss, grads) = mlp.loss_and_grad(bx.view(), by.view(), Some(&mut rng))?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("inverse dynamics loss is not finite at step {step}")));
        }
        adam.update(mlp.params_mut(), &grads)?;
        running += loss;
        since += 1;
        if step % cfg.eval_every == 0 || step == cfg.iterations {
            let val_loss = mse(&mlp, vx.view(), vy.view())?;
            log.push(IdmLogRow { step, train_loss: running / since as f64, val_loss });
            running = 0.0;
            since = 0;
            if val_loss < best.val_loss {
                best = InverseDynamics { mlp: mlp.clone(), val_loss, step };
            }
        }
    }
    Ok((best, log))
}

/// Mean over rows of the summed squared error, without dropout.
fn mse(mlp: &Mlp, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    let mut total = 0.0;
    for (cx, cy) in x.axis_chunks_iter(Axis(0), 4096).zip(y.axis_chunks_iter(Axis(0), 4096)) {
        let p = mlp.predict(cx)?;
        total += (&p - &cy).iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total / x.nrows().max(1) as f64)
}

impl InverseDynamics {
    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    /// Actions for rows `[s_t, s_{t+1}]` of normalized states.
    pub fn predict(&self, pairs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let out = self.mlp.predict(pairs)?;
        if let Some(row) = out.rows().into_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric(format!("inverse dynamics output is not finite for row {row}")));
        }
        Ok(out)
    }

    /// Error on the dataset's own transitions (ground-truth next states).
    pub fn replay_mse(&self, dataset: &OfflineDataset, split: Split) -> Result<f64> {
        let (x, y) = dataset.transition_pairs(split);
        mse(&self.mlp, x.view(), y.view())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.mlp.layout().dims();
        let mut w = Writer::new(Kind::InverseDynamics);
        w.u8(self.mlp.layout().activation().code());
        w.u32(dims.len() as u32);
        for &d in dims {
            w.u32(d as u32);
        }
        w.section_f64(b"PARM", self.mlp.params());
        w.section_f64(b"IDMF", &[self.mlp.dropout, self.val_loss]);
        w.section_u64(b"IDMS", &[self.step]);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, Kind::InverseDynamics)?;
        let activation = Activation::from_code(r.u8()?).ok_or_else(|| Error::Format("unknown activation code".into()))?;
        let n = r.u32()? as usize;
        if !(2..=64).contains(&n) {
            return Err(Error::Format(format!("implausible layer count {n}")));
        }
        let dims = (0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        if dims[0] != 2 * STATE_DIM || dims[n - 1] != ACTION_DIM {
            return Err(Error::Format(format!("inverse dynamics shape {dims:?} does not fit the environment")));
        }
        let params = r.expect_f64(b"PARM")?;
        let f = r.expect_f64(b"IDMF")?;
        let s = r.expect_u64(b"IDMS")?;
        if f.len() != 2 || s.len() != 1 {
            return Err(Error::Format("malformed inverse dynamics metadata".into()));
        }
        if r.section()?.is_some() {
            return Err(Error::Format("unexpected trailing section".into()));
        }
        let mut mlp = Mlp::zeroed(dims, activation, f[0]);
        if params.len() != mlp.params().len() {
            return Err(Error::Format(format!("expected {} parameters, got {}", mlp.params().len(), params.len())));
        }
        mlp.params_mut().copy_from_slice(&params);
        Ok(Self { mlp, val_loss: f[1], step: s[0] })
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
