//! Flow-model checkpoints: model header, parameters, Adam moments, EMA
//! shadow, trainer position and data normalization statistics.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container::{self, Kind, Reader, Writer};
use crate::error::{Error, Result};
use crate::fm::{TrainConfig, Trainer};
use crate::nn::{Activation, Adam, Ema, ModelConfig, VelocityModel};
use crate::scheduler::Scheduler;

/// Per-dimension data normalization plus the reward scale used for
/// conditioning values (empty for models that do not need it).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub reward_scale: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub step: u64,
    pub config: TrainConfig,
    pub rng: ChaCha8Rng,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: VelocityModel,
    pub adam: Option<Adam>,
    pub ema: Option<Ema>,
    pub trainer: Option<TrainerState>,
    pub norm: Normalization,
}

fn rng_words(rng: &ChaCha8Rng) -> Vec<u64> {
    let seed = rng.get_seed();
    let mut words: Vec<u64> = seed.chunks(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
    words.push(rng.get_stream());
    let pos = rng.get_word_pos();
    words.push(pos as u64);
    words.push((pos >> 64) as u64);
    words
}

fn rng_from_words(w: &[u64]) -> Result<ChaCha8Rng> {
    if w.len() != 7 {
        return Err(Error::Format(format!("rng state needs 7 words, got {}", w.len())));
    }
    let mut seed = [0u8; 32];
    for (i, word) in w[..4].iter().enumerate() {
        seed[i * 8..i * 8 + 8].copy_from_slice(&word.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(w[4]);
    rng.set_word_pos(w[5] as u128 | ((w[6] as u128) << 64));
    Ok(rng)
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, norm: Normalization) -> Self {
        Self {
            model: trainer.model.clone(),
            adam: Some(trainer.adam.clone()),
            ema: Some(trainer.ema.clone()),
            trainer: Some(TrainerState { step: trainer.step, config: trainer.config.clone(), rng: trainer.rng.clone() }),
            norm,
        }
    }

    /// Rebuilds the trainer exactly where it stopped.
    pub fn into_trainer(self) -> Result<Trainer> {
        let state = self.trainer.ok_or_else(|| Error::Format("checkpoint has no trainer state".into()))?;
        let adam = self.adam.ok_or_else(|| Error::Format("checkpoint has no optimizer state".into()))?;
        let ema = self.ema.ok_or_else(|| Error::Format("checkpoint has no EMA state".into()))?;
        Ok(Trainer { model: self.model, adam, ema, rng: state.rng, step: state.step, config: state.config })
    }

    /// The model to sample from: EMA parameters when present.
    pub fn deployed_model(&self) -> VelocityModel {
        match &self.ema {
            Some(ema) => {
                let mut m = self.model.clone();
                m.set_params(&ema.shadow).expect("ema shadow matches model");
                m
            }
            None => self.model.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.model.config();
        let mut w = Writer::new(Kind::FlowCheckpoint);
        w.u8(cfg.scheduler.code());
        w.u8(cfg.activation.code());
        w.u32(cfg.dim as u32);
        w.u32(cfg.cond_dim as u32);
        w.u32(cfg.horizon as u32);
        w.u32(cfg.time_embed_dim as u32);
        w.u32(cfg.widths.len() as u32);
        for &width in &cfg.widths {
            w.u32(width as u32);
        }
        w.section_f64(b"PARM", self.model.params());
        if let Some(adam) = &self.adam {
            w.section_f64(b"ADAM", &[adam.lr, adam.beta1, adam.beta2, adam.eps]);
            w.section_u64(b"ASTP", &[adam.step]);
            w.section_f64(b"ADMM", &adam.m);
            w.section_f64(b"ADMV", &adam.v);
        }
        if let Some(ema) = &self.ema {
            w.section_f64(b"EMAD", &[ema.decay]);
            w.section_u64(b"EMAN", &[ema.update_every]);
            w.section_f64(b"EMAP", &ema.shadow);
        }
        if let Some(st) = &self.trainer {
            let c = &st.config;
            w.section_u64(
                b"TRNS",
                &[st.step, c.batch_size as u64, c.iterations, c.seed, c.scheduler.code() as u64, c.ema_every, c.checkpoint_every],
            );
            w.section_f64(b"TRNF", &[c.p_uncond, c.lr, c.ema_decay]);
            w.section_u64(b"RNGS", &rng_words(&st.rng));
        }
        let n = &self.norm;
        w.section_f64(b"NMEA", &n.mean);
        w.section_f64(b"NSTD", &n.std);
        w.section_f64(b"NRWD", &[n.reward_scale, n.gamma]);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, Kind::FlowCheckpoint)?;
        let scheduler = Scheduler::from_code(r.u8()?).ok_or_else(|| Error::Format("unknown scheduler code".into()))?;
        let activation = Activation::from_code(r.u8()?).ok_or_else(|| Error::Format("unknown activation code".into()))?;
        let dim = r.u32()? as usize;
        let cond_dim = r.u32()? as usize;
        let horizon = r.u32()? as usize;
        let time_embed_dim = r.u32()? as usize;
        let n_widths = r.u32()? as usize;
        if n_widths > 1024 {
            return Err(Error::Format(format!("implausible layer count {n_widths}")));
        }
        let widths = (0..n_widths).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let config = ModelConfig { dim, cond_dim, widths, activation, time_embed_dim, horizon, scheduler };
        let mut model = VelocityModel::zeroed(config).map_err(|e| Error::Format(e.to_string()))?;
        let params = r.expect_f64(b"PARM")?;
        model.set_params(&params).map_err(|e| Error::Format(e.to_string()))?;

        let mut ckpt = Checkpoint { model, adam: None, ema: None, trainer: None, norm: Normalization::default() };
        let n_params = params.len();
        let mut adam_hyper: Option<Vec<f64>> = None;
        let mut adam_step = None;
        let mut adam_m = None;
        let mut ema_decay = None;
        let mut ema_every = None;
        let mut trainer_u = None;
        let mut trainer_f = None;
        while let Some((tag, payload)) = r.section()? {
            use container::Payload::*;
            match (&tag, payload) {
                (b"ADAM", F64(v)) if v.len() == 4 => adam_hyper = Some(v),
                (b"ASTP", U64(v)) if v.len() == 1 => adam_step = Some(v[0]),
                (b"ADMM", F64(v)) if v.len() == n_params => adam_m = Some(v),
                (b"ADMV", F64(v)) if v.len() == n_params => {
                    let (h, step, m) = (adam_hyper.take(), adam_step.take(), adam_m.take());
                    let (h, step, m) = match (h, step, m) {
                        (Some(h), Some(s), Some(m)) => (h, s, m),
                        _ => return Err(Error::Format("incomplete optimizer block".into())),
                    };
                    ckpt.adam = Some(Adam { lr: h[0], beta1: h[1], beta2: h[2], eps: h[3], step, m, v });
                }
                (b"EMAD", F64(v)) if v.len() == 1 => ema_decay = Some(v[0]),
                (b"EMAN", U64(v)) if v.len() == 1 => ema_every = Some(v[0]),
                (b"EMAP", F64(v)) if v.len() == n_params => {
                    let (decay, every) = match (ema_decay.take(), ema_every.take()) {
                        (Some(d), Some(e)) => (d, e),
                        _ => return Err(Error::Format("incomplete EMA block".into())),
                    };
                    ckpt.ema = Some(Ema { decay, update_every: every, shadow: v });
                }
                (b"TRNS", U64(v)) if v.len() == 7 => trainer_u = Some(v),
                (b"TRNF", F64(v)) if v.len() == 3 => trainer_f = Some(v),
                (b"RNGS", U64(v)) => {
                    let (u, f) = match (trainer_u.take(), trainer_f.take()) {
                        (Some(u), Some(f)) => (u, f),
                        _ => return Err(Error::Format("incomplete trainer block".into())),
                    };
                    let scheduler = Scheduler::from_code(u[4] as u8).ok_or_else(|| Error::Format("bad scheduler".into()))?;
                    let config = TrainConfig {
                        p_uncond: f[0],
                        batch_size: u[1] as usize,
                        iterations: u[2],
                        seed: u[3],
                        scheduler,
                        lr: f[1],
                        ema_decay: f[2],
                        ema_every: u[5],
                        checkpoint_every: u[6],
                    };
                    ckpt.trainer = Some(TrainerState { step: u[0], config, rng: rng_from_words(&v)? });
                }
                (b"NMEA", F64(v)) => ckpt.norm.mean = v,
                (b"NSTD", F64(v)) => ckpt.norm.std = v,
                (b"NRWD", F64(v)) if v.len() == 2 => {
                    ckpt.norm.reward_scale = v[0];
                    ckpt.norm.gamma = v[1];
                }
                (t, _) => return Err(Error::Format(format!("unexpected section {}", container::tag_str(t)))),
            }
        }
        Ok(ckpt)
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
