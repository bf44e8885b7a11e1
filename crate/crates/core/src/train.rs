//! Adam optimisation of the network on augmented patch batches.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::data::{sample_batch, Dataset};
use crate::error::{Error, Result};
use crate::network::{Fdiwn, FdiwnConfig};
use crate::params::ModelParams;
use crate::tensor::Tensor;
use crate::weights::{self, RngState, TrainingState, WeightFile};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    /// LR patch side; HR patches are `patch · scale`.
    pub patch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// The learning rate halves every `decay_epochs` epochs.
    pub decay_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 16,
            patch: 48,
            lr: 2e-4,
            epochs: 1000,
            steps_per_epoch: 1000,
            decay_epochs: 200,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }

    /// Learning rate in effect for the (0-based) `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let period = (self.decay_epochs * self.steps_per_epoch) as u64;
        if period == 0 {
            return self.lr;
        }
        self.lr * 0.5f64.powi((step / period) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.patch == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("batch, patch and steps_per_epoch must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("invalid optimiser hyper-parameters".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction; moments are kept per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(params: &ModelParams<f32>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.tensor.shape())).collect::<Vec<_>>();
        Adam { beta1, beta2, eps, t: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, params: &mut ModelParams<f32>, grads: &[Tensor<f32>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "adam: {} gradients and {} parameters for {} moments",
                grads.len(),
                params.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = self.eps as f32;
        for (i, p) in params.tensors_mut().enumerate() {
            let g = &grads[i];
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch { op: "adam", lhs: p.shape(), rhs: g.shape() });
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Where a run writes its side outputs.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// CSV `step,loss,lr` sink; the header is written when `step == 0`.
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Checkpoint every this many steps (0 disables periodic checkpoints).
    pub checkpoint_every: u64,
    /// Stop early once this much wall-clock time has elapsed.
    pub time_limit: Option<Duration>,
}

/// Model, parameters and optimiser state of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Fdiwn,
    pub params: ModelParams<f32>,
    pub cfg: TrainConfig,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

const SAMPLER_STREAM: u64 = 1;

impl Trainer {
    /// Fresh run: parameters initialised and batches drawn from `cfg.seed`.
    pub fn new(model_cfg: FdiwnConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (model, params) = Fdiwn::new(model_cfg, cfg.seed)?;
        let adam = Adam::new(&params, cfg.beta1, cfg.beta2, cfg.eps);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SAMPLER_STREAM);
        Ok(Trainer { model, params, cfg, adam, rng, step: 0 })
    }

    /// Continue from a checkpoint written by [`Trainer::save_checkpoint`].
    pub fn resume(file: WeightFile, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let state = file.training.ok_or_else(|| Error::Format("weight file has no training state".into()))?;
        let model = Fdiwn::from_params(file.config, &file.params)?;
        let adam = Adam { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, t: state.step, m: state.m, v: state.v };
        Ok(Trainer { model, params: file.params, cfg, adam, rng: state.rng.restore(), step: state.step })
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr_at(self.step)
    }

    pub fn training_state(&self) -> TrainingState {
        TrainingState {
            step: self.step,
            lr: self.lr(),
            rng: RngState::capture(&self.rng),
            m: self.adam.m.clone(),
            v: self.adam.v.clone(),
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        weights::save(path, &self.model.config, &self.params, Some(&self.training_state()))
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        weights::save(path, &self.model.config, &self.params, None)
    }

    /// One optimisation step; returns the batch loss.
    pub fn step_once(&mut self, ds: &Dataset) -> Result<f32> {
        if ds.scale != self.model.config.scale {
            return Err(Error::Config(format!("dataset scale {} != model scale {}", ds.scale, self.model.config.scale)));
        }
        let (lr_batch, hr_batch) = sample_batch(ds, self.cfg.batch, self.cfg.patch, &mut self.rng)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let x = tape.constant(lr_batch);
        let target = tape.constant(hr_batch);
        let pred = self.model.forward(&mut tape, &bound, x)?;
        let loss = tape.l1_loss(pred, target)?;
        let loss_value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        let grads: Vec<Tensor<f32>> = bound.vars().iter().map(|&v| grads.take(v)).collect();
        drop(tape);
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Contract(format!("non-finite gradient for `{}`", self.params.name(self.params.ids().nth(i).unwrap()))));
        }
        let lr = self.lr();
        self.adam.step(&mut self.params, &grads, lr)?;
        if let Some((name, _)) = self.params.iter().find(|(_, p)| !p.tensor.is_finite()) {
            return Err(Error::Contract(format!("parameter `{name}` became non-finite")));
        }
        self.step += 1;
        Ok(loss_value)
    }

    /// Train until `total_steps` (or the time limit); returns this call's losses.
    pub fn run(&mut self, ds: &Dataset, total_steps: u64, mut opts: RunOptions<'_>) -> Result<Vec<f32>> {
        let start = Instant::now();
        let mut losses = Vec::new();
        if let Some(dir) = &opts.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        if self.step == 0 {
            if let Some(log) = opts.log.as_deref_mut() {
                writeln!(log, "step,loss,lr").map_err(|e| Error::io("loss log", e))?;
            }
        }
        while self.step < total_steps {
            if opts.time_limit.is_some_and(|t| start.elapsed() >= t) {
                break;
            }
            let lr = self.lr();
            let loss = self.step_once(ds)?;
            losses.push(loss);
            if let Some(log) = opts.log.as_deref_mut() {
                writeln!(log, "{},{},{}", self.step, loss, lr).map_err(|e| Error::io("loss log", e))?;
            }
            if let Some(dir) = &opts.checkpoint_dir {
                if opts.checkpoint_every > 0 && self.step.is_multiple_of(opts.checkpoint_every) {
                    self.save_checkpoint(&dir.join(format!("step{:07}.fdwn", self.step)))?;
                }
            }
        }
        if let Some(log) = opts.log.as_deref_mut() {
            log.flush().map_err(|e| Error::io("loss log", e))?;
        }
        Ok(losses)
    }
}

/// Synthetic training data used by a preset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticData {
    pub seed: u64,
    pub images: usize,
    pub size: usize,
}

/// Bundled model, optimiser and data settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub model: FdiwnConfig,
    pub train: TrainConfig,
    pub data: SyntheticData,
}

pub const PRESETS: &[&str] = &["smoke", "overfit", "tiny", "paper"];

pub fn preset(name: &str, scale: usize) -> Result<Preset> {
    let small = |channels: usize, wide: usize, n_groups: usize, n_blocks: usize| FdiwnConfig {
        scale,
        channels,
        wide,
        n_groups,
        n_blocks,
        sa_groups: channels / 2,
        cgs_groups: 4,
        ..FdiwnConfig::fdiwn(scale)
    };
    let desk = |batch, patch, lr, steps: usize, decay| TrainConfig {
        batch,
        patch,
        lr,
        epochs: 1,
        steps_per_epoch: steps,
        decay_epochs: decay,
        ..TrainConfig::default()
    };
    let p = match name {
        "smoke" => Preset {
            name: "smoke",
            model: small(8, 16, 1, 1),
            train: desk(4, 16, 2e-3, 200, 0),
            data: SyntheticData { seed: 11, images: 8, size: 24 * scale },
        },
        "overfit" => Preset {
            name: "overfit",
            model: small(8, 16, 1, 1),
            train: desk(4, 24, 2e-3, 500, 0),
            data: SyntheticData { seed: 12, images: 1, size: 24 * scale },
        },
        "tiny" => Preset {
            name: "tiny",
            model: small(16, 24, 2, 3),
            train: TrainConfig { epochs: 10, decay_epochs: 4, ..desk(8, 32, 2e-3, 250, 0) },
            data: SyntheticData { seed: 13, images: 60, size: 48 * scale },
        },
        "paper" => Preset {
            name: "paper",
            model: FdiwnConfig::fdiwn(scale),
            train: TrainConfig::default(),
            data: SyntheticData { seed: 14, images: 800, size: 96 * scale },
        },
        other => return Err(Error::Config(format!("unknown preset `{other}` (known: {})", PRESETS.join(", ")))),
    };
    p.model.validate()?;
    Ok(p)
}

impl Preset {
    pub fn dataset(&self) -> Result<Dataset> {
        let images = crate::synth::synthetic_dataset(self.data.seed, self.data.images, self.data.size, self.data.size);
        Dataset::from_images(images, self.model.scale)
    }
}
