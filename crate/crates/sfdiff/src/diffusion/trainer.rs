//! Training loop: Adam over the noise-prediction objective, with
//! deterministic per-step RNG substreams and an optional checkpoint cadence.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array1, Array4, ArrayD, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, OptimizerState};
use super::nn::{UNet, GRID_SIDE, INPUT_CHANNELS, NOISE_EMB_SCALE};
use super::schedule::{NoiseSchedule, ScheduleConfig};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::rng::{substream, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossMask {
    /// Squared error averaged over observed cells only.
    #[default]
    ObservedOnly,
    /// Squared error averaged over the whole grid.
    FullGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss_mask: LossMask,
    pub schedule: ScheduleConfig,
    /// Steps between checkpoint saves; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 8,
            learning_rate: 5e-5,
            loss_mask: LossMask::default(),
            schedule: ScheduleConfig::default(),
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Adam optimizer with in-order moment buffers matching the network's
/// parameter traversal.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(net: &mut UNet, lr: f64) -> Self {
        let mut m = Vec::new();
        let mut v = Vec::new();
        net.visit_params(&mut |_, w, _| {
            m.push(ArrayD::zeros(w.raw_dim()));
            v.push(ArrayD::zeros(w.raw_dim()));
        });
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m, v }
    }

    pub fn step(&mut self, net: &mut UNet) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        net.visit_params(&mut |_, mut w, g| {
            let m = &mut ms[idx];
            let v = &mut vs[idx];
            for ((wi, &gi), (mi, vi)) in w.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *wi -= lr * mhat / (vhat.sqrt() + eps);
            }
            idx += 1;
        });
    }

    pub fn state(&self) -> OptimizerState {
        OptimizerState {
            t: self.t,
            m: self.m.iter().flat_map(|a| a.iter().copied()).collect(),
            v: self.v.iter().flat_map(|a| a.iter().copied()).collect(),
        }
    }

    pub fn restore(&mut self, state: &OptimizerState) -> Result<()> {
        let total: usize = self.m.iter().map(|a| a.len()).sum();
        if state.m.len() != total || state.v.len() != total {
            return Err(Error::Format(format!(
                "optimizer state holds {} moments, network needs {total}",
                state.m.len()
            )));
        }
        self.t = state.t;
        let mut off = 0;
        for (m, v) in self.m.iter_mut().zip(self.v.iter_mut()) {
            let n = m.len();
            for (i, slot) in m.iter_mut().enumerate() {
                *slot = state.m[off + i];
            }
            for (i, slot) in v.iter_mut().enumerate() {
                *slot = state.v[off + i];
            }
            off += n;
        }
        Ok(())
    }

    /// Rounds the moment buffers through f32, mirroring what a checkpoint
    /// save/load round trip would produce.
    pub fn round_to_f32(&mut self) {
        for a in self.m.iter_mut().chain(self.v.iter_mut()) {
            a.mapv_inplace(|x| x as f32 as f64);
        }
    }
}

/// Squared error between prediction and noise, averaged per the mask mode:
/// per-sample masked mean, then mean over the batch.
pub fn masked_loss(pred: &Array4<f64>, eps: &Array4<f64>, mask: &Array4<f64>, mode: LossMask) -> f64 {
    let n = pred.dim().0;
    let mut total = 0.0;
    for b in 0..n {
        let p = pred.index_axis(Axis(0), b);
        let e = eps.index_axis(Axis(0), b);
        let m = mask.index_axis(Axis(0), b);
        let (mut num, mut den) = (0.0, 0.0);
        match mode {
            LossMask::ObservedOnly => {
                for ((pv, ev), mv) in p.iter().zip(e.iter()).zip(m.iter()) {
                    num += mv * (pv - ev) * (pv - ev);
                    den += mv;
                }
            }
            LossMask::FullGrid => {
                for (pv, ev) in p.iter().zip(e.iter()) {
                    num += (pv - ev) * (pv - ev);
                }
                den = p.len() as f64;
            }
        }
        total += num / den;
    }
    total / n as f64
}

fn loss_gradient(pred: &Array4<f64>, eps: &Array4<f64>, mask: &Array4<f64>, mode: LossMask) -> Array4<f64> {
    let n = pred.dim().0;
    let mut dpred = Array4::<f64>::zeros(pred.raw_dim());
    for b in 0..n {
        let den = match mode {
            LossMask::ObservedOnly => mask.index_axis(Axis(0), b).sum(),
            LossMask::FullGrid => pred.index_axis(Axis(0), b).len() as f64,
        };
        let scale = 2.0 / (den * n as f64);
        let p = pred.index_axis(Axis(0), b);
        let e = eps.index_axis(Axis(0), b);
        let m = mask.index_axis(Axis(0), b);
        let mut d = dpred.index_axis_mut(Axis(0), b);
        for (((dv, pv), ev), mv) in d.iter_mut().zip(p.iter()).zip(e.iter()).zip(m.iter()) {
            let w = match mode {
                LossMask::ObservedOnly => *mv,
                LossMask::FullGrid => 1.0,
            };
            *dv = scale * w * (pv - ev);
        }
    }
    dpred
}

/// Assembled per-step training batch.
struct StepBatch {
    x: Array4<f64>,
    eps: Array4<f64>,
    mask: Array4<f64>,
    sg: Array1<f64>,
    gammas: Vec<f64>,
}

/// Draws conditioning noise, timesteps, and target noise for one batch, in
/// that order, from the step's RNG substream.
fn assemble_batch(batch: &[&Sample], schedule: &NoiseSchedule, rng: &mut impl Rng) -> StepBatch {
    let n = batch.len();
    let side = GRID_SIDE;
    let mut x = Array4::<f64>::zeros((n, INPUT_CHANNELS, side, side));
    let mut mask = Array4::<f64>::zeros((n, 1, side, side));
    for (b, sample) in batch.iter().enumerate() {
        let cond = super::build_conditioning(sample, rng);
        x.slice_mut(s![b, 1..4, .., ..]).assign(&cond);
        mask.slice_mut(s![b, 0, .., ..]).assign(&sample.mask.as_f64());
    }
    let t_count = schedule.len();
    let gammas: Vec<f64> = (0..n).map(|_| schedule.gammas[rng.random_range(0..t_count)]).collect();
    let mut eps = Array4::<f64>::zeros((n, 1, side, side));
    for b in 0..n {
        for i in 0..side {
            for j in 0..side {
                eps[[b, 0, i, j]] = rng.sample(StandardNormal);
            }
        }
    }
    let mut sg = Array1::<f64>::zeros(n);
    for (b, sample) in batch.iter().enumerate() {
        let g = gammas[b];
        sg[b] = NOISE_EMB_SCALE * g.sqrt();
        let (a, c) = (g.sqrt(), (1.0 - g).sqrt());
        for i in 0..side {
            for j in 0..side {
                x[[b, 0, i, j]] = a * sample.normalized[[i, j]] + c * eps[[b, 0, i, j]];
            }
        }
    }
    StepBatch { x, eps, mask, sg, gammas }
}

/// One optimizer update over a batch. Returns the pre-update loss.
pub fn training_step(
    net: &mut UNet,
    opt: &mut Adam,
    batch: &[&Sample],
    batch_ids: &[usize],
    schedule: &NoiseSchedule,
    mode: LossMask,
    step: u64,
    rng: &mut impl Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("training batch is empty".into()));
    }
    let sb = assemble_batch(batch, schedule, rng);
    let pred = net.forward(&sb.x, &sb.sg);
    let loss = masked_loss(&pred, &sb.eps, &sb.mask, mode);
    if !loss.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss {loss} at step {step}; gammas {:?}, batch ids {:?}",
            sb.gammas, batch_ids
        )));
    }
    let dpred = loss_gradient(&pred, &sb.eps, &sb.mask, mode);
    net.backward(&dpred);
    opt.step(net);
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: u64,
    pub losses: Vec<f64>,
}

/// Trains over the corpus in sequential batch order (no shuffling): step s
/// takes samples [s·B mod n …] wrapping by epoch. Step s draws all of its
/// randomness from the substream (seed, TrainStep, s). Writes a
/// `step,loss,wall_clock_s` CSV row per step and saves checkpoints at the
/// configured cadence. Parameters and moments are rounded through f32 after
/// every step, so a checkpoint captures the live state exactly and a
/// resumed run reproduces an uninterrupted run bit-exactly.
pub fn train(
    net: &mut UNet,
    corpus: &[Sample],
    cfg: &TrainerConfig,
    start_step: u64,
    resume_opt: Option<&OptimizerState>,
    checkpoint_path: Option<&Path>,
    mut loss_log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Contract("training corpus is empty".into()));
    }
    let schedule = cfg.schedule.build()?;
    let steps_per_epoch = corpus.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    if start_step > total_steps {
        return Err(Error::Config(format!(
            "resume step {start_step} exceeds the configured total of {total_steps} steps"
        )));
    }
    let mut opt = Adam::new(net, cfg.learning_rate);
    if let Some(state) = resume_opt {
        opt.restore(state)?;
    }
    if let Some(log) = loss_log.as_deref_mut() {
        if start_step == 0 {
            writeln!(log, "step,loss,wall_clock_s")?;
        }
    }
    let started = Instant::now();
    let mut losses = Vec::with_capacity((total_steps - start_step) as usize);
    let save = |net: &mut UNet, opt: &Adam, step: u64| -> Result<()> {
        if let Some(path) = checkpoint_path {
            save_checkpoint(path, net, &cfg.schedule, step, Some(&opt.state()))?;
        }
        Ok(())
    };
    for step in start_step..total_steps {
        let offset = (step as usize % steps_per_epoch) * cfg.batch_size;
        let end = (offset + cfg.batch_size).min(corpus.len());
        let batch: Vec<&Sample> = corpus[offset..end].iter().collect();
        let batch_ids: Vec<usize> = (offset..end).collect();
        let mut rng = substream(cfg.seed, Domain::TrainStep, step);
        let loss = training_step(net, &mut opt, &batch, &batch_ids, &schedule, cfg.loss_mask, step, &mut rng)?;
        net.visit_params(&mut |_, mut w, _| w.mapv_inplace(|x| x as f32 as f64));
        opt.round_to_f32();
        losses.push(loss);
        if let Some(log) = loss_log.as_deref_mut() {
            writeln!(log, "{},{:.9},{:.3}", step, loss, started.elapsed().as_secs_f64())?;
        }
        let done = step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every as u64 == 0 && done < total_steps {
            save(net, &opt, done)?;
        }
    }
    save(net, &opt, total_steps)?;
    Ok(TrainReport { steps: total_steps, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_training_sample, ProtocolConfig};
    use crate::diffusion::nn::DenoiserSpec;

    fn tiny_corpus(n: usize, seed: u64) -> Vec<Sample> {
        let protocol = ProtocolConfig::default();
        (0..n).map(|i| generate_training_sample(seed, i as u64, &protocol).unwrap()).collect()
    }

    #[test]
    fn exact_prediction_gives_zero_loss() {
        let mut rng = substream(1, Domain::TrainStep, 0);
        let eps = Array4::from_shape_simple_fn((2, 1, 8, 8), || rng.sample(StandardNormal));
        let mask = Array4::from_elem((2, 1, 8, 8), 1.0);
        assert_eq!(masked_loss(&eps, &eps, &mask, LossMask::ObservedOnly), 0.0);
        assert_eq!(masked_loss(&eps, &eps, &mask, LossMask::FullGrid), 0.0);
    }

    #[test]
    fn zero_prediction_loss_near_one() {
        let mut rng = substream(2, Domain::TrainStep, 0);
        let eps = Array4::from_shape_simple_fn((8, 1, 32, 32), || rng.sample(StandardNormal));
        let pred = Array4::zeros((8, 1, 32, 32));
        let mask = Array4::from_elem((8, 1, 32, 32), 1.0);
        let loss = masked_loss(&pred, &eps, &mask, LossMask::FullGrid);
        assert!((loss - 1.0).abs() < 0.05, "loss {loss}");
    }

    #[test]
    fn observed_only_loss_ignores_unobserved_cells() {
        let mut rng = substream(3, Domain::TrainStep, 0);
        let eps = Array4::from_shape_simple_fn((1, 1, 8, 8), || rng.sample(StandardNormal));
        let mut mask = Array4::zeros((1, 1, 8, 8));
        for k in 0..8 {
            mask[[0, 0, k, k]] = 1.0;
        }
        let mut pred = Array4::zeros((1, 1, 8, 8));
        let base = masked_loss(&pred, &eps, &mask, LossMask::ObservedOnly);
        pred[[0, 0, 0, 1]] = 100.0;
        pred[[0, 0, 7, 2]] = -50.0;
        let perturbed = masked_loss(&pred, &eps, &mask, LossMask::ObservedOnly);
        assert_eq!(base, perturbed);
        let full = masked_loss(&pred, &eps, &mask, LossMask::FullGrid);
        assert!(full > base);
    }

    #[test]
    fn first_step_loss_is_unit_variance() {
        // A freshly initialized network outputs exactly zero, so the first
        // training loss is the mean of ε² over the loss region.
        let corpus = tiny_corpus(8, 11);
        let mut net = UNet::init(DenoiserSpec { base: 8, ..Default::default() }).unwrap();
        let mut opt = Adam::new(&mut net, 1e-4);
        let schedule = ScheduleConfig::default().build().unwrap();
        let batch: Vec<&Sample> = corpus.iter().collect();
        let ids: Vec<usize> = (0..8).collect();
        let mut rng = substream(11, Domain::TrainStep, 0);
        let loss = training_step(&mut net, &mut opt, &batch, &ids, &schedule, LossMask::FullGrid, 0, &mut rng).unwrap();
        assert!((loss - 1.0).abs() < 0.05, "loss {loss}");
    }

    #[test]
    fn training_reduces_loss_on_tiny_problem() {
        let corpus = tiny_corpus(2, 5);
        let mut net = UNet::init(DenoiserSpec { base: 8, param_seed: 1, ..Default::default() }).unwrap();
        let cfg = TrainerConfig {
            epochs: 30,
            batch_size: 2,
            learning_rate: 1e-3,
            loss_mask: LossMask::FullGrid,
            seed: 7,
            ..Default::default()
        };
        let report = train(&mut net, &corpus, &cfg, 0, None, None, None).unwrap();
        assert_eq!(report.steps, 30);
        let head: f64 = report.losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = report.losses[25..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "head {head} tail {tail}");
    }

    #[test]
    fn identical_runs_produce_identical_losses() {
        let corpus = tiny_corpus(3, 9);
        let cfg = TrainerConfig {
            epochs: 4,
            batch_size: 2,
            learning_rate: 1e-3,
            seed: 13,
            ..Default::default()
        };
        let mut n1 = UNet::init(DenoiserSpec { base: 8, param_seed: 3, ..Default::default() }).unwrap();
        let mut n2 = UNet::init(DenoiserSpec { base: 8, param_seed: 3, ..Default::default() }).unwrap();
        let r1 = train(&mut n1, &corpus, &cfg, 0, None, None, None).unwrap();
        let r2 = train(&mut n2, &corpus, &cfg, 0, None, None, None).unwrap();
        assert_eq!(r1.losses, r2.losses);
    }

    #[test]
    fn resumed_training_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let full_path = dir.path().join("full.ckpt");
        let half_path = dir.path().join("half.ckpt");
        let corpus = tiny_corpus(4, 21);
        let spec = DenoiserSpec { base: 8, param_seed: 17, ..Default::default() };
        let full_cfg = TrainerConfig {
            epochs: 10,
            batch_size: 2,
            learning_rate: 1e-3,
            checkpoint_every: 10,
            seed: 23,
            ..Default::default()
        };

        let mut full_net = UNet::init(spec.clone()).unwrap();
        train(&mut full_net, &corpus, &full_cfg, 0, None, Some(&full_path), None).unwrap();

        let half_cfg = TrainerConfig { epochs: 5, ..full_cfg.clone() };
        let mut half_net = UNet::init(spec).unwrap();
        train(&mut half_net, &corpus, &half_cfg, 0, None, Some(&half_path), None).unwrap();
        let ckpt = crate::diffusion::checkpoint::load_checkpoint(&half_path).unwrap();
        assert_eq!(ckpt.train_steps, 10);
        let mut resumed = ckpt.restore_network().unwrap();
        train(
            &mut resumed,
            &corpus,
            &full_cfg,
            ckpt.train_steps,
            ckpt.optimizer.as_ref(),
            Some(&half_path),
            None,
        )
        .unwrap();

        let full_bytes = std::fs::read(&full_path).unwrap();
        let resumed_bytes = std::fs::read(&half_path).unwrap();
        assert_eq!(full_bytes, resumed_bytes);
    }

    #[test]
    fn config_validation() {
        assert!(TrainerConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainerConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainerConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainerConfig::default().validate().is_ok());
    }
}
