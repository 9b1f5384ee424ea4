//! ε-prediction training with bias-smoothness and integral-consistency
//! terms, initial-bias augmentation of the condition, and Adam.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use vimu_autodiff::{AdamConfig, AdamState, Graph, NormMode, Tensor, Var};

use crate::data::{ImuWindow, NormStats, CHANNELS};
use crate::denoiser::{init_weights, DenoiserCheckpoint, DenoiserConfig, DenoiserWeights, ForwardPass};
use crate::error::{Error, Result};
use crate::schedule::{build_schedule, chain_marginals, AxisSchedule, ChainMarginals, ScheduleConfig};
use crate::sim::NoiseParams;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhysicsNorm {
    #[default]
    L1,
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Cosine-anneal the learning rate from `lr` down to this value over the
    /// run; constant `lr` when unset.
    pub lr_final: Option<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub physics_norm: PhysicsNorm,
    /// Extend the integral term to the accelerometer channels.
    pub integral_on_accel: bool,
    /// Add a window-constant `N(0, σ_b0²)` offset to each condition window.
    pub b0_augmentation: bool,
    /// Share of batch elements whose `x_t` is drawn from the sampler's own
    /// marginal (chain started at pure noise) instead of the forward
    /// process. The target stays the noise consistent with `x_t`.
    pub chain_marginal_fraction: f64,
    pub model: DenoiserConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let s = ScheduleConfig::default();
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            lr_final: None,
            lambda1: 0.1,
            lambda2: 0.1,
            warmup_epochs: 10,
            seed: 0,
            steps: s.steps,
            beta_min: s.beta_min,
            beta_max: s.beta_max,
            physics_norm: PhysicsNorm::L1,
            integral_on_accel: false,
            b0_augmentation: true,
            chain_marginal_fraction: 0.5,
            model: DenoiserConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            steps: self.steps,
            beta_min: self.beta_min,
            beta_max: self.beta_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config(format!(
                "lambda1/lambda2 must be >= 0, got {}/{}",
                self.lambda1, self.lambda2
            )));
        }
        if !(0.0..=1.0).contains(&self.chain_marginal_fraction) {
            return Err(Error::Config(format!(
                "chain_marginal_fraction must be in [0, 1], got {}",
                self.chain_marginal_fraction
            )));
        }
        if let Some(f) = self.lr_final {
            if !(f > 0.0 && f <= self.lr) {
                return Err(Error::Config(format!("lr_final must be in (0, lr], got {f}")));
            }
        }
        self.adam().validate()?;
        self.schedule().validate()?;
        self.model.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    /// Learning rate of 0-based `step` within 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize, step: usize, steps_per_epoch: usize) -> f64 {
        match self.lr_final {
            None => self.lr,
            Some(f) => {
                // the first step runs at `lr`, the last at `lr_final`
                let last = (self.epochs * steps_per_epoch).saturating_sub(1).max(1) as f64;
                let done = ((epoch.max(1) - 1) * steps_per_epoch + step) as f64;
                let progress = (done / last).min(1.0);
                f + 0.5 * (self.lr - f) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }

    /// Physics terms are active for 1-based epochs strictly after warm-up.
    pub fn physics_active(&self, epoch: usize) -> bool {
        epoch > self.warmup_epochs
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub step: usize,
    pub l_simple: f64,
    pub l_smooth: f64,
    pub l_integral: f64,
    pub l_total: f64,
}

fn reduce(values: impl Iterator<Item = f64>, norm: PhysicsNorm) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += match norm {
            PhysicsNorm::L1 => v.abs(),
            PhysicsNorm::L2 => v * v,
        };
        n += 1;
    }
    s / n as f64
}

/// Mean squared error.
pub fn loss_simple(eps: &[f64], eps_hat: &[f64]) -> Result<f64> {
    if eps.len() != eps_hat.len() || eps.is_empty() {
        return Err(Error::Contract(format!(
            "loss_simple on {} vs {} values",
            eps.len(),
            eps_hat.len()
        )));
    }
    Ok(eps.iter().zip(eps_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / eps.len() as f64)
}

/// Mean |first difference| of `b = c − x̂0` over time, for channel-major
/// `channels × len` arrays in physical units. Every channel has the same
/// length, so this equals the average of the gyro-group and accel-group
/// means for six-channel input.
pub fn loss_smooth(x0_hat: &[f64], c: &[f64], len: usize, norm: PhysicsNorm) -> Result<f64> {
    if len < 2 {
        return Err(Error::Contract(format!("smoothness loss needs L >= 2, got {len}")));
    }
    if x0_hat.len() != c.len() || c.is_empty() || c.len() % len != 0 {
        return Err(Error::Contract(format!(
            "smoothness loss on {} vs {} values with L = {len}",
            x0_hat.len(),
            c.len()
        )));
    }
    let b: Vec<f64> = c.iter().zip(x0_hat).map(|(c, x)| c - x).collect();
    Ok(reduce(
        b.chunks(len).flat_map(|ch| ch.windows(2).map(|w| w[1] - w[0])),
        norm,
    ))
}

/// Mean |Σ x̂·dt − Σ gt·dt| of running sums over channels and times.
pub fn loss_integral(x0_hat: &[f64], gt: &[f64], len: usize, dt: f64, norm: PhysicsNorm) -> Result<f64> {
    if x0_hat.len() != gt.len() || gt.is_empty() || len == 0 || gt.len() % len != 0 {
        return Err(Error::Contract(format!(
            "integral loss on {} vs {} values with L = {len}",
            x0_hat.len(),
            gt.len()
        )));
    }
    let mut diffs = Vec::with_capacity(gt.len());
    for (a, b) in x0_hat.chunks(len).zip(gt.chunks(len)) {
        let (mut sa, mut sb) = (0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            sa += x * dt;
            sb += y * dt;
            diffs.push(sa - sb);
        }
    }
    Ok(reduce(diffs.into_iter(), norm))
}

/// Population std over windows of `mean(lowcost) − mean(reference)`, per
/// channel.
pub fn estimate_b0_std(lowcost: &[ImuWindow], reference: &[ImuWindow]) -> Result<[f64; CHANNELS]> {
    if lowcost.len() != reference.len() {
        return Err(Error::Contract(format!(
            "{} low-cost windows vs {} reference windows",
            lowcost.len(),
            reference.len()
        )));
    }
    if lowcost.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "b0 estimation needs at least 2 window pairs, got {}",
            lowcost.len()
        )));
    }
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    Ok(std::array::from_fn(|c| {
        let d: Vec<f64> = lowcost
            .iter()
            .zip(reference)
            .map(|(l, r)| mean(l.channel(c)) - mean(r.channel(c)))
            .collect();
        let m = mean(&d);
        (d.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d.len() as f64).sqrt()
    }))
}

/// Paired normalised windows plus what the physics terms need.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub lowcost: Vec<ImuWindow>,
    pub reference: Vec<ImuWindow>,
    pub stats: NormStats,
    /// Low-cost coefficients in physical units; the schedule is built from
    /// their normalised counterpart.
    pub noise_params: NoiseParams,
    pub dt: f64,
}

impl TrainingData {
    pub fn validate(&self, model: &DenoiserConfig) -> Result<()> {
        if self.lowcost.is_empty() {
            return Err(Error::InsufficientData("training set is empty".into()));
        }
        if self.lowcost.len() != self.reference.len() {
            return Err(Error::Contract(format!(
                "{} low-cost windows vs {} reference windows",
                self.lowcost.len(),
                self.reference.len()
            )));
        }
        if let Some(w) = self
            .lowcost
            .iter()
            .chain(&self.reference)
            .find(|w| w.len() != model.window_len)
        {
            return Err(Error::Config(format!(
                "window length {} does not match model window_len {}",
                w.len(),
                model.window_len
            )));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Contract(format!("dt {} is not positive", self.dt)));
        }
        self.stats.validate()
    }
}

/// Inputs of one step, fixed before the graph is built.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub t: Vec<usize>,
    /// Normalised target windows `[B, 6, L]`.
    pub x0: Tensor,
    /// Regression target: the noise consistent with `x_t` and `x0`.
    pub eps: Tensor,
    pub x_t: Tensor,
    /// Normalised (and possibly offset) condition `[B, 6, L]`.
    pub cond: Tensor,
}

/// Draws, per element in order: the step, the noise, the marginal choice
/// (when `chain` is given) and the condition offset (when `b0_std` is
/// given).
pub fn prepare_batch(
    data: &TrainingData,
    indices: &[usize],
    schedule: &AxisSchedule,
    b0_std: Option<&[f64; CHANNELS]>,
    chain: Option<(&ChainMarginals, f64)>,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedBatch> {
    let len = data.reference[0].len();
    let per = CHANNELS * len;
    let b = indices.len();
    let mut t = Vec::with_capacity(b);
    let mut x0 = Vec::with_capacity(b * per);
    let mut eps = Vec::with_capacity(b * per);
    let mut x_t = Vec::with_capacity(b * per);
    let mut cond = Vec::with_capacity(b * per);
    for &i in indices {
        let step = rng.random_range(0..schedule.steps());
        let mut e: Vec<f64> = (0..per).map(|_| rng.sample(StandardNormal)).collect();
        let target = data.reference[i].data();
        let from_chain = match chain {
            Some((_, frac)) => rng.random::<f64>() < frac,
            None => false,
        };
        match chain {
            Some((m, _)) if from_chain => {
                for ch in 0..CHANNELS {
                    let (a, v) = (m.mean_coef[ch][step], m.variance[ch][step].sqrt());
                    let ab = schedule.alpha_bar[ch][step];
                    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
                    for k in ch * len..(ch + 1) * len {
                        let x = a * target[k] + v * e[k];
                        x_t.push(x);
                        e[k] = (x - sa * target[k]) / sb;
                    }
                }
            }
            _ => x_t.extend(crate::schedule::q_sample(target, step, schedule, &e)?),
        }
        x0.extend_from_slice(target);
        eps.extend(e);
        let c = data.lowcost[i].data();
        match b0_std {
            Some(s) => {
                for ch in 0..CHANNELS {
                    let offset = s[ch] * rng.sample::<f64, _>(StandardNormal);
                    cond.extend(c[ch * len..(ch + 1) * len].iter().map(|v| v + offset));
                }
            }
            None => cond.extend_from_slice(c),
        }
        t.push(step);
    }
    let shape = vec![b, CHANNELS, len];
    Ok(PreparedBatch {
        t,
        x0: Tensor::new(shape.clone(), x0)?,
        eps: Tensor::new(shape.clone(), eps)?,
        x_t: Tensor::new(shape.clone(), x_t)?,
        cond: Tensor::new(shape, cond)?,
    })
}

/// Graph nodes of the loss for one batch.
pub struct LossGraph {
    pub total: Var,
    pub simple: Var,
    pub smooth: Var,
    pub integral: Var,
    pub pass: ForwardPass,
}

/// Per-element, per-axis constants broadcast to `[B, 6, L]`.
fn per_axis_tensor(batch: &PreparedBatch, f: impl Fn(usize, usize) -> f64) -> Tensor {
    let s = batch.x_t.shape();
    let (b, len) = (s[0], s[2]);
    let mut data = Vec::with_capacity(b * CHANNELS * len);
    for bi in 0..b {
        for ch in 0..CHANNELS {
            data.extend(std::iter::repeat(f(bi, ch)).take(len));
        }
    }
    Tensor::new(s.to_vec(), data).expect("consistent shape")
}

/// Builds `l_total` (and its parts) for a prepared batch.
///
/// The physics terms act on `x̂0 = (x_t − √(1−ᾱ)·ε̂)/√ᾱ` mapped back to
/// physical units with the normalisation statistics.
#[allow(clippy::too_many_arguments)]
pub fn loss_graph(
    g: &mut Graph,
    weights: &DenoiserWeights,
    params: &IndexMap<String, Var>,
    batch: &PreparedBatch,
    data: &TrainingData,
    schedule: &AxisSchedule,
    cfg: &TrainConfig,
    physics_on: bool,
    mode: NormMode,
) -> Result<LossGraph> {
    let x_t = g.constant(batch.x_t.clone());
    let cond = g.constant(batch.cond.clone());
    let pass = weights.forward(g, params, x_t, &batch.t, cond, mode)?;
    let eps = g.constant(batch.eps.clone());
    let diff = g.sub(pass.eps_hat, eps)?;
    let sq = g.square(diff);
    let simple = g.mean(sq);

    let st = &data.stats;
    let ab = |bi: usize, ch: usize| schedule.alpha_bar[ch][batch.t[bi]];
    // x̂0_phys = k0 + k1 ⊙ ε̂
    let s = batch.x_t.shape();
    let len = s[2];
    let xt = batch.x_t.data();
    let mut k0 = Vec::with_capacity(xt.len());
    for (bi, _) in batch.t.iter().enumerate() {
        for ch in 0..CHANNELS {
            let a = ab(bi, ch).sqrt();
            let base = (bi * CHANNELS + ch) * len;
            k0.extend(xt[base..base + len].iter().map(|x| x / a * st.std[ch] + st.mean[ch]));
        }
    }
    let k0 = Tensor::new(s.to_vec(), k0)?;
    let k1 = per_axis_tensor(batch, |bi, ch| {
        -st.std[ch] * (1.0 - ab(bi, ch)).sqrt() / ab(bi, ch).sqrt()
    });
    let k1 = g.constant(k1);
    let scaled = g.mul(pass.eps_hat, k1)?;

    // b = c_phys − x̂0_phys = (c_phys − k0) − k1 ⊙ ε̂
    let cond_phys: Vec<f64> = batch
        .cond
        .data()
        .chunks(len)
        .enumerate()
        .flat_map(|(row, v)| {
            let ch = row % CHANNELS;
            v.iter().map(move |x| x * st.std[ch] + st.mean[ch])
        })
        .collect();
    let d: Vec<f64> = cond_phys.iter().zip(k0.data()).map(|(c, k)| c - k).collect();
    let d = g.constant(Tensor::new(s.to_vec(), d)?);
    let bias = g.sub(d, scaled)?;
    let later = g.slice(bias, 2, 1, len)?;
    let earlier = g.slice(bias, 2, 0, len - 1)?;
    let step = g.sub(later, earlier)?;
    let smooth = physics_reduce(g, step, cfg.physics_norm);

    let k0 = g.constant(k0);
    let x0_phys = g.add(k0, scaled)?;
    let axes = if cfg.integral_on_accel { CHANNELS } else { 3 };
    let gen = g.slice(x0_phys, 1, 0, axes)?;
    let gt_phys: Vec<f64> = batch
        .x0
        .data()
        .chunks(len)
        .enumerate()
        .filter(|(row, _)| row % CHANNELS < axes)
        .flat_map(|(row, v)| {
            let ch = row % CHANNELS;
            v.iter().map(move |x| x * st.std[ch] + st.mean[ch])
        })
        .collect();
    let gt = g.constant(Tensor::new(vec![s[0], axes, len], gt_phys)?);
    let err = g.sub(gen, gt)?;
    let err = g.scale(err, data.dt);
    let err = g.cumsum(err)?;
    let integral = physics_reduce(g, err, cfg.physics_norm);

    let total = if physics_on {
        let a = g.scale(smooth, cfg.lambda1);
        let b = g.scale(integral, cfg.lambda2);
        let t = g.add(simple, a)?;
        g.add(t, b)?
    } else {
        simple
    };
    Ok(LossGraph {
        total,
        simple,
        smooth,
        integral,
        pass,
    })
}

fn physics_reduce(g: &mut Graph, x: Var, norm: PhysicsNorm) -> Var {
    let r = match norm {
        PhysicsNorm::L1 => g.abs(x),
        PhysicsNorm::L2 => g.square(x),
    };
    g.mean(r)
}

/// Mutable training state: weights, optimiser and the step RNG.
pub struct Trainer {
    pub weights: DenoiserWeights,
    pub adam: AdamState,
    pub schedule: AxisSchedule,
    pub marginals: ChainMarginals,
    pub b0_std: [f64; CHANNELS],
    pub rng: ChaCha8Rng,
    pub cfg: TrainConfig,
}

/// RNG stream for batch order and diffusion draws, separate from the one
/// used for weight initialisation.
pub fn training_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

impl Trainer {
    pub fn new(data: &TrainingData, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        data.validate(&cfg.model)?;
        let schedule = build_schedule(&data.noise_params.normalized(&data.stats), &cfg.schedule())?;
        let b0_std = if data.lowcost.len() >= 2 {
            estimate_b0_std(&data.lowcost, &data.reference)?
        } else {
            [0.0; CHANNELS]
        };
        Ok(Self {
            weights: init_weights(&cfg.model, cfg.seed)?,
            adam: AdamState::new(cfg.adam())?,
            marginals: chain_marginals(&schedule),
            schedule,
            b0_std,
            rng: training_rng(cfg.seed),
            cfg: cfg.clone(),
        })
    }

    /// One optimisation step on the windows `indices`.
    pub fn train_step(
        &mut self,
        data: &TrainingData,
        indices: &[usize],
        epoch: usize,
        step: usize,
    ) -> Result<LossReport> {
        let b0 = self.cfg.b0_augmentation.then_some(&self.b0_std);
        let chain =
            (self.cfg.chain_marginal_fraction > 0.0).then_some((&self.marginals, self.cfg.chain_marginal_fraction));
        let batch = prepare_batch(data, indices, &self.schedule, b0, chain, &mut self.rng)?;
        let physics_on = self.cfg.physics_active(epoch);
        let mut g = Graph::new();
        let params = self.weights.bind(&mut g);
        let lg = loss_graph(
            &mut g,
            &self.weights,
            &params,
            &batch,
            data,
            &self.schedule,
            &self.cfg,
            physics_on,
            NormMode::Train,
        )?;
        let value = |v: Var| g.value(v).item();
        let report = LossReport {
            epoch,
            step,
            l_simple: value(lg.simple)?,
            l_smooth: value(lg.smooth)?,
            l_integral: value(lg.integral)?,
            l_total: value(lg.total)?,
        };
        if ![report.l_simple, report.l_smooth, report.l_integral, report.l_total]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Numerical(format!(
                "non-finite loss at epoch {epoch}, step {step}: {report:?}"
            )));
        }
        g.backward(lg.total)?;
        let grads: Vec<Vec<f64>> = params
            .values()
            .zip(self.weights.params.values())
            .map(|(v, t)| g.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        if grads.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient at epoch {epoch}, step {step}"
            )));
        }
        self.adam.config.lr = self
            .cfg
            .lr_at(epoch, step, steps_per_epoch(data.lowcost.len(), self.cfg.batch_size));
        self.adam.step(
            self.weights
                .params
                .values_mut()
                .zip(&grads)
                .map(|(t, gr)| (t.data_mut(), gr.as_slice())),
        )?;
        self.weights.update_running_stats(&g, &lg.pass);
        Ok(report)
    }

    /// One pass over the data in shuffled order; `epoch` is 1-based.
    pub fn train_epoch(&mut self, data: &TrainingData, epoch: usize) -> Result<Vec<LossReport>> {
        let mut order: Vec<usize> = (0..data.lowcost.len()).collect();
        order.shuffle(&mut self.rng);
        order
            .chunks(self.cfg.batch_size)
            .enumerate()
            .map(|(step, idx)| self.train_step(data, idx, epoch, step))
            .collect()
    }

    pub fn checkpoint(&self, data: &TrainingData) -> Result<DenoiserCheckpoint> {
        Ok(DenoiserCheckpoint {
            weights: self.weights.clone(),
            norm_stats: data.stats.clone(),
            noise_params: data.noise_params.clone(),
            schedule: self.schedule.clone(),
            training: serde_json::json!({
                "config": serde_json::to_value(&self.cfg)?,
                "b0_std_normalized": self.b0_std,
                "steps_taken": self.adam.steps_taken(),
            }),
        })
    }
}

pub fn steps_per_epoch(windows: usize, batch_size: usize) -> usize {
    windows.div_ceil(batch_size)
}

/// Full training run. Deterministic given `cfg.seed`.
pub fn fit(data: &TrainingData, cfg: &TrainConfig) -> Result<(DenoiserCheckpoint, Vec<LossReport>)> {
    let mut trainer = Trainer::new(data, cfg)?;
    let mut history = Vec::with_capacity(cfg.epochs * steps_per_epoch(data.lowcost.len(), cfg.batch_size));
    for epoch in 1..=cfg.epochs {
        let reports = trainer.train_epoch(data, epoch)?;
        let mean = reports.iter().map(|r| r.l_total).sum::<f64>() / reports.len() as f64;
        log::info!("epoch {epoch}/{}: mean l_total {mean:.5}", cfg.epochs);
        history.extend(reports);
    }
    Ok((trainer.checkpoint(data)?, history))
}

pub const LOSS_CSV_HEADER: &str = "epoch,step,l_simple,l_smooth,l_integral,l_total";

pub fn save_loss_history(history: &[LossReport], path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "{LOSS_CSV_HEADER}").map_err(io)?;
    for r in history {
        writeln!(
            w,
            "{},{},{:e},{:e},{:e},{:e}",
            r.epoch, r.step, r.l_simple, r.l_smooth, r.l_integral, r.l_total
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_loss_history(path: &Path) -> Result<Vec<LossReport>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_simple_examples() {
        assert_eq!(loss_simple(&[0.3, -1.0], &[0.3, -1.0]).unwrap(), 0.0);
        assert_eq!(loss_simple(&[0.0; 4], &[1.0; 4]).unwrap(), 1.0);
        assert_eq!(loss_simple(&[0.0; 4], &[0.0, 0.0, 2.0, 2.0]).unwrap(), 2.0);
    }

    #[test]
    fn loss_smooth_examples() {
        let zeros = [0.0; 3];
        assert_eq!(loss_smooth(&zeros, &[0.0, 1.0, 0.0], 3, PhysicsNorm::L1).unwrap(), 1.0);
        let c = [2.0, 2.0, 2.0, -1.0, -1.0, -1.0];
        assert_eq!(loss_smooth(&[0.0; 6], &c, 3, PhysicsNorm::L1).unwrap(), 0.0);
        assert!(loss_smooth(&[0.0], &[0.0], 1, PhysicsNorm::L1).is_err());
    }

    #[test]
    fn loss_integral_examples() {
        let v = loss_integral(&[1.0, 1.0], &[0.0, 0.0], 2, 0.005, PhysicsNorm::L1).unwrap();
        assert!((v - 0.0075).abs() < 1e-15);
        assert_eq!(
            loss_integral(&[0.4, 0.1], &[0.4, 0.1], 2, 0.005, PhysicsNorm::L1).unwrap(),
            0.0
        );
    }

    #[test]
    fn cosine_learning_rate() {
        let cfg = TrainConfig {
            epochs: 2,
            lr: 1e-2,
            lr_final: Some(1e-4),
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(1, 0, 5), 1e-2);
        assert!((cfg.lr_at(2, 4, 5) - 1e-4).abs() < 1e-15);
        let lrs: Vec<f64> = (1..=2)
            .flat_map(|e| (0..5).map(move |s| (e, s)))
            .map(|(e, s)| cfg.lr_at(e, s, 5))
            .collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
        let mid = TrainConfig {
            epochs: 1,
            ..cfg.clone()
        };
        assert!((mid.lr_at(1, 2, 5) - (1e-4 + 0.5 * (1e-2 - 1e-4))).abs() < 1e-15);
        let flat = TrainConfig::default();
        assert_eq!(flat.lr_at(7, 3, 5), flat.lr);
        assert!(TrainConfig {
            lr_final: Some(0.5),
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn warm_up_gate() {
        let cfg = TrainConfig::default();
        assert!(!cfg.physics_active(10));
        assert!(cfg.physics_active(11));
    }
}
