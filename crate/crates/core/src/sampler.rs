//! Ancestral reverse diffusion conditioned on low-cost windows, and
//! series-level stitching.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use vimu_autodiff::Tensor;

use crate::data::{denormalize, normalize, ImuSeries, ImuWindow, CHANNELS, CHANNEL_NAMES};
use crate::denoiser::{DenoiserCheckpoint, DenoiserWeights};
use crate::error::{Error, Result};
use crate::schedule::AxisSchedule;

/// Anything that maps `(x_t, t, c)` batches of `[B, 6, L]` to ε̂.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &Tensor, t: &[usize], c: &Tensor) -> Result<Tensor>;
}

impl NoisePredictor for DenoiserWeights {
    fn predict_noise(&self, x_t: &Tensor, t: &[usize], c: &Tensor) -> Result<Tensor> {
        self.predict(x_t, t, c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum StitchMode {
    NonOverlapping,
    OverlapAverage { stride: usize },
}

impl StitchMode {
    pub fn name(&self) -> &'static str {
        match self {
            StitchMode::NonOverlapping => "non-overlapping",
            StitchMode::OverlapAverage { .. } => "overlap-average",
        }
    }

    pub fn stride(&self, len: usize) -> usize {
        match *self {
            StitchMode::NonOverlapping => len,
            StitchMode::OverlapAverage { stride } => stride,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub seed: u64,
    pub stitch_mode: StitchMode,
    /// Windows denoised together per network call.
    pub batch_size: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stitch_mode: StitchMode::NonOverlapping,
            batch_size: 16,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self, len: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("sampling batch_size must be positive".into()));
        }
        if let StitchMode::OverlapAverage { stride } = self.stitch_mode {
            if stride == 0 || stride > len {
                return Err(Error::Config(format!(
                    "overlap stride must be in 1..={len}, got {stride}"
                )));
            }
        }
        Ok(())
    }
}

/// Per axis and step: `β/√(1−ᾱ)`, `1/√α` and the posterior std.
#[derive(Clone, Debug, PartialEq)]
pub struct ReverseStepParams {
    pub coef_eps: [Vec<f64>; CHANNELS],
    pub inv_sqrt_alpha: [Vec<f64>; CHANNELS],
    pub sigma: [Vec<f64>; CHANNELS],
}

impl ReverseStepParams {
    pub fn new(schedule: &AxisSchedule) -> Self {
        let steps = schedule.steps();
        let per_axis = |f: &dyn Fn(usize, usize) -> f64| -> [Vec<f64>; CHANNELS] {
            std::array::from_fn(|i| (0..steps).map(|t| f(i, t)).collect())
        };
        Self {
            coef_eps: per_axis(&|i, t| schedule.beta[i][t] / (1.0 - schedule.alpha_bar[i][t]).sqrt()),
            inv_sqrt_alpha: per_axis(&|i, t| 1.0 / (1.0 - schedule.beta[i][t]).sqrt()),
            sigma: per_axis(&|i, t| {
                let v = schedule.beta[i][t] * (1.0 - schedule.alpha_bar_prev(i, t)) / (1.0 - schedule.alpha_bar[i][t]);
                v.max(0.0).sqrt()
            }),
        }
    }

    pub fn steps(&self) -> usize {
        self.sigma[0].len()
    }
}

/// One reverse step for a batch `[B, 6, L]`; `rngs` holds one generator
/// per batch element. Step 0 returns the posterior mean.
pub fn p_sample_step(
    x_t: &Tensor,
    t: usize,
    c: &Tensor,
    model: &dyn NoisePredictor,
    params: &ReverseStepParams,
    rngs: &mut [ChaCha8Rng],
) -> Result<Tensor> {
    if t >= params.steps() {
        return Err(Error::Contract(format!("step {t} outside 0..{}", params.steps())));
    }
    let b = x_t.shape()[0];
    if rngs.len() != b {
        return Err(Error::Contract(format!("{} generators for a batch of {b}", rngs.len())));
    }
    let eps = model.predict_noise(x_t, &vec![t; b], c)?;
    if eps.shape() != x_t.shape() {
        return Err(Error::Contract(format!(
            "predicted noise has shape {:?}, expected {:?}",
            eps.shape(),
            x_t.shape()
        )));
    }
    let len = x_t.shape()[2];
    let mut out = Vec::with_capacity(x_t.numel());
    for (row, (x, e)) in x_t.data().chunks(len).zip(eps.data().chunks(len)).enumerate() {
        let (bi, ch) = (row / CHANNELS, row % CHANNELS);
        let (k, a, s) = (
            params.coef_eps[ch][t],
            params.inv_sqrt_alpha[ch][t],
            params.sigma[ch][t],
        );
        let rng = &mut rngs[bi];
        for (x, e) in x.iter().zip(e) {
            let mean = a * (x - k * e);
            out.push(if t > 0 {
                mean + s * rng.sample::<f64, _>(StandardNormal)
            } else {
                mean
            });
        }
    }
    Ok(Tensor::new(x_t.shape().to_vec(), out)?)
}

/// Runs the full chain for a batch of normalised condition windows, each
/// with its own seed. Windows are independent of how they are batched.
pub fn generate_batch(
    conds: &[&ImuWindow],
    seeds: &[u64],
    model: &dyn NoisePredictor,
    params: &ReverseStepParams,
) -> Result<Vec<Vec<f64>>> {
    let Some(first) = conds.first() else {
        return Ok(Vec::new());
    };
    let len = first.len();
    if conds.iter().any(|w| w.len() != len) || seeds.len() != conds.len() {
        return Err(Error::Contract(
            "condition windows and seeds must be equal in length and count".into(),
        ));
    }
    let shape = vec![conds.len(), CHANNELS, len];
    let c = Tensor::new(
        shape.clone(),
        conds.iter().flat_map(|w| w.data().iter().copied()).collect(),
    )?;
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut x = Vec::with_capacity(c.numel());
    for rng in &mut rngs {
        x.extend((0..CHANNELS * len).map(|_| rng.sample::<f64, _>(StandardNormal)));
    }
    let mut x = Tensor::new(shape, x)?;
    for t in (0..params.steps()).rev() {
        x = p_sample_step(&x, t, &c, model, params, &mut rngs)?;
        if let Some(pos) = x.data().iter().position(|v| !v.is_finite()) {
            let ch = (pos / len) % CHANNELS;
            return Err(Error::Numerical(format!(
                "non-finite value on axis {} during reverse step {t}",
                CHANNEL_NAMES[ch]
            )));
        }
    }
    Ok(x.into_data().chunks(CHANNELS * len).map(<[f64]>::to_vec).collect())
}

fn check_window(ckpt: &DenoiserCheckpoint, len: usize) -> Result<()> {
    let expected = ckpt.config().window_len;
    if len != expected {
        return Err(Error::Config(format!(
            "window length {len} does not match checkpoint window_len {expected}"
        )));
    }
    Ok(())
}

/// Normalised `6 × L` condition in, normalised virtual window out.
pub fn generate_window(c: &ImuWindow, ckpt: &DenoiserCheckpoint, seed: u64) -> Result<ImuWindow> {
    check_window(ckpt, c.len())?;
    let params = ReverseStepParams::new(&ckpt.schedule);
    let out = generate_batch(&[c], &[seed], &ckpt.weights, &params)?.remove(0);
    ImuWindow::new(out, c.len(), c.window_index, c.source_offset)
}

/// Generated series plus any samples that were copied through unchanged.
#[derive(Clone, Debug)]
pub struct GeneratedSeries {
    pub series: ImuSeries,
    pub windows: usize,
    pub passthrough: usize,
    pub warnings: Vec<String>,
}

/// Windows a raw low-cost series, generates each window with seed
/// `seed ^ index`, stitches and denormalises with the checkpoint
/// statistics. Samples not covered by any window keep their input value.
pub fn generate_series(lowcost: &ImuSeries, ckpt: &DenoiserCheckpoint, cfg: &SampleConfig) -> Result<GeneratedSeries> {
    let len = ckpt.config().window_len;
    cfg.validate(len)?;
    let n = lowcost.len();
    if n < len {
        return Err(Error::InsufficientData(format!(
            "series of {n} samples is shorter than the window length {len}"
        )));
    }
    let stride = cfg.stitch_mode.stride(len);
    let count = (n - len) / stride + 1;
    let stats = &ckpt.norm_stats;
    let params = ReverseStepParams::new(&ckpt.schedule);
    let conds: Vec<ImuWindow> = (0..count)
        .map(|w| {
            let start = w * stride;
            let data = (0..CHANNELS)
                .flat_map(|c| lowcost.channel(c)[start..start + len].iter().copied())
                .collect();
            ImuWindow::new(data, len, w, start).map(|raw| normalize(&raw, stats))
        })
        .collect::<Result<_>>()?;

    let mut sum: [Vec<f64>; CHANNELS] = std::array::from_fn(|_| vec![0.0; n]);
    let mut hits = vec![0u32; n];
    for (b, chunk) in conds.chunks(cfg.batch_size).enumerate() {
        let refs: Vec<&ImuWindow> = chunk.iter().collect();
        let seeds: Vec<u64> = chunk.iter().map(|w| cfg.seed ^ w.window_index as u64).collect();
        let outs = generate_batch(&refs, &seeds, &ckpt.weights, &params)?;
        for (w, out) in chunk.iter().zip(outs) {
            let phys = denormalize(&ImuWindow::new(out, len, w.window_index, w.source_offset)?, stats);
            for (c, acc) in sum.iter_mut().enumerate() {
                for (k, v) in phys.channel(c).iter().enumerate() {
                    acc[w.source_offset + k] += v;
                }
            }
            for h in &mut hits[w.source_offset..w.source_offset + len] {
                *h += 1;
            }
        }
        log::debug!("generated window batch {} ({} windows)", b + 1, chunk.len());
    }

    let mut passthrough = 0;
    for (k, &h) in hits.iter().enumerate() {
        for (c, acc) in sum.iter_mut().enumerate() {
            acc[k] = if h == 0 {
                lowcost.channel(c)[k]
            } else {
                acc[k] / h as f64
            };
        }
        passthrough += usize::from(h == 0);
    }
    let mut warnings = Vec::new();
    if passthrough > 0 {
        let msg = format!("{passthrough} trailing samples not covered by a full window were passed through unmodified");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let series = ImuSeries::new(lowcost.sample_rate_hz(), lowcost.start_time_s(), sum)?;
    Ok(GeneratedSeries {
        series,
        windows: count,
        passthrough,
        warnings,
    })
}
