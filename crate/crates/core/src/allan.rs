//! Non-overlapping Allan variance and slope-based identification of the
//! classic noise terms.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::CHANNELS;
use crate::error::{Error, Result};
use crate::sim::NoiseParams;

/// Points per slope-classification window.
pub const SLOPE_WINDOW: usize = 5;
/// Accepted deviation of a local slope from the canonical one.
pub const SLOPE_TOLERANCE: f64 = 0.15;
/// Minimum τ span, in decades, for a fit.
pub const MIN_SPAN_DECADES: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvCurve {
    pub taus: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub cluster_counts: Vec<usize>,
}

impl AvCurve {
    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.sigma2.iter().map(|v| v.sqrt()).collect()
    }

    /// `tau,sigma2,count`, one row per cluster size.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        writeln!(w, "tau,sigma2,count").map_err(io)?;
        for i in 0..self.len() {
            writeln!(w, "{:e},{:e},{}", self.taus[i], self.sigma2[i], self.cluster_counts[i]).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Allan variance for each cluster size in `sizes` (samples per cluster).
/// `cluster_counts` holds the number of successive-difference terms.
pub fn compute_av(channel: &[f64], rate_hz: f64, sizes: &[usize]) -> Result<AvCurve> {
    if !(rate_hz > 0.0 && rate_hz.is_finite()) {
        return Err(Error::Contract(format!("sample rate {rate_hz} Hz is not positive")));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Contract("cluster sizes must be strictly increasing".into()));
    }
    let mut curve = AvCurve {
        taus: Vec::with_capacity(sizes.len()),
        sigma2: Vec::with_capacity(sizes.len()),
        cluster_counts: Vec::with_capacity(sizes.len()),
    };
    for &n in sizes {
        if n == 0 || 2 * n > channel.len() {
            return Err(Error::InsufficientData(format!(
                "cluster size {n} needs at least {} samples, channel has {}",
                2 * n.max(1),
                channel.len()
            )));
        }
        let means: Vec<f64> = channel
            .chunks_exact(n)
            .map(|c| c.iter().sum::<f64>() / n as f64)
            .collect();
        let diffs = means.len() - 1;
        let ss: f64 = means.windows(2).map(|w| (w[1] - w[0]) * (w[1] - w[0])).sum();
        curve.taus.push(n as f64 / rate_hz);
        curve.sigma2.push(0.5 * ss / diffs as f64);
        curve.cluster_counts.push(diffs);
    }
    Ok(curve)
}

/// Cluster sizes spaced ~20 per decade from 1 to `length/2`.
pub fn default_taus(length: usize) -> Vec<usize> {
    let max = length / 2;
    let mut out: Vec<usize> = Vec::new();
    for j in 0.. {
        let n = 10f64.powf(j as f64 / 20.0).round() as usize;
        if n > max {
            break;
        }
        if out.last() != Some(&n) {
            out.push(n);
        }
    }
    out
}

/// One identified noise term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseTerm {
    pub value: f64,
    pub absent: bool,
    /// τ interval (s) of the points used.
    pub fit_range: Option<(f64, f64)>,
}

impl NoiseTerm {
    fn absent() -> Self {
        Self {
            value: 0.0,
            absent: true,
            fit_range: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvFit {
    /// σ(τ) = N/√τ, slope −1/2.
    pub arw: NoiseTerm,
    /// σ(τ) = K·√(τ/3), slope +1/2.
    pub rrw: NoiseTerm,
    /// Plateau minimum / 0.664, slope 0.
    pub bias_instability: NoiseTerm,
    /// σ(τ) = Q·√3/τ, slope −1.
    pub quantization: NoiseTerm,
}

impl AvFit {
    pub fn absent() -> Self {
        Self {
            arw: NoiseTerm::absent(),
            rrw: NoiseTerm::absent(),
            bias_instability: NoiseTerm::absent(),
            quantization: NoiseTerm::absent(),
        }
    }
}

fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Identifies ARW, RRW, bias instability and quantization from the log-log
/// curve.
///
/// A `SLOPE_WINDOW`-point window slides over `log σ` vs `log τ`; windows whose
/// local slope is within `SLOPE_TOLERANCE` of a term's canonical slope are
/// labelled with that term, and the longest run of labelled windows is
/// used. The points at the centres of that run enter a fixed-slope fit of
/// the intercept, weighted by cluster counts. Since every window has one
/// centre and at most one label, the per-term ranges are disjoint.
pub fn fit_noise_coeffs(curve: &AvCurve) -> Result<AvFit> {
    if curve.len() < 2 || curve.taus[0] <= 0.0 {
        return Err(Error::InsufficientData(
            "Allan curve needs at least two positive taus".into(),
        ));
    }
    let span = (curve.taus[curve.len() - 1] / curve.taus[0]).log10();
    if span < MIN_SPAN_DECADES {
        return Err(Error::InsufficientData(format!(
            "Allan curve spans {span:.2} decades of tau, at least {MIN_SPAN_DECADES} needed"
        )));
    }
    let pts: Vec<(f64, f64, f64)> = (0..curve.len())
        .filter(|&i| curve.sigma2[i] > 0.0)
        .map(|i| {
            (
                curve.taus[i].log10(),
                0.5 * curve.sigma2[i].log10(),
                curve.cluster_counts[i] as f64,
            )
        })
        .collect();
    let mut fit = AvFit::absent();
    if pts.len() < SLOPE_WINDOW {
        return Ok(fit);
    }
    let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let slopes: Vec<f64> = (0..=pts.len() - SLOPE_WINDOW)
        .map(|j| ols_slope(&x[j..j + SLOPE_WINDOW], &y[j..j + SLOPE_WINDOW]))
        .collect();
    let half = SLOPE_WINDOW / 2;
    let tau = |i: usize| 10f64.powf(x[i]);

    for (canonical, slot) in [
        (-0.5, &mut fit.arw),
        (0.5, &mut fit.rrw),
        (0.0, &mut fit.bias_instability),
        (-1.0, &mut fit.quantization),
    ] {
        let Some((start, len)) = longest_run(&slopes, |s| (s - canonical).abs() <= SLOPE_TOLERANCE) else {
            continue;
        };
        let centres = start + half..start + len + half;
        let value = if canonical == 0.0 {
            let min_sigma = centres.clone().map(|i| 10f64.powf(y[i])).fold(f64::INFINITY, f64::min);
            min_sigma / 0.664
        } else {
            let (num, den) = centres.clone().fold((0.0, 0.0), |(n, d), i| {
                (n + pts[i].2 * (y[i] - canonical * x[i]), d + pts[i].2)
            });
            let sigma_at_1s = 10f64.powf(num / den);
            if canonical == -0.5 {
                sigma_at_1s
            } else if canonical == 0.5 {
                sigma_at_1s * 3f64.sqrt()
            } else {
                sigma_at_1s / 3f64.sqrt()
            }
        };
        *slot = NoiseTerm {
            value,
            absent: false,
            fit_range: Some((tau(centres.start), tau(centres.end - 1))),
        };
    }
    Ok(fit)
}

/// `(start, length)` of the longest run satisfying `pred`; ties go to the
/// earliest run.
fn longest_run(values: &[f64], pred: impl Fn(f64) -> bool) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    let mut start = 0;
    let mut len = 0;
    for (i, &v) in values.iter().enumerate() {
        if pred(v) {
            if len == 0 {
                start = i;
            }
            len += 1;
            if best.map_or(true, |(_, l)| len > l) {
                best = Some((start, len));
            }
        } else {
            len = 0;
        }
    }
    best
}

/// White-noise density from ARW, bias random walk from RRW, the rest copied;
/// `sigma_b0` is left at zero.
pub fn to_noise_params(fits: &[AvFit; CHANNELS], sample_rate_hz: f64) -> NoiseParams {
    let mut p = NoiseParams::zero(sample_rate_hz);
    for (i, f) in fits.iter().enumerate() {
        p.sigma_white[i] = f.arw.value;
        p.sigma_rw[i] = f.rrw.value;
        p.bias_instability[i] = f.bias_instability.value;
        p.quantization[i] = f.quantization.value;
    }
    p
}

/// Curve plus fit of every channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisAnalysis {
    pub axis: String,
    pub fit: AvFit,
    pub curve: AvCurve,
}
