//! Synthetic reference trajectories and the sensor error model used to turn
//! one clean IMU stream into a paired (high-grade, low-cost) dataset.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{compute_norm_stats, make_windows, normalize, ImuSeries, ImuWindow, NormStats, WindowingConfig};
use crate::data::{CHANNELS, CHANNEL_NAMES};
use crate::error::{Error, Result};
use crate::nav::{ypr_to_quat, NavState, NavTrajectory, GRAVITY};

const DEG: f64 = PI / 180.0;

/// Per-axis stochastic error coefficients, SI units.
///
/// `sigma_white` is a density (signal·√s); the per-sample standard deviation
/// at `sample_rate_hz` is `sigma_white·√rate`. Serialised with a unit string
/// on every value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "NoiseParamsFile", try_from = "NoiseParamsFile")]
pub struct NoiseParams {
    pub sample_rate_hz: f64,
    pub sigma_white: [f64; CHANNELS],
    pub sigma_rw: [f64; CHANNELS],
    pub bias_instability: [f64; CHANNELS],
    pub quantization: [f64; CHANNELS],
    pub sigma_b0: [f64; CHANNELS],
}

impl NoiseParams {
    pub fn zero(sample_rate_hz: f64) -> Self {
        Self {
            sample_rate_hz,
            sigma_white: [0.0; CHANNELS],
            sigma_rw: [0.0; CHANNELS],
            bias_instability: [0.0; CHANNELS],
            quantization: [0.0; CHANNELS],
            sigma_b0: [0.0; CHANNELS],
        }
    }

    pub fn white_per_sample(&self, axis: usize) -> f64 {
        self.sigma_white[axis] * self.sample_rate_hz.sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return Err(Error::Config(format!(
                "noise params sample rate {} Hz",
                self.sample_rate_hz
            )));
        }
        let fields = [
            ("sigma_white", &self.sigma_white),
            ("sigma_rw", &self.sigma_rw),
            ("bias_instability", &self.bias_instability),
            ("quantization", &self.quantization),
            ("sigma_b0", &self.sigma_b0),
        ];
        for (name, vals) in fields {
            for (i, v) in vals.iter().enumerate() {
                if !(*v >= 0.0 && v.is_finite()) {
                    return Err(Error::Config(format!(
                        "{name} for {} must be >= 0, got {v}",
                        CHANNEL_NAMES[i]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Coefficients expressed in normalised units: every term is divided by
    /// the channel's normalisation std.
    pub fn normalized(&self, stats: &NormStats) -> Self {
        let scale = |v: &[f64; CHANNELS]| std::array::from_fn(|i| v[i] / stats.std[i]);
        Self {
            sample_rate_hz: self.sample_rate_hz,
            sigma_white: scale(&self.sigma_white),
            sigma_rw: scale(&self.sigma_rw),
            bias_instability: scale(&self.bias_instability),
            quantization: scale(&self.quantization),
            sigma_b0: scale(&self.sigma_b0),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: NoiseParamsFile = serde_json::from_str(text)?;
        file.try_into()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// A value tagged with its unit string.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantity {
    pub value: f64,
    pub unit: String,
}

impl Quantity {
    fn new(value: f64, unit: &str) -> Self {
        Self {
            value,
            unit: unit.to_string(),
        }
    }

    /// Value in SI, accepting the listed `(unit, factor)` alternatives.
    fn to_si(&self, field: &str, accepted: &[(&str, f64)]) -> Result<f64> {
        accepted
            .iter()
            .find(|(u, _)| *u == self.unit)
            .map(|(_, f)| self.value * f)
            .ok_or_else(|| {
                let names: Vec<&str> = accepted.iter().map(|(u, _)| *u).collect();
                Error::Config(format!("{field}: unit {:?} is not one of {names:?}", self.unit))
            })
    }
}

struct AxisUnits {
    white: &'static str,
    rw: &'static str,
    signal: &'static str,
    quantization: &'static str,
}

fn axis_units(axis: usize) -> AxisUnits {
    if axis < 3 {
        AxisUnits {
            white: "rad/s/sqrt(Hz)",
            rw: "rad/s/sqrt(s)",
            signal: "rad/s",
            quantization: "rad",
        }
    } else {
        AxisUnits {
            white: "m/s^2/sqrt(Hz)",
            rw: "m/s^2/sqrt(s)",
            signal: "m/s^2",
            quantization: "m/s",
        }
    }
}

#[derive(Serialize, Deserialize)]
struct AxisNoiseFile {
    axis: String,
    sigma_white: Quantity,
    sigma_white_per_sample: Quantity,
    sigma_rw: Quantity,
    bias_instability: Quantity,
    quantization: Quantity,
    sigma_b0: Quantity,
}

#[derive(Serialize, Deserialize)]
struct NoiseParamsFile {
    schema_version: u32,
    sample_rate_hz: f64,
    axes: Vec<AxisNoiseFile>,
}

impl From<NoiseParams> for NoiseParamsFile {
    fn from(p: NoiseParams) -> Self {
        let axes = (0..CHANNELS)
            .map(|i| {
                let u = axis_units(i);
                AxisNoiseFile {
                    axis: CHANNEL_NAMES[i].to_string(),
                    sigma_white: Quantity::new(p.sigma_white[i], u.white),
                    sigma_white_per_sample: Quantity::new(p.white_per_sample(i), u.signal),
                    sigma_rw: Quantity::new(p.sigma_rw[i], u.rw),
                    bias_instability: Quantity::new(p.bias_instability[i], u.signal),
                    quantization: Quantity::new(p.quantization[i], u.quantization),
                    sigma_b0: Quantity::new(p.sigma_b0[i], u.signal),
                }
            })
            .collect();
        Self {
            schema_version: 1,
            sample_rate_hz: p.sample_rate_hz,
            axes,
        }
    }
}

impl TryFrom<NoiseParamsFile> for NoiseParams {
    type Error = Error;

    fn try_from(f: NoiseParamsFile) -> Result<Self> {
        if f.axes.len() != CHANNELS {
            return Err(Error::Config(format!(
                "noise params need {CHANNELS} axes, got {}",
                f.axes.len()
            )));
        }
        let mut p = NoiseParams::zero(f.sample_rate_hz);
        for (i, a) in f.axes.iter().enumerate() {
            if a.axis != CHANNEL_NAMES[i] {
                return Err(Error::Config(format!(
                    "axis {i} must be {}, got {}",
                    CHANNEL_NAMES[i], a.axis
                )));
            }
            let u = axis_units(i);
            p.sigma_white[i] = a.sigma_white.to_si("sigma_white", &[(u.white, 1.0)])?;
            p.sigma_rw[i] = a.sigma_rw.to_si("sigma_rw", &[(u.rw, 1.0)])?;
            p.bias_instability[i] = a.bias_instability.to_si("bias_instability", &[(u.signal, 1.0)])?;
            p.quantization[i] = a.quantization.to_si("quantization", &[(u.quantization, 1.0)])?;
            p.sigma_b0[i] = a.sigma_b0.to_si("sigma_b0", &[(u.signal, 1.0)])?;
        }
        p.validate()?;
        Ok(p)
    }
}

/// Grade-level sensor description, SI units.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorSpec {
    pub name: String,
    pub gyro_bias: f64,
    /// rad/√s
    pub gyro_arw: f64,
    pub accel_bias: f64,
    /// Velocity random walk, m/s/√s.
    pub accel_vrw: f64,
    pub rate_hz: f64,
}

const GYRO_BIAS_UNITS: [(&str, f64); 3] = [("rad/s", 1.0), ("deg/hr", DEG / 3600.0), ("deg/s", DEG)];
const GYRO_ARW_UNITS: [(&str, f64); 3] = [("rad/sqrt(s)", 1.0), ("deg/sqrt(hr)", DEG / 60.0), ("deg/sqrt(s)", DEG)];
const ACCEL_BIAS_UNITS: [(&str, f64); 3] = [("m/s^2", 1.0), ("mg", 1e-3 * GRAVITY), ("ug", 1e-6 * GRAVITY)];
const ACCEL_VRW_UNITS: [(&str, f64); 2] = [("m/s/sqrt(s)", 1.0), ("m/s/sqrt(hr)", 1.0 / 60.0)];

#[derive(Serialize, Deserialize)]
struct SensorSpecFile {
    name: String,
    gyro_bias: Quantity,
    gyro_arw: Quantity,
    accel_bias: Quantity,
    accel_vrw: Quantity,
    rate_hz: f64,
}

impl SensorSpec {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            ("gyro_bias", self.gyro_bias),
            ("gyro_arw", self.gyro_arw),
            ("accel_bias", self.accel_bias),
            ("accel_vrw", self.accel_vrw),
            ("rate_hz", self.rate_hz),
        ];
        for (name, v) in vals {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "sensor {}: {name} must be positive, got {v}",
                    self.name
                )));
            }
        }
        Ok(())
    }

    fn to_file(&self) -> SensorSpecFile {
        SensorSpecFile {
            name: self.name.clone(),
            gyro_bias: Quantity::new(self.gyro_bias, "rad/s"),
            gyro_arw: Quantity::new(self.gyro_arw, "rad/sqrt(s)"),
            accel_bias: Quantity::new(self.accel_bias, "m/s^2"),
            accel_vrw: Quantity::new(self.accel_vrw, "m/s/sqrt(s)"),
            rate_hz: self.rate_hz,
        }
    }

    fn from_file(f: SensorSpecFile) -> Result<Self> {
        let spec = Self {
            gyro_bias: f.gyro_bias.to_si("gyro_bias", &GYRO_BIAS_UNITS)?,
            gyro_arw: f.gyro_arw.to_si("gyro_arw", &GYRO_ARW_UNITS)?,
            accel_bias: f.accel_bias.to_si("accel_bias", &ACCEL_BIAS_UNITS)?,
            accel_vrw: f.accel_vrw.to_si("accel_vrw", &ACCEL_VRW_UNITS)?,
            rate_hz: f.rate_hz,
            name: f.name,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Error-model coefficients implied by the grade: white noise from the
    /// random-walk densities, a power-on bias of one `bias` sigma, and a bias
    /// random walk that reaches `bias` after one hour.
    pub fn noise_params(&self) -> NoiseParams {
        let mut p = NoiseParams::zero(self.rate_hz);
        for i in 0..3 {
            p.sigma_white[i] = self.gyro_arw;
            p.sigma_rw[i] = self.gyro_bias / 3600f64.sqrt();
            p.bias_instability[i] = self.gyro_bias;
            p.sigma_b0[i] = self.gyro_bias;
            p.sigma_white[i + 3] = self.accel_vrw;
            p.sigma_rw[i + 3] = self.accel_bias / 3600f64.sqrt();
            p.bias_instability[i + 3] = self.accel_bias;
            p.sigma_b0[i + 3] = self.accel_bias;
        }
        p
    }
}

/// The (high-grade, low-cost) sensor pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SpecPair {
    pub reference: SensorSpec,
    pub lowcost: SensorSpec,
}

#[derive(Serialize, Deserialize)]
struct SpecPairFile {
    schema_version: u32,
    reference: SensorSpecFile,
    lowcost: SensorSpecFile,
}

impl SpecPair {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&SpecPairFile {
            schema_version: 1,
            reference: self.reference.to_file(),
            lowcost: self.lowcost.to_file(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: SpecPairFile = serde_json::from_str(text)?;
        Ok(Self {
            reference: SensorSpec::from_file(f.reference)?,
            lowcost: SensorSpec::from_file(f.lowcost)?,
        })
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// High-grade (ISA-100C class) and MEMS (I300 class) sensors, converted to SI.
///
/// Accelerometer white noise is not part of the grade sheet; typical
/// velocity random walk values for each class are used.
pub fn builtin_specs() -> SpecPair {
    SpecPair {
        reference: SensorSpec {
            name: "ISA-100C".into(),
            gyro_bias: 0.05 * DEG / 3600.0,
            gyro_arw: 0.005 * DEG / 60.0,
            accel_bias: 0.02e-3 * GRAVITY,
            accel_vrw: 0.0125 / 60.0,
            rate_hz: 200.0,
        },
        lowcost: SensorSpec {
            name: "I300".into(),
            gyro_bias: 3.0 * DEG / 3600.0,
            gyro_arw: 0.15 * DEG / 60.0,
            accel_bias: 0.1e-3 * GRAVITY,
            accel_vrw: 0.06 / 60.0,
            rate_hz: 200.0,
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    Static,
    ConstantRateTurn,
    FigureEight,
    PiecewiseDynamic,
}

impl TrajectoryKind {
    pub const ALL: [(&'static str, TrajectoryKind); 4] = [
        ("static", TrajectoryKind::Static),
        ("constant-rate-turn", TrajectoryKind::ConstantRateTurn),
        ("figure-eight", TrajectoryKind::FigureEight),
        ("piecewise-dynamic", TrajectoryKind::PiecewiseDynamic),
    ];

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.iter().find(|(n, _)| *n == s).map(|(_, k)| *k).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|(n, _)| *n).collect();
            Error::Config(format!(
                "field `kind`: unknown trajectory kind {s:?}, expected one of {names:?}"
            ))
        })
    }

    pub fn name(self) -> &'static str {
        Self::ALL.iter().find(|(_, k)| *k == self).unwrap().0
    }
}

/// Analytic planar trajectory description.
///
/// Parameters by kind (all optional, SI units):
/// - `constant-rate-turn`: `yaw_rate` (0.1), `speed` (0)
/// - `figure-eight`: `amplitude_e` (10), `amplitude_n` (5), `period_s` (120)
/// - `piecewise-dynamic`: `segment_s` (10), `max_accel` (0.3), `max_yaw_rate` (0.1), `initial_speed` (5)
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryProfile {
    pub kind: TrajectoryKind,
    pub duration_s: f64,
    pub parameters: BTreeMap<String, f64>,
    pub seed: u64,
    pub gravity: bool,
}

#[derive(Serialize, Deserialize)]
struct ProfileFile {
    kind: String,
    duration_s: f64,
    #[serde(default)]
    parameters: BTreeMap<String, f64>,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_true")]
    gravity: bool,
}

fn default_true() -> bool {
    true
}

impl TrajectoryProfile {
    pub fn new(kind: TrajectoryKind, duration_s: f64) -> Self {
        Self {
            kind,
            duration_s,
            parameters: BTreeMap::new(),
            seed: 0,
            gravity: true,
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.parameters.insert(key.to_string(), value);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::Config(format!(
                "field `duration_s`: must be positive, got {}",
                self.duration_s
            )));
        }
        let allowed: &[&str] = match self.kind {
            TrajectoryKind::Static => &[],
            TrajectoryKind::ConstantRateTurn => &["yaw_rate", "speed"],
            TrajectoryKind::FigureEight => &["amplitude_e", "amplitude_n", "period_s"],
            TrajectoryKind::PiecewiseDynamic => &["segment_s", "max_accel", "max_yaw_rate", "initial_speed"],
        };
        for (k, v) in &self.parameters {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::Config(format!(
                    "field `parameters.{k}`: not a parameter of {} (allowed: {allowed:?})",
                    self.kind.name()
                )));
            }
            if !v.is_finite() {
                return Err(Error::Config(format!("field `parameters.{k}`: not finite")));
            }
        }
        let positive = |k: &str| match self.parameters.get(k) {
            Some(v) if *v <= 0.0 => Err(Error::Config(format!("field `parameters.{k}`: must be positive"))),
            _ => Ok(()),
        };
        for k in ["period_s", "segment_s", "amplitude_e", "amplitude_n"] {
            positive(k)?;
        }
        Ok(())
    }

    fn param(&self, key: &str, default: f64) -> f64 {
        self.parameters.get(key).copied().unwrap_or(default)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ProfileFile = serde_json::from_str(text)?;
        let profile = Self {
            kind: TrajectoryKind::parse(&f.kind)?,
            duration_s: f.duration_s,
            parameters: f.parameters,
            seed: f.seed,
            gravity: f.gravity,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ProfileFile {
            kind: self.kind.name().to_string(),
            duration_s: self.duration_s,
            parameters: self.parameters.clone(),
            seed: self.seed,
            gravity: self.gravity,
        })?)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Planar kinematics at one instant: position, velocity, yaw, forward
/// acceleration along the body x axis, and yaw rate.
#[derive(Clone, Copy, Debug)]
struct PlanarState {
    pos: [f64; 2],
    vel: [f64; 2],
    yaw: f64,
    forward_accel: f64,
    speed: f64,
    yaw_rate: f64,
}

impl PlanarState {
    /// Body specific force and rate for a level vehicle whose body x axis
    /// points along the velocity.
    fn imu(&self, gravity: bool) -> [f64; CHANNELS] {
        let g = if gravity { GRAVITY } else { 0.0 };
        [
            0.0,
            0.0,
            self.yaw_rate,
            self.forward_accel,
            self.speed * self.yaw_rate,
            g,
        ]
    }
}

struct Segment {
    t0: f64,
    pos0: [f64; 2],
    yaw0: f64,
    speed0: f64,
    accel: f64,
    yaw_rate: f64,
}

impl Segment {
    fn state(&self, t: f64) -> PlanarState {
        let tau = t - self.t0;
        let (v0, a, w) = (self.speed0, self.accel, self.yaw_rate);
        let speed = v0 + a * tau;
        let yaw = self.yaw0 + w * tau;
        let (s0, c0) = self.yaw0.sin_cos();
        let (s1, c1) = yaw.sin_cos();
        // Closed-form integrals of (v0 + a·τ)·(cos, sin)(ψ0 + w·τ).
        let (dx, dy) = if w == 0.0 {
            let d = v0 * tau + 0.5 * a * tau * tau;
            (d * c0, d * s0)
        } else {
            (
                (speed * s1 - v0 * s0) / w + a * (c1 - c0) / (w * w),
                -(speed * c1 - v0 * c0) / w + a * (s1 - s0) / (w * w),
            )
        };
        PlanarState {
            pos: [self.pos0[0] + dx, self.pos0[1] + dy],
            vel: [speed * c1, speed * s1],
            yaw,
            forward_accel: a,
            speed,
            yaw_rate: w,
        }
    }
}

fn piecewise_segments(profile: &TrajectoryProfile) -> Vec<Segment> {
    let seg_len = profile.param("segment_s", 10.0);
    let max_accel = profile.param("max_accel", 0.3).abs();
    let max_rate = profile.param("max_yaw_rate", 0.1).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let mut segs = Vec::new();
    let mut state = PlanarState {
        pos: [0.0, 0.0],
        vel: [0.0, 0.0],
        yaw: 0.0,
        forward_accel: 0.0,
        speed: profile.param("initial_speed", 5.0).max(0.0),
        yaw_rate: 0.0,
    };
    let mut t0 = 0.0;
    while t0 < profile.duration_s + seg_len {
        let mut accel = if max_accel > 0.0 {
            rng.random_range(-max_accel..=max_accel)
        } else {
            0.0
        };
        if state.speed + accel * seg_len < 0.0 {
            accel = -accel;
        }
        let yaw_rate = if max_rate > 0.0 {
            rng.random_range(-max_rate..=max_rate)
        } else {
            0.0
        };
        let seg = Segment {
            t0,
            pos0: state.pos,
            yaw0: state.yaw,
            speed0: state.speed,
            accel,
            yaw_rate,
        };
        state = seg.state(t0 + seg_len);
        segs.push(seg);
        t0 += seg_len;
    }
    segs
}

fn planar_state(profile: &TrajectoryProfile, segments: &[Segment], t: f64) -> PlanarState {
    match profile.kind {
        TrajectoryKind::Static => PlanarState {
            pos: [0.0, 0.0],
            vel: [0.0, 0.0],
            yaw: 0.0,
            forward_accel: 0.0,
            speed: 0.0,
            yaw_rate: 0.0,
        },
        TrajectoryKind::ConstantRateTurn => Segment {
            t0: 0.0,
            pos0: [0.0, 0.0],
            yaw0: 0.0,
            speed0: profile.param("speed", 0.0),
            accel: 0.0,
            yaw_rate: profile.param("yaw_rate", 0.1),
        }
        .state(t),
        TrajectoryKind::FigureEight => {
            let a = profile.param("amplitude_e", 10.0);
            let b = profile.param("amplitude_n", 5.0);
            let w = 2.0 * PI / profile.param("period_s", 120.0);
            let (s1, c1) = (w * t).sin_cos();
            let (s2, c2) = (2.0 * w * t).sin_cos();
            let vel = [a * w * c1, 2.0 * b * w * c2];
            let acc = [-a * w * w * s1, -4.0 * b * w * w * s2];
            let speed2 = vel[0] * vel[0] + vel[1] * vel[1];
            let speed = speed2.sqrt();
            PlanarState {
                pos: [a * s1, b * s2],
                vel,
                yaw: vel[1].atan2(vel[0]),
                forward_accel: (vel[0] * acc[0] + vel[1] * acc[1]) / speed,
                speed,
                yaw_rate: (vel[0] * acc[1] - vel[1] * acc[0]) / speed2,
            }
        }
        TrajectoryKind::PiecewiseDynamic => {
            let idx = segments.partition_point(|s| s.t0 <= t).saturating_sub(1);
            segments[idx].state(t)
        }
    }
}

/// Exact body-frame IMU samples and navigation states of `profile` at
/// `t_k = k/rate`, `k = 0..round(duration·rate)`.
pub fn generate_truth(profile: &TrajectoryProfile, rate_hz: f64) -> Result<(ImuSeries, NavTrajectory)> {
    profile.validate()?;
    if !(rate_hz > 0.0 && rate_hz.is_finite()) {
        return Err(Error::Config(format!("sample rate {rate_hz} Hz is not positive")));
    }
    let n = (profile.duration_s * rate_hz).round() as usize;
    if n < 1 {
        return Err(Error::InsufficientData(format!(
            "{} s at {rate_hz} Hz yields no samples",
            profile.duration_s
        )));
    }
    let segments = match profile.kind {
        TrajectoryKind::PiecewiseDynamic => piecewise_segments(profile),
        _ => Vec::new(),
    };
    let mut samples = Vec::with_capacity(n);
    let mut times = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 / rate_hz;
        let s = planar_state(profile, &segments, t);
        samples.push(s.imu(profile.gravity));
        times.push(t);
        states.push(NavState {
            position: Vector3::new(s.pos[0], s.pos[1], 0.0),
            velocity: Vector3::new(s.vel[0], s.vel[1], 0.0),
            attitude: ypr_to_quat(s.yaw, 0.0, 0.0),
        });
    }
    let imu = ImuSeries::from_samples(rate_hz, 0.0, &samples)?;
    Ok((imu, NavTrajectory { times, states }))
}

/// `clean + b + n` per axis, where `n` is white with per-sample std
/// `sigma_white·√rate`, and `b` starts at `N(0, sigma_b0²)` and random-walks
/// with increments `N(0, sigma_rw²·Δt)`. Uses the series' own rate.
pub fn corrupt(clean: &ImuSeries, params: &NoiseParams, seed: u64) -> Result<ImuSeries> {
    params.validate()?;
    if clean.is_empty() {
        return Err(Error::InsufficientData("cannot corrupt an empty series".into()));
    }
    let rate = clean.sample_rate_hz();
    let dt = clean.dt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: [Vec<f64>; CHANNELS] = Default::default();
    for (i, o) in out.iter_mut().enumerate() {
        let white = params.sigma_white[i] * rate.sqrt();
        let step = params.sigma_rw[i] * dt.sqrt();
        let mut bias = params.sigma_b0[i] * rng.sample::<f64, _>(StandardNormal);
        o.reserve(clean.len());
        for (k, &x) in clean.channel(i).iter().enumerate() {
            if k > 0 {
                bias += step * rng.sample::<f64, _>(StandardNormal);
            }
            o.push(x + bias + white * rng.sample::<f64, _>(StandardNormal));
        }
    }
    ImuSeries::new(rate, clean.start_time_s(), out)
}

/// One synthetic rig run: shared truth, two corrupted copies, and their
/// windows normalised with statistics of the reference windows.
#[derive(Clone, Debug)]
pub struct PairedDataset {
    pub truth: ImuSeries,
    pub truth_nav: NavTrajectory,
    pub reference: ImuSeries,
    pub lowcost: ImuSeries,
    pub windows_reference: Vec<ImuWindow>,
    pub windows_lowcost: Vec<ImuWindow>,
    pub stats: NormStats,
}

/// Seeds used for the reference and low-cost corruption of dataset `seed`.
pub fn corruption_seeds(seed: u64) -> (u64, u64) {
    (seed ^ 0x5EED_0000_0000_0001, seed ^ 0x5EED_0000_0000_0002)
}

pub fn make_paired_dataset(
    profile: &TrajectoryProfile,
    specs: &SpecPair,
    windowing: &WindowingConfig,
    seed: u64,
) -> Result<PairedDataset> {
    make_paired_dataset_with(
        profile,
        &specs.reference.noise_params(),
        &specs.lowcost.noise_params(),
        specs.reference.rate_hz,
        windowing,
        seed,
    )
}

pub fn make_paired_dataset_with(
    profile: &TrajectoryProfile,
    reference_params: &NoiseParams,
    lowcost_params: &NoiseParams,
    rate_hz: f64,
    windowing: &WindowingConfig,
    seed: u64,
) -> Result<PairedDataset> {
    let (truth, truth_nav) = generate_truth(profile, rate_hz)?;
    let (ref_seed, low_seed) = corruption_seeds(seed);
    let reference = corrupt(&truth, reference_params, ref_seed)?;
    let lowcost = corrupt(&truth, lowcost_params, low_seed)?;
    let raw_ref = make_windows(&reference, windowing)?;
    let raw_low = make_windows(&lowcost, windowing)?;
    let stats = compute_norm_stats(&raw_ref)?;
    Ok(PairedDataset {
        windows_reference: raw_ref.iter().map(|w| normalize(w, &stats)).collect(),
        windows_lowcost: raw_low.iter().map(|w| normalize(w, &stats)).collect(),
        truth,
        truth_nav,
        reference,
        lowcost,
        stats,
    })
}
