//! Strapdown dead reckoning in a flat, non-rotating ENU frame and the
//! error statistics used to compare navigation solutions.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::data::{ImuSeries, CHANNELS, CHANNEL_NAMES};
use crate::error::{Error, Result};

pub const GRAVITY: f64 = 9.80665;

const GIMBAL_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NavState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    /// Body to local (ENU) rotation.
    pub attitude: UnitQuaternion<f64>,
}

impl NavState {
    pub fn at_rest() -> Self {
        Self {
            position: Vector3::zeros(),
            velocity: Vector3::zeros(),
            attitude: UnitQuaternion::identity(),
        }
    }

    pub fn ypr(&self) -> Ypr {
        attitude_to_ypr(&self.attitude)
    }
}

/// Sampled navigation states with their timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct NavTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<NavState>,
}

impl NavTrajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// States `start..end` with their timestamps.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::Contract(format!(
                "slice {start}..{end} of a trajectory with {} states",
                self.len()
            )));
        }
        Ok(Self {
            times: self.times[start..end].to_vec(),
            states: self.states[start..end].to_vec(),
        })
    }
}

/// Integrates `imu` from `initial`; the first state is `initial` at the first
/// sample time.
///
/// Attitude uses the exponential map of the mean rate over each interval;
/// velocity and position are integrated with the trapezoidal rule.
pub fn dead_reckon(imu: &ImuSeries, initial: &NavState, gravity_on: bool) -> Result<NavTrajectory> {
    let norm = initial.attitude.quaternion().norm();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("initial attitude has norm {norm}")));
    }
    let check = |k: usize, v: &Vector3<f64>| {
        if v.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numerical(format!("non-finite navigation state at sample {k}")))
        }
    };
    check(0, &initial.position)?;
    check(0, &initial.velocity)?;

    let n = imu.len();
    let dt = imu.dt();
    let gravity = if gravity_on {
        Vector3::new(0.0, 0.0, -GRAVITY)
    } else {
        Vector3::zeros()
    };
    let gyro = |k: usize| Vector3::from(imu.gyro(k));
    let accel = |k: usize| Vector3::from(imu.accel(k));

    let mut states = Vec::with_capacity(n);
    let mut state = *initial;
    let mut acc_prev = state.attitude * accel(0) + gravity;
    states.push(state);
    for k in 1..n {
        let omega = (gyro(k - 1) + gyro(k)) * (0.5 * dt);
        let q = state.attitude * UnitQuaternion::from_scaled_axis(omega);
        let attitude = UnitQuaternion::new_normalize(q.into_inner());
        let acc = attitude * accel(k) + gravity;
        let velocity = state.velocity + (acc_prev + acc) * (0.5 * dt);
        let position = state.position + (state.velocity + velocity) * (0.5 * dt);
        check(k, &velocity)?;
        check(k, &position)?;
        state = NavState {
            position,
            velocity,
            attitude,
        };
        acc_prev = acc;
        states.push(state);
    }
    Ok(NavTrajectory {
        times: (0..n).map(|k| imu.time(k)).collect(),
        states,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ypr {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub gimbal_lock: bool,
}

/// Z-Y-X intrinsic angles of a body-to-ENU rotation. At gimbal lock the roll
/// is set to zero and the whole rotation about the vertical goes into yaw.
pub fn attitude_to_ypr(q: &UnitQuaternion<f64>) -> Ypr {
    let r = q.to_rotation_matrix().into_inner();
    let cos_pitch = r[(2, 1)].hypot(r[(2, 2)]);
    let pitch = (-r[(2, 0)]).atan2(cos_pitch);
    if FRAC_PI_2 - pitch.abs() < GIMBAL_TOLERANCE {
        return Ypr {
            yaw: (-r[(0, 1)]).atan2(r[(1, 1)]),
            pitch: pitch.signum() * FRAC_PI_2,
            roll: 0.0,
            gimbal_lock: true,
        };
    }
    Ypr {
        yaw: r[(1, 0)].atan2(r[(0, 0)]),
        pitch,
        roll: r[(2, 1)].atan2(r[(2, 2)]),
        gimbal_lock: false,
    }
}

/// Inverse of [`attitude_to_ypr`]: `Rz(yaw)·Ry(pitch)·Rx(roll)`.
pub fn ypr_to_quat(yaw: f64, pitch: f64, roll: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw)
        * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), pitch)
        * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), roll)
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub rms: f64,
    pub max: f64,
    pub cep95: f64,
}

impl ErrorSummary {
    pub fn of(errors: &[f64]) -> Self {
        if errors.is_empty() {
            return Self::default();
        }
        let n = errors.len() as f64;
        let mut abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
        abs.sort_by(f64::total_cmp);
        Self {
            rms: (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
            max: *abs.last().unwrap(),
            cep95: percentile_sorted(&abs, 95.0),
        }
    }
}

/// Linear interpolation between order statistics at rank `p/100·(n−1)`.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

pub const ERROR_COMPONENTS: [&str; 6] = ["E", "N", "U", "yaw", "pitch", "roll"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub struct NavErrorStats {
    #[serde(rename = "E")]
    pub e: ErrorSummary,
    #[serde(rename = "N")]
    pub n: ErrorSummary,
    #[serde(rename = "U")]
    pub u: ErrorSummary,
    pub yaw: ErrorSummary,
    pub pitch: ErrorSummary,
    pub roll: ErrorSummary,
    /// RMS of the horizontal (E, N) position error norm.
    pub horizontal_rms: f64,
    /// RMS of the 3-D position error norm.
    pub position_3d_rms: f64,
    /// RMS of the yaw/pitch/roll error vector norm.
    pub attitude_rms: f64,
}

impl NavErrorStats {
    pub fn components(&self) -> [&ErrorSummary; 6] {
        [&self.e, &self.n, &self.u, &self.yaw, &self.pitch, &self.roll]
    }
}

/// Per-sample errors `solution − truth`: E, N, U in metres, then wrapped
/// yaw, pitch, roll in radians.
pub fn error_series(solution: &NavTrajectory, truth: &NavTrajectory) -> Result<[Vec<f64>; 6]> {
    if solution.len() != truth.len() {
        return Err(Error::Contract(format!(
            "solution has {} states, truth has {}",
            solution.len(),
            truth.len()
        )));
    }
    let mut out: [Vec<f64>; 6] = Default::default();
    for (s, t) in solution.states.iter().zip(&truth.states) {
        let dp = s.position - t.position;
        let (a, b) = (s.ypr(), t.ypr());
        let vals = [
            dp.x,
            dp.y,
            dp.z,
            wrap_angle(a.yaw - b.yaw),
            wrap_angle(a.pitch - b.pitch),
            wrap_angle(a.roll - b.roll),
        ];
        for (o, v) in out.iter_mut().zip(vals) {
            o.push(v);
        }
    }
    Ok(out)
}

pub fn error_stats(solution: &NavTrajectory, truth: &NavTrajectory) -> Result<NavErrorStats> {
    let e = error_series(solution, truth)?;
    let n = e[0].len().max(1) as f64;
    let norm_rms = |idx: &[usize]| {
        let s: f64 = (0..e[0].len())
            .map(|k| idx.iter().map(|&i| e[i][k] * e[i][k]).sum::<f64>())
            .sum();
        (s / n).sqrt()
    };
    Ok(NavErrorStats {
        e: ErrorSummary::of(&e[0]),
        n: ErrorSummary::of(&e[1]),
        u: ErrorSummary::of(&e[2]),
        yaw: ErrorSummary::of(&e[3]),
        pitch: ErrorSummary::of(&e[4]),
        roll: ErrorSummary::of(&e[5]),
        horizontal_rms: norm_rms(&[0, 1]),
        position_3d_rms: norm_rms(&[0, 1, 2]),
        attitude_rms: norm_rms(&[3, 4, 5]),
    })
}

pub fn rmse_per_axis(a: &ImuSeries, b: &ImuSeries) -> Result<[f64; CHANNELS]> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "series lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(std::array::from_fn(|c| {
        let s: f64 = a
            .channel(c)
            .iter()
            .zip(b.channel(c))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        (s / a.len() as f64).sqrt()
    }))
}

/// `100·(1 − candidate/baseline)`; 0 when both are 0.
pub fn improvement_percent(candidate: f64, baseline: f64) -> f64 {
    if baseline == 0.0 {
        if candidate == 0.0 {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        100.0 * (1.0 - candidate / baseline)
    }
}

/// Improvement of `candidate` over `baseline` per error component (RMS) plus
/// norm aggregates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavImprovement {
    pub per_component_rms_percent: [f64; 6],
    pub horizontal_rms_percent: f64,
    pub position_3d_rms_percent: f64,
    pub attitude_rms_percent: f64,
}

pub fn nav_improvement(candidate: &NavErrorStats, baseline: &NavErrorStats) -> NavImprovement {
    let c = candidate.components();
    let b = baseline.components();
    NavImprovement {
        per_component_rms_percent: std::array::from_fn(|i| improvement_percent(c[i].rms, b[i].rms)),
        horizontal_rms_percent: improvement_percent(candidate.horizontal_rms, baseline.horizontal_rms),
        position_3d_rms_percent: improvement_percent(candidate.position_3d_rms, baseline.position_3d_rms),
        attitude_rms_percent: improvement_percent(candidate.attitude_rms, baseline.attitude_rms),
    }
}

/// Side-by-side text table: RMS / MAX / CEP95 for two solutions and the RMS
/// improvement of the first over the second.
pub fn comparison_table(name_a: &str, a: &NavErrorStats, name_b: &str, b: &NavErrorStats) -> String {
    let imp = nav_improvement(a, b);
    let mut s = format!(
        "{:<6} {:>32} {:>32} {:>9}\n{:<6} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>9}\n",
        "", name_a, name_b, "improv.", "", "RMS", "MAX", "CEP95", "RMS", "MAX", "CEP95", "RMS %"
    );
    for (i, (ca, cb)) in a.components().iter().zip(b.components()).enumerate() {
        s += &format!(
            "{:<6} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>9.1}\n",
            ERROR_COMPONENTS[i], ca.rms, ca.max, ca.cep95, cb.rms, cb.max, cb.cep95, imp.per_component_rms_percent[i]
        );
    }
    s += &format!(
        "horizontal RMS {:.4} vs {:.4} ({:.1}%), 3-D {:.4} vs {:.4} ({:.1}%), attitude {:.4} vs {:.4} ({:.1}%)\n",
        a.horizontal_rms,
        b.horizontal_rms,
        imp.horizontal_rms_percent,
        a.position_3d_rms,
        b.position_3d_rms,
        imp.position_3d_rms_percent,
        a.attitude_rms,
        b.attitude_rms,
        imp.attitude_rms_percent
    );
    s
}

pub const NAV_CSV_HEADER: [&str; 10] = ["t", "E", "N", "U", "vE", "vN", "vU", "yaw", "pitch", "roll"];
pub const TRACK_CSV_HEADER: [&str; 7] = ["t", "E", "N", "U", "yaw", "pitch", "roll"];

/// Full navigation CSV (`t,E,N,U,vE,vN,vU,yaw,pitch,roll`), reloadable with
/// [`load_nav_csv`].
pub fn save_nav_csv(traj: &NavTrajectory, path: &Path) -> Result<()> {
    write_rows(path, &NAV_CSV_HEADER, traj, |s, y| {
        vec![
            s.position.x,
            s.position.y,
            s.position.z,
            s.velocity.x,
            s.velocity.y,
            s.velocity.z,
            y.yaw,
            y.pitch,
            y.roll,
        ]
    })
}

/// Plotting export without velocities (`t,E,N,U,yaw,pitch,roll`).
pub fn save_track_csv(traj: &NavTrajectory, path: &Path) -> Result<()> {
    write_rows(path, &TRACK_CSV_HEADER, traj, |s, y| {
        vec![s.position.x, s.position.y, s.position.z, y.yaw, y.pitch, y.roll]
    })
}

fn write_rows(
    path: &Path,
    header: &[&str],
    traj: &NavTrajectory,
    row: impl Fn(&NavState, &Ypr) -> Vec<f64>,
) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for (t, s) in traj.times.iter().zip(&traj.states) {
        let vals: Vec<String> = row(s, &s.ypr()).iter().map(|v| format!("{v:e}")).collect();
        writeln!(w, "{t:.9},{}", vals.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_nav_csv(path: &Path) -> Result<NavTrajectory> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().ne(NAV_CSV_HEADER) {
        return Err(Error::Format(format!(
            "{}: expected header {}, got {}",
            path.display(),
            NAV_CSV_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut traj = NavTrajectory {
        times: Vec::new(),
        states: Vec::new(),
    };
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let mut vals = [0.0; 10];
        for (i, field) in rec.iter().enumerate() {
            vals[i] = field.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("column {} is not a number: {field:?}", NAV_CSV_HEADER[i]),
            })?;
        }
        traj.times.push(vals[0]);
        traj.states.push(NavState {
            position: Vector3::new(vals[1], vals[2], vals[3]),
            velocity: Vector3::new(vals[4], vals[5], vals[6]),
            attitude: ypr_to_quat(vals[7], vals[8], vals[9]),
        });
    }
    if traj.is_empty() {
        return Err(Error::InsufficientData(format!(
            "{}: no navigation rows",
            path.display()
        )));
    }
    Ok(traj)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{kind:?}"),
        },
    }
}

/// Per-sample error series as CSV (`t,E,N,U,yaw,pitch,roll`).
pub fn save_error_csv(times: &[f64], errors: &[Vec<f64>; 6], path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "t,{}", ERROR_COMPONENTS.join(",")).map_err(io)?;
    for (k, t) in times.iter().enumerate() {
        let vals: Vec<String> = errors.iter().map(|e| format!("{:e}", e[k])).collect();
        writeln!(w, "{t:.9},{}", vals.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Per-axis RMSE keyed by channel name.
pub fn rmse_table(values: &[f64; CHANNELS]) -> Vec<(&'static str, f64)> {
    CHANNEL_NAMES.iter().copied().zip(values.iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(n: usize, rate: f64, sample: [f64; 6]) -> ImuSeries {
        ImuSeries::from_samples(rate, 0.0, &vec![sample; n]).unwrap()
    }

    #[test]
    fn static_level_sensor_does_not_drift() {
        let imu = series(12001, 200.0, [0.0, 0.0, 0.0, 0.0, 0.0, GRAVITY]);
        let traj = dead_reckon(&imu, &NavState::at_rest(), true).unwrap();
        let last = traj.states.last().unwrap();
        assert!(last.position.norm() < 1e-9);
    }

    #[test]
    fn constant_yaw_rate_integrates_to_one_radian() {
        let imu = series(2001, 200.0, [0.0, 0.0, 0.1, 0.0, 0.0, 0.0]);
        let traj = dead_reckon(&imu, &NavState::at_rest(), false).unwrap();
        let ypr = traj.states.last().unwrap().ypr();
        assert!((ypr.yaw - 1.0).abs() < 1e-6, "{}", ypr.yaw);
    }

    #[test]
    fn constant_forward_accel_gives_half_a_t_squared() {
        let imu = series(2001, 200.0, [0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let traj = dead_reckon(&imu, &NavState::at_rest(), false).unwrap();
        assert!((traj.states.last().unwrap().position.x - 50.0).abs() < 0.01);
    }

    #[test]
    fn ypr_examples() {
        let y = attitude_to_ypr(&UnitQuaternion::identity());
        assert_eq!((y.yaw, y.pitch, y.roll), (0.0, 0.0, 0.0));
        let y = attitude_to_ypr(&UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2));
        assert!((y.yaw - FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn gimbal_lock_is_flagged_with_zero_roll() {
        let y = attitude_to_ypr(&ypr_to_quat(0.3, FRAC_PI_2, 0.2));
        assert!(y.gimbal_lock);
        assert_eq!(y.roll, 0.0);
        assert!((y.yaw - 0.1).abs() < 1e-6, "{}", y.yaw);
    }

    #[test]
    fn cep95_of_one_to_hundred() {
        let e: Vec<f64> = (1..=100).map(f64::from).collect();
        let s = ErrorSummary::of(&e);
        assert!((s.cep95 - 95.05).abs() < 1e-12);
        assert_eq!(s.max, 100.0);
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + FRAC_PI_2).abs() < 1e-15);
        assert_eq!(wrap_angle(0.25), 0.25);
    }

    #[test]
    fn rmse_examples() {
        let a = series(10, 100.0, [0.0; 6]);
        assert_eq!(rmse_per_axis(&a, &a).unwrap(), [0.0; 6]);
        let b = series(10, 100.0, [0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(rmse_per_axis(&a, &b).unwrap(), [0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let c = series(11, 100.0, [0.0; 6]);
        assert!(rmse_per_axis(&a, &c).is_err());
    }

    #[test]
    fn improvement_examples() {
        assert_eq!(improvement_percent(0.0, 2.0), 100.0);
        assert_eq!(improvement_percent(2.0, 2.0), 0.0);
        assert_eq!(improvement_percent(0.0, 0.0), 0.0);
    }
}
