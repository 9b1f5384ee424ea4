//! IMU streams, fixed-length windows, per-channel normalisation and CSV I/O.
//!
//! Channel order is fixed everywhere: gyro x/y/z (rad/s) then accel x/y/z
//! (m/s²).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 6;
pub const CHANNEL_NAMES: [&str; CHANNELS] = ["gx", "gy", "gz", "ax", "ay", "az"];
pub const CSV_HEADER: [&str; CHANNELS + 1] = ["t", "gx", "gy", "gz", "ax", "ay", "az"];

/// Relative tolerance on sample spacing accepted by [`load_csv`].
pub const TIMESTAMP_TOLERANCE: f64 = 1e-6;

/// Timestamped 6-axis inertial stream at a fixed rate.
#[derive(Clone, Debug, PartialEq)]
pub struct ImuSeries {
    sample_rate_hz: f64,
    start_time_s: f64,
    channels: [Vec<f64>; CHANNELS],
}

impl ImuSeries {
    pub fn new(sample_rate_hz: f64, start_time_s: f64, channels: [Vec<f64>; CHANNELS]) -> Result<Self> {
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(Error::Contract(format!(
                "sample rate {sample_rate_hz} Hz is not positive"
            )));
        }
        if !start_time_s.is_finite() {
            return Err(Error::Contract("start time is not finite".into()));
        }
        let n = channels[0].len();
        if n == 0 {
            return Err(Error::InsufficientData("IMU series has no samples".into()));
        }
        for (i, ch) in channels.iter().enumerate() {
            if ch.len() != n {
                return Err(Error::Contract(format!(
                    "channel {} has {} samples, channel gx has {n}",
                    CHANNEL_NAMES[i],
                    ch.len()
                )));
            }
            if let Some(k) = ch.iter().position(|v| !v.is_finite()) {
                return Err(Error::Contract(format!(
                    "non-finite value in channel {} at sample {k}",
                    CHANNEL_NAMES[i]
                )));
            }
        }
        Ok(Self {
            sample_rate_hz,
            start_time_s,
            channels,
        })
    }

    pub fn from_samples(sample_rate_hz: f64, start_time_s: f64, samples: &[[f64; CHANNELS]]) -> Result<Self> {
        let channels = std::array::from_fn(|c| samples.iter().map(|s| s[c]).collect());
        Self::new(sample_rate_hz, start_time_s, channels)
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn start_time_s(&self) -> f64 {
        self.start_time_s
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate_hz
    }

    pub fn time(&self, k: usize) -> f64 {
        self.start_time_s + k as f64 / self.sample_rate_hz
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[Vec<f64>; CHANNELS] {
        &self.channels
    }

    pub fn into_channels(self) -> [Vec<f64>; CHANNELS] {
        self.channels
    }

    pub fn sample(&self, k: usize) -> [f64; CHANNELS] {
        std::array::from_fn(|c| self.channels[c][k])
    }

    pub fn gyro(&self, k: usize) -> [f64; 3] {
        std::array::from_fn(|c| self.channels[c][k])
    }

    pub fn accel(&self, k: usize) -> [f64; 3] {
        std::array::from_fn(|c| self.channels[c + 3][k])
    }

    /// Samples `start..end`, keeping absolute timestamps.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::Contract(format!(
                "slice {start}..{end} of a series with {} samples",
                self.len()
            )));
        }
        let channels = std::array::from_fn(|c| self.channels[c][start..end].to_vec());
        Self::new(self.sample_rate_hz, self.time(start), channels)
    }
}

/// A `6 × L` excerpt of a series, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImuWindow {
    data: Vec<f64>,
    len: usize,
    pub window_index: usize,
    pub source_offset: usize,
}

impl ImuWindow {
    pub fn new(data: Vec<f64>, len: usize, window_index: usize, source_offset: usize) -> Result<Self> {
        if len < 2 {
            return Err(Error::Contract(format!("window length {len} is below 2")));
        }
        if data.len() != CHANNELS * len {
            return Err(Error::Contract(format!(
                "window of length {len} needs {} values, got {}",
                CHANNELS * len,
                data.len()
            )));
        }
        Ok(Self {
            data,
            len,
            window_index,
            source_offset,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.len..(c + 1) * self.len]
    }

    fn map_channels(&self, f: impl Fn(usize, f64) -> f64) -> Self {
        let data = self.data.iter().enumerate().map(|(i, &v)| f(i / self.len, v)).collect();
        Self { data, ..*self }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowingConfig {
    pub length: usize,
    pub stride: usize,
}

impl Default for WindowingConfig {
    fn default() -> Self {
        Self {
            length: 200,
            stride: 50,
        }
    }
}

impl WindowingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.length < 2 || self.stride == 0 || self.stride > self.length {
            return Err(Error::Config(format!(
                "windowing needs length >= 2 and 1 <= stride <= length, got {self:?}"
            )));
        }
        Ok(())
    }

    /// `floor((n - L) / S) + 1`, or 0 when the series is shorter than `L`.
    pub fn window_count(&self, n: usize) -> usize {
        if n < self.length {
            0
        } else {
            (n - self.length) / self.stride + 1
        }
    }
}

/// Windows starting at `0, S, 2S, ...`; a trailing partial window is dropped.
pub fn make_windows(series: &ImuSeries, cfg: &WindowingConfig) -> Result<Vec<ImuWindow>> {
    cfg.validate()?;
    let n = series.len();
    if n < cfg.length {
        return Err(Error::InsufficientData(format!(
            "series has {n} samples, a window needs {}",
            cfg.length
        )));
    }
    (0..cfg.window_count(n))
        .map(|w| {
            let off = w * cfg.stride;
            let mut data = Vec::with_capacity(CHANNELS * cfg.length);
            for ch in series.channels() {
                data.extend_from_slice(&ch[off..off + cfg.length]);
            }
            ImuWindow::new(data, cfg.length, w, off)
        })
        .collect()
}

/// Per-channel mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NormStatsFile", into = "NormStatsFile")]
pub struct NormStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

#[derive(Serialize, Deserialize)]
struct NormStatsFile {
    mean: [f64; CHANNELS],
    std: [f64; CHANNELS],
    channel_order: Vec<String>,
}

impl From<NormStats> for NormStatsFile {
    fn from(s: NormStats) -> Self {
        Self {
            mean: s.mean,
            std: s.std,
            channel_order: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TryFrom<NormStatsFile> for NormStats {
    type Error = String;

    fn try_from(f: NormStatsFile) -> std::result::Result<Self, String> {
        if f.channel_order != CHANNEL_NAMES {
            return Err(format!(
                "channel_order must be {CHANNEL_NAMES:?}, got {:?}",
                f.channel_order
            ));
        }
        let stats = NormStats {
            mean: f.mean,
            std: f.std,
        };
        stats.validate().map_err(|e| e.to_string())?;
        Ok(stats)
    }
}

impl NormStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; CHANNELS],
            std: [1.0; CHANNELS],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for c in 0..CHANNELS {
            if !(self.std[c] > 0.0 && self.std[c].is_finite() && self.mean[c].is_finite()) {
                return Err(Error::Contract(format!(
                    "normalisation std for {} must be positive, got {}",
                    CHANNEL_NAMES[c], self.std[c]
                )));
            }
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    #[inline]
    pub fn normalize_value(&self, c: usize, v: f64) -> f64 {
        (v - self.mean[c]) / self.std[c]
    }

    #[inline]
    pub fn denormalize_value(&self, c: usize, v: f64) -> f64 {
        v * self.std[c] + self.mean[c]
    }
}

pub fn compute_norm_stats(windows: &[ImuWindow]) -> Result<NormStats> {
    if windows.is_empty() {
        return Err(Error::InsufficientData("no windows to compute statistics from".into()));
    }
    let mut mean = [0.0; CHANNELS];
    let mut std = [0.0; CHANNELS];
    for c in 0..CHANNELS {
        let values = || windows.iter().flat_map(|w| w.channel(c).iter().copied());
        let n = windows.iter().map(ImuWindow::len).sum::<usize>() as f64;
        let m = values().sum::<f64>() / n;
        let var = values().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        let s = var.sqrt();
        if !(s > 1e-12 * m.abs()) {
            return Err(Error::DegenerateChannel {
                channel: c,
                name: CHANNEL_NAMES[c],
            });
        }
        mean[c] = m;
        std[c] = s;
    }
    Ok(NormStats { mean, std })
}

pub fn normalize(w: &ImuWindow, s: &NormStats) -> ImuWindow {
    w.map_channels(|c, v| s.normalize_value(c, v))
}

pub fn denormalize(w: &ImuWindow, s: &NormStats) -> ImuWindow {
    w.map_channels(|c, v| s.denormalize_value(c, v))
}

pub fn load_csv(path: &Path) -> Result<ImuSeries> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(parse_err(1, format!("expected header {}", CSV_HEADER.join(","))));
    }
    let mut times = Vec::new();
    let mut channels: [Vec<f64>; CHANNELS] = Default::default();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != CSV_HEADER.len() {
            return Err(parse_err(line, format!("expected 7 fields, found {}", record.len())));
        }
        let mut row = [0.0; CHANNELS + 1];
        for (i, field) in record.iter().enumerate() {
            row[i] = field.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                parse_err(
                    line,
                    format!("field '{}' is not a finite number: '{field}'", CSV_HEADER[i]),
                )
            })?;
        }
        times.push(row[0]);
        for c in 0..CHANNELS {
            channels[c].push(row[c + 1]);
        }
    }
    if times.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{}: {} data rows, at least 2 are needed",
            path.display(),
            times.len()
        )));
    }
    let deltas: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    if let Some(k) = deltas.iter().position(|d| !(*d > 0.0)) {
        return Err(Error::Format(format!(
            "{}: timestamps not increasing at data row {}",
            path.display(),
            k + 2
        )));
    }
    let median = {
        let mut sorted = deltas.clone();
        sorted.sort_by(f64::total_cmp);
        sorted[sorted.len() / 2]
    };
    if let Some(k) = deltas
        .iter()
        .position(|d| (d - median).abs() > TIMESTAMP_TOLERANCE * median)
    {
        return Err(Error::Format(format!(
            "{}: non-uniform timestamps: step {} before data row {} differs from the median step {median}",
            path.display(),
            deltas[k],
            k + 2
        )));
    }
    ImuSeries::new(1.0 / median, times[0], channels)
}

/// Header plus one row per sample; `t` with 9 decimals, values in
/// shortest round-trip exponent form.
pub fn save_csv(series: &ImuSeries, path: &Path) -> Result<()> {
    if series.is_empty() {
        return Err(Error::InsufficientData("refusing to write an empty series".into()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_series(&mut out, series).map_err(|e| Error::io(path, e))
}

fn write_series(out: &mut impl Write, series: &ImuSeries) -> std::io::Result<()> {
    writeln!(out, "{}", CSV_HEADER.join(","))?;
    for k in 0..series.len() {
        write!(out, "{:.9}", series.time(k))?;
        for c in 0..CHANNELS {
            write!(out, ",{:e}", series.channel(c)[k])?;
        }
        writeln!(out)?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_series(n: usize) -> ImuSeries {
        let channels = std::array::from_fn(|c| (0..n).map(|k| (k * (c + 1)) as f64 * 0.01 + c as f64).collect());
        ImuSeries::new(200.0, 0.0, channels).unwrap()
    }

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn load_infers_rate_from_spacing() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "a.csv",
            "t,gx,gy,gz,ax,ay,az\n# comment\n0.000,1,2,3,4,5,6\n0.005,1,2,3,4,5,6\n0.010,1,2,3,4,5,6\n",
        );
        let s = load_csv(&p).unwrap();
        assert_eq!(s.len(), 3);
        assert!((s.sample_rate_hz() - 200.0).abs() < 1e-9);
    }

    #[test]
    fn load_rejects_uneven_spacing() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "a.csv",
            "t,gx,gy,gz,ax,ay,az\n0,1,2,3,4,5,6\n0.005,1,2,3,4,5,6\n0.02,1,2,3,4,5,6\n",
        );
        assert!(matches!(load_csv(&p), Err(Error::Format(_))));
    }

    #[test]
    fn load_reports_line_of_bad_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "a.csv",
            "t,gx,gy,gz,ax,ay,az\n0,1,2,3,4,5,6\n0.005,1,x,3,4,5,6\n",
        );
        match load_csv(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_needs_two_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "t,gx,gy,gz,ax,ay,az\n0,1,2,3,4,5,6\n");
        assert!(matches!(load_csv(&p), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn save_writes_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.csv");
        save_csv(&ramp_series(17), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 18);
        assert_eq!(text.lines().next().unwrap(), "t,gx,gy,gz,ax,ay,az");
    }

    #[test]
    fn empty_series_is_refused() {
        let err = ImuSeries::new(200.0, 0.0, Default::default()).unwrap_err();
        assert!(matches!(err, Error::InsufficientData(_)));
    }

    #[test]
    fn window_counts() {
        let cfg = WindowingConfig::default();
        let w = make_windows(&ramp_series(300), &cfg).unwrap();
        assert_eq!(w.iter().map(|w| w.source_offset).collect::<Vec<_>>(), [0, 50, 100]);
        assert_eq!(make_windows(&ramp_series(200), &cfg).unwrap().len(), 1);
        assert!(matches!(
            make_windows(&ramp_series(199), &cfg),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn windows_are_verbatim_slices() {
        let s = ramp_series(97);
        let cfg = WindowingConfig { length: 20, stride: 7 };
        for w in make_windows(&s, &cfg).unwrap() {
            for c in 0..CHANNELS {
                assert_eq!(w.channel(c), &s.channel(c)[w.source_offset..w.source_offset + 20]);
            }
        }
    }

    #[test]
    fn norm_stats_population_std() {
        let mut data = vec![0.0; 12];
        for c in 0..CHANNELS {
            data[2 * c] = 1.0 + c as f64;
            data[2 * c + 1] = 3.0 + c as f64;
        }
        let w = ImuWindow::new(data, 2, 0, 0).unwrap();
        let s = compute_norm_stats(&[w]).unwrap();
        assert_eq!(s.mean[0], 2.0);
        assert_eq!(s.std[0], 1.0);
    }

    #[test]
    fn constant_channel_is_degenerate() {
        let mut data: Vec<f64> = (0..12).map(|i| i as f64).collect();
        data[4] = 0.1;
        data[5] = 0.1;
        let w = ImuWindow::new(data, 2, 0, 0).unwrap();
        assert!(matches!(
            compute_norm_stats(&[w]),
            Err(Error::DegenerateChannel { channel: 2, .. })
        ));
    }

    #[test]
    fn normalize_examples() {
        let mut stats = NormStats::identity();
        stats.mean[0] = 5.0;
        stats.std[0] = 2.0;
        assert_eq!(stats.normalize_value(0, 5.0), 0.0);
        assert_eq!(stats.normalize_value(0, 7.0), 1.0);
    }

    #[test]
    fn stats_json_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let stats = NormStats {
            mean: [0.1, -1.0 / 3.0, 9.80665, 1e-17, 2.0f64.sqrt(), -7.25],
            std: [1e-5, 0.3, 1.0 / 7.0, 3.3e-3, 1.0, 123.456789012345],
        };
        let p = dir.path().join("norm.json");
        stats.save_json(&p).unwrap();
        let back = NormStats::load_json(&p).unwrap();
        for c in 0..CHANNELS {
            assert_eq!(back.mean[c].to_bits(), stats.mean[c].to_bits());
            assert_eq!(back.std[c].to_bits(), stats.std[c].to_bits());
        }
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("channel_order"));
    }
}
