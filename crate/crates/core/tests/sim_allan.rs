use vimu_core::allan::{compute_av, default_taus, fit_noise_coeffs, to_noise_params, AvFit};
use vimu_core::data::{ImuSeries, WindowingConfig, CHANNELS};
use vimu_core::nav::{dead_reckon, rmse_per_axis};
use vimu_core::sim::{
    builtin_specs, corrupt, generate_truth, make_paired_dataset, make_paired_dataset_with, NoiseParams, TrajectoryKind,
    TrajectoryProfile,
};

const RATE: f64 = 200.0;

fn zeros(n: usize) -> ImuSeries {
    ImuSeries::new(RATE, 0.0, std::array::from_fn(|_| vec![0.0; n])).unwrap()
}

fn white(density: f64) -> NoiseParams {
    let mut p = NoiseParams::zero(RATE);
    p.sigma_white = [density; CHANNELS];
    p
}

fn std_of(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
}

#[test]
fn white_noise_std_and_mean() {
    let density = 2e-3;
    let out = corrupt(&zeros(1_000_000), &white(density), 1).unwrap();
    let expect = density * RATE.sqrt();
    for c in 0..CHANNELS {
        let (m, s) = std_of(out.channel(c));
        assert!((s - expect).abs() < 0.01 * expect, "axis {c}: std {s} vs {expect}");
        assert!(m.abs() < 3.0 * s / (out.len() as f64).sqrt(), "axis {c}: mean {m}");
    }
}

#[test]
fn random_walk_variance_grows_linearly() {
    let sigma_rw = 0.05;
    let n = 1000;
    let mut p = NoiseParams::zero(RATE);
    p.sigma_rw = [sigma_rw; CHANNELS];
    let mut sq = vec![0.0; n];
    let mut paths = 0.0;
    for seed in 0..100 {
        let out = corrupt(&zeros(n), &p, seed).unwrap();
        for c in 0..CHANNELS {
            for (k, v) in out.channel(c).iter().enumerate() {
                sq[k] += v * v;
            }
            paths += 1.0;
        }
    }
    // least-squares slope of var(k) against k through the origin
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (k, s) in sq.iter().enumerate() {
        sxy += k as f64 * s / paths;
        sxx += (k * k) as f64;
    }
    let slope = sxy / sxx;
    let expect = sigma_rw * sigma_rw / RATE;
    assert!((slope - expect).abs() < 0.1 * expect, "slope {slope:e} vs {expect:e}");
}

#[test]
fn white_noise_cluster_variance_matches_closed_form() {
    let per_sample = 0.01;
    let out = corrupt(&zeros(1_000_000), &white(per_sample / RATE.sqrt()), 2).unwrap();
    let curve = compute_av(out.channel(0), RATE, &[20]).unwrap();
    let sigma = curve.sigma()[0];
    let expect = per_sample / 20f64.sqrt();
    assert!((sigma - expect).abs() < 0.05 * expect, "{sigma} vs {expect}");
}

#[test]
fn white_noise_log_slope_is_minus_one_half() {
    let out = corrupt(&zeros(1_000_000), &white(1e-3), 3).unwrap();
    let ch = out.channel(1);
    let curve = compute_av(ch, RATE, &default_taus(ch.len())).unwrap();
    let xs: Vec<f64> = curve.taus.iter().map(|t| t.log10()).collect();
    let ys: Vec<f64> = curve.sigma().iter().map(|s| s.log10()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!((-0.55..=-0.45).contains(&slope), "slope {slope}");
}

#[test]
fn scaling_the_input_scales_the_variance_quadratically() {
    let out = corrupt(&zeros(20_000), &white(1e-3), 4).unwrap();
    let x = out.channel(0);
    let scaled: Vec<f64> = x.iter().map(|v| v * 2.0).collect();
    let taus = default_taus(x.len());
    let a = compute_av(x, RATE, &taus).unwrap();
    let b = compute_av(&scaled, RATE, &taus).unwrap();
    for (s, t) in a.sigma2.iter().zip(&b.sigma2) {
        assert_eq!(*t, 4.0 * s);
        assert!(*s >= 0.0);
    }
}

fn fit_channel(series: &ImuSeries, c: usize) -> AvFit {
    let ch = series.channel(c);
    fit_noise_coeffs(&compute_av(ch, RATE, &default_taus(ch.len())).unwrap()).unwrap()
}

#[test]
fn angle_random_walk_is_recovered() {
    let n_true = 1e-3;
    let out = corrupt(&zeros(1 << 20), &white(n_true), 5).unwrap();
    for c in [0, 3] {
        let fit = fit_channel(&out, c);
        assert!(!fit.arw.absent);
        assert!(
            (fit.arw.value - n_true).abs() < 0.1 * n_true,
            "axis {c}: N = {}",
            fit.arw.value
        );
    }
}

#[test]
fn rate_random_walk_is_recovered() {
    let k_true = 1e-3;
    let mut p = NoiseParams::zero(RATE);
    p.sigma_rw = [k_true; CHANNELS];
    let out = corrupt(&zeros(1 << 20), &p, 6).unwrap();
    for c in [1, 4] {
        let fit = fit_channel(&out, c);
        assert!(!fit.rrw.absent);
        assert!(
            (fit.rrw.value - k_true).abs() < 0.2 * k_true,
            "axis {c}: K = {}",
            fit.rrw.value
        );
    }
}

#[test]
fn params_survive_corrupt_and_fit() {
    let mut p = NoiseParams::zero(RATE);
    p.sigma_white = [1e-3, 2e-3, 5e-4, 1e-2, 2e-2, 5e-3];
    p.sigma_rw = p.sigma_white.map(|w| w / 10.0);
    let out = corrupt(&zeros(1 << 21), &p, 7).unwrap();
    let fits: [AvFit; CHANNELS] = std::array::from_fn(|c| fit_channel(&out, c));
    let back = to_noise_params(&fits, RATE);
    for c in 0..CHANNELS {
        let w = back.sigma_white[c] / p.sigma_white[c];
        let k = back.sigma_rw[c] / p.sigma_rw[c];
        assert!((w - 1.0).abs() < 0.2, "axis {c}: white ratio {w}");
        assert!((k - 1.0).abs() < 0.2, "axis {c}: rw ratio {k}");
    }
}

#[test]
fn constant_input_fits_to_nothing() {
    let series = ImuSeries::new(RATE, 0.0, std::array::from_fn(|c| vec![c as f64; 10_000])).unwrap();
    let fits: [AvFit; CHANNELS] = std::array::from_fn(|c| fit_channel(&series, c));
    for f in &fits {
        assert!(f.arw.absent && f.rrw.absent && f.bias_instability.absent && f.quantization.absent);
    }
    let p = to_noise_params(&fits, RATE);
    assert_eq!(p, NoiseParams::zero(RATE));
}

#[test]
fn figure_eight_truth_is_self_consistent() {
    let profile = TrajectoryProfile::new(TrajectoryKind::FigureEight, 60.0);
    let (imu, truth) = generate_truth(&profile, RATE).unwrap();
    assert_eq!(imu.len(), 12_000);
    let sol = dead_reckon(&imu, &truth.states[0], true).unwrap();
    let (mut worst_p, mut worst_a) = (0.0f64, 0.0f64);
    for (s, t) in sol.states.iter().zip(&truth.states) {
        worst_p = worst_p.max((s.position - t.position).norm());
        worst_a = worst_a.max(s.attitude.angle_to(&t.attitude));
    }
    assert!(worst_p < 1e-3, "position error {worst_p}");
    assert!(worst_a < 1e-4, "attitude error {worst_a}");
}

#[test]
fn piecewise_dynamic_truth_is_self_consistent() {
    let profile = TrajectoryProfile::new(TrajectoryKind::PiecewiseDynamic, 60.0);
    let (imu, truth) = generate_truth(&profile, RATE).unwrap();
    let sol = dead_reckon(&imu, &truth.states[0], true).unwrap();
    // rate steps at segment switches cost up to Δω·dt/2 of attitude each
    let switches = 60.0 / 10.0;
    let max_rate_step = 2.0 * 0.1;
    let att_bound = switches * max_rate_step * imu.dt() / 2.0;
    for (s, t) in sol.states.iter().zip(&truth.states) {
        assert!(s.attitude.angle_to(&t.attitude) <= att_bound);
        assert!((s.position - t.position).norm() < 0.05);
    }
}

#[test]
fn zero_noise_condition_equals_reference() {
    let profile = TrajectoryProfile::new(TrajectoryKind::FigureEight, 10.0);
    let (truth, _) = generate_truth(&profile, RATE).unwrap();
    let zero = NoiseParams::zero(RATE);
    assert_eq!(corrupt(&truth, &zero, 1).unwrap(), corrupt(&truth, &zero, 2).unwrap());
    // a planar, noiseless run has constant roll and pitch rates, which
    // cannot be normalised
    let windowing = WindowingConfig {
        length: 200,
        stride: 50,
    };
    let err = make_paired_dataset_with(&profile, &zero, &zero, RATE, &windowing, 1).unwrap_err();
    assert!(matches!(err, vimu_core::Error::DegenerateChannel { channel: 0, .. }));
}

#[test]
fn paired_windows_are_aligned() {
    let profile = TrajectoryProfile::new(TrajectoryKind::FigureEight, 10.0);
    let windowing = WindowingConfig {
        length: 200,
        stride: 50,
    };
    let d = make_paired_dataset(&profile, &builtin_specs(), &windowing, 1).unwrap();
    assert_eq!(d.windows_lowcost.len(), 37);
    assert_eq!(d.windows_lowcost.len(), d.windows_reference.len());
    for (k, (l, r)) in d.windows_lowcost.iter().zip(&d.windows_reference).enumerate() {
        assert_eq!((l.window_index, l.source_offset), (k, 50 * k));
        assert_eq!((r.window_index, r.source_offset), (k, 50 * k));
    }
}

#[test]
fn lowcost_is_worse_than_reference_on_every_axis() {
    let profile = TrajectoryProfile::new(TrajectoryKind::FigureEight, 60.0);
    let windowing = WindowingConfig {
        length: 200,
        stride: 50,
    };
    let d = make_paired_dataset(&profile, &builtin_specs(), &windowing, 3).unwrap();
    let low = rmse_per_axis(&d.lowcost, &d.truth).unwrap();
    let refr = rmse_per_axis(&d.reference, &d.truth).unwrap();
    for c in 0..CHANNELS {
        assert!(low[c] > refr[c], "axis {c}: {} vs {}", low[c], refr[c]);
    }
}

#[test]
fn paired_dataset_is_reproducible() {
    let profile = TrajectoryProfile::new(TrajectoryKind::ConstantRateTurn, 5.0);
    let windowing = WindowingConfig {
        length: 100,
        stride: 100,
    };
    let a = make_paired_dataset(&profile, &builtin_specs(), &windowing, 8).unwrap();
    let b = make_paired_dataset(&profile, &builtin_specs(), &windowing, 8).unwrap();
    assert_eq!(a.lowcost, b.lowcost);
    assert_eq!(a.stats, b.stats);
    let c = make_paired_dataset(&profile, &builtin_specs(), &windowing, 9).unwrap();
    assert_ne!(a.lowcost, c.lowcost);
}
