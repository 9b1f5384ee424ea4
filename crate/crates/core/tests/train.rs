use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vimu_autodiff::{Graph, NormMode, Tensor};
use vimu_core::data::{ImuWindow, NormStats, CHANNELS};
use vimu_core::denoiser::{init_weights, DenoiserConfig, DenoiserWeights};
use vimu_core::schedule::{build_schedule, predict_x0, AxisSchedule};
use vimu_core::sim::NoiseParams;
use vimu_core::train::{
    estimate_b0_std, fit, load_loss_history, loss_graph, loss_integral, loss_smooth, prepare_batch, save_loss_history,
    steps_per_epoch, PhysicsNorm, PreparedBatch, TrainConfig, Trainer, TrainingData,
};

const DT: f64 = 0.005;

fn noise_params() -> NoiseParams {
    let mut p = NoiseParams::zero(200.0);
    p.sigma_white = [0.02, 0.02, 0.02, 0.05, 0.05, 0.05];
    p.sigma_rw = [0.004, 0.004, 0.004, 0.01, 0.01, 0.01];
    p
}

/// Smooth reference windows with a noisy, offset low-cost partner.
fn synthetic(n: usize, len: usize, noise: f64, seed: u64) -> TrainingData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reference = Vec::new();
    let mut lowcost = Vec::new();
    for w in 0..n {
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let freq: f64 = rng.random_range(0.5..2.0);
        let mut r = Vec::with_capacity(CHANNELS * len);
        let mut l = Vec::with_capacity(CHANNELS * len);
        for c in 0..CHANNELS {
            let offset = 0.05 * rng.sample::<f64, _>(StandardNormal);
            for k in 0..len {
                let v = (freq * std::f64::consts::TAU * k as f64 / len as f64 + phase + c as f64).sin();
                r.push(v);
                l.push(v + offset + noise * rng.sample::<f64, _>(StandardNormal));
            }
        }
        reference.push(ImuWindow::new(r, len, w, w * len).unwrap());
        lowcost.push(ImuWindow::new(l, len, w, w * len).unwrap());
    }
    TrainingData {
        lowcost,
        reference,
        stats: NormStats {
            mean: [0.1, -0.2, 0.0, 0.3, 0.0, 9.8],
            std: [0.5, 1.5, 2.0, 0.8, 1.0, 3.0],
        },
        noise_params: noise_params(),
        dt: DT,
    }
}

fn tiny_config(c: usize, len: usize, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        lr: 2e-3,
        steps: 20,
        seed: 17,
        model: DenoiserConfig::tiny(c, 2, len),
        ..TrainConfig::default()
    }
}

fn batch_for(data: &TrainingData, sched: &AxisSchedule, seed: u64) -> PreparedBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b0 = [0.1; CHANNELS];
    prepare_batch(data, &[0, 1], sched, Some(&b0), None, &mut rng).unwrap()
}

fn loss_value(
    w: &DenoiserWeights,
    batch: &PreparedBatch,
    data: &TrainingData,
    sched: &AxisSchedule,
    cfg: &TrainConfig,
) -> (f64, u64) {
    let mut g = Graph::new();
    let p = w.bind(&mut g);
    let lg = loss_graph(&mut g, w, &p, batch, data, sched, cfg, true, NormMode::Train).unwrap();
    (g.value(lg.total).item().unwrap(), g.kink_signature())
}

fn gradient_check(norm: PhysicsNorm) {
    let len = 16;
    let data = synthetic(2, len, 0.2, 5);
    let cfg = TrainConfig {
        lambda1: 1.0,
        lambda2: 1.0,
        warmup_epochs: 0,
        physics_norm: norm,
        model: DenoiserConfig::tiny(4, 1, len),
        ..TrainConfig::default()
    };
    let sched = build_schedule(&data.noise_params.normalized(&data.stats), &cfg.schedule()).unwrap();
    let batch = batch_for(&data, &sched, 8);
    let mut w = init_weights(&cfg.model, 21).unwrap();

    let mut g = Graph::new();
    let p: IndexMap<String, _> = w.bind(&mut g);
    let lg = loss_graph(&mut g, &w, &p, &batch, &data, &sched, &cfg, true, NormMode::Train).unwrap();
    g.backward(lg.total).unwrap();
    let grads: IndexMap<String, Vec<f64>> = p
        .iter()
        .map(|(k, v)| (k.clone(), g.grad(*v).map(<[f64]>::to_vec).unwrap_or_default()))
        .collect();

    let h = 1e-6;
    let (mut checked, mut skipped) = (0, 0);
    let names: Vec<String> = w.params.keys().cloned().collect();
    for name in &names {
        let n = w.params[name].numel();
        for k in [0, n / 2, n - 1] {
            let orig = w.params[name].data()[k];
            w.params[name].data_mut()[k] = orig + h;
            let (up, sig_up) = loss_value(&w, &batch, &data, &sched, &cfg);
            w.params[name].data_mut()[k] = orig - h;
            let (down, sig_down) = loss_value(&w, &batch, &data, &sched, &cfg);
            w.params[name].data_mut()[k] = orig;
            if sig_up != sig_down {
                skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[name][k];
            let tol = 1e-5 + 1e-4 * numeric.abs().max(analytic.abs());
            assert!(
                (numeric - analytic).abs() <= tol,
                "{name}[{k}]: analytic {analytic:e}, numeric {numeric:e}"
            );
            checked += 1;
        }
    }
    assert!(
        checked >= 50,
        "only {checked} entries checked ({skipped} skipped at kinks)"
    );
}

#[test]
fn full_loss_gradient_matches_finite_differences_l1() {
    gradient_check(PhysicsNorm::L1);
}

#[test]
fn full_loss_gradient_matches_finite_differences_l2() {
    gradient_check(PhysicsNorm::L2);
}

#[test]
fn physics_losses_match_direct_evaluation_in_physical_units() {
    let len = 16;
    let data = synthetic(2, len, 0.2, 6);
    let cfg = TrainConfig {
        warmup_epochs: 0,
        model: DenoiserConfig::tiny(4, 1, len),
        ..TrainConfig::default()
    };
    let sched = build_schedule(&data.noise_params.normalized(&data.stats), &cfg.schedule()).unwrap();
    let batch = batch_for(&data, &sched, 9);
    let w = init_weights(&cfg.model, 2).unwrap();
    let mut g = Graph::new();
    let p = w.bind(&mut g);
    let lg = loss_graph(&mut g, &w, &p, &batch, &data, &sched, &cfg, true, NormMode::Train).unwrap();
    let eps_hat = g.value(lg.pass.eps_hat).clone();

    let per = CHANNELS * len;
    let st = &data.stats;
    let phys = |v: &[f64]| -> Vec<f64> {
        v.chunks(len)
            .enumerate()
            .flat_map(|(c, row)| row.iter().map(move |x| x * st.std[c] + st.mean[c]))
            .collect()
    };
    let (mut x0_all, mut c_all, mut gyro_hat, mut gyro_gt) = (vec![], vec![], vec![], vec![]);
    for (b, &t) in batch.t.iter().enumerate() {
        let r = b * per..(b + 1) * per;
        let x0 = phys(&predict_x0(&batch.x_t.data()[r.clone()], &eps_hat.data()[r.clone()], t, &sched).unwrap());
        let gt = phys(&batch.x0.data()[r.clone()]);
        gyro_hat.extend_from_slice(&x0[..3 * len]);
        gyro_gt.extend_from_slice(&gt[..3 * len]);
        x0_all.extend(x0);
        c_all.extend(phys(&batch.cond.data()[r]));
    }
    let smooth = loss_smooth(&x0_all, &c_all, len, PhysicsNorm::L1).unwrap();
    let integral = loss_integral(&gyro_hat, &gyro_gt, len, DT, PhysicsNorm::L1).unwrap();
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
    assert!(rel(g.value(lg.smooth).item().unwrap(), smooth) < 1e-9);
    assert!(rel(g.value(lg.integral).item().unwrap(), integral) < 1e-9);
}

#[test]
fn physics_losses_do_not_depend_on_the_normalisation_scale() {
    let len = 16;
    let data = synthetic(2, len, 0.2, 7);
    let cfg = TrainConfig {
        warmup_epochs: 0,
        model: DenoiserConfig::tiny(4, 1, len),
        ..TrainConfig::default()
    };
    let sched = build_schedule(&data.noise_params.normalized(&data.stats), &cfg.schedule()).unwrap();
    let batch = batch_for(&data, &sched, 10);
    // a zero output layer makes ε̂ = 0, so x̂0 depends only on x_t
    let mut w = init_weights(&cfg.model, 3).unwrap();
    w.params["out.w"].data_mut().fill(0.0);
    w.params["out.b"].data_mut().fill(0.0);

    let losses = |data: &TrainingData, batch: &PreparedBatch| {
        let mut g = Graph::new();
        let p = w.bind(&mut g);
        let lg = loss_graph(&mut g, &w, &p, batch, data, &sched, &cfg, true, NormMode::Train).unwrap();
        (g.value(lg.smooth).item().unwrap(), g.value(lg.integral).item().unwrap())
    };
    let base = losses(&data, &batch);
    for k in [0.1, 3.0, 250.0] {
        let mut scaled = data.clone();
        scaled.stats.std = data.stats.std.map(|s| s * k);
        let shrink = |t: &Tensor| Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v / k).collect()).unwrap();
        let b2 = PreparedBatch {
            t: batch.t.clone(),
            x0: shrink(&batch.x0),
            eps: batch.eps.clone(),
            x_t: shrink(&batch.x_t),
            cond: shrink(&batch.cond),
        };
        let (s, i) = losses(&scaled, &b2);
        assert!((s - base.0).abs() <= 1e-10 * base.0, "k={k}: smooth {s} vs {}", base.0);
        assert!(
            (i - base.1).abs() <= 1e-10 * base.1,
            "k={k}: integral {i} vs {}",
            base.1
        );
    }
}

#[test]
fn total_loss_identity_and_warm_up() {
    let data = synthetic(16, 32, 0.1, 1);
    let cfg = TrainConfig {
        lambda1: 0.3,
        lambda2: 0.7,
        warmup_epochs: 2,
        ..tiny_config(8, 32, 4)
    };
    let (_, history) = fit(&data, &cfg).unwrap();
    assert_eq!(history.len(), 4 * steps_per_epoch(16, 8));
    for r in &history {
        if r.epoch <= 2 {
            assert_eq!(r.l_total, r.l_simple);
        } else {
            let expect = r.l_simple + 0.3 * r.l_smooth + 0.7 * r.l_integral;
            assert!((r.l_total - expect).abs() <= 1e-12 * expect.abs().max(1.0), "{r:?}");
        }
        assert!(r.l_smooth > 0.0 && r.l_integral > 0.0);
    }
}

#[test]
fn zero_lambdas_reproduce_plain_training() {
    let data = synthetic(16, 32, 0.1, 2);
    let plain = TrainConfig {
        warmup_epochs: 100,
        ..tiny_config(8, 32, 3)
    };
    let zero = TrainConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        warmup_epochs: 0,
        ..plain.clone()
    };
    let (a, ha) = fit(&data, &plain).unwrap();
    let (b, hb) = fit(&data, &zero).unwrap();
    assert_eq!(a.weights, b.weights);
    for (x, y) in ha.iter().zip(&hb) {
        assert_eq!(x.l_simple, y.l_simple);
    }
}

#[test]
fn fit_is_deterministic_and_epochs_zero_keeps_initial_weights() {
    let data = synthetic(12, 32, 0.1, 3);
    let cfg = tiny_config(8, 32, 2);
    let (a, ha) = fit(&data, &cfg).unwrap();
    let (b, hb) = fit(&data, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    let mut ba = Vec::new();
    let mut bb = Vec::new();
    a.write_to(&mut ba).unwrap();
    b.write_to(&mut bb).unwrap();
    assert_eq!(ba, bb);

    let (c, hc) = fit(
        &data,
        &TrainConfig {
            epochs: 0,
            ..cfg.clone()
        },
    )
    .unwrap();
    assert!(hc.is_empty());
    assert_eq!(c.weights, init_weights(&cfg.model, cfg.seed).unwrap());
}

#[test]
fn loss_history_csv_round_trip() {
    let data = synthetic(10, 32, 0.1, 4);
    let cfg = TrainConfig {
        batch_size: 4,
        ..tiny_config(8, 32, 3)
    };
    let (_, history) = fit(&data, &cfg).unwrap();
    assert_eq!(history.len(), 3 * 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.csv");
    save_loss_history(&history, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1 + 9);
    assert_eq!(load_loss_history(&path).unwrap(), history);
}

#[test]
fn b0_std_examples() {
    let w = |v: f64| ImuWindow::new(vec![v; CHANNELS * 4], 4, 0, 0).unwrap();
    let same = [w(1.0), w(3.0)];
    assert_eq!(estimate_b0_std(&same, &same).unwrap(), [0.0; CHANNELS]);
    let low = [w(0.0), w(2.0)];
    let refs = [w(0.0), w(0.0)];
    assert_eq!(estimate_b0_std(&low, &refs).unwrap(), [1.0; CHANNELS]);
    let shifted = [w(5.5), w(7.5)];
    assert_eq!(estimate_b0_std(&shifted, &[w(1.0), w(3.0)]).unwrap(), [0.0; CHANNELS]);
}

#[test]
fn physics_loss_examples_from_functions() {
    // dt linearity of the integral term
    let a = [0.3, -0.2, 0.9, 0.1];
    let b = [0.0, 0.4, 0.2, -0.5];
    let l1 = loss_integral(&a, &b, 4, 0.01, PhysicsNorm::L1).unwrap();
    let l3 = loss_integral(&a, &b, 4, 0.03, PhysicsNorm::L1).unwrap();
    assert!((l3 - 3.0 * l1).abs() < 1e-15);
    // a per-channel constant added to b leaves smoothness unchanged
    let x = [0.1, 0.5, -0.2, 0.3, 1.0, 0.7];
    let c = [1.0, 0.0, 0.5, -1.0, 2.0, 0.0];
    let c2: Vec<f64> = c
        .iter()
        .enumerate()
        .map(|(i, v)| v + if i < 3 { 4.0 } else { -2.5 })
        .collect();
    let s1 = loss_smooth(&x, &c, 3, PhysicsNorm::L1).unwrap();
    let s2 = loss_smooth(&x, &c2, 3, PhysicsNorm::L1).unwrap();
    assert!((s1 - s2).abs() < 1e-15);
}

#[test]
fn trainer_rejects_mismatched_windows() {
    let data = synthetic(4, 32, 0.1, 5);
    assert!(Trainer::new(&data, &tiny_config(8, 16, 1)).is_err());
    let mut bad = data.clone();
    bad.reference.pop();
    assert!(Trainer::new(&bad, &tiny_config(8, 32, 1)).is_err());
}

#[test]
fn tiny_model_overfits() {
    let data = synthetic(32, 32, 0.1, 11);
    let cfg = tiny_config(8, 32, 500);
    let (_, history) = fit(&data, &cfg).unwrap();
    let epoch_mean = |e: usize| {
        let v: Vec<f64> = history.iter().filter(|r| r.epoch == e).map(|r| r.l_simple).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (first, last) = (epoch_mean(1), epoch_mean(500));
    eprintln!("l_simple: first epoch {first:.4}, last epoch {last:.4}");
    assert!(last < 0.1 * first, "last {last} vs first {first}");
}
