use meet_core::config::{Ablation, ModelConfig};
use meet_core::diagnostics::check_model;
use meet_core::model::{train_alternating, Model, Phase, Samples};
use meet_core::numerics::{Mode, Module, ParamKind, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn param_count(m: &Model<f64>) -> usize {
    let mut n = 0;
    m.visit_params(&mut |p| n += p.len());
    n
}

fn names(m: &Model<f64>) -> Vec<String> {
    let mut v = Vec::new();
    m.visit_params(&mut |p| v.push(p.name().to_string()));
    v
}

/// Hand-derived parameter totals for each network variant.
fn expected_count(c: &ModelConfig) -> usize {
    let (nv, vd) = if c.ablation.uses_mere() {
        (c.n_views, c.view_dim)
    } else {
        (1, c.d_in)
    };
    let mere = if c.ablation.uses_mere() {
        c.n_views * (c.view_dim * c.d_in * c.k + 2 * c.view_dim)
    } else {
        0
    };
    let encoder = if c.ablation.uses_cdta() {
        c.f_long * vd * c.k1
            + c.f_long
            + c.f_short * c.f_long * c.k2
            + c.f_short
            + 3 * c.f_short * c.f_short
            + nv * c.f_short * c.d_proj
            + c.d_proj
    } else {
        nv * vd * c.d_proj + c.d_proj
    };
    let decoder = c.d_proj * c.d_in * c.seq_len + c.d_in * c.seq_len;
    let surrogate = c.d_proj * c.n_classes + c.n_classes;
    mere + encoder + decoder + surrogate
}

#[test]
fn parameter_count_matches_closed_form() {
    for ablation in [Ablation::Full, Ablation::NoMere, Ablation::NoCdta] {
        for base in [ModelConfig::toy(), ModelConfig::default()] {
            let c = ModelConfig { ablation, ..base };
            let m = Model::<f64>::new(&c).unwrap();
            assert_eq!(param_count(&m), expected_count(&c), "{ablation}");
        }
    }
}

#[test]
fn default_full_model_count() {
    // 35 * (8*40*5 + 16) + (64*8*5 + 64 + 32*64*3 + 32 + 3*32*32 + 35*32*64 + 64)
    //   + (64*200 + 200) + (64*3 + 3)
    let c = ModelConfig::default();
    let m = Model::<f64>::new(&c).unwrap();
    assert_eq!(param_count(&m), 56_560 + 83_616 + 13_000 + 195);
}

#[test]
fn ablations_drop_their_parameters() {
    let c = ModelConfig {
        ablation: Ablation::NoMere,
        ..ModelConfig::toy()
    };
    let m = Model::<f64>::new(&c).unwrap();
    assert!(names(&m).iter().all(|n| !n.starts_with("mere.")));
    let c = ModelConfig {
        ablation: Ablation::NoCdta,
        ..ModelConfig::toy()
    };
    let m = Model::<f64>::new(&c).unwrap();
    assert!(names(&m).iter().all(|n| !n.starts_with("cdta.")));
    assert!(names(&m).iter().any(|n| n.starts_with("mere.")));
}

#[test]
fn seed_determines_initial_parameters() {
    let c = ModelConfig::toy();
    let flat = |m: &Model<f64>| {
        let mut v = Vec::new();
        m.visit_params(&mut |p| v.extend_from_slice(p.tensor.data()));
        v
    };
    let a = Model::<f64>::new(&c).unwrap();
    let b = Model::<f64>::new(&c).unwrap();
    assert_eq!(flat(&a), flat(&b));
    let other = Model::<f64>::new(&ModelConfig { seed: 1, ..c }).unwrap();
    assert_ne!(flat(&a), flat(&other));
}

#[test]
fn invalid_config_names_field() {
    let c = ModelConfig {
        heads: 3,
        ..ModelConfig::toy()
    };
    let err = Model::<f64>::new(&c).unwrap_err().to_string();
    assert!(err.contains("heads"), "{err}");
}

fn random_x(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn forward_shapes_and_modes() {
    let c = ModelConfig::toy();
    let mut m = Model::<f64>::new(&c).unwrap();
    let x = random_x(0, &[2, c.d_in, c.seq_len]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let out = m.forward(&mut tape, xv, Mode::Train).unwrap();
    assert_eq!(tape.shape(out.fused.z), &[2, c.d_proj]);
    assert_eq!(tape.shape(out.logits), &[2, c.n_classes]);
    assert_eq!(tape.shape(out.recon), &[2, c.d_in, c.seq_len]);

    let stats = |m: &Model<f64>| {
        m.norm_states()
            .iter()
            .flat_map(|s| s.running_mean.iter().chain(&s.running_var).copied().collect::<Vec<_>>())
            .collect::<Vec<f64>>()
    };
    let after_train = stats(&m);
    let z1 = m.represent(&x).unwrap();
    let z2 = m.represent(&x).unwrap();
    assert_eq!(z1.data(), z2.data());
    assert_eq!(stats(&m), after_train);

    let mut tape = Tape::new();
    let xv = tape.constant(x).unwrap();
    m.forward(&mut tape, xv, Mode::Train).unwrap();
    assert_ne!(stats(&m), after_train);
}

#[test]
fn forward_rejects_wrong_length() {
    let c = ModelConfig::toy();
    let mut m = Model::<f64>::new(&c).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::zeros(&[2, c.d_in, c.seq_len + 1])).unwrap();
    assert!(m.forward(&mut tape, xv, Mode::Train).is_err());
}

#[test]
fn zero_trade_offs_leave_reconstruction() {
    let c = ModelConfig {
        alpha: 0.0,
        beta: 0.0,
        ..ModelConfig::toy()
    };
    let mut m = Model::<f64>::new(&c).unwrap();
    let x = random_x(1, &[3, c.d_in, c.seq_len]);
    let l = m.loss(&x, &[0, 1, 2], Mode::Train).unwrap();
    assert_eq!(l.total, l.l_mse);
}

#[test]
fn zero_weights_zero_input_give_zero_terms() {
    let c = ModelConfig::toy();
    let mut m = Model::<f64>::new(&c).unwrap();
    m.visit_params_mut(&mut |p| p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0));
    let x = Tensor::zeros(&[2, c.d_in, c.seq_len]);
    let l = m.loss(&x, &[0, 1], Mode::Train).unwrap();
    assert_eq!(l.l_reg, 0.0);
    assert_eq!(l.l_mse, 0.0);
}

#[test]
fn hand_computed_single_parameter_loss() {
    // Every parameter zero except one decoder weight w and the decoder bias c.
    // Then z = 0, so recon = c everywhere, logits = 0 and the only weight in
    // the penalty is w.
    let cfg = ModelConfig::toy();
    let (w, c) = (0.7, 0.25);
    let mut m = Model::<f64>::new(&cfg).unwrap();
    m.visit_params_mut(&mut |p| {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        match p.name() {
            "decoder.weight" => p.tensor.data_mut()[3] = w,
            "decoder.bias" => p.tensor.data_mut().iter_mut().for_each(|v| *v = c),
            _ => {}
        }
    });
    let x = random_x(2, &[2, cfg.d_in, cfg.seq_len]);
    let mse = x.data().iter().map(|v| (c - v) * (c - v)).sum::<f64>() / x.len() as f64;
    let expected = mse + cfg.alpha * w * w + cfg.beta * (cfg.n_classes as f64).ln();
    let l = m.loss(&x, &[0, 2], Mode::Train).unwrap();
    assert!((l.total - expected).abs() < 1e-12, "{} vs {expected}", l.total);
    assert!((l.l_reg - w * w).abs() < 1e-15);
}

#[test]
fn every_parameter_passes_gradient_check() {
    let results = check_model(&ModelConfig::toy(), 2, 0).unwrap();
    assert!(results.iter().any(|r| r.name.starts_with("mere.")));
    assert!(results.iter().any(|r| r.name.starts_with("cdta.")));
    for r in &results {
        assert!(r.passed(), "{} error {:e}", r.name, r.max_relative_error);
    }
}

#[test]
fn reconstruction_step_without_mse_is_pure_weight_decay() {
    let c = ModelConfig {
        alpha: 0.3,
        ..ModelConfig::toy()
    };
    let mut m = Model::<f64>::new(&c).unwrap();
    let x = random_x(3, &[2, c.d_in, c.seq_len]);
    let (_, grads) = m.phase_gradients(&x, &[0, 1], Phase::Reconstruction, 0.0).unwrap();
    let mut checked = 0;
    m.visit_params(&mut |p| {
        let Some(g) = grads.get(p.name()) else { return };
        for (gi, wi) in g.iter().zip(p.tensor.data()) {
            let expected = if p.kind() == ParamKind::Weight { c.alpha * 2.0 * wi } else { 0.0 };
            assert!((gi - expected).abs() <= 1e-15 * (1.0 + expected.abs()), "{}", p.name());
        }
        checked += 1;
    });
    assert!(grads.keys().any(|n| n.starts_with("mere.")));
    assert!(!grads.contains_key("surrogate.weight"));
    assert_eq!(checked, grads.len());
}

/// Two classes separated by the sign of channel 0.
fn separable(n: usize, c: &ModelConfig, seed: u64) -> Samples<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let y = i % 2;
        let sign = if y == 0 { 1.0 } else { -1.0 };
        for ch in 0..c.d_in {
            for _ in 0..c.seq_len {
                let noise = rng.random_range(-0.3..0.3);
                data.push(if ch == 0 { sign + noise } else { noise });
            }
        }
        labels.push(y);
    }
    Samples::new(Tensor::new(&[n, c.d_in, c.seq_len], data).unwrap(), labels).unwrap()
}

fn two_class() -> ModelConfig {
    ModelConfig {
        n_classes: 2,
        epochs: 50,
        batch_size: 16,
        learning_rate: 1e-2,
        ..ModelConfig::toy()
    }
}

#[test]
fn separable_classes_reach_full_validation_accuracy() {
    let c = two_class();
    let mut m = Model::<f64>::new(&c).unwrap();
    let h = train_alternating(&mut m, &separable(64, &c, 0), &separable(32, &c, 1)).unwrap();
    assert_eq!(h.epochs.len(), 50);
    assert_eq!(h.valid_accuracy.len(), 50);
    assert_eq!(h.valid_accuracy.iter().cloned().fold(0.0, f64::max), 1.0);
    for s in &h.steps {
        let sum = s.l_mse + c.alpha * s.l_reg + c.beta * s.l_pred;
        assert!((s.total - sum).abs() <= 1e-10);
    }
    for e in &h.epochs {
        let sum = e.l_mse + c.alpha * e.l_reg + c.beta * e.l_pred;
        assert!((e.total - sum).abs() <= 1e-10);
    }
}

#[test]
fn training_is_bit_reproducible() {
    let c = ModelConfig { epochs: 5, ..two_class() };
    let run = || {
        let mut m = Model::<f64>::new(&c).unwrap();
        let h = train_alternating(&mut m, &separable(40, &c, 0), &separable(10, &c, 1)).unwrap();
        let mut p = Vec::new();
        m.visit_params(&mut |q| p.extend(q.tensor.data().iter().map(|v| v.to_bits())));
        (h, p)
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_beta_freezes_surrogate() {
    let c = ModelConfig {
        beta: 0.0,
        epochs: 4,
        ..two_class()
    };
    let mut m = Model::<f64>::new(&c).unwrap();
    let snapshot = |m: &Model<f64>| {
        let mut v = Vec::new();
        m.visit_params(&mut |p| {
            if p.name().starts_with("surrogate.") {
                v.extend_from_slice(p.tensor.data());
            }
        });
        v
    };
    let before = snapshot(&m);
    train_alternating(&mut m, &separable(40, &c, 0), &separable(10, &c, 1)).unwrap();
    assert_eq!(snapshot(&m), before);
}

#[test]
fn last_partial_batch_is_kept() {
    let c = ModelConfig {
        epochs: 2,
        batch_size: 16,
        ..two_class()
    };
    let mut m = Model::<f64>::new(&c).unwrap();
    let h = train_alternating(&mut m, &separable(33, &c, 0), &separable(4, &c, 1)).unwrap();
    assert_eq!(h.steps.len(), 2 * 3);
}

#[test]
fn single_precision_forward_tracks_double() {
    let c = ModelConfig::toy();
    let mut m64 = Model::<f64>::new(&c).unwrap();
    let mut m32 = Model::<f32>::new(&c).unwrap();
    let x = random_x(4, &[2, c.d_in, c.seq_len]);
    let x32 = Tensor::<f32>::from_f64(x.shape(), x.data()).unwrap();
    let a = m64.loss(&x, &[0, 1], Mode::Train).unwrap();
    let b = m32.loss(&x32, &[0, 1], Mode::Train).unwrap();
    assert!((a.total - b.total).abs() < 1e-4 * (1.0 + a.total.abs()));
}
