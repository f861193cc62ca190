//! β dynamics on synthetic constraint streams and small training runs.

use flatvae::data::{DataKind, Dataset};
use flatvae::nets::{Architecture, Likelihood};
use flatvae::tensor::Tensor;
use flatvae::trainer::{advance_beta, fit, init_model, update_beta, TrainConfig, TrainState};
use proptest::prelude::*;

const TAU: f64 = 3.0;

fn config() -> TrainConfig {
    TrainConfig {
        kappa: 0.1,
        ..TrainConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn beta_converges_to_one_under_satisfaction(beta0 in 0.01f64..100.0, delta in -0.3f64..-0.001, nu in 0.5f64..1.0) {
        let mut beta = beta0;
        for _ in 0..50_000 {
            beta = update_beta(beta, delta, nu, TAU);
        }
        prop_assert!((beta - 1.0).abs() <= 1e-3, "{beta0} → {beta}");
    }

    #[test]
    fn beta_approaches_one_monotonically(beta0 in 0.01f64..100.0, delta in -0.3f64..-0.001) {
        let mut beta = beta0;
        for _ in 0..2_000 {
            let next = update_beta(beta, delta, 1.0, TAU);
            prop_assert!((next - 1.0).abs() <= (beta - 1.0).abs());
            prop_assert!((next - 1.0).signum() == (beta - 1.0).signum() || next == 1.0);
            beta = next;
        }
    }

    #[test]
    fn beta_strictly_decreases_under_violation(beta0 in 0.01f64..100.0, delta in 1e-3f64..1.0, nu in 0.5f64..2.0) {
        let mut beta = beta0;
        for _ in 0..100 {
            let next = update_beta(beta, delta, nu, TAU);
            prop_assert!(next < beta);
            prop_assert!(next > 0.0);
            beta = next;
        }
    }

    #[test]
    fn initial_phase_ends_exactly_once(
        stream in prop::collection::vec(0.0f64..0.05, 1..200),
        beta0 in 0.01f64..100.0,
    ) {
        let cfg = config();
        let kappa2 = cfg.kappa * cfg.kappa;
        let (mut beta, mut c_hat, mut phase) = (beta0, None, true);
        let mut flips = 0;
        let mut ever_below = false;
        for &c in &stream {
            let s = advance_beta(beta, c_hat, phase, c, &cfg);
            ever_below |= s.c_hat < kappa2;
            if phase && !s.initial_phase {
                flips += 1;
            }
            prop_assert!(phase || !s.initial_phase, "the phase never restarts");
            if s.initial_phase {
                prop_assert_eq!(s.beta, beta0);
            }
            beta = s.beta;
            c_hat = Some(s.c_hat);
            phase = s.initial_phase;
        }
        prop_assert_eq!(flips, usize::from(ever_below));
    }

    #[test]
    fn constant_stream_keeps_the_average(v in 0.0f64..10.0, n in 1usize..50) {
        let cfg = config();
        let mut c_hat = None;
        for _ in 0..n {
            let s = advance_beta(1.0, c_hat, true, v, &cfg);
            prop_assert!((s.c_hat - v).abs() <= 1e-12 * v.max(1.0));
            c_hat = Some(s.c_hat);
        }
    }
}

#[test]
fn satisfied_first_batch_ends_the_initial_phase_immediately() {
    let cfg = config();
    let s = advance_beta(2.0, None, true, 0.5 * cfg.kappa * cfg.kappa, &cfg);
    assert!(!s.initial_phase);
    assert!(s.beta < 2.0);
    let t = advance_beta(s.beta, Some(s.c_hat), s.initial_phase, 1.0, &cfg);
    assert!(!t.initial_phase);
}

#[test]
fn boundary_counts_as_violated() {
    assert_eq!(update_beta(3.0, 0.0, 1.0, TAU), 3.0);
    assert!(update_beta(3.0, 1e-9, 1.0, TAU) < 3.0);
}

fn small_config(steps: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        eta: 0.0,
        k_importance: 2,
        batch_size: 2,
        max_steps: steps,
        learning_rate: 1e-2,
        seed,
        ..TrainConfig::default()
    }
}

fn arch() -> Architecture {
    Architecture::uniform(3, 2, &[8], Likelihood::Gaussian)
}

#[test]
fn zero_steps_leave_the_model_unchanged() {
    let cfg = small_config(0, 1);
    let data = Dataset::new(Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap(), DataKind::Continuous).unwrap();
    let mut model = init_model(arch(), &cfg).unwrap();
    let before = model.clone();
    let mut st = TrainState::new(&mut model, &cfg);
    let log = fit(&mut model, &data, &cfg, &mut st, |_| Ok(())).unwrap();
    assert!(log.is_empty());
    assert_eq!(model, before);
    assert_eq!(st.step, 0);
}

#[test]
fn log_has_one_record_per_step() {
    let cfg = small_config(17, 2);
    let data = Dataset::new(Tensor::matrix(4, 3, (0..12).map(|v| v as f64 / 12.0).collect()).unwrap(), DataKind::Continuous).unwrap();
    let mut model = init_model(arch(), &cfg).unwrap();
    let mut st = TrainState::new(&mut model, &cfg);
    let log = fit(&mut model, &data, &cfg, &mut st, |_| Ok(())).unwrap();
    assert_eq!(log.len(), 17);
    assert_eq!(log.iter().map(|r| r.step).collect::<Vec<_>>(), (1..=17).collect::<Vec<_>>());
}

#[test]
fn single_datum_loss_decreases() {
    // One Gaussian datum, repeated to fill the batch. κ is tiny so the prior
    // networks stay frozen in the initial phase.
    let datum = [0.7, -0.4, 1.1];
    let data = Dataset::new(Tensor::matrix(2, 3, [datum, datum].concat()).unwrap(), DataKind::Continuous).unwrap();
    let mut drops = Vec::new();
    for seed in 0..5 {
        let cfg = TrainConfig { kappa: 1e-6, ..small_config(100, seed) };
        let mut model = init_model(arch(), &cfg).unwrap();
        let prior_before = (model.prior_encoder.clone(), model.prior_decoder.clone());
        let mut st = TrainState::new(&mut model, &cfg);
        let log = fit(&mut model, &data, &cfg, &mut st, |_| Ok(())).unwrap();
        assert!(st.initial_phase);
        assert_eq!((model.prior_encoder.clone(), model.prior_decoder.clone()), prior_before);
        let mean = |r: &[flatvae::trainer::LogRecord]| r.iter().map(|l| l.total).sum::<f64>() / r.len() as f64;
        drops.push(mean(&log[..10]) - mean(&log[90..]));
    }
    drops.sort_by(f64::total_cmp);
    assert!(drops[2] > 0.0, "median drop {}", drops[2]);
}
