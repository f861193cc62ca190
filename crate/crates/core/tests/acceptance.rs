//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! The desk-scale criteria (4 to 7) train four pendulum models and take
//! several minutes in an optimised build.

use std::process::ExitCode;
use std::time::Instant;

use flatvae::data::{
    parse_idx_images, parse_idx_labels, pendulum_dataset, Dataset, PendulumSpec,
};
use flatvae::flatloss::{
    flat_penalty, fmvae_terms, metric_tensor, scale_factor, LossSettings, MixupPlan, ANALYSIS_STEP,
};
use flatvae::nets::{check_model_gradients, Architecture, FmvaeModel, Likelihood};
use flatvae::riemann::{
    bin_labels, cluster_centroids, condition_number, grid_fields, magnification_factor,
    mean_smoothness, metric_statistics, pairwise_midpoints, random_pairs, ratio_table, smoothness,
    BoundingBox, GeodesicGraph, GridSpec, GRAPH_NEIGHBOURS, GRAPH_NODES, PATH_SEGMENTS,
};
use flatvae::tensor::{check_gradients, Tape, Tensor, Var};
use flatvae::trainer::{
    advance_beta, f_beta, fit, init_model, preset, update_beta, Checkpoint, LogRecord, LogWriter,
    TrainConfig, TrainState,
};
use flatvae::vhp::sample_prior;
use flatvae::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Desk-scale settings shared by criteria 4 to 7.
const IMAGES: usize = 5_000;
const STEPS: u64 = 4_000;
const SEED: u64 = 1;
/// The objective weights the penalty against `C` directly, while the
/// preset's η = 1000 weights it against the KL term; with β held at
/// `BETA_INIT` the equivalent weight is `BETA_INIT · 1000`.
const BETA_INIT: f64 = 1e-4;
const ETA: f64 = BETA_INIT * 1000.0;
const PRIOR_SAMPLES: usize = 1_000;
const PAIRS: usize = 100;
const ANGLE_CLUSTERS: usize = 8;
const FIELD_RESOLUTION: usize = 64;
const FIXED_C2_STEPS: u64 = 500;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// `Σ w ⊙ v` with fixed distinct weights.
fn project(tape: &mut Tape, v: Var) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let n = tape.value(v).len();
    let w = tape.constant(Tensor::new(&shape, (0..n).map(|i| 0.3 + (i % 7) as f64 / 5.0).collect())?);
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn criterion_gradients() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut primitive = 0.0f64;
    type Op = fn(&mut Tape, Var, Var) -> Result<Var>;
    let ops: [(&str, Op); 10] = [
        ("matmul", |t, a, b| t.matmul(a, b)),
        ("add", |t, a, b| { let bt = t.reshape(b, &[3, 3])?; t.add(a, bt) }),
        ("mul", |t, a, b| { let bt = t.reshape(b, &[3, 3])?; t.mul(a, bt) }),
        ("tanh", |t, a, _| Ok(t.tanh(a))),
        ("exp", |t, a, _| Ok(t.exp(a))),
        ("sigmoid", |t, a, _| Ok(t.sigmoid(a))),
        ("softplus", |t, a, _| Ok(t.softplus(a))),
        ("square", |t, a, _| Ok(t.square(a))),
        ("logsumexp_rows", |t, a, _| t.logsumexp_rows(a)),
        ("log", |t, a, _| { let s = t.square(a); let p = t.add_scalar(s, 0.5); t.log(p) }),
    ];
    for _ in 0..20 {
        let a = random_tensor(&[3, 3], -2.0, 2.0, &mut rng);
        let b = random_tensor(&[3, 3], -2.0, 2.0, &mut rng);
        for (_, op) in &ops {
            let r = check_gradients(|t, v| { let y = op(t, v[0], v[1])?; project(t, y) }, &[a.clone(), b.clone()], 1e-6)?;
            primitive = primitive.max(r.max_error());
        }
    }

    let mut networks = 0.0f64;
    for seed in 0..100u64 {
        let nx = 2 + (seed % 4) as usize;
        let hidden = [3 + (seed % 5) as usize];
        let arch = Architecture::uniform(nx, 2, &hidden, Likelihood::Gaussian);
        let model = FmvaeModel::new(arch, seed)?;
        let x = random_tensor(&[3, nx], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 1_000));
        let settings = LossSettings { k_importance: 2, eta: 0.5, fixed_c2: Some(1.0), ..LossSettings::default() };
        let r = check_model_gradients(&model, |t, bound| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let terms = fmvae_terms(t, &model, bound, &x, &settings, &mut rng)?;
            Ok(terms.combine(t, 0.3, settings.eta)?.total)
        }, 1e-6)?;
        networks = networks.max(r.max_error());
    }

    let mut penalty = 0.0f64;
    for seed in 0..20u64 {
        let arch = Architecture::uniform(5, 2, &[6], Likelihood::Gaussian);
        let model = FmvaeModel::new(arch, seed)?;
        let x = random_tensor(&[4, 5], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 2_000));
        let settings = LossSettings { k_importance: 2, eta: 1.0, fixed_c2: Some(1.0), ..LossSettings::default() };
        let r = check_model_gradients(&model, |t, bound| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let terms = fmvae_terms(t, &model, bound, &x, &settings, &mut rng)?;
            Ok(terms.penalty.expect("penalty is recorded for eta > 0"))
        }, 3e-6)?;
        penalty = penalty.max(r.max_error());
    }
    Ok(Outcome::new(
        primitive <= 1e-4 && networks <= 1e-3 && penalty <= 1e-3,
        format!("max relative error: primitives {primitive:.1e}, 100 networks {networks:.1e}, flat penalty {penalty:.1e}"),
    ))
}

fn m2(a: f64, b: f64, d: f64) -> Tensor {
    Tensor::from_rows(&[[a, b], [b, d]]).unwrap()
}

fn criterion_oracles() -> Result<Outcome> {
    let i2 = Tensor::identity(2);
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    check("metric_tensor(I)", metric_tensor(&i2)? == i2);
    check("metric_tensor(diag(2,3))", metric_tensor(&m2(2.0, 0.0, 3.0))?.data() == [4.0, 0.0, 0.0, 9.0]);
    check("condition_number(I)", condition_number(&i2)? == 1.0);
    check("condition_number(diag(1,4))", condition_number(&m2(1.0, 0.0, 4.0))? == 4.0);
    check("condition_number([[2,1],[1,2]])", close(condition_number(&m2(2.0, 1.0, 2.0))?, 3.0, 1e-12));
    check("magnification_factor(I)", magnification_factor(&i2)? == 1.0);
    check("magnification_factor(diag(4,9))", magnification_factor(&m2(4.0, 0.0, 9.0))? == 6.0);
    check("scale_factor(I, I)", scale_factor(&[i2.clone(), i2.clone()])? == 1.0);
    check("scale_factor(diag(2,4))", scale_factor(&[m2(2.0, 0.0, 4.0)])? == 3.0);
    check("scale_factor(I, diag(2,4))", scale_factor(&[i2.clone(), m2(2.0, 0.0, 4.0)])? == 2.0);
    check("flat_penalty(2I, 2)", flat_penalty(&[m2(2.0, 0.0, 2.0)], 2.0)? == 0.0);
    check("flat_penalty(diag(1,3), 2)", flat_penalty(&[m2(1.0, 0.0, 3.0)], 2.0)? == 2.0);
    check("flat_penalty([[2,1],[1,2]], 2)", flat_penalty(&[m2(2.0, 1.0, 2.0)], 2.0)? == 2.0);

    let z = Tensor::from_rows(&[[1.0, 2.0], [-3.0, 5.0]])?;
    for (alpha, expect) in [(0.0, [1.0, 2.0]), (1.0, [-3.0, 5.0]), (-0.1, [1.4, 1.7])] {
        let plan = MixupPlan { partner: vec![1, 0], alpha: vec![alpha, alpha] };
        let d = &plan.apply(&z)?[0];
        check(
            &format!("mixup alpha {alpha}"),
            d.z_aug.iter().zip(expect).all(|(a, b)| close(*a, b, 1e-12)),
        );
    }

    check("f_beta violated", [0.01, 1.0, 50.0].iter().all(|&b| f_beta(b, 0.1, 3.0) == -1.0));
    check("f_beta(1, -0.1)", f_beta(1.0, -0.1, 3.0) == 0.0);
    check("f_beta(2, -0.1, 1)", close(f_beta(2.0, -0.1, 1.0), 0.76159, 5e-6));
    check("update_beta at the constraint", update_beta(2.0, 0.0, 1.0, 3.0) == 2.0);
    check("update_beta violated", close(update_beta(2.0, 0.5, 1.0, 3.0), 1.21306, 5e-6));
    // The tabulated 1.21604 carries the rounded exponent −0.49754; the
    // closed form 2·exp(−½·tanh 3) is 1.2160645.
    let satisfied = update_beta(2.0, -0.5, 1.0, 3.0);
    check("update_beta satisfied", close(satisfied, 2.0 * (-0.5 * 3f64.tanh()).exp(), 1e-15) && close(satisfied, 1.21604, 5e-5));
    Ok(Outcome::new(
        failures.is_empty(),
        if failures.is_empty() { "all tabulated examples reproduced".to_string() } else { format!("mismatches: {}", failures.join(", ")) },
    ))
}

fn criterion_beta_dynamics() -> Outcome {
    let (nu, tau) = (1.0, 3.0);
    let starts = [0.01, 0.05, 0.3, 0.9, 1.0, 1.1, 3.0, 10.0, 50.0, 100.0];
    let mut converged = true;
    let mut decreasing = true;
    for &b0 in &starts {
        for delta in [-0.3, -0.05, -0.01] {
            let mut b = b0;
            for _ in 0..20_000 {
                b = update_beta(b, delta, nu, tau);
            }
            converged &= close(b, 1.0, 1e-3);
        }
        for delta in [1e-3, 0.1, 1.0] {
            let mut b = b0;
            for _ in 0..100 {
                let next = update_beta(b, delta, nu, tau);
                decreasing &= next < b;
                b = next;
            }
        }
    }
    let cfg = TrainConfig { kappa: 0.1, ..TrainConfig::default() };
    // Constant streams: violated, then satisfied, then violated again.
    let stream = [(0.05, 100), (0.001, 200), (0.05, 100)];
    let (beta0, mut frozen) = (5.0, true);
    let (mut beta, mut c_hat, mut phase, mut flips) = (beta0, None, true, 0);
    for (c, n) in stream {
        for _ in 0..n {
            let s = advance_beta(beta, c_hat, phase, c, &cfg);
            if phase != s.initial_phase {
                flips += 1;
            }
            if s.initial_phase {
                frozen &= s.beta == beta0;
            }
            (beta, c_hat, phase) = (s.beta, Some(s.c_hat), s.initial_phase);
        }
    }
    let pass = converged && decreasing && flips == 1 && frozen;
    Outcome::new(
        pass,
        format!("converged {converged}, decreasing under violation {decreasing}, phase flips {flips}, β held in initial phase {frozen}"),
    )
}

struct Trained {
    model: FmvaeModel,
    log: Vec<LogRecord>,
}

fn train(data: &Dataset, eta: f64, mixup: bool, fixed_c2: Option<f64>, steps: u64) -> Result<Trained> {
    let p = preset("pendulum")?;
    let cfg = TrainConfig {
        eta,
        beta_init: BETA_INIT,
        mixup_enabled: mixup,
        fixed_c2,
        max_steps: steps,
        seed: SEED,
        ..p.train
    };
    let mut model = init_model(p.architecture, &cfg)?;
    let mut state = TrainState::new(&mut model, &cfg);
    let log = fit(&mut model, data, &cfg, &mut state, |_| Ok(()))?;
    Ok(Trained { model, log })
}

struct Geometry {
    cn_median: f64,
    nmf_iqr: f64,
    obs_mean: f64,
    latent: Vec<f64>,
    smooth: f64,
    midpoint_mf: f64,
}

fn geometry(model: &FmvaeModel, data: &Dataset) -> Result<Geometry> {
    let prior = sample_prior(model, PRIOR_SAMPLES, SEED)?;
    let stats = metric_statistics(model, &prior.z, ANALYSIS_STEP)?;
    let enc = model.encode_mean(data.samples())?;
    let bbox = BoundingBox::around(&enc, 0.1)?;
    let pairs = random_pairs(&enc, PAIRS, SEED)?;
    let graph = GeodesicGraph::build(model, &bbox, GRAPH_NODES, GRAPH_NEIGHBOURS, SEED)?;
    let ratios = ratio_table(model, &graph, &pairs, PATH_SEGMENTS)?;
    let smooth = mean_smoothness(&smoothness(model, &pairs, PATH_SEGMENTS)?);

    let angles = &data.metadata().expect("pendulum data carries angles").values;
    let labels = bin_labels(angles, 0.0, 360.0, ANGLE_CLUSTERS)?;
    let midpoints = pairwise_midpoints(&cluster_centroids(&enc, &labels)?);
    let spec = GridSpec { resolution: FIELD_RESOLUTION, centres: vec![], stencil_radius: 1, jacobian_step: ANALYSIS_STEP };
    let fields = grid_fields(model, &bbox, &spec)?;
    let midpoint_mf = midpoints.iter().map(|p| fields.mf.interpolate(p)).sum::<f64>() / midpoints.len() as f64;
    Ok(Geometry {
        cn_median: stats.condition_summary.median,
        nmf_iqr: stats.normalised_mf_summary.iqr(),
        obs_mean: ratios.observation_stats.mean,
        latent: ratios.latent,
        smooth,
        midpoint_mf,
    })
}

fn fixed_c2_log_is_exact(log: &[LogRecord]) -> Result<bool> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("train_log.csv");
    let mut w = LogWriter::new(std::fs::File::create(&path)?)?;
    for r in log {
        w.write(r)?;
    }
    w.flush()?;
    drop(w);
    let back = flatvae::trainer::read_log(&path)?;
    Ok(back.len() == log.len() && back.iter().all(|r| r.c_squared == 1.0))
}

fn desk_scale() -> Result<[Outcome; 4]> {
    let t0 = Instant::now();
    let data = pendulum_dataset(&PendulumSpec { count: IMAGES, noise_std: 0.05, seed: SEED })?;
    let fm = train(&data, ETA, true, None, STEPS)?;
    let base = train(&data, 0.0, true, None, STEPS)?;
    let nomix = train(&data, ETA, false, None, STEPS)?;
    let fixed = train(&data, ETA, true, Some(1.0), FIXED_C2_STEPS)?;
    eprintln!("trained desk-scale models in {:.0} s", t0.elapsed().as_secs_f64());
    let (g_fm, g_base, g_nomix) = (geometry(&fm.model, &data)?, geometry(&base.model, &data)?, geometry(&nomix.model, &data)?);
    eprintln!("analysed desk-scale models after {:.0} s", t0.elapsed().as_secs_f64());

    let c4 = Outcome::new(
        g_fm.cn_median <= 2.0 && g_fm.cn_median < g_base.cn_median && g_fm.nmf_iqr < g_base.nmf_iqr,
        format!(
            "median condition number {:.3} vs baseline {:.3}; normalised MF IQR {:.3} vs baseline {:.3}",
            g_fm.cn_median, g_base.cn_median, g_fm.nmf_iqr, g_base.nmf_iqr
        ),
    );
    let latent_max = g_fm.latent.iter().chain(&g_base.latent).cloned().fold(0.0, f64::max);
    let c5 = Outcome::new(
        (0.85..=1.15).contains(&g_fm.obs_mean)
            && (1.0 - g_fm.obs_mean).abs() < (1.0 - g_base.obs_mean).abs()
            && latent_max <= 1.0,
        format!(
            "observation ratio {:.3} vs baseline {:.3}; largest latent ratio {:.3}",
            g_fm.obs_mean, g_base.obs_mean, latent_max
        ),
    );
    let c6 = Outcome::new(
        g_fm.smooth < g_base.smooth,
        format!("mean |second difference| {:.3} vs baseline {:.3}", g_fm.smooth, g_base.smooth),
    );
    let fixed_ok = fixed.log.len() as u64 == FIXED_C2_STEPS && fixed_c2_log_is_exact(&fixed.log)?;
    let c7 = Outcome::new(
        g_nomix.midpoint_mf > g_fm.midpoint_mf && fixed_ok,
        format!(
            "midpoint MF without mixup {:.4} vs with {:.4}; fixed c² log exact {fixed_ok}",
            g_nomix.midpoint_mf, g_fm.midpoint_mf
        ),
    );
    Ok([c4, c5, c6, c7])
}

fn criterion_determinism() -> Result<Outcome> {
    let data = pendulum_dataset(&PendulumSpec { count: 64, noise_std: 0.05, seed: 2 })?;
    let arch = Architecture::uniform(256, 2, &[16], Likelihood::Gaussian);
    let cfg = |steps| TrainConfig { k_importance: 2, batch_size: 16, max_steps: steps, eta: 0.5, beta_init: 1e-3, kappa: 1.0, seed: 5, ..TrainConfig::default() };

    let full = cfg(8);
    let mut straight = init_model(arch.clone(), &full)?;
    let mut straight_state = TrainState::new(&mut straight, &full);
    fit(&mut straight, &data, &full, &mut straight_state, |_| Ok(()))?;

    let part = cfg(7);
    let mut model = init_model(arch, &part)?;
    let mut state = TrainState::new(&mut model, &part);
    fit(&mut model, &data, &part, &mut state, |_| Ok(()))?;
    let mut bytes = Vec::new();
    Checkpoint { config: full.clone(), model, state }.write_to(&mut bytes)?;
    let Checkpoint { config, mut model, mut state } = Checkpoint::from_bytes(&bytes)?;
    fit(&mut model, &data, &config, &mut state, |_| Ok(()))?;
    let identical = model == straight && state == straight_state;

    let header = |magic: u32, dims: &[u32]| -> Vec<u8> {
        let mut b = magic.to_be_bytes().to_vec();
        for d in dims {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b
    };
    let mut counts = Vec::new();
    for n in [60_000u32, 10_000] {
        let mut img = header(0x0803, &[n, 28, 28]);
        img.resize(16 + n as usize * 784, 0);
        let mut lab = header(0x0801, &[n]);
        lab.resize(8 + n as usize, 0);
        counts.push((parse_idx_images(&img)?.count, parse_idx_labels(&lab)?.len()));
    }
    let counts_ok = counts == [(60_000, 60_000), (10_000, 10_000)];
    let corrupt = [header(0x0804, &[1, 1, 1]), header(0x0803, &[1, 1]), header(0x0803, &[2, 1, 1])];
    let rejected = corrupt.iter().all(|b| matches!(parse_idx_images(b), Err(Error::Format { .. })));
    Ok(Outcome::new(
        identical && counts_ok && rejected,
        format!("resume bit-identical {identical}; IDX counts {counts:?}; corrupted headers rejected {rejected}"),
    ))
}

fn report(n: usize, outcome: Result<Outcome>, all: &mut bool) {
    let o = outcome.unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
    print_outcome(n, o, all);
}

fn print_outcome(n: usize, o: Outcome, all: &mut bool) {
    *all &= o.pass;
    println!("{} criterion {n}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn main() -> ExitCode {
    let mut all = true;
    report(1, criterion_gradients(), &mut all);
    report(2, criterion_oracles(), &mut all);
    report(3, Ok(criterion_beta_dynamics()), &mut all);
    match desk_scale() {
        Ok(outcomes) => {
            for (k, o) in outcomes.into_iter().enumerate() {
                print_outcome(4 + k, o, &mut all);
            }
        }
        Err(e) => {
            for n in 4..=7 {
                print_outcome(n, Outcome::new(false, format!("desk-scale run failed: {e}")), &mut all);
            }
        }
    }
    report(8, criterion_determinism(), &mut all);
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
