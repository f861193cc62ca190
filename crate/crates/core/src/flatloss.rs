//! Decoder Jacobians, the metric tensor `G = JᵀJ`, latent mixup and the
//! flatness-regularised objective.
//!
//! Jacobians are forward differences: column `t` is
//! `(f(z + h·e_t) − f(z)) / h`. All `1 + N_z` evaluations for a batch are
//! stacked into a single decoder pass, so on a tape the gradient of any
//! function of `J` with respect to the decoder weights is an ordinary
//! first-order gradient.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nets::{reconstruction_constraint, BoundModel, FmvaeModel, LatentDecoder};
use crate::tensor::{Tape, Tensor, Var};
use crate::vhp::kl_bound_on_tape;

/// Default finite-difference step for analysis.
pub const ANALYSIS_STEP: f64 = 1e-4;
/// Default finite-difference step during training.
pub const TRAINING_STEP: f64 = 1e-2;

/// A latent point with its decoder Jacobian and metric tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSample {
    pub z: Vec<f64>,
    /// `[N_x × N_z]`
    pub jacobian: Tensor,
    /// `[N_z × N_z]`
    pub metric: Tensor,
}

/// The `1 + N_z` stacked inputs for a forward-difference Jacobian: the batch
/// itself followed by one shifted copy per latent axis.
fn stacked_offsets(z: &Tensor, h: f64) -> Tensor {
    let (n, nz) = (z.rows(), z.cols());
    let mut data = Vec::with_capacity((1 + nz) * n * nz);
    data.extend_from_slice(z.data());
    for t in 0..nz {
        for i in 0..n {
            for (a, &v) in z.row(i).iter().enumerate() {
                data.push(if a == t { v + h } else { v });
            }
        }
    }
    Tensor::from_parts(vec![(1 + nz) * n, nz], data)
}

/// Jacobians of `decoder` at every row of `z`, from a single batched pass.
pub fn approx_jacobian(decoder: &dyn LatentDecoder, z: &Tensor, h: f64) -> Result<Vec<Tensor>> {
    if !(h > 0.0) {
        return Err(Error::contract(format!("jacobian step must be positive, got {h}")));
    }
    let nz = decoder.latent_dim();
    if z.rank() != 2 || z.cols() != nz {
        return Err(Error::ShapeMismatch {
            op: "approx_jacobian",
            lhs: z.shape().to_vec(),
            rhs: vec![nz],
        });
    }
    let n = z.rows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let f = decoder.decode(&stacked_offsets(z, h))?;
    let nx = f.cols();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let base = f.row(i);
        let mut j = vec![0.0; nx * nz];
        for t in 0..nz {
            let shifted = f.row((1 + t) * n + i);
            for d in 0..nx {
                j[d * nz + t] = (shifted[d] - base[d]) / h;
            }
        }
        out.push(Tensor::from_parts(vec![nx, nz], j));
    }
    Ok(out)
}

/// `G = JᵀJ`.
pub fn metric_tensor(jacobian: &Tensor) -> Result<Tensor> {
    if jacobian.rank() != 2 {
        return Err(Error::contract("metric_tensor expects a rank-2 Jacobian"));
    }
    let (nx, nz) = (jacobian.rows(), jacobian.cols());
    let mut g = vec![0.0; nz * nz];
    crate::tensor::gemm(nz, nx, nz, jacobian.data(), true, jacobian.data(), false, &mut g, 0.0);
    // Symmetrise away rounding differences between the two triangles.
    for a in 0..nz {
        for b in a + 1..nz {
            let m = 0.5 * (g[a * nz + b] + g[b * nz + a]);
            g[a * nz + b] = m;
            g[b * nz + a] = m;
        }
    }
    Ok(Tensor::from_parts(vec![nz, nz], g))
}

/// Jacobians and metric tensors at every row of `z`.
pub fn metric_samples(decoder: &dyn LatentDecoder, z: &Tensor, h: f64) -> Result<Vec<MetricSample>> {
    approx_jacobian(decoder, z, h)?
        .into_iter()
        .enumerate()
        .map(|(i, j)| {
            Ok(MetricSample {
                z: z.row(i).to_vec(),
                metric: metric_tensor(&j)?,
                jacobian: j,
            })
        })
        .collect()
}

/// Recorded metric tensors for a batch of latent points.
#[derive(Clone, Debug)]
pub struct MetricVars {
    /// `entries[a][b]` holds `G_ab` for every batch row, shape `[batch]`.
    /// Only `a ≤ b` is populated; the metric is symmetric.
    pub entries: Vec<Vec<Option<Var>>>,
    pub batch: usize,
}

impl MetricVars {
    pub fn get(&self, a: usize, b: usize) -> Var {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        self.entries[a][b].expect("upper triangle populated")
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }
}

/// Records `G(z)` for each row of `z` through the decoder `f`, which maps a
/// `[m × N_z]` tape value to `[m × N_x]`.
pub fn metric_on_tape(
    tape: &mut Tape,
    z: Var,
    h: f64,
    mut f: impl FnMut(&mut Tape, Var) -> Result<Var>,
) -> Result<MetricVars> {
    if !(h > 0.0) {
        return Err(Error::contract(format!("jacobian step must be positive, got {h}")));
    }
    let (n, nz) = (tape.value(z).rows(), tape.value(z).cols());
    let mut parts = vec![z];
    for t in 0..nz {
        let mut e = vec![0.0; nz];
        e[t] = h;
        let shift = tape.constant(Tensor::vector(e));
        parts.push(tape.add(z, shift)?);
    }
    let stacked = tape.concat(&parts, 0)?;
    let out = f(tape, stacked)?;
    let base = tape.slice(out, 0, 0, n)?;
    let mut cols = Vec::with_capacity(nz);
    for t in 0..nz {
        let shifted = tape.slice(out, 0, (1 + t) * n, n)?;
        let diff = tape.sub(shifted, base)?;
        cols.push(tape.scale(diff, 1.0 / h));
    }
    let mut entries = vec![vec![None; nz]; nz];
    for a in 0..nz {
        for b in a..nz {
            let prod = tape.mul(cols[a], cols[b])?;
            entries[a][b] = Some(tape.sum_rows(prod));
        }
    }
    Ok(MetricVars { entries, batch: n })
}

/// `c² = mean over the batch of tr(G)/N_z`.
pub fn scale_factor(metrics: &[Tensor]) -> Result<f64> {
    if metrics.is_empty() {
        return Err(Error::contract("scale factor of an empty batch"));
    }
    let nz = metrics[0].rows();
    let mut total = 0.0;
    for g in metrics {
        if g.shape() != [nz, nz] {
            return Err(Error::ShapeMismatch {
                op: "scale_factor",
                lhs: vec![nz, nz],
                rhs: g.shape().to_vec(),
            });
        }
        total += (0..nz).map(|a| g.get(a, a)).sum::<f64>() / nz as f64;
    }
    Ok(total / metrics.len() as f64)
}

/// Mean over the batch of `‖G − c²I‖²_F`.
pub fn flat_penalty(metrics: &[Tensor], c2: f64) -> Result<f64> {
    if metrics.is_empty() {
        return Err(Error::contract("flat penalty of an empty batch"));
    }
    let mut total = 0.0;
    for g in metrics {
        let nz = g.rows();
        for a in 0..nz {
            for b in 0..nz {
                let target = if a == b { c2 } else { 0.0 };
                total += (g.get(a, b) - target).powi(2);
            }
        }
    }
    Ok(total / metrics.len() as f64)
}

/// Scale factor from recorded metrics, read off the values (no gradient).
fn scale_factor_of(tape: &Tape, g: &MetricVars) -> f64 {
    let nz = g.dim();
    let mut total = 0.0;
    for a in 0..nz {
        total += tape.value(g.get(a, a)).data().iter().sum::<f64>();
    }
    total / (nz * g.batch) as f64
}

/// Recorded counterpart of [`flat_penalty`]; `c2` is a constant.
fn flat_penalty_on_tape(tape: &mut Tape, g: &MetricVars, c2: f64) -> Result<Var> {
    let nz = g.dim();
    let mut acc: Option<Var> = None;
    for a in 0..nz {
        for b in a..nz {
            let term = if a == b {
                let d = tape.add_scalar(g.get(a, a), -c2);
                tape.square(d)
            } else {
                let sq = tape.square(g.get(a, b));
                tape.scale(sq, 2.0)
            };
            acc = Some(match acc {
                None => term,
                Some(prev) => tape.add(prev, term)?,
            });
        }
    }
    let per_row = acc.expect("latent dimension is positive");
    Ok(tape.mean(per_row))
}

/// Partners and interpolation weights for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MixupPlan {
    pub partner: Vec<usize>,
    pub alpha: Vec<f64>,
}

/// One augmented latent point `(1 − α)·z_i + α·z_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixupDraw {
    pub z_i: Vec<f64>,
    pub z_j: Vec<f64>,
    pub alpha: f64,
    pub z_aug: Vec<f64>,
}

impl MixupPlan {
    /// Random permutation partners and `α ~ U(−α₀, 1 + α₀)`.
    pub fn draw(n: usize, alpha0: f64, rng: &mut impl Rng) -> Result<Self> {
        if n < 2 {
            return Err(Error::contract(format!("mixup needs at least 2 samples, got {n}")));
        }
        if !(alpha0 >= 0.0) {
            return Err(Error::contract(format!("alpha0 must be non-negative, got {alpha0}")));
        }
        let mut partner: Vec<usize> = (0..n).collect();
        partner.shuffle(rng);
        let alpha = (0..n)
            .map(|_| -alpha0 + (1.0 + 2.0 * alpha0) * rng.random::<f64>())
            .collect();
        Ok(MixupPlan { partner, alpha })
    }

    /// Applies the plan to the rows of `z`.
    pub fn apply(&self, z: &Tensor) -> Result<Vec<MixupDraw>> {
        if z.rows() != self.partner.len() {
            return Err(Error::contract(format!(
                "mixup plan for {} rows applied to {}",
                self.partner.len(),
                z.rows()
            )));
        }
        Ok(self
            .partner
            .iter()
            .zip(&self.alpha)
            .enumerate()
            .map(|(i, (&j, &alpha))| {
                let (zi, zj) = (z.row(i), z.row(j));
                MixupDraw {
                    z_i: zi.to_vec(),
                    z_j: zj.to_vec(),
                    alpha,
                    z_aug: zi
                        .iter()
                        .zip(zj)
                        .map(|(a, b)| (1.0 - alpha) * a + alpha * b)
                        .collect(),
                }
            })
            .collect())
    }

    /// Records the augmented batch on `tape`.
    pub fn apply_on_tape(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let (n, nz) = (tape.value(z).rows(), tape.value(z).cols());
        if n != self.partner.len() {
            return Err(Error::contract(format!(
                "mixup plan for {} rows applied to {n}",
                self.partner.len()
            )));
        }
        let keep: Vec<f64> = self.alpha.iter().flat_map(|a| std::iter::repeat_n(1.0 - a, nz)).collect();
        let take: Vec<f64> = self.alpha.iter().flat_map(|a| std::iter::repeat_n(*a, nz)).collect();
        let keep = tape.constant(Tensor::new(&[n, nz], keep)?);
        let take = tape.constant(Tensor::new(&[n, nz], take)?);
        let zj = tape.gather_rows(z, &self.partner)?;
        let a = tape.mul(z, keep)?;
        let b = tape.mul(zj, take)?;
        tape.add(a, b)
    }
}

/// Seeded mixup of the rows of `z`.
pub fn mixup_batch(z: &Tensor, seed: u64, alpha0: f64) -> Result<Vec<MixupDraw>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MixupPlan::draw(z.rows(), alpha0, &mut rng)?.apply(z)
}

/// Settings of the objective that do not change during training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub k_importance: usize,
    pub eta: f64,
    pub alpha0: f64,
    pub jacobian_step: f64,
    pub mixup_enabled: bool,
    /// Replaces the batch scale factor when set.
    pub fixed_c2: Option<f64>,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            k_importance: 16,
            eta: 1000.0,
            alpha0: 0.1,
            jacobian_step: TRAINING_STEP,
            mixup_enabled: true,
            fixed_c2: None,
        }
    }
}

/// Values of the objective's terms for one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub constraint_c: f64,
    pub kl_bound_f: f64,
    pub flat_penalty: f64,
    pub c_squared: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.constraint_c,
            self.kl_bound_f,
            self.flat_penalty,
            self.c_squared,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Handles of a recorded objective.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// The three recorded terms of the objective before weighting.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    /// `C`, shape `[1]`.
    pub constraint: Var,
    /// `F`, shape `[1]`.
    pub kl_bound: Var,
    /// `R`, shape `[1]`; only recorded when `η > 0`.
    pub penalty: Option<Var>,
    /// Posterior samples, `[batch × N_z]`.
    pub z: Var,
    /// Raw decoder output at `z`.
    pub decoded: Var,
    pub penalty_value: f64,
    pub c_squared: f64,
}

fn finite_or_fault(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::TrainingFault {
            component: name.to_string(),
            step: None,
            detail: format!("non-finite value {v}"),
        })
    }
}

/// Records `C`, `F` and `R` for the batch `x`.
///
/// `R` is evaluated at mixup points built from the posterior samples (or at
/// the samples themselves when mixup is disabled). With `η = 0` the penalty is
/// still evaluated for logging but is not recorded.
pub fn fmvae_terms(
    tape: &mut Tape,
    model: &FmvaeModel,
    bound: &BoundModel,
    x: &Tensor,
    settings: &LossSettings,
    rng: &mut impl Rng,
) -> Result<LossTerms> {
    let xv = tape.constant(x.clone());
    let kl = kl_bound_on_tape(tape, bound, xv, settings.k_importance, rng)?;
    let decoded = bound.decode_raw(tape, kl.z)?;
    let constraint = reconstruction_constraint(tape, xv, decoded, bound.likelihood)?;

    let plan = if settings.mixup_enabled {
        Some(MixupPlan::draw(x.rows(), settings.alpha0, rng)?)
    } else {
        None
    };

    let (penalty, penalty_value, c_squared) = if settings.eta > 0.0 {
        let z_aug = match &plan {
            Some(p) => p.apply_on_tape(tape, kl.z)?,
            None => kl.z,
        };
        let g = metric_on_tape(tape, z_aug, settings.jacobian_step, |t, z| {
            bound.decode_mean(t, z)
        })?;
        let c2 = settings.fixed_c2.unwrap_or_else(|| scale_factor_of(tape, &g));
        let r = flat_penalty_on_tape(tape, &g, c2)?;
        (Some(r), tape.value(r).item(), c2)
    } else {
        let z = tape.value(kl.z).clone();
        let z_aug = match &plan {
            Some(p) => {
                let rows: Vec<Vec<f64>> = p.apply(&z)?.into_iter().map(|d| d.z_aug).collect();
                Tensor::from_rows(&rows)?
            }
            None => z,
        };
        let metrics: Vec<Tensor> = metric_samples(model, &z_aug, settings.jacobian_step)?
            .into_iter()
            .map(|s| s.metric)
            .collect();
        let c2 = match settings.fixed_c2 {
            Some(c) => c,
            None => scale_factor(&metrics)?,
        };
        (None, flat_penalty(&metrics, c2)?, c2)
    };

    Ok(LossTerms {
        constraint,
        kl_bound: kl.f,
        penalty,
        z: kl.z,
        decoded,
        penalty_value,
        c_squared,
    })
}

impl LossTerms {
    /// Records `C + β·F + η·R` and checks every term for finiteness.
    pub fn combine(&self, tape: &mut Tape, beta: f64, eta: f64) -> Result<LossVars> {
        if !(beta > 0.0) {
            return Err(Error::contract(format!("beta must be positive, got {beta}")));
        }
        let weighted_kl = tape.scale(self.kl_bound, beta);
        let mut total = tape.add(self.constraint, weighted_kl)?;
        if let Some(r) = self.penalty {
            let weighted = tape.scale(r, eta);
            total = tape.add(total, weighted)?;
        }
        let breakdown = LossBreakdown {
            total: finite_or_fault("total loss", tape.value(total).item())?,
            constraint_c: finite_or_fault(
                "reconstruction constraint",
                tape.value(self.constraint).item(),
            )?,
            kl_bound_f: finite_or_fault("KL bound", tape.value(self.kl_bound).item())?,
            flat_penalty: finite_or_fault("flatness penalty", self.penalty_value)?,
            c_squared: finite_or_fault("scale factor", self.c_squared)?,
        };
        Ok(LossVars { total, breakdown })
    }
}

/// Records `C + β·F + η·R` for the batch `x`; see [`fmvae_terms`].
pub fn fmvae_loss(
    tape: &mut Tape,
    model: &FmvaeModel,
    bound: &BoundModel,
    x: &Tensor,
    beta: f64,
    settings: &LossSettings,
    rng: &mut impl Rng,
) -> Result<LossVars> {
    if !(beta > 0.0) {
        return Err(Error::contract(format!("beta must be positive, got {beta}")));
    }
    fmvae_terms(tape, model, bound, x, settings, rng)?.combine(tape, beta, settings.eta)
}
