//! Importance-weighted upper bound on the KL term under the hierarchical
//! prior, and ancestral sampling from that prior.
//!
//! For a datum `x` with posterior sample `z ~ q_φ(z|x)` and `K` auxiliary
//! draws `ζ_i ~ q_Φ(ζ|z)`, the bound is
//!
//! ```text
//! F = log q_φ(z|x) − log (1/K) Σ_i p_Θ(z|ζ_i) p(ζ_i) / q_Φ(ζ_i|z)
//! ```
//!
//! averaged over the batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nets::{
    gaussian_logpdf, reparam_sample, standard_normal, standard_normal_logpdf, BoundModel,
    FmvaeModel, GaussianVars, Trainable,
};
use crate::tensor::{Tape, Tensor, Var};

/// Tape handles produced by [`kl_bound_on_tape`].
#[derive(Clone, Copy, Debug)]
pub struct KlTerms {
    /// Batch mean of the bound, shape `[1]`.
    pub f: Var,
    /// Per-datum bound, shape `[batch]`.
    pub per_sample: Var,
    /// Reparameterised posterior sample, `[batch × N_z]`.
    pub z: Var,
    /// Posterior parameters.
    pub posterior: GaussianVars,
    /// Auxiliary samples, `[batch·K × N_z]`, `K` consecutive rows per datum.
    pub zeta: Var,
}

/// Records the bound for the batch `x` on `tape`.
pub fn kl_bound_on_tape(
    tape: &mut Tape,
    model: &BoundModel,
    x: Var,
    k: usize,
    rng: &mut impl Rng,
) -> Result<KlTerms> {
    let batch = tape.value(x).rows();
    if k == 0 {
        return Err(Error::contract("importance sample count K must be at least 1"));
    }
    if batch == 0 {
        return Err(Error::contract("KL bound of an empty batch"));
    }
    let nz = model.latent_dim;

    let posterior = model.encode(tape, x)?;
    let z = reparam_sample(tape, &posterior, standard_normal(&[batch, nz], rng))?;
    let log_q_z = gaussian_logpdf(tape, z, &posterior)?;

    let aux = model.prior_encode(tape, z)?;
    let aux_k = GaussianVars {
        mean: tape.repeat_rows(aux.mean, k),
        log_var: tape.repeat_rows(aux.log_var, k),
    };
    let zeta = reparam_sample(tape, &aux_k, standard_normal(&[batch * k, nz], rng))?;
    let log_q_zeta = gaussian_logpdf(tape, zeta, &aux_k)?;
    let log_p_zeta = standard_normal_logpdf(tape, zeta);

    let cond = model.prior_decode(tape, zeta)?;
    let z_k = tape.repeat_rows(z, k);
    let log_p_z = gaussian_logpdf(tape, z_k, &cond)?;

    let joint = tape.add(log_p_z, log_p_zeta)?;
    let log_w = tape.sub(joint, log_q_zeta)?;
    let log_w = tape.reshape(log_w, &[batch, k])?;
    let lse = tape.logsumexp_rows(log_w)?;
    let log_mean_w = tape.add_scalar(lse, -(k as f64).ln());

    let per_sample = tape.sub(log_q_z, log_mean_w)?;
    let f = tape.mean(per_sample);
    Ok(KlTerms {
        f,
        per_sample,
        z,
        posterior,
        zeta,
    })
}

/// Result of an unrecorded bound evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct VhpEstimate {
    /// Batch mean of the bound.
    pub f_value: f64,
    /// Per-datum bound.
    pub per_sample: Vec<f64>,
    /// `[batch × N_z]`
    pub z_sample: Tensor,
    /// `[batch × K × N_z]`
    pub zeta_samples: Tensor,
}

/// Evaluates the bound without recording gradients.
pub fn kl_upper_bound(
    model: &FmvaeModel,
    x: &Tensor,
    k: usize,
    rng: &mut impl Rng,
) -> Result<VhpEstimate> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Trainable::NONE);
    let xv = tape.constant(x.clone());
    let terms = kl_bound_on_tape(&mut tape, &bound, xv, k, rng)?;
    let nz = model.latent_dim();
    let batch = x.rows();
    Ok(VhpEstimate {
        f_value: tape.value(terms.f).item(),
        per_sample: tape.value(terms.per_sample).data().to_vec(),
        z_sample: tape.value(terms.z).clone(),
        zeta_samples: tape.value(terms.zeta).reshape(&[batch, k, nz])?,
    })
}

/// Ancestral draws `ζ ~ N(0, I)`, `z ~ p_Θ(z|ζ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorSample {
    /// `[n × N_z]`
    pub zeta: Tensor,
    /// `[n × N_z]`
    pub z: Tensor,
}

pub fn sample_prior(model: &FmvaeModel, n: usize, seed: u64) -> Result<PriorSample> {
    let nz = model.latent_dim();
    if n == 0 {
        return Ok(PriorSample {
            zeta: Tensor::empty_rows(nz),
            z: Tensor::empty_rows(nz),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zeta = standard_normal(&[n, nz], &mut rng);
    let out = model.prior_decoder.forward(&zeta)?;
    let cond = crate::nets::GaussianParams::from_output(&out)?;
    let eps = standard_normal(&[n, nz], &mut rng);
    let z: Vec<f64> = cond
        .mean
        .data()
        .iter()
        .zip(cond.log_variance.data())
        .zip(eps.data())
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    Ok(PriorSample {
        zeta,
        z: Tensor::new(&[n, nz], z)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Activation, Architecture, DenseLayer, Likelihood, Mlp};

    /// Single affine layer `in → out` with zero weights and the given bias.
    fn constant_net(name: &str, input: usize, bias: Vec<f64>) -> Mlp {
        let out = bias.len();
        let layer = DenseLayer::new(
            Tensor::zeros(&[input, out]),
            Tensor::vector(bias),
            Activation::None,
        )
        .unwrap();
        Mlp::from_layers(name, vec![layer]).unwrap()
    }

    fn degenerate_model(nx: usize, mu: &[f64]) -> FmvaeModel {
        let nz = mu.len();
        let arch = Architecture::uniform(nx, nz, &[4], Likelihood::Gaussian);
        let mut m = FmvaeModel::new(arch, 0).unwrap();
        let mut enc_bias = mu.to_vec();
        enc_bias.extend(std::iter::repeat_n(0.0, nz));
        m.encoder = constant_net("encoder", nx, enc_bias);
        m.prior_encoder = constant_net("prior_encoder", nz, vec![0.0; 2 * nz]);
        m.prior_decoder = constant_net("prior_decoder", nz, vec![0.0; 2 * nz]);
        m
    }

    #[test]
    fn identical_gaussians_give_zero_bound() {
        // q(z|x) = p(z) = N(0, I) and q(ζ|z) = p(ζ): every term cancels.
        let model = degenerate_model(3, &[0.0, 0.0]);
        let x = Tensor::zeros(&[16, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let est = kl_upper_bound(&model, &x, 4, &mut rng).unwrap();
        assert!(est.f_value.abs() < 1e-12, "{}", est.f_value);
        assert_eq!(est.zeta_samples.shape(), &[16, 4, 2]);
    }

    #[test]
    fn k_one_equals_plain_log_ratio() {
        let arch = Architecture::uniform(3, 2, &[5], Likelihood::Gaussian);
        let model = FmvaeModel::new(arch, 9).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -0.5, 0.0, 1.0]).unwrap();
        let est = kl_upper_bound(&model, &x, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();

        // Recompute log q(z|x) − log p(z|ζ) − log p(ζ) + log q(ζ|z) directly.
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, Trainable::NONE);
        let z = tape.constant(est.z_sample.clone());
        let zeta = tape.constant(est.zeta_samples.reshape(&[2, 2]).unwrap());
        let xv = tape.constant(x);
        let q = bound.encode(&mut tape, xv).unwrap();
        let a = gaussian_logpdf(&mut tape, z, &q).unwrap();
        let aux = bound.prior_encode(&mut tape, z).unwrap();
        let b = gaussian_logpdf(&mut tape, zeta, &aux).unwrap();
        let cond = bound.prior_decode(&mut tape, zeta).unwrap();
        let c = gaussian_logpdf(&mut tape, z, &cond).unwrap();
        let d = standard_normal_logpdf(&mut tape, zeta);
        for i in 0..2 {
            let direct = tape.value(a).data()[i] + tape.value(b).data()[i]
                - tape.value(c).data()[i]
                - tape.value(d).data()[i];
            assert!((direct - est.per_sample[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_k_is_rejected() {
        let model = degenerate_model(3, &[0.0]);
        let x = Tensor::zeros(&[2, 3]);
        assert!(kl_upper_bound(&model, &x, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn prior_sampling_is_seeded() {
        let arch = Architecture::uniform(3, 2, &[5], Likelihood::Gaussian);
        let model = FmvaeModel::new(arch, 2).unwrap();
        let a = sample_prior(&model, 10, 7).unwrap();
        let b = sample_prior(&model, 10, 7).unwrap();
        assert_eq!(a, b);
        let empty = sample_prior(&model, 0, 7).unwrap();
        assert_eq!(empty.z.rows(), 0);
    }
}
