//! Fully connected networks, Gaussian/Bernoulli heads and log-likelihoods
//! for the four networks of the model.
//!
//! Networks exist in two forms. [`Mlp`] owns its parameters and evaluates
//! plain [`Tensor`]s without recording anything. [`Mlp::bind`] copies the
//! parameters onto a [`Tape`] and returns a [`BoundMlp`] whose forward pass
//! is differentiable; [`Mlp::accumulate_grads`] routes the resulting
//! gradients back into the owned parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{closest_slope, error_floor, relative_error, GradCheck, Gradients, Tape, Tensor, Var};

/// Log-variance outputs are clamped into this range before use.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `[in_dim × out_dim]`
    pub weight: Tensor,
    /// `[out_dim]`
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weight.rank() != 2 || bias.rank() != 1 || weight.shape()[1] != bias.len() {
            return Err(Error::ShapeMismatch {
                op: "dense_layer",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(DenseLayer {
            weight,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// A stack of dense layers: ReLU on every hidden layer, linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub name: String,
    pub layers: Vec<DenseLayer>,
}

/// An [`Mlp`] whose parameters live on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(Var, Var, Activation)>,
}

impl Mlp {
    /// Network with widths `dims = [in, hidden.., out]`. Weights and biases
    /// are drawn from `U(-1/√fan_in, 1/√fan_in)`.
    pub fn new(name: &str, dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "{name}: network widths {dims:?} need an input and an output"
            )));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let bias: Vec<f64> = (0..fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let activation = if i + 2 == dims.len() {
                Activation::None
            } else {
                Activation::Relu
            };
            layers.push(DenseLayer::new(
                Tensor::matrix(fan_in, fan_out, weight)?,
                Tensor::vector(bias),
                activation,
            )?);
        }
        Ok(Mlp {
            name: name.to_string(),
            layers,
        })
    }

    pub fn from_layers(name: &str, layers: Vec<DenseLayer>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::contract(format!(
                    "{name}: layer widths {} and {} do not chain",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        if layers.is_empty() {
            return Err(Error::contract(format!("{name}: no layers")));
        }
        Ok(Mlp {
            name: name.to_string(),
            layers,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Unrecorded forward pass over a `[batch × in_dim]` input.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        if input.rank() != 2 || input.cols() != self.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "mlp_forward",
                lhs: input.shape().to_vec(),
                rhs: vec![self.in_dim()],
            });
        }
        let mut h = input.clone();
        for layer in &self.layers {
            let mut out = h.matmul(&layer.weight)?;
            let width = layer.out_dim();
            let bias = layer.bias.data();
            for (k, v) in out.data_mut().iter_mut().enumerate() {
                *v += bias[k % width];
                if layer.activation == Activation::Relu && *v < 0.0 {
                    *v = 0.0;
                }
            }
            h = out;
        }
        Ok(h)
    }

    /// Places the parameters on `tape`; they require gradients iff
    /// `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let w = tape.leaf(&l.weight.clone().with_requires_grad(trainable));
                let b = tape.leaf(&l.bias.clone().with_requires_grad(trainable));
                (w, b, l.activation)
            })
            .collect();
        BoundMlp { layers }
    }

    /// Adds the gradients of a bound copy into the parameters' accumulators.
    pub fn accumulate_grads(&mut self, bound: &BoundMlp, grads: &Gradients) -> Result<()> {
        for (layer, &(w, b, _)) in self.layers.iter_mut().zip(&bound.layers) {
            if let Some(g) = grads.get(w) {
                layer.weight.accumulate_grad(g)?;
            }
            if let Some(g) = grads.get(b) {
                layer.bias.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for l in &mut self.layers {
            l.weight.zero_grad();
            l.bias.zero_grad();
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{}.{i}.weight", self.name), &l.weight));
            out.push((format!("{}.{i}.bias", self.name), &l.bias));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let name = self.name.clone();
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("{name}.{i}.weight"), &mut l.weight));
            out.push((format!("{name}.{i}.bias"), &mut l.bias));
        }
        out
    }
}

impl BoundMlp {
    /// Recorded forward pass.
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let mut h = input;
        for &(w, b, act) in &self.layers {
            let wx = tape.matmul(h, w)?;
            h = tape.add(wx, b)?;
            if act == Activation::Relu {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// Diagonal Gaussian parameters for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    /// `[batch × dim]`
    pub mean: Tensor,
    /// `[batch × dim]`, already clamped.
    pub log_variance: Tensor,
}

impl GaussianParams {
    /// Splits a `[batch × 2·dim]` network output into mean and clamped
    /// log-variance.
    pub fn from_output(out: &Tensor) -> Result<Self> {
        if out.rank() != 2 || out.cols() % 2 != 0 {
            return Err(Error::contract(format!(
                "gaussian head expects an even-width matrix, got {:?}",
                out.shape()
            )));
        }
        let (n, d) = (out.rows(), out.cols() / 2);
        let mut mean = Vec::with_capacity(n * d);
        let mut lv = Vec::with_capacity(n * d);
        for i in 0..n {
            let r = out.row(i);
            mean.extend_from_slice(&r[..d]);
            lv.extend(r[d..].iter().map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)));
        }
        Ok(GaussianParams {
            mean: Tensor::new(&[n, d], mean)?,
            log_variance: Tensor::new(&[n, d], lv)?,
        })
    }
}

/// Gaussian parameters as tape values.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub log_var: Var,
}

impl GaussianVars {
    /// Recorded counterpart of [`GaussianParams::from_output`].
    pub fn from_output(tape: &mut Tape, out: Var) -> Result<Self> {
        let width = tape.value(out).cols();
        if tape.value(out).rank() != 2 || width % 2 != 0 {
            return Err(Error::contract(format!(
                "gaussian head expects an even-width matrix, got {:?}",
                tape.value(out).shape()
            )));
        }
        let d = width / 2;
        let mean = tape.slice(out, 1, 0, d)?;
        let raw = tape.slice(out, 1, d, d)?;
        let log_var = tape.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX);
        Ok(GaussianVars { mean, log_var })
    }

    pub fn constant(tape: &mut Tape, p: &GaussianParams) -> Self {
        GaussianVars {
            mean: tape.constant(p.mean.clone()),
            log_var: tape.constant(p.log_variance.clone()),
        }
    }

    pub fn values(&self, tape: &Tape) -> GaussianParams {
        GaussianParams {
            mean: tape.value(self.mean).clone(),
            log_variance: tape.value(self.log_var).clone(),
        }
    }
}

/// A tensor of independent standard-normal draws.
pub fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("standard_normal: valid shape")
}

/// `mean + exp(½·log_var) ⊙ noise`, differentiable in mean and log-variance.
pub fn reparam_sample(tape: &mut Tape, p: &GaussianVars, noise: Tensor) -> Result<Var> {
    let mean_shape = tape.value(p.mean).shape().to_vec();
    if noise.shape() != mean_shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "reparam_sample",
            lhs: mean_shape,
            rhs: noise.shape().to_vec(),
        });
    }
    let half = tape.scale(p.log_var, 0.5);
    let std = tape.exp(half);
    let eps = tape.constant(noise);
    let spread = tape.mul(std, eps)?;
    tape.add(p.mean, spread)
}

/// Per-row diagonal Gaussian log density,
/// `Σ_d −½ln 2π − ½ log_var_d − (x_d − μ_d)² / (2·var_d)`.
pub fn gaussian_logpdf(tape: &mut Tape, x: Var, p: &GaussianVars) -> Result<Var> {
    let diff = tape.sub(x, p.mean)?;
    let sq = tape.square(diff);
    let neg_lv = tape.neg(p.log_var);
    let precision = tape.exp(neg_lv);
    let maha = tape.mul(sq, precision)?;
    let terms = tape.add(maha, p.log_var)?;
    let row = tape.sum_rows(terms);
    let scaled = tape.scale(row, -0.5);
    let d = tape.value(x).cols() as f64;
    Ok(tape.add_scalar(scaled, -HALF_LN_2PI * d))
}

/// Per-row log density under `N(0, I)`.
pub fn standard_normal_logpdf(tape: &mut Tape, x: Var) -> Var {
    let sq = tape.square(x);
    let row = tape.sum_rows(sq);
    let scaled = tape.scale(row, -0.5);
    let d = tape.value(x).cols() as f64;
    tape.add_scalar(scaled, -HALF_LN_2PI * d)
}

/// Per-row Bernoulli log likelihood `Σ x·l − softplus(l)` for binary `x`.
pub fn bernoulli_loglik(tape: &mut Tape, x: Var, logits: Var) -> Result<Var> {
    if let Some(bad) = tape
        .value(x)
        .data()
        .iter()
        .find(|&&v| v != 0.0 && v != 1.0)
    {
        return Err(Error::contract(format!(
            "bernoulli likelihood needs binary data, found {bad}"
        )));
    }
    let xl = tape.mul(x, logits)?;
    let sp = tape.softplus(logits);
    let terms = tape.sub(xl, sp)?;
    Ok(tape.sum_rows(terms))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    Gaussian,
    Bernoulli,
}

/// Reconstruction constraint `C_θ` as a per-dimension batch mean.
///
/// `decoded` is the raw decoder output: the mean for a Gaussian likelihood,
/// logits for a Bernoulli one.
pub fn reconstruction_constraint(
    tape: &mut Tape,
    x: Var,
    decoded: Var,
    likelihood: Likelihood,
) -> Result<Var> {
    match likelihood {
        Likelihood::Gaussian => {
            let diff = tape.sub(x, decoded)?;
            let sq = tape.square(diff);
            Ok(tape.mean(sq))
        }
        Likelihood::Bernoulli => {
            let ll = bernoulli_loglik(tape, x, decoded)?;
            let per_dim = 1.0 / tape.value(x).cols() as f64;
            let m = tape.mean(ll);
            Ok(tape.scale(m, -per_dim))
        }
    }
}

/// A map from latent points to observation space, evaluated without
/// recording. Implemented by trained models and by analytic test maps.
pub trait LatentDecoder {
    fn latent_dim(&self) -> usize;

    /// Decodes a `[n × latent_dim]` batch into `[n × output_dim]`.
    fn decode(&self, z: &Tensor) -> Result<Tensor>;
}

/// A [`LatentDecoder`] from a point-wise closure.
pub struct FnDecoder<F> {
    latent_dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> Vec<f64>> FnDecoder<F> {
    pub fn new(latent_dim: usize, f: F) -> Self {
        FnDecoder { latent_dim, f }
    }
}

impl<F: Fn(&[f64]) -> Vec<f64>> LatentDecoder for FnDecoder<F> {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        if z.rank() != 2 || z.cols() != self.latent_dim {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: z.shape().to_vec(),
                rhs: vec![self.latent_dim],
            });
        }
        let rows: Vec<Vec<f64>> = (0..z.rows()).map(|i| (self.f)(z.row(i))).collect();
        if rows.is_empty() {
            return Ok(Tensor::empty_rows(1));
        }
        Tensor::from_rows(&rows)
    }
}

/// Layer widths and likelihood of the four networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub data_dim: usize,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub prior_encoder_hidden: Vec<usize>,
    pub prior_decoder_hidden: Vec<usize>,
    pub likelihood: Likelihood,
}

impl Architecture {
    /// Same hidden widths for all four networks.
    pub fn uniform(
        data_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
        likelihood: Likelihood,
    ) -> Self {
        Architecture {
            data_dim,
            latent_dim,
            encoder_hidden: hidden.to_vec(),
            decoder_hidden: hidden.to_vec(),
            prior_encoder_hidden: hidden.to_vec(),
            prior_decoder_hidden: hidden.to_vec(),
            likelihood,
        }
    }
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut v = Vec::with_capacity(hidden.len() + 2);
    v.push(input);
    v.extend_from_slice(hidden);
    v.push(output);
    v
}

/// Encoder `q_φ(z|x)`, decoder `p_θ(x|z)`, prior encoder `q_Φ(ζ|z)` and prior
/// decoder `p_Θ(z|ζ)`. The auxiliary variable ζ has the latent width.
#[derive(Clone, Debug, PartialEq)]
pub struct FmvaeModel {
    pub arch: Architecture,
    pub encoder: Mlp,
    pub decoder: Mlp,
    /// Per-dimension decoder log-variance (Gaussian likelihood only). It is
    /// not an input-dependent output and does not enter `C_θ`.
    pub decoder_log_var: Tensor,
    pub prior_encoder: Mlp,
    pub prior_decoder: Mlp,
}

/// Which parameter groups of a bound model require gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    /// Encoder and decoder (φ, θ).
    pub main: bool,
    /// Prior encoder and prior decoder (Φ, Θ).
    pub prior: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        main: false,
        prior: false,
    };
    pub const ALL: Trainable = Trainable {
        main: true,
        prior: true,
    };
}

/// An [`FmvaeModel`] whose parameters live on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub encoder: BoundMlp,
    pub decoder: BoundMlp,
    pub prior_encoder: BoundMlp,
    pub prior_decoder: BoundMlp,
    pub likelihood: Likelihood,
    pub latent_dim: usize,
}

impl FmvaeModel {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        if arch.latent_dim == 0 || arch.data_dim == 0 {
            return Err(Error::contract("latent and data widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (nx, nz) = (arch.data_dim, arch.latent_dim);
        let encoder = Mlp::new("encoder", &widths(nx, &arch.encoder_hidden, 2 * nz), &mut rng)?;
        let decoder = Mlp::new("decoder", &widths(nz, &arch.decoder_hidden, nx), &mut rng)?;
        let prior_encoder = Mlp::new(
            "prior_encoder",
            &widths(nz, &arch.prior_encoder_hidden, 2 * nz),
            &mut rng,
        )?;
        let prior_decoder = Mlp::new(
            "prior_decoder",
            &widths(nz, &arch.prior_decoder_hidden, 2 * nz),
            &mut rng,
        )?;
        Ok(FmvaeModel {
            decoder_log_var: Tensor::zeros(&[nx]),
            arch,
            encoder,
            decoder,
            prior_encoder,
            prior_decoder,
        })
    }

    /// Checks that the four networks have the widths the architecture implies.
    pub fn validate(&self) -> Result<()> {
        let (nx, nz) = (self.arch.data_dim, self.arch.latent_dim);
        let checks = [
            (&self.encoder, nx, 2 * nz),
            (&self.decoder, nz, nx),
            (&self.prior_encoder, nz, 2 * nz),
            (&self.prior_decoder, nz, 2 * nz),
        ];
        for (net, i, o) in checks {
            if net.in_dim() != i || net.out_dim() != o {
                return Err(Error::contract(format!(
                    "{}: widths {}→{} do not match architecture {}→{}",
                    net.name,
                    net.in_dim(),
                    net.out_dim(),
                    i,
                    o
                )));
            }
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    pub fn encode(&self, x: &Tensor) -> Result<GaussianParams> {
        GaussianParams::from_output(&self.encoder.forward(x)?)
    }

    /// Posterior means of a batch, `[n × latent_dim]`.
    pub fn encode_mean(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.encode(x)?.mean)
    }

    /// Observation-space mean `f(z)`: the Gaussian mean, or the Bernoulli
    /// success probability.
    pub fn decode_mean(&self, z: &Tensor) -> Result<Tensor> {
        let mut out = self.decoder.forward(z)?;
        if self.arch.likelihood == Likelihood::Bernoulli {
            out.data_mut()
                .iter_mut()
                .for_each(|v| *v = crate::tensor::sigmoid(*v));
        }
        Ok(out)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: Trainable) -> BoundModel {
        BoundModel {
            encoder: self.encoder.bind(tape, trainable.main),
            decoder: self.decoder.bind(tape, trainable.main),
            prior_encoder: self.prior_encoder.bind(tape, trainable.prior),
            prior_decoder: self.prior_decoder.bind(tape, trainable.prior),
            likelihood: self.arch.likelihood,
            latent_dim: self.arch.latent_dim,
        }
    }

    pub fn accumulate_grads(&mut self, bound: &BoundModel, grads: &Gradients) -> Result<()> {
        self.encoder.accumulate_grads(&bound.encoder, grads)?;
        self.decoder.accumulate_grads(&bound.decoder, grads)?;
        self.prior_encoder
            .accumulate_grads(&bound.prior_encoder, grads)?;
        self.prior_decoder
            .accumulate_grads(&bound.prior_decoder, grads)
    }

    pub fn zero_grad(&mut self) {
        self.encoder.zero_grad();
        self.decoder.zero_grad();
        self.prior_encoder.zero_grad();
        self.prior_decoder.zero_grad();
    }

    /// Encoder and decoder parameters (φ, θ).
    pub fn main_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = self.encoder.params_mut();
        v.extend(self.decoder.params_mut());
        v
    }

    /// Prior-network parameters (Φ, Θ).
    pub fn prior_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = self.prior_encoder.params_mut();
        v.extend(self.prior_decoder.params_mut());
        v
    }

    /// Every stored array by name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.encoder.params();
        v.extend(self.decoder.params());
        v.push(("decoder.log_var".to_string(), &self.decoder_log_var));
        v.extend(self.prior_encoder.params());
        v.extend(self.prior_decoder.params());
        v
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = self.encoder.params_mut();
        v.extend(self.decoder.params_mut());
        v.push(("decoder.log_var".to_string(), &mut self.decoder_log_var));
        v.extend(self.prior_encoder.params_mut());
        v.extend(self.prior_decoder.params_mut());
        v
    }
}

fn param_mut<'a>(model: &'a mut FmvaeModel, name: &str) -> &'a mut Tensor {
    model
        .named_tensors_mut()
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .expect("parameter names come from the same model")
}

/// Compares reverse-mode gradients of `loss` with respect to every network
/// parameter against finite differences of step `h`; see
/// [`crate::tensor::check_gradients`] for the error measure. `loss` must be
/// deterministic (reseed any generator inside it).
pub fn check_model_gradients<F>(model: &FmvaeModel, loss: F, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &BoundModel) -> Result<Var>,
{
    let mut work = model.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let bound = work.bind(&mut tape, Trainable::ALL);
    let out = loss(&mut tape, &bound)?;
    let f0 = tape.value(out).item();
    let floor = error_floor(f0);
    let grads = tape.backward(out)?;
    work.accumulate_grads(&bound, &grads)?;
    let analytic: Vec<(String, Vec<f64>)> = work
        .named_tensors()
        .into_iter()
        .filter(|(name, _)| name != "decoder.log_var")
        .map(|(name, t)| (name, t.grad().map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)))
        .collect();
    work.zero_grad();

    let eval = |m: &FmvaeModel| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, Trainable::NONE);
        let out = loss(&mut tape, &bound)?;
        Ok(tape.value(out).item())
    };
    let mut relative_errors = Vec::with_capacity(analytic.len());
    for (name, g) in &analytic {
        let mut numeric = vec![0.0; g.len()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let x0 = param_mut(&mut work, name).data()[j];
            param_mut(&mut work, name).data_mut()[j] = x0 + h;
            let up = eval(&work)?;
            param_mut(&mut work, name).data_mut()[j] = x0 - h;
            let down = eval(&work)?;
            param_mut(&mut work, name).data_mut()[j] = x0;
            *n = closest_slope(g[j], f0, up, down, h);
        }
        relative_errors.push(relative_error(g, &numeric, floor));
    }
    Ok(GradCheck { relative_errors })
}

impl LatentDecoder for FmvaeModel {
    fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.decode_mean(z)
    }
}

impl BoundModel {
    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<GaussianVars> {
        let out = self.encoder.forward(tape, x)?;
        GaussianVars::from_output(tape, out)
    }

    /// Raw decoder output: Gaussian mean or Bernoulli logits.
    pub fn decode_raw(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        self.decoder.forward(tape, z)
    }

    /// Recorded `f(z)`, see [`FmvaeModel::decode_mean`].
    pub fn decode_mean(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let raw = self.decoder.forward(tape, z)?;
        Ok(match self.likelihood {
            Likelihood::Gaussian => raw,
            Likelihood::Bernoulli => tape.sigmoid(raw),
        })
    }

    pub fn prior_encode(&self, tape: &mut Tape, z: Var) -> Result<GaussianVars> {
        let out = self.prior_encoder.forward(tape, z)?;
        GaussianVars::from_output(tape, out)
    }

    pub fn prior_decode(&self, tape: &mut Tape, zeta: Var) -> Result<GaussianVars> {
        let out = self.prior_decoder.forward(tape, zeta)?;
        GaussianVars::from_output(tape, out)
    }
}
