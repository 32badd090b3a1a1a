//! MLP variational autoencoder: diagonal-Gaussian encoder, Bernoulli decoder,
//! the reparameterized ELBO and the importance-sampled log marginal likelihood.
//!
//! All densities are handled in log space. A unit-variance Gaussian decoder
//! is also available; it exists so the estimators can be checked against
//! linear-Gaussian models whose marginals are known in closed form.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Network};
use crate::rng::{seeded, standard_normals};
use crate::tensor::{log_sum_exp, softplus, Tape, Tensor, Var};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    Bernoulli,
    /// N(x; decoder output, I). Test models only.
    UnitGaussian,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeArch {
    pub d_x: usize,
    /// Encoder hidden widths, input side first; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub d_z: usize,
    pub activation: Activation,
    pub likelihood: Likelihood,
}

impl VaeArch {
    /// 784 → 256 → 32 with tanh units and a Bernoulli decoder.
    pub fn desk_default() -> Self {
        VaeArch {
            d_x: 784,
            hidden: vec![256],
            d_z: 32,
            activation: Activation::Tanh,
            likelihood: Likelihood::Bernoulli,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_x == 0 || self.d_z == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(format!("invalid VAE architecture {self:?}")));
        }
        Ok(())
    }

    pub fn encoder(&self) -> Result<Network> {
        let mut sizes = vec![self.d_x];
        sizes.extend(&self.hidden);
        Network::new("encoder", &sizes, &[self.d_z, self.d_z], self.activation)
    }

    pub fn decoder(&self) -> Result<Network> {
        let mut sizes = vec![self.d_z];
        sizes.extend(self.hidden.iter().rev());
        Network::new("decoder", &sizes, &[self.d_x], self.activation)
    }
}

/// Decoder parameters `theta` and encoder parameters `phi`, flat.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeParams {
    pub arch: VaeArch,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
}

impl VaeParams {
    pub fn new(arch: VaeArch, theta: Vec<f64>, phi: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let (nt, np) = (arch.decoder()?.n_params(), arch.encoder()?.n_params());
        if theta.len() != nt || phi.len() != np {
            return Err(Error::Shape {
                op: "vae params",
                left: vec![nt, np],
                right: vec![theta.len(), phi.len()],
            });
        }
        Ok(VaeParams { arch, theta, phi })
    }

    pub fn init(arch: VaeArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seeded(seed);
        let theta = arch.decoder()?.init(&mut rng);
        let phi = arch.encoder()?.init(&mut rng);
        Ok(VaeParams { arch, theta, phi })
    }

    pub fn zeros(arch: VaeArch) -> Result<Self> {
        arch.validate()?;
        let theta = vec![0.0; arch.decoder()?.n_params()];
        let phi = vec![0.0; arch.encoder()?.n_params()];
        Ok(VaeParams { arch, theta, phi })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

fn check_input(arch: &VaeArch, x: &[f64]) -> Result<()> {
    if x.len() != arch.d_x {
        return Err(Error::Shape {
            op: "vae input",
            left: vec![arch.d_x],
            right: vec![x.len()],
        });
    }
    if arch.likelihood == Likelihood::Bernoulli {
        if let Some(bad) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("input value {bad} outside [0,1]")));
        }
    }
    Ok(())
}

/// Encodes each row of an `n × d_x` batch.
pub fn encode_batch(arch: &VaeArch, phi: &[f64], x: &Tensor) -> Result<Vec<EncoderOutput>> {
    let enc = arch.encoder()?;
    let mut tape = Tape::new();
    let bound = enc.bind(&mut tape, phi, false)?;
    let xv = tape.constant(x.clone());
    let heads = enc.forward(&mut tape, &bound, xv)?;
    let d = arch.d_z;
    let means = tape.value(heads[0]).data();
    let log_vars = tape.value(heads[1]).data();
    Ok(means
        .chunks_exact(d)
        .zip(log_vars.chunks_exact(d))
        .map(|(m, lv)| EncoderOutput {
            mean: m.to_vec(),
            log_var: lv.to_vec(),
        })
        .collect())
}

pub fn encode(params: &VaeParams, x: &[f64]) -> Result<EncoderOutput> {
    check_input(&params.arch, x)?;
    let xt = Tensor::matrix(1, x.len(), x.to_vec())?;
    Ok(encode_batch(&params.arch, &params.phi, &xt)?.remove(0))
}

/// z = mean + exp(log_var / 2) ⊙ eps.
pub fn reparameterize(out: &EncoderOutput, eps: &[f64]) -> Vec<f64> {
    out.mean
        .iter()
        .zip(&out.log_var)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect()
}

/// Decoder outputs (logits for Bernoulli) for each row of a `n × d_z` batch.
pub fn decode_batch(arch: &VaeArch, theta: &[f64], z: &Tensor) -> Result<Tensor> {
    let dec = arch.decoder()?;
    let mut tape = Tape::new();
    let bound = dec.bind(&mut tape, theta, false)?;
    let zv = tape.constant(z.clone());
    let out = dec.forward(&mut tape, &bound, zv)?;
    Ok(tape.value(out[0]).clone())
}

pub fn decode(params: &VaeParams, z: &[f64]) -> Result<Vec<f64>> {
    let zt = Tensor::matrix(1, z.len(), z.to_vec())?;
    Ok(decode_batch(&params.arch, &params.theta, &zt)?.into_data())
}

/// Σ_i x_i log σ(l_i) + (1 − x_i) log(1 − σ(l_i)), in the stable form x·l − softplus(l).
pub fn bernoulli_log_lik(logits: &[f64], x: &[f64]) -> f64 {
    logits
        .iter()
        .zip(x)
        .map(|(&l, &x)| x * l - softplus(l))
        .sum()
}

pub fn unit_gaussian_log_lik(mean: &[f64], x: &[f64]) -> f64 {
    mean.iter()
        .zip(x)
        .map(|(m, x)| -0.5 * (x - m) * (x - m) - 0.5 * LN_2PI)
        .sum()
}

fn decoder_log_lik(arch: &VaeArch, out: &[f64], x: &[f64]) -> f64 {
    match arch.likelihood {
        Likelihood::Bernoulli => bernoulli_log_lik(out, x),
        Likelihood::UnitGaussian => unit_gaussian_log_lik(out, x),
    }
}

/// KL[N(mean, diag exp(log_var)) ‖ N(0, I)].
pub fn kl_diag_gaussian(out: &EncoderOutput) -> f64 {
    0.5 * out
        .mean
        .iter()
        .zip(&out.log_var)
        .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
        .sum::<f64>()
}

/// Which parameter blocks an ELBO evaluation should differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradRequest {
    pub theta: bool,
    pub phi: bool,
}

impl GradRequest {
    pub const NONE: GradRequest = GradRequest {
        theta: false,
        phi: false,
    };
    pub const BOTH: GradRequest = GradRequest {
        theta: true,
        phi: true,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElboEval {
    /// Sum over the batch of the per-example ELBO.
    pub total: f64,
    pub grad_theta: Option<Vec<f64>>,
    pub grad_phi: Option<Vec<f64>>,
}

/// Batch ELBO with externally supplied noise `eps` of length `n_mc × n × d_z`
/// (sample-major). Holding `eps` fixed gives common random numbers.
pub fn elbo_with_noise(
    arch: &VaeArch,
    theta: &[f64],
    phi: &[f64],
    x: &Tensor,
    eps: &[f64],
    n_mc: usize,
    want: GradRequest,
) -> Result<ElboEval> {
    let n = x.shape()[0];
    let d_z = arch.d_z;
    if n_mc == 0 {
        return Err(Error::Domain("n_mc must be at least 1".into()));
    }
    if eps.len() != n_mc * n * d_z {
        return Err(Error::Shape {
            op: "elbo noise",
            left: vec![n_mc, n, d_z],
            right: vec![eps.len()],
        });
    }
    let (enc, dec) = (arch.encoder()?, arch.decoder()?);
    let mut tape = Tape::new();
    let enc_p = enc.bind(&mut tape, phi, want.phi)?;
    let dec_p = dec.bind(&mut tape, theta, want.theta)?;
    let xv = tape.constant(x.clone());
    let heads = enc.forward(&mut tape, &enc_p, xv)?;
    let (mean, log_var) = (heads[0], heads[1]);

    let half = tape.scale(log_var, 0.5)?;
    let std = tape.exp(half)?;
    let mut recon: Option<Var> = None;
    for s in 0..n_mc {
        let block = eps[s * n * d_z..(s + 1) * n * d_z].to_vec();
        let e = tape.constant(Tensor::matrix(n, d_z, block)?);
        let noise = tape.mul(std, e)?;
        let z = tape.add(mean, noise)?;
        let out = dec.forward(&mut tape, &dec_p, z)?[0];
        let rows = reconstruction_rows(&mut tape, arch, out, x)?;
        let term = tape.sum(rows, None)?;
        recon = Some(match recon {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let recon = tape.scale(recon.expect("n_mc >= 1"), 1.0 / n_mc as f64)?;

    let var = tape.exp(log_var)?;
    let msq = tape.square(mean)?;
    let kl = tape.add(var, msq)?;
    let kl = tape.sub(kl, log_var)?;
    let kl = tape.sum(kl, None)?;
    let offset = tape.constant(Tensor::scalar(-((n * d_z) as f64)));
    let kl = tape.add(kl, offset)?;
    let kl = tape.scale(kl, 0.5)?;
    let total = tape.sub(recon, kl)?;

    let value = tape.value(total).item()?;
    if want.theta || want.phi {
        tape.backward(total)?;
    }
    Ok(ElboEval {
        total: value,
        grad_theta: want.theta.then(|| dec_p.gradient(&tape)),
        grad_phi: want.phi.then(|| enc_p.gradient(&tape)),
    })
}

fn reconstruction_rows(tape: &mut Tape, arch: &VaeArch, out: Var, x: &Tensor) -> Result<Var> {
    match arch.likelihood {
        Likelihood::Bernoulli => tape.bernoulli_log_lik_rows(out, x),
        Likelihood::UnitGaussian => {
            let xc = tape.constant(x.clone());
            let diff = tape.sub(out, xc)?;
            let sq = tape.square(diff)?;
            let rows = tape.sum(sq, Some(1))?;
            let rows = tape.scale(rows, -0.5)?;
            let c = tape.constant(Tensor::scalar(-0.5 * LN_2PI * arch.d_x as f64));
            tape.add(rows, c)
        }
    }
}

/// Monte Carlo ELBO of one input with `n_mc` reparameterized samples.
pub fn elbo(params: &VaeParams, x: &[f64], n_mc: usize, seed: u64) -> Result<f64> {
    check_input(&params.arch, x)?;
    let eps = standard_normals(&mut seeded(seed), n_mc * params.arch.d_z);
    let xt = Tensor::matrix(1, x.len(), x.to_vec())?;
    let eval = elbo_with_noise(
        &params.arch,
        &params.theta,
        &params.phi,
        &xt,
        &eps,
        n_mc,
        GradRequest::NONE,
    )?;
    Ok(eval.total)
}

/// log p̂(x) = logsumexp_k[log p(x|z_k) + log p(z_k) − log q(z_k|x)] − log K with
/// z_k = mean + σ ⊙ eps_k, `eps` holding K rows of length d_z.
pub fn iw_log_lik_with_noise(
    arch: &VaeArch,
    theta: &[f64],
    posterior: &EncoderOutput,
    x: &[f64],
    eps: &[f64],
) -> Result<f64> {
    let d_z = arch.d_z;
    if eps.is_empty() || !eps.len().is_multiple_of(d_z) {
        return Err(Error::Shape {
            op: "iw noise",
            left: vec![d_z],
            right: vec![eps.len()],
        });
    }
    let k = eps.len() / d_z;
    let mut z = Vec::with_capacity(eps.len());
    let mut log_w = Vec::with_capacity(k);
    let sum_lv: f64 = posterior.log_var.iter().sum();
    for e in eps.chunks_exact(d_z) {
        let zk = reparameterize(posterior, e);
        let log_q =
            -0.5 * e.iter().map(|v| v * v).sum::<f64>() - 0.5 * sum_lv - 0.5 * LN_2PI * d_z as f64;
        let log_p = -0.5 * zk.iter().map(|v| v * v).sum::<f64>() - 0.5 * LN_2PI * d_z as f64;
        log_w.push(log_p - log_q);
        z.extend(zk);
    }
    let out = decode_batch(arch, theta, &Tensor::matrix(k, d_z, z)?)?;
    for (w, row) in log_w.iter_mut().zip(out.data().chunks_exact(arch.d_x)) {
        *w += decoder_log_lik(arch, row, x);
    }
    let value = log_sum_exp(&log_w) - (k as f64).ln();
    if !value.is_finite() {
        return Err(Error::NonFinite("importance-sampled log-likelihood".into()));
    }
    Ok(value)
}

/// Importance-sampled log marginal likelihood with K proposals from q(z|x).
pub fn iw_log_lik(params: &VaeParams, x: &[f64], k: usize, seed: u64) -> Result<f64> {
    if k == 0 {
        return Err(Error::Domain("K must be at least 1".into()));
    }
    let posterior = encode(params, x)?;
    let eps = standard_normals(&mut seeded(seed), k * params.arch.d_z);
    iw_log_lik_with_noise(&params.arch, &params.theta, &posterior, x, &eps)
}

/// log N(x; 0, 2) for the scalar model z ~ N(0,1), x|z ~ N(z,1).
pub fn linear_gaussian_log_marginal(x: f64) -> f64 {
    -0.5 * (4.0 * PI).ln() - x * x / 4.0
}

/// That scalar model as VAE parameters: identity decoder, encoder mean `a·x`
/// and constant log-variance `log_var`. `a = ½, log_var = ln ½` is the exact posterior.
pub fn linear_gaussian_model(a: f64, log_var: f64) -> VaeParams {
    let arch = VaeArch {
        d_x: 1,
        hidden: vec![],
        d_z: 1,
        activation: Activation::Tanh,
        likelihood: Likelihood::UnitGaussian,
    };
    VaeParams::new(arch, vec![1.0, 0.0], vec![a, 0.0, 0.0, log_var]).expect("fixed layout")
}
