//! Bayesian VAE training. Variant 1 optimizes one encoder and samples the
//! decoder; variant 2 samples both with two independent SGHMC chains. Either
//! way the result is a [`PosteriorEnsemble`] of retained snapshots.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{minibatches, sha256_hex, ImageDataset};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::{derive_seed, seeded, standard_normals, SeededRng};
use crate::sghmc::{
    potential_grad, potential_value, retained_count, retention_schedule, GammaHyperPrior,
    Retention, SamplerDiagnostics, SghmcConfig, SghmcState,
};
use crate::store;
use crate::tensor::Tensor;
use crate::vae::{
    decode_batch, elbo_with_noise, encode_batch, iw_log_lik_with_noise, EncoderOutput, GradRequest,
    Likelihood, VaeArch, VaeParams,
};

const ENSEMBLE_MAGIC: &[u8; 8] = b"BVAEENS\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Variant {
    /// Optimized shared encoder, sampled decoders.
    SharedEncoder,
    /// Sampled encoder/decoder pairs.
    SampledEncoder,
}

impl TryFrom<u8> for Variant {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Variant::SharedEncoder),
            2 => Ok(Variant::SampledEncoder),
            other => Err(Error::Config(format!(
                "unknown BVAE variant {other}, expected 1 or 2"
            ))),
        }
    }
}

impl From<Variant> for u8 {
    fn from(v: Variant) -> u8 {
        match v {
            Variant::SharedEncoder => 1,
            Variant::SampledEncoder => 2,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub arch: VaeArch,
    pub sampler: SghmcConfig,
    /// Step size for the sampled encoder (variant 2). Defaults to the decoder
    /// step size; a smaller value keeps the retained encoders close, so the
    /// members share similar proposals.
    pub encoder_step_size: Option<f64>,
    pub epochs: u32,
    pub batch_size: usize,
    /// Reparameterized samples per example in the training ELBO.
    pub n_mc: usize,
    /// Adam rate for the optimized encoder (variant 1) and for point VAEs.
    pub encoder_lr: f64,
    pub prior_alpha: f64,
    pub prior_beta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: VaeArch::desk_default(),
            sampler: SghmcConfig::default(),
            encoder_step_size: None,
            epochs: 30,
            batch_size: 128,
            n_mc: 1,
            encoder_lr: 1e-3,
            prior_alpha: 1.0,
            prior_beta: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.sampler.validate()?;
        let s = &self.sampler;
        if self.epochs == 0 || self.batch_size == 0 || self.n_mc == 0 {
            return Err(Error::Config(
                "epochs, batch_size and n_mc must be >= 1".into(),
            ));
        }
        if s.burn_in_epochs == 0 {
            return Err(Error::Config(
                "burn_in_epochs must be >= 1 so that M = (T-B)/D + 1".into(),
            ));
        }
        let m = retained_count(self.epochs, s.burn_in_epochs, s.thinning_epochs);
        if m < 2 {
            return Err(Error::Config(format!(
                "T={}, B={}, D={} retains {m} sample(s); at least 2 are required",
                self.epochs, s.burn_in_epochs, s.thinning_epochs
            )));
        }
        if let Some(eta) = self.encoder_step_size {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::Config(format!(
                    "encoder_step_size must be > 0, got {eta}"
                )));
            }
        }
        if !(self.encoder_lr > 0.0) || !(self.prior_alpha > 0.0) || !(self.prior_beta > 0.0) {
            return Err(Error::Config(
                "encoder_lr, prior_alpha, prior_beta must be > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn retained(&self) -> usize {
        retained_count(
            self.epochs,
            self.sampler.burn_in_epochs,
            self.sampler.thinning_epochs,
        )
    }
}

/// Provenance carried inside every ensemble file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingManifest {
    pub config: TrainConfig,
    pub dataset_name: String,
    pub dataset_digest: String,
    pub n_train: usize,
    /// Id of the CLI run that produced the file, when there was one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorEnsemble {
    variant: Variant,
    arch: VaeArch,
    thetas: Vec<Vec<f64>>,
    phis: Vec<Vec<f64>>,
    manifest: TrainingManifest,
}

impl PosteriorEnsemble {
    pub fn new(
        variant: Variant,
        arch: VaeArch,
        thetas: Vec<Vec<f64>>,
        phis: Vec<Vec<f64>>,
        manifest: TrainingManifest,
    ) -> Result<Self> {
        arch.validate()?;
        if thetas.len() < 2 {
            return Err(Error::Config(format!(
                "ensemble needs at least 2 members, got {}",
                thetas.len()
            )));
        }
        let want_phis = match variant {
            Variant::SharedEncoder => 1,
            Variant::SampledEncoder => thetas.len(),
        };
        if phis.len() != want_phis {
            return Err(Error::Contract(format!(
                "variant {variant} ensemble with {} decoders needs {want_phis} encoder(s), got {}",
                thetas.len(),
                phis.len()
            )));
        }
        let (nt, np) = (arch.decoder()?.n_params(), arch.encoder()?.n_params());
        for t in &thetas {
            if t.len() != nt {
                return Err(Error::Length {
                    expected: nt,
                    found: t.len(),
                });
            }
        }
        for p in &phis {
            if p.len() != np {
                return Err(Error::Length {
                    expected: np,
                    found: p.len(),
                });
            }
        }
        Ok(PosteriorEnsemble {
            variant,
            arch,
            thetas,
            phis,
            manifest,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn arch(&self) -> &VaeArch {
        &self.arch
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    pub fn thetas(&self) -> &[Vec<f64>] {
        &self.thetas
    }

    pub fn phis(&self) -> &[Vec<f64>] {
        &self.phis
    }

    pub fn manifest(&self) -> &TrainingManifest {
        &self.manifest
    }

    /// Encoder used as the proposal for member `m`.
    pub fn phi_for(&self, m: usize) -> &[f64] {
        match self.variant {
            Variant::SharedEncoder => &self.phis[0],
            Variant::SampledEncoder => &self.phis[m],
        }
    }

    /// Member `m` as a standalone VAE.
    pub fn member(&self, m: usize) -> VaeParams {
        VaeParams {
            arch: self.arch.clone(),
            theta: self.thetas[m].clone(),
            phi: self.phi_for(m).to_vec(),
        }
    }

    /// sha256 over every parameter, bit-exact.
    pub fn with_run_id(mut self, id: impl Into<String>) -> Self {
        self.manifest.run_id = Some(id.into());
        self
    }

    pub fn digest(&self) -> String {
        sha256_hex(&payload_bytes(&self.thetas, &self.phis))
    }

    /// Warns when `ds` is not the dataset the ensemble was trained on.
    pub fn check_training_data(&self, ds: &ImageDataset) -> Option<String> {
        let d = ds.digest();
        (d != self.manifest.dataset_digest).then(|| {
            format!(
                "dataset digest {d} differs from the training digest {}",
                self.manifest.dataset_digest
            )
        })
    }
}

fn payload_bytes(thetas: &[Vec<f64>], phis: &[Vec<f64>]) -> Vec<u8> {
    thetas
        .iter()
        .chain(phis)
        .flat_map(|v| v.iter().flat_map(|x| x.to_le_bytes()))
        .collect()
}

/// Per-epoch training trace.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingReport {
    /// Mean per-example negative ELBO over each epoch's minibatches.
    pub neg_elbo: Vec<f64>,
    pub theta: Vec<SamplerDiagnostics>,
    /// Empty for variant 1.
    pub phi: Vec<SamplerDiagnostics>,
}

pub fn diagnostics_csv(rows: &[SamplerDiagnostics]) -> String {
    let mut s = String::from(SamplerDiagnostics::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

enum EncoderUpdate {
    Optimized { phi: Vec<f64>, adam: Adam },
    Sampled(SghmcState),
}

impl EncoderUpdate {
    fn phi(&self) -> &[f64] {
        match self {
            EncoderUpdate::Optimized { phi, .. } => phi,
            EncoderUpdate::Sampled(s) => &s.position,
        }
    }
}

struct Streams {
    elbo: SeededRng,
    theta_noise: SeededRng,
    phi_noise: SeededRng,
    prior: SeededRng,
    order: u64,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Streams {
            elbo: seeded(derive_seed(seed, 2)),
            theta_noise: seeded(derive_seed(seed, 3)),
            phi_noise: seeded(derive_seed(seed, 4)),
            prior: seeded(derive_seed(seed, 5)),
            order: derive_seed(seed, 6),
        }
    }
}

fn check_training_set(ds: &ImageDataset, arch: &VaeArch) -> Result<()> {
    if ds.d_x() != arch.d_x {
        return Err(Error::Shape {
            op: "training data",
            left: vec![arch.d_x],
            right: vec![ds.d_x()],
        });
    }
    if arch.likelihood == Likelihood::Bernoulli
        && ds.pixels().iter().any(|v| !(0.0..=1.0).contains(v))
    {
        return Err(Error::Domain(
            "Bernoulli decoder needs pixels in [0,1]".into(),
        ));
    }
    Ok(())
}

fn epoch_tag(epoch: u32) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(what) => Error::NonFinite(format!("epoch {epoch}: {what}")),
        other => other,
    }
}

/// Per-epoch progress passed to training callbacks.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: u32,
    pub neg_elbo: f64,
    pub retained: bool,
    pub members: usize,
}

pub fn train_variant1(
    ds: &ImageDataset,
    cfg: &TrainConfig,
) -> Result<(PosteriorEnsemble, TrainingReport)> {
    train(ds, cfg, Variant::SharedEncoder, &mut |_| {})
}

pub fn train_variant2(
    ds: &ImageDataset,
    cfg: &TrainConfig,
) -> Result<(PosteriorEnsemble, TrainingReport)> {
    train(ds, cfg, Variant::SampledEncoder, &mut |_| {})
}

pub fn train(
    ds: &ImageDataset,
    cfg: &TrainConfig,
    variant: Variant,
    progress: &mut dyn FnMut(&EpochSummary),
) -> Result<(PosteriorEnsemble, TrainingReport)> {
    cfg.validate()?;
    check_training_set(ds, &cfg.arch)?;
    let arch = &cfg.arch;
    let n = ds.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size.min(n)) as u64;
    let mut scfg = cfg.sampler.clone();
    scfg.adapt_steps = Some(
        scfg.adapt_steps
            .unwrap_or(steps_per_epoch * u64::from(scfg.burn_in_epochs)),
    );
    let mut phi_cfg = scfg.clone();
    if let Some(eta) = cfg.encoder_step_size {
        phi_cfg.step_size = eta;
    }

    let init = VaeParams::init(arch.clone(), derive_seed(cfg.seed, 1))?;
    let mut rngs = Streams::new(cfg.seed);
    let mut theta_prior =
        GammaHyperPrior::from_prior(cfg.prior_alpha, cfg.prior_beta, &mut rngs.prior)?;
    // the optimized encoder keeps this draw for the whole run as weight decay
    let mut phi_prior =
        GammaHyperPrior::from_prior(cfg.prior_alpha, cfg.prior_beta, &mut rngs.prior)?;
    let mut theta = SghmcState::new(init.theta);
    let mut encoder = match variant {
        Variant::SharedEncoder => EncoderUpdate::Optimized {
            adam: Adam::new(init.phi.len(), cfg.encoder_lr),
            phi: init.phi,
        },
        Variant::SampledEncoder => EncoderUpdate::Sampled(SghmcState::new(init.phi)),
    };

    let mut thetas = Vec::new();
    let mut phis = Vec::new();
    let mut report = TrainingReport::default();
    for epoch in 1..=cfg.epochs {
        let tag = epoch_tag(epoch);
        let mut sum_neg_elbo = 0.0;
        let (mut u_theta, mut u_phi, mut gn_theta, mut gn_phi) = (0.0, 0.0, 0.0, 0.0);
        let mut n_batches = 0usize;
        for batch in minibatches(n, cfg.batch_size, derive_seed(rngs.order, u64::from(epoch)))? {
            let x = ds.batch(&batch);
            let eps = standard_normals(&mut rngs.elbo, cfg.n_mc * batch.len() * arch.d_z);
            let eval = elbo_with_noise(
                arch,
                &theta.position,
                encoder.phi(),
                &x,
                &eps,
                cfg.n_mc,
                GradRequest::BOTH,
            )
            .map_err(&tag)?;
            let grad_theta = eval.grad_theta.expect("requested");
            let grad_phi = eval.grad_phi.expect("requested");
            sum_neg_elbo -= eval.total;
            n_batches += 1;

            let g = potential_grad(
                &theta.position,
                &batch,
                n,
                |_, _| Ok(grad_theta.clone()),
                &theta_prior,
            )
            .map_err(&tag)?;
            u_theta += potential_value(eval.total, batch.len(), n, &theta.position, &theta_prior);
            gn_theta += norm(&g);
            let noise = standard_normals(&mut rngs.theta_noise, g.len());
            theta.step(&g, &scfg, &noise).map_err(&tag)?;

            match &mut encoder {
                EncoderUpdate::Optimized { phi, adam } => {
                    let g = potential_grad(phi, &batch, n, |_, _| Ok(grad_phi.clone()), &phi_prior)
                        .map_err(&tag)?;
                    u_phi += potential_value(eval.total, batch.len(), n, phi, &phi_prior);
                    gn_phi += norm(&g);
                    adam.step(phi, &g);
                }
                EncoderUpdate::Sampled(state) => {
                    let g = potential_grad(
                        &state.position,
                        &batch,
                        n,
                        |_, _| Ok(grad_phi.clone()),
                        &phi_prior,
                    )
                    .map_err(&tag)?;
                    u_phi +=
                        potential_value(eval.total, batch.len(), n, &state.position, &phi_prior);
                    gn_phi += norm(&g);
                    let noise = standard_normals(&mut rngs.phi_noise, g.len());
                    state.step(&g, &phi_cfg, &noise).map_err(&tag)?;
                }
            }
        }
        let nb = n_batches as f64;
        let keep = retention_schedule(epoch, &scfg) == Retention::Retain;
        report.theta.push(SamplerDiagnostics {
            epoch,
            potential: u_theta / nb,
            grad_norm: gn_theta / nb,
            lambda: theta_prior.lambda,
            retained: keep,
        });
        theta_prior.resample_precision(&theta.position, &mut rngs.prior)?;
        if let EncoderUpdate::Sampled(state) = &encoder {
            report.phi.push(SamplerDiagnostics {
                epoch,
                potential: u_phi / nb,
                grad_norm: gn_phi / nb,
                lambda: phi_prior.lambda,
                retained: keep,
            });
            phi_prior.resample_precision(&state.position, &mut rngs.prior)?;
        }
        if keep {
            thetas.push(theta.position.clone());
            if variant == Variant::SampledEncoder {
                phis.push(encoder.phi().to_vec());
            }
        }
        let neg_elbo = sum_neg_elbo / n as f64;
        report.neg_elbo.push(neg_elbo);
        progress(&EpochSummary {
            epoch,
            neg_elbo,
            retained: keep,
            members: thetas.len(),
        });
    }
    if variant == Variant::SharedEncoder {
        phis.push(encoder.phi().to_vec());
    }
    let manifest = TrainingManifest {
        config: cfg.clone(),
        dataset_name: ds.source_name().to_string(),
        dataset_digest: ds.digest(),
        n_train: n,
        run_id: None,
    };
    let ens = PosteriorEnsemble::new(variant, arch.clone(), thetas, phis, manifest)?;
    Ok((ens, report))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Maximum-ELBO VAE fit with Adam on both networks (no priors, no sampling).
/// Returns the parameters and the per-epoch mean negative ELBO.
pub fn train_point_vae(ds: &ImageDataset, cfg: &TrainConfig) -> Result<(VaeParams, Vec<f64>)> {
    cfg.arch.validate()?;
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.n_mc == 0 {
        return Err(Error::Config(
            "epochs, batch_size and n_mc must be >= 1".into(),
        ));
    }
    check_training_set(ds, &cfg.arch)?;
    let arch = &cfg.arch;
    let mut params = VaeParams::init(arch.clone(), derive_seed(cfg.seed, 1))?;
    let mut rng = seeded(derive_seed(cfg.seed, 2));
    let order = derive_seed(cfg.seed, 6);
    let mut opt_theta = Adam::new(params.theta.len(), cfg.encoder_lr);
    let mut opt_phi = Adam::new(params.phi.len(), cfg.encoder_lr);
    let mut trace = Vec::new();
    for epoch in 1..=cfg.epochs {
        let tag = epoch_tag(epoch);
        let mut total = 0.0;
        for batch in minibatches(
            ds.len(),
            cfg.batch_size,
            derive_seed(order, u64::from(epoch)),
        )? {
            let x = ds.batch(&batch);
            let eps = standard_normals(&mut rng, cfg.n_mc * batch.len() * arch.d_z);
            let eval = elbo_with_noise(
                arch,
                &params.theta,
                &params.phi,
                &x,
                &eps,
                cfg.n_mc,
                GradRequest::BOTH,
            )
            .map_err(&tag)?;
            total -= eval.total;
            let scale = -1.0 / batch.len() as f64;
            let gt: Vec<f64> = eval
                .grad_theta
                .expect("requested")
                .iter()
                .map(|g| g * scale)
                .collect();
            let gp: Vec<f64> = eval
                .grad_phi
                .expect("requested")
                .iter()
                .map(|g| g * scale)
                .collect();
            opt_theta.step(&mut params.theta, &gt);
            opt_phi.step(&mut params.phi, &gp);
        }
        trace.push(total / ds.len() as f64);
    }
    Ok((params, trace))
}

/// Importance-sampled log-likelihood of `x` under every member. All members
/// share the proposal noise drawn from `seed`.
pub fn ensemble_log_liks(
    ens: &PosteriorEnsemble,
    x: &[f64],
    k: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let ds = ImageDataset::new(x.to_vec(), x.len(), vec![0], 1, "input", None)?;
    let rows = score_rows(ens, &ds, k, |_| seed)?;
    Ok(rows.into_iter().next().expect("one input"))
}

/// One row of M log-likelihoods per input; input `i` uses the noise seed
/// `derive_seed(seed, i)`, so a row equals `ensemble_log_liks` at that seed.
pub fn ensemble_log_lik_matrix(
    ens: &PosteriorEnsemble,
    inputs: &ImageDataset,
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    score_rows(ens, inputs, k, |i| derive_seed(seed, i as u64))
}

fn score_rows(
    ens: &PosteriorEnsemble,
    inputs: &ImageDataset,
    k: usize,
    seed_of: impl Fn(usize) -> u64,
) -> Result<Vec<Vec<f64>>> {
    let arch = ens.arch();
    if k == 0 {
        return Err(Error::Domain("K must be at least 1".into()));
    }
    check_training_set(inputs, arch)?;
    let all: Vec<usize> = (0..inputs.len()).collect();
    let x = inputs.batch(&all);
    let shared: Option<Vec<EncoderOutput>> = match ens.variant() {
        Variant::SharedEncoder => Some(encode_batch(arch, &ens.phis()[0], &x)?),
        Variant::SampledEncoder => None,
    };
    let eps: Vec<Vec<f64>> = (0..inputs.len())
        .map(|i| standard_normals(&mut seeded(seed_of(i)), k * arch.d_z))
        .collect();
    let mut rows = vec![Vec::with_capacity(ens.len()); inputs.len()];
    for m in 0..ens.len() {
        let own;
        let posts = match &shared {
            Some(p) => p,
            None => {
                own = encode_batch(arch, &ens.phis()[m], &x)?;
                &own
            }
        };
        for (i, row) in rows.iter_mut().enumerate() {
            row.push(iw_log_lik_with_noise(
                arch,
                &ens.thetas()[m],
                &posts[i],
                inputs.image(i),
                &eps[i],
            )?);
        }
    }
    Ok(rows)
}

/// Decoder outputs (logits for Bernoulli decoders) of every member for a
/// `n × d_z` batch of latents.
pub fn decode_members(ens: &PosteriorEnsemble, z: &Tensor) -> Result<Vec<Tensor>> {
    ens.thetas()
        .iter()
        .map(|t| decode_batch(ens.arch(), t, z))
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleHeader {
    version: u8,
    variant: Variant,
    arch: VaeArch,
    members: usize,
    encoders: usize,
    theta_len: usize,
    phi_len: usize,
    payload_sha256: String,
    training: TrainingManifest,
}

pub fn encode_ensemble(ens: &PosteriorEnsemble) -> Result<Vec<u8>> {
    let header = EnsembleHeader {
        version: store::FORMAT_VERSION,
        variant: ens.variant,
        arch: ens.arch.clone(),
        members: ens.thetas.len(),
        encoders: ens.phis.len(),
        theta_len: ens.thetas[0].len(),
        phi_len: ens.phis[0].len(),
        payload_sha256: ens.digest(),
        training: ens.manifest.clone(),
    };
    let blocks: Vec<&[f64]> = ens
        .thetas
        .iter()
        .chain(&ens.phis)
        .map(|v| v.as_slice())
        .collect();
    store::encode(ENSEMBLE_MAGIC, &header, &blocks)
}

/// A decoded ensemble plus any non-fatal integrity warnings.
#[derive(Clone, Debug)]
pub struct LoadedEnsemble {
    pub ensemble: PosteriorEnsemble,
    pub warnings: Vec<String>,
}

pub fn decode_ensemble(bytes: &[u8]) -> Result<LoadedEnsemble> {
    let (h, floats): (EnsembleHeader, _) = store::decode(ENSEMBLE_MAGIC, bytes)?;
    if h.version != store::FORMAT_VERSION {
        return Err(Error::Migration {
            found: h.version,
            supported: store::FORMAT_VERSION,
        });
    }
    let mut lengths = vec![h.theta_len; h.members];
    lengths.extend(std::iter::repeat_n(h.phi_len, h.encoders));
    let mut blocks = store::split_blocks(floats, &lengths)?;
    let phis = blocks.split_off(h.members);
    let ensemble = PosteriorEnsemble::new(h.variant, h.arch, blocks, phis, h.training)?;
    let mut warnings = Vec::new();
    let digest = ensemble.digest();
    if digest != h.payload_sha256 {
        warnings.push(format!(
            "parameter digest {digest} does not match the recorded {}",
            h.payload_sha256
        ));
    }
    Ok(LoadedEnsemble { ensemble, warnings })
}

pub fn save_ensemble(ens: &PosteriorEnsemble, path: &Path) -> Result<()> {
    store::write_atomic(path, &encode_ensemble(ens)?)
}

pub fn load_ensemble(path: &Path) -> Result<LoadedEnsemble> {
    decode_ensemble(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use rand::Rng;

    fn tiny_arch() -> VaeArch {
        VaeArch {
            d_x: 8,
            hidden: vec![6],
            d_z: 2,
            activation: Activation::Tanh,
            likelihood: Likelihood::Bernoulli,
        }
    }

    fn binary_data(n: usize, seed: u64) -> ImageDataset {
        let mut rng = seeded(seed);
        let mut px = Vec::new();
        for i in 0..n {
            // two prototypes with flipped bits
            let proto: [f64; 8] = if i % 2 == 0 {
                [1., 1., 1., 1., 0., 0., 0., 0.]
            } else {
                [0., 0., 0., 0., 1., 1., 1., 1.]
            };
            px.extend(proto.iter().map(|&p| {
                if rng.random::<f64>() < 0.1 {
                    1.0 - p
                } else {
                    p
                }
            }));
        }
        ImageDataset::new(
            px,
            8,
            (0..n as u32).map(|i| i % 2).collect(),
            2,
            "toy",
            Some(1),
        )
        .unwrap()
    }

    fn tiny_cfg(epochs: u32) -> TrainConfig {
        TrainConfig {
            arch: tiny_arch(),
            sampler: SghmcConfig {
                step_size: 1e-3,
                momentum_decay: 0.05,
                burn_in_epochs: 1,
                thinning_epochs: 1,
                adapt_steps: None,
            },
            epochs,
            batch_size: 16,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn variant_codes() {
        assert_eq!(
            serde_json::to_string(&Variant::SampledEncoder).unwrap(),
            "2"
        );
        assert_eq!(
            serde_json::from_str::<Variant>("1").unwrap(),
            Variant::SharedEncoder
        );
        assert!(serde_json::from_str::<Variant>("3").is_err());
    }

    #[test]
    fn config_rules() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = tiny_cfg(1);
        assert!(
            c.validate().is_err(),
            "one retained sample is not an ensemble"
        );
        c.epochs = 2;
        assert!(c.validate().is_ok());
        c.sampler.burn_in_epochs = 0;
        assert!(c.validate().is_err());
        assert_eq!(tiny_cfg(5).retained(), 5);
    }

    #[test]
    fn variant1_counts_and_determinism() {
        let ds = binary_data(64, 1);
        let (ens, report) = train_variant1(&ds, &tiny_cfg(5)).unwrap();
        assert_eq!(ens.len(), 5);
        assert_eq!(ens.phis().len(), 1);
        assert_eq!(report.theta.len(), 5);
        assert!(report.phi.is_empty());
        for i in 0..5 {
            for j in i + 1..5 {
                assert_ne!(ens.thetas()[i], ens.thetas()[j]);
            }
        }
        let (again, _) = train_variant1(&ds, &tiny_cfg(5)).unwrap();
        assert_eq!(ens.digest(), again.digest());
        assert_eq!(ens, again);
    }

    #[test]
    fn variant2_couples_snapshots() {
        let ds = binary_data(64, 2);
        let mut cfg = tiny_cfg(7);
        cfg.sampler.burn_in_epochs = 3;
        cfg.sampler.thinning_epochs = 2;
        let (ens, report) = train_variant2(&ds, &cfg).unwrap();
        assert_eq!(ens.len(), 3);
        assert_eq!(ens.phis().len(), 3);
        assert_eq!(report.phi.len(), 7);
        assert_eq!(
            report
                .theta
                .iter()
                .filter(|d| d.retained)
                .map(|d| d.epoch)
                .collect::<Vec<_>>(),
            vec![3, 5, 7]
        );
        assert_ne!(ens.phis()[0], ens.phis()[1]);
        assert_ne!(ens.phis()[1], ens.phis()[2]);
        assert_eq!(ens.variant(), Variant::SampledEncoder);
        assert!(ens.check_training_data(&ds).is_none());
        assert!(ens.check_training_data(&binary_data(64, 3)).is_some());
    }

    #[test]
    fn ensemble_invariants_enforced() {
        let arch = tiny_arch();
        let p = VaeParams::init(arch.clone(), 0).unwrap();
        let m = TrainingManifest {
            config: tiny_cfg(2),
            dataset_name: "x".into(),
            dataset_digest: "0".into(),
            n_train: 0,
            run_id: None,
        };
        let two = vec![p.theta.clone(), p.theta.clone()];
        assert!(PosteriorEnsemble::new(
            Variant::SharedEncoder,
            arch.clone(),
            vec![p.theta.clone()],
            vec![p.phi.clone()],
            m.clone()
        )
        .is_err());
        assert!(PosteriorEnsemble::new(
            Variant::SharedEncoder,
            arch.clone(),
            two.clone(),
            vec![p.phi.clone(); 2],
            m.clone()
        )
        .is_err());
        assert!(PosteriorEnsemble::new(
            Variant::SampledEncoder,
            arch.clone(),
            two.clone(),
            vec![p.phi.clone()],
            m.clone()
        )
        .is_err());
        assert!(PosteriorEnsemble::new(
            Variant::SampledEncoder,
            arch,
            two,
            vec![p.phi.clone(); 2],
            m
        )
        .is_ok());
    }

    #[test]
    fn scoring_contracts() {
        let ds = binary_data(32, 4);
        let (ens, _) = train_variant1(&ds, &tiny_cfg(3)).unwrap();
        let x = ds.image(0);
        let ll = ensemble_log_liks(&ens, x, 16, 9).unwrap();
        assert_eq!(ll.len(), 3);
        assert!(ll.iter().all(|v| v.is_finite() && *v < 0.0));

        let same = PosteriorEnsemble::new(
            Variant::SharedEncoder,
            ens.arch().clone(),
            vec![ens.thetas()[0].clone(); 3],
            ens.phis().to_vec(),
            ens.manifest().clone(),
        )
        .unwrap();
        let vals = ensemble_log_liks(&same, x, 16, 9).unwrap();
        assert!(vals.iter().all(|v| *v == vals[0]));

        let mut thetas = same.thetas().to_vec();
        thetas[1][0] += 0.5;
        let perturbed = PosteriorEnsemble::new(
            Variant::SharedEncoder,
            ens.arch().clone(),
            thetas,
            ens.phis().to_vec(),
            ens.manifest().clone(),
        )
        .unwrap();
        let p = ensemble_log_liks(&perturbed, x, 16, 9).unwrap();
        assert_eq!(p[0], vals[0]);
        assert_ne!(p[1], vals[1]);

        let rows = ensemble_log_lik_matrix(&ens, &ds.select(&[0, 1, 2]).unwrap(), 16, 5).unwrap();
        assert_eq!(
            rows[2],
            ensemble_log_liks(&ens, ds.image(2), 16, derive_seed(5, 2)).unwrap()
        );
    }

    #[test]
    fn file_roundtrip_and_failures() {
        let ds = binary_data(32, 5);
        let (ens, _) = train_variant2(&ds, &tiny_cfg(2)).unwrap();
        let bytes = encode_ensemble(&ens).unwrap();
        let back = decode_ensemble(&bytes).unwrap();
        assert!(back.warnings.is_empty());
        assert_eq!(back.ensemble, ens);
        assert_eq!(back.ensemble.digest(), ens.digest());

        assert!(matches!(
            decode_ensemble(&bytes[..bytes.len() - 8]),
            Err(Error::Length { .. })
        ));
        let mut v = bytes.clone();
        v[8] = 7;
        assert!(matches!(
            decode_ensemble(&v),
            Err(Error::Migration { found: 7, .. })
        ));

        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x01;
        let loaded = decode_ensemble(&flipped).unwrap();
        assert_eq!(loaded.warnings.len(), 1);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bvae");
        save_ensemble(&ens, &path).unwrap();
        assert_eq!(load_ensemble(&path).unwrap().ensemble, ens);
    }

    #[test]
    fn point_vae_improves() {
        let ds = binary_data(64, 6);
        let mut cfg = tiny_cfg(30);
        cfg.encoder_lr = 1e-2;
        let (_, trace) = train_point_vae(&ds, &cfg).unwrap();
        assert!(trace.last().unwrap() < &trace[0], "{trace:?}");
    }
}
