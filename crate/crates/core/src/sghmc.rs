//! Scale-adapted stochastic-gradient Hamiltonian Monte Carlo.
//!
//! Update, element-wise with preconditioner `m⁻¹ = v̂^{-1/2}`:
//!
//! ```text
//! r ← (1 − α)·r − η·m⁻¹·∇U + N(0, 2·α·η·m⁻¹)
//! θ ← θ + r
//! ```
//!
//! `v̂` is a running second moment of the gradient, updated only during the
//! first `adapt_steps` steps and frozen afterwards so the chain targets a
//! fixed dynamics. Gaussian priors N(0, λ⁻¹) over the sampled vector carry a
//! Gamma(α, β) hyperprior; λ is Gibbs-resampled once per epoch.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Position norm beyond which a chain is declared diverged.
pub const DIVERGENCE_NORM: f64 = 1e8;
const V_HAT_FLOOR: f64 = 1e-16;
/// Slowest averaging weight of the second-moment estimate.
const EMA_FLOOR: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SghmcConfig {
    pub step_size: f64,
    pub momentum_decay: f64,
    pub burn_in_epochs: u32,
    pub thinning_epochs: u32,
    /// Steps during which `v̂` adapts. `None`: the whole burn-in (set by the trainer).
    pub adapt_steps: Option<u64>,
}

impl Default for SghmcConfig {
    fn default() -> Self {
        SghmcConfig {
            step_size: 1e-3,
            momentum_decay: 0.05,
            burn_in_epochs: 1,
            thinning_epochs: 1,
            adapt_steps: None,
        }
    }
}

impl SghmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!(
                "step_size {} must be > 0",
                self.step_size
            )));
        }
        if !(self.momentum_decay > 0.0 && self.momentum_decay <= 1.0) {
            return Err(Error::Config(format!(
                "momentum_decay {} outside (0,1]",
                self.momentum_decay
            )));
        }
        if self.thinning_epochs == 0 {
            return Err(Error::Config("thinning_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Retention {
    Discard,
    Retain,
}

/// Retain iff `epoch ≥ B` and `(epoch − B) mod D = 0`.
pub fn retention_schedule(epoch: u32, cfg: &SghmcConfig) -> Retention {
    let (b, d) = (cfg.burn_in_epochs, cfg.thinning_epochs.max(1));
    if epoch >= b && (epoch - b).is_multiple_of(d) {
        Retention::Retain
    } else {
        Retention::Discard
    }
}

/// Samples kept over epochs `1..=epochs`; (T − B)/D + 1 whenever B ≥ 1.
pub fn retained_count(epochs: u32, burn_in: u32, thinning: u32) -> usize {
    if thinning == 0 {
        return 0;
    }
    if burn_in == 0 {
        // epoch 0 never runs, so the first retained epoch is D
        return (epochs / thinning) as usize;
    }
    if epochs < burn_in {
        return 0;
    }
    ((epochs - burn_in) / thinning + 1) as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaHyperPrior {
    pub alpha: f64,
    pub beta: f64,
    /// Current precision λ of the N(0, λ⁻¹) prior.
    pub lambda: f64,
}

impl GammaHyperPrior {
    pub fn new(alpha: f64, beta: f64, lambda: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && lambda > 0.0) {
            return Err(Error::Domain(format!(
                "Gamma hyperprior needs alpha, beta, lambda > 0 (got {alpha}, {beta}, {lambda})"
            )));
        }
        Ok(GammaHyperPrior {
            alpha,
            beta,
            lambda,
        })
    }

    /// Starts λ at a draw from the hyperprior itself.
    pub fn from_prior(alpha: f64, beta: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut p = GammaHyperPrior::new(alpha, beta, 1.0)?;
        p.lambda = draw_gamma(alpha, beta, rng)?;
        Ok(p)
    }

    /// ∇ −log N(position; 0, λ⁻¹) = λ·position.
    pub fn neg_log_prior_grad(&self, position: &[f64]) -> Vec<f64> {
        position.iter().map(|p| self.lambda * p).collect()
    }

    pub fn neg_log_prior(&self, position: &[f64]) -> f64 {
        0.5 * self.lambda * position.iter().map(|p| p * p).sum::<f64>()
    }

    /// Conjugate Gibbs draw λ ~ Gamma(α + n/2, β + ‖position‖²/2) (shape, rate).
    pub fn resample_precision(&mut self, position: &[f64], rng: &mut impl Rng) -> Result<f64> {
        let sq: f64 = position.iter().map(|p| p * p).sum();
        let shape = self.alpha + position.len() as f64 / 2.0;
        let rate = self.beta + sq / 2.0;
        self.lambda = draw_gamma(shape, rate, rng)?;
        Ok(self.lambda)
    }
}

fn draw_gamma(shape: f64, rate: f64, rng: &mut impl Rng) -> Result<f64> {
    let g = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::Domain(format!("Gamma({shape}, {rate}): {e}")))?;
    // subnormal rates can round a draw to zero; keep λ strictly positive
    Ok(g.sample(rng).max(f64::MIN_POSITIVE))
}

/// Minibatch estimate of ∇U = −(N/|M|) Σ_{x∈M} ∇ log p(x|·) + λ·position.
///
/// `log_lik_grad` returns the gradient of the *summed* log-likelihood
/// surrogate over the minibatch.
pub fn potential_grad<B, F>(
    position: &[f64],
    minibatch: &[B],
    n_data: usize,
    mut log_lik_grad: F,
    prior: &GammaHyperPrior,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &[B]) -> Result<Vec<f64>>,
{
    if minibatch.is_empty() {
        return Err(Error::Domain("empty minibatch".into()));
    }
    let g = log_lik_grad(position, minibatch)?;
    if g.len() != position.len() {
        return Err(Error::Shape {
            op: "potential_grad",
            left: vec![position.len()],
            right: vec![g.len()],
        });
    }
    let scale = n_data as f64 / minibatch.len() as f64;
    let out: Vec<f64> = g
        .iter()
        .zip(position)
        .map(|(g, p)| -scale * g + prior.lambda * p)
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("potential gradient".into()));
    }
    Ok(out)
}

/// Minibatch estimate of U (up to a constant) from the summed log-likelihood.
pub fn potential_value(
    sum_log_lik: f64,
    batch_len: usize,
    n_data: usize,
    position: &[f64],
    prior: &GammaHyperPrior,
) -> f64 {
    -(n_data as f64 / batch_len as f64) * sum_log_lik + prior.neg_log_prior(position)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SghmcState {
    pub position: Vec<f64>,
    pub momentum: Vec<f64>,
    pub v_hat: Vec<f64>,
    pub step_count: u64,
}

impl SghmcState {
    /// Zero momentum, identity preconditioner.
    pub fn new(position: Vec<f64>) -> Self {
        let n = position.len();
        SghmcState {
            position,
            momentum: vec![0.0; n],
            v_hat: vec![1.0; n],
            step_count: 0,
        }
    }

    fn adapt(&mut self, grad: &[f64]) {
        // the unit initial value counts as one prior observation
        let r = (1.0 / (self.step_count + 2) as f64).max(EMA_FLOOR);
        for (v, g) in self.v_hat.iter_mut().zip(grad) {
            *v = (*v + r * (g * g - *v)).max(V_HAT_FLOOR);
        }
    }

    /// One SGHMC step with gradient `grad` and standard-normal `noise`.
    pub fn step(&mut self, grad: &[f64], cfg: &SghmcConfig, noise: &[f64]) -> Result<()> {
        let n = self.position.len();
        if grad.len() != n || noise.len() != n {
            return Err(Error::Shape {
                op: "sghmc_step",
                left: vec![n],
                right: vec![grad.len(), noise.len()],
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "sampler gradient at step {}",
                self.step_count
            )));
        }
        if self.step_count < cfg.adapt_steps.unwrap_or(0) {
            self.adapt(grad);
        }
        let (eta, alpha) = (cfg.step_size, cfg.momentum_decay);
        for i in 0..n {
            let minv = 1.0 / self.v_hat[i].sqrt();
            let r = (1.0 - alpha) * self.momentum[i] - eta * minv * grad[i]
                + (2.0 * alpha * eta * minv).sqrt() * noise[i];
            self.momentum[i] = r;
            self.position[i] += r;
        }
        self.step_count += 1;
        let norm = self.position.iter().map(|p| p * p).sum::<f64>().sqrt();
        if !(norm <= DIVERGENCE_NORM) {
            return Err(Error::Divergence {
                step: self.step_count,
                norm,
                dump: self.dump(),
            });
        }
        Ok(())
    }

    fn dump(&self) -> String {
        let stat = |v: &[f64]| {
            let max = v.iter().map(|x| x.abs()).fold(0.0, f64::max);
            let nan = v.iter().filter(|x| !x.is_finite()).count();
            format!("max|.|={max:e} non-finite={nan}")
        };
        format!(
            "position[{}] {}; momentum {}; v_hat {}",
            self.position.len(),
            stat(&self.position),
            stat(&self.momentum),
            stat(&self.v_hat)
        )
    }
}

/// One diagnostics row: `epoch,potential,grad_norm,lambda,retained`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerDiagnostics {
    pub epoch: u32,
    pub potential: f64,
    pub grad_norm: f64,
    pub lambda: f64,
    pub retained: bool,
}

impl SamplerDiagnostics {
    pub const CSV_HEADER: &'static str = "epoch,potential,grad_norm,lambda,retained";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.potential, self.grad_norm, self.lambda, self.retained as u8
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, standard_normals};

    #[test]
    fn prior_only_gradient() {
        let prior = GammaHyperPrior::new(1.0, 1.0, 1.0).unwrap();
        let p = vec![0.5, -2.0, 3.0];
        let g = potential_grad(&p, &[()], 10, |x, _| Ok(vec![0.0; x.len()]), &prior).unwrap();
        assert_eq!(g, p);
        let empty: [(); 0] = [];
        assert!(potential_grad(&p, &empty, 10, |x, _| Ok(vec![0.0; x.len()]), &prior).is_err());
    }

    #[test]
    fn full_batch_has_unit_scale() {
        let prior = GammaHyperPrior::new(1.0, 1.0, 0.5).unwrap();
        let data = [1.0, 2.0, 3.0];
        let p = vec![0.3];
        // log-lik of x under N(p, 1): gradient (x − p)
        let g = potential_grad(
            &p,
            &data,
            3,
            |p, b| Ok(vec![b.iter().map(|x| x - p[0]).sum()]),
            &prior,
        )
        .unwrap();
        assert!((g[0] - (-(6.0 - 0.9) + 0.15)).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences_of_potential() {
        let prior = GammaHyperPrior::new(1.0, 1.0, 0.7).unwrap();
        let data = [0.4, -1.1, 2.3, 0.9];
        let batch = &data[1..3];
        let ll = |p: &[f64], b: &[f64]| -> f64 {
            b.iter()
                .map(|x| -0.5 * (x - p[0]) * (x - p[0]) * p[1].exp())
                .sum()
        };
        let ll_grad = |p: &[f64], b: &[f64]| -> Result<Vec<f64>> {
            let g0 = b.iter().map(|x| (x - p[0]) * p[1].exp()).sum();
            let g1 = b
                .iter()
                .map(|x| -0.5 * (x - p[0]) * (x - p[0]) * p[1].exp())
                .sum();
            Ok(vec![g0, g1])
        };
        let p = vec![0.2, -0.3];
        let g = potential_grad(&p, batch, data.len(), ll_grad, &prior).unwrap();
        let u = |p: &[f64]| potential_value(ll(p, batch), batch.len(), data.len(), p, &prior);
        let h = 1e-5;
        for i in 0..2 {
            let (mut a, mut b) = (p.clone(), p.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (u(&a) - u(&b)) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() / fd.abs().max(1e-12) < 1e-6,
                "{fd} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn minibatch_gradients_average_to_full_batch() {
        let prior = GammaHyperPrior::new(1.0, 1.0, 0.3).unwrap();
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.37 - 1.0).collect();
        let p = vec![0.25];
        let ll_grad = |p: &[f64], b: &[f64]| Ok(vec![b.iter().map(|x| x - p[0]).sum()]);
        let full = potential_grad(&p, &data, data.len(), ll_grad, &prior).unwrap();
        let parts: Vec<f64> = data
            .chunks(4)
            .map(|b| potential_grad(&p, b, data.len(), ll_grad, &prior).unwrap()[0])
            .collect();
        let mean = parts.iter().sum::<f64>() / parts.len() as f64;
        assert!((mean - full[0]).abs() < 1e-10);
    }

    #[test]
    fn fixed_point_without_forces() {
        let mut s = SghmcState::new(vec![1.0, -2.0]);
        s.step(&[0.0, 0.0], &SghmcConfig::default(), &[0.0, 0.0])
            .unwrap();
        assert_eq!(s.position, vec![1.0, -2.0]);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn unit_decay_without_noise_is_preconditioned_sgd() {
        let cfg = SghmcConfig {
            step_size: 0.1,
            momentum_decay: 1.0,
            ..SghmcConfig::default()
        };
        let mut s = SghmcState::new(vec![1.0, 1.0]);
        s.v_hat = vec![4.0, 0.25];
        s.step(&[1.0, 1.0], &cfg, &[0.0, 0.0]).unwrap();
        assert!((s.position[0] - (1.0 - 0.1 / 2.0)).abs() < 1e-15);
        assert!((s.position[1] - (1.0 - 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn divergence_is_reported() {
        let mut s = SghmcState::new(vec![1e9]);
        let err = s.step(&[0.0], &SghmcConfig::default(), &[0.0]).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 1, .. }));
        let mut s = SghmcState::new(vec![0.0]);
        assert!(matches!(
            s.step(&[f64::NAN], &SghmcConfig::default(), &[0.0]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn preconditioner_freezes_after_adaptation() {
        let cfg = SghmcConfig {
            adapt_steps: Some(2),
            ..SghmcConfig::default()
        };
        let mut s = SghmcState::new(vec![0.0]);
        s.step(&[3.0], &cfg, &[0.0]).unwrap();
        assert_eq!(s.v_hat, vec![5.0]);
        s.step(&[4.0], &cfg, &[0.0]).unwrap();
        assert_eq!(s.v_hat, vec![26.0 / 3.0]);
        s.step(&[100.0], &cfg, &[0.0]).unwrap();
        assert_eq!(s.v_hat, vec![26.0 / 3.0]);
    }

    #[test]
    fn standard_normal_target() {
        let cfg = SghmcConfig {
            step_size: 0.02,
            momentum_decay: 0.1,
            adapt_steps: Some(1000),
            ..SghmcConfig::default()
        };
        let mut rng = seeded(21);
        let mut s = SghmcState::new(vec![0.0]);
        let burn = 2000;
        let mut kept = Vec::new();
        for t in 0..52_000 {
            let g = s.position.clone();
            let noise = standard_normals(&mut rng, 1);
            s.step(&g, &cfg, &noise).unwrap();
            if t >= burn {
                kept.push(s.position[0]);
            }
        }
        let n = kept.len() as f64;
        let mean = kept.iter().sum::<f64>() / n;
        let var = kept.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((0.9..=1.1).contains(&var), "variance {var}");
    }

    #[test]
    fn gamma_posterior_mean() {
        let mut rng = seeded(5);
        let mut prior = GammaHyperPrior::new(1.0, 1.0, 1.0).unwrap();
        let zeros = vec![0.0; 10];
        let draws: Vec<f64> = (0..10_000)
            .map(|_| prior.resample_precision(&zeros, &mut rng).unwrap())
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((5.8..=6.2).contains(&mean), "mean {mean}");

        let huge = vec![1e6; 10];
        let lam = prior.resample_precision(&huge, &mut rng).unwrap();
        assert!(lam > 0.0 && lam < 1e-9);

        let mut a = GammaHyperPrior::new(1.0, 1.0, 1.0).unwrap();
        let mut b = a.clone();
        assert_eq!(
            a.resample_precision(&zeros, &mut seeded(3)).unwrap(),
            b.resample_precision(&zeros, &mut seeded(3)).unwrap()
        );
    }

    #[test]
    fn schedules() {
        let cfg = |b, d| SghmcConfig {
            burn_in_epochs: b,
            thinning_epochs: d,
            ..SghmcConfig::default()
        };
        let kept = |c: &SghmcConfig| {
            (0..=8)
                .filter(|&e| retention_schedule(e, c) == Retention::Retain)
                .collect::<Vec<_>>()
        };
        assert_eq!(kept(&cfg(1, 1)), vec![1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(kept(&cfg(3, 2)), vec![3, 5, 7]);
        assert_eq!(retention_schedule(0, &cfg(1, 1)), Retention::Discard);
        for t in 1..40 {
            for b in 0..=t + 1 {
                for d in 1..6 {
                    let c = cfg(b, d);
                    let n = (1..=t)
                        .filter(|&e| retention_schedule(e, &c) == Retention::Retain)
                        .count();
                    assert_eq!(n, retained_count(t, b, d));
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(SghmcConfig::default().validate().is_ok());
        let bad = SghmcConfig {
            momentum_decay: 0.0,
            ..SghmcConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SghmcConfig {
            thinning_epochs: 0,
            ..SghmcConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
