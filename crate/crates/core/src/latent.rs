//! Latent-space OoD protocol: far-out latent test points, proxy labels from
//! the disagreement of a classifier ensemble on decoded images, and the
//! latent-space baselines.

use serde::{Deserialize, Serialize};

use crate::bvae::{PosteriorEnsemble, Variant};
use crate::datasets::{minibatches, ImageDataset};
use crate::error::{Error, Result};
use crate::nn::{Activation, Network};
use crate::optim::Adam;
use crate::rng::{derive_seed, seeded, standard_normals};
use crate::scores::{disagreement_latent, mixture_decodes};
use crate::tensor::{log_sum_exp, Tape, Tensor};
use crate::vae::{encode_batch, EncoderOutput};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentProtocol {
    pub n_latents: usize,
    /// Variance of each latent coordinate.
    pub scale: f64,
    pub d: usize,
    pub seed: u64,
}

impl LatentProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.n_latents == 0 || !self.n_latents.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "n_latents {} must be positive and even",
                self.n_latents
            )));
        }
        if !(self.scale > 0.0) || self.d == 0 {
            return Err(Error::Config("scale must be > 0 and d >= 1".into()));
        }
        Ok(())
    }
}

/// i.i.d. draws from N(0, scale·I_d).
pub fn sample_latents(p: &LatentProtocol) -> Result<Vec<Vec<f64>>> {
    p.validate()?;
    let sd = p.scale.sqrt();
    let mut rng = seeded(p.seed);
    Ok((0..p.n_latents)
        .map(|_| {
            standard_normals(&mut rng, p.d)
                .into_iter()
                .map(|e| sd * e)
                .collect()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
    /// Minimum training accuracy each member must reach.
    pub accuracy_floor: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: 128,
            epochs: 20,
            batch_size: 128,
            lr: 1e-3,
            accuracy_floor: 0.85,
        }
    }
}

/// J independently trained MLP classifiers sharing one architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierEnsemble {
    net: Network,
    members: Vec<Vec<f64>>,
    n_classes: usize,
    train_accuracy: Vec<f64>,
}

impl ClassifierEnsemble {
    pub fn members(&self) -> &[Vec<f64>] {
        &self.members
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn train_accuracy(&self) -> &[f64] {
        &self.train_accuracy
    }

    /// Class probabilities of member `j` for each row of an `n × d_x` batch.
    pub fn predict(&self, j: usize, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let b = self.net.bind(&mut tape, &self.members[j], false)?;
        let xv = tape.constant(x.clone());
        let logits = self.net.forward(&mut tape, &b, xv)?[0];
        Ok(tape
            .value(logits)
            .data()
            .chunks_exact(self.n_classes)
            .map(|row| {
                let lse = log_sum_exp(row);
                row.iter().map(|l| (l - lse).exp()).collect()
            })
            .collect())
    }

    /// Mean BALD over the rows of `x`.
    pub fn mean_bald(&self, x: &Tensor) -> Result<f64> {
        let per: Vec<Vec<Vec<f64>>> = (0..self.members.len())
            .map(|j| self.predict(j, x))
            .collect::<Result<_>>()?;
        let n = x.shape()[0];
        let mut total = 0.0;
        for i in 0..n {
            let dists: Vec<&[f64]> = per.iter().map(|p| p[i].as_slice()).collect();
            total += bald_score(&dists);
        }
        Ok(total / n as f64)
    }
}

pub fn train_classifier_ensemble(
    ds: &ImageDataset,
    j: usize,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<ClassifierEnsemble> {
    if j == 0 {
        return Err(Error::Config(
            "classifier ensemble needs at least one member".into(),
        ));
    }
    let c = ds.n_classes() as usize;
    let net = Network::new(
        "classifier",
        &[ds.d_x(), cfg.hidden],
        &[c],
        Activation::Relu,
    )?;
    let labels: Vec<usize> = ds.labels().iter().map(|&l| l as usize).collect();
    let mut members = Vec::with_capacity(j);
    let mut accuracy = Vec::with_capacity(j);
    for m in 0..j {
        let s = derive_seed(seed, m as u64);
        let mut params = net.init(&mut seeded(derive_seed(s, 0)));
        let mut opt = Adam::new(params.len(), cfg.lr);
        for epoch in 0..cfg.epochs {
            for batch in minibatches(
                ds.len(),
                cfg.batch_size,
                derive_seed(s, 1 + u64::from(epoch)),
            )? {
                let mut tape = Tape::new();
                let b = net.bind(&mut tape, &params, true)?;
                let xv = tape.constant(ds.batch(&batch));
                let logits = net.forward(&mut tape, &b, xv)?[0];
                let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                let ce = tape.cross_entropy_rows(logits, &y)?;
                let loss = tape.mean(ce, None)?;
                tape.backward(loss)?;
                opt.step(&mut params, &b.gradient(&tape));
            }
        }
        members.push(params);
        let ens = ClassifierEnsemble {
            net: net.clone(),
            members: members.clone(),
            n_classes: c,
            train_accuracy: vec![],
        };
        let acc = member_accuracy(&ens, m, ds, &labels)?;
        if acc < cfg.accuracy_floor {
            return Err(Error::Training(format!(
                "classifier {m} reached training accuracy {acc:.3} < floor {}",
                cfg.accuracy_floor
            )));
        }
        accuracy.push(acc);
    }
    Ok(ClassifierEnsemble {
        net,
        members,
        n_classes: c,
        train_accuracy: accuracy,
    })
}

fn member_accuracy(
    ens: &ClassifierEnsemble,
    m: usize,
    ds: &ImageDataset,
    labels: &[usize],
) -> Result<f64> {
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(1000) {
        let probs = ens.predict(m, &ds.batch(chunk))?;
        for (p, &i) in probs.iter().zip(chunk) {
            let arg = p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(k, _)| k)
                .expect("classes");
            correct += usize::from(arg == labels[i]);
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

/// Mutual information H(mean p) − mean H(p), in nats.
pub fn bald_score(dists: &[&[f64]]) -> f64 {
    let j = dists.len() as f64;
    let c = dists[0].len();
    let mut mix = vec![0.0; c];
    for d in dists {
        for (m, v) in mix.iter_mut().zip(d.iter()) {
            *m += v / j;
        }
    }
    let mean_h = dists.iter().map(|d| entropy(d)).sum::<f64>() / j;
    (entropy(&mix) - mean_h).max(0.0)
}

/// Mean BALD over `l` mixture decodes of `z`.
pub fn expected_novelty(
    bvae: &PosteriorEnsemble,
    clf: &ClassifierEnsemble,
    z: &[f64],
    l: usize,
    seed: u64,
) -> Result<f64> {
    if l == 0 {
        return Err(Error::Domain("need at least one decode".into()));
    }
    let xs = mixture_decodes(bvae, z, l, seed)?;
    let x = Tensor::matrix(l, bvae.arch().d_x, xs.concat())?;
    clf.mean_bald(&x)
}

/// Median split: the N/2 lowest novelties are in-distribution (`false`),
/// ties broken by index.
pub fn proxy_labels(novelties: &[f64]) -> Result<Vec<bool>> {
    let n = novelties.len();
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::Domain(format!(
            "median split needs an even count, got {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| novelties[a].total_cmp(&novelties[b]).then(a.cmp(&b)));
    let mut out = vec![true; n];
    for &i in &idx[..n / 2] {
        out[i] = false;
    }
    Ok(out)
}

/// |‖z‖ − sqrt(d − 1)|: distance to the typical-set shell of N(0, I_d).
pub fn annulus_score(z: &[f64]) -> Result<f64> {
    if z.len() < 2 {
        return Err(Error::Domain(format!(
            "annulus needs d >= 2, got {}",
            z.len()
        )));
    }
    let r = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok((r - ((z.len() - 1) as f64).sqrt()).abs())
}

/// Encoder posteriors of a training set, searched by brute force on means.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedPosterior {
    means: Vec<f64>,
    log_vars: Vec<f64>,
    d: usize,
    n: usize,
}

impl AggregatedPosterior {
    pub fn new(posteriors: &[EncoderOutput]) -> Result<Self> {
        let d = posteriors.first().map(|p| p.mean.len()).ok_or_else(|| {
            Error::Domain("aggregated posterior needs at least one training point".into())
        })?;
        let mut means = Vec::with_capacity(d * posteriors.len());
        let mut log_vars = Vec::with_capacity(d * posteriors.len());
        for p in posteriors {
            if p.mean.len() != d || p.log_var.len() != d {
                return Err(Error::Shape {
                    op: "aggregated posterior",
                    left: vec![d],
                    right: vec![p.mean.len(), p.log_var.len()],
                });
            }
            means.extend_from_slice(&p.mean);
            log_vars.extend_from_slice(&p.log_var);
        }
        Ok(AggregatedPosterior {
            means,
            log_vars,
            d,
            n: posteriors.len(),
        })
    }

    /// Index over `ds` with the encoder the ensemble scores with last
    /// (the shared one, or the final retained sample).
    pub fn from_ensemble(ens: &PosteriorEnsemble, ds: &ImageDataset) -> Result<Self> {
        let phi = match ens.variant() {
            Variant::SharedEncoder => &ens.phis()[0],
            Variant::SampledEncoder => ens.phis().last().expect("non-empty"),
        };
        let all: Vec<usize> = (0..ds.len()).collect();
        Self::new(&encode_batch(ens.arch(), phi, &ds.batch(&all))?)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn log_component(&self, j: usize, z: &[f64]) -> f64 {
        let m = &self.means[j * self.d..(j + 1) * self.d];
        let lv = &self.log_vars[j * self.d..(j + 1) * self.d];
        let mut s = -0.5 * LN_2PI * self.d as f64;
        for ((zi, mi), li) in z.iter().zip(m).zip(lv) {
            s -= 0.5 * (li + (zi - mi).powi(2) * (-li).exp());
        }
        s
    }

    /// log[(1/N) Σ_{j ∈ kNN(z)} N(z; mean_j, diag exp(log_var_j))].
    pub fn score(&self, z: &[f64], k: usize) -> Result<f64> {
        if z.len() != self.d {
            return Err(Error::Shape {
                op: "aggregated posterior query",
                left: vec![self.d],
                right: vec![z.len()],
            });
        }
        if k == 0 {
            return Err(Error::Domain("k must be at least 1".into()));
        }
        let mut dist: Vec<(f64, usize)> = (0..self.n)
            .map(|j| {
                let m = &self.means[j * self.d..(j + 1) * self.d];
                (
                    m.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum::<f64>(),
                    j,
                )
            })
            .collect();
        let k = k.min(self.n);
        if k < self.n {
            dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        }
        let terms: Vec<f64> = dist[..k]
            .iter()
            .map(|&(_, j)| self.log_component(j, z))
            .collect();
        Ok(log_sum_exp(&terms) - (self.n as f64).ln())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentExperimentConfig {
    pub protocol: LatentProtocol,
    pub classifiers: usize,
    pub classifier: ClassifierConfig,
    /// Mixture decodes per latent for the classifier novelty.
    pub novelty_decodes: usize,
    /// Mixture decodes per latent for the expected ensemble disagreement.
    pub disagreement_decodes: usize,
    /// Importance samples per decoded input.
    pub k: usize,
    pub knn: usize,
}

impl Default for LatentExperimentConfig {
    fn default() -> Self {
        LatentExperimentConfig {
            protocol: LatentProtocol {
                n_latents: 1000,
                scale: 10_000.0,
                d: 32,
                seed: 0,
            },
            classifiers: 5,
            classifier: ClassifierConfig::default(),
            novelty_decodes: 32,
            disagreement_decodes: 32,
            k: 8,
            knn: 100,
        }
    }
}

/// Per-latent outcome of the protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentResult {
    pub latents: Vec<Vec<f64>>,
    pub novelty: Vec<f64>,
    /// `true` = proxy OoD.
    pub proxy_ood: Vec<bool>,
    /// (score name, OoD-normalized values), one entry per method.
    pub scores: Vec<(String, Vec<f64>)>,
    pub classifier_accuracy: Vec<f64>,
}

pub fn run_latent_experiment(
    bvae: &PosteriorEnsemble,
    train: &ImageDataset,
    cfg: &LatentExperimentConfig,
) -> Result<LatentResult> {
    cfg.protocol.validate()?;
    if cfg.classifiers < 2 {
        return Err(Error::Config(
            "the protocol needs J >= 2 classifiers".into(),
        ));
    }
    if cfg.protocol.d != bvae.arch().d_z {
        return Err(Error::Config(format!(
            "latent dimension {} differs from the VAE's {}",
            cfg.protocol.d,
            bvae.arch().d_z
        )));
    }
    let seed = cfg.protocol.seed;
    let latents = sample_latents(&cfg.protocol)?;
    let clf = train_classifier_ensemble(
        train,
        cfg.classifiers,
        &cfg.classifier,
        derive_seed(seed, 1),
    )?;
    let novelty: Vec<f64> = latents
        .iter()
        .enumerate()
        .map(|(i, z)| {
            expected_novelty(
                bvae,
                &clf,
                z,
                cfg.novelty_decodes,
                derive_seed(derive_seed(seed, 2), i as u64),
            )
        })
        .collect::<Result<_>>()?;
    let proxy_ood = proxy_labels(&novelty)?;

    let bvae_scores: Vec<f64> = latents
        .iter()
        .enumerate()
        .map(|(i, z)| {
            let r = disagreement_latent(
                bvae,
                i,
                z,
                cfg.disagreement_decodes,
                cfg.k,
                derive_seed(derive_seed(seed, 3), i as u64),
            )?;
            Ok(r.ood_normalized)
        })
        .collect::<Result<_>>()?;
    let annulus: Vec<f64> = latents
        .iter()
        .map(|z| annulus_score(z))
        .collect::<Result<_>>()?;
    let agg = AggregatedPosterior::from_ensemble(bvae, train)?;
    let aggregated: Vec<f64> = latents
        .iter()
        .map(|z| agg.score(z, cfg.knn).map(|v| -v))
        .collect::<Result<_>>()?;
    Ok(LatentResult {
        latents,
        novelty,
        proxy_ood,
        scores: vec![
            ("bvae".into(), bvae_scores),
            ("annulus".into(), annulus),
            ("aggregated_posterior".into(), aggregated),
        ],
        classifier_accuracy: clf.train_accuracy().to_vec(),
    })
}

pub const LATENT_CSV_HEADER: &str = "latent_id,novelty,proxy_label,score_name,ood_normalized";

pub fn latent_csv(r: &LatentResult) -> String {
    let mut s = String::from(LATENT_CSV_HEADER);
    s.push('\n');
    for (name, vals) in &r.scores {
        for (i, v) in vals.iter().enumerate() {
            s.push_str(&format!(
                "{i},{},{},{name},{v}\n",
                r.novelty[i],
                u8::from(r.proxy_ood[i])
            ));
        }
    }
    s
}

/// Random orthogonal matrix (d × d, row-major) by Gram–Schmidt; test helper
/// for rotation invariance.
pub fn random_rotation(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    while rows.len() < d {
        let mut v = standard_normals(&mut rng, d);
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            rows.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    rows.concat()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_sampling() {
        let p = LatentProtocol {
            n_latents: 10_000,
            scale: 4.0,
            d: 3,
            seed: 9,
        };
        let z = sample_latents(&p).unwrap();
        for c in 0..3 {
            let var = z.iter().map(|v| v[c] * v[c]).sum::<f64>() / z.len() as f64;
            assert!((var / 4.0 - 1.0).abs() < 0.05, "{var}");
        }
        assert_eq!(z, sample_latents(&p).unwrap());
        let tiny = sample_latents(&LatentProtocol {
            scale: 1e-300,
            ..p.clone()
        })
        .unwrap();
        assert!(tiny.iter().flatten().all(|v| v.abs() < 1e-140));
        assert!(sample_latents(&LatentProtocol { n_latents: 3, ..p }).is_err());
    }

    #[test]
    fn bald_examples() {
        let a = [0.2, 0.8];
        assert_eq!(bald_score(&[&a, &a, &a]), 0.0);
        let (x, y) = ([1.0, 0.0], [0.0, 1.0]);
        assert!((bald_score(&[&x, &y]) - 2f64.ln()).abs() < 1e-15);
        let (u, v) = ([0.7, 0.2, 0.1], [0.1, 0.3, 0.6]);
        let b = bald_score(&[&u, &v]);
        assert!(b > 0.0 && b <= 3f64.ln());
    }

    #[test]
    fn median_split() {
        assert_eq!(
            proxy_labels(&[1., 2., 3., 4.]).unwrap(),
            vec![false, false, true, true]
        );
        assert_eq!(
            proxy_labels(&[4., 3., 2., 1.]).unwrap(),
            vec![true, true, false, false]
        );
        assert_eq!(
            proxy_labels(&[5.0; 6]).unwrap(),
            vec![false, false, false, true, true, true]
        );
        assert!(proxy_labels(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn annulus_examples() {
        assert_eq!(annulus_score(&[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(annulus_score(&[0.0, 0.0]).unwrap(), 1.0);
        assert!((annulus_score(&[3.0, 4.0]).unwrap() - 4.0).abs() < 1e-15);
        assert!(annulus_score(&[1.0]).is_err());
        let d = 6;
        let z: Vec<f64> = (0..d).map(|i| i as f64 * 0.7 - 1.0).collect();
        let q = random_rotation(d, 3);
        let rz: Vec<f64> = (0..d)
            .map(|r| (0..d).map(|c| q[r * d + c] * z[c]).sum())
            .collect();
        assert!((annulus_score(&z).unwrap() - annulus_score(&rz).unwrap()).abs() < 1e-12);
    }

    fn post(mean: Vec<f64>, log_var: Vec<f64>) -> EncoderOutput {
        EncoderOutput { mean, log_var }
    }

    #[test]
    fn aggregated_posterior_examples() {
        let one = AggregatedPosterior::new(&[post(vec![0.0, 0.0], vec![0.0, 0.0])]).unwrap();
        assert!(
            (one.score(&[0.0, 0.0], 100).unwrap() + (2.0 * std::f64::consts::PI).ln()).abs()
                < 1e-12
        );
        let far = one.score(&[1e3, -1e3], 100).unwrap();
        assert!(far.is_finite() && far < -1e5);
        assert!(AggregatedPosterior::new(&[]).is_err());

        let mut rng = seeded(1);
        let posts: Vec<EncoderOutput> = (0..40)
            .map(|_| {
                post(
                    standard_normals(&mut rng, 3),
                    standard_normals(&mut rng, 3)
                        .iter()
                        .map(|v| 0.3 * v)
                        .collect(),
                )
            })
            .collect();
        let idx = AggregatedPosterior::new(&posts).unwrap();
        let z = [0.3, -0.2, 0.5];
        let brute: Vec<f64> = (0..40).map(|j| idx.log_component(j, &z)).collect();
        let full = log_sum_exp(&brute) - 40f64.ln();
        assert!((idx.score(&z, 40).unwrap() - full).abs() < 1e-10);
        assert!((idx.score(&z, 1000).unwrap() - full).abs() < 1e-10);
        assert!(idx.score(&z, 5).unwrap() <= full);
    }

    #[test]
    fn classifier_ensemble_trains() {
        let ds =
            crate::datasets::synthetic_mixture(200, &[[-2.0, 0.0], [2.0, 0.0]], 0.5, 4).unwrap();
        let cfg = ClassifierConfig {
            hidden: 8,
            epochs: 20,
            batch_size: 32,
            lr: 1e-2,
            accuracy_floor: 0.9,
        };
        let ens = train_classifier_ensemble(&ds, 3, &cfg, 5).unwrap();
        assert_eq!(ens.members().len(), 3);
        assert_ne!(ens.members()[0], ens.members()[1]);
        assert!(ens.train_accuracy().iter().all(|&a| a >= 0.9));
        let x = ds.batch(&[0, 1]);
        assert_eq!(ens.predict(0, &x).unwrap(), ens.predict(0, &x).unwrap());
        let strict = ClassifierConfig {
            epochs: 0,
            accuracy_floor: 0.99,
            ..cfg
        };
        assert!(matches!(
            train_classifier_ensemble(&ds, 2, &strict, 5),
            Err(Error::Training(_))
        ));
    }
}
