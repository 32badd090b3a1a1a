//! Input-space OoD scores over per-member log-likelihoods.
//!
//! Every score here is a function of the vector of M member log-likelihoods
//! of one input (plus, for LLR and TT, one extra scalar). The ensemble-level
//! wrappers compute those vectors once and then evaluate any score on them.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bvae::{decode_members, ensemble_log_liks, PosteriorEnsemble};
use crate::datasets::ImageDataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};
use crate::store;
use crate::tensor::{log_sum_exp, sigmoid, Tensor};
use crate::vae::{encode_batch, iw_log_lik_with_noise, VaeArch, VaeParams};

/// Lower bound applied to weights inside logarithms.
pub const WEIGHT_FLOOR: f64 = 1e-300;

/// Normalized importance weights of the ensemble members for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    /// Checks the simplex constraints (to 1e-12 on the sum).
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::Domain("empty weight vector".into()));
        }
        if w.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain(format!("weights outside [0,1]: {w:?}")));
        }
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("weights sum to {s}, not 1")));
        }
        Ok(WeightVector(w))
    }

    pub fn uniform(m: usize) -> Self {
        WeightVector(vec![1.0 / m as f64; m])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Softmax of member log-likelihoods, computed in log space.
pub fn normalize_weights(log_liks: &[f64]) -> Result<WeightVector> {
    if log_liks.len() < 2 {
        return Err(Error::Domain(format!(
            "weights need at least 2 members, got {}",
            log_liks.len()
        )));
    }
    if log_liks.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "member log-likelihoods {log_liks:?}"
        )));
    }
    let lse = log_sum_exp(log_liks);
    let mut w: Vec<f64> = log_liks.iter().map(|l| (l - lse).exp()).collect();
    // renormalize away the last ulp or two so the simplex check is exact
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v = (*v / s).min(1.0));
    Ok(WeightVector(w))
}

/// Effective sample size 1 / Σ w², in [1, M].
pub fn ess_score(w: &WeightVector) -> f64 {
    let m = w.len() as f64;
    (1.0 / w.0.iter().map(|v| v * v).sum::<f64>()).clamp(1.0, m)
}

/// (‖w − u‖₂, sqrt(1/D − 1/M)) for the uniform vector u.
pub fn ess_euclid_identity(w: &WeightVector) -> (f64, f64) {
    let m = w.len() as f64;
    let lhs =
        w.0.iter()
            .map(|v| (v - 1.0 / m).powi(2))
            .sum::<f64>()
            .sqrt();
    let sum_sq: f64 = w.0.iter().map(|v| v * v).sum();
    // 1/D = Σ w². Differences below the rounding error of that sum are zero;
    // without the cut a uniform vector would report sqrt(ulp) instead of 0.
    let diff = sum_sq - 1.0 / m;
    let rhs = if diff <= 4.0 * f64::EPSILON * sum_sq {
        0.0
    } else {
        diff.sqrt()
    };
    (lhs, rhs)
}

/// −(1/M) Σ log(M·w_m), with weights floored at [`WEIGHT_FLOOR`].
pub fn kl_change_score(w: &WeightVector) -> f64 {
    let m = w.len() as f64;
    let kl =
        -w.0.iter()
            .map(|v| (m * v.max(WEIGHT_FLOOR)).ln())
            .sum::<f64>()
            / m;
    kl.max(0.0)
}

/// log mean exp of the member log-likelihoods.
pub fn ll_value(log_liks: &[f64]) -> Result<f64> {
    if log_liks.is_empty() {
        return Err(Error::Domain("no member log-likelihoods".into()));
    }
    Ok(log_sum_exp(log_liks) - (log_liks.len() as f64).ln())
}

/// Mean minus unbiased variance of the member log-likelihoods.
pub fn waic_value(log_liks: &[f64]) -> Result<f64> {
    let m = log_liks.len();
    if m < 2 {
        return Err(Error::Domain("WAIC needs at least 2 members".into()));
    }
    let mean = log_liks.iter().sum::<f64>() / m as f64;
    let var = log_liks.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    Ok(mean - var)
}

/// The score families of the input-space experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Ess,
    Kl,
    Ll,
    Waic,
    Llr,
    Tt,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 6] = [
        ScoreKind::Ess,
        ScoreKind::Kl,
        ScoreKind::Ll,
        ScoreKind::Waic,
        ScoreKind::Llr,
        ScoreKind::Tt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Ess => "ess",
            ScoreKind::Kl => "kl",
            ScoreKind::Ll => "ll",
            ScoreKind::Waic => "waic",
            ScoreKind::Llr => "llr",
            ScoreKind::Tt => "tt",
        }
    }

    /// Maps a raw value so that larger means more likely OoD.
    pub fn ood_normalized(self, raw: f64) -> f64 {
        match self {
            ScoreKind::Kl | ScoreKind::Tt => raw,
            ScoreKind::Ess | ScoreKind::Ll | ScoreKind::Waic | ScoreKind::Llr => -raw,
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoreKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown score method {s:?}")))
    }
}

/// Extra scalars some scores need beyond the member log-likelihoods.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScoreContext {
    /// Background-model log-likelihood of the same input (LLR).
    pub background_ll: Option<f64>,
    /// Mean LL over the training subsample (TT).
    pub train_ll_mean: Option<f64>,
}

/// Raw value of `kind` for one input's member log-likelihoods.
pub fn raw_score(kind: ScoreKind, log_liks: &[f64], ctx: &ScoreContext) -> Result<f64> {
    let v = match kind {
        ScoreKind::Ess => ess_score(&normalize_weights(log_liks)?),
        ScoreKind::Kl => kl_change_score(&normalize_weights(log_liks)?),
        ScoreKind::Ll => ll_value(log_liks)?,
        ScoreKind::Waic => waic_value(log_liks)?,
        ScoreKind::Llr => {
            let bg = ctx
                .background_ll
                .ok_or_else(|| Error::Config("llr needs a background model".into()))?;
            ll_value(log_liks)? - bg
        }
        ScoreKind::Tt => {
            let mean = ctx
                .train_ll_mean
                .ok_or_else(|| Error::Config("tt needs the training log-likelihood mean".into()))?;
            (ll_value(log_liks)? - mean).abs()
        }
    };
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("{kind} score")));
    }
    Ok(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub input_id: usize,
    pub score_name: ScoreKind,
    pub raw: f64,
    pub ood_normalized: f64,
    /// 0 = in-distribution, 1 = OoD, when known.
    pub label: Option<u8>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl ScoreRecord {
    pub fn new(input_id: usize, kind: ScoreKind, raw: f64) -> Result<Self> {
        let ood_normalized = kind.ood_normalized(raw);
        if !ood_normalized.is_finite() {
            return Err(Error::NonFinite(format!(
                "{kind} score of input {input_id}"
            )));
        }
        Ok(ScoreRecord {
            input_id,
            score_name: kind,
            raw,
            ood_normalized,
            label: None,
            metadata: BTreeMap::new(),
        })
    }

    pub fn with_label(mut self, label: u8) -> Self {
        self.label = Some(label);
        self
    }
}

pub const SCORE_CSV_HEADER: &str = "input_id,score_name,raw,ood_normalized,label";

pub fn scores_csv(records: &[ScoreRecord]) -> String {
    let mut s = String::from(SCORE_CSV_HEADER);
    s.push('\n');
    for r in records {
        let label = r.label.map(|l| l.to_string()).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.input_id, r.score_name, r.raw, r.ood_normalized, label
        ));
    }
    s
}

/// Parses a score CSV produced by [`scores_csv`].
pub fn parse_scores_csv(text: &str) -> Result<Vec<ScoreRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == SCORE_CSV_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "score CSV header {other:?}, expected {SCORE_CSV_HEADER:?}"
            )))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |what: &str| Error::Format(format!("score CSV line {}: {what}: {line:?}", i + 2));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(bad("expected 5 columns"));
        }
        let input_id = cols[0].parse().map_err(|_| bad("input_id"))?;
        let score_name: ScoreKind = cols[1].parse().map_err(|_| bad("score_name"))?;
        let raw: f64 = cols[2].parse().map_err(|_| bad("raw"))?;
        let ood_normalized: f64 = cols[3].parse().map_err(|_| bad("ood_normalized"))?;
        let label = match cols[4] {
            "" => None,
            "0" => Some(0),
            "1" => Some(1),
            _ => return Err(bad("label must be 0, 1 or empty")),
        };
        out.push(ScoreRecord {
            input_id,
            score_name,
            raw,
            ood_normalized,
            label,
            metadata: BTreeMap::new(),
        });
    }
    Ok(out)
}

/// ESS of one input's member likelihoods as a score record.
pub fn disagreement_input(
    ens: &PosteriorEnsemble,
    input_id: usize,
    x: &[f64],
    k: usize,
    seed: u64,
) -> Result<ScoreRecord> {
    let ll = ensemble_log_liks(ens, x, k, seed)?;
    ScoreRecord::new(
        input_id,
        ScoreKind::Ess,
        ess_score(&normalize_weights(&ll)?),
    )
}

/// N binary inputs from the mixture decoding distribution at `z`: each draw
/// picks a member uniformly and samples Bernoulli pixels from its decoder.
pub fn mixture_decodes(
    ens: &PosteriorEnsemble,
    z: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let arch = ens.arch();
    if z.len() != arch.d_z {
        return Err(Error::Shape {
            op: "latent",
            left: vec![arch.d_z],
            right: vec![z.len()],
        });
    }
    let zt = Tensor::matrix(1, arch.d_z, z.to_vec())?;
    let probs: Vec<Vec<f64>> = decode_members(ens, &zt)?
        .into_iter()
        .map(|t| t.data().iter().map(|&l| sigmoid(l)).collect())
        .collect();
    let mut rng = seeded(seed);
    Ok((0..n)
        .map(|_| {
            let m = rng.random_range(0..probs.len());
            probs[m]
                .iter()
                .map(|&p| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
                .collect()
        })
        .collect())
}

/// Expected ESS over `n` mixture decodes of latent `z`, each scored with K
/// importance samples.
pub fn disagreement_latent(
    ens: &PosteriorEnsemble,
    latent_id: usize,
    z: &[f64],
    n: usize,
    k: usize,
    seed: u64,
) -> Result<ScoreRecord> {
    if n == 0 {
        return Err(Error::Domain("need at least one decoded input".into()));
    }
    let xs = mixture_decodes(ens, z, n, derive_seed(seed, 0))?;
    let d = xs.concat();
    let ds = ImageDataset::new(d, ens.arch().d_x, vec![0; n], 1, "decodes", None)?;
    let rows = crate::bvae::ensemble_log_lik_matrix(ens, &ds, k, derive_seed(seed, 1))?;
    let mut total = 0.0;
    for row in &rows {
        total += ess_score(&normalize_weights(row)?);
    }
    ScoreRecord::new(latent_id, ScoreKind::Ess, total / n as f64)
}

/// A VAE fitted to pixel-corrupted training data, the LLR reference.
#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundModel {
    pub params: VaeParams,
    pub mu: f64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BackgroundHeader {
    version: u8,
    arch: VaeArch,
    seed: u64,
    mu: f64,
    theta_len: usize,
    phi_len: usize,
}

const BACKGROUND_MAGIC: &[u8; 8] = b"BVAEBKG\0";

impl BackgroundModel {
    pub fn new(params: VaeParams, mu: f64, seed: u64) -> Result<Self> {
        if !(0.1..=0.2).contains(&mu) {
            return Err(Error::Domain(format!(
                "background corruption rate {mu} outside [0.1, 0.2]"
            )));
        }
        Ok(BackgroundModel { params, mu, seed })
    }

    /// Importance-sampled log-likelihood of every row of `inputs`;
    /// input `i` uses noise seed `derive_seed(seed, i)`.
    pub fn log_liks(&self, inputs: &ImageDataset, k: usize, seed: u64) -> Result<Vec<f64>> {
        let arch = &self.params.arch;
        let all: Vec<usize> = (0..inputs.len()).collect();
        let posts = encode_batch(arch, &self.params.phi, &inputs.batch(&all))?;
        posts
            .iter()
            .enumerate()
            .map(|(i, post)| {
                let eps = crate::rng::standard_normals(
                    &mut seeded(derive_seed(seed, i as u64)),
                    k * arch.d_z,
                );
                iw_log_lik_with_noise(arch, &self.params.theta, post, inputs.image(i), &eps)
            })
            .collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let h = BackgroundHeader {
            version: store::FORMAT_VERSION,
            arch: self.params.arch.clone(),
            seed: self.seed,
            mu: self.mu,
            theta_len: self.params.theta.len(),
            phi_len: self.params.phi.len(),
        };
        store::encode(
            BACKGROUND_MAGIC,
            &h,
            &[&self.params.theta, &self.params.phi],
        )
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (h, floats): (BackgroundHeader, _) = store::decode(BACKGROUND_MAGIC, bytes)?;
        let mut blocks = store::split_blocks(floats, &[h.theta_len, h.phi_len])?;
        let phi = blocks.pop().expect("two blocks");
        let theta = blocks.pop().expect("two blocks");
        BackgroundModel::new(VaeParams::new(h.arch, theta, phi)?, h.mu, h.seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        store::write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// Scores `inputs` with one method. `rows` holds each input's member
/// log-likelihoods; `background` the background log-likelihoods (LLR).
pub fn score_rows(
    kind: ScoreKind,
    rows: &[Vec<f64>],
    background: Option<&[f64]>,
    train_ll_mean: Option<f64>,
) -> Result<Vec<ScoreRecord>> {
    if let Some(bg) = background {
        if bg.len() != rows.len() {
            return Err(Error::Length {
                expected: rows.len(),
                found: bg.len(),
            });
        }
    }
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let ctx = ScoreContext {
                background_ll: background.map(|b| b[i]),
                train_ll_mean,
            };
            ScoreRecord::new(i, kind, raw_score(kind, row, &ctx)?)
        })
        .collect()
}

/// Mean LL over a fixed subsample of the training set, the TT center.
pub fn train_ll_mean(rows: &[Vec<f64>]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Domain("empty training subsample".into()));
    }
    let mut s = 0.0;
    for r in rows {
        s += ll_value(r)?;
    }
    Ok(s / rows.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(v: &[f64]) -> WeightVector {
        WeightVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn weights() {
        assert_eq!(
            normalize_weights(&[0.0, 0.0, 0.0]).unwrap(),
            WeightVector::uniform(3)
        );
        let c = -812.5;
        let v = normalize_weights(&[c, c + 3f64.ln()]).unwrap();
        assert!((v.as_slice()[0] - 0.25).abs() < 1e-12 && (v.as_slice()[1] - 0.75).abs() < 1e-12);
        assert!(normalize_weights(&[1.0]).is_err());
        assert!(matches!(
            normalize_weights(&[1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(WeightVector::new(vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn ess_examples() {
        assert_eq!(ess_score(&WeightVector::uniform(8)), 8.0);
        assert_eq!(ess_score(&w(&[0.0, 1.0, 0.0])), 1.0);
        assert!((ess_score(&w(&[0.5, 0.25, 0.125, 0.125])) - 1.0 / 0.34375).abs() < 1e-12);
        let (l, r) = ess_euclid_identity(&w(&[0.5, 0.5, 0.0, 0.0]));
        assert!((l - 0.5).abs() < 1e-15 && (r - 0.5).abs() < 1e-15);
        assert_eq!(ess_euclid_identity(&WeightVector::uniform(5)), (0.0, 0.0));
    }

    #[test]
    fn kl_examples() {
        assert!(kl_change_score(&WeightVector::uniform(7)).abs() < 1e-15);
        let expect = -0.5 * (1.5f64.ln() + 0.5f64.ln());
        assert!((kl_change_score(&w(&[0.75, 0.25])) - expect).abs() < 1e-12);
        assert!((expect - 0.143_841_036).abs() < 1e-8);
        assert!(kl_change_score(&w(&[1.0, 0.0])).is_finite());
    }

    #[test]
    fn baseline_examples() {
        assert_eq!(waic_value(&[-10.0, -12.0]).unwrap(), -13.0);
        assert_eq!(waic_value(&[-4.0; 3]).unwrap(), -4.0);
        assert_eq!(ll_value(&[-3.5]).unwrap(), -3.5);
        assert!((ll_value(&[-2.0, -2.0]).unwrap() + 2.0).abs() < 1e-15);
        let ctx = ScoreContext {
            background_ll: Some(-7.0),
            train_ll_mean: Some(-5.0),
        };
        assert_eq!(raw_score(ScoreKind::Llr, &[-7.0, -7.0], &ctx).unwrap(), 0.0);
        assert_eq!(raw_score(ScoreKind::Tt, &[-5.0, -5.0], &ctx).unwrap(), 0.0);
        let up = raw_score(ScoreKind::Tt, &[-3.0, -3.0], &ctx).unwrap();
        let down = raw_score(ScoreKind::Tt, &[-7.0, -7.0], &ctx).unwrap();
        assert!((up - down).abs() < 1e-12 && up > 0.0);
        assert!(raw_score(ScoreKind::Llr, &[-1.0, -1.0], &ScoreContext::default()).is_err());
    }

    #[test]
    fn directions_and_names() {
        assert_eq!(ScoreKind::Ess.ood_normalized(3.0), -3.0);
        assert_eq!(ScoreKind::Kl.ood_normalized(3.0), 3.0);
        for k in ScoreKind::ALL {
            assert_eq!(k.name().parse::<ScoreKind>().unwrap(), k);
        }
        assert!("bogus".parse::<ScoreKind>().is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let recs = vec![
            ScoreRecord::new(0, ScoreKind::Ess, 2.5)
                .unwrap()
                .with_label(0),
            ScoreRecord::new(1, ScoreKind::Ess, 1.0 / 3.0)
                .unwrap()
                .with_label(1),
            ScoreRecord::new(2, ScoreKind::Ess, 1.25).unwrap(),
        ];
        let text = scores_csv(&recs);
        assert!(text.starts_with("input_id,score_name,raw,ood_normalized,label\n"));
        assert_eq!(parse_scores_csv(&text).unwrap(), recs);
        assert!(parse_scores_csv("a,b\n").is_err());
        assert!(parse_scores_csv(&format!("{SCORE_CSV_HEADER}\n0,ess,1,-1,2\n")).is_err());
    }

    fn simplex(m: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(1e-6f64..1.0, m).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn ess_bounds_and_identity(m in 2usize..20, seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let ll: Vec<f64> = (0..m).map(|_| rng.random_range(-50.0..0.0)).collect();
            let wv = normalize_weights(&ll).unwrap();
            let d = ess_score(&wv);
            prop_assert!((1.0..=m as f64).contains(&d));
            let (l, r) = ess_euclid_identity(&wv);
            prop_assert!((l - r).abs() < 1e-12);
            prop_assert!(kl_change_score(&wv) >= 0.0);
        }

        #[test]
        fn shift_invariance(v in prop::collection::vec(-100.0f64..100.0, 2..12), c in -1e4f64..1e4) {
            let a = normalize_weights(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = normalize_weights(&shifted).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn waic_shift_and_spread(v in prop::collection::vec(-50.0f64..50.0, 2..10), c in -1e3f64..1e3) {
            let base = waic_value(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            prop_assert!((waic_value(&shifted).unwrap() - (base + c)).abs() < 1e-6);
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let spread: Vec<f64> = v.iter().map(|x| mean + 2.0 * (x - mean)).collect();
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
            if var > 1e-9 {
                prop_assert!(waic_value(&spread).unwrap() < base);
            }
        }

        #[test]
        fn ll_between_min_and_max(v in prop::collection::vec(-500.0f64..0.0, 1..10)) {
            let l = ll_value(&v).unwrap();
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(l >= lo - 1e-9 && l <= hi + 1e-9);
        }

        #[test]
        fn euclid_identity_on_simplex(v in (2usize..16).prop_flat_map(simplex)) {
            let wv = WeightVector::new(v).unwrap();
            let (l, r) = ess_euclid_identity(&wv);
            prop_assert!((l - r).abs() < 1e-12);
        }
    }
}
