//! Threshold-free detection metrics and curve export.
//!
//! OoD is the positive class throughout and scores are already oriented so
//! that larger means more OoD. Equal scores form a single threshold.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::sha256_hex;
use crate::error::{Error, Result};
use crate::scores::ScoreRecord;

/// One ROC/PR sweep step: the cut `score >= threshold`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
}

/// Sweeps thresholds from high to low; one point per distinct score.
pub fn sweep(scores: &[f64], positive: &[bool]) -> Result<Vec<SweepPoint>> {
    if scores.len() != positive.len() {
        return Err(Error::Length {
            expected: scores.len(),
            found: positive.len(),
        });
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {bad}")));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out: Vec<SweepPoint> = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (j, &i) in idx.iter().enumerate() {
        if positive[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = idx.get(j + 1).is_none_or(|&n| scores[n] != scores[i]);
        if last_of_group {
            out.push(SweepPoint {
                threshold: scores[i],
                tp,
                fp,
            });
        }
    }
    Ok(out)
}

fn class_counts(positive: &[bool]) -> (usize, usize) {
    let p = positive.iter().filter(|&&b| b).count();
    (p, positive.len() - p)
}

fn need_both(positive: &[bool]) -> Result<(usize, usize)> {
    let (p, n) = class_counts(positive);
    if p == 0 || n == 0 {
        return Err(Error::Domain(format!(
            "metric needs both classes (got {p} positive, {n} negative)"
        )));
    }
    Ok((p, n))
}

/// ROC curve from (0,0) to (1,1) as (FPR, TPR) pairs.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (p, n) = need_both(positive)?;
    let mut pts = vec![(0.0, 0.0)];
    pts.extend(
        sweep(scores, positive)?
            .iter()
            .map(|s| (s.fp as f64 / n as f64, s.tp as f64 / p as f64)),
    );
    Ok(pts)
}

/// Trapezoidal area under the ROC curve.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let (p, n) = need_both(positive)?;
    // integrate in counts so ties add exactly half a rectangle per pair
    let mut area = 0.0;
    let (mut tp0, mut fp0) = (0usize, 0usize);
    for s in sweep(scores, positive)? {
        area += (s.fp - fp0) as f64 * (s.tp + tp0) as f64 / 2.0;
        tp0 = s.tp;
        fp0 = s.fp;
    }
    Ok(area / (p as f64 * n as f64))
}

/// Precision-recall curve as (recall, precision), starting at (0, 1).
pub fn pr_curve(scores: &[f64], positive: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (p, _) = class_counts(positive);
    if p == 0 {
        return Err(Error::Domain(
            "precision-recall needs a positive example".into(),
        ));
    }
    let mut pts = vec![(0.0, 1.0)];
    pts.extend(
        sweep(scores, positive)?
            .iter()
            .map(|s| (s.tp as f64 / p as f64, s.tp as f64 / (s.tp + s.fp) as f64)),
    );
    Ok(pts)
}

/// Step-interpolated PR area Σ (R_k − R_{k−1})·P_k.
pub fn auprc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let pts = pr_curve(scores, positive)?;
    Ok(pts.windows(2).map(|w| (w[1].0 - w[0].0) * w[1].1).sum())
}

/// Which class counts as positive for [`auprc_oriented`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positive {
    In,
    Ood,
}

/// AUPRC with either class positive; in-distribution positives rank by the
/// negated (OoD-oriented) score.
pub fn auprc_oriented(ood_scores: &[f64], is_ood: &[bool], positive: Positive) -> Result<f64> {
    match positive {
        Positive::Ood => auprc(ood_scores, is_ood),
        Positive::In => {
            let s: Vec<f64> = ood_scores.iter().map(|v| -v).collect();
            let l: Vec<bool> = is_ood.iter().map(|b| !b).collect();
            auprc(&s, &l)
        }
    }
}

/// FPR at the first (highest) threshold whose TPR reaches `target`.
pub fn fpr_at_tpr(scores: &[f64], positive: &[bool], target: f64) -> Result<f64> {
    let (p, n) = need_both(positive)?;
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Domain(format!("TPR target {target} outside [0,1]")));
    }
    if target == 0.0 {
        return Ok(0.0);
    }
    let need = (target * p as f64 - 1e-9).ceil() as usize;
    let hit = sweep(scores, positive)?
        .into_iter()
        .find(|s| s.tp >= need)
        .expect("the final sweep point has every positive");
    Ok(hit.fp as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub score_name: String,
    pub auroc: f64,
    /// PR area with in-distribution inputs as the positive class.
    pub auprc_in: f64,
    /// PR area with OoD inputs as the positive class.
    pub auprc_out: f64,
    pub fpr80: f64,
    pub n_in: usize,
    pub n_ood: usize,
    pub roc_points: Vec<(f64, f64)>,
    pub pr_points: Vec<(f64, f64)>,
    /// Thresholds matching `roc_points[1..]` and `pr_points[1..]`.
    pub thresholds: Vec<f64>,
    pub pr_interpolation: String,
}

impl EvalReport {
    pub fn from_scores(name: &str, ood_scores: &[f64], is_ood: &[bool]) -> Result<Self> {
        let (n_ood, n_in) = need_both(is_ood)?;
        Ok(EvalReport {
            score_name: name.to_string(),
            auroc: auroc(ood_scores, is_ood)?,
            auprc_in: auprc_oriented(ood_scores, is_ood, Positive::In)?,
            auprc_out: auprc_oriented(ood_scores, is_ood, Positive::Ood)?,
            fpr80: fpr_at_tpr(ood_scores, is_ood, 0.8)?,
            n_in,
            n_ood,
            roc_points: roc_curve(ood_scores, is_ood)?,
            pr_points: pr_curve(ood_scores, is_ood)?,
            thresholds: sweep(ood_scores, is_ood)?
                .iter()
                .map(|s| s.threshold)
                .collect(),
            pr_interpolation: "step".into(),
        })
    }

    /// Builds one report per score name found among labeled records.
    pub fn from_records(records: &[ScoreRecord]) -> Result<Vec<Self>> {
        let mut by_name: BTreeMap<String, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
        for r in records {
            let label = r.label.ok_or_else(|| {
                Error::Domain(format!("input {} has no in/ood label", r.input_id))
            })?;
            let e = by_name.entry(r.score_name.to_string()).or_default();
            e.0.push(r.ood_normalized);
            e.1.push(label == 1);
        }
        if by_name.is_empty() {
            return Err(Error::Domain("no score records".into()));
        }
        by_name
            .iter()
            .map(|(name, (s, l))| EvalReport::from_scores(name, s, l))
            .collect()
    }

    pub fn summary_line(&self) -> String {
        format!(
            "{}: AUROC {:.4}  AUPRC-in {:.4}  AUPRC-out {:.4}  FPR80 {:.4}  (n_in {}, n_ood {})",
            self.score_name,
            self.auroc,
            self.auprc_in,
            self.auprc_out,
            self.fpr80,
            self.n_in,
            self.n_ood
        )
    }
}

pub fn roc_csv(r: &EvalReport) -> String {
    let mut s = String::from("threshold,fpr,tpr\n");
    let thresholds = std::iter::once(f64::INFINITY).chain(r.thresholds.iter().copied());
    for (t, (x, y)) in thresholds.zip(&r.roc_points) {
        let _ = writeln!(s, "{t},{x},{y}");
    }
    s
}

pub fn pr_csv(r: &EvalReport) -> String {
    let mut s = String::from("threshold,recall,precision\n");
    let thresholds = std::iter::once(f64::INFINITY).chain(r.thresholds.iter().copied());
    for (t, (x, y)) in thresholds.zip(&r.pr_points) {
        let _ = writeln!(s, "{t},{x},{y}");
    }
    s
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// A standalone SVG line plot of one curve per report.
fn curve_svg(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, &[(f64, f64)])],
    diagonal: bool,
) -> String {
    let (w, h, m) = (420.0, 420.0, 50.0);
    let side = w - 2.0 * m;
    let px = |x: f64| m + x * side;
    let py = |y: f64| h - m - y * side;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{m}" y="{m}" width="{side}" height="{side}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.2}</text>"#,
            px(v),
            h - m + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#,
            m - 6.0,
            py(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        w / 2.0,
        h - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(y_label)
    );
    if diagonal {
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="gray" stroke-dasharray="4 4"/>"#,
            px(0.0),
            py(0.0),
            px(1.0),
            py(1.0)
        );
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        let ly = m + 16.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            m + side - 150.0,
            m + side - 130.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            m + side - 125.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn roc_svg(reports: &[&EvalReport]) -> String {
    let series: Vec<(String, &[(f64, f64)])> = reports
        .iter()
        .map(|r| {
            (
                format!("{} (AUROC {:.3})", r.score_name, r.auroc),
                r.roc_points.as_slice(),
            )
        })
        .collect();
    curve_svg(
        "ROC",
        "false positive rate",
        "true positive rate",
        &series,
        true,
    )
}

pub fn pr_svg(reports: &[&EvalReport]) -> String {
    let series: Vec<(String, &[(f64, f64)])> = reports
        .iter()
        .map(|r| {
            (
                format!("{} (AUPRC {:.3})", r.score_name, r.auprc_out),
                r.pr_points.as_slice(),
            )
        })
        .collect();
    curve_svg(
        "Precision-recall (OoD positive)",
        "recall",
        "precision",
        &series,
        false,
    )
}

/// Writes `<name>.roc.csv`, `<name>.pr.csv`, `<name>.roc.svg`, `<name>.pr.svg`
/// and `<name>.report.json`; returns the paths in that order.
pub fn export_curves(report: &EvalReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let name = &report.score_name;
    let files = [
        (format!("{name}.roc.csv"), roc_csv(report)),
        (format!("{name}.pr.csv"), pr_csv(report)),
        (format!("{name}.roc.svg"), roc_svg(&[report])),
        (format!("{name}.pr.svg"), pr_svg(&[report])),
        (
            format!("{name}.report.json"),
            serde_json::to_string_pretty(report)? + "\n",
        ),
    ];
    let mut out = Vec::new();
    for (file, body) in files {
        let p = out_dir.join(file);
        fs::write(&p, body)?;
        out.push(p);
    }
    Ok(out)
}

/// Provenance of one CLI invocation. The id hashes what determines the
/// results (command, parameters, config, data, seeds, versions); argv,
/// working directory, output paths, revision and timing are recorded but
/// excluded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub manifest_id: String,
    pub command: String,
    pub argv: Vec<String>,
    /// Directory relative paths in `argv` resolve against.
    pub working_dir: String,
    pub parameters: BTreeMap<String, String>,
    pub config_digest: Option<String>,
    pub dataset_digests: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub artifact_versions: BTreeMap<String, String>,
    pub revision: String,
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub elapsed_ms: u64,
}

impl RunManifest {
    pub fn compute_id(&self) -> String {
        let key = serde_json::json!({
            "command": self.command,
            "parameters": self.parameters,
            "config_digest": self.config_digest,
            "dataset_digests": self.dataset_digests,
            "seeds": self.seeds,
            "artifact_versions": self.artifact_versions,
        });
        sha256_hex(key.to_string().as_bytes())[..16].to_string()
    }

    pub fn seal(mut self) -> Self {
        self.manifest_id = self.compute_id();
        self
    }
}
