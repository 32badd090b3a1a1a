use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use bvae_core::bvae::{
    diagnostics_csv, ensemble_log_lik_matrix, load_ensemble, save_ensemble, train, train_point_vae,
    PosteriorEnsemble, Variant,
};
use bvae_core::datasets::{
    corrupt, fetch_with_cache, read_manifest, sha256_hex, DefaultTransport, ImageDataset,
};
use bvae_core::eval::{export_curves, pr_svg, roc_svg, EvalReport, RunManifest};
use bvae_core::latent::{latent_csv, run_latent_experiment};
use bvae_core::rng::derive_seed;
use bvae_core::scores::{
    parse_scores_csv, score_rows, scores_csv, train_ll_mean, BackgroundModel, ScoreKind,
};
use bvae_core::store::write_atomic;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

mod inputs;
mod provenance;

use inputs::{read_config, DataSpec, LatentFile, TrainFile};
use provenance::{sidecar, Run};

#[derive(Parser, Debug)]
#[command(
    name = "bvae",
    version,
    about = "Bayesian VAE out-of-distribution detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Download the files listed in a dataset manifest into the cache.
    FetchData(FetchArgs),
    /// Sample a decoder (and optionally encoder) ensemble with SGHMC.
    Train(TrainArgs),
    /// Fit the LLR background VAE on pixel-corrupted training data.
    TrainBackground(BackgroundArgs),
    /// Score in-distribution and OoD inputs; writes a scores CSV.
    Score(ScoreArgs),
    /// AUROC, AUPRC and FPR80 plus curves for every method in a scores CSV.
    Eval(EvalArgs),
    /// Latent-space protocol: proxy labels, BVAE and baseline scores.
    LatentEval(LatentArgs),
    /// Re-execute a run from its manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Serialize)]
struct FetchArgs {
    manifest: PathBuf,
    #[arg(long, env = "BVAE_CACHE_DIR", default_value = ".bvae-cache")]
    cache_dir: PathBuf,
    /// Also copy each file to `<out>/<name>.idx[.gz]`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
enum VariantArg {
    #[value(name = "1")]
    #[serde(rename = "1")]
    One,
    #[value(name = "2")]
    #[serde(rename = "2")]
    Two,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long, value_enum)]
    variant: VariantArg,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct BackgroundArgs {
    #[arg(long)]
    config: PathBuf,
    /// Per-pixel corruption probability.
    #[arg(long, default_value_t = 0.2)]
    mu: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ScoreArgs {
    #[arg(long)]
    ensemble: PathBuf,
    /// One or more methods, comma separated or repeated.
    #[arg(long, required = true, value_delimiter = ',')]
    method: Vec<String>,
    #[arg(long = "in")]
    in_data: PathBuf,
    #[arg(long)]
    ood: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Keep only this many in-distribution inputs.
    #[arg(long)]
    n_in: Option<usize>,
    #[arg(long)]
    n_ood: Option<usize>,
    #[arg(long, default_value_t = 0)]
    subsample_seed: u64,
    /// Importance samples per input and member.
    #[arg(short = 'k', long, default_value_t = 64)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Background model for `llr`.
    #[arg(long)]
    background: Option<PathBuf>,
    /// Training images for the `tt` center.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    train_n: usize,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct LatentArgs {
    #[arg(long)]
    ensemble: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ReplayArgs {
    manifest: PathBuf,
    /// Where to put the replayed output instead of the recorded location.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match execute(cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: Cli, argv: &[String]) -> Result<()> {
    match cli.command {
        Cmd::FetchData(a) => fetch_data(a, argv),
        Cmd::Train(a) => train_cmd(a, argv),
        Cmd::TrainBackground(a) => train_background(a, argv),
        Cmd::Score(a) => score(a, argv),
        Cmd::Eval(a) => eval_cmd(a, argv),
        Cmd::LatentEval(a) => latent_eval(a, argv),
        Cmd::Replay(a) => replay(a),
    }
}

fn fetch_data(a: FetchArgs, argv: &[String]) -> Result<()> {
    let mut run = Run::start("fetch-data", argv, &a)?;
    let entries =
        read_manifest(&a.manifest).with_context(|| format!("reading {}", a.manifest.display()))?;
    let transport = DefaultTransport {
        base_dir: a.manifest.parent().map(Path::to_path_buf),
    };
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
    }
    let mut outputs = Vec::new();
    for e in &entries {
        let cached = fetch_with_cache(&transport, &e.url, &a.cache_dir, &e.sha256)
            .with_context(|| format!("fetching {}", e.name))?;
        run.digest(&e.name, e.sha256.to_ascii_lowercase());
        let path = match &a.out {
            Some(dir) => {
                let gz = fs::read(&cached)?.starts_with(&[0x1f, 0x8b]);
                let dest = dir.join(format!("{}.idx{}", e.name, if gz { ".gz" } else { "" }));
                fs::copy(&cached, &dest)?;
                dest
            }
            None => cached,
        };
        println!("{}\t{}", e.name, path.display());
        outputs.push(path);
    }
    let manifest_path = match &a.out {
        Some(dir) => dir.join("fetch.manifest.json"),
        None => a.cache_dir.join("fetch.manifest.json"),
    };
    run.finish(&outputs, &manifest_path)?;
    Ok(())
}

fn train_cmd(a: TrainArgs, argv: &[String]) -> Result<()> {
    let mut run = Run::start("train", argv, &a)?;
    let (cfg, digest): (TrainFile, _) = read_config(&a.config)?;
    run.config(digest);
    let ds = cfg.data.load()?;
    run.dataset("train", &ds);
    run.seed("train", cfg.train.seed);
    let variant = match a.variant {
        VariantArg::One => Variant::SharedEncoder,
        VariantArg::Two => Variant::SampledEncoder,
    };
    eprintln!(
        "training variant {variant} on {} examples: {} epochs, {} retained samples",
        ds.len(),
        cfg.train.epochs,
        cfg.train.retained()
    );
    let (ens, report) = train(&ds, &cfg.train, variant, &mut |s| {
        eprintln!(
            "epoch {:>3}  -ELBO/example {:>10.3}{}",
            s.epoch,
            s.neg_elbo,
            if s.retained {
                format!("  retained ({})", s.members)
            } else {
                String::new()
            }
        );
    })?;
    let ens = ens.with_run_id(run.id());
    save_ensemble(&ens, &a.out).with_context(|| format!("writing {}", a.out.display()))?;

    let mut outputs = vec![a.out.clone()];
    let with_suffix = |suffix: &str| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    let theta_csv = with_suffix(".theta.csv");
    fs::write(&theta_csv, diagnostics_csv(&report.theta))?;
    outputs.push(theta_csv);
    if !report.phi.is_empty() {
        let phi_csv = with_suffix(".phi.csv");
        fs::write(&phi_csv, diagnostics_csv(&report.phi))?;
        outputs.push(phi_csv);
    }
    let elbo_csv = with_suffix(".elbo.csv");
    let mut body = String::from("epoch,neg_elbo\n");
    for (i, v) in report.neg_elbo.iter().enumerate() {
        body.push_str(&format!("{},{v}\n", i + 1));
    }
    fs::write(&elbo_csv, body)?;
    outputs.push(elbo_csv);
    println!("ensemble digest {}", ens.digest());
    run.finish(&outputs, &sidecar(&a.out))?;
    Ok(())
}

fn train_background(a: BackgroundArgs, argv: &[String]) -> Result<()> {
    let mut run = Run::start("train-background", argv, &a)?;
    let (cfg, digest): (TrainFile, _) = read_config(&a.config)?;
    run.config(digest);
    let ds = cfg.data.load()?;
    run.dataset("train", &ds);
    let corrupt_seed = derive_seed(cfg.train.seed, 7);
    run.seed("train", cfg.train.seed);
    run.seed("corruption", corrupt_seed);
    // validate mu before spending time on training
    BackgroundModel::new(
        bvae_core::vae::VaeParams::zeros(cfg.train.arch.clone())?,
        a.mu,
        corrupt_seed,
    )?;
    let noisy = corrupt(&ds, a.mu, corrupt_seed)?;
    eprintln!(
        "background: mu {}, {} examples, {} epochs",
        a.mu,
        noisy.len(),
        cfg.train.epochs
    );
    let (params, trace) = train_point_vae(&noisy, &cfg.train)?;
    if let Some(last) = trace.last() {
        eprintln!("final -ELBO/example {last:.3}");
    }
    let model = BackgroundModel::new(params, a.mu, corrupt_seed)?;
    model
        .save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    run.finish(std::slice::from_ref(&a.out), &sidecar(&a.out))?;
    Ok(())
}

fn load_ensemble_checked(path: &Path) -> Result<PosteriorEnsemble> {
    let loaded =
        load_ensemble(path).with_context(|| format!("loading ensemble {}", path.display()))?;
    for w in &loaded.warnings {
        eprintln!("warning: {}: {w}", path.display());
    }
    Ok(loaded.ensemble)
}

fn load_inputs(path: &Path, n: Option<usize>, seed: u64) -> Result<ImageDataset> {
    let mut spec = DataSpec::from_images(path.to_path_buf());
    spec.subsample = n;
    spec.subsample_seed = seed;
    spec.load()
}

fn score(a: ScoreArgs, argv: &[String]) -> Result<()> {
    let mut run = Run::start("score", argv, &a)?;
    let kinds: Vec<ScoreKind> = a
        .method
        .iter()
        .map(|m| {
            m.parse::<ScoreKind>()
                .map_err(|e| anyhow!("--method {m}: {e}"))
        })
        .collect::<Result<_>>()?;
    if kinds.contains(&ScoreKind::Llr) && a.background.is_none() {
        bail!("--method llr needs --background");
    }
    if kinds.contains(&ScoreKind::Tt) && a.train.is_none() {
        bail!("--method tt needs --train");
    }
    let ens = load_ensemble_checked(&a.ensemble)?;
    run.digest("ensemble", ens.digest());
    let in_ds = load_inputs(&a.in_data, a.n_in, derive_seed(a.subsample_seed, 1))?;
    let ood_ds = load_inputs(&a.ood, a.n_ood, derive_seed(a.subsample_seed, 2))?;
    run.dataset("in", &in_ds);
    run.dataset("ood", &ood_ds);
    run.seed("score", a.seed);
    run.seed("subsample", a.subsample_seed);
    if let Some(w) = ens.check_training_data(&in_ds) {
        eprintln!("note: {w}");
    }

    eprintln!(
        "scoring {} in + {} OoD inputs, M = {}, K = {}",
        in_ds.len(),
        ood_ds.len(),
        ens.len(),
        a.k
    );
    let in_rows = ensemble_log_lik_matrix(&ens, &in_ds, a.k, derive_seed(a.seed, 1))?;
    let ood_rows = ensemble_log_lik_matrix(&ens, &ood_ds, a.k, derive_seed(a.seed, 2))?;

    let background = match &a.background {
        Some(p) if kinds.contains(&ScoreKind::Llr) => {
            let bg = BackgroundModel::load(p)
                .with_context(|| format!("loading background {}", p.display()))?;
            run.digest("background", sha256_hex(&fs::read(p)?));
            Some((
                bg.log_liks(&in_ds, a.k, derive_seed(a.seed, 3))?,
                bg.log_liks(&ood_ds, a.k, derive_seed(a.seed, 4))?,
            ))
        }
        _ => None,
    };
    let tt_center = match &a.train {
        Some(p) if kinds.contains(&ScoreKind::Tt) => {
            let train_ds = load_inputs(p, Some(a.train_n), derive_seed(a.subsample_seed, 3))?;
            run.dataset("train", &train_ds);
            let rows = ensemble_log_lik_matrix(&ens, &train_ds, a.k, derive_seed(a.seed, 5))?;
            Some(train_ll_mean(&rows)?)
        }
        _ => None,
    };

    let n_in = in_ds.len();
    let mut records = Vec::new();
    for &kind in &kinds {
        let (bg_in, bg_ood) = match &background {
            Some((i, o)) => (Some(i.as_slice()), Some(o.as_slice())),
            None => (None, None),
        };
        for r in score_rows(kind, &in_rows, bg_in, tt_center)? {
            records.push(r.with_label(0));
        }
        for mut r in score_rows(kind, &ood_rows, bg_ood, tt_center)? {
            r.input_id += n_in;
            records.push(r.with_label(1));
        }
    }
    write_atomic(&a.out, scores_csv(&records).as_bytes())
        .with_context(|| format!("writing {}", a.out.display()))?;
    if let Ok(reports) = EvalReport::from_records(&records) {
        for r in &reports {
            eprintln!("{}", r.summary_line());
        }
    }
    run.finish(std::slice::from_ref(&a.out), &sidecar(&a.out))?;
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a> {
    manifest_id: &'a str,
    reports: &'a [EvalReport],
}

/// Per-method exports, combined plots and `summary.json` under `dir`.
fn write_reports(dir: &Path, reports: &[EvalReport], id: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut outputs = Vec::new();
    for r in reports {
        outputs
            .extend(export_curves(r, dir).with_context(|| format!("exporting {}", r.score_name))?);
        println!("{}", r.summary_line());
    }
    let refs: Vec<&EvalReport> = reports.iter().collect();
    for (name, body) in [("roc.svg", roc_svg(&refs)), ("pr.svg", pr_svg(&refs))] {
        let p = dir.join(name);
        fs::write(&p, body)?;
        outputs.push(p);
    }
    let p = dir.join("summary.json");
    let summary = Summary {
        manifest_id: id,
        reports,
    };
    fs::write(&p, serde_json::to_string_pretty(&summary)? + "\n")?;
    outputs.push(p);
    Ok(outputs)
}

fn eval_cmd(a: EvalArgs, argv: &[String]) -> Result<()> {
    let mut run = Run::start("eval", argv, &a)?;
    let text =
        fs::read_to_string(&a.scores).with_context(|| format!("reading {}", a.scores.display()))?;
    run.digest("scores", sha256_hex(text.as_bytes()));
    let records =
        parse_scores_csv(&text).with_context(|| format!("parsing {}", a.scores.display()))?;
    let reports = EvalReport::from_records(&records)?;
    let outputs = write_reports(&a.out, &reports, &run.id())?;
    run.finish(&outputs, &a.out.join("manifest.json"))?;
    Ok(())
}

fn latent_eval(a: LatentArgs, argv: &[String]) -> Result<()> {
    let mut run = Run::start("latent-eval", argv, &a)?;
    let (cfg, digest): (LatentFile, _) = read_config(&a.config)?;
    run.config(digest);
    let ens = load_ensemble_checked(&a.ensemble)?;
    run.digest("ensemble", ens.digest());
    let ds = cfg.data.load()?;
    run.dataset("train", &ds);
    run.seed("protocol", cfg.experiment.protocol.seed);
    eprintln!(
        "latent protocol: N = {}, b = {}, J = {}, L = {}",
        cfg.experiment.protocol.n_latents,
        cfg.experiment.protocol.scale,
        cfg.experiment.classifiers,
        cfg.experiment.novelty_decodes
    );
    let result = run_latent_experiment(&ens, &ds, &cfg.experiment)?;
    eprintln!(
        "classifier training accuracy {:?}",
        result.classifier_accuracy
    );
    let reports: Vec<EvalReport> = result
        .scores
        .iter()
        .map(|(name, vals)| EvalReport::from_scores(name, vals, &result.proxy_ood))
        .collect::<bvae_core::Result<_>>()?;
    let mut outputs = write_reports(&a.out, &reports, &run.id())?;
    let csv = a.out.join("latent.csv");
    fs::write(&csv, latent_csv(&result))?;
    outputs.push(csv);
    run.finish(&outputs, &a.out.join("manifest.json"))?;
    Ok(())
}

/// Rewrites the output location of a recorded argv: the value after `--out`
/// (or the `--out=` form) becomes `out`.
fn redirect_out(argv: &[String], out: &Path) -> Result<Vec<String>> {
    let out = out.to_string_lossy().into_owned();
    let mut result = Vec::with_capacity(argv.len() + 2);
    let mut found = false;
    let mut it = argv.iter();
    while let Some(arg) = it.next() {
        if arg == "--out" {
            it.next();
            result.push(arg.clone());
            result.push(out.clone());
            found = true;
        } else if arg.starts_with("--out=") {
            result.push(format!("--out={out}"));
            found = true;
        } else {
            result.push(arg.clone());
        }
    }
    if !found {
        // fetch-data treats --out as optional
        result.push("--out".into());
        result.push(out);
    }
    Ok(result)
}

fn replay(a: ReplayArgs) -> Result<()> {
    let text = fs::read_to_string(&a.manifest)
        .with_context(|| format!("reading {}", a.manifest.display()))?;
    let recorded: RunManifest =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", a.manifest.display()))?;
    if recorded.argv.get(1).map(String::as_str) == Some("replay") {
        bail!(
            "{} records a replay; replay the original run instead",
            a.manifest.display()
        );
    }
    let argv = match &a.out {
        Some(out) => {
            let abs = if out.is_absolute() {
                out.clone()
            } else {
                std::env::current_dir()?.join(out)
            };
            redirect_out(&recorded.argv, &abs)?
        }
        None => recorded.argv.clone(),
    };
    std::env::set_current_dir(&recorded.working_dir).with_context(|| {
        format!(
            "entering recorded working directory {}",
            recorded.working_dir
        )
    })?;
    eprintln!(
        "replaying run {}: {}",
        recorded.manifest_id,
        argv[1..].join(" ")
    );
    let cli =
        Cli::try_parse_from(&argv).map_err(|e| anyhow!("recorded argv no longer parses: {e}"))?;
    execute(cli, &argv)
}
