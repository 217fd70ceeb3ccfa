//! `msqale` command line: corpus generation, training, pristine model,
//! scoring, evaluation and subjective-score processing, each writing into
//! one run directory.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use msqale::corpus::{read_corpus, write_corpus, CorpusManifest};
use msqale::encoder::EncoderWeights;
use msqale::eval::{process_ratings, scene_split_eval, split_half_consistency, MosTable, RatingTable};
use msqale::pipeline::{
    eval_to_csv, feature_provider, generate_corpora, oriented_scores, proxy_mos, score_all, scores_from_csv,
    scores_to_csv, train_levels, RunConfig, MOS_VERSION_LINE,
};
use msqale::pristine::{build_pristine_model, PristineModel};
use msqale::pyramid::Level;
use msqale::{load_image, Image};

use config::{resolve, to_resolved_text, Layers};

const AFTER_HELP: &str = "\
Examples:
  msqale --run-dir runs/demo corpus
  msqale --run-dir runs/demo train --jobs 4
  msqale --run-dir runs/demo pristine
  msqale --run-dir runs/demo score
  msqale --run-dir runs/demo eval
  msqale --run-dir runs/nss --set base_dir=bases corpus && msqale --run-dir runs/nss pristine --features nss
  msqale mos --ratings ratings.csv

Configuration keys are listed in docs/config.md. Precedence, lowest first:
defaults, the run directory's config.resolved, --config FILE, MSQALE_<KEY>
environment variables, flags.";

#[derive(Parser)]
#[command(name = "msqale", version, about = "Unsupervised no-reference image quality assessment", after_help = AFTER_HELP)]
struct Cli {
    /// Flat TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; defaults to runs/<timestamp>-<tag>.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    tag: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Any configuration key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training and held-out scene sets.
    Corpus(CorpusArgs),
    /// Train one encoder per pyramid level.
    Train(TrainArgs),
    /// Fit the pristine reference model.
    Pristine(FeatureArgs),
    /// Score images against the pristine model.
    Score(ScoreArgs),
    /// Scene-disjoint SRCC/PLCC of scores against MOS.
    Eval(EvalArgs),
    /// Turn raw ratings into MOS (z-scores, outlier rejection, rescaling).
    Mos(MosArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Corpus(_) => "corpus",
            Command::Train(_) => "train",
            Command::Pristine(_) => "pristine",
            Command::Score(_) => "score",
            Command::Eval(_) => "eval",
            Command::Mos(_) => "mos",
        }
    }
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    train_scenes: Option<usize>,
    #[arg(long)]
    heldout_scenes: Option<usize>,
    /// Versions per scene.
    #[arg(long)]
    versions: Option<usize>,
    /// Directory of PNG/PPM base images; synthetic bases otherwise.
    #[arg(long)]
    base_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Pyramid levels M.
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Negative sampler: same_scene or cross_scene.
    #[arg(long)]
    negatives: Option<String>,
}

#[derive(Args)]
struct FeatureArgs {
    /// Feature provider: msqale or nss.
    #[arg(long)]
    features: Option<String>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    tau_s: Option<f64>,
    #[arg(long)]
    tau_c: Option<f64>,
    #[arg(long)]
    pca_dim: Option<usize>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    features: Option<String>,
    /// Score every PNG/PPM under this directory instead of the held-out set.
    #[arg(long)]
    images: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// MOS CSV; defaults to the run's mos.csv, then heldout/mos.csv.
    #[arg(long)]
    mos: Option<PathBuf>,
    #[arg(long)]
    splits: Option<usize>,
    /// Fit the 5-parameter logistic instead of the 4-parameter one.
    #[arg(long)]
    logistic5: bool,
}

#[derive(Args)]
struct MosArgs {
    /// Ratings CSV: subject_id,session_id,image_id,scene_id,score.
    #[arg(long)]
    ratings: PathBuf,
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(|x| x.to_string())
}

fn flag_pairs(cli: &Cli) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            out.push((k.to_string(), v));
        }
    };
    let p = |v: &Option<PathBuf>| v.as_ref().map(|x| x.display().to_string());
    put("tag", cli.tag.clone());
    put("seed", s(&cli.seed));
    put("jobs", s(&cli.jobs));
    match &cli.command {
        Command::Corpus(a) => {
            put("train_scenes", s(&a.train_scenes));
            put("heldout_scenes", s(&a.heldout_scenes));
            put("versions", s(&a.versions));
            put("base_dir", p(&a.base_dir));
        }
        Command::Train(a) => {
            put("levels", s(&a.levels));
            put("epochs", s(&a.epochs));
            put("lr", s(&a.lr));
            put("tau", s(&a.tau));
            put("negatives", a.negatives.clone());
        }
        Command::Pristine(a) => {
            put("features", a.features.clone());
            put("patch", s(&a.patch));
            put("tau_s", s(&a.tau_s));
            put("tau_c", s(&a.tau_c));
            put("pca_dim", s(&a.pca_dim));
        }
        Command::Score(a) => put("features", a.features.clone()),
        Command::Eval(a) => {
            put("splits", s(&a.splits));
            if a.logistic5 {
                put("logistic", Some("logistic5".into()));
            }
        }
        Command::Mos(_) => {}
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got '{kv}'"))?;
        out.push((k.trim().to_string(), v.to_string()));
    }
    Ok(out)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn weights_path(run: &Path, level: Level) -> PathBuf {
    run.join("weights").join(format!("{}.msqw", level.name()))
}

fn load_encoders(run: &Path, m: usize) -> Result<Vec<EncoderWeights>> {
    Level::all(m)
        .into_iter()
        .map(|l| {
            let p = weights_path(run, l);
            let bytes = fs::read(&p).with_context(|| format!("reading {}; run `train` first", p.display()))?;
            Ok(EncoderWeights::from_bytes(&bytes)?)
        })
        .collect()
}

fn provider(run: &Path, cfg: &RunConfig) -> Result<Box<dyn msqale::scorer::FeatureProvider>> {
    let encoders = if cfg.features == "msqale" {
        Some(load_encoders(run, cfg.levels)?)
    } else {
        None
    };
    Ok(feature_provider(&cfg.features, encoders)?)
}

fn cmd_corpus(run: &Path, cfg: &RunConfig) -> Result<()> {
    let (train, held) = generate_corpora(cfg)?;
    write_corpus(&run.join("corpus"), &train.set, &train.manifest, &train.bases)?;
    write_corpus(&run.join("heldout"), &held.set, &held.manifest, &held.bases)?;
    let mos = proxy_mos(&held.manifest, "heldout")?;
    write(&run.join("heldout/mos.csv"), format!("{MOS_VERSION_LINE}\n{}", mos.to_csv()))?;
    println!(
        "corpus: {} training and {} held-out scenes, {} versions each",
        train.set.len(),
        held.set.len(),
        cfg.versions
    );
    Ok(())
}

fn cmd_train(run: &Path, cfg: &RunConfig) -> Result<()> {
    let (set, _) = read_corpus(&run.join("corpus")).context("run `corpus` first")?;
    let tcfg = cfg.train_config()?;
    let trained = train_levels(&set, cfg.levels, &tcfg)?;
    for (w, log) in &trained {
        let level = w.level;
        write(&weights_path(run, level), w.to_bytes())?;
        write(&run.join("logs").join(format!("train_{}.csv", level.name())), log.to_csv())?;
        let means = log.epoch_means();
        println!(
            "train {}: loss {:.4} -> {:.4} over {} epochs",
            level.name(),
            means.first().copied().unwrap_or(f64::NAN),
            means.last().copied().unwrap_or(f64::NAN),
            means.len()
        );
    }
    Ok(())
}

fn cmd_pristine(run: &Path, cfg: &RunConfig) -> Result<()> {
    let dir = run.join("corpus");
    let text = fs::read_to_string(dir.join("manifest.json")).context("run `corpus` first")?;
    let manifest = CorpusManifest::from_json(&text)?;
    let bases = manifest
        .scenes
        .iter()
        .map(|s| load_image(dir.join("bases").join(format!("{}.png", s.id))))
        .collect::<msqale::Result<Vec<_>>>()?;
    let prov = provider(run, cfg)?;
    let model = build_pristine_model(&bases, prov.as_ref(), &cfg.pristine_config())?;
    write(&run.join("pristine.model"), model.to_bytes())?;
    println!("pristine: {} features, {} dimensions", model.feature_kind, model.dim());
    Ok(())
}

fn collect_images(root: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_images(root, &p, out)?;
        } else if matches!(
            p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
            Some("png" | "ppm")
        ) {
            let rel = p.strip_prefix(root).unwrap_or(&p);
            let id = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            out.push((id, p));
        }
    }
    Ok(())
}

fn heldout_images(run: &Path) -> Result<Vec<(String, PathBuf)>> {
    let text = fs::read_to_string(run.join("heldout/manifest.json")).context("run `corpus` first")?;
    let manifest = CorpusManifest::from_json(&text)?;
    Ok(manifest
        .scenes
        .iter()
        .flat_map(|s| {
            s.versions.iter().map(move |v| {
                let rel = format!("heldout/{}/{}.png", s.id, v.index);
                (rel.clone(), run.join(rel))
            })
        })
        .collect())
}

fn cmd_score(run: &Path, cfg: &RunConfig, images: Option<&Path>) -> Result<()> {
    let bytes = fs::read(run.join("pristine.model")).context("run `pristine` first")?;
    let model = PristineModel::from_bytes(&bytes)?;
    let files = match images {
        Some(dir) => {
            let mut v = Vec::new();
            collect_images(dir, dir, &mut v)?;
            v
        }
        None => heldout_images(run)?,
    };
    if files.is_empty() {
        bail!("no images to score");
    }
    let loaded = files
        .into_iter()
        .map(|(id, p)| Ok((id, load_image(&p)?)))
        .collect::<Result<Vec<(String, Image)>>>()?;
    let prov = provider(run, cfg)?;
    let rows = score_all(&loaded, &model, prov.as_ref())?;
    write(&run.join("scores.csv"), scores_to_csv(&rows))?;
    println!("score: {} images", rows.len());
    Ok(())
}

fn cmd_eval(run: &Path, cfg: &RunConfig, mos: Option<&Path>) -> Result<()> {
    let scores_path = run.join("scores.csv");
    let rows = scores_from_csv(fs::File::open(&scores_path).context("run `score` first")?)?;
    let mos_path = match mos {
        Some(p) => p.to_path_buf(),
        None if run.join("mos.csv").exists() => run.join("mos.csv"),
        None => run.join("heldout/mos.csv"),
    };
    let table = MosTable::from_csv(fs::File::open(&mos_path).with_context(|| format!("opening {}", mos_path.display()))?)?;
    let summary = scene_split_eval(&oriented_scores(&rows), &table, &cfg.eval_config())?;
    if summary.skipped > 0 {
        log::warn!("{} of {} splits skipped", summary.skipped, cfg.splits);
    }
    let text = eval_to_csv(&summary, &cfg.features);
    write(&run.join("eval.csv"), &text)?;
    print!("{}", text.lines().skip(1).collect::<Vec<_>>().join("\n"));
    println!();
    Ok(())
}

fn cmd_mos(run: &Path, cfg: &RunConfig, ratings: &Path) -> Result<()> {
    let table = RatingTable::from_csv(fs::File::open(ratings).with_context(|| format!("opening {}", ratings.display()))?)?;
    let (mos, dropped, rejected) = process_ratings(&table)?;
    write(&run.join("mos.csv"), format!("{MOS_VERSION_LINE}\n{}", mos.to_csv()))?;
    let mut report = format!("rejected_subjects,{}\n", rejected.join(";"));
    for d in &dropped {
        report.push_str(&format!("dropped_group,{}/{}: {}\n", d.subject_id, d.session_id, d.reason));
    }
    if table.subjects().len() >= 4 {
        let c = split_half_consistency(&table, cfg.split_half_trials, cfg.seed)?;
        report.push_str(&format!("split_half_plcc,{c:.6}\n"));
    }
    write(&run.join("logs/mos.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn run_dir(cli: &Cli, tag: &str) -> PathBuf {
    cli.run_dir.clone().unwrap_or_else(|| {
        let ts = chrono::Local::now().format("%Y%m%d-%H%M%S");
        PathBuf::from("runs").join(format!("{ts}-{tag}"))
    })
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let flags = flag_pairs(&cli).map_err(Failure::Usage)?;
    let tag = flags
        .iter()
        .rev()
        .find(|(k, _)| k == "tag")
        .map(|(_, v)| v.clone())
        .unwrap_or_else(|| RunConfig::default().tag);
    let run = run_dir(&cli, &tag);
    let previous = run.join("config.resolved");
    let cfg = resolve(Layers {
        previous: previous.exists().then_some(previous.as_path()),
        file: cli.config.as_deref(),
        env: std::env::vars().collect(),
        flags,
    })
    .map_err(Failure::Usage)?;

    let body = || -> Result<()> {
        if cfg.jobs > 0 {
            rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build_global()?;
        }
        fs::create_dir_all(run.join("logs")).with_context(|| format!("creating {}", run.display()))?;
        let resolved = to_resolved_text(&cfg)?;
        write(&previous, &resolved)?;
        write(&run.join("logs").join(format!("{}.config.resolved", cli.command.name())), &resolved)?;
        log::info!("run directory {}", run.display());
        match &cli.command {
            Command::Corpus(_) => cmd_corpus(&run, &cfg),
            Command::Train(_) => cmd_train(&run, &cfg),
            Command::Pristine(_) => cmd_pristine(&run, &cfg),
            Command::Score(a) => cmd_score(&run, &cfg, a.images.as_deref()),
            Command::Eval(a) => cmd_eval(&run, &cfg, a.mos.as_deref()),
            Command::Mos(a) => cmd_mos(&run, &cfg, &a.ratings),
        }
    };
    body().map_err(Failure::Runtime)
}

/// One JSON object on stderr.
fn error_line(kind: &str, err: &anyhow::Error) {
    let msg = format!("{err:#}");
    eprintln!("{}", serde_json::json!({ "error": kind, "message": msg }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.verbose {
        "info"
    } else {
        "warn"
    }))
    .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            error_line("usage", &e);
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            error_line("runtime", &e);
            ExitCode::from(1)
        }
    }
}
