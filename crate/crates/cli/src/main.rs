//! `homogen`: synthesize corpora, generate training shards, run the iterative
//! pipeline, evaluate estimators and inspect samples.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use homogen::estimator::{HomographyEstimator, IdentityEstimator, LkEstimator, RegressorEstimator, RegressorModel};
use homogen::eval::{evaluate_model, load_test_set, write_report};
use homogen::generator::label_residual;
use homogen::imaging::{io, morph, seam_energy, warp_mask, PlaneMask};
use homogen::pipeline::corpus::{load_corpus, save_corpus, synth_corpus, synth_pair};
use homogen::pipeline::shard::load_sample;
use homogen::pipeline::{corpus_for, generate_shard, run, save_generated, test_set_for, EstimatorState, GenConfig};
use homogen::seed::{derive, sample_seed, stream};
use homogen::Error;
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "homogen", version, about = "Iterative realistic dataset generation for homography learning")]
struct Cli {
    /// Configuration file (TOML, or JSON by extension).
    #[arg(long, global = true, env = "HOMOGEN_CONFIG")]
    config: Option<PathBuf>,
    /// Print one JSON object on stdout instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    /// Worker threads for generation and evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic unlabeled corpus, or the labeled test set.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Emit the held-out test set instead of the training corpus.
        #[arg(long)]
        test_set: bool,
    },
    /// Generation phase only: generate, refine and score one shard.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Corpus directory; synthesized from the config when absent.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Estimate H_ts with this regressor instead of Lucas-Kanade.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        no_ccm: bool,
        #[arg(long)]
        no_qam: bool,
        #[arg(long)]
        save_masks: bool,
    },
    /// Full iterative pipeline.
    Run {
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an estimator on a labeled test set.
    Eval {
        /// A regressor `model.json`, or `identity` / `lk`.
        #[arg(long)]
        model: String,
        /// Test-set directory; synthesized from the config when absent.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Label residual, seam energy and quality score of one sample directory.
    Inspect { sample: PathBuf },
}

fn load_config(path: Option<&Path>) -> homogen::Result<GenConfig> {
    let cfg = match path {
        Some(p) => GenConfig::load(p)?,
        None => GenConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(path: &Path) -> homogen::Result<RegressorModel> {
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn synth(cfg: &GenConfig, out: &Path, test_set: bool) -> homogen::Result<Value> {
    if test_set {
        // Same generator and seeds as the test set; save_corpus also writes points.json.
        let seed = derive(&[cfg.master_seed, stream::TEST_SET]);
        cfg.test_set.validate()?;
        let pairs: Vec<_> = (0..cfg.test_set.pairs as u64)
            .map(|i| synth_pair(&cfg.test_set, i, sample_seed(seed, i, 0, stream::TEST_SET)))
            .collect();
        save_corpus(&pairs, out)?;
        return Ok(json!({ "command": "synth", "kind": "test_set", "pairs": pairs.len(), "out": out }));
    }
    let corpus = synth_corpus(&cfg.corpus, derive(&[cfg.master_seed, stream::CORPUS]))?;
    save_corpus(&corpus, out)?;
    Ok(json!({ "command": "synth", "kind": "corpus", "pairs": corpus.len(), "out": out }))
}

fn generate(
    cfg: &GenConfig,
    out: &Path,
    corpus_dir: Option<&Path>,
    model: Option<&Path>,
    flags: (bool, bool, bool),
) -> homogen::Result<Value> {
    let (no_ccm, no_qam, save_masks) = flags;
    let mut cfg = cfg.clone();
    cfg.use_ccm &= !no_ccm;
    cfg.use_qam &= !no_qam;
    cfg.save_masks |= save_masks;
    let corpus = match corpus_dir {
        Some(d) => load_corpus(d)?,
        None => corpus_for(&cfg)?,
    };
    let state = match model {
        Some(p) => EstimatorState::Trained(load_model(p)?),
        None => EstimatorState::Bootstrap,
    };
    let shard = generate_shard(&cfg, &corpus, &state, 0)?;
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    cfg.save(out.join("config.toml"))?;
    save_generated(&cfg, &shard, out)?;
    let summary = json!({
        "command": "generate",
        "generated": shard.outputs.len(),
        "accepted": shard.accepted().count(),
        "quarantined": shard.quarantined,
        "use_ccm": cfg.use_ccm,
        "use_qam": cfg.use_qam,
        "qam": shard.qam,
        "out": out,
    });
    let path = out.join("generate.json");
    fs::write(&path, serde_json::to_vec_pretty(&summary)?).map_err(|e| io_error(&path, e))?;
    Ok(summary)
}

fn run_cmd(cfg: &GenConfig, out: &Path) -> homogen::Result<Value> {
    let result = run(cfg, Some(out))?;
    Ok(json!({
        "command": "run",
        "iterations": result.reports.len(),
        "pme": result.reports.iter().map(|r| r.eval_pme).collect::<Vec<_>>(),
        "identity_pme": result.reports.first().and_then(|r| r.eval_identity_pme),
        "accepted": result.reports.iter().map(|r| r.accepted).collect::<Vec<_>>(),
        "out": out,
    }))
}

fn eval_cmd(cfg: &GenConfig, model: &str, test_dir: Option<&Path>, out: Option<&Path>) -> homogen::Result<Value> {
    let test = match test_dir {
        Some(d) => load_test_set(d)?,
        None => test_set_for(cfg)?,
    };
    let estimator: Box<dyn HomographyEstimator> = match model {
        "identity" => Box::new(IdentityEstimator),
        "lk" => Box::new(LkEstimator { cfg: cfg.lk }),
        path => Box::new(RegressorEstimator {
            model: load_model(Path::new(path))?,
        }),
    };
    let report = evaluate_model(estimator.as_ref(), &test, &cfg.thresholds)?;
    if let Some(dir) = out {
        write_report(&report, dir)?;
    }
    Ok(json!({
        "command": "eval",
        "estimator": estimator.name(),
        "pairs": report.per_pair.len(),
        "mean_pme": report.mean_pme,
        "mean_identity_pme": report.mean_identity_pme,
        "per_category": report.per_category,
        "out": out,
    }))
}

fn inspect(dir: &Path) -> homogen::Result<Value> {
    let sample = load_sample(dir)?;
    let (w, h) = sample.i_s.dims();
    let mask_path = dir.join("mask_source.png");
    let m_s = if mask_path.is_file() {
        io::load_mask(&mask_path)?
    } else {
        PlaneMask::ones(w, h)
    };
    let plane_weight = warp_mask(&m_s, &sample.h_gt)?;
    let residual = label_residual(&sample.i_s, &sample.i_t_prime, &sample.h_gt, &plane_weight)?;
    let region = PlaneMask {
        width: w,
        height: h,
        weights: plane_weight.weights.iter().map(|v| if *v >= 0.5 { 1.0 } else { 0.0 }).collect(),
    };
    let band = morph::boundary_band(&region, 2, None);
    let seam = match seam_energy(&sample.i_t_prime, &band) {
        Ok(v) => Some(v),
        Err(Error::EmptyBand) => None,
        Err(e) => return Err(e),
    };
    Ok(json!({
        "command": "inspect",
        "sample": dir,
        "pair_id": sample.provenance.pair_id,
        "iteration": sample.provenance.iteration,
        "label_residual": residual,
        "seam_energy": seam,
        "quality_score": sample.provenance.quality_score,
        "accepted": sample.provenance.accepted,
    }))
}

fn human(v: &Value) -> String {
    let Value::Object(map) = v else {
        return v.to_string();
    };
    map.iter()
        .filter(|(k, _)| k.as_str() != "command")
        .map(|(k, v)| match v {
            Value::String(s) => format!("{k}: {s}"),
            other => format!("{k}: {other}"),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn execute(cli: &Cli) -> homogen::Result<Value> {
    let cfg = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Synth { out, test_set } => synth(&cfg, out, *test_set),
        Command::Generate {
            out,
            corpus,
            model,
            no_ccm,
            no_qam,
            save_masks,
        } => generate(&cfg, out, corpus.as_deref(), model.as_deref(), (*no_ccm, *no_qam, *save_masks)),
        Command::Run { out } => run_cmd(&cfg, out),
        Command::Eval { model, test, out } => eval_cmd(&cfg, model, test.as_deref(), out.as_deref()),
        Command::Inspect { sample } => inspect(sample),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    let mut logger = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level));
    if !cli.json {
        logger.target(env_logger::Target::Stdout);
    }
    logger.init();

    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }

    match execute(&cli) {
        Ok(v) => {
            if cli.json {
                println!("{v}");
            } else {
                println!("{}", human(&v));
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = if e.is_user_error() { 2 } else { 1 };
            if cli.json {
                println!("{}", json!({ "error": e.to_string(), "exit_code": code }));
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(code)
        }
    }
}
