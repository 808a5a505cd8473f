//! `melink` command-line entry point wiring the pipeline:
//! prepare -> enhance -> train -> eval -> ablate / grid -> report.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error. All randomness
//! flows from the config seed (overridable with --seed); file outputs land
//! under --out-dir.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use melink_core::config::RunConfig;
use melink_core::data::{self, SplitName};
use melink_core::dme::{
    DmeOptions, EnhancementCache, FixtureKb, HttpBackend, LlmBackend, MockBackend,
};
use melink_core::encoders::encoder_from_config;
use melink_core::error::{Error, Result};
use melink_core::eval::{
    ablation_sweep, complexity_report, evaluate_split_with_candidates, ABLATION_TOGGLES,
};
use melink_core::model::ModelParams;
use melink_core::training::{
    grad_check, grid_search, load_checkpoint, save_checkpoint, train, write_history, GradComponent,
    GridSpace, TrainData,
};

#[derive(Parser)]
#[command(
    name = "melink",
    version,
    about = "Multimodal entity linking: enhance, train, evaluate, ablate"
)]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed override; every random choice in a run flows from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory receiving every produced file.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    /// Cap on module-level parallelism (mention enhancement).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataPaths {
    /// Training mention file (overrides config train_path).
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation mention file (overrides config valid_path).
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Entity catalog file (overrides config entities_path).
    #[arg(long)]
    entities: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate dataset files; optionally write a low-resource subsample.
    Prepare {
        /// Mention file to load (required unless --synth is given).
        #[arg(long)]
        mentions: Option<PathBuf>,
        /// Which split the file holds (train|valid|test).
        #[arg(long, default_value = "train")]
        split: String,
        /// Entity catalog file (required unless --synth is given).
        #[arg(long)]
        entities: Option<PathBuf>,
        /// Stats-spec file with expected counts.
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Keep only this fraction of the split (uniform, seeded).
        #[arg(long)]
        fraction: Option<f64>,
        /// Generate an N-pair synthetic task (plus a ready config.json)
        /// under the output directory instead of loading files.
        #[arg(long, value_name = "N")]
        synth: Option<usize>,
    },
    /// Enhance mention contexts with LLM-ranked knowledge-base descriptions.
    Enhance {
        /// Input mention file.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output path for the enhanced mention file.
        #[arg(long)]
        out: PathBuf,
        /// KB fixture file (overrides config kb_path).
        #[arg(long)]
        kb: Option<PathBuf>,
        /// Selection cache file, loaded if present and saved back.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Train a model and save the best-validation checkpoint.
    Train {
        #[command(flatten)]
        paths: DataPaths,
    },
    /// Evaluate a checkpoint: metrics report plus top-3 predictions dump.
    Eval {
        /// Checkpoint produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split to evaluate (train|valid|test), resolved from the config.
        #[arg(long, default_value = "test")]
        split: String,
        /// Mention file override for the chosen split.
        #[arg(long)]
        mentions: Option<PathBuf>,
        /// Entity catalog file (overrides config entities_path).
        #[arg(long)]
        entities: Option<PathBuf>,
        /// Candidate override file (one {"mention_id", "candidates"} per line).
        #[arg(long)]
        candidates: Option<PathBuf>,
    },
    /// Train and evaluate the base config plus one variant per toggle.
    Ablate {
        #[command(flatten)]
        paths: DataPaths,
        /// Comma-separated toggles; defaults to all seven.
        #[arg(long)]
        toggles: Option<String>,
    },
    /// Grid search over a hyperparameter space file.
    Grid {
        #[command(flatten)]
        paths: DataPaths,
        /// Space file; defaults to the full published lattice.
        #[arg(long)]
        space: Option<PathBuf>,
        /// Maximum number of candidates to train.
        #[arg(long, default_value_t = 8)]
        budget: usize,
    },
    /// Parameter and FLOP accounting for the active architecture.
    Report {
        /// Count parameters from this checkpoint instead of a fresh init.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        /// projection|coarse_match|fine_match|gated_fuse|contrastive_loss|smoe
        #[arg(long)]
        component: String,
        #[arg(long, default_value_t = 4)]
        dim: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    ExitCode::from(run(&argv))
}

fn run(argv: &[String]) -> u8 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(cli_config: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match cli_config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::with_seed(seed.unwrap_or(0)),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn resolve(flag: Option<PathBuf>, from_config: &Option<String>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| from_config.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::Argument(format!("no {what} given (flag or config entry required)")))
}

fn backend_from_config(cfg: &RunConfig) -> Result<Box<dyn LlmBackend>> {
    match cfg.backend.as_str() {
        "mock" => Ok(Box::new(MockBackend::new(cfg.seed))),
        "http" => {
            let endpoint = cfg.endpoint.as_deref().ok_or_else(|| {
                Error::Argument("http backend needs an endpoint in the config".into())
            })?;
            let model = cfg.model.clone().unwrap_or_else(|| "default".into());
            Ok(Box::new(HttpBackend::new(endpoint, model)?))
        }
        other => Err(Error::Argument(format!("unknown backend {other:?}"))),
    }
}

fn load_train_data<'a>(
    cfg: &RunConfig,
    paths: &DataPaths,
    store: &'a mut Option<(data::DatasetSplit, data::DatasetSplit, data::EntityCatalog)>,
) -> Result<TrainData<'a>> {
    let train_path = resolve(
        paths.train.clone(),
        &cfg.train_path,
        "training mention file",
    )?;
    let valid_path = resolve(
        paths.valid.clone(),
        &cfg.valid_path,
        "validation mention file",
    )?;
    let entities_path = resolve(paths.entities.clone(), &cfg.entities_path, "entity file")?;
    let train = data::load_dataset(&train_path, SplitName::Train)?;
    let valid = data::load_dataset(&valid_path, SplitName::Valid)?;
    let catalog = data::build_entity_catalog(&entities_path)?;
    *store = Some((train, valid, catalog));
    let (train, valid, catalog) = store.as_ref().expect("just stored");
    Ok(TrainData {
        train,
        valid,
        catalog,
    })
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.config, cli.seed)?;
    ensure_out_dir(&cli.out_dir)?;
    match cli.command {
        Command::Prepare {
            mentions,
            split,
            entities,
            stats,
            fraction,
            synth,
        } => {
            let (mentions, entities) = match synth {
                Some(n) => {
                    if n == 0 {
                        return Err(Error::Argument("--synth needs at least 1 pair".into()));
                    }
                    let files =
                        melink_core::synth::write_toy_task(cli.out_dir.join("data"), n, cfg.seed)?;
                    let mut synth_cfg = cfg.clone();
                    synth_cfg.embed_dim = 48;
                    synth_cfg.experts_k = 4;
                    synth_cfg.top_k = 2;
                    synth_cfg.native_dim = 64;
                    synth_cfg.max_text_len = 10;
                    synth_cfg.num_patches = 4;
                    synth_cfg.batch_size = n.min(20);
                    synth_cfg.epochs = 20;
                    synth_cfg.learning_rate = 1e-3;
                    synth_cfg.weight_decay = 0.0;
                    synth_cfg.train_path = Some(files.train_path.display().to_string());
                    synth_cfg.valid_path = Some(files.valid_path.display().to_string());
                    synth_cfg.test_path = Some(files.valid_path.display().to_string());
                    synth_cfg.entities_path = Some(files.entities_path.display().to_string());
                    synth_cfg.kb_path = Some(files.kb_path.display().to_string());
                    let cfg_path = cli.out_dir.join("config.json");
                    synth_cfg.save(&cfg_path)?;
                    println!(
                        "generated a {n}-pair synthetic task under {}; config -> {}",
                        cli.out_dir.join("data").display(),
                        cfg_path.display()
                    );
                    (files.train_path, files.entities_path)
                }
                None => (
                    mentions.ok_or_else(|| {
                        Error::Argument("--mentions is required without --synth".into())
                    })?,
                    entities.ok_or_else(|| {
                        Error::Argument("--entities is required without --synth".into())
                    })?,
                ),
            };
            let split_name = SplitName::from_str(&split)?;
            let loaded = data::load_dataset(&mentions, split_name)?;
            let catalog = data::build_entity_catalog(&entities)?;
            let expected = match stats {
                Some(path) => {
                    let specs = data::load_stats_spec(&path)?;
                    specs.get(&split).cloned().unwrap_or_default()
                }
                None => Default::default(),
            };
            let report = data::validate_dataset(&loaded, &catalog, &expected);
            write_json(&cli.out_dir.join("prepare.report.json"), &report)?;
            println!(
                "{split}: {} mentions ({} with image), {} unresolved gold ids, catalog {} entities \
                 (image coverage {:.4}) -> {}",
                report.mentions.actual,
                report.mentions_with_image.actual,
                report.unresolved_gold_ids,
                catalog.len(),
                catalog.image_coverage(),
                if report.pass { "pass" } else { "FAIL" }
            );
            if let Some(fraction) = fraction {
                let sub = data::subsample_low_resource(&loaded, fraction, cfg.seed)?;
                let out = cli.out_dir.join(format!("{split}.lowres.jsonl"));
                data::save_split(&sub, &out)?;
                println!(
                    "low-resource subsample: {} mentions -> {}",
                    sub.len(),
                    out.display()
                );
            }
            if !report.pass {
                return Err(Error::Integrity("dataset validation failed".into()));
            }
            Ok(())
        }
        Command::Enhance {
            input,
            out,
            kb,
            cache,
        } => {
            let split = data::load_dataset(&input, SplitName::Train)?;
            let kb_path = resolve(kb, &cfg.kb_path, "KB fixture file")?;
            let kb = FixtureKb::load(&kb_path)?;
            let backend = backend_from_config(&cfg)?;
            let cache_path = cache.or_else(|| cfg.cache_path.as_ref().map(PathBuf::from));
            let cache_store = match &cache_path {
                Some(p) if p.exists() => EnhancementCache::load(p)?,
                _ => EnhancementCache::new(),
            };
            let mut options = DmeOptions::from_config(&cfg);
            if let Some(jobs) = cli.jobs {
                options.jobs = jobs.max(1);
            }
            let (enhanced, report) = melink_core::dme::enhance_split(
                &split,
                &kb,
                backend.as_ref(),
                &cache_store,
                &options,
            )?;
            data::save_split(&enhanced, &out)?;
            if let Some(p) = &cache_path {
                cache_store.save(p)?;
            }
            write_json(&cli.out_dir.join("enhance.report.json"), &report)?;
            println!(
                "enhanced {} of {} mentions ({} without candidates, {} fallbacks, {} errors) -> {}",
                report.enhanced,
                report.total,
                report.no_candidates,
                report.fallbacks,
                report.errors,
                out.display()
            );
            Ok(())
        }
        Command::Train { paths } => {
            let mut store = None;
            let data_ref = load_train_data(&cfg, &paths, &mut store)?;
            let encoder = encoder_from_config(&cfg)?;
            let (params, history) = train(&cfg, &data_ref, encoder.as_ref())?;
            let ckpt = cli.out_dir.join("model.ckpt");
            save_checkpoint(&params, &cfg, &ckpt)?;
            write_history(&history, cli.out_dir.join("history.jsonl"))?;
            let best = history.iter().map(|e| e.val_mrr).fold(f64::MIN, f64::max);
            println!(
                "trained {} epochs, best validation MRR {:.4}, checkpoint -> {}",
                history.len(),
                best,
                ckpt.display()
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            split,
            mentions,
            entities,
            candidates,
        } => {
            let split_name = SplitName::from_str(&split)?;
            let mention_path = match split_name {
                SplitName::Train => resolve(mentions, &cfg.train_path, "mention file"),
                SplitName::Valid => resolve(mentions, &cfg.valid_path, "mention file"),
                SplitName::Test => resolve(mentions, &cfg.test_path, "mention file"),
            }?;
            let entities_path = resolve(entities, &cfg.entities_path, "entity file")?;
            let loaded = data::load_dataset(&mention_path, split_name)?;
            let catalog = data::build_entity_catalog(&entities_path)?;
            let params = load_checkpoint(&checkpoint, &cfg)?;
            let encoder = encoder_from_config(&cfg)?;
            let candidate_map = match candidates {
                Some(path) => Some(load_candidates(&path)?),
                None => None,
            };
            let out = evaluate_split_with_candidates(
                &loaded,
                &catalog,
                &params,
                &cfg,
                encoder.as_ref(),
                candidate_map.as_ref(),
            )?;
            let metrics_path = cli.out_dir.join("metrics.json");
            write_json(&metrics_path, &out.metrics.to_file(&cfg.fingerprint()))?;
            let pred_path = cli.out_dir.join("predictions.jsonl");
            let mut w = std::io::BufWriter::new(
                std::fs::File::create(&pred_path)
                    .map_err(|e| Error::io(pred_path.display().to_string(), e))?,
            );
            for p in &out.predictions {
                let line = serde_json::to_string(p).expect("prediction serializes");
                writeln!(w, "{line}").map_err(|e| Error::io(pred_path.display().to_string(), e))?;
            }
            w.flush()
                .map_err(|e| Error::io(pred_path.display().to_string(), e))?;
            println!(
                "{split}: MRR {:.4}  H@1 {:.4}  H@3 {:.4}  H@5 {:.4} over {} mentions -> {}",
                out.metrics.mrr,
                out.metrics.hits1,
                out.metrics.hits3,
                out.metrics.hits5,
                out.metrics.n_mentions,
                metrics_path.display()
            );
            Ok(())
        }
        Command::Ablate { paths, toggles } => {
            let toggle_list: Vec<String> = match toggles {
                Some(csv) => csv.split(',').map(|s| s.trim().to_string()).collect(),
                None => ABLATION_TOGGLES.iter().map(|s| s.to_string()).collect(),
            };
            let mut store = None;
            let data_ref = load_train_data(&cfg, &paths, &mut store)?;
            let encoder = encoder_from_config(&cfg)?;
            let rows = ablation_sweep(
                &cfg,
                &toggle_list,
                &data_ref,
                data_ref.valid,
                encoder.as_ref(),
            )?;
            write_json(&cli.out_dir.join("ablation.json"), &rows)?;
            for row in &rows {
                match (row.mrr, &row.error) {
                    (Some(mrr), _) => {
                        let delta = row
                            .delta_mrr
                            .map(|d| format!(" ({}{:.4})", if d >= 0.0 { "+" } else { "" }, d))
                            .unwrap_or_default();
                        println!("{:<20} MRR {:.4}{delta}", row.variant, mrr);
                    }
                    (None, Some(e)) => println!("{:<20} failed: {e}", row.variant),
                    _ => {}
                }
            }
            Ok(())
        }
        Command::Grid {
            paths,
            space,
            budget,
        } => {
            let space = match space {
                Some(path) => GridSpace::load(&path)?,
                None => GridSpace::full_lattice(),
            };
            let mut store = None;
            let data_ref = load_train_data(&cfg, &paths, &mut store)?;
            let encoder = encoder_from_config(&cfg)?;
            let (best, leaderboard) =
                grid_search(&space, budget, &cfg, &data_ref, encoder.as_ref())?;
            write_json(&cli.out_dir.join("grid.json"), &leaderboard)?;
            best.save(cli.out_dir.join("best_config.json"))?;
            println!(
                "searched {} candidates; best: K={} k={} d={} len={} lr={} (MRR {:.4})",
                leaderboard.len(),
                best.experts_k,
                best.top_k,
                best.embed_dim,
                best.max_text_len,
                best.learning_rate,
                leaderboard
                    .iter()
                    .find_map(|o| o.val_mrr)
                    .unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::Report { checkpoint } => {
            let params = match checkpoint {
                Some(path) => load_checkpoint(&path, &cfg)?,
                None => ModelParams::init(&cfg)?,
            };
            let report = complexity_report(&params, &cfg)?;
            write_json(&cli.out_dir.join("complexity.json"), &report)?;
            println!("{}", report.conventions);
            for row in &report.rows {
                println!(
                    "{:<16} params {:>10}  flops/pair {:>14}",
                    row.variant, row.param_count, row.flops_per_pair
                );
            }
            Ok(())
        }
        Command::Gradcheck {
            component,
            dim,
            eps,
        } => {
            let component = GradComponent::from_str(&component)?;
            let err = grad_check(component, dim, eps)?;
            println!("max relative error: {err:.3e}");
            if err < 1e-4 {
                Ok(())
            } else {
                Err(Error::Numeric(format!(
                    "gradient check failed: max relative error {err:.3e} >= 1e-4"
                )))
            }
        }
    }
}

fn load_candidates(path: &Path) -> Result<HashMap<String, Vec<String>>> {
    #[derive(serde::Deserialize)]
    struct Row {
        mention_id: String,
        candidates: Vec<String>,
    }
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut map = HashMap::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&display, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(&line)
            .map_err(|e| Error::parse(&display, lineno + 1, e.to_string()))?;
        map.insert(row.mention_id, row.candidates);
    }
    Ok(map)
}
