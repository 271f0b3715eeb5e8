use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bmt_core::config::{Config, StageOrder};
use bmt_core::data::{AnnotationSet, PredictionSet, SynthDataset, SynthSpec};
use bmt_core::metrics::{evaluate, proposal_prf, MatchMode};
use bmt_core::pipeline::{
    build_vocab, caption_segments, load_caption_checkpoint, load_encoder_params, load_proposal_checkpoint, propose_all,
    resolve_proposal_config, run_ablation, save_caption_checkpoint, save_proposal_checkpoint, train_caption_stage,
    train_proposal_stage, Dataset, EncoderInit, Features,
};
use bmt_core::training::History;
use bmt_core::util::write_atomic;
use bmt_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

/// Bi-modal transformer for dense event captioning over audio and visual features.
#[derive(Parser)]
#[command(name = "bmt", version)]
struct Cli {
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic bi-modal dataset (features, annotations, spec).
    SynthData {
        /// JSON generator spec; defaults apply to missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster training segment lengths into anchors and kernel sizes.
    EstimateAnchors {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Annotations to cluster; defaults to the config's training set.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the captioning model on ground-truth segments.
    TrainCaptioner {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Checkpoint whose encoder initialises this model.
        #[arg(long)]
        encoder_checkpoint: Option<PathBuf>,
        /// Keep the copied encoder fixed.
        #[arg(long, requires = "encoder_checkpoint")]
        freeze_encoder: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the proposal generator.
    TrainProposals {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Checkpoint whose encoder initialises this model.
        #[arg(long)]
        encoder_checkpoint: Option<PathBuf>,
        /// Keep the copied encoder fixed.
        #[arg(long, requires = "encoder_checkpoint")]
        freeze_encoder: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate top-k proposals for every video in a feature directory.
    Propose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features_dir: PathBuf,
        /// Overrides the checkpoint's top-k.
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Caption proposals or ground-truth segments.
    Caption {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features_dir: PathBuf,
        #[arg(long, conflicts_with = "gt", required_unless_present = "gt")]
        proposals: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Also score captions with BLEU@3/4.
        #[arg(long)]
        bleu: bool,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.3, 0.5, 0.7, 0.9])]
        thresholds: Vec<f64>,
        #[arg(long, default_value = "any-overlap")]
        match_mode: MatchMode,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train under every stage order and report caption and proposal scores.
    Ablation {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Annotations to evaluate on; defaults to the training annotations.
        #[arg(long)]
        eval_annotations: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArg {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArg {
    fn load(&self) -> Result<Config> {
        let mut cfg = Config::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

/// Resolved config and training log written next to a checkpoint.
fn write_run_files(out: &Path, cfg: &Config, history: &History) -> Result<()> {
    write_atomic(&sibling(out, ".config.toml"), cfg.to_toml().as_bytes())?;
    write_atomic(&sibling(out, ".log.jsonl"), history.to_jsonl().as_bytes())
}

fn load_train_val(cfg: &Config) -> Result<(Dataset, Option<Dataset>)> {
    let train = Dataset::load(&cfg.data.annotations, &cfg.data.features_dir, cfg)?;
    let val = match &cfg.data.val_annotations {
        Some(p) => Some(Dataset::load(p, &cfg.data.features_dir, cfg)?),
        None => None,
    };
    Ok((train, val))
}

fn encoder_init(store: &Option<bmt_core::tensor::ParamStore>, freeze: bool) -> EncoderInit<'_> {
    match (store, freeze) {
        (None, _) => EncoderInit::Fresh,
        (Some(s), false) => EncoderInit::Copy(s),
        (Some(s), true) => EncoderInit::Frozen(s),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { spec, out } => {
            let spec: SynthSpec = match spec {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                None => SynthSpec::default(),
            };
            let ds = SynthDataset::generate(&spec)?;
            ds.write_to(&out)?;
            println!("wrote {} videos to {}", ds.annotations.len(), out.display());
        }
        Command::EstimateAnchors { cfg, annotations, out } => {
            let cfg = cfg.load()?;
            let ann = AnnotationSet::load(annotations.as_ref().unwrap_or(&cfg.data.annotations))?;
            let resolved = resolve_proposal_config(&cfg, &ann)?;
            let text = serde_json::to_string_pretty(&resolved)? + "\n";
            match out {
                Some(p) => write_atomic(&p, text.as_bytes())?,
                None => print!("{text}"),
            }
        }
        Command::TrainCaptioner {
            cfg,
            encoder_checkpoint,
            freeze_encoder,
            out,
        } => {
            let cfg = cfg.load()?;
            let (train, val) = load_train_val(&cfg)?;
            let vocab = build_vocab(&cfg, &train.annotations)?;
            let enc = encoder_checkpoint.as_deref().map(load_encoder_params).transpose()?;
            let art = train_caption_stage(&cfg, &train, val.as_ref(), &vocab, encoder_init(&enc, freeze_encoder))?;
            save_caption_checkpoint(&out, &cfg, &art)?;
            write_run_files(&out, &cfg, &art.history)?;
            println!(
                "captioner: {} epochs, best loss {:.6} at epoch {}",
                art.history.records.len(),
                art.history.best_val_loss,
                art.history.best_epoch
            );
        }
        Command::TrainProposals {
            cfg,
            encoder_checkpoint,
            freeze_encoder,
            out,
        } => {
            let cfg = cfg.load()?;
            let (train, val) = load_train_val(&cfg)?;
            let pcfg = resolve_proposal_config(&cfg, &train.annotations)?;
            let enc = encoder_checkpoint.as_deref().map(load_encoder_params).transpose()?;
            let art = train_proposal_stage(&cfg, &train, val.as_ref(), &pcfg, encoder_init(&enc, freeze_encoder))?;
            save_proposal_checkpoint(&out, &cfg, &art)?;
            write_run_files(&out, &cfg, &art.history)?;
            println!(
                "proposals: {} epochs, best loss {:.6} at epoch {}",
                art.history.records.len(),
                art.history.best_val_loss,
                art.history.best_epoch
            );
        }
        Command::Propose {
            checkpoint,
            features_dir,
            top_k,
            out,
        } => {
            let (cfg, art) = load_proposal_checkpoint(&checkpoint)?;
            let features = Features::load_dir(&features_dir, None, &cfg)?;
            let preds = propose_all(&art, &features, top_k.unwrap_or(cfg.proposals.top_k))?;
            preds.save(&out)?;
            println!("proposed segments for {} videos", preds.results.len());
        }
        Command::Caption {
            checkpoint,
            features_dir,
            proposals,
            gt,
            out,
        } => {
            let (cfg, art) = load_caption_checkpoint(&checkpoint)?;
            let segments = match (proposals, gt) {
                (Some(p), _) => PredictionSet::load(&p)?.results,
                (None, Some(g)) => Dataset {
                    annotations: AnnotationSet::load(&g)?,
                    features: Features::default(),
                }
                .gt_segments(),
                (None, None) => return Err(Error::Config("one of --proposals or --gt is required".into())),
            };
            let ids = segments.keys().cloned().collect();
            let features = Features::load_dir(&features_dir, Some(ids), &cfg)?;
            let captions = caption_segments(&art, &features, &segments, cfg.model.max_caption_len)?;
            captions.save(&out)?;
            println!("captioned {} videos", captions.results.len());
        }
        Command::Evaluate {
            predictions,
            gt,
            bleu,
            thresholds,
            match_mode,
            out,
        } => {
            let preds = PredictionSet::load(&predictions)?;
            let gt = AnnotationSet::load(&gt)?;
            let report = if bleu {
                evaluate(&preds, &gt, &thresholds, match_mode)?
            } else {
                proposal_prf(&preds, &gt, &thresholds, match_mode)?
            };
            let text = report.to_json();
            if let Some(p) = out {
                write_atomic(&p, text.as_bytes())?;
            }
            print!(
                "precision {:.4} recall {:.4} f1 {:.4}",
                report.precision, report.recall, report.f1
            );
            if let Some(b) = &report.bleu {
                print!(" bleu3 {:.4} bleu4 {:.4}", b.bleu3, b.bleu4);
            }
            println!();
        }
        Command::Ablation {
            cfg,
            eval_annotations,
            out,
        } => {
            let cfg = cfg.load()?;
            let train = Dataset::load(&cfg.data.annotations, &cfg.data.features_dir, &cfg)?;
            let eval_set = match eval_annotations {
                Some(p) => Dataset::load(&p, &cfg.data.features_dir, &cfg)?,
                None => train.clone(),
            };
            let report = run_ablation(&cfg, &train, &eval_set)?;
            let table = report.to_markdown();
            write_atomic(&out, table.as_bytes())?;
            write_atomic(
                &sibling(&out, ".json"),
                (serde_json::to_string_pretty(&report)? + "\n").as_bytes(),
            )?;
            print!("{table}");
            if !report.frozen_encoder_identical {
                return Err(Error::Contract(format!(
                    "frozen encoder differs after {}",
                    StageOrder::CapThenProp.label()
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let reason = e.to_string().replace('\n', " ");
            eprintln!("error: {reason}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
