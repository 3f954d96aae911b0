use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use splitvoice_core::compression::{calibration_batch, distill, quantize_model, AnyCheckpoint};
use splitvoice_core::corpus::{generate_corpus, read_manifest, Corpus, CorpusConfig};
use splitvoice_core::evalmetrics::{abx_score, load_simi_pairs, parse_simi_pairs, segment_items, ssimi_report, wer_report, AbxMode, AbxItem, SSIMI_REFERENCE};
use splitvoice_core::pipeline::{bench, run_pipeline, symbol_embeddings, PipelineConfig, Precision, Stage};
use splitvoice_core::privacy::{Attribute, ProbeConfig, ProbeSets};
use splitvoice_core::quantizers::{export_units, read_units, UnitEncoder, UnitIndex};
use splitvoice_core::training::{train, ModelKind, TrainConfig};
use splitvoice_core::Error;

#[derive(Parser)]
#[command(name = "splitvoice", version, about = "Edge/cloud speech representation toolkit")]
struct Cli {
    /// Overrides the seed of the subcommand's config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config for the subcommand (CorpusConfig, TrainConfig or PipelineConfig).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Also write the JSON report to this file.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the labelled corpus.
    GenCorpus,
    /// Train a model; distill-student also compares against its teacher.
    Train {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Post-training INT8 quantization of a checkpoint.
    QuantizeModel {
        #[arg(long)]
        ckpt: PathBuf,
        /// Manifest (or corpus dir) whose training split calibrates activations.
        #[arg(long)]
        calib: PathBuf,
    },
    /// Write one unit file per utterance plus an index.
    ExportUnits {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Machine ABX error rate over unit sequences, within or across speakers.
    EvalAbx {
        #[arg(long)]
        units: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "within")]
        mode: ModeArg,
    },
    /// Correlation of unit-embedding similarity with reference similarity judgments.
    EvalSsimi {
        #[arg(long)]
        units: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// CSV of `symbol_a,symbol_b,judgment`; defaults to the built-in table.
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Word error rate between reference and hypothesis transcripts.
    EvalWer {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
    },
    /// Held-out accuracy of a logistic probe for speaker or content.
    ProbePrivacy {
        #[arg(long, value_enum)]
        repr: ReprArg,
        #[arg(long, value_enum)]
        attr: AttrArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Run the edge and cloud stages.
    Run(RunArgs),
    /// Repeat the pipeline at FP32 and INT8 and tabulate stage times.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    linguistic: Option<PathBuf>,
    #[arg(long)]
    paralinguistic: Option<PathBuf>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    /// Comma-separated subset of encode,quantize,classify,evaluate.
    #[arg(long, value_delimiter = ',', value_enum)]
    stages: Option<Vec<StageArg>>,
    /// Ship continuous features as well, for the utility baseline.
    #[arg(long)]
    features_baseline: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Within,
    Across,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReprArg {
    Units,
    Paraling,
    Features,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttrArg {
    Speaker,
    Content,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Fp32,
    Int8,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Encode,
    Quantize,
    Classify,
    Evaluate,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(report) => {
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            if let Some(path) = &cli.report {
                if let Err(e) = fs::write(path, &text) {
                    eprintln!("{}", error_json(&anyhow::Error::new(e).context(format!("writing {}", path.display()))));
                    return ExitCode::FAILURE;
                }
            }
            println!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}

fn error_json(e: &anyhow::Error) -> Value {
    let mut body = json!({ "message": format!("{e:#}") });
    if let Some(core) = e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        if let Error::MissingArtifact { stage, path } = core {
            body["kind"] = json!("missing-artifact");
            body["stage"] = json!(stage);
            body["path"] = json!(path);
        } else {
            body["kind"] = json!("library");
        }
    }
    json!({ "error": body })
}

fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
        None => Ok(C::default()),
    }
}

fn require_out(cli: &Cli) -> Result<&Path> {
    match &cli.out {
        Some(p) => Ok(p),
        None => bail!("--out <dir> is required for this subcommand"),
    }
}

fn execute(cli: &Cli) -> Result<Value> {
    let config = cli.config.as_deref();
    match &cli.command {
        Command::GenCorpus => {
            let mut cfg: CorpusConfig = load_config(config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let corpus = generate_corpus(&cfg, require_out(cli)?)?;
            Ok(json!({
                "corpus": cfg,
                "utterances": corpus.records.len(),
                "manifest": corpus.manifest_path(),
            }))
        }
        Command::Train { corpus } => {
            let mut cfg: TrainConfig = load_config(config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let out = require_out(cli)?;
            let corpus = Corpus::open(corpus)?;
            if cfg.kind == ModelKind::DistillStudent {
                let teacher = cfg.teacher.clone().context("distill-student needs a teacher checkpoint in the config")?;
                let (ckpt, report) = distill(&teacher, &cfg, &corpus)?;
                ckpt.save(out)?;
                return Ok(json!({ "train": train_summary(&ckpt), "distill": report }));
            }
            let ckpt = train(&cfg, &corpus)?;
            ckpt.save(out)?;
            Ok(json!({ "train": train_summary(&ckpt) }))
        }
        Command::QuantizeModel { ckpt, calib } => {
            let ckpt = match AnyCheckpoint::load(ckpt)? {
                AnyCheckpoint::Fp32(c) => c,
                AnyCheckpoint::Int8(_) => bail!("{} is already quantized", ckpt.display()),
            };
            let corpus = Corpus::open(calib)?;
            let batch = calibration_batch(&corpus, ckpt.config.train_fraction, cli.seed.unwrap_or(ckpt.config.seed))?;
            let (q, size) = quantize_model(&ckpt, &batch)?;
            q.save(require_out(cli)?)?;
            Ok(serde_json::to_value(size)?)
        }
        Command::ExportUnits { ckpt, corpus } => {
            let model = AnyCheckpoint::load(ckpt)?.linguistic::<f32>()?;
            let corpus = Corpus::open(corpus)?;
            let index = export_units(&corpus, &model, require_out(cli)?)?;
            Ok(json!({
                "codes": index.codes,
                "frame_period_samples": index.frame_period_samples,
                "frame_offset_samples": index.frame_offset_samples,
                "utterances": index.files.len(),
                "frames": index.total_frames(),
            }))
        }
        Command::EvalAbx { units, manifest, mode } => {
            let items = unit_items(units, manifest)?;
            let mode = match mode {
                ModeArg::Within => AbxMode::Within,
                ModeArg::Across => AbxMode::Across,
            };
            Ok(serde_json::to_value(abx_score(&items, mode)?)?)
        }
        Command::EvalSsimi { units, manifest, pairs } => {
            let items = unit_items(units, manifest)?;
            let pairs = match pairs {
                Some(p) => load_simi_pairs(p)?,
                None => parse_simi_pairs(SSIMI_REFERENCE)?,
            };
            Ok(serde_json::to_value(ssimi_report(&symbol_embeddings(&items), &pairs)?)?)
        }
        Command::EvalWer { reference, hyp } => {
            let r = fs::read_to_string(reference).with_context(|| format!("reading {}", reference.display()))?;
            let h = fs::read_to_string(hyp).with_context(|| format!("reading {}", hyp.display()))?;
            Ok(serde_json::to_value(wer_report(&r, &h)?)?)
        }
        Command::ProbePrivacy { repr, attr, ckpt, corpus } => {
            let mut probe: ProbeConfig = load_config(config)?;
            if let Some(seed) = cli.seed {
                probe.seed = seed;
            }
            let corpus = Corpus::open(corpus)?;
            let ckpt = AnyCheckpoint::load(ckpt)?;
            let waves = corpus
                .records
                .iter()
                .map(|r| corpus.load_waveform(r))
                .collect::<splitvoice_core::Result<Vec<_>>>()?;
            let (sets, name) = match repr {
                ReprArg::Units => {
                    let m = ckpt.linguistic::<f32>()?;
                    let units = waves.iter().map(|w| m.units(w)).collect::<splitvoice_core::Result<Vec<_>>>()?;
                    (ProbeSets::from_units(&corpus.records, &units, m.codes(), m.frame_period(), m.frame_offset())?, "units")
                }
                ReprArg::Features => {
                    let m = ckpt.linguistic::<f32>()?;
                    let frames = waves
                        .iter()
                        .map(|w| Ok(m.features(w)?.cast()))
                        .collect::<splitvoice_core::Result<Vec<_>>>()?;
                    (ProbeSets::from_frames(&corpus.records, &frames, m.frame_period(), m.frame_offset())?, "features")
                }
                ReprArg::Paraling => {
                    let m = ckpt.paralinguistic::<f32>()?;
                    (ProbeSets::from_embedder(&corpus.records, &waves, &m)?, "paralinguistic")
                }
            };
            let attr = match attr {
                AttrArg::Speaker => Attribute::Speaker,
                AttrArg::Content => Attribute::Content,
            };
            Ok(serde_json::to_value(sets.probe(attr, &probe, name)?)?)
        }
        Command::Run(args) => {
            let cfg = pipeline_config(cli, args)?;
            Ok(serde_json::to_value(run_pipeline(&cfg)?)?)
        }
        Command::Bench { run, repeats } => {
            let cfg = pipeline_config(cli, run)?;
            Ok(serde_json::to_value(bench(&cfg, *repeats)?)?)
        }
    }
}

fn train_summary(ckpt: &splitvoice_core::training::Checkpoint) -> Value {
    json!({
        "kind": ckpt.config.kind,
        "steps": ckpt.steps,
        "parameters": ckpt.param_count(),
        "initial_loss": ckpt.history.first(),
        "final_loss": ckpt.final_loss,
    })
}

fn unit_items(units: &Path, manifest: &Path) -> Result<Vec<AbxItem>> {
    let index = UnitIndex::load(units)?;
    let records = read_manifest(manifest)?;
    let mut items = Vec::new();
    for record in &records {
        let entry = index
            .files
            .iter()
            .find(|f| f.id == record.id)
            .with_context(|| format!("no unit file for utterance {}", record.id))?;
        let seq: Vec<usize> = read_units(units.join(&entry.file))?.into_iter().map(usize::from).collect();
        items.extend(segment_items(&seq, index.codes, index.frame_period_samples, index.frame_offset_samples, record)?);
    }
    Ok(items)
}

fn pipeline_config(cli: &Cli, args: &RunArgs) -> Result<PipelineConfig> {
    let mut cfg: PipelineConfig = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.probe.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(c) = &args.corpus {
        cfg.corpus = c.clone();
    }
    if let Some(l) = &args.linguistic {
        cfg.linguistic = l.clone();
    }
    if args.paralinguistic.is_some() {
        cfg.paralinguistic = args.paralinguistic.clone();
    }
    if let Some(p) = args.precision {
        cfg.precision = match p {
            PrecisionArg::Fp32 => Precision::Fp32,
            PrecisionArg::Int8 => Precision::Int8,
        };
    }
    if let Some(stages) = &args.stages {
        cfg.stages = stages
            .iter()
            .map(|s| match s {
                StageArg::Encode => Stage::Encode,
                StageArg::Quantize => Stage::Quantize,
                StageArg::Classify => Stage::Classify,
                StageArg::Evaluate => Stage::Evaluate,
            })
            .collect();
    }
    cfg.features_baseline |= args.features_baseline;
    Ok(cfg)
}
