//! Argument parsing and subcommand dispatch.

use crate::config::PipelineConfig;
use crate::manifest::{fresh_run_dir, Run, RunManifest};
use crate::pipeline::{run_pipeline, StageError};
use crate::{read_json, read_jsonl, write_json, write_jsonl};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use halu_core::analysis::{consistency_study, divergence_profile, histogram_svg, position_histogram, profile_svg, CaptionMentions};
use halu_core::annotate::{annotate_corpus, AnnotatedCaption, CaptionRecord, Lexicon, LexiconExtractor, ObjectExtractor};
use halu_core::chair::{evaluate_chair, ChairCaption, GroundTruth, SynonymMap};
use halu_core::classifier::{train, AlwaysAccurate, Dataset, EnsembleFile, FeatureMode, MlpEnsemble, TokenClassifier, TrainConfig};
use halu_core::decoder::{sentence_level_decode, DecodeConfig};
use halu_core::fusion::{read_records, train_fusion, FusionModelFile, TrainFusionConfig};
use halu_core::mock::{MockConfig, MockLvlm, SceneGenerator};
use halu_core::protocol::client::RemoteBackend;
use halu_core::protocol::server::{serve_stdio, serve_tcp};
use halu_core::protocol::LvlmBackend;
use halu_core::text::{tokenize_words, TokenId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Parser, Debug)]
#[command(name = "halu", version, about = "Hallucination-controlled caption decoding toolkit")]
pub struct Cli {
    /// Directory for this run's manifest and default outputs.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Parent of timestamped run directories when --run-dir is absent.
    #[arg(long, global = true, default_value = "runs")]
    pub runs_root: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Serve the mock backend over stdio, a Unix socket or TCP.
    ServeMock(ServeMockArgs),
    /// Label caption tokens ACCURATE / INACCURATE.
    Annotate(AnnotateArgs),
    /// Fit the detector-score fusion model.
    TrainFusion(TrainFusionArgs),
    /// Train the hidden-state classifier ensemble on an HSD1 dataset.
    TrainClassifier(TrainClassifierArgs),
    /// Decode one caption with sentence-level filtering.
    Decode(DecodeArgs),
    /// Score captions with CHAIR.
    EvalChair(EvalChairArgs),
    /// Diagnostics.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Run every stage on the mock backend.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug)]
pub struct ServeMockArgs {
    /// Mock configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Generate this many random scenes in addition to configured ones.
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// `stdio`, `unix:<path>` or `tcp:<addr>`.
    #[arg(long, default_value = "stdio")]
    pub listen: String,
}

#[derive(Args, Debug)]
pub struct AnnotateArgs {
    /// Caption records (JSONL).
    #[arg(long)]
    pub captions: PathBuf,
    /// Detection score records (JSONL).
    #[arg(long)]
    pub scores: PathBuf,
    /// Object lexicon TSV; defaults to the shipped one.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Fusion model file; defaults to the published coefficients.
    #[arg(long)]
    pub fusion: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Tokenize captions lacking tokens by whitespace and punctuation.
    #[arg(long)]
    pub word_tokens: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainFusionArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep the class imbalance instead of downsampling the majority.
    #[arg(long)]
    pub no_downsample: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainClassifierArgs {
    /// HSD1 feature dataset.
    #[arg(long)]
    pub features: PathBuf,
    /// Feature view the dataset was built with: X1_ONLY, X2_ONLY or DIFF.
    #[arg(long, default_value = "DIFF")]
    pub mode: String,
    /// Training configuration (TOML); flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    pub image: String,
    /// `mock`, `mock:<config.toml>`, `unix:<path>`, `tcp:<addr>` or `exec:<cmd>`.
    #[arg(long)]
    pub backend: String,
    /// Classifier model file, or `always-accurate`.
    #[arg(long)]
    pub classifier: String,
    #[arg(long = "K", default_value_t = 3)]
    pub k: usize,
    #[arg(long = "t", default_value_t = 0.5)]
    pub t: f64,
    /// Recorded in the manifest; decoding itself is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 512)]
    pub max_tokens: usize,
    #[arg(long)]
    pub break_on_selected_eos: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalChairArgs {
    /// Captions (JSONL): caption_id, image_id, text, optional mentions.
    #[arg(long)]
    pub captions: PathBuf,
    /// Ground truth JSON: image id to category list.
    #[arg(long)]
    pub gt: PathBuf,
    /// Synonym TSV; defaults to the shipped table plus identity rows for
    /// every ground-truth category.
    #[arg(long)]
    pub synonyms: Option<PathBuf>,
    /// Lexicon TSV used when captions carry no mentions.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum AnalyzeCommand {
    /// JSD between with- and without-image distributions along a caption.
    Jsd {
        #[arg(long)]
        backend: String,
        #[arg(long)]
        image: String,
        /// Comma-separated token ids; defaults to the greedy caption.
        #[arg(long)]
        tokens: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Label proportions by relative token position.
    Positions {
        /// Annotated captions (JSONL).
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Yes/No answers for every mentioned object.
    Consistency {
        #[arg(long)]
        backend: String,
        /// Caption mentions (JSONL): caption_id, image_ref, objects.
        #[arg(long)]
        mentions: PathBuf,
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        fusion: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    /// Pipeline configuration (TOML); HALU_* variables override it.
    #[arg(long, conflicts_with = "from_manifest")]
    pub config: Option<PathBuf>,
    /// Replay the configuration recorded in an earlier run's manifest.
    #[arg(long)]
    pub from_manifest: Option<PathBuf>,
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(&cli, argv) {
        Ok(()) => 0,
        Err(e) => {
            let stage = e.downcast_ref::<StageError>().map(|s| s.stage);
            let body = serde_json::json!({
                "error": {
                    "command": command_name(&cli.command),
                    "stage": stage,
                    "message": format!("{e:#}"),
                }
            });
            eprintln!("{body}");
            1
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::ServeMock(_) => "serve-mock",
        Command::Annotate(_) => "annotate",
        Command::TrainFusion(_) => "train-fusion",
        Command::TrainClassifier(_) => "train-classifier",
        Command::Decode(_) => "decode",
        Command::EvalChair(_) => "eval-chair",
        Command::Analyze(_) => "analyze",
        Command::Pipeline(_) => "pipeline",
    }
}

/// What a run records before it starts.
struct Plan {
    config: serde_json::Value,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<PathBuf>,
}

impl Plan {
    fn new<C: Serialize>(config: &C, inputs: &[&Path]) -> Result<Self> {
        Ok(Self {
            config: serde_json::to_value(config)?,
            seeds: BTreeMap::new(),
            inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
        })
    }

    fn seed(mut self, name: &str, v: u64) -> Self {
        self.seeds.insert(name.to_string(), v);
        self
    }
}

/// Runs `body` inside a manifest-tracked run directory. `body` returns the
/// output paths it wrote, or an error plus whatever it wrote before it.
fn tracked<F>(cli: &Cli, argv: Vec<String>, plan: Plan, body: F) -> Result<()>
where
    F: FnOnce(&Path, &mut Vec<PathBuf>) -> Result<()>,
{
    let dir = match &cli.run_dir {
        Some(d) => d.clone(),
        None => fresh_run_dir(&cli.runs_root)?,
    };
    let inputs: Vec<&Path> = plan.inputs.iter().map(PathBuf::as_path).collect();
    let run = Run::begin(&dir, command_name(&cli.command), argv, plan.config, plan.seeds, &inputs)?;
    let mut outputs = Vec::new();
    let result = body(&dir, &mut outputs);
    let manifest = run.finish(&outputs, result.as_ref().err())?;
    if result.is_ok() {
        tracing::info!(dir = %dir.display(), outputs = manifest.outputs.len(), "run finished");
    }
    result
}

fn out_path(explicit: &Option<PathBuf>, dir: &Path, default: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| dir.join(default))
}

fn load_lexicon(path: &Option<PathBuf>) -> Result<Lexicon> {
    match path {
        Some(p) => {
            let src = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Lexicon::from_tsv(&src).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(Lexicon::shipped()),
    }
}

fn load_fusion(path: &Option<PathBuf>) -> Result<FusionModelFile> {
    match path {
        Some(p) => read_json(p),
        None => Ok(FusionModelFile::published()),
    }
}

/// Opens `mock`, `mock:<config.toml>` in process, or a remote target.
pub fn open_backend(target: &str) -> Result<Arc<dyn LvlmBackend>> {
    if target == "mock" {
        return Ok(Arc::new(default_mock(None, 1)?));
    }
    if let Some(path) = target.strip_prefix("mock:") {
        let cfg: MockConfig = toml::from_str(&std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?)
            .with_context(|| format!("parsing {path}"))?;
        return Ok(Arc::new(MockLvlm::from_config(&cfg)?));
    }
    Ok(Arc::new(RemoteBackend::connect(target)?))
}

/// The default mock with `scenes` generated scenes (10 when `None`).
fn default_mock(scenes: Option<usize>, seed: u64) -> Result<MockLvlm> {
    let cfg = MockConfig {
        generate: Some(SceneGenerator {
            count: scenes.unwrap_or(10),
            seed,
            ..SceneGenerator::default()
        }),
        ..MockConfig::default()
    };
    Ok(MockLvlm::from_config(&cfg)?)
}

#[derive(Deserialize)]
struct ChairInput {
    caption_id: String,
    image_id: String,
    text: String,
    #[serde(default)]
    mentions: Option<Vec<String>>,
}

fn dispatch(cli: &Cli, argv: Vec<String>) -> Result<()> {
    match &cli.command {
        Command::ServeMock(a) => {
            let mut cfg: MockConfig = match &a.config {
                Some(p) => toml::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => MockConfig::default(),
            };
            if let Some(n) = a.scenes {
                cfg.generate = Some(SceneGenerator {
                    count: n,
                    seed: a.seed,
                    ..SceneGenerator::default()
                });
            } else if cfg.scenes.is_empty() && cfg.generate.is_none() {
                cfg.generate = Some(SceneGenerator {
                    count: 10,
                    seed: a.seed,
                    ..SceneGenerator::default()
                });
            }
            let mock = MockLvlm::from_config(&cfg)?;
            if a.listen == "stdio" {
                serve_stdio(&mock)?;
            } else if let Some(addr) = a.listen.strip_prefix("tcp:") {
                serve_tcp(addr, Arc::new(mock))?;
            } else if let Some(path) = a.listen.strip_prefix("unix:") {
                #[cfg(unix)]
                halu_core::protocol::server::serve_unix(Path::new(path), Arc::new(mock))?;
                #[cfg(not(unix))]
                bail!("unix sockets unsupported here: {path}");
            } else {
                bail!("--listen must be stdio, unix:<path> or tcp:<addr>");
            }
            Ok(())
        }
        Command::Annotate(a) => {
            let mut inputs: Vec<&Path> = vec![&a.captions, &a.scores];
            inputs.extend(a.lexicon.as_deref());
            inputs.extend(a.fusion.as_deref());
            let plan = Plan::new(&serde_json::json!({"threshold": a.threshold, "word_tokens": a.word_tokens}), &inputs)?;
            tracked(cli, argv, plan, |dir, outs| {
                let mut captions: Vec<CaptionRecord> = read_jsonl(&a.captions)?;
                if a.word_tokens {
                    for c in &mut captions {
                        if c.tokens.is_none() {
                            c.tokens = Some(tokenize_words(&c.text, |_| None, 0));
                        }
                    }
                }
                let scores = read_records(std::io::BufReader::new(std::fs::File::open(&a.scores)?))?;
                let lexicon = load_lexicon(&a.lexicon)?;
                let model = load_fusion(&a.fusion)?.model();
                let extractor = LexiconExtractor::new(lexicon.clone());
                let corpus = annotate_corpus(&captions, &extractor, &Lexicon::shipped(), &model, &scores, a.threshold)?;
                let out = out_path(&a.out, dir, "annotations.jsonl");
                outs.push(out.clone());
                write_jsonl(&out, &corpus.captions)?;
                let summary = dir.join("annotation_summary.json");
                outs.push(summary.clone());
                write_json(&summary, &corpus.summary)?;
                println!("{}", serde_json::to_string(&corpus.summary)?);
                Ok(())
            })
        }
        Command::TrainFusion(a) => {
            let cfg = TrainFusionConfig {
                folds: a.folds,
                downsample: !a.no_downsample,
                seed: a.seed,
                ..TrainFusionConfig::default()
            };
            let plan = Plan::new(&cfg, &[&a.records])?.seed("fusion", a.seed);
            tracked(cli, argv, plan, |dir, outs| {
                let records = read_records(std::io::BufReader::new(std::fs::File::open(&a.records)?))?;
                let report = train_fusion(&records, &cfg)?;
                let out = out_path(&a.out, dir, "fusion_model.json");
                outs.push(out.clone());
                write_json(&out, &FusionModelFile::from_report(&report))?;
                let rep = dir.join("fusion_report.json");
                outs.push(rep.clone());
                write_json(&rep, &report)?;
                Ok(())
            })
        }
        Command::TrainClassifier(a) => {
            let mode = FeatureMode::parse(&a.mode).with_context(|| format!("unknown feature mode {:?}", a.mode))?;
            let mut cfg: TrainConfig = match &a.config {
                Some(p) => toml::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => TrainConfig::default(),
            };
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(e) = a.epochs {
                cfg.epochs = e;
            }
            let mut inputs: Vec<&Path> = vec![&a.features];
            inputs.extend(a.config.as_deref());
            let plan = Plan::new(&serde_json::json!({"mode": mode, "train": cfg}), &inputs)?.seed("classifier", cfg.seed);
            tracked(cli, argv, plan, |dir, outs| {
                let data = Dataset::read_hsd1(std::io::BufReader::new(std::fs::File::open(&a.features)?))?;
                let (ens, report) = train(&data, mode, &cfg)?;
                let out = out_path(&a.out, dir, "classifier.json");
                outs.push(out.clone());
                write_json(&out, &ens.to_file())?;
                let rep = dir.join("train_report.json");
                outs.push(rep.clone());
                write_json(&rep, &report)?;
                println!("{}", report.test);
                Ok(())
            })
        }
        Command::Decode(a) => {
            let cfg = DecodeConfig {
                k: a.k,
                threshold: a.t,
                max_total_tokens: a.max_tokens,
                break_on_selected_eos: a.break_on_selected_eos,
                ..DecodeConfig::default()
            };
            cfg.validate()?;
            let model_path = (a.classifier != "always-accurate").then(|| PathBuf::from(&a.classifier));
            let mut inputs: Vec<&Path> = Vec::new();
            inputs.extend(model_path.as_deref());
            let plan = Plan::new(&serde_json::json!({"decode": cfg, "backend": a.backend, "image": a.image}), &inputs)?.seed("decode", a.seed);
            tracked(cli, argv, plan, |dir, outs| {
                let backend = open_backend(&a.backend)?;
                let classifier: Box<dyn TokenClassifier> = match &model_path {
                    Some(p) => Box::new(MlpEnsemble::from_file(&read_json::<EnsembleFile>(p)?)?),
                    None => Box::new(AlwaysAccurate),
                };
                let run = sentence_level_decode(backend.as_ref(), classifier.as_ref(), &a.image, &cfg)?;
                let out = out_path(&a.out, dir, "decode_run.json");
                outs.push(out.clone());
                write_json(&out, &run)?;
                println!("{}", run.final_caption);
                Ok(())
            })
        }
        Command::EvalChair(a) => {
            let mut inputs: Vec<&Path> = vec![&a.captions, &a.gt];
            inputs.extend(a.synonyms.as_deref());
            inputs.extend(a.lexicon.as_deref());
            let plan = Plan::new(&serde_json::json!({"recall": "micro"}), &inputs)?;
            tracked(cli, argv, plan, |dir, outs| {
                let rows: Vec<ChairInput> = read_jsonl(&a.captions)?;
                let gt: GroundTruth = read_json(&a.gt)?;
                let syn = match &a.synonyms {
                    Some(p) => SynonymMap::from_tsv(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
                    None => SynonymMap::shipped().with_identity(gt.values().flatten()),
                };
                let extractor = LexiconExtractor::new(load_lexicon(&a.lexicon)?);
                let mut caps = Vec::with_capacity(rows.len());
                for r in rows {
                    let mentions = match r.mentions {
                        Some(m) => m,
                        None => extractor
                            .extract(&r.text)
                            .map_err(|e| anyhow::anyhow!("{}: {e}", r.caption_id))?
                            .into_iter()
                            .map(|o| o.object)
                            .collect(),
                    };
                    caps.push(ChairCaption {
                        caption_id: r.caption_id,
                        image_id: r.image_id,
                        text: r.text,
                        mentions,
                    });
                }
                let result = evaluate_chair(&caps, &gt, &syn);
                let out = out_path(&a.out, dir, "chair.json");
                outs.push(out.clone());
                write_json(&out, &result)?;
                println!("CHAIR_s CHAIR_i Recall Len\n{}", result.table_row());
                if !result.errors.is_empty() {
                    bail!("{} caption(s) excluded: image id missing from ground truth", result.errors.len());
                }
                Ok(())
            })
        }
        Command::Analyze(which) => analyze(cli, argv, which),
        Command::Pipeline(a) => {
            let cfg = match &a.from_manifest {
                Some(p) => {
                    let m: RunManifest = read_json(p)?;
                    if m.command != "pipeline" {
                        bail!("{} records a {:?} run, not a pipeline run", p.display(), m.command);
                    }
                    let cfg: PipelineConfig = serde_json::from_value(m.config).context("manifest config")?;
                    cfg.validate()?;
                    cfg
                }
                None => PipelineConfig::load(a.config.as_deref())?,
            };
            let mut inputs: Vec<&Path> = Vec::new();
            inputs.extend(a.config.as_deref());
            inputs.extend(a.from_manifest.as_deref());
            let mut plan = Plan::new(&cfg, &inputs)?;
            plan.seeds = cfg.seeds();
            tracked(cli, argv, plan, |dir, outs| {
                let summary = run_pipeline(&cfg, dir, outs)?;
                for r in &summary.rows {
                    println!(
                        "{:<8} CHAIR_s {:5.1} CHAIR_i {:5.1} Recall {:5.1} Len {:5.1} tok-halluc {:.3}",
                        r.label,
                        r.chair_s * 100.0,
                        r.chair_i * 100.0,
                        r.recall * 100.0,
                        r.length,
                        r.token_hallucination_rate
                    );
                }
                Ok(())
            })
        }
    }
}

fn analyze(cli: &Cli, argv: Vec<String>, which: &AnalyzeCommand) -> Result<()> {
    match which {
        AnalyzeCommand::Jsd { backend, image, tokens, out, svg } => {
            let plan = Plan::new(&serde_json::json!({"mode": "jsd", "backend": backend, "image": image, "log_base": 2}), &[])?;
            tracked(cli, argv, plan, |dir, outs| {
                let b = open_backend(backend)?;
                let ids: Vec<TokenId> = match tokens {
                    Some(s) => s
                        .split(',')
                        .map(|t| t.trim().parse::<TokenId>().with_context(|| format!("bad token id {t:?}")))
                        .collect::<Result<_>>()?,
                    None => {
                        let info = b.model_info()?;
                        let ctx = halu_core::protocol::SequenceContext::caption(image.as_str(), Vec::new());
                        b.greedy_extend(&ctx, &[info.eos_id], true)?.tokens
                    }
                };
                let prof = divergence_profile(b.as_ref(), image, &ids)?;
                let p = out_path(out, dir, "jsd_profile.json");
                outs.push(p.clone());
                write_json(&p, &prof)?;
                let s = out_path(svg, dir, "jsd_profile.svg");
                outs.push(s.clone());
                std::fs::write(&s, profile_svg(&prof))?;
                Ok(())
            })
        }
        AnalyzeCommand::Positions { annotations, bins, out, svg } => {
            let plan = Plan::new(&serde_json::json!({"mode": "positions", "bins": bins, "bins_closed": "left"}), &[annotations])?;
            tracked(cli, argv, plan, |dir, outs| {
                let caps: Vec<AnnotatedCaption> = read_jsonl(annotations)?;
                // End-of-sequence markers (empty text) are not caption words.
                let labels: Vec<Vec<_>> = caps
                    .into_iter()
                    .map(|c| c.tokens.iter().zip(c.labels).filter(|(t, _)| !t.text.is_empty()).map(|(_, l)| l).collect())
                    .collect();
                let h = position_histogram(&labels, *bins)?;
                let p = out_path(out, dir, "positions.json");
                outs.push(p.clone());
                write_json(&p, &h)?;
                let s = out_path(svg, dir, "positions.svg");
                outs.push(s.clone());
                std::fs::write(&s, histogram_svg(&h))?;
                Ok(())
            })
        }
        AnalyzeCommand::Consistency { backend, mentions, scores, fusion, out } => {
            let mut inputs: Vec<&Path> = vec![mentions];
            inputs.extend(scores.as_deref());
            inputs.extend(fusion.as_deref());
            let plan = Plan::new(&serde_json::json!({"mode": "consistency", "backend": backend}), &inputs)?;
            tracked(cli, argv, plan, |dir, outs| {
                let b = open_backend(backend)?;
                let caps: Vec<CaptionMentions> = read_jsonl(mentions)?;
                let recs = match scores {
                    Some(p) => read_records(std::io::BufReader::new(std::fs::File::open(p)?))?,
                    None => Vec::new(),
                };
                let model = load_fusion(fusion)?.model();
                let r = consistency_study(b.as_ref(), &caps, &model, &recs)?;
                let p = out_path(out, dir, "consistency.json");
                outs.push(p.clone());
                write_json(&p, &r)?;
                println!("no_rate {:.4} over {} answers ({} unparsed)", r.no_rate, r.answered, r.failed);
                Ok(())
            })
        }
    }
}
