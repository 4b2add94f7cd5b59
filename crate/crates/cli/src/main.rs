//! `vcaug`: fit the quantizer, train, convert, augment and evaluate.
//!
//! Global options (`--config`, `--preset`) and dotted overrides such as
//! `--training.max_lr 3e-4` may appear anywhere on the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vcaug::augment::{augment_dataset, AugmentContext, AugmentMethod, AugmentPlan, GenderFilter, NoAugmentObserver};
use vcaug::bottleneck::fit_quantizer;
use vcaug::checkpoint::{self, CONFIG_FILE, MODEL_FILE};
use vcaug::config::{Preset, RunConfig};
use vcaug::convert::{ConversionRequest, Converter, IdentityConverter, Utterance, VoiceConverter};
use vcaug::evalsuite::{
    resynthesis_eval, resynthesis_table, speaker_similarity_eval, speaker_table, triples_from_manifest, AsrBackend,
    AsrKind, EmbedderKind, ExternalAsr, ExternalSpeakerEmbedder, MockAsr, ResynthesisSetup, SpeakerEmbedder,
    StandinSpeakerEmbedder,
};
use vcaug::features::{build_backend, encode, SpeechEncoderBackend};
use vcaug::manifest::Manifest;
use vcaug::model::VcModel;
use vcaug::signal::{load_audio, save_audio, MelExtractor};
use vcaug::style::style_from_features;
use vcaug::training::{fit, require_quantizer, FitContext};
use vcaug::vocoder::{build_vocoder, VocoderBackend};
use vcaug::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "vcaug", version, about = "Voice-conversion data augmentation for ASR")]
struct Cli {
    /// JSON run configuration; merged over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Starting point for the configuration: paper or tiny.
    #[arg(long, global = true, default_value = "paper")]
    preset: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit normalization statistics and the k-means codebook.
    FitQuantizer {
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint directory to write stats.json and codebook.json into.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Train the conversion model into a checkpoint directory.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Continue from the state saved in the checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop (and checkpoint) after this many steps.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Convert one utterance into the voice of a reference utterance.
    Convert {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Linear crossfade between chunks instead of plain concatenation.
        #[arg(long)]
        crossfade_ms: Option<f64>,
    },
    /// Expand a manifest with converted and/or SpecAugmented copies.
    Augment(AugmentArgs),
    /// Re-synthesis evaluation: ASR error rates before and after conversion.
    EvalResynth {
        #[arg(long)]
        manifest: PathBuf,
        /// Trained checkpoint; omit together with --identity for the control.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Use the identity converter (control condition).
        #[arg(long)]
        identity: bool,
        /// Reference pool; defaults to the evaluated manifest.
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Speaker-similarity error rate of converted records.
    EvalSpeaker {
        /// Manifest holding converted records and their sources.
        #[arg(long)]
        manifest: PathBuf,
        /// Where the references live; defaults to the same manifest.
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Style-vector utilities.
    Style {
        #[command(subcommand)]
        command: StyleCommand,
    },
    /// Manifest utilities.
    Manifest {
        #[command(subcommand)]
        command: ManifestCommand,
    },
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// JSON augmentation plan; flags below override its fields.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// vc, specaug or vc_then_specaug.
    #[arg(long)]
    method: Option<String>,
    /// Generated records as a percentage of the input count.
    #[arg(long)]
    ratio: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// none, female_only or male_only.
    #[arg(long)]
    gender_filter: Option<String>,
    /// Reference pool manifest for conversion.
    #[arg(long)]
    pool: Option<PathBuf>,
    /// Trained checkpoint, required by the conversion methods.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
enum StyleCommand {
    /// Print a reference's style vector and HGST attention weights as JSON.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum ManifestCommand {
    /// Parse and check a manifest; with --audio also open every file.
    Validate {
        path: PathBuf,
        #[arg(long)]
        audio: bool,
    },
}

/// Split `--section.key value` / `--section.key=value` pairs out of `args`.
fn split_overrides(args: impl IntoIterator<Item = String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--").filter(|b| b.split('=').next().is_some_and(|k| k.contains('.')))
        else {
            rest.push(arg);
            continue;
        };
        match body.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::config(format!("override --{body} needs a value")))?;
                overrides.push((body.to_string(), v));
            }
        }
    }
    Ok((rest, overrides))
}

struct Run {
    config: RunConfig,
}

impl Run {
    /// The effective configuration: preset, then the config file (or, when
    /// none is given, the snapshot stored in `ckpt`), then overrides.
    fn load(cli_config: Option<&Path>, preset: &str, overrides: &[(String, String)], ckpt: Option<&Path>) -> Result<Self> {
        let preset: Preset = preset.parse()?;
        let snapshot = ckpt.map(|d| d.join(CONFIG_FILE)).filter(|p| p.is_file());
        let file = cli_config.map(Path::to_path_buf).or(snapshot);
        let config = RunConfig::load(file.as_deref(), preset, overrides)?;
        Ok(Self { config })
    }

    /// Config snapshot plus version stamp in `dir`.
    fn record(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::write_atomic(&dir.join(CONFIG_FILE), self.config.to_json()?.as_bytes())?;
        checkpoint::write_version(dir)
    }

    fn backend(&self) -> Result<std::sync::Arc<dyn SpeechEncoderBackend>> {
        build_backend(&self.config.features, &self.config.signal)
    }

    fn vocoder(&self) -> Result<std::sync::Arc<dyn VocoderBackend>> {
        build_vocoder(&self.config.vocoder, &self.config.signal)
    }

    fn model(&self, ckpt: &Path) -> Result<VcModel> {
        let path = ckpt.join(MODEL_FILE);
        if !path.is_file() {
            return Err(Error::config(format!(
                "no trained model in {}; run `vcaug train` first",
                ckpt.display()
            )));
        }
        VcModel::load(&self.config.model_config(), &path)
    }

    fn rate(&self) -> u32 {
        self.config.signal.sample_rate
    }
}

fn output_dir(file: &Path) -> &Path {
    file.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

fn utterance(path: &Path, rate: u32) -> Result<Utterance> {
    Ok(Utterance {
        id: path.file_stem().map_or_else(|| "utterance".into(), |s| s.to_string_lossy().into_owned()),
        waveform: load_audio(path, rate)?,
        transcript: String::new(),
    })
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    let load = |ckpt: Option<&Path>| Run::load(cli.config.as_deref(), &cli.preset, overrides, ckpt);
    match cli.command {
        Command::FitQuantizer { manifest, ckpt } => {
            let run = load(None)?;
            let manifest = Manifest::read(&manifest)?;
            let backend = run.backend()?;
            let mut feats = Vec::with_capacity(manifest.len());
            for r in &manifest.records {
                feats.push(encode(&manifest.load_waveform(r, run.rate())?, backend.as_ref(), &r.id)?);
            }
            let q = fit_quantizer(&feats, &run.config.bottleneck)?;
            q.save(&ckpt)?;
            run.record(&ckpt)?;
            tracing::info!(k = q.codebook.k(), utterances = feats.len(), "quantizer written");
            Ok(())
        }
        Command::Train {
            train,
            val,
            ckpt,
            resume,
            max_steps,
        } => {
            let run = load(if resume { Some(&ckpt) } else { None })?;
            require_quantizer(&ckpt)?;
            let (train, val) = (Manifest::read(&train)?, Manifest::read(&val)?);
            run.record(&ckpt)?;
            let backend = run.backend()?;
            let mel = MelExtractor::new(&run.config.signal)?;
            let model = run.config.model_config();
            let ctx = FitContext {
                backend: backend.as_ref(),
                mel: &mel,
                model: &model,
                train: &run.config.training,
            };
            let state = fit(&train, &val, &ctx, &ckpt, resume, max_steps)?;
            print_json(&serde_json::json!({
                "step": state.step,
                "epoch": state.epoch,
                "best_val_loss": state.best_val_loss,
            }))
        }
        Command::Convert {
            ckpt,
            source,
            reference,
            out,
            crossfade_ms,
        } => {
            let mut run = load(Some(&ckpt))?;
            if crossfade_ms.is_some() {
                run.config.convert.crossfade_ms = crossfade_ms;
                run.config.validate()?;
            }
            let quantizer = require_quantizer(&ckpt)?;
            let model = run.model(&ckpt)?;
            let (backend, vocoder) = (run.backend()?, run.vocoder()?);
            let conv = Converter {
                model: &model,
                quantizer: &quantizer,
                backend: backend.as_ref(),
                vocoder: vocoder.as_ref(),
                signal: run.config.signal.clone(),
                config: run.config.convert.clone(),
            };
            let (src, refu) = (utterance(&source, run.rate())?, utterance(&reference, run.rate())?);
            let result = conv.convert(&ConversionRequest {
                source: &src,
                reference: &refu,
                chunk_s: run.config.convert.chunk_s,
                stitch: run.config.convert.stitch(),
            })?;
            save_audio(&out, &result.waveform)?;
            run.record(output_dir(&out))?;
            print_json(&serde_json::json!({
                "out": out,
                "duration_s": result.waveform.duration_s(),
                "per_chunk_frames": result.per_chunk_frames,
                "truncated_chunks": result.truncated_chunks,
                "real_time_factor": result.real_time_factor,
            }))
        }
        Command::Augment(args) => augment(load(args.ckpt.as_deref())?, args),
        Command::EvalResynth {
            manifest,
            ckpt,
            identity,
            pool,
            out_dir,
        } => {
            let run = load(ckpt.as_deref())?;
            let test = Manifest::read(&manifest)?;
            let pool_path = pool.or_else(|| run.config.eval.reference_pool.clone());
            let pool = match &pool_path {
                Some(p) => Manifest::read(p)?,
                None => test.clone(),
            };
            let asr = asr_backend(&run, &test)?;
            let (backend, vocoder) = (run.backend()?, run.vocoder()?);
            let loaded = match (&ckpt, identity) {
                (_, true) => None,
                (Some(dir), false) => Some((run.model(dir)?, require_quantizer(dir)?)),
                (None, false) => return Err(Error::config("eval-resynth needs --ckpt or --identity")),
            };
            let converter: Box<dyn VoiceConverter + '_> = match &loaded {
                None => Box::new(IdentityConverter),
                Some((model, quantizer)) => Box::new(Converter {
                    model,
                    quantizer,
                    backend: backend.as_ref(),
                    vocoder: vocoder.as_ref(),
                    signal: run.config.signal.clone(),
                    config: run.config.convert.clone(),
                }),
            };
            let report = resynthesis_eval(
                &test,
                &ResynthesisSetup {
                    converter: converter.as_ref(),
                    asr: asr.as_ref(),
                    pool: &pool,
                    gender_filter: run.config.eval.gender_filter,
                    seed: run.config.seed,
                    sample_rate: run.rate(),
                },
            )?;
            run.record(&out_dir)?;
            checkpoint::write_json_atomic(&out_dir.join("resynthesis.json"), &report)?;
            print!("{}", resynthesis_table(&report));
            Ok(())
        }
        Command::EvalSpeaker {
            manifest,
            pool,
            out_dir,
        } => {
            let run = load(None)?;
            let converted = Manifest::read(&manifest)?;
            let pool = match &pool {
                Some(p) => Manifest::read(p)?,
                None => converted.clone(),
            };
            let embedder: Box<dyn SpeakerEmbedder> = match run.config.eval.speaker.backend {
                EmbedderKind::Standin => Box::new(StandinSpeakerEmbedder {
                    mel: MelExtractor::new(&run.config.signal)?,
                }),
                EmbedderKind::External => Box::new(ExternalSpeakerEmbedder::new(run.config.eval.speaker.command.clone())?),
            };
            let (ids, triples) = triples_from_manifest(&converted, &pool, embedder.as_ref(), run.rate())?;
            let report = speaker_similarity_eval(&triples)?;
            run.record(&out_dir)?;
            checkpoint::write_json_atomic(
                &out_dir.join("speaker_similarity.json"),
                &serde_json::json!({ "ids": ids, "report": report }),
            )?;
            print!("{}", speaker_table(&report));
            Ok(())
        }
        Command::Style {
            command: StyleCommand::Inspect { ckpt, reference },
        } => {
            let run = load(Some(&ckpt))?;
            let model = run.model(&ckpt)?;
            let backend = run.backend()?;
            let u = utterance(&reference, run.rate())?;
            let f = encode(&u.waveform, backend.as_ref(), &u.id)?;
            let (style, weights) = style_from_features(&f, &model.style, &model.store)?;
            print_json(&serde_json::json!({
                "reference": style.reference_utterance_id,
                "sublayer_weights": weights,
                "style": style.s,
            }))
        }
        Command::Manifest {
            command: ManifestCommand::Validate { path, audio },
        } => {
            let run = load(None)?;
            let m = Manifest::read(&path)?;
            if audio {
                for r in &m.records {
                    m.load_waveform(r, run.rate())?;
                }
            }
            println!("{}: {} records ok", path.display(), m.len());
            Ok(())
        }
    }
}

fn asr_backend(run: &Run, test: &Manifest) -> Result<Box<dyn AsrBackend>> {
    let cfg = &run.config.eval.asr;
    Ok(match cfg.backend {
        AsrKind::Mock => {
            let mut asr = MockAsr::new(
                MelExtractor::new(&run.config.signal)?,
                cfg.mock_base_rate,
                cfg.mock_distortion_gain,
                run.config.seed,
            );
            for r in &test.records {
                asr.register(&r.id, &r.transcript, &test.load_waveform(r, run.rate())?)?;
            }
            Box::new(asr)
        }
        AsrKind::External => Box::new(ExternalAsr::new(cfg.command.clone())?),
    })
}

fn parse_enum<T: serde::de::DeserializeOwned>(flag: &str, raw: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(raw.to_string()))
        .map_err(|_| Error::config(format!("--{flag}: unrecognised value '{raw}'")))
}

fn augment(run: Run, args: AugmentArgs) -> Result<()> {
    let mut plan = match &args.plan {
        Some(p) => checkpoint::read_json::<AugmentPlan>(p).map_err(|e| Error::config(e.to_string()))?,
        None => AugmentPlan {
            method: AugmentMethod::Vc,
            ratio_percent: 100,
            reference_pool: None,
            gender_filter: GenderFilter::None,
            seed: run.config.seed,
        },
    };
    if let Some(m) = &args.method {
        plan.method = parse_enum("method", m)?;
    }
    if let Some(r) = args.ratio {
        plan.ratio_percent = r;
    }
    if let Some(s) = args.seed {
        plan.seed = s;
    }
    if let Some(g) = &args.gender_filter {
        plan.gender_filter = parse_enum("gender-filter", g)?;
    }
    if args.pool.is_some() {
        plan.reference_pool = args.pool.clone();
    }
    plan.validate()?;

    let original = Manifest::read(&args.manifest)?;
    let pool = match &plan.reference_pool {
        Some(p) => Manifest::read(p)?,
        None => original.clone(),
    };
    let mel = MelExtractor::new(&run.config.signal)?;
    let (backend, vocoder) = (run.backend()?, run.vocoder()?);
    let loaded = match (&args.ckpt, plan.method.uses_conversion()) {
        (Some(dir), true) => Some((run.model(dir)?, require_quantizer(dir)?)),
        (None, true) => {
            return Err(Error::config(format!(
                "method {:?} needs --ckpt with a trained model",
                plan.method
            )))
        }
        (_, false) => None,
    };
    let converter = loaded.as_ref().map(|(model, quantizer)| Converter {
        model,
        quantizer,
        backend: backend.as_ref(),
        vocoder: vocoder.as_ref(),
        signal: run.config.signal.clone(),
        config: run.config.convert.clone(),
    });
    let ctx = AugmentContext {
        converter: converter.as_ref().map(|c| c as &dyn VoiceConverter),
        vocoder: vocoder.as_ref(),
        mel: &mel,
        config: &run.config.augment,
    };
    let out = augment_dataset(&original, &pool, &plan, &ctx, &args.out_dir, &NoAugmentObserver)?;
    let path = args.out_dir.join("manifest.jsonl");
    out.write(&path)?;
    run.record(&args.out_dir)?;
    checkpoint::write_json_atomic(&args.out_dir.join("plan.json"), &plan)?;
    println!("{}: {} records ({} generated)", path.display(), out.len(), out.len() - original.len());
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    let (args, overrides) = match split_overrides(std::env::args()) {
        Ok(split) => split,
        Err(e) => {
            eprintln!("vcaug: {e}");
            return ExitCode::from(2);
        }
    };
    // clap exits with 2 on usage errors and 0 for --help/--version.
    let cli = Cli::parse_from(args);
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vcaug: {e}");
            ExitCode::from(if e.is_user_error() { 2 } else { 1 })
        }
    }
}
