use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use diffmark::autodiff::Rng;
use diffmark::codec::{logits_to_bits, WatermarkBits};
use diffmark::config::{reference_document, RunConfig};
use diffmark::dsp::{apply_symmetric_crop, AttackSpec, DitherPdf};
use diffmark::eval::{
    capacity_csv, capacity_table, evaluate_robustness, robustness_attacks, training_intensity_attacks, EvalAttack,
};
use diffmark::gradsuite::run_suite;
use diffmark::io::{inspect, load_model_file, save_model, wav_read, wav_write, Checkpoint};
use diffmark::model::Model;
use diffmark::train::{capacity_sweep, finetune, load_dataset, pretrain, Streams};

#[derive(Parser)]
#[command(name = "diffmark", version, about = "Watermarked speech synthesis with a LoRA-adapted diffusion vocoder")]
struct Cli {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only print results and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus as WAV files.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        clips: Option<usize>,
    },
    /// Train the base vocoder on the denoising objective.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        data: DataArgs,
        /// JSON-lines loss log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Watermark fine-tuning of adapters, encoder and decoder.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Synthesize a watermarked clip conditioned on a corpus clip.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Hex payload (MSB first) or `random`.
        #[arg(long)]
        bits: String,
        #[arg(long)]
        out: PathBuf,
        /// Corpus clip whose mel spectrogram conditions the vocoder.
        #[arg(long, default_value_t = 0)]
        clip: usize,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Apply one distortion to a WAV file.
    Attack(AttackArgs),
    /// Decode the payload from a WAV file.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Robustness table, or the capacity sweep with `--capacity`.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        payloads: Option<usize>,
        /// Attack rows: `robustness` (inference settings and compounds) or
        /// `training` (the training simulator's attacked branches).
        #[arg(long, value_enum, default_value_t = Suite::Robustness)]
        suite: Suite,
        /// Comma-separated payload lengths, e.g. 8,16,32,64.
        #[arg(long, value_delimiter = ',')]
        capacity: Option<Vec<usize>>,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Where the sweep writes one checkpoint per payload length.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Print a checkpoint's manifest and config.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print the configuration reference with every default.
    DefaultConfig,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Suite {
    Robustness,
    Training,
}

#[derive(Args)]
struct DataArgs {
    /// Directory of WAV files to segment instead of the synthetic corpus.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    /// none, gaussian_noise, echo, rear_crop, dither, lowpass, bandpass,
    /// pink_noise or time_stretch.
    #[arg(long)]
    kind: String,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20.0)]
    snr_db: f64,
    #[arg(long, default_value_t = 0.4)]
    attenuation: f64,
    #[arg(long, default_value_t = 100.0)]
    delay_ms: f64,
    #[arg(long, default_value_t = 0.25)]
    rate: f64,
    #[arg(long, default_value = "tpdf")]
    pdf: String,
    #[arg(long, default_value_t = 3000.0)]
    cutoff_hz: f64,
    #[arg(long, default_value_t = 300.0)]
    low_hz: f64,
    #[arg(long, default_value_t = 8000.0)]
    high_hz: f64,
    #[arg(long, default_value_t = 0.5)]
    level: f64,
    #[arg(long, default_value_t = 1.25)]
    factor: f64,
    /// With `rear_crop`, split the removed samples between front and rear.
    #[arg(long)]
    symmetric: bool,
}

impl AttackArgs {
    fn spec(&self) -> Result<AttackSpec> {
        let spec = match self.kind.as_str() {
            "none" => AttackSpec::None,
            "gaussian_noise" => AttackSpec::GaussianNoise { snr_db: self.snr_db },
            "echo" => AttackSpec::Echo {
                attenuation: self.attenuation,
                delay_ms: self.delay_ms,
            },
            "rear_crop" => AttackSpec::RearCrop { rate: self.rate },
            "dither" => AttackSpec::Dither {
                pdf: match self.pdf.as_str() {
                    "rpdf" => DitherPdf::Rpdf,
                    "tpdf" => DitherPdf::Tpdf,
                    other => bail!(UsageError(format!("unknown dither pdf `{other}`"))),
                },
            },
            "lowpass" => AttackSpec::Lowpass { cutoff_hz: self.cutoff_hz },
            "bandpass" => AttackSpec::Bandpass {
                low_hz: self.low_hz,
                high_hz: self.high_hz,
            },
            "pink_noise" => AttackSpec::PinkNoise { level: self.level },
            "time_stretch" => AttackSpec::TimeStretch { factor: self.factor },
            other => bail!(UsageError(format!("unknown attack kind `{other}`"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<diffmark::Error>() {
            return e.exit_code() as u8;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Loads a checkpoint; `--config` replaces its training sections but must
/// describe the same architecture.
fn load_checkpoint(cli: &Cli, path: &Path) -> Result<Model> {
    let mut model = load_model_file(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(p) = &cli.config {
        let cfg = RunConfig::load(p)?;
        let m = &model.config;
        if (&cfg.audio, &cfg.schedule, &cfg.vocoder, &cfg.codec, &cfg.lora) != (&m.audio, &m.schedule, &m.vocoder, &m.codec, &m.lora) {
            bail!(UsageError(format!(
                "{} describes a different architecture than {}",
                p.display(),
                path.display()
            )));
        }
        model.config = cfg;
    }
    if let Some(s) = cli.seed {
        model.config.seed = s;
    }
    Ok(model)
}

fn open_log(path: Option<&PathBuf>) -> Result<Option<fs::File>> {
    path.map(|p| fs::File::create(p).with_context(|| format!("creating {}", p.display())))
        .transpose()
}

/// Hex payload padded with zero bits up to `len`. Returns the payload and
/// the number of padding bits.
fn parse_payload(hex: &str, len: usize, rng: &mut Rng) -> Result<(WatermarkBits, usize)> {
    if hex == "random" {
        return Ok((WatermarkBits::random(len, rng)?, 0));
    }
    let hex = hex.trim_start_matches("0x");
    let given = hex.len() * 4;
    if hex.is_empty() || hex.len() > len.div_ceil(4) {
        bail!(UsageError(format!("a {len}-bit payload takes 1 to {} hex digits", len.div_ceil(4))));
    }
    if given >= len {
        return Ok((WatermarkBits::from_hex(hex, len).map_err(|e| UsageError(e.to_string()))?, 0));
    }
    let head = WatermarkBits::from_hex(hex, given).map_err(|e| UsageError(e.to_string()))?;
    let mut bits = head.bits().to_vec();
    bits.resize(len, 0);
    Ok((WatermarkBits::new(bits)?, len - given))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::SynthData { out, clips } => {
            let mut cfg = base_config(cli)?;
            if let Some(n) = clips {
                cfg.data.n_clips = *n;
            }
            cfg.data.data_dir = None;
            cfg.validate()?;
            let data = load_dataset(&cfg, None)?;
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            for (i, clip) in data.clips.iter().enumerate() {
                wav_write(&out.join(format!("clip_{i:04}.wav")), clip)?;
            }
            println!("{} clips of {} samples, sha256 {}", data.len(), data.clip_len(), data.hash());
        }
        Command::Pretrain { out, steps, data, log } => {
            let mut cfg = base_config(cli)?;
            if let Some(s) = steps {
                cfg.pretrain.steps = *s;
            }
            let dataset = load_dataset(&cfg, data.data_dir.as_deref())?;
            let mut streams = Streams::new(cfg.seed);
            let mut model = Model::new(&cfg, &mut streams.init)?;
            let mut sink = open_log(log.as_ref())?;
            let every = cfg.pretrain.log_every.max(1);
            let mut io_err = None;
            pretrain(&mut model, &dataset, &mut streams.pretrain, |step, loss| {
                if let Some(f) = sink.as_mut() {
                    if let Err(e) = writeln!(f, "{}", json!({"step": step, "loss": loss})) {
                        io_err.get_or_insert(e);
                    }
                }
                if step % every == 0 || step + 1 == cfg.pretrain.steps {
                    log::info!("pretrain step {step}: loss {loss:.5}");
                }
            })?;
            if let Some(e) = io_err {
                return Err(e).context("writing the training log");
            }
            save_model(&model, out)?;
            println!("saved {}", out.display());
        }
        Command::Finetune {
            checkpoint,
            out,
            steps,
            data,
            log,
        } => {
            let mut model = load_checkpoint(cli, checkpoint)?;
            if let Some(s) = steps {
                model.config.sdft.steps = *s;
            }
            let dataset = load_dataset(&model.config, data.data_dir.as_deref())?;
            let mut streams = Streams::new(model.config.seed);
            let mut sink = open_log(log.as_ref())?;
            let every = model.config.sdft.log_every.max(1);
            let total = model.config.sdft.steps;
            let mut io_err = None;
            finetune(&mut model, &dataset, &mut streams.finetune, |r| {
                if let Some(f) = sink.as_mut() {
                    if let Err(e) = writeln!(f, "{}", r.to_json_line()) {
                        io_err.get_or_insert(e);
                    }
                }
                if r.step % every == 0 || r.step + 1 == total {
                    log::info!(
                        "finetune step {}: wea {:.4} mel {:.2} stft {:.2} total {:.4}",
                        r.step,
                        r.l_wea,
                        r.l_mel,
                        r.l_stft,
                        r.l_total
                    );
                }
            })?;
            if let Some(e) = io_err {
                return Err(e).context("writing the training log");
            }
            save_model(&model, out)?;
            println!("saved {}", out.display());
        }
        Command::Generate {
            checkpoint,
            bits,
            out,
            clip,
            data,
        } => {
            let model = load_checkpoint(cli, checkpoint)?;
            let dataset = load_dataset(&model.config, data.data_dir.as_deref())?;
            let source = dataset
                .clips
                .get(*clip)
                .ok_or_else(|| UsageError(format!("clip {clip} is out of range (corpus has {})", dataset.len())))?;
            let mut rng = Rng::new(model.config.seed);
            let (payload, padding) = parse_payload(bits, model.payload_bits(), &mut rng)?;
            let cond = model.conditioning(&[source])?;
            let clips = model.synthesize(Some(std::slice::from_ref(&payload)), &cond, &mut rng)?;
            wav_write(out, &clips[0])?;
            let meta = json!({
                "payload_hex": payload.to_hex(),
                "payload_bits": payload.len(),
                "padding_bits": padding,
                "seed": model.config.seed,
                "clip": clip,
                "checkpoint": checkpoint.display().to_string(),
            });
            let meta_path = PathBuf::from(format!("{}.json", out.display()));
            fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
                .with_context(|| format!("writing {}", meta_path.display()))?;
            println!("{} {}", payload.to_hex(), payload);
        }
        Command::Attack(args) => {
            let spec = args.spec()?;
            let clip = wav_read(&args.input)?;
            let seed = cli.seed.unwrap_or(base_config(cli)?.seed);
            let (attacked, label) = match spec {
                AttackSpec::RearCrop { rate } if args.symmetric => {
                    (apply_symmetric_crop(&clip, rate)?, format!("SC {}%", rate * 100.0))
                }
                _ => (spec.apply(&clip, &mut Rng::new(seed))?, spec.label()),
            };
            wav_write(&args.out, &attacked)?;
            println!("{label} -> {} ({} samples)", args.out.display(), attacked.len());
        }
        Command::Extract { checkpoint, input } => {
            let model = load_checkpoint(cli, checkpoint)?;
            let clip = wav_read(input)?;
            let logits = model.extract_logits(&clip)?;
            let bits = logits_to_bits(&logits)?;
            // Mean distance of the bit probabilities from 1/2, scaled to [0, 1].
            let confidence =
                logits.iter().map(|z| (2.0 / (1.0 + (-z).exp()) - 1.0).abs()).sum::<f64>() / logits.len() as f64;
            println!("{} {} confidence {confidence:.4}", bits.to_hex(), bits);
        }
        Command::Evaluate {
            checkpoint,
            payloads,
            suite,
            capacity,
            csv,
            out_dir,
            data,
            log,
        } => {
            let mut model = load_checkpoint(cli, checkpoint)?;
            if let Some(n) = payloads {
                model.config.eval.payloads = *n;
            }
            let dataset = load_dataset(&model.config, data.data_dir.as_deref())?;
            match capacity {
                None => {
                    let seed = Streams::new(model.config.seed).eval_seed;
                    let attacks = match suite {
                        Suite::Robustness => robustness_attacks(),
                        Suite::Training => {
                            let mut v = vec![EvalAttack::Single(AttackSpec::None)];
                            v.extend(training_intensity_attacks());
                            v
                        }
                    };
                    let report = evaluate_robustness(&model, &dataset, &attacks, model.config.eval.payloads, seed)?;
                    print!("{}", report.to_table());
                    if let Some(p) = csv {
                        fs::write(p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?;
                    }
                }
                Some(caps) => {
                    if caps.is_empty() {
                        bail!(UsageError("--capacity needs at least one payload length".into()));
                    }
                    let mut sink = open_log(log.as_ref())?;
                    let mut io_err = None;
                    let results = capacity_sweep(&model, &dataset, caps, |bits, r| {
                        if let Some(f) = sink.as_mut() {
                            if let Err(e) = writeln!(f, "{{\"payload_bits\":{bits},\"report\":{}}}", r.to_json_line()) {
                                io_err.get_or_insert(e);
                            }
                        }
                        if r.step % model.config.sdft.log_every.max(1) == 0 {
                            log::info!("l={bits} step {}: wea {:.4}", r.step, r.l_wea);
                        }
                    })?;
                    if let Some(e) = io_err {
                        return Err(e).context("writing the training log");
                    }
                    let rows: Vec<_> = results.iter().map(|(_, r)| r.clone()).collect();
                    if let Some(dir) = out_dir {
                        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                        for (m, r) in &results {
                            save_model(m, &dir.join(format!("capacity_{}.sldo", r.payload_bits)))?;
                        }
                    }
                    print!("{}", capacity_table(&rows));
                    if let Some(p) = csv {
                        fs::write(p, capacity_csv(&rows)).with_context(|| format!("writing {}", p.display()))?;
                    }
                }
            }
        }
        Command::Gradcheck => {
            let seed = cli.seed.unwrap_or(1234);
            let results = run_suite(seed)?;
            let mut failed = 0;
            for r in &results {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!("{:<36} {:>10.3e}  (< {:.0e})  {verdict}", r.name, r.rel_err, r.tolerance);
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(diffmark::Error::GradCheck(format!("{failed} of {} checks failed", results.len())).into());
            }
            println!("{} checks passed", results.len());
        }
        Command::Inspect { checkpoint } => {
            let bytes = fs::read(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
            let (config, manifest) = inspect(&bytes)?;
            let ckpt = Checkpoint::from_bytes(&bytes)?;
            let total: usize = manifest.iter().map(|e| e.shape.iter().product::<usize>()).sum();
            for e in &manifest {
                println!("{:<40} {:?}", e.name, e.shape);
            }
            println!("{} tensors, {total} values", ckpt.tensors.len());
            println!("{config}");
        }
        Command::DefaultConfig => {
            println!("{}", reference_document());
        }
    }
    Ok(())
}
