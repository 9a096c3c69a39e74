use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fsbed_core::embed::EmbedderSpec;
use fsbed_core::eval::{match_events, read_predictions, EvalConfig, EvalReport, EventInterval};
use fsbed_core::pipeline::{run_benchmark, run_episode, PipelineConfig};
use fsbed_core::synth::{generate_corpus, SynthProfile};
use fsbed_core::task::{parse_annotations, EpisodeManifest, EventLabel};

#[derive(Parser)]
#[command(
    name = "fsbed",
    version,
    about = "Few-shot bioacoustic event detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect events in one recording from its first annotated positives.
    Detect {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        /// JSON config file or preset name (none, ns, nss, al, nss_al).
        #[arg(long)]
        config: Option<String>,
        #[arg(long)]
        out_dir: PathBuf,
        /// JSON embedder spec replacing the configured student.
        #[arg(long)]
        student_embedder: Option<PathBuf>,
        /// JSON embedder spec replacing the configured teacher.
        #[arg(long)]
        teacher_embedder: Option<PathBuf>,
        #[arg(long)]
        shots: Option<usize>,
    },
    /// Run one or more configurations over the test split of a corpus.
    Bench {
        #[arg(long)]
        manifest: PathBuf,
        /// Repeatable; JSON config file or preset name.
        #[arg(long = "config", required = true)]
        configs: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Generate a synthetic corpus.
    Synth {
        /// Repeatable; built-in profile name or JSON profile file.
        #[arg(long = "profile", required = true)]
        profiles: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        n_train: usize,
        #[arg(long, default_value_t = 5)]
        n_test: usize,
    },
    /// Score a predictions CSV against an annotation CSV.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        iou: f64,
        /// Ignore the first N positive references (the support events).
        #[arg(long, default_value_t = 0)]
        skip_shots: usize,
    },
    /// Print a configuration as JSON.
    Config {
        #[arg(long, default_value = "nss_al")]
        preset: String,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_config(arg: Option<&str>) -> Result<PipelineConfig> {
    let Some(arg) = arg else {
        return Ok(PipelineConfig::default());
    };
    let path = Path::new(arg);
    if path.exists() {
        let mut cfg = PipelineConfig::from_json_file(path)?;
        if cfg.name == PipelineConfig::default().name {
            if let Some(stem) = path.file_stem() {
                cfg.name = stem.to_string_lossy().into_owned();
            }
        }
        return Ok(cfg);
    }
    PipelineConfig::ablation(arg)
        .with_context(|| format!("{arg} is neither a config file nor a preset"))
}

fn load_profile(arg: &str) -> Result<SynthProfile> {
    if let Some(p) = SynthProfile::builtin(arg) {
        return Ok(p);
    }
    let path = Path::new(arg);
    if path.exists() {
        return read_json(path);
    }
    bail!(
        "unknown profile {arg}; built-in profiles: {}",
        SynthProfile::builtin_names().join(", ")
    )
}

fn detect(
    wav: PathBuf,
    csv: PathBuf,
    config: Option<String>,
    out_dir: PathBuf,
    student: Option<PathBuf>,
    teacher: Option<PathBuf>,
    shots: Option<usize>,
) -> Result<ExitCode> {
    let mut cfg = load_config(config.as_deref())?;
    if let Some(p) = student {
        cfg.student = read_json::<EmbedderSpec>(&p)?;
    }
    if let Some(p) = teacher {
        cfg.teacher = read_json::<EmbedderSpec>(&p)?;
    }
    cfg.validate()?;
    let recording = wav
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "recording".into());
    let source = EpisodeManifest {
        recording,
        wav_path: wav,
        csv_path: csv,
        n_shots: shots.unwrap_or(cfg.n_shots),
    };
    let report = run_episode(&source, &cfg)?;
    report.write_outputs(&out_dir)?;
    let s = report.eval.overall;
    println!(
        "{}: {} events predicted, precision {:.4} recall {:.4} F {:.4}",
        report.recording_id,
        report.predictions.len(),
        s.precision,
        s.recall,
        s.f_measure
    );
    Ok(ExitCode::SUCCESS)
}

fn bench(manifest: PathBuf, configs: Vec<String>, out_dir: PathBuf) -> Result<ExitCode> {
    let manifest = fsbed_core::synth::CorpusManifest::load(&manifest)?;
    let configs = configs
        .iter()
        .map(|c| load_config(Some(c)))
        .collect::<Result<Vec<_>>>()?;
    let mut names: Vec<&str> = configs.iter().map(|c| c.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        bail!("configuration names must be distinct");
    }
    let report = run_benchmark(&manifest, &configs)?;
    report.write(&out_dir)?;
    print!("{}", report.comparison_table());
    for run in &report.runs {
        for f in &run.failures {
            eprintln!("{}: {}: {}", run.config.name, f.recording, f.message);
        }
    }
    Ok(if report.has_failures() {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

fn synth(
    profiles: Vec<String>,
    seed: u64,
    out_dir: PathBuf,
    n_train: usize,
    n_test: usize,
) -> Result<ExitCode> {
    let profiles = profiles
        .iter()
        .map(|p| load_profile(p))
        .collect::<Result<Vec<_>>>()?;
    let m = generate_corpus(&profiles, n_train, n_test, seed, &out_dir)?;
    println!(
        "wrote {} recordings and {}",
        m.recordings.len(),
        out_dir.join(fsbed_core::synth::MANIFEST_FILE).display()
    );
    Ok(ExitCode::SUCCESS)
}

fn eval(pred: PathBuf, reference: PathBuf, iou: f64, skip_shots: usize) -> Result<ExitCode> {
    let preds = read_predictions(&pred)?;
    let refs: Vec<EventInterval> = parse_annotations(&reference)?
        .iter()
        .filter(|e| e.label == EventLabel::Pos)
        .skip(skip_shots)
        .map(EventInterval::from)
        .collect();
    let cfg = EvalConfig {
        iou_threshold: iou,
        ..EvalConfig::default()
    };
    cfg.validate()?;
    let m = match_events(&preds, &refs, &cfg);
    let name = pred.to_string_lossy().into_owned();
    let report = EvalReport::from_tasks([(name.as_str(), &m)]);
    println!("{}", serde_json::to_string_pretty(&report.overall)?);
    Ok(ExitCode::SUCCESS)
}

/// Error chain joined by colons; core errors already embed their sources.
fn render_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let out = match cli.command {
        Command::Detect {
            wav,
            csv,
            config,
            out_dir,
            student_embedder,
            teacher_embedder,
            shots,
        } => detect(
            wav,
            csv,
            config,
            out_dir,
            student_embedder,
            teacher_embedder,
            shots,
        ),
        Command::Bench {
            manifest,
            configs,
            out_dir,
        } => bench(manifest, configs, out_dir),
        Command::Synth {
            profiles,
            seed,
            out_dir,
            n_train,
            n_test,
        } => synth(profiles, seed, out_dir, n_train, n_test),
        Command::Eval {
            pred,
            reference,
            iou,
            skip_shots,
        } => eval(pred, reference, iou, skip_shots),
        Command::Config { preset } => PipelineConfig::ablation(&preset)
            .with_context(|| format!("unknown preset {preset}"))
            .and_then(|c| {
                println!("{}", serde_json::to_string_pretty(&c)?);
                Ok(ExitCode::SUCCESS)
            }),
    };
    match out {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", render_chain(&e));
            ExitCode::FAILURE
        }
    }
}
