//! Single binary entry point for the toolkit.
//!
//! Machine-readable payloads go to stdout, diagnostics to stderr. Exit codes:
//! 0 success, 1 usage error, 2 model or I/O error, 3 computation error.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use patternlens::corpus::{analyze_corpus, CorpusOptions};
use patternlens::losses::{total_style_loss, LossWeights};
use patternlens::metrics::evaluate_triple;
use patternlens::repeatability::{pattern_repeatability, RepeatabilityConfig};
use patternlens::{EncoderBackend, Error as CoreError, Image, LayerTap};

#[derive(Parser)]
#[command(name = "patternlens", version, about = "Pattern-repeatability analysis and stylization evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pattern repeatability of one image
    Alpha {
        /// Image file (PNG or JPEG)
        image: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
        #[command(flatten)]
        rep: RepArgs,
        /// Write the report here instead of stdout
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Evaluation metrics for (content, style, stylized) triples
    Eval {
        #[arg(long, requires = "style", requires = "stylized")]
        content: Option<PathBuf>,
        #[arg(long)]
        style: Option<PathBuf>,
        #[arg(long)]
        stylized: Option<PathBuf>,
        /// JSONL manifest of triples, one {"content","style","stylized"} per line
        #[arg(long, conflicts_with_all = ["content", "style", "stylized"])]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
        #[command(flatten)]
        rep: RepArgs,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Weighted loss breakdown for a (content, style, stylized) triple
    Losses {
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        stylized: PathBuf,
        /// Weight overrides, e.g. --weights patch=0,image=2
        #[arg(long, value_delimiter = ',')]
        weights: Vec<String>,
        #[command(flatten)]
        backend: BackendArgs,
        #[command(flatten)]
        rep: RepArgs,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Batch repeatability analysis over an image directory
    Corpus {
        dir: PathBuf,
        /// Worker threads (0 = library default)
        #[arg(long, default_value_t = 0)]
        workers: usize,
        /// Analyze at native resolution instead of resizing to 256x256
        #[arg(long)]
        no_resize: bool,
        /// Output stem: writes <stem>.summary.json and <stem>.records.jsonl
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        #[command(flatten)]
        backend: BackendArgs,
        #[command(flatten)]
        rep: RepArgs,
    },
}

#[derive(Args)]
struct BackendArgs {
    /// Backend selection: "pretrained" or "test:SEED:DEPTH"
    #[arg(long)]
    backend: Option<String>,
    /// ONNX model file for the pretrained backend (or env PATTERNLENS_MODEL)
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct RepArgs {
    /// Patch grid ratio
    #[arg(long = "r", default_value_t = 2)]
    ratio: u32,
    /// Pair-sampling probability in (0, 1]
    #[arg(long = "p", default_value_t = 1.0)]
    probability: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Tap subset, e.g. --taps relu1_1,relu2_1 (default: all backend taps)
    #[arg(long, value_delimiter = ',')]
    taps: Vec<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

enum CliError {
    Usage(String),
    Core(CoreError),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e {
                CoreError::Io(_) | CoreError::Decode(_) | CoreError::ModelLoad(_) => 2,
                _ => 3,
            },
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn build_backend(args: &BackendArgs) -> Result<EncoderBackend, CliError> {
    let spec = args.backend.as_deref().unwrap_or("pretrained");
    if spec == "pretrained" {
        let model = args
            .model
            .clone()
            .or_else(|| std::env::var_os("PATTERNLENS_MODEL").map(PathBuf::from))
            .ok_or_else(|| {
                CliError::Usage(
                    "pretrained backend needs --model <path> or PATTERNLENS_MODEL; \
                     or pick --backend test:SEED:DEPTH"
                        .into(),
                )
            })?;
        return Ok(EncoderBackend::pretrained(model)?);
    }
    if let Some(rest) = spec.strip_prefix("test:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() == 2 {
            if let (Ok(seed), Ok(depth)) = (parts[0].parse::<u64>(), parts[1].parse::<u8>()) {
                return Ok(EncoderBackend::test(seed, depth)?);
            }
        }
    }
    Err(CliError::Usage(format!(
        "unknown backend {spec:?}; expected \"pretrained\" or \"test:SEED:DEPTH\""
    )))
}

fn build_config(
    rep: &RepArgs,
    backend: &EncoderBackend,
) -> Result<RepeatabilityConfig, CliError> {
    let taps = if rep.taps.is_empty() {
        backend.available_taps()
    } else {
        let mut taps = Vec::with_capacity(rep.taps.len());
        for name in &rep.taps {
            let tap = LayerTap::from_name(name)
                .ok_or_else(|| CliError::Usage(format!("unknown tap {name:?}")))?;
            taps.push(tap);
        }
        taps
    };
    let cfg = RepeatabilityConfig {
        ratio: rep.ratio,
        pair_probability: rep.probability,
        seed: rep.seed,
        taps,
    };
    cfg.validate()
        .map_err(|e| CliError::Usage(format!("invalid flags: {e}")))?;
    Ok(cfg)
}

fn emit(payload: &str, output: Option<&Path>) -> Result<(), CliError> {
    match output {
        Some(path) => std::fs::write(path, payload).map_err(CoreError::from)?,
        None => print!("{payload}"),
    }
    Ok(())
}

fn json_line<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string(value).expect("report serializes");
    s.push('\n');
    s
}

#[derive(Serialize, Deserialize)]
struct TripleSpec {
    content: String,
    style: String,
    stylized: String,
}

#[derive(Serialize)]
struct TripleOutcome<'a> {
    content: &'a str,
    style: &'a str,
    stylized: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<patternlens::metrics::EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Alpha {
            image,
            backend,
            rep,
            output,
            format,
        } => {
            let backend = build_backend(&backend)?;
            let cfg = build_config(&rep, &backend)?;
            let img = Image::load(&image)?;
            let report = pattern_repeatability(&img, &backend, &cfg)?;
            let payload = match format {
                Format::Json => json_line(&report),
                Format::Csv => format!(
                    "path,alpha_style,s\n{},{},{}\n",
                    image.display(),
                    report.alpha_style,
                    report.patch_scale
                ),
            };
            emit(&payload, output.as_deref())
        }

        Command::Eval {
            content,
            style,
            stylized,
            manifest,
            backend,
            rep,
            output,
        } => {
            let backend = build_backend(&backend)?;
            let cfg = build_config(&rep, &backend)?;
            if let Some(manifest) = manifest {
                return eval_manifest(&manifest, &backend, &cfg, output.as_deref());
            }
            let (content, style, stylized) = match (content, style, stylized) {
                (Some(c), Some(s), Some(cs)) => (c, s, cs),
                _ => {
                    return Err(CliError::Usage(
                        "eval needs --content/--style/--stylized or --manifest".into(),
                    ))
                }
            };
            let report = evaluate_triple(
                &Image::load(&content)?,
                &Image::load(&style)?,
                &Image::load(&stylized)?,
                &backend,
                &cfg,
            )?;
            emit(&json_line(&report), output.as_deref())
        }

        Command::Losses {
            content,
            style,
            stylized,
            weights,
            backend,
            rep,
            output,
        } => {
            let mut loss_weights = LossWeights::default();
            for spec in &weights {
                let (name, value) = spec.split_once('=').ok_or_else(|| {
                    CliError::Usage(format!("bad weight {spec:?}; expected name=value"))
                })?;
                let value: f64 = value
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad weight value in {spec:?}")))?;
                loss_weights
                    .set(name.trim(), value)
                    .map_err(|e| CliError::Usage(format!("{e}")))?;
            }
            let backend = build_backend(&backend)?;
            let cfg = build_config(&rep, &backend)?;
            let breakdown = total_style_loss(
                &Image::load(&content)?,
                &Image::load(&style)?,
                &Image::load(&stylized)?,
                None,
                &loss_weights,
                &backend,
                &cfg,
            )?;
            emit(&json_line(&breakdown), output.as_deref())
        }

        Command::Corpus {
            dir,
            workers,
            no_resize,
            output,
            format,
            backend,
            rep,
        } => {
            let backend = build_backend(&backend)?;
            let cfg = build_config(&rep, &backend)?;
            let opts = CorpusOptions {
                workers,
                resize_to: if no_resize { None } else { Some((256, 256)) },
            };
            let report = analyze_corpus(&dir, &backend, &cfg, &opts)?;
            let reference = &report.summary.reference;
            eprintln!(
                "analyzed {} images; reference {}: mean {:.2} std {:.2} range [{:.2}, {:.2}]",
                report.summary.count,
                reference.dataset,
                reference.mean,
                reference.std,
                reference.min,
                reference.max
            );

            let summary = json_line(&report.summary);
            match &output {
                Some(stem) => {
                    let stem = stem.as_os_str().to_string_lossy().into_owned();
                    std::fs::write(format!("{stem}.summary.json"), &summary)
                        .map_err(CoreError::from)?;
                    std::fs::write(format!("{stem}.records.jsonl"), report.records_jsonl())
                        .map_err(CoreError::from)?;
                    if format == Format::Csv {
                        std::fs::write(format!("{stem}.csv"), report.records_csv())
                            .map_err(CoreError::from)?;
                    }
                }
                None => print!("{summary}"),
            }
            Ok(())
        }
    }
}

fn eval_manifest(
    manifest: &Path,
    backend: &EncoderBackend,
    cfg: &RepeatabilityConfig,
    output: Option<&Path>,
) -> Result<(), CliError> {
    let text = std::fs::read_to_string(manifest).map_err(CoreError::from)?;
    let mut lines_out = String::new();
    let mut total = 0usize;
    let mut failures = 0usize;
    let mut first_error: Option<CliError> = None;

    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let spec: TripleSpec = match serde_json::from_str(line) {
            Ok(spec) => spec,
            Err(e) => {
                failures += 1;
                eprintln!("manifest line {}: {e}", idx + 1);
                lines_out.push_str(&json_line(&serde_json::json!({
                    "line": idx + 1,
                    "error": e.to_string(),
                })));
                if first_error.is_none() {
                    first_error = Some(CliError::Usage(format!("manifest line {}: {e}", idx + 1)));
                }
                continue;
            }
        };
        let result = Image::load(&spec.content)
            .and_then(|c| Ok((c, Image::load(&spec.style)?)))
            .and_then(|(c, s)| Ok((c, s, Image::load(&spec.stylized)?)))
            .and_then(|(c, s, cs)| evaluate_triple(&c, &s, &cs, backend, cfg));
        let outcome = match result {
            Ok(report) => TripleOutcome {
                content: &spec.content,
                style: &spec.style,
                stylized: &spec.stylized,
                report: Some(report),
                error: None,
            },
            Err(e) => {
                failures += 1;
                let message = e.to_string();
                eprintln!("triple {}: {message}", idx + 1);
                if first_error.is_none() {
                    first_error = Some(CliError::Core(e));
                }
                TripleOutcome {
                    content: &spec.content,
                    style: &spec.style,
                    stylized: &spec.stylized,
                    report: None,
                    error: Some(message),
                }
            }
        };
        lines_out.push_str(&json_line(&outcome));
    }

    if total == 0 {
        return Err(CliError::Usage("manifest has no triples".into()));
    }
    emit(&lines_out, output)?;
    // nonzero exit only when every line failed
    if failures == total {
        return Err(first_error.expect("at least one failure recorded"));
    }
    Ok(())
}
