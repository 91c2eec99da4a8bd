use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use doh_cli::{
    compare, compress, decompress, json_number, kind_name, predictions_to_bytes, rate_json, report_json, sweep,
    train, write_sweep_csv, Checkpoint, SweepSpec, TrainOptions,
};
use doh_core::container::{inspect, rate_report, unpack, Codec, ModelKind};
use doh_core::decoder::DecoderMode;
use doh_core::signal::{CoordinateDataset, Signal};

#[derive(Parser)]
#[command(name = "doh", version, about = "Compress signals as random-hypernetwork neural representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Doh,
    Mlp,
}

impl From<Kind> for ModelKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Doh => ModelKind::Doh,
            Kind::Mlp => ModelKind::Mlp,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CodecArg {
    None,
    Deflate,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecoderArg {
    Materialized,
    Streamed,
}

#[derive(clap::Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 40)]
    width: usize,
    #[arg(long, default_value_t = 9)]
    hidden: usize,
    /// Positional-encoding frequencies (0 disables).
    #[arg(long, default_value_t = 0)]
    pe: usize,
    #[arg(long, default_value_t = 30.0)]
    omega: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Keep projection matrices in memory or regenerate them on use.
    #[arg(long, value_enum)]
    decoder: Option<DecoderArg>,
    /// Print progress lines to stderr.
    #[arg(long)]
    verbose: bool,
}

impl ModelArgs {
    fn options(&self, kind: ModelKind) -> TrainOptions {
        TrainOptions {
            width: self.width,
            hidden: self.hidden,
            pe: self.pe,
            omega: self.omega,
            seed: self.seed,
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            gamma: self.gamma,
            eval_every: self.eval_every,
            decoder: self.decoder.map(|d| match d {
                DecoderArg::Materialized => DecoderMode::Materialized,
                DecoderArg::Streamed => DecoderMode::Streamed,
            }),
            verbose: self.verbose,
            ..TrainOptions::new(kind)
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to an image (.png/.ppm) or occupancy grid (.occ).
    Train {
        #[arg(long)]
        input: PathBuf,
        /// Checkpoint output (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Training report output (JSON); stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "doh")]
        kind: Kind,
        /// Latent dimension; defaults to 30% of the target weight count without
        /// positional encoding.
        #[arg(long)]
        latent_dim: Option<usize>,
        /// Train through a fake quantizer at this bit width.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=16))]
        qat_bits: Option<u8>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Quantize a checkpoint and write a DOH1 container.
    Compress {
        checkpoint: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=16))]
        bits: u8,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "deflate")]
        codec: CodecArg,
    },
    /// Render the signal stored in a container.
    Decompress {
        container: PathBuf,
        /// Rendered signal (.png, .ppm or .occ).
        #[arg(long)]
        out: PathBuf,
        /// Also write raw predictions as little-endian f64.
        #[arg(long)]
        raw_out: Option<PathBuf>,
    },
    /// Compare a rendered signal against a reference.
    Eval {
        rendered: PathBuf,
        reference: PathBuf,
        /// Container the rendering came from, to report bits per pixel.
        #[arg(long)]
        container: Option<PathBuf>,
    },
    /// Train and quantize a grid of models, writing one CSV row per point.
    Sweep {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "doh,mlp")]
        kinds: Vec<Kind>,
        #[arg(long, value_delimiter = ',', required = true)]
        latent_dims: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "4,5,6,8,16",
              value_parser = clap::value_parser!(u8).range(1..=16))]
        bits: Vec<u8>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Describe a container.
    Info { container: PathBuf },
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("no such file: {}", path.display())))
    }
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("values serialize"));
}

fn load_signal(path: &Path) -> Result<Signal, Failure> {
    require_file(path)?;
    Signal::load(path)
        .with_context(|| format!("loading {}", path.display()))
        .map_err(Failure::Runtime)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train {
            input,
            out,
            report,
            kind,
            latent_dim,
            qat_bits,
            model,
        } => {
            let signal = load_signal(&input)?;
            let opts = TrainOptions {
                latent_dim,
                qat_bits,
                ..model.options(kind.into())
            };
            let (ckpt, rep) = train(&signal, &opts)?;
            ckpt.save(&out)?;
            let metric = CoordinateDataset::from_signal(&signal).metric_name();
            let mut value = report_json(&rep, metric);
            value["kind"] = json!(kind_name(ckpt.kind));
            value["latent_dim"] = json!(ckpt.latent_dim());
            match report {
                Some(path) => fs::write(&path, serde_json::to_string_pretty(&value).expect("values serialize"))
                    .with_context(|| format!("writing {}", path.display()))?,
                None => print_json(&value),
            }
        }
        Command::Compress {
            checkpoint,
            bits,
            out,
            codec,
        } => {
            require_file(&checkpoint)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let codec = match codec {
                CodecArg::None => Codec::None,
                CodecArg::Deflate => Codec::Deflate,
            };
            let bytes = compress(&ckpt, bits, codec)?;
            fs::write(&out, &bytes).with_context(|| format!("writing {}", out.display()))?;
            let rate = rate_report(&ckpt.quantize(bits)?, ckpt.shape.pixel_count()).map_err(anyhow::Error::from)?;
            let mut value = rate_json(&rate);
            value["file_bytes"] = json!(bytes.len());
            print_json(&value);
        }
        Command::Decompress {
            container,
            out,
            raw_out,
        } => {
            require_file(&container)?;
            let bytes = fs::read(&container).with_context(|| format!("reading {}", container.display()))?;
            let (_, shape, preds) = decompress(&bytes)?;
            Signal::from_predictions(shape, &preds)
                .and_then(|s| s.save(&out))
                .with_context(|| format!("writing {}", out.display()))?;
            if let Some(raw) = raw_out {
                fs::write(&raw, predictions_to_bytes(&preds)).with_context(|| format!("writing {}", raw.display()))?;
            }
        }
        Command::Eval {
            rendered,
            reference,
            container,
        } => {
            let a = load_signal(&rendered)?;
            let b = load_signal(&reference)?;
            let m = compare(&a, &b)?;
            let mut value = json!({"metric": m.name, "value": json_number(m.value)});
            if let Some(path) = container {
                require_file(&path)?;
                let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
                let (artifact, _) = unpack(&bytes).map_err(anyhow::Error::from)?;
                if let Some(pixels) = a.shape().pixel_count() {
                    let rate = rate_report(&artifact, Some(pixels)).map_err(anyhow::Error::from)?;
                    value["bpp"] = rate.bpp.map(json_number).unwrap_or(json!(null));
                }
            }
            print_json(&value);
        }
        Command::Sweep {
            input,
            out,
            kinds,
            latent_dims,
            bits,
            model,
        } => {
            let signal = load_signal(&input)?;
            let spec = SweepSpec {
                kinds: kinds.into_iter().map(Into::into).collect(),
                latent_dims,
                bits,
                options: model.options(ModelKind::Doh),
            };
            spec.validate().map_err(|e| Failure::Usage(format!("{e:#}")))?;
            let rows = sweep(&signal, &spec)?;
            let file = fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            write_sweep_csv(&rows, file)?;
            let ok = rows.iter().filter(|r| r.status == "ok").count();
            eprintln!("{ok} of {} grid points succeeded", rows.len());
            if ok == 0 {
                return Err(Failure::Runtime(anyhow::anyhow!("every grid point failed")));
            }
        }
        Command::Info { container } => {
            require_file(&container)?;
            let bytes = fs::read(&container).with_context(|| format!("reading {}", container.display()))?;
            let header = inspect(&bytes).map_err(anyhow::Error::from)?;
            let (artifact, _) = unpack(&bytes).map_err(anyhow::Error::from)?;
            let rate = rate_report(&artifact, header.shape.and_then(|s| s.pixel_count())).map_err(anyhow::Error::from)?;
            let mut value = serde_json::to_value(&header).expect("header serializes");
            value["file_bytes"] = json!(bytes.len());
            value["rate"] = rate_json(&rate);
            print_json(&value);
        }
    }
    Ok(())
}

fn configure_threads() {
    if let Ok(v) = std::env::var("DOH_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                // Fails only if a pool already exists, which cannot happen here.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("warning: ignoring DOH_THREADS={v}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
