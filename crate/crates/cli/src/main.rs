use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use hsc::editing::{
    edit_image, load_directions, pca_directions, save_directions, style_mix, EditOptions,
};
use hsc::entropy_analysis::demo_report;
use hsc::harness::bd::bd_metric;
use hsc::harness::ppm::{read_ppm, write_ppm};
use hsc::harness::sweep::{
    plot_svg, rd_sweep, read_curve_csv, sweep_curve, toy_images, write_sweep_csv, SweepConfig,
};
use hsc::harness::HscBitstream;
use hsc::pipeline::{Codec, CodecConfig};
use hsc::training::{stage_windows, train, write_loss_log, Stage, TrainConfig, TrainSchedule};

#[derive(Parser)]
#[command(
    name = "hsc",
    version,
    about = "Two-stream semantic image codec over a toy style generator"
)]
struct Cli {
    /// Model file; a freshly initialized model (from --seed) when absent.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Seed for model initialization and sampled data.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress a 32x32 PPM image.
    Encode {
        image: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Send only the semantic stream.
        #[arg(long)]
        semantics_only: bool,
    },
    /// Reconstruct a PPM image from a stream.
    Decode {
        stream: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Decode a stream with its semantic codes shifted along a direction.
    Edit {
        stream: PathBuf,
        /// Direction file written by `hsc directions`.
        #[arg(long)]
        direction: PathBuf,
        /// Which direction in the file.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, allow_hyphen_values = true)]
        magnitude: f64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Principal directions of the semantic codes.
    Directions {
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Style codes of one stream with the content feature of another.
    Mix {
        style: PathBuf,
        content: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Draw a toy image from the model's generator.
    Sample {
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train a model from a TOML configuration.
    Train {
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// CSV loss log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// RD sweep with CSV, SVG and an optional BD comparison.
    Eval {
        config: PathBuf,
        /// Output directory.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Entropy identities on the built-in examples.
    EntropyDemo,
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn codec(cli: &Cli) -> Result<Codec> {
    match &cli.model {
        Some(path) => {
            Codec::load(path).with_context(|| format!("loading model {}", path.display()))
        }
        None => Ok(Codec::init(CodecConfig {
            seed: cli.seed,
            ..Default::default()
        })?),
    }
}

fn read_stream(path: &Path) -> Result<HscBitstream> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    HscBitstream::from_bytes(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Encode {
            image,
            output,
            semantics_only,
        } => {
            let codec = codec(&cli)?;
            let x = read_ppm(image).with_context(|| format!("reading {}", image.display()))?;
            let enc = codec.encode(&x, *semantics_only)?;
            let bytes = enc.stream.to_bytes();
            fs::write(output, &bytes)?;
            let bpp = enc.stream.bpp(x.shape()[1], x.shape()[2])?;
            println!("{} bytes, {bpp:.4} bpp", bytes.len());
        }
        Command::Decode { stream, output } => {
            let x = codec(&cli)?.decode(&read_stream(stream)?)?;
            write_ppm(output, &x)?;
        }
        Command::Edit {
            stream,
            direction,
            index,
            magnitude,
            output,
        } => {
            let dirs = load_directions(direction)?;
            let Some(dir) = dirs.get(*index) else {
                bail!(
                    "{} holds {} directions, no index {index}",
                    direction.display(),
                    dirs.len()
                );
            };
            let x = edit_image(
                &codec(&cli)?,
                &read_stream(stream)?,
                &dir.with_magnitude(*magnitude),
                &EditOptions::default(),
            )?;
            write_ppm(output, &x)?;
        }
        Command::Directions {
            count,
            samples,
            output,
        } => {
            let dirs = pca_directions(&codec(&cli)?, *samples, *count, cli.seed)?;
            save_directions(output, &dirs)?;
        }
        Command::Mix {
            style,
            content,
            output,
        } => {
            let x = style_mix(&codec(&cli)?, &read_stream(style)?, &read_stream(content)?)?;
            write_ppm(output, &x)?;
        }
        Command::Sample { output } => {
            let codec = codec(&cli)?;
            write_ppm(output, &toy_images(&codec, 1, cli.seed)?[0])?;
        }
        Command::Train {
            config,
            output,
            log,
        } => {
            let cfg = TrainConfig::load(config)
                .with_context(|| format!("reading {}", config.display()))?;
            let start = match &cli.model {
                Some(_) => codec(&cli)?,
                None => Codec::init(cfg.codec.clone())?,
            };
            let images = toy_images(&start, cfg.data.train_size, cfg.data.seed)?;
            let out = train(&start, &cfg.schedule, &cfg.weights, &images)?;
            out.codec.save(output)?;
            if let Some(path) = log {
                write_loss_log(&out.log, fs::File::create(path)?)?;
            }
            for stage in Stage::ALL {
                if let Some((first, last)) = stage_windows(&out.log, stage) {
                    println!("{stage}: loss {first:.4} -> {last:.4}");
                }
            }
        }
        Command::Eval { config, output } => eval(&cli, config, output)?,
        Command::EntropyDemo => print!("{}", demo_report()?),
    }
    Ok(())
}

fn eval(cli: &Cli, config: &Path, out_dir: &Path) -> Result<()> {
    let text =
        fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let cfg = SweepConfig::from_toml(&text)?;
    let train_cfg = &cfg.train;
    let base = match (&cfg.base_model, &cli.model) {
        (Some(path), _) | (None, Some(path)) => {
            Codec::load(path).with_context(|| format!("loading {}", path.display()))?
        }
        (None, None) => {
            let fresh = Codec::init(train_cfg.codec.clone())?;
            let images = toy_images(&fresh, train_cfg.data.train_size, train_cfg.data.seed)?;
            let gie_only = TrainSchedule {
                rd_steps: 0,
                joint_steps: 0,
                ..train_cfg.schedule.clone()
            };
            train(&fresh, &gie_only, &train_cfg.weights, &images)?.codec
        }
    };
    let train_images = toy_images(&base, train_cfg.data.train_size, train_cfg.data.seed)?;
    let eval_images = toy_images(&base, cfg.eval_size, cfg.eval_seed)?;
    let rows = rd_sweep(
        &base,
        &train_cfg.weights,
        &train_cfg.schedule,
        &cfg.lambdas,
        &train_images,
        &eval_images,
    )?;

    fs::create_dir_all(out_dir)?;
    write_sweep_csv(&rows, fs::File::create(out_dir.join("sweep.csv"))?)?;
    for r in &rows {
        println!(
            "lambda {}: {:.4} bpp, feature mse {:.5}, {} {:.5}",
            r.lambda,
            r.summary.bpp,
            r.summary.feature_mse,
            cfg.metric,
            r.summary
                .metrics
                .get(&cfg.metric)
                .copied()
                .unwrap_or(f64::NAN)
        );
    }
    let curve = sweep_curve(&rows)?;
    let reference = match &cfg.reference {
        Some(path) => {
            let file =
                fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
            Some(read_curve_csv(file)?)
        }
        None => None,
    };
    let mut plotted = vec![("sweep", &curve)];
    if let Some(r) = &reference {
        plotted.push(("reference", r));
    }
    fs::write(out_dir.join("curve.svg"), plot_svg(&plotted, &cfg.metric)?)?;
    if let Some(r) = &reference {
        let gap = bd_metric(r, &curve, &cfg.metric)?;
        println!("BD-{} against reference: {gap:+.5}", cfg.metric);
    }
    Ok(())
}
