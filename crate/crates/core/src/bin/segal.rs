use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use segal_core::dataio::{load_dataset_dir, read_ppm, write_dataset_dir, synthetic_samples};
use segal_core::evalrun::{
    evaluate, run_ablation, run_experiment, DataSource, ExperimentConfig, Partitioner, Workspace, MEAN_RESULTS_FILE,
    VAL_SEED_OFFSET,
};
use segal_core::model::{featurize, ModelParams};
use segal_core::superpixel::{grid_partition, region_adjacency, slic_partition, SlicParams};
use segal_core::{Error, Result};

#[derive(Parser)]
#[command(name = "segal", version, about = "Region-query active learning for semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train/val datasets described by the config.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Over-segment one PPM image; writes partition.pgm and adjacency.jsonl.
    Partition {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        region_size: usize,
        #[arg(long, default_value = "slic")]
        partitioner: String,
        #[arg(long, default_value_t = 10.0)]
        compactness: f64,
        #[arg(long, default_value_t = 10)]
        iterations: usize,
    },
    /// Run the active-learning protocol for every configured seed.
    Run {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// mIoU of a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the component ablation grid.
    Ablate {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    sampler: Option<String>,
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seed list.
    #[arg(long)]
    seeds: Option<String>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
                Error::Io(io) => Error::Config(format!("{}: {io}", path.display())),
                other => other,
            })?,
            None => ExperimentConfig::default(),
        };
        let flags = [
            ("rounds", self.rounds.map(|v| v.to_string())),
            ("budget", self.budget.map(|v| v.to_string())),
            ("mode", self.mode.clone()),
            ("sampler", self.sampler.clone()),
            ("nu", self.nu.map(|v| v.to_string())),
            ("seeds", self.seeds.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn gen(out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let DataSource::Synthetic {
        spec,
        train_count,
        val_count,
        data_seed,
    } = &cfg.data
    else {
        return Err(Error::Config("gen needs a synthetic data source".into()));
    };
    write_dataset_dir(&out.join("train"), &synthetic_samples(spec, *data_seed, *train_count)?)?;
    write_dataset_dir(&out.join("val"), &synthetic_samples(spec, data_seed + VAL_SEED_OFFSET, *val_count)?)?;
    println!("wrote {train_count} train and {val_count} val images to {}", out.display());
    Ok(())
}

fn partition(image: &Path, out: &Path, region_size: usize, partitioner: &str, compactness: f64, iterations: usize) -> Result<()> {
    let img = read_ppm(image)?;
    let p = match partitioner.parse::<Partitioner>()? {
        Partitioner::Slic => slic_partition(
            &img,
            &SlicParams {
                target_size: region_size,
                compactness,
                iterations,
            },
        )?,
        Partitioner::Grid => {
            if region_size == 0 {
                return Err(Error::Config("region_size must be >= 1".into()));
            }
            grid_partition(&img, region_size)
        }
    };
    std::fs::create_dir_all(out)?;
    p.write_pgm(&out.join("partition.pgm"))?;
    region_adjacency(&p).write_jsonl(&out.join("adjacency.jsonl"))?;
    println!("{} regions", p.region_count());
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path) -> Result<()> {
    let params = ModelParams::load(checkpoint)?;
    let samples = load_dataset_dir(data)?;
    let Some(first) = samples.first() else {
        return Err(Error::Config(format!("no samples under {}", data.display())));
    };
    let class_count = first.mask.class_count();
    if params.class_count() != class_count + 1 {
        return Err(Error::Config(format!(
            "checkpoint has {} classes, dataset {} plus undefined",
            params.class_count(),
            class_count
        )));
    }
    let features: Vec<_> = samples.iter().map(|s| featurize(&s.image)).collect();
    let masks: Vec<_> = samples.into_iter().map(|s| s.mask).collect();
    let (miou, ious) = evaluate(&features, &masks, &params, class_count)?;
    println!("miou {miou:.6}");
    for (c, iou) in ious.iter().enumerate() {
        println!("iou_{c} {iou:.6}");
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { out, config } => gen(&out, &config.resolve()?),
        Command::Partition {
            image,
            out,
            region_size,
            partitioner,
            compactness,
            iterations,
        } => partition(&image, &out, region_size, &partitioner, compactness, iterations),
        Command::Run { out, config } => {
            let cfg = config.resolve()?;
            let runs = run_experiment(&cfg, Some(&out))?;
            for (seed, reports) in cfg.seeds.iter().zip(&runs) {
                let last = reports.last().expect("rounds >= 1");
                println!(
                    "seed {seed}: {} rounds, {} clicks, final miou {:.6}",
                    reports.len(),
                    last.cum_clicks,
                    last.miou
                );
            }
            println!("mean results in {}", out.join(MEAN_RESULTS_FILE).display());
            Ok(())
        }
        Command::Eval { checkpoint, data } => eval(&checkpoint, &data),
        Command::Ablate { out, config } => {
            let cfg = config.resolve()?;
            let ws = Workspace::load(&cfg)?;
            std::fs::create_dir_all(&out)?;
            for (v, runs) in run_ablation(&ws, &cfg, Some(&out))? {
                println!("({}) avg miou {:.6}", v.row(), segal_core::evalrun::mean_round_average(&runs));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
