use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ctrlo::harness::{
    ablate, evaluate, load_model, predict, render_scene, report_text, table_text, train,
    write_report, Checkpoint, Experiment, RunConfig, TrainOptions,
};
use ctrlo::synthscene::{generate_dataset, ingest_features, write_features, Stream};
use ctrlo::{Error, Result};

#[derive(Parser)]
#[command(
    name = "ctrlo",
    version,
    about = "Train and evaluate query-controllable slot models on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Plain-text `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Error::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        for s in &self.set {
            cfg.apply(s)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum Split {
    Train,
    Eval,
}

#[derive(Subcommand)]
enum Command {
    /// Trains a model; writes checkpoints, logs and a final evaluation.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Train on an ingested dataset instead of streamed scenes.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        device_workers: usize,
    },
    /// Evaluates a checkpoint on the held-out scenes or an ingested dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Runs the contrastive loss x decoder conditioning grid over seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        device_workers: usize,
    },
    /// Writes predicted and ground-truth mask images for evaluation scenes.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        scenes: usize,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Generates scenes and writes them in the ingestion format.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        count: usize,
        #[arg(long, value_enum, default_value_t = Split::Eval)]
        split: Split,
    },
    /// Validates an ingestion-format file and prints a summary.
    InspectData {
        #[arg(long)]
        data: PathBuf,
    },
}

fn load_data(path: Option<&Path>) -> Result<Option<Vec<ctrlo::synthscene::Sample>>> {
    path.map(ingest_features).transpose()
}

/// A checkpoint's config with command-line overrides applied on top.
fn checkpoint_config(ckpt: &Checkpoint, cfg: &ConfigArgs) -> Result<RunConfig> {
    let mut c = ckpt.config.clone();
    if let Some(p) = &cfg.config {
        let text = std::fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
        c = RunConfig::parse(&text)?;
    }
    for s in &cfg.set {
        c.apply(s)?;
    }
    if let Some(seed) = cfg.seed {
        c.seed = seed;
    }
    c.validate()?;
    Ok(c)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            cfg,
            out,
            data,
            device_workers,
        } => {
            let config = cfg.resolve()?;
            let exp = Experiment::new(config, load_data(data.as_deref())?)?;
            let opts = TrainOptions {
                out_dir: Some(out.clone()),
                workers: device_workers,
                verbose: true,
                ..Default::default()
            };
            let outcome = train(&exp, &opts)?;
            eprintln!(
                "trained {} steps in {:.1}s",
                exp.config.steps, outcome.log.wall_clock_secs
            );
            if exp.config.eval_scenes > 0 {
                let (report, _) = evaluate(&outcome.model, &exp, &exp.eval_samples()?)?;
                write_report(&out, "eval", &report, &exp.config)?;
                print!("{}", report_text(&report));
            }
        }
        Command::Eval {
            checkpoint,
            cfg,
            data,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let config = checkpoint_config(&ckpt, &cfg)?;
            if config.model_config() != ckpt.config.model_config() {
                return Err(Error::Config(
                    "overrides change the model architecture stored in the checkpoint".into(),
                ));
            }
            let model = load_model(&ckpt)?;
            let exp = Experiment::new(config, None)?;
            let samples = match load_data(data.as_deref())? {
                Some(d) => d,
                None => exp.eval_samples()?,
            };
            let (report, _) = evaluate(&model, &exp, &samples)?;
            if let Some(dir) = &out {
                write_report(dir, "eval", &report, &exp.config)?;
            }
            print!("{}", report_text(&report));
        }
        Command::Ablate {
            cfg,
            out,
            data,
            device_workers,
        } => {
            let config = cfg.resolve()?;
            let data = load_data(data.as_deref())?;
            let table = ablate(
                &config,
                data.as_deref(),
                Some(&out),
                device_workers,
                |row, cell| match (&cell.report, &cell.error) {
                    (Some(r), _) => eprintln!(
                        "{} seed {}: binding_hits {:.4} fg_ari {:.4}",
                        row.name, cell.seed, r.binding_hits, r.fg_ari
                    ),
                    (None, Some(e)) => eprintln!("{} seed {}: failed: {e}", row.name, cell.seed),
                    _ => {}
                },
            )?;
            let text = table_text(&table);
            std::fs::write(
                out.join("ablation.txt"),
                format!("{text}\n# config\n{}", config.echo()),
            )?;
            let json = serde_json::json!({ "table": table, "config": config });
            std::fs::write(
                out.join("ablation.json"),
                serde_json::to_string_pretty(&json).expect("table serializes"),
            )?;
            print!("{text}");
            if !table.complete {
                return Err(Error::Numeric("ablation table incomplete".into()));
            }
        }
        Command::Render {
            checkpoint,
            out,
            scenes,
            data,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let model = load_model(&ckpt)?;
            let exp = Experiment::new(ckpt.config.clone(), None)?;
            let mut samples = match load_data(data.as_deref())? {
                Some(d) => d,
                None => exp.eval_samples()?,
            };
            samples.truncate(scenes);
            let outputs = predict(&model, &exp.config, &samples)?;
            for (i, (o, s)) in outputs.iter().zip(&samples).enumerate() {
                let [p, g] = render_scene(&out, i, o, s)?;
                println!("{} {}", p.display(), g.display());
            }
        }
        Command::GenData {
            cfg,
            out,
            count,
            split,
        } => {
            let config = cfg.resolve()?;
            let exp = Experiment::new(config, None)?;
            let stream = match split {
                Split::Train => Stream::TrainScenes,
                Split::Eval => Stream::EvalScenes,
            };
            let samples = generate_dataset(
                &exp.config.scene_config(),
                &exp.books,
                exp.config.seed,
                stream,
                0,
                count,
            )?;
            write_features(&samples, &out)?;
            println!("wrote {count} scenes to {}", out.display());
        }
        Command::InspectData { data } => {
            let samples = ingest_features(&data)?;
            let objects: usize = samples.iter().map(|s| s.scene.objects.len()).sum();
            let queries: usize = samples.iter().map(|s| s.queries.len()).sum();
            println!("samples   {}", samples.len());
            if let Some(s) = samples.first() {
                println!("grid      {}x{}", s.features.side, s.features.side);
                println!("features  {}", s.features.dim());
                println!("points    {}", s.queries.has_points());
            }
            println!("objects   {objects}");
            println!("queries   {queries}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
