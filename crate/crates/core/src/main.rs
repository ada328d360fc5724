use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mmkdda::harness::{run_ablation_grid, run_mmkdda, ExperimentConfig};
use mmkdda::metrics::{compute_metrics, AccuracyMatrix};
use mmkdda::stream::{synth_dataset_with_noise, DEFAULT_NOISE};
use mmkdda::Error;

#[derive(Parser)]
#[command(name = "mmkdda", version, about = "Online continual learning runs and ablations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once over the task stream and write all run outputs.
    Run(RunArgs),
    /// Run the five-row component ablation for several seeds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Recompute summary metrics from an accuracy CSV.
    Metrics { csv: PathBuf },
    /// Write a synthetic dataset as an MMDS file.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 250)]
        per_class: usize,
        #[arg(long, default_value = "1x8x8")]
        image: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_NOISE)]
        noise: f64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value file; flags given here take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, overrides_with = "no_mkd")]
    mkd: bool,
    #[arg(long)]
    no_mkd: bool,
    #[arg(long, overrides_with = "no_da")]
    da: bool,
    #[arg(long)]
    no_da: bool,
    #[arg(long, overrides_with = "no_ml")]
    ml: bool,
    #[arg(long)]
    no_ml: bool,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    mem_per_task: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    kd_weight: Option<f64>,
    #[arg(long)]
    inner_steps: Option<usize>,
    #[arg(long)]
    inner_lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    classes_per_task: Option<usize>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    /// Image shape as CxHxW.
    #[arg(long)]
    image: Option<String>,
    #[arg(long)]
    noise: Option<f64>,
    /// MMDS dataset file instead of synthetic data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated grid sizes for distillation.
    #[arg(long)]
    scales: Option<String>,
    #[arg(long)]
    kd_normalize: Option<bool>,
    #[arg(long)]
    multi_head: Option<bool>,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        let mut set = |key: &str, value: Option<String>| match value {
            Some(v) => cfg.set(key, &v),
            None => Ok(()),
        };
        let toggle = |on: bool, off: bool| match (on, off) {
            (true, _) => Some("true".to_string()),
            (_, true) => Some("false".to_string()),
            _ => None,
        };
        let show = |v: Option<&dyn ToString>| v.map(|v| v.to_string());
        set("seed", show(self.seed.as_ref().map(|v| v as _)))?;
        set("out", self.out.as_ref().map(|p| p.display().to_string()))?;
        set("mkd", toggle(self.mkd, self.no_mkd))?;
        set("da", toggle(self.da, self.no_da))?;
        set("ml", toggle(self.ml, self.no_ml))?;
        set("tasks", show(self.tasks.as_ref().map(|v| v as _)))?;
        set("mem-per-task", show(self.mem_per_task.as_ref().map(|v| v as _)))?;
        set("lr", show(self.lr.as_ref().map(|v| v as _)))?;
        set("rho", show(self.rho.as_ref().map(|v| v as _)))?;
        set("kd-weight", show(self.kd_weight.as_ref().map(|v| v as _)))?;
        set("inner-steps", show(self.inner_steps.as_ref().map(|v| v as _)))?;
        set("inner-lr", show(self.inner_lr.as_ref().map(|v| v as _)))?;
        set("batch", show(self.batch.as_ref().map(|v| v as _)))?;
        set("classes-per-task", show(self.classes_per_task.as_ref().map(|v| v as _)))?;
        set("train-per-class", show(self.train_per_class.as_ref().map(|v| v as _)))?;
        set("test-per-class", show(self.test_per_class.as_ref().map(|v| v as _)))?;
        set("image", self.image.clone())?;
        set("noise", show(self.noise.as_ref().map(|v| v as _)))?;
        set("data", self.data.as_ref().map(|p| p.display().to_string()))?;
        set("scales", self.scales.clone())?;
        set("kd-normalize", show(self.kd_normalize.as_ref().map(|v| v as _)))?;
        set("multi-head", show(self.multi_head.as_ref().map(|v| v as _)))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_image(text: &str) -> Result<[usize; 3], Error> {
    let mut cfg = ExperimentConfig::default();
    cfg.set("image", text)?;
    Ok(cfg.image)
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Run(args) => {
            let cfg = args.config()?;
            let record = run_mmkdda(&cfg)?;
            if let Some(out) = &cfg.out {
                record.write_outputs(out)?;
            }
            print!("{}", record.metrics.to_text());
            eprintln!("finished {} steps in {:.1?}", record.losses.len(), record.wall_clock);
        }
        Command::Ablate { run, repeats } => {
            let cfg = run.config()?;
            let table = run_ablation_grid(&cfg, repeats)?;
            print!("{}", table.to_csv());
            for row in &table.rows {
                for run in row.runs.iter().filter_map(|r| r.as_ref().err()) {
                    eprintln!("{}: {run}", row.name);
                }
            }
            if table.partial() {
                eprintln!("table is partial: some runs failed");
            }
        }
        Command::Metrics { csv } => {
            let text = fs::read_to_string(&csv)?;
            let matrix = AccuracyMatrix::from_csv(&text)?;
            print!("{}", compute_metrics(&matrix)?.to_text());
        }
        Command::GenData {
            out,
            classes,
            per_class,
            image,
            seed,
            noise,
        } => {
            let shape = parse_image(&image)?;
            let data = synth_dataset_with_noise(classes, per_class, shape, seed, noise)
                .map_err(|e| Error::Config(e.to_string()))?;
            data.save(&out)?;
            eprintln!("wrote {} examples to {}", data.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
