use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use strip_pack::dataset::{generate_dataset, read_instances, write_instances, Distribution, DEFAULT_BIN_SIDE};
use strip_pack::env::Mode;
use strip_pack::eval::{
    bench, bench_csv, read_solutions, render_layout, report_from_solutions, solve, write_solutions, Decoding, Method,
    RunConfig,
};
use strip_pack::geometry::{BinSpec, Dim};
use strip_pack::train::{train, TrainConfig};
use strip_pack::{Error, Result};

#[derive(Parser)]
#[command(name = "strip-pack", version, about = "Strip packing: heuristics, search and a learned packing policy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write random instances, one JSON record per line.
    Generate {
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 40)]
        boxes: usize,
        #[arg(long, default_value = "hard")]
        distribution: Distribution,
        #[arg(long, default_value_t = 3)]
        dim: u32,
        #[arg(long, default_value_t = DEFAULT_BIN_SIDE)]
        bin_side: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve instances with one method and print the report.
    Solve {
        #[command(flatten)]
        run: RunArgs,
        /// Where to write the solutions.
        #[arg(long)]
        solutions: Option<PathBuf>,
        /// Where to write the report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train a policy into a run directory.
    Train {
        /// TOML training configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        run_dir: PathBuf,
        /// Continue from the newest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        instance_size: Option<usize>,
        #[arg(long)]
        dim: Option<u32>,
        #[arg(long)]
        mode: Option<Mode>,
        /// Train the ablation without conditional queries.
        #[arg(long)]
        no_query: bool,
    },
    /// Re-validate a solution file and print its report.
    Eval {
        #[arg(long)]
        solutions: PathBuf,
        #[arg(long, default_value = "offline")]
        mode: Mode,
    },
    /// Every method on every dataset, as CSV.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated methods.
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<Method>,
        /// Extra instance files; the run's own dataset is always included.
        #[arg(long = "extra-dataset")]
        extra: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw one solution as SVG.
    Render {
        #[arg(long)]
        solutions: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Run configuration: a TOML file, then these overrides.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    dim: Option<u32>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    slots: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    decoding: Option<String>,
    /// Generated instance count when no dataset is given.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    boxes: Option<usize>,
    #[arg(long)]
    distribution: Option<Distribution>,
}

impl RunArgs {
    fn resolve(self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_toml(&fs::read_to_string(p)?)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = self.$field {
                    cfg.$field = v;
                }
            };
        }
        set!(method);
        set!(mode);
        set!(dim);
        set!(slots);
        set!(seed);
        set!(workers);
        set!(runs);
        if self.dataset.is_some() {
            cfg.dataset = self.dataset;
        }
        if self.checkpoint.is_some() {
            cfg.checkpoint = self.checkpoint;
        }
        if let Some(d) = self.decoding {
            cfg.decoding = match d.as_str() {
                "greedy" => Decoding::Greedy,
                "sample" => Decoding::Sample,
                _ => return Err(Error::Config(format!("unknown decoding {d:?}"))),
            };
        }
        if let Some(v) = self.count {
            cfg.generate.count = v;
        }
        if let Some(v) = self.boxes {
            cfg.generate.n_boxes = v;
        }
        if let Some(v) = self.distribution {
            cfg.generate.distribution = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { count, boxes, distribution, dim, bin_side, seed, out } => {
            let dim = Dim::from_int(dim).map_err(|_| Error::Config(format!("dim must be 2 or 3, got {dim}")))?;
            let bin = match dim {
                Dim::Three => BinSpec::cube(bin_side, 128),
                Dim::Two => BinSpec::strip(bin_side, 128),
            };
            let instances = generate_dataset(count, boxes, distribution, bin, seed)?;
            write_instances(&out, &instances)?;
            eprintln!("wrote {} instances to {}", instances.len(), out.display());
        }
        Command::Solve { run, solutions, report } => {
            let cfg = run.resolve()?;
            let (rep, sols) = solve(&cfg)?;
            if let Some(p) = solutions {
                write_solutions(p, &sols)?;
            }
            let text = json(&rep);
            if let Some(p) = report {
                fs::write(p, &text)?;
            }
            println!("{text}");
        }
        Command::Train { config, run_dir, resume, steps, seed, learning_rate, batch_size, instance_size, dim, mode, no_query } => {
            let mut cfg: TrainConfig = match config {
                Some(p) => toml::from_str(&fs::read_to_string(p)?).map_err(|e| Error::Config(e.to_string()))?,
                None => TrainConfig::default(),
            };
            if let Some(v) = steps {
                cfg.train_steps = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = learning_rate {
                cfg.learning_rate = v;
            }
            if let Some(v) = batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = instance_size {
                cfg.instance_size = v;
            }
            if let Some(v) = dim {
                cfg.model.dim = v;
            }
            if let Some(v) = mode {
                cfg.mode = v;
            }
            cfg.model.no_query |= no_query;
            let trainer = train(cfg, &run_dir, resume)?;
            eprintln!("trained to step {} in {}", trainer.step, run_dir.display());
        }
        Command::Eval { solutions, mode } => {
            let id = solutions.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
            let sols = read_solutions(&solutions)?;
            println!("{}", json(&report_from_solutions(id, mode, &sols)?));
        }
        Command::Bench { run, methods, extra, out } => {
            let cfg = RunArgs { method: Some(Method::Heuristic), ..run }.resolve()?;
            let mut datasets = vec![cfg.load_dataset()?];
            for p in extra {
                let id = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
                datasets.push((id, read_instances(&p)?));
            }
            let csv = bench_csv(&bench(&cfg, &methods, &datasets)?);
            match out {
                Some(p) => fs::write(p, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Render { solutions, index, out } => render_layout(solutions, index, out)?,
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
