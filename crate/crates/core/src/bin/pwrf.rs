use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pwrf_core::fusion::FusionMechanism;
use pwrf_core::harness::{self, data, sweep, SweepAxis};
use pwrf_core::tensor::GradCheckOptions;
use pwrf_core::{Error, PipelineConfig, Result, Task};

/// Part-whole relational fusion experiments on synthetic multi-modal scenes.
#[derive(Parser)]
#[command(name = "pwrf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(ConfigArgs),
    /// Train a model and write log and checkpoint.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on its training scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write report.csv instead of report.json.
        #[arg(long)]
        csv: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every setting of one ablation axis and write a CSV table.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// capsule_types, share_params, fusion_mechanism or modalities.
        #[arg(long)]
        axis: String,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// Export routing coefficients of one pixel.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        /// Backbone stage (1-based) whose fusion is inspected.
        #[arg(long)]
        stage: usize,
        #[arg(long, default_value_t = 0)]
        row: usize,
        #[arg(long, default_value_t = 0)]
        col: usize,
        /// JSON output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a gnuplot-ready table here.
        #[arg(long)]
        gnuplot: Option<PathBuf>,
    },
    /// Compare model gradients with central finite differences.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Entries checked per parameter; 0 checks all.
        #[arg(long, default_value_t = 4)]
        max_entries: usize,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_task)]
    task: Option<Task>,
    /// Generator ids, comma separated (0 visible, 1 depth, 2 thermal).
    #[arg(long, value_delimiter = ',')]
    modalities: Option<Vec<usize>>,
    /// Part capsule types per modality.
    #[arg(long)]
    capsule_types: Option<usize>,
    #[arg(long)]
    whole_types: Option<usize>,
    #[arg(long)]
    routing_iters: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    lambda_schedule: Option<Vec<f64>>,
    #[arg(long)]
    share_params: Option<bool>,
    #[arg(long, value_parser = parse_fusion)]
    fusion: Option<FusionMechanism>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    decoder_stack: Option<usize>,
    #[arg(long)]
    keep_fraction: Option<f64>,
    #[arg(long)]
    min_kept: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    match s {
        "smm" => Ok(Task::Smm),
        "vdt" => Ok(Task::Vdt),
        _ => Err(format!("unknown task `{s}` (expected smm or vdt)")),
    }
}

fn parse_fusion(s: &str) -> std::result::Result<FusionMechanism, String> {
    FusionMechanism::ALL.into_iter().find(|f| f.name() == s).ok_or_else(|| {
        let names: Vec<_> = FusionMechanism::ALL.iter().map(|f| f.name()).collect();
        format!("unknown fusion `{s}` (expected one of {})", names.join(", "))
    })
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => {
                let seed = self.seed.ok_or_else(|| Error::Config("--seed is required without --config".into()))?;
                PipelineConfig::new(self.task.unwrap_or_default(), seed)
            }
        };
        macro_rules! set {
            ($($field:ident => $target:ident),* $(,)?) => {
                $(if let Some(v) = &self.$field { cfg.$target = v.clone(); })*
            };
        }
        set!(
            seed => seed, task => task, modalities => modalities, capsule_types => part_types,
            routing_iters => routing_iters, lambda_schedule => lambda_schedule, share_params => share_params,
            fusion => fusion, channels => channels, classes => classes, decoder_stack => decoder_stack,
            keep_fraction => keep_fraction, min_kept => min_kept, learning_rate => learning_rate,
            epochs => epochs, batch => batch, scenes => scenes, out => output_dir,
        );
        if self.whole_types.is_some() {
            cfg.whole_types = self.whole_types;
        }
        if self.size.is_some() {
            cfg.size = self.size;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_or_print(path: Option<&PathBuf>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(p, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(args) => {
            let cfg = args.resolve()?;
            let scenes = data::dataset_for(&cfg)?;
            harness::write_dataset(&cfg.output_dir, &cfg, &scenes)?;
            println!("wrote {} {} scenes to {}", scenes.len(), cfg.task.name(), cfg.output_dir.display());
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let run = harness::run_train(&cfg, &cfg.output_dir)?;
            let name = harness::train::metric_name(cfg.task);
            for row in &run.log {
                println!("epoch {} loss {} {name} {}", row.epoch, row.loss, row.metric);
            }
            println!("checkpoint {}", cfg.output_dir.join(harness::CHECKPOINT_DIR).display());
        }
        Command::Eval { checkpoint, csv, out } => {
            let report = harness::run_eval(&checkpoint, &out, csv)?;
            println!("{}", serde_json::to_string(&report.aggregate)?);
        }
        Command::Sweep { config, axis, repeats } => {
            let cfg = config.resolve()?;
            let axis = SweepAxis::parse(&axis).ok_or_else(|| {
                Error::Config(format!(
                    "unknown sweep axis `{axis}` (expected capsule_types, share_params, fusion_mechanism or modalities)"
                ))
            })?;
            if repeats == 0 {
                return Err(Error::Config("repeats must be at least 1".into()));
            }
            let rows = harness::sweep(&cfg, axis, repeats)?;
            let path = cfg.output_dir.join(format!("sweep_{}.csv", axis.name()));
            write_or_print(Some(&path), &sweep::rows_csv(&rows))?;
            print!("{}", sweep::rows_csv(&rows));
        }
        Command::Explain { checkpoint, scene, stage, row, col, out, gnuplot } => {
            let e = harness::run_explain(&checkpoint, scene, stage, row, col)?;
            write_or_print(out.as_ref(), &(serde_json::to_string_pretty(&e)? + "\n"))?;
            if let Some(g) = gnuplot {
                write_or_print(Some(&g), &e.gnuplot_table())?;
            }
        }
        Command::Gradcheck { config, max_entries, tolerance } => {
            let cfg = config.resolve()?;
            let opts = GradCheckOptions {
                max_entries_per_param: (max_entries > 0).then_some(max_entries),
                seed: cfg.seed,
                ..Default::default()
            };
            let report = harness::model_grad_check(&cfg, &opts)?;
            println!("{}", serde_json::to_string(&report)?);
            if !(report.max_rel_error < tolerance) {
                return Err(Error::Contract(format!(
                    "max relative gradient error {} exceeds {tolerance}",
                    report.max_rel_error
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error code=E_USAGE {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error code={} {msg}", e.code());
            ExitCode::from(e.exit_status() as u8)
        }
    }
}
