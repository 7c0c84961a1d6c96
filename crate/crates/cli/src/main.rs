use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ssmxtrack::harness::ablation::run_ablation;
use ssmxtrack::harness::checks::{run_suite, Suite};
use ssmxtrack::harness::config::{parse_override, RunConfig};
use ssmxtrack::harness::dataset::{write_dataset, DiskSource, SyntheticSource};
use ssmxtrack::harness::eval::{evaluate, run_eval, write_eval, GtTracker, RandomTracker, Tracker};
use ssmxtrack::harness::synth::benchmark_configs;
use ssmxtrack::harness::train::{loss_curve_path, run_training};
use ssmxtrack::Result;

#[derive(Parser)]
#[command(name = "ssmxtrack", version, about = "Needle-tip tracking with state-space cross-correlation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sequence dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_seqs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fixed insertion angle; cycles through 0, 30 and 60 when omitted.
        #[arg(long)]
        angle: Option<f64>,
        /// Fixed velocity in px/frame; cycles through 1, 2 and 3 when omitted.
        #[arg(long)]
        velocity: Option<f64>,
        #[arg(long)]
        occlusion_rate: Option<f64>,
        /// Generator settings file (key=value).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra key=value settings, applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train a network; writes the checkpoint and CKPT.loss.csv.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Track every sequence and write the metrics report.
    Eval {
        /// Network checkpoint (required for the net tracker).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = TrackerKind::Net)]
        tracker: TrackerKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate the baseline and all seven variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run self-checks; exits nonzero on any failure.
    Check {
        #[arg(long, default_value = "all")]
        suite: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TrackerKind {
    Net,
    Gt,
    Random,
}

fn overrides(set: &[String]) -> Result<Vec<(String, String)>> {
    set.iter().map(|s| parse_override(s)).collect()
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData {
            out,
            n_seqs,
            seed,
            angle,
            velocity,
            occlusion_rate,
            config,
            set,
        } => {
            let mut kv = overrides(&set)?;
            if let Some(r) = occlusion_rate {
                kv.push(("occlusion_rate".into(), r.to_string()));
            }
            let base = RunConfig::load(config.as_deref(), &kv)?.gen;
            let mut configs = benchmark_configs(&base, n_seqs, seed);
            for (cfg, _) in &mut configs {
                if let Some(a) = angle {
                    cfg.angle_deg = a;
                }
                if let Some(v) = velocity {
                    cfg.velocity = v;
                }
                cfg.validate()?;
            }
            let dirs = write_dataset(&out, &SyntheticSource { configs })?;
            println!("wrote {} sequences to {}", dirs.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            resume,
            set,
        } => {
            let cfg = RunConfig::load(config.as_deref(), &overrides(&set)?)?.train;
            let outcome = run_training(&cfg, &data, &out, resume.as_deref())?;
            if let Some(loss) = outcome.epoch_losses.last() {
                println!("final epoch loss {loss:.6}");
            }
            println!("checkpoint {}", out.display());
            println!("loss curve {}", loss_curve_path(&out).display());
        }
        Command::Eval {
            ckpt,
            data,
            report,
            tracker,
            seed,
        } => {
            let source = DiskSource::open(&data)?;
            let result = match tracker {
                TrackerKind::Net => {
                    let ckpt = ckpt.ok_or_else(|| {
                        ssmxtrack::Error::Config("--ckpt is required for the net tracker".into())
                    })?;
                    run_eval(&ckpt, &source, &report)?
                }
                TrackerKind::Gt | TrackerKind::Random => {
                    let t: Box<dyn Tracker> = match tracker {
                        TrackerKind::Gt => Box::new(GtTracker),
                        _ => Box::new(RandomTracker { seed }),
                    };
                    let r = evaluate(t.as_ref(), &source)?;
                    write_eval(&r, &report)?;
                    r
                }
            };
            print!("{}", result.report_csv());
        }
        Command::Ablate {
            data,
            out,
            config,
            set,
        } => {
            let cfg = RunConfig::load(config.as_deref(), &overrides(&set)?)?.train;
            let result = run_ablation(&cfg, &data, &out)?;
            print!("{}", result.to_csv());
            print!("{}", result.checks_text());
        }
        Command::Check { suite } => {
            let suite: Suite = suite.parse()?;
            let results = run_suite(suite);
            for r in &results {
                println!("{r}");
            }
            return Ok(results.iter().all(|r| r.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
