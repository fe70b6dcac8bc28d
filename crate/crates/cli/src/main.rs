use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use softrec_cli::pipeline::{run_pipeline, run_stages, write_config_copy, SeedRun, Stage};
use softrec_cli::plot::{alpha_sweep_bars, bar_chart_svg, plot_results};
use softrec_cli::summary::summarize;
use softrec_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "softrec", version, about = "Generative sequential recommendation with self-distilled curriculum fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed instead of every configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restrict to one regime (soft, plot, summarize, sweep-alpha).
    #[arg(long)]
    regime: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the split dataset.
    Data(Common),
    /// Supervised fine-tuning on real targets.
    Sft(Common),
    /// Generate self-distilled labels with the SFT checkpoint.
    Distill(Common),
    /// Train SOFT for every alpha in the grid.
    Soft(Common),
    /// Train on self-distilled labels only.
    SdftOnly(Common),
    /// Evaluate every trained regime on the test split.
    Eval(Common),
    /// Every stage for every seed, then the summary.
    Pipeline(Common),
    /// Seed means, deviations and SOFT gains.
    Summarize(Common),
    /// SOFT over the alpha grid with test metrics per alpha.
    SweepAlpha(Common),
    /// Tau, loss and alpha-sweep charts.
    Plot(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Self::Data(c)
            | Self::Sft(c)
            | Self::Distill(c)
            | Self::Soft(c)
            | Self::SdftOnly(c)
            | Self::Eval(c)
            | Self::Pipeline(c)
            | Self::Summarize(c)
            | Self::SweepAlpha(c)
            | Self::Plot(c) => c,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let common = cli.command.common();
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    let out = cfg.output_dir.clone();
    let seeds = common.seed.map(|s| vec![s]).unwrap_or_else(|| cfg.seeds.clone());
    let regime = common.regime.as_deref();
    let soft_stages = || -> Result<Vec<Stage>, CliError> {
        match regime {
            None => Ok(vec![Stage::Soft, Stage::SoftOther]),
            Some("soft") => Ok(vec![Stage::Soft]),
            Some("soft_from_sft" | "soft_from_base") => Ok(vec![Stage::SoftOther]),
            Some(r) => Err(CliError::Config(format!("{r} is not a SOFT regime"))),
        }
    };
    match &cli.command {
        Command::Data(_) => drop(run_stages(&cfg, &out, &seeds, &[Stage::Data])?),
        Command::Sft(_) => drop(run_stages(&cfg, &out, &seeds, &[Stage::Sft])?),
        Command::Distill(_) => drop(run_stages(&cfg, &out, &seeds, &[Stage::Distill])?),
        Command::Soft(_) => drop(run_stages(&cfg, &out, &seeds, &soft_stages()?)?),
        Command::SdftOnly(_) => drop(run_stages(&cfg, &out, &seeds, &[Stage::SdftOnly])?),
        Command::Eval(_) => drop(run_stages(&cfg, &out, &seeds, &[Stage::Eval])?),
        Command::Pipeline(_) => {
            for o in run_pipeline(&cfg, &out, &seeds)? {
                println!("seed {}: ran [{}], skipped [{}]", o.seed, o.executed.join(", "), o.skipped.join(", "));
            }
        }
        Command::Summarize(_) => {
            let s = summarize(&[out.clone()], regime)?;
            s.write(&out)?;
            print!("{}", s.table_csv());
            print!("{}", s.gains_csv());
        }
        Command::SweepAlpha(_) => {
            let outcomes = run_stages(&cfg, &out, &seeds, &soft_stages()?)?;
            for o in &outcomes {
                let mut run = SeedRun::open(&cfg, &out, o.seed)?;
                run.write_alpha_sweep()?;
            }
            let dirs: Vec<PathBuf> = outcomes.into_iter().map(|o| o.dir).collect();
            let bars = alpha_sweep_bars(&dirs, regime).map_err(|e| CliError::stage("sweep-alpha", e))?;
            let mut csv = String::from("bar,mean_test_H@5\n");
            for (l, v) in &bars {
                csv.push_str(&format!("{l},{v:?}\n"));
            }
            write_config_copy(&cfg, &out)?;
            std::fs::write(out.join("alpha_sweep.csv"), &csv).map_err(|e| CliError::stage("sweep-alpha", e))?;
            std::fs::write(out.join("alpha_sweep.svg"), bar_chart_svg("Test H@5 per alpha (seed mean)", "H@5", &bars))
                .map_err(|e| CliError::stage("sweep-alpha", e))?;
            print!("{csv}");
        }
        Command::Plot(_) => {
            let p = plot_results(&[out.clone()], &out.join("plots"), regime)?;
            for f in p.files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
