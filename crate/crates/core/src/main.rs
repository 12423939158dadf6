use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use slimadam_core::harness::{
    lr_sweep, robustness, snr_vs_lr, sweep_csv, vocab_experiment, vocab_grid_cells,
    write_train_outputs, RuleSource, TrainConfig,
};
use slimadam_core::model::Census;
use slimadam_core::rules::{canonical_rules, derive_rules, savings_report, DeriveMode, RuleSet};
use slimadam_core::snr::{averaged_snr, SnrTrajectory};
use slimadam_core::{train, Error, Result};

#[derive(Parser)]
#[command(
    name = "slimadam",
    version,
    about = "Second-moment compressibility experiments on toy models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write losses, SNR, rules and savings.
    Train(Common),
    /// Loss gap and embedding/head SNR across vocabulary sizes.
    VocabExp(Common),
    /// Adam versus SlimAdam (and any configured optimizers) over the lr grid.
    LrSweep(Common),
    /// Depth-averaged SNR and savings per learning rate.
    SnrVsLr(Common),
    /// Derive compression rules from an snr.csv.
    DeriveRules {
        #[command(flatten)]
        common: Common,
        /// SNR trajectory to average.
        #[arg(long)]
        snr: PathBuf,
        /// Census manifest; defaults to the configured model.
        #[arg(long)]
        census: Option<PathBuf>,
        #[arg(long)]
        no_both: bool,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<DeriveMode>,
    },
    /// Second-moment savings of a rule set (canonical rules by default).
    Savings {
        #[command(flatten)]
        common: Common,
        /// Census manifest; defaults to the configured model.
        #[arg(long, conflicts_with = "gpt_small")]
        census: Option<PathBuf>,
        /// Use the GPT-small census.
        #[arg(long)]
        gpt_small: bool,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cutoff: Option<f64>,
    /// Rules file to train with.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<DeriveMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Common {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p).map_err(|e| match e {
                Error::Io { .. } => Error::Config(e.to_string()),
                other => other,
            })?,
            None => TrainConfig::default(),
        };
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(c) = self.cutoff {
            cfg.cutoff = c;
        }
        if let Some(r) = &self.rules {
            cfg.rules = RuleSource::File(r.clone());
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn run_json(cfg: &TrainConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serializes") + "\n"
}

fn all_diverged(flags: impl IntoIterator<Item = bool>) -> Result<()> {
    let mut any = false;
    for d in flags {
        if !d {
            return Ok(());
        }
        any = true;
    }
    if any {
        return Err(Error::Divergence("every run diverged".into()));
    }
    Ok(())
}

fn load_census(path: Option<&Path>, cfg: &TrainConfig) -> Result<Census> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            Census::from_manifest(&text)
        }
        None => Census::for_spec(&cfg.model_spec()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.resolve()?;
            let report = train(&cfg)?;
            write_train_outputs(&cfg.out_dir, &cfg, &report)?;
            eprintln!(
                "steps {} final loss {:.4} held-out {:?} savings {:.4}{}",
                report.steps_run,
                report.final_loss,
                report.final_eval_loss,
                report.savings_fraction,
                if report.diverged { " (diverged)" } else { "" }
            );
            all_diverged([report.diverged])
        }
        Command::VocabExp(common) => {
            let cfg = common.resolve()?;
            let report = vocab_experiment(&cfg, &cfg.vocabs, &cfg.seeds, &vocab_grid_cells())?;
            write(&cfg.out_dir, "vocab.csv", &report.cells_csv()?)?;
            write(&cfg.out_dir, "vocab_snr.csv", &report.snr_csv()?)?;
            write(&cfg.out_dir, "run.json", &run_json(&cfg))?;
            all_diverged(report.cells.iter().map(|c| c.diverged))
        }
        Command::LrSweep(common) => {
            let cfg = common.resolve()?;
            let result = robustness(&cfg, &cfg.lrs)?;
            let mut rows = result.rows;
            let mut extra = cfg.optimizers.clone();
            if let Some(r) = &common.rules {
                extra.push(RuleSource::File(r.clone()));
            }
            if !extra.is_empty() {
                rows.extend(lr_sweep(&cfg, &cfg.lrs, &extra)?);
            }
            write(&cfg.out_dir, "sweep.csv", &sweep_csv(&rows)?)?;
            write(&cfg.out_dir, "rules.txt", &result.rules.to_text())?;
            write(&cfg.out_dir, "run.json", &run_json(&cfg))?;
            eprintln!(
                "adam best lr {} (rules derived at {})",
                result.adam_best_lr, result.derive_lr
            );
            all_diverged(rows.iter().map(|r| r.diverged))
        }
        Command::SnrVsLr(common) => {
            let cfg = common.resolve()?;
            let result = snr_vs_lr(&cfg, &cfg.lrs, &cfg.cutoffs)?;
            write(&cfg.out_dir, "snr_vs_lr.csv", &result.rows_csv()?)?;
            write(&cfg.out_dir, "savings_surface.csv", &result.surface_csv()?)?;
            write(&cfg.out_dir, "run.json", &run_json(&cfg))?;
            all_diverged(result.surface.iter().map(|p| p.diverged))
        }
        Command::DeriveRules {
            common,
            snr,
            census,
            no_both,
            mode,
        } => {
            let mut cfg = common.resolve()?;
            cfg.no_both |= no_both;
            if let Some(m) = mode {
                cfg.derive_mode = m;
            }
            let census = load_census(census.as_deref(), &cfg)?;
            let text = fs::read_to_string(&snr)
                .map_err(|e| Error::Config(format!("{}: {e}", snr.display())))?;
            let avg = averaged_snr(&SnrTrajectory::from_csv(&text)?)?;
            let rules = derive_rules(
                &avg,
                &census,
                &cfg.derive_options(common.lr, &snr.display().to_string()),
            )?;
            write(&cfg.out_dir, "rules.txt", &rules.to_text())?;
            let report = savings_report(&census, &rules)?;
            write(
                &cfg.out_dir,
                "savings.json",
                &(serde_json::to_string_pretty(&report).expect("serializable") + "\n"),
            )?;
            Ok(())
        }
        Command::Savings {
            common,
            census,
            gpt_small,
        } => {
            let cfg = common.resolve()?;
            let census = if gpt_small {
                Census::gpt_small()
            } else {
                load_census(census.as_deref(), &cfg)?
            };
            let rules = match &common.rules {
                Some(p) => {
                    let text = fs::read_to_string(p)
                        .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                    RuleSet::from_text(&text)?
                }
                None => canonical_rules(&census),
            };
            let report = savings_report(&census, &rules)?;
            let json = serde_json::to_string_pretty(&report).expect("serializable") + "\n";
            print!("{json}");
            if common.out.is_some() {
                write(&cfg.out_dir, "savings.json", &json)?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Divergence(_) => 3,
                _ => 1,
            })
        }
    }
}
