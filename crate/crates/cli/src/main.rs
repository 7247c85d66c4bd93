//! `airfuse` command-line front end.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use airfuse_core::datagen::{default_scenario, export_csv, simulate};
use airfuse_core::dataset::{ingest_csv, make_windows, Series};
use airfuse_core::forecaster::{load_checkpoint, save_checkpoint, Model};
use airfuse_core::harness::{
    ablation_run, evaluate_set, horizon_sweep, run_experiment, AblationAxis, EvalReport, DEFAULT_SWEEP, REPORT_HEADER,
};
use airfuse_core::trainer::{write_comment_lines, write_epoch_log, write_step_log};
use airfuse_core::{Error, Result};
use clap::{Parser, Subcommand};

use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "airfuse",
    version,
    about = "Indoor CO2 and PM2.5 forecasting from sensor and activity streams",
    after_help = "Settings come from the --config TOML file; any flag given on the command line \
                  overrides the matching file value. Exit codes: 0 ok, 2 config error, 3 data error, \
                  4 numeric divergence."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the synthetic household and write a sensor CSV
    Simulate {
        #[command(flatten)]
        o: Overrides,
        /// Output path (default `<report_dir>/trace.csv`)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and save its checkpoint
    Train {
        #[command(flatten)]
        o: Overrides,
    },
    /// Score a checkpoint on the validation and test splits
    Eval {
        #[command(flatten)]
        o: Overrides,
    },
    /// Write test-split predictions with uncertainty
    Forecast {
        #[command(flatten)]
        o: Overrides,
    },
    /// Run ablation axes under a shared seed and budget
    Ablate {
        #[command(flatten)]
        o: Overrides,
        /// Comma-separated axes: streams, feedback_r, timescale, loss, regularizers
        #[arg(long, value_delimiter = ',', default_value = "streams,feedback_r,timescale,loss,regularizers")]
        axes: Vec<String>,
    },
    /// Train across lookback/horizon pairs
    Sweep {
        #[command(flatten)]
        o: Overrides,
        /// Pairs as `L:P`, comma-separated
        #[arg(long, value_delimiter = ',')]
        pairs: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = e.category();
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: category={} {msg}", cat.as_str());
            ExitCode::from(cat.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate { o, out } => cmd_simulate(&RunConfig::resolve(&o)?, out),
        Command::Train { o } => cmd_train(&RunConfig::resolve(&o)?),
        Command::Eval { o } => cmd_eval(&RunConfig::resolve(&o)?),
        Command::Forecast { o } => cmd_forecast(&RunConfig::resolve(&o)?),
        Command::Ablate { o, axes } => {
            let axes = axes.iter().map(|a| parse_axis(a)).collect::<Result<Vec<_>>>()?;
            cmd_ablate(&RunConfig::resolve(&o)?, &axes)
        }
        Command::Sweep { o, pairs } => {
            let pairs = if pairs.is_empty() {
                DEFAULT_SWEEP.to_vec()
            } else {
                pairs.iter().map(|p| parse_pair(p)).collect::<Result<Vec<_>>>()?
            };
            cmd_sweep(&RunConfig::resolve(&o)?, &pairs)
        }
    }
}

fn parse_axis(s: &str) -> Result<AblationAxis> {
    AblationAxis::ALL
        .into_iter()
        .find(|a| a.as_str() == s.trim())
        .ok_or_else(|| Error::Config(format!("unknown ablation axis `{s}`")))
}

fn parse_pair(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("expected `L:P`, got `{s}`"));
    let (l, p) = s.split_once(':').ok_or_else(bad)?;
    Ok((l.trim().parse().map_err(|_| bad())?, p.trim().parse().map_err(|_| bad())?))
}

// ---- output helpers --------------------------------------------------------

fn report_dir(cfg: &RunConfig) -> Result<&Path> {
    let dir = cfg.paths.report_dir.as_path();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir)
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Writes the resolved config next to the outputs it produced.
fn write_run_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let path = dir.join("run_config.toml");
    std::fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(&path, e))
}

fn write_metrics_csv(path: &Path, echo: &str, rows: &[(&str, &EvalReport)]) -> Result<()> {
    write_file(path, |w| {
        write_comment_lines(w, echo)?;
        writeln!(w, "{REPORT_HEADER}")?;
        for (label, m) in rows {
            write!(w, "{label},ok")?;
            for c in &m.channels {
                write!(w, ",{},{},{},{}", c.rmse, c.mae, c.r2, c.mse)?;
            }
            writeln!(w)?;
        }
        Ok(())
    })
}

fn load_series(cfg: &RunConfig) -> Result<Series> {
    match &cfg.paths.data {
        Some(p) => ingest_csv(p),
        None => Ok(Series::from(simulate(&default_scenario(
            cfg.simulation_seed(),
            cfg.simulation.days,
        ))?)),
    }
}

// ---- subcommands -----------------------------------------------------------

fn cmd_simulate(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let dir = report_dir(cfg)?;
    let scenario = default_scenario(cfg.simulation_seed(), cfg.simulation.days);
    let trace = simulate(&scenario)?;
    let out = out.unwrap_or_else(|| dir.join("trace.csv"));
    export_csv(&trace, &out)?;
    let echo = dir.join("scenario.json");
    let json = serde_json::to_string_pretty(&scenario).expect("scenario serializes");
    std::fs::write(&echo, json).map_err(|e| Error::io(&echo, e))?;
    write_run_config(cfg, dir)?;
    println!("wrote {} rows to {}", trace.len(), out.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let dir = report_dir(cfg)?;
    write_run_config(cfg, dir)?;
    let echo = cfg.to_toml();
    let series = load_series(cfg)?;
    let provider = cfg.provider()?;
    let exp = cfg.experiment(&provider);
    let start = Instant::now();
    let result = match run_experiment(&series, &provider, &exp) {
        Ok(r) => r,
        Err(Error::Divergence { epoch, last_good }) => {
            let path = dir.join("last_good.ckpt");
            std::fs::write(&path, &last_good).map_err(|e| Error::io(&path, e))?;
            return Err(Error::Divergence { epoch, last_good });
        }
        Err(e) => return Err(e),
    };
    let wall = start.elapsed().as_secs_f64();

    let ckpt = cfg.checkpoint_path();
    save_checkpoint(&ckpt, &result.experiment.model, &result.outcome.params)?;
    write_file(&dir.join("train_log.csv"), |w| {
        write_epoch_log(w, &result.outcome.epochs, &echo)
    })?;
    write_file(&dir.join("step_log.csv"), |w| {
        write_comment_lines(w, &echo)?;
        write_step_log(w, &result.outcome.steps)
    })?;
    // Wall time lives apart from the logs so those stay reproducible.
    write_file(&dir.join("timing.csv"), |w| {
        writeln!(w, "epoch,seconds")?;
        for (i, s) in result.outcome.epoch_seconds.iter().enumerate() {
            writeln!(w, "{},{s}", i + 1)?;
        }
        writeln!(w, "total,{wall}")
    })?;
    write_metrics_csv(
        &dir.join("train_metrics.csv"),
        &echo,
        &[("val", &result.val), ("test", &result.test)],
    )?;
    println!(
        "trained {} epochs (best {}), test rmse co2={:.3} pm25={:.3}; checkpoint {}",
        result.outcome.epochs_run,
        result.outcome.best_epoch,
        result.test.co2().rmse,
        result.test.pm25().rmse,
        ckpt.display()
    );
    Ok(())
}

/// Loads the checkpoint, insisting it matches the configured model, and
/// rebuilds the windows (and training-split normalizer) from the data.
fn restore(cfg: &RunConfig) -> Result<(Model, airfuse_core::ParamSet, airfuse_core::dataset::WindowedData)> {
    let provider = cfg.provider()?;
    let exp = cfg.experiment(&provider);
    let path = cfg.checkpoint_path();
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint {} not found", path.display())));
    }
    let (model_cfg, params) = load_checkpoint(&path, Some(&exp.model))?;
    let data = make_windows(&load_series(cfg)?, &provider, &exp.dataset)?;
    Ok((Model::new(model_cfg)?, params, data))
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let dir = report_dir(cfg)?;
    write_run_config(cfg, dir)?;
    let (model, params, data) = restore(cfg)?;
    let bs = cfg.train.batch_size;
    let (_, val) = evaluate_set(&model, &params, &data.val, &cfg.loss, bs)?;
    let (_, test) = evaluate_set(&model, &params, &data.test, &cfg.loss, bs)?;
    let (val, test) = (val.metrics()?, test.metrics()?);
    write_metrics_csv(&dir.join("eval_metrics.csv"), &cfg.to_toml(), &[("val", &val), ("test", &test)])?;
    for (name, m) in [("val", &val), ("test", &test)] {
        println!(
            "{name}: co2 rmse={:.3} r2={:.3}  pm25 rmse={:.3} r2={:.3}",
            m.co2().rmse,
            m.co2().r2,
            m.pm25().rmse,
            m.pm25().r2
        );
    }
    Ok(())
}

fn cmd_forecast(cfg: &RunConfig) -> Result<()> {
    let dir = report_dir(cfg)?;
    write_run_config(cfg, dir)?;
    let (model, params, data) = restore(cfg)?;
    let (_, preds) = evaluate_set(&model, &params, &data.test, &cfg.loss, cfg.train.batch_size)?;
    let path = dir.join("predictions.csv");
    write_file(&path, |w| {
        write_comment_lines(w, &cfg.to_toml())?;
        preds.write_csv(w)
    })?;
    println!("wrote {} predictions to {}", preds.len() / 2, path.display());
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, axes: &[AblationAxis]) -> Result<()> {
    let dir = report_dir(cfg)?;
    write_run_config(cfg, dir)?;
    let series = load_series(cfg)?;
    let provider = cfg.provider()?;
    let matrix = ablation_run(&series, &provider, &cfg.experiment(&provider), axes)?;
    for t in &matrix.tables {
        let path = dir.join(format!("ablation_{}.csv", t.axis.as_str()));
        write_file(&path, |w| {
            write_comment_lines(w, &cfg.to_toml())?;
            t.write_csv(w)
        })?;
        for o in &t.orderings {
            println!(
                "{}: {} ({})",
                t.axis.as_str(),
                if o.holds { "holds" } else { "violated" },
                o.description
            );
        }
    }
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, pairs: &[(usize, usize)]) -> Result<()> {
    let dir = report_dir(cfg)?;
    write_run_config(cfg, dir)?;
    let series = load_series(cfg)?;
    let provider = cfg.provider()?;
    let table = horizon_sweep(&series, &provider, &cfg.experiment(&provider), pairs)?;
    let path = dir.join("sweep.csv");
    write_file(&path, |w| {
        write_comment_lines(w, &cfg.to_toml())?;
        table.write_csv(w)
    })?;
    println!("wrote {} rows to {}", table.rows.len(), path.display());
    Ok(())
}
