use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use deed_core::harness::{self, run::write_files, verify, Experiment, Suite};
use deed_core::Error;

/// Output directory override; takes precedence over `[output] dir`.
const OUT_DIR_ENV: &str = "DEEDSIM_OUT_DIR";

#[derive(Parser)]
#[command(name = "deedsim", version, about = "Quantized distributed optimization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration and write its trace, envelope and summary.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run several configurations on one problem and tabulate bits to accuracy.
    Compare {
        #[arg(required = true, num_args = 2..)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an acceptance suite.
    Verify {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(Suite::TAGS))]
        suite: String,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Write the envelope of a configuration without running it.
    Bound {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &Path) -> Result<Experiment> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    harness::parse_config(&text).map_err(|e| match e {
        Error::ConfigList(list) => anyhow::anyhow!(
            "{}: invalid configuration:\n  {}",
            path.display(),
            list.join("\n  ")
        ),
        other => anyhow::anyhow!("{}: {other}", path.display()),
    })
}

fn out_dir(flag: Option<PathBuf>, exp: Option<&Experiment>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .or_else(|| exp.and_then(|e| e.config.output.dir.clone()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn list(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn run(config: &Path, out: Option<PathBuf>) -> Result<bool> {
    let exp = load(config)?;
    let output = harness::execute(&exp)?;
    list(&output.write(&out_dir(out, Some(&exp)))?);
    let s = &output.summary;
    println!(
        "{}: {} iterations, final dist {:e}, final f-gap {:e}, {} bits",
        s.name, s.iterations, s.final_dist, s.final_fgap, s.total_bits
    );
    for hit in &s.bits_to_accuracy {
        match (hit.iteration, hit.cum_bits) {
            (Some(t), Some(b)) => println!("  f-gap {:e}: t = {t}, {b} bits", hit.threshold),
            _ => println!("  f-gap {:e}: unreached", hit.threshold),
        }
    }
    match &s.violation {
        Some(v) => {
            eprintln!("bound violation: {v}");
            Ok(false)
        }
        None => Ok(true),
    }
}

fn compare(configs: &[PathBuf], out: Option<PathBuf>) -> Result<bool> {
    let exps = configs.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
    let report = harness::compare(&exps)?;
    let table = report.to_csv();
    let json = serde_json::to_string_pretty(&report)? + "\n";
    let files = [("compare.csv".to_string(), table.clone()), ("compare.json".to_string(), json)];
    list(&write_files(&out_dir(out, exps.first()), &files)?);
    print!("{table}");
    for e in &report.expectations {
        println!("{} {}", if e.passed { "ok  " } else { "FAIL" }, e.description);
    }
    for row in report.rows.iter().filter(|r| r.violation.is_some()) {
        eprintln!("{}: bound violation: {}", row.name, row.violation.as_deref().unwrap_or(""));
    }
    Ok(report.passed)
}

fn verify(tag: &str, json: bool) -> Result<bool> {
    let suite: Suite = tag.parse()?;
    let reports = verify::run_suite(suite);
    if json {
        println!("{}", serde_json::to_string_pretty(&reports)?);
    } else {
        for r in &reports {
            println!("{r}");
        }
    }
    Ok(reports.iter().all(|r| r.passed))
}

fn bound(config: &Path, out: Option<PathBuf>) -> Result<bool> {
    let exp = load(config)?;
    let series = harness::bound_only(&exp)?;
    let files = [(format!("{}.bound.csv", exp.config.name()), series.to_csv())];
    list(&write_files(&out_dir(out, Some(&exp)), &files)?);
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config, out } => run(&config, out),
        Command::Compare { configs, out } => compare(&configs, out),
        Command::Verify { suite, json } => verify(&suite, json),
        Command::Bound { config, out } => bound(&config, out),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
