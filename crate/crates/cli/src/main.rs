use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use das_core::engine::SimReport;
use das_core::scenario::{RunError, Scenario};

mod output;

use output::{Outputs, Table};

#[derive(Parser, Debug)]
#[command(name = "das-sim", version, about = "Shared-L1 cluster simulator with DAS address remapping")]
struct Cli {
    /// Directory for written files. Defaults to the scenario's output.dir,
    /// then `out`. `report` only writes files when this is given.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Output formats to write (comma separated).
    #[arg(long, global = true, value_enum, value_delimiter = ',', default_values_t = [Format::Json, Format::Csv, Format::Md])]
    format: Vec<Format>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run every scheme listed in a scenario.
    Run { file: PathBuf },
    /// Run a scenario once per value of one field.
    Sweep {
        file: PathBuf,
        /// Field to vary: a kernel or engine field name, or a dotted path.
        #[arg(long)]
        axis: String,
        /// Values, comma separated.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
    },
    /// Merge report JSON files into one comparison table.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Md,
}

/// Exit 2 for bad input, 1 for a simulation fault.
#[derive(Debug)]
enum Failure {
    Input(anyhow::Error),
    Fault(anyhow::Error),
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Kernel(k) => Failure::Input(k.into()),
            RunError::Fault(f) => Failure::Fault(f.into()),
        }
    }
}

fn input(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Input(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Run { file } => cmd_run(&cli, file),
        Cmd::Sweep { file, axis, values } => cmd_sweep(&cli, file, axis, values),
        Cmd::Report { files } => cmd_report(&cli, files),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Fault(e)) => {
            eprintln!("simulation fault: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn out_dir(cli: &Cli, sc: &Scenario) -> PathBuf {
    cli.out_dir.clone().or_else(|| sc.output.dir.as_ref().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("out"))
}

fn cmd_run(cli: &Cli, file: &Path) -> Result<(), Failure> {
    let sc = Scenario::load(file).map_err(input)?;
    log::info!("running {} under {:?}", sc.name, sc.schemes);
    let reports = sc.run_all()?;
    for r in &reports {
        println!("{}", r.summary_line());
    }
    let table = Table::new(&reports);
    print!("{}", table.markdown());

    let stem = output::file_stem(&sc.name);
    let mut out = Outputs::new(out_dir(cli, &sc), &cli.format);
    for r in &reports {
        out.report(&format!("{stem}.{}", r.meta.scheme), r).map_err(input)?;
    }
    out.csv(&format!("{stem}.breakdown.csv"), output::breakdown_csv(&reports, None));
    out.md(&format!("{stem}.md"), table.markdown());
    out.write().map_err(input)
}

fn cmd_sweep(cli: &Cli, file: &Path, axis: &str, values: &[String]) -> Result<(), Failure> {
    let sc = Scenario::load(file).map_err(input)?;
    let values: Vec<&str> = values.iter().map(|v| v.trim()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        log::warn!("sweep over {axis} has no values; nothing to run");
        return Ok(());
    }
    // Every variant must validate before anything runs.
    let variants: Vec<Scenario> =
        values.iter().map(|v| sc.with_field(axis, v)).collect::<Result<_, _>>().map_err(|m| input(anyhow::anyhow!(m)))?;
    log::info!("sweeping {} over {axis} = {values:?}", sc.name);
    let runs: Vec<Result<Vec<SimReport>, RunError>> = variants.par_iter().map(|v| v.run_all()).collect();
    let mut all: Vec<(&str, Vec<SimReport>)> = Vec::new();
    for (v, r) in values.iter().zip(runs) {
        all.push((v, r?));
    }

    let stem = output::file_stem(&sc.name);
    let axis_stem = output::file_stem(axis);
    let mut out = Outputs::new(out_dir(cli, &sc), &cli.format);
    let mut flat = Vec::new();
    let mut flat_values = Vec::new();
    let mut rows = String::new();
    for (i, (v, reps)) in all.iter().enumerate() {
        for r in reps {
            println!("{axis}={v}: {}", r.summary_line());
            out.report(&format!("{stem}.{axis_stem}-{}.{}", output::file_stem(v), r.meta.scheme), r).map_err(input)?;
            flat.push(r.clone());
            flat_values.push(v.to_string());
        }
        let body = output::breakdown_csv(reps, Some((axis, v)));
        rows.push_str(if i == 0 { &body } else { body.split_once('\n').map_or("", |b| b.1) });
    }
    let table = Table::new(&flat).with_axis(axis, flat_values);
    print!("{}", table.markdown());
    out.csv(&format!("{stem}.sweep-{axis_stem}.csv"), rows);
    out.md(&format!("{stem}.sweep-{axis_stem}.md"), table.markdown());
    out.write().map_err(input)
}

fn cmd_report(cli: &Cli, files: &[PathBuf]) -> Result<(), Failure> {
    let mut reports = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(f).map_err(|e| input(anyhow::anyhow!("{}: {e}", f.display())))?;
        let r = output::parse_report(&text).map_err(|e| input(anyhow::anyhow!("{}: {e}", f.display())))?;
        if let Some(first) = reports.first().map(|(_, r): &(PathBuf, SimReport)| r) {
            if first.topology != r.topology {
                return Err(input(anyhow::anyhow!(
                    "{}: topology differs from {}; reports are not comparable",
                    f.display(),
                    files[0].display()
                )));
            }
        }
        reports.push((f.clone(), r));
    }
    let mut reports: Vec<SimReport> = reports.into_iter().map(|(_, r)| r).collect();
    output::pair_speedups(&mut reports);
    let table = Table::new(&reports);
    print!("{}", table.markdown());

    if let Some(dir) = &cli.out_dir {
        let mut out = Outputs::new(dir.clone(), &cli.format);
        out.csv("report.breakdown.csv", output::breakdown_csv(&reports, None));
        out.md("report.md", table.markdown());
        out.json("report.json", table.json());
        out.write().map_err(input)?;
    }
    Ok(())
}
