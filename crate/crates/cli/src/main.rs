//! `polyp-audit`: generate synthetic datasets, run audit grids, merge reports.
//!
//! Exit status: 0 on success, 2 for configuration errors, 3 for data
//! errors, 4 for numeric failures (non-finite training loss), 1 otherwise.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use polyp_audit::audit::{
    audit_dataset, merge_reports, read_report, render_groups, render_table, summary_csv,
    write_outputs, AuditError, RunConfig,
};
use polyp_audit::synthgen::{generate_dataset, read_dataset, write_dataset, SizeClass};

#[derive(Parser)]
#[command(
    name = "polyp-audit",
    version,
    about = "Synthetic audit of monocular polyp-size classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset described by a run config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the manifest and payload.
        #[arg(long)]
        out: PathBuf,
        /// Dataset seed, in place of the config's `seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and score every probe/plan/seed/fold job of a run config.
    Audit {
        #[arg(long)]
        config: PathBuf,
        /// Dataset written by `generate`; generated from the config when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run a single audit seed in place of the config's `seeds`.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Print one table from one or more audit reports.
    Report {
        /// Report files or audit output directories.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Scale label the delta column is measured against.
        #[arg(long, default_value = "none")]
        baseline: String,
        /// Also write the merged summary as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Merge reports produced from different configs.
        #[arg(long)]
        force: bool,
    },
}

fn read_text(path: &Path) -> Result<String, AuditError> {
    fs::read_to_string(path).map_err(|e| AuditError::Io(format!("{}: {e}", path.display())))
}

fn generate(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), AuditError> {
    let cfg = RunConfig::from_toml(&read_text(config)?)?;
    let dataset = generate_dataset(&cfg.dataset, seed.unwrap_or(cfg.seed))?;
    write_dataset(&dataset, out)?;
    let large = dataset
        .cohort
        .iter()
        .filter(|p| p.size_class == SizeClass::Large)
        .count();
    println!(
        "{} polyps ({} small, {large} large), {} frames written to {}",
        dataset.cohort.len(),
        dataset.cohort.len() - large,
        dataset.frames.len(),
        out.display()
    );
    Ok(())
}

fn audit(
    config: &Path,
    dataset: Option<&Path>,
    out: Option<&Path>,
    seed: Option<u64>,
    jobs: Option<usize>,
) -> Result<(), AuditError> {
    let text = read_text(config)?;
    let cfg = RunConfig::from_toml(&text)?;
    cfg.validate_audit()?;
    let out = match (out, &cfg.output_dir) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(d)) => PathBuf::from(d),
        (None, None) => {
            return Err(AuditError::Config(
                "no output directory: pass --out or set output_dir".into(),
            ))
        }
    };
    if let Some(n) = jobs {
        if n == 0 {
            return Err(AuditError::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| AuditError::Config(e.to_string()))?;
    }
    let data = match dataset {
        Some(p) => read_dataset(p)?,
        None => generate_dataset(&cfg.dataset, cfg.seed)?,
    };
    let report = audit_dataset(&text, seed, &data)?;
    write_outputs(&report, &out)?;
    print!("{}", render_table(&report.summary, "none"));
    Ok(())
}

fn report(
    paths: &[PathBuf],
    baseline: &str,
    csv: Option<&Path>,
    force: bool,
) -> Result<(), AuditError> {
    let reports = paths
        .iter()
        .map(|p| read_report(p))
        .collect::<Result<Vec<_>, _>>()?;
    let groups = merge_reports(&reports, force)?;
    print!("{}", render_groups(&groups, baseline));
    let rows: Vec<_> = groups.concat();
    if let Some(path) = csv {
        fs::write(path, summary_csv(&rows))
            .map_err(|e| AuditError::Io(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate { config, out, seed } => generate(config, out, *seed),
        Command::Audit {
            config,
            dataset,
            out,
            seed,
            jobs,
        } => audit(config, dataset.as_deref(), out.as_deref(), *seed, *jobs),
        Command::Report {
            reports,
            baseline,
            csv,
            force,
        } => report(reports, baseline, csv.as_deref(), *force),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
