use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use epistasis::exec::Execution;
use epistasis::genotype::{load_dataset, write_dataset, Dataset, DatasetPaths};
use epistasis::interaction::Method;
use epistasis::screen_clean::detect;
use epistasis::simulation::{simulate_scenario, standin_corpus, Scenario, Setting, Study, STANDIN_SEED};
use epistasis::study::{aggregate, load_replicates, run_study, write_outputs};
use epistasis::EpistasisError;

mod config;

use config::Config;

/// Bad input from the user: config, flags, paths, or dataset files.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct InputError(String);

#[derive(Parser, Debug)]
#[command(name = "epistasis", version, about = "Gene-gene interaction detection and power studies")]
struct Cli {
    /// TOML configuration file; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Interaction construction; for power-study, restricts the methods run.
    #[arg(long, global = true, value_parser = ["ggee", "pca", "pls"])]
    method: Option<String>,
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one dataset and its truth manifest.
    Simulate,
    /// Run detection on a dataset and write the inference report.
    Analyze {
        /// Directory with genotypes.tsv, gene_map.tsv and phenotype.txt.
        data: Option<PathBuf>,
        #[arg(long)]
        genotypes: Option<PathBuf>,
        #[arg(long)]
        gene_map: Option<PathBuf>,
        #[arg(long)]
        phenotype: Option<PathBuf>,
    },
    /// Run a power study and write tables and figures.
    PowerStudy,
    /// Re-aggregate replicate records into tables and figures.
    Report {
        /// Replicate directory; defaults to `<output>/replicates`.
        replicates: Option<PathBuf>,
    },
}

struct Run {
    cfg: Config,
    seed: u64,
    method: Option<Method>,
    output: PathBuf,
    force: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for unreadable or invalid input, 1 for failures during computation.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<InputError>() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<EpistasisError>() {
            return match err {
                EpistasisError::Io { .. }
                | EpistasisError::Malformed { .. }
                | EpistasisError::CodeOutOfRange { .. }
                | EpistasisError::GeneMap { .. }
                | EpistasisError::PhenotypeLength { .. }
                | EpistasisError::Invalid(_)
                | EpistasisError::ConstantPhenotype => 2,
                _ => 1,
            };
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let workers = cli.workers.or(cfg.workers);
    if let Some(n) = workers {
        if n == 0 {
            return Err(InputError("--workers must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot start the worker pool")?;
    }
    let method = match &cli.method {
        Some(m) => Some(m.parse::<Method>().map_err(|e| InputError(e.to_string()))?),
        None => cfg.method,
    };
    let output = cli
        .output
        .clone()
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| InputError("no output directory: pass --output or set `output` in the config".into()))?;
    let run = Run {
        seed: cli.seed.or(cfg.seed).unwrap_or(1),
        force: cli.force || cfg.force.unwrap_or(false),
        cfg,
        method,
        output,
    };
    match cli.command {
        Command::Simulate => simulate(&run),
        Command::Analyze {
            data,
            genotypes,
            gene_map,
            phenotype,
        } => {
            let a = &run.cfg.analyze;
            let dir = data.or_else(|| a.data.clone());
            let pick = |flag: Option<PathBuf>, key: &Option<PathBuf>, name: &str| -> Result<PathBuf> {
                flag.or_else(|| key.clone())
                    .or_else(|| dir.as_ref().map(|d| d.join(name)))
                    .ok_or_else(|| InputError(format!("no {name}: pass a data directory or --{}", name.split('.').next().unwrap_or(name).replace('_', "-"))).into())
            };
            let paths = DatasetPaths {
                genotypes: pick(genotypes, &a.genotypes, "genotypes.tsv")?,
                gene_map: pick(gene_map, &a.gene_map, "gene_map.tsv")?,
                phenotype: pick(phenotype, &a.phenotype, "phenotype.txt")?,
            };
            analyze(&run, &paths)
        }
        Command::PowerStudy => power_study(&run),
        Command::Report { replicates } => {
            let dir = replicates
                .or_else(|| run.cfg.report.replicates.clone())
                .unwrap_or_else(|| run.output.join("replicates"));
            report(&run, &dir)
        }
    }
}

/// Creates `dir`, refusing a non-empty existing one unless `force`.
fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(InputError(format!(
                "output directory {} is not empty; pass --force to write into it",
                dir.display()
            ))
            .into());
        }
    }
    fs::create_dir_all(dir).map_err(|e| InputError(format!("cannot create {}: {e}", dir.display())))?;
    Ok(())
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| InputError(format!("cannot write {}: {e}", path.display())).into())
}

fn simulate(run: &Run) -> Result<()> {
    let s = &run.cfg.simulate;
    let mut scenario = Scenario::new(s.study, Setting::new(s.setting)?, s.model, s.r2);
    scenario.coefficient = s.coefficient;
    if !(s.r2 > 0.0 && s.r2 < 1.0) {
        return Err(InputError(format!("simulate.r2 must lie in (0, 1), got {}", s.r2)).into());
    }
    prepare_output(&run.output, run.force)?;
    let corpus = match s.study {
        Study::Realistic => Some(standin_corpus(STANDIN_SEED)?),
        Study::Simplified => None,
    };
    let ds = simulate_scenario(&scenario, run.seed, corpus.as_ref().map(|(g, i)| (g, i)))?;
    let manifest = ds.manifest(&scenario)?;
    let data = Dataset {
        genotypes: ds.genotypes.clone(),
        index: ds.index.clone(),
        phenotype: ds.y.clone(),
    };
    write_dataset(&run.output, &data)?;
    write(&run.output.join("truth.json"), &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    println!(
        "setting {} ({}), {} subjects, {} SNPs, {} genes; empirical R\u{b2} = {:.4} (target {})",
        scenario.setting.0,
        manifest.name,
        ds.genotypes.n(),
        ds.genotypes.p(),
        ds.index.len(),
        manifest.r2_empirical,
        s.r2
    );
    Ok(())
}

fn analyze(run: &Run, paths: &DatasetPaths) -> Result<()> {
    let ds = load_dataset(&paths.genotypes, &paths.gene_map, &paths.phenotype)?;
    let mut dc = run.cfg.detect.clone();
    dc.method = run.method.unwrap_or(dc.method);
    dc.seed = run.seed;
    dc.exec = Execution::Parallel;
    prepare_output(&run.output, run.force)?;
    let report = detect(&ds.genotypes, &ds.index, &ds.phenotype, &dc)?;
    write(&run.output.join("report.json"), &(report.to_json()? + "\n"))?;
    write(&run.output.join("report.tsv"), &report.to_tsv())?;
    let sig = report.significant_ids();
    println!(
        "{}: {} groups tested, {} significant at FDR {}{}{}",
        dc.method.label(),
        report.entries.len(),
        sig.len(),
        report.alpha,
        if sig.is_empty() { "" } else { ": " },
        sig.join(", ")
    );
    Ok(())
}

fn power_study(run: &Run) -> Result<()> {
    let mut sc = run.cfg.study_config(run.seed);
    if let Some(m) = run.method {
        sc.methods = vec![m];
    }
    sc.validate().map_err(|e| InputError(e.to_string()))?;
    prepare_output(&run.output, run.force)?;
    let rep_dir = run.output.join("replicates");
    clear_replicates(&rep_dir)?;
    let records = run_study(&sc, Execution::Parallel, Some(&rep_dir))?;
    let (table, maps) = aggregate(&records);
    write_outputs(&run.output, &table, &maps)?;
    let failed: Vec<String> = table
        .rows
        .iter()
        .filter(|r| r.cell_failed)
        .map(|r| format!("{} {} r2={}", r.name, r.method, r.r2))
        .collect();
    println!(
        "{} replicates, {} power rows, {} heatmaps written to {}",
        records.len(),
        table.rows.len(),
        maps.len(),
        run.output.display()
    );
    if !failed.is_empty() {
        anyhow::bail!("more than 10% of replicates failed in: {}", failed.join("; "));
    }
    Ok(())
}

/// Removes replicate records of an earlier run so `report` never mixes runs.
fn clear_replicates(dir: &Path) -> Result<()> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(());
    };
    for e in entries.flatten() {
        let p = e.path();
        if p.extension().is_some_and(|x| x == "json") {
            fs::remove_file(&p).map_err(|err| InputError(format!("cannot remove {}: {err}", p.display())))?;
        }
    }
    Ok(())
}

fn report(run: &Run, replicates: &Path) -> Result<()> {
    let records = load_replicates(replicates)?;
    if records.is_empty() {
        return Err(InputError(format!("no replicate records in {}", replicates.display())).into());
    }
    let (table, maps) = aggregate(&records);
    let written = write_outputs(&run.output, &table, &maps)?;
    println!("{} replicates aggregated into {} files in {}", records.len(), written.len(), run.output.display());
    Ok(())
}
