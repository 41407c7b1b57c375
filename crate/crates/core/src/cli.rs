//! `habench` command-line driver: synth, harmonize, apply, report, compare.
//!
//! Commands communicate only through directories. Every failure prints one
//! line starting with `error:` on stderr and exits with status 1.

use std::ffi::OsString;
use std::fs;
use std::path::{Component, Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::config::{parse_json, read_run_config_with, validate_alpha};
use crate::dataset::{assemble_dataset, VoxelDataset};
use crate::design::build_design_matrix;
use crate::harmonize::{FitOptions, MethodRegistry, ModelDocument};
use crate::mask::Mask;
use crate::nifti::{read_volume, write_volume, ElementType, Volume};
use crate::report::{
    compare_reports, emit_maps, emit_tables, eta2_distribution, generate_report, read_summary,
    write_comparison, write_eta2_histogram,
};
use crate::synth::{generate, write_synth_bundle, SynthSpec};
use crate::table::{infer_covariate_kinds, read_sample_table, write_sample_table, CovariateSpec, SampleTable, TableSchema};

pub const THREADS_ENV: &str = "HABENCH_THREADS";

#[derive(Debug, Parser)]
#[command(name = "habench", version, about = "Benchmark site-effect harmonization of multi-site images")]
pub struct Cli {
    /// Worker threads (default: $HABENCH_THREADS, else all cores). Never changes outputs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-site bundle with known site effects.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a harmonization method and write harmonized volumes plus model.json.
    Harmonize {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply a saved model.json to a table of images.
    Apply {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        columns: ColumnArgs,
    },
    /// Voxel-wise site-effect report.
    Report {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value_t = crate::config::DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
        /// Bins of the eta-squared histogram.
        #[arg(long, default_value_t = 50)]
        bins: usize,
        #[command(flatten)]
        columns: ColumnArgs,
    },
    /// Tabulate n_F, f_F, n_t across report directories.
    Compare {
        /// `label=dir` pairs, in row order.
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ColumnArgs {
    #[arg(long, default_value = "image")]
    pub image_column: String,
    #[arg(long, default_value = "site")]
    pub site_column: String,
}

/// Entry point for the binary: built-in methods, process arguments.
pub fn main_from_env() -> i32 {
    main_with_registry(std::env::args_os(), &MethodRegistry::with_builtins())
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn main_with_registry<I, T>(args: I, registry: &MethodRegistry) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error: {first}");
            return 1;
        }
    };
    match run(cli, registry) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            1
        }
    }
}

/// Joins the error chain with ": ", skipping causes already quoted by their parent.
fn one_line(e: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !text.contains(&msg) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&msg);
        }
    }
    text.replace('\n', " ")
}

pub fn run(cli: Cli, registry: &MethodRegistry) -> anyhow::Result<()> {
    let threads = match cli.threads {
        Some(k) => Some(k),
        None => match std::env::var(THREADS_ENV) {
            Ok(s) => Some(s.trim().parse::<usize>().map_err(|_| anyhow!("{THREADS_ENV}={s:?} is not a thread count"))?),
            Err(_) => None,
        },
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(k) = threads {
        if k == 0 {
            bail!("thread count must be at least 1");
        }
        builder = builder.num_threads(k);
    }
    let pool = builder.build().context("cannot start worker threads")?;
    pool.install(|| dispatch(cli.command, registry))
}

fn dispatch(command: Command, registry: &MethodRegistry) -> anyhow::Result<()> {
    match command {
        Command::Synth { spec, out } => cmd_synth(&spec, &out),
        Command::Harmonize { table, mask, config, out } => cmd_harmonize(&table, &mask, &config, out.as_deref(), registry),
        Command::Apply { table, mask, model, out, columns } => cmd_apply(&table, &mask, &model, &out, &columns, registry),
        Command::Report { table, mask, alpha, out, bins, columns } => cmd_report(&table, &mask, alpha, &out, bins, &columns),
        Command::Compare { reports, out } => cmd_compare(&reports, &out),
    }
}

pub fn cmd_synth(spec_path: &Path, out: &Path) -> anyhow::Result<()> {
    let text = fs::read_to_string(spec_path).with_context(|| format!("{}", spec_path.display()))?;
    let spec: SynthSpec = parse_json(spec_path, &text)?;
    let output = generate(&spec)?;

    if out.exists() {
        let empty = out.is_dir() && fs::read_dir(out).map(|mut d| d.next().is_none()).unwrap_or(false);
        if !empty {
            bail!("{}: output already exists", out.display());
        }
        fs::remove_dir(out).with_context(|| format!("{}", out.display()))?;
    }
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).with_context(|| format!("{}", parent.display()))?;
    let staging = tempfile::Builder::new()
        .prefix(".habench-synth-")
        .tempdir_in(&parent)
        .with_context(|| format!("{}", parent.display()))?;
    write_synth_bundle(&output, staging.path())?;
    let staged = staging.keep();
    if let Err(e) = fs::rename(&staged, out) {
        let _ = fs::remove_dir_all(&staged);
        return Err(e).with_context(|| format!("{}", out.display()));
    }
    Ok(())
}

struct LoadedImages {
    table: SampleTable,
    volumes: Vec<Volume>,
    dataset: VoxelDataset,
}

fn load_mask(path: &Path) -> anyhow::Result<Mask> {
    let volume = read_volume(path)?;
    Mask::from_volume(&volume).with_context(|| format!("{}", path.display()))
}

fn load_images(table_path: &Path, mask_path: &Path, schema: &TableSchema) -> anyhow::Result<LoadedImages> {
    let table = read_sample_table(table_path, schema)?;
    let mask = load_mask(mask_path)?;
    let volumes = table
        .rows()
        .par_iter()
        .map(|row| read_volume(&row.path))
        .collect::<crate::Result<Vec<_>>>()?;
    let keyed = table
        .rows()
        .iter()
        .zip(&volumes)
        .map(|(r, v)| (r.image_id.clone(), v.clone()))
        .collect();
    let dataset = assemble_dataset(keyed, mask, table.clone())?;
    Ok(LoadedImages { table, volumes, dataset })
}

/// The image reference must be a plain relative path so it can be mirrored under `out`.
fn mirrored_path(out: &Path, image_id: &str) -> anyhow::Result<PathBuf> {
    let rel = Path::new(image_id);
    if !rel.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir)) {
        bail!("image {image_id:?} is not a relative path inside the table directory; cannot mirror it under {}", out.display());
    }
    Ok(out.join(rel))
}

fn write_harmonized(
    loaded: &LoadedImages,
    harmonized: &ndarray::Array2<f64>,
    out: &Path,
    image_column: &str,
    site_column: &str,
) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("{}", out.display()))?;
    let mask = loaded.dataset.mask();
    let ids: Vec<String> = loaded.table.rows().iter().map(|r| r.image_id.clone()).collect();
    ids.par_iter()
        .zip(&loaded.volumes)
        .enumerate()
        .try_for_each(|(n, (id, original))| -> anyhow::Result<()> {
            let path = mirrored_path(out, id)?;
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).with_context(|| format!("{}", dir.display()))?;
            }
            let mut data = original.data.clone();
            mask.scatter_into(harmonized.row(n).as_slice().expect("row-major"), &mut data);
            let volume = Volume::new(original.geometry.clone(), data)?.with_description(original.description.clone());
            write_volume(&volume, &path, ElementType::Float64)?;
            Ok(())
        })?;
    write_sample_table(&loaded.table, &ids, image_column, site_column, out.join("samples.csv"))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("{}", path.display()))
}

pub fn cmd_harmonize(
    table: &Path,
    mask: &Path,
    config: &Path,
    out: Option<&Path>,
    registry: &MethodRegistry,
) -> anyhow::Result<()> {
    let config = read_run_config_with(config, registry)?;
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| anyhow!("no output directory: pass --out or set output_dir in the config"))?;
    let covariates = infer_covariate_kinds(table, &config.covariates, &config.categorical)?;
    let schema = TableSchema::new(&config.image_column, &config.site_column, covariates)?;
    let loaded = load_images(table, mask, &schema)?;
    let design = build_design_matrix(&loaded.table, &config.covariates)?;
    let method = registry.resolve(&config.method)?;
    let options = FitOptions {
        eb: config.combat_eb,
        tol: config.combat_tol,
        max_iter: config.combat_max_iter,
    };
    let fitted = method.fit(&loaded.dataset, &design, &options)?;
    let harmonized = fitted.apply(&loaded.dataset, &design)?;
    write_harmonized(&loaded, &harmonized, &out, &config.image_column, &config.site_column)?;
    write_json(&out.join("model.json"), &ModelDocument::new(&config.method, &design, fitted.as_ref()))
}

pub fn cmd_apply(
    table: &Path,
    mask: &Path,
    model: &Path,
    out: &Path,
    columns: &ColumnArgs,
    registry: &MethodRegistry,
) -> anyhow::Result<()> {
    let text = fs::read_to_string(model).with_context(|| format!("{}", model.display()))?;
    let doc: ModelDocument = parse_json(model, &text)?;
    let fitted = doc.load(registry)?;
    let covariates = doc
        .design
        .covariates
        .iter()
        .map(|c| CovariateSpec { name: c.name.clone(), kind: c.kind })
        .collect();
    let schema = TableSchema::new(&columns.image_column, &columns.site_column, covariates)?;
    let loaded = load_images(table, mask, &schema)?;
    let design = doc.design.encode(&loaded.table)?;
    let harmonized = fitted.apply(&loaded.dataset, &design)?;
    write_harmonized(&loaded, &harmonized, out, &columns.image_column, &columns.site_column)
}

pub fn cmd_report(
    table: &Path,
    mask: &Path,
    alpha: f64,
    out: &Path,
    bins: usize,
    columns: &ColumnArgs,
) -> anyhow::Result<()> {
    validate_alpha(alpha).map_err(|m| anyhow!("--alpha: {m}"))?;
    if bins == 0 {
        bail!("--bins must be at least 1");
    }
    let schema = TableSchema::new(&columns.image_column, &columns.site_column, Vec::new())?;
    let loaded = load_images(table, mask, &schema)?;
    let report = generate_report(&loaded.dataset, alpha)?;
    fs::create_dir_all(out).with_context(|| format!("{}", out.display()))?;
    emit_tables(&report, out)?;
    emit_maps(&report, loaded.dataset.mask(), out)?;
    write_eta2_histogram(&eta2_distribution(&report, bins)?, out)?;
    Ok(())
}

pub fn cmd_compare(reports: &[String], out: &Path) -> anyhow::Result<()> {
    let mut summaries = Vec::with_capacity(reports.len());
    for item in reports {
        let (label, dir) = item
            .split_once('=')
            .filter(|(l, d)| !l.is_empty() && !d.is_empty())
            .ok_or_else(|| anyhow!("--reports expects label=dir, got {item:?}"))?;
        if summaries.iter().any(|(l, _)| l == label) {
            bail!("report label {label:?} is used twice");
        }
        summaries.push((label.to_string(), read_summary(dir)?));
    }
    let comparison = compare_reports(&summaries)?;
    fs::create_dir_all(out).with_context(|| format!("{}", out.display()))?;
    write_comparison(&comparison, out)?;
    print!("{comparison}");
    Ok(())
}
