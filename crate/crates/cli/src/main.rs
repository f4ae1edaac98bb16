//! Command-line surface for the distillation toolkit.
//!
//! Verbs: experts-train, distill, federate, eval, report, audit,
//! export-samples. Exit codes: 0 success, 1 configuration error, 2
//! runtime/numeric error, 3 resumable partial federated result.

use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};

use distill_core::bundle::{deserialize_bundle, serialize_bundle, MANIFEST_FILE};
use distill_core::config::{load_config, RunConfig};
use distill_core::data::{invert_preprocessing, load_dataset, load_eval_split};
use distill_core::distiller::{distill, materialize, LabelMode};
use distill_core::error::{Error, Result};
use distill_core::eval::{
    account_storage_dir, recovery_accuracy, tradeoff_table, EvalReport, StorageReport,
};
use distill_core::experts::{load_trajectories, save_trajectories, train_experts};
use distill_core::federated::{
    account_storage_aggregate_dir, load_aggregated, run_federated, ROUTING_FILE,
};

#[derive(Parser)]
#[command(name = "distillkit", version, about = "Distill labeled image datasets into per-class Gaussian latent priors plus a decoder")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Verbose logging.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train expert trajectories on the configured dataset.
    ExpertsTrain {
        /// Output directory (default: <output.dir>/experts).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distill the configured dataset against stored expert trajectories.
    Distill {
        /// Trajectory directory (default: <output.dir>/experts).
        #[arg(long)]
        experts: Option<PathBuf>,
        /// Bundle output directory (default: <output.dir>/bundle).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Partition the class space and distill every subtask, then aggregate.
    Federate {
        /// Output directory (default: <output.dir>/federated).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Concurrent subtask budget (default: from config).
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Recovery accuracy, storage, and downstream cost for a bundle.
    Eval {
        /// Bundle or aggregate directory.
        #[arg(long)]
        bundle: PathBuf,
        /// Report output path (default: <output.dir>/eval_report.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a storage/time/accuracy trade-off table from saved reports.
    Report {
        /// EvalReport JSON files; each file stem becomes the row label.
        inputs: Vec<PathBuf>,
        /// Machine-readable table output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify checksums and print exact storage accounting for a bundle.
    Audit {
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Decode prior means (plus sampled variations) into an image grid.
    ExportSamples {
        #[arg(long)]
        bundle: PathBuf,
        /// Output directory (default: <output.dir>/samples).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Sampled variations per prior in addition to the mean.
        #[arg(long, default_value_t = 4)]
        variations: usize,
    },
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(
        env_logger::Env::default()
            .default_filter_or(if cli.verbose { "info" } else { "warn" }),
    )
    .init();
    match run(&cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let config = match &cli.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    match &cli.command {
        Command::ExpertsTrain { out } => cmd_experts_train(&config, out.as_deref()),
        Command::Distill { experts, out } => {
            cmd_distill(&config, experts.as_deref(), out.as_deref())
        }
        Command::Federate { out, parallel } => cmd_federate(&config, out.as_deref(), *parallel),
        Command::Eval { bundle, out } => cmd_eval(&config, bundle, out.as_deref()),
        Command::Report { inputs, out } => cmd_report(inputs, out.as_deref()),
        Command::Audit { bundle } => cmd_audit(bundle),
        Command::ExportSamples { bundle, out, variations } => {
            cmd_export_samples(&config, bundle, out.as_deref(), *variations)
        }
    }
}

fn cmd_experts_train(config: &RunConfig, out: Option<&Path>) -> Result<()> {
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.output.dir.join("experts"));
    let data = load_dataset(
        &config.dataset.name,
        &config.dataset_root(),
        &config.preproc_config(),
    )?;
    let arch = config.student_arch(data.image_shape, data.class_count)?;
    let trajs = train_experts(&data, &arch, &config.experts_config(), config.experts.seed)?;
    save_trajectories(&trajs, &out)?;
    for t in &trajs {
        println!(
            "expert {:>2}: {} checkpoints, final train accuracy {:.1}%",
            t.expert_id,
            t.checkpoints.len(),
            100.0 * t.final_train_accuracy
        );
    }
    println!("trajectories written to {}", out.display());
    Ok(())
}

fn cmd_distill(config: &RunConfig, experts: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let experts_dir = experts
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.output.dir.join("experts"));
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.output.dir.join("bundle"));
    let data = load_dataset(
        &config.dataset.name,
        &config.dataset_root(),
        &config.preproc_config(),
    )?;
    let trajectories = load_trajectories(&experts_dir)?;
    let cfg = config.distill_config(data.image_shape)?;

    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let log_path = out.join("run_log.jsonl");
    let mut log_file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let started = std::time::Instant::now();
    let bundle = distill(&data, &trajectories, &cfg, Some(&mut log_file))?;
    let minutes = started.elapsed().as_secs_f64() / 60.0;
    serialize_bundle(&bundle, &out, minutes)?;
    let report = account_storage_dir(&out)?;
    print_storage(&report);
    println!("bundle written to {}", out.display());
    Ok(())
}

fn cmd_federate(config: &RunConfig, out: Option<&Path>, parallel: Option<usize>) -> Result<()> {
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.output.dir.join("federated"));
    let parallel = parallel.unwrap_or(config.federated.parallel);
    let data = load_dataset(
        &config.dataset.name,
        &config.dataset_root(),
        &config.preproc_config(),
    )?;
    let plan = config.federated_plan(data.class_count, data.image_shape)?;
    let agg = run_federated(&data, &plan, &out, parallel)?;
    println!(
        "federated {} subtasks over {} classes",
        agg.sub_bundles.len(),
        agg.full_task_classes.len()
    );
    let report = account_storage_aggregate_dir(&out)?;
    print_storage(&report);
    println!("aggregate written to {}", out.display());
    Ok(())
}

fn cmd_eval(config: &RunConfig, bundle_dir: &Path, out: Option<&Path>) -> Result<()> {
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.output.dir.join("eval_report.json"));
    let preproc = config.preproc_config();
    let root = config.dataset_root();
    let train = load_dataset(&config.dataset.name, &root, &preproc)?;
    let test = load_eval_split(&config.dataset.name, &root, &preproc, &train.preprocessing)?;

    let report = if bundle_dir.join(ROUTING_FILE).exists() {
        let agg = load_aggregated(bundle_dir)?;
        recovery_accuracy(&agg, &test, &config.eval)?
    } else {
        let bundle = deserialize_bundle(bundle_dir)?;
        let sub_test = if bundle.class_count() == test.class_count {
            test
        } else {
            test.restrict_to_classes(&bundle.meta.task_classes)?
        };
        recovery_accuracy(&bundle, &sub_test, &config.eval)?
    };
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(&out, serde_json::to_string_pretty(&report).unwrap())
        .map_err(|e| Error::io(&out, e))?;
    println!(
        "{}: accuracy {:.2}% ± {:.2} over {} seeds | {} MB | {:.2} downstream minutes",
        report.architecture,
        100.0 * report.accuracy_mean,
        100.0 * report.accuracy_std,
        report.n_seeds,
        report.storage.total_mb_rounded,
        report.downstream_minutes
    );
    println!("report written to {}", out.display());
    Ok(())
}

fn cmd_report(inputs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::Config("report needs at least one EvalReport file".into()));
    }
    let mut labeled = Vec::with_capacity(inputs.len());
    for path in inputs {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: EvalReport = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let label = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("report")
            .to_string();
        labeled.push((label, report));
    }
    let table = tradeoff_table(&labeled)?;
    print!("{}", table.render());
    if let Some(out) = out {
        std::fs::write(out, table.to_json()).map_err(|e| Error::io(out, e))?;
        println!("table written to {}", out.display());
    }
    Ok(())
}

fn cmd_audit(bundle_dir: &Path) -> Result<()> {
    let report = if bundle_dir.join(ROUTING_FILE).exists() {
        // checksum verification happens inside each sub-bundle load
        let _ = load_aggregated(bundle_dir)?;
        account_storage_aggregate_dir(bundle_dir)?
    } else if bundle_dir.join(MANIFEST_FILE).exists() {
        let _ = deserialize_bundle(bundle_dir)?;
        account_storage_dir(bundle_dir)?
    } else {
        return Err(Error::Config(format!(
            "{} holds neither a bundle nor an aggregate",
            bundle_dir.display()
        )));
    };
    println!("checksums ok");
    print_storage(&report);
    Ok(())
}

fn print_storage(report: &StorageReport) {
    for (name, bytes) in &report.components {
        println!("  {name:<12} {bytes:>12} bytes");
    }
    println!(
        "  {:<12} {:>12} bytes ({} MB, {:.2} image-per-class equivalents)",
        "total", report.total_bytes, report.total_mb_rounded, report.ipc_equivalent
    );
}

fn cmd_export_samples(
    config: &RunConfig,
    bundle_dir: &Path,
    out: Option<&Path>,
    variations: usize,
) -> Result<()> {
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.output.dir.join("samples"));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let bundle = deserialize_bundle(bundle_dir)?;
    let c = bundle.class_count();
    let lpc = bundle.priors.priors_per_class;

    // recover inversion statistics; ZCA needs the dataset root to recompute
    let stats = if bundle.preproc.zca_epsilon.is_some() {
        let mut preproc = config.preproc_config();
        preproc.zca = true;
        preproc.zca_epsilon = bundle.preproc.zca_epsilon.unwrap();
        match load_dataset(&bundle.preproc.dataset, &config.dataset_root(), &preproc) {
            Ok(data) => data.preprocessing,
            Err(e) => {
                log::warn!(
                    "cannot recompute ZCA statistics ({e}); inverting channel scaling only"
                );
                bundle.preproc.to_stats()
            }
        }
    } else {
        bundle.preproc.to_stats()
    };

    // column 0: decoded means; columns 1..: sampled variations
    let means = materialize(&bundle, 1, LabelMode::Hard, 0)?;
    let mut columns = vec![invert_preprocessing(&means.images, &stats)];
    for v in 0..variations {
        let draw = materialize(&bundle, 1, LabelMode::Hard, 1000 + v as u64)?;
        columns.push(invert_preprocessing(&draw.images, &stats));
    }

    let (h, w, ch) = bundle.meta.image_shape;
    let rows = c * lpc;
    let cols = columns.len();
    let pad = 2usize;
    let grid_h = rows * (h + pad) + pad;
    let grid_w = cols * (w + pad) + pad;

    // map raw-space values onto 0..255 over the whole grid
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for col in &columns {
        for &v in col.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = (hi - lo).max(1e-9);

    let mut img = image::RgbImage::from_pixel(grid_w as u32, grid_h as u32, image::Rgb([24, 24, 24]));
    for (ci, col) in columns.iter().enumerate() {
        for row in 0..rows {
            let y0 = pad + row * (h + pad);
            let x0 = pad + ci * (w + pad);
            for y in 0..h {
                for x in 0..w {
                    let px = |chan: usize| -> u8 {
                        let v = col[[row, y, x, chan.min(ch - 1)]];
                        (255.0 * (v - lo) / span).clamp(0.0, 255.0) as u8
                    };
                    img.put_pixel(
                        (x0 + x) as u32,
                        (y0 + y) as u32,
                        image::Rgb([px(0), px(1 % ch), px(2 % ch)]),
                    );
                }
            }
        }
    }
    let path = out.join("sample_grid.png");
    img.save(&path)
        .map_err(|e| Error::Numeric(format!("png encode: {e}")))?;
    println!(
        "sample grid ({} priors x {} columns) written to {}",
        rows,
        cols,
        path.display()
    );
    Ok(())
}
