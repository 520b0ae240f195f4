use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use slice2heart::evaluation::{evaluate_structures, simpson_biplane};
use slice2heart::io::{
    load_bundle, load_manifest, load_volume, save_bundle, save_json, save_volume, RunConfig,
};
use slice2heart::model::{load_checkpoint, save_checkpoint};
use slice2heart::phantom::{cohort_manifest, generate_phantom, Manifest, Split, SplitCounts};
use slice2heart::pipeline::{
    aggregate, experiment_recon_config, reconstruct, run_experiment, train, write_results_csv, ExperimentCase,
    ExperimentName, PipelineError, ResultRow, TrainingShape,
};
use slice2heart::views::{acquire_bundle, ViewName, DEFAULT_SIGMA_MM, IMAGE_SIZE};
use slice2heart::volume::{Class, LabelVolume};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "slice2heart", version, about = "Whole-heart shapes from sparse apical slices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the run configuration (published defaults, or the desk profile).
    Config {
        #[arg(long)]
        desk: bool,
    },
    /// Generate a phantom cohort and its manifest.
    Phantom {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Voxels per side.
        #[arg(long)]
        grid: Option<usize>,
        /// Voxel size in mm.
        #[arg(long)]
        spacing: Option<f64>,
        /// Train/val/test counts as `T,V,E`; defaults to 100:13:40 proportions.
        #[arg(long)]
        split: Option<String>,
        /// Run configuration whose `phantom` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render the four apical views of a volume into a slice bundle.
    Slice {
        #[arg(long)]
        vol: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Landmark noise (mm) for the acquisition; stored poses stay ideal.
        #[arg(long, default_value_t = DEFAULT_SIGMA_MM)]
        perturb_sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = IMAGE_SIZE)]
        size: usize,
    },
    /// Train the shape prior on a manifest's training split.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a shape to a slice bundle and write the reconstructed volume.
    Reconstruct {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Joint)]
        mode: Mode,
        #[arg(long, value_enum, default_value_t = Views::All)]
        views: Views,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the optimized latent code and poses as JSON.
        #[arg(long)]
        poses_out: Option<PathBuf>,
    },
    /// Simpson's biplane volume from a bundle's A2C and A4C masks.
    Simpson {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, value_enum)]
        class: Chamber,
        #[arg(long, default_value_t = slice2heart::evaluation::SIMPSON_DISKS)]
        disks: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a predicted volume with a reference volume.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one experiment protocol over a manifest's test split.
    Experiment {
        #[arg(long)]
        name: String,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the acquisition seed of the configuration.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Joint,
    LatentOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum Views {
    All,
    A2cA4c,
}

#[derive(Clone, Copy, ValueEnum)]
enum Chamber {
    Lv,
    La,
}

/// Invalid combination of otherwise well-formed arguments.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(p) = cause.downcast_ref::<PipelineError>() {
            if p.is_numerical() {
                return 3;
            }
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(hint) = hint(&e) {
                eprintln!("hint: {hint}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn hint(err: &anyhow::Error) -> Option<&'static str> {
    let text = format!("{err:#}");
    if text.contains("class order") || text.contains("class names") {
        Some("the file was written for a different label set; regenerate it with this version")
    } else if text.contains("unknown field") {
        Some("run `slice2heart config` to see every accepted key")
    } else if text.contains("part of the training set") {
        Some("run experiments on the manifest's test split, not on training cases")
    } else {
        None
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let config = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            RunConfig::from_json(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    Ok(config)
}

fn log_config(config: &impl serde::Serialize) -> Result<()> {
    info!("resolved configuration: {}", serde_json::to_string(config)?);
    Ok(())
}

fn case_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "case".into())
}

fn manifest_volumes(path: &Path, manifest: &Manifest, split: Split) -> Result<Vec<(String, u64, LabelVolume)>> {
    let dir = path.parent().unwrap_or(Path::new("."));
    manifest
        .ids(split)
        .into_iter()
        .map(|e| {
            let file = dir.join(&e.file);
            let vol = load_volume(&file).with_context(|| format!("loading {}", file.display()))?;
            Ok((e.id.clone(), e.seed, vol))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config { desk } => {
            let config = if desk { RunConfig::desk() } else { RunConfig::default() };
            let mut out = std::io::stdout().lock();
            if let Err(e) = writeln!(out, "{}", serde_json::to_string_pretty(&config)?) {
                // a closed pipe (`| head`) is not an error
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return Err(e.into());
                }
            }
        }
        Command::Phantom {
            count,
            seed,
            out,
            grid,
            spacing,
            split,
            config,
        } => {
            let mut params = load_config(config.as_deref())?.phantom;
            if let Some(g) = grid {
                params.grid = g;
            }
            if let Some(s) = spacing {
                params.spacing = s;
            }
            let n = count as usize;
            let split = match split {
                None => SplitCounts::proportional(n),
                Some(s) => parse_split(&s)?,
            };
            log_config(&params)?;
            let manifest = cohort_manifest(&params, n, seed, split)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for e in &manifest.entries {
                let vol = generate_phantom(&params, e.seed)?;
                let path = out.join(&e.file);
                save_volume(&vol, &path).with_context(|| format!("writing {}", path.display()))?;
                info!("{} ({:?}) -> {}", e.id, e.split, path.display());
            }
            save_json(&manifest, out.join("manifest.json"))?;
        }
        Command::Slice {
            vol,
            out,
            perturb_sigma,
            seed,
            size,
        } => {
            if !(perturb_sigma >= 0.0) {
                return Err(usage("--perturb-sigma must be non-negative"));
            }
            if size < 2 {
                return Err(usage("--size must be at least 2"));
            }
            info!("resolved configuration: sigma_mm={perturb_sigma} seed={seed} size={size}");
            let volume = load_volume(&vol).with_context(|| format!("loading {}", vol.display()))?;
            let bundle = acquire_bundle(&volume, &case_id(&vol), perturb_sigma, seed, size)?;
            save_bundle(&bundle, &out).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Train { manifest, config, out } => {
            let config = load_config(config.as_deref())?;
            log_config(&config.train)?;
            let m = load_manifest(&manifest).with_context(|| format!("loading {}", manifest.display()))?;
            let cases = manifest_volumes(&manifest, &m, Split::Train)?;
            if cases.is_empty() {
                bail!("manifest {} has no training cases", manifest.display());
            }
            let shapes: Vec<TrainingShape<'_>> = cases
                .iter()
                .map(|(id, _, volume)| TrainingShape { id, volume })
                .collect();
            let outcome = train(&shapes, &config.train, |epoch, ckpt| {
                let path = out.with_extension(format!("epoch{epoch:04}.ckpt"));
                save_checkpoint(ckpt, &path).map_err(PipelineError::from)?;
                info!("checkpoint -> {}", path.display());
                Ok(())
            })?;
            save_checkpoint(&outcome.checkpoint, &out).with_context(|| format!("writing {}", out.display()))?;
            info!(
                "trained on {} shapes; final loss {:.5}",
                shapes.len(),
                outcome.losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Reconstruct {
            bundle,
            ckpt,
            mode,
            views,
            config,
            out,
            poses_out,
        } => {
            let base = load_config(config.as_deref())?.experiment.recon;
            let mut recon = experiment_recon_config(ExperimentName::JointPerturbed, &base);
            recon.optimize_pose = matches!(mode, Mode::Joint);
            if matches!(views, Views::A2cA4c) {
                recon.active_views = vec![ViewName::A2C, ViewName::A4C];
            }
            recon.validate().map_err(|e| usage(e.to_string()))?;
            log_config(&recon)?;
            let b = load_bundle(&bundle).with_context(|| format!("loading {}", bundle.display()))?;
            let ck = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let result = reconstruct(&b, &ck, &recon)?;
            save_volume(&result.volume, &out).with_context(|| format!("writing {}", out.display()))?;
            if let Some(p) = poses_out {
                let poses: Vec<_> = result
                    .poses
                    .iter()
                    .map(|(v, r)| serde_json::json!({"view": v, "rigid": r}))
                    .collect();
                save_json(
                    &serde_json::json!({
                        "latent": result.latent,
                        "poses": poses,
                        "final_loss": result.losses.last(),
                    }),
                    &p,
                )?;
            }
        }
        Command::Simpson {
            bundle,
            class,
            disks,
            out,
        } => {
            let b = load_bundle(&bundle).with_context(|| format!("loading {}", bundle.display()))?;
            let mask = |v: ViewName| {
                b.view(v)
                    .map(|a| &a.mask)
                    .ok_or_else(|| anyhow::anyhow!("bundle has no {v} view"))
            };
            let class = match class {
                Chamber::Lv => Class::LeftVentricle,
                Chamber::La => Class::LeftAtrium,
            };
            let volume_ml = simpson_biplane(mask(ViewName::A2C)?, mask(ViewName::A4C)?, class, disks)?;
            save_json(
                &serde_json::json!({
                    "case_id": b.case_id,
                    "structure": class.name(),
                    "disks": disks,
                    "volume_ml": volume_ml,
                }),
                &out,
            )?;
            info!("{class}: {volume_ml:.2} mL");
        }
        Command::Evaluate { pred, reference, out } => {
            let p = load_volume(&pred).with_context(|| format!("loading {}", pred.display()))?;
            let r = load_volume(&reference).with_context(|| format!("loading {}", reference.display()))?;
            let rows: Vec<ResultRow> = evaluate_structures(&p, &r)?
                .into_iter()
                .map(|(class, m)| ResultRow {
                    case_id: case_id(&reference),
                    experiment: "evaluate".into(),
                    structure: class.name().into(),
                    dice: Some(m.dice),
                    assd_mm: m.assd_mm,
                    mae_ml: Some(m.mae_ml),
                    mae_pct: Some(m.mae_pct),
                })
                .collect();
            write_results_csv(&rows, BufWriter::new(File::create(&out)?))?;
        }
        Command::Experiment {
            name,
            manifest,
            ckpt,
            config,
            seed,
            out,
        } => {
            let name: ExperimentName = name.parse().map_err(|e: PipelineError| usage(e.to_string()))?;
            let mut config = load_config(config.as_deref())?.experiment;
            if let Some(s) = seed {
                config.seed = s;
            }
            log_config(&config)?;
            let m = load_manifest(&manifest).with_context(|| format!("loading {}", manifest.display()))?;
            let cases = manifest_volumes(&manifest, &m, Split::Test)?;
            if cases.is_empty() {
                bail!("manifest {} has no test cases", manifest.display());
            }
            let ck = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let refs: Vec<ExperimentCase<'_>> = cases
                .iter()
                .map(|(id, seed, volume)| ExperimentCase { id, seed: *seed, volume })
                .collect();
            let rows = run_experiment(name, &refs, &ck, &config)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let csv_path = out.join(format!("{name}.csv"));
            write_results_csv(&rows, BufWriter::new(File::create(&csv_path)?))?;
            let summary = aggregate(&rows);
            save_json(&summary, out.join(format!("{name}.summary.json")))?;
            for (exp, structures) in &summary.experiments {
                for s in structures {
                    let cell = |c: Option<slice2heart::pipeline::CellStats>| {
                        c.map(|c| format!("{:.3} ± {:.3}", c.mean, c.std)).unwrap_or_else(|| "-".into())
                    };
                    info!(
                        "{exp:>22} {:>7}  dice {}  assd {}  mae {} mL ({} %)",
                        s.structure,
                        cell(s.dice),
                        cell(s.assd_mm),
                        cell(s.mae_ml),
                        cell(s.mae_pct)
                    );
                }
            }
            info!("results -> {}", csv_path.display());
        }
    }
    Ok(())
}

fn parse_split(s: &str) -> Result<SplitCounts> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("--split expects three counts like 14,2,4, got {s:?}")))?;
    match parts.as_slice() {
        [train, val, test] => Ok(SplitCounts {
            train: *train,
            val: *val,
            test: *test,
        }),
        _ => Err(usage(format!("--split expects three counts, got {s:?}"))),
    }
}
