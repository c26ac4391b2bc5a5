use clap::{Parser, Subcommand};
use scatterfield::config::SceneConfig;
use scatterfield::error::CliError;
use scatterfield::media::MediumKind;
use scatterfield::stages::{self, RenderMode, RenderOptions, Workspace};
use scatterfield_core::camera::CameraSpec;
use std::fs::{File, TryLockError};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Neural in-scattering pipeline for voxel participating media.
///
/// Every command works inside a workspace directory, reads the scene config
/// (`scene.json` there unless `--config` is given; built-in defaults if
/// absent) and writes its artifact next to a `.manifest.json` holding the
/// input digests. Exit codes: 0 success, 1 i/o or lock failure, 2 invalid
/// input, 3 provenance mismatch, 4 numeric failure.
#[derive(Debug, Parser)]
#[command(name = "scatterfield", version)]
struct Cli {
    /// Workspace directory holding the config and artifacts.
    #[arg(long, short = 'w', global = true, default_value = ".")]
    workdir: PathBuf,

    /// Scene config (JSON).
    #[arg(long, short = 'c', global = true)]
    config: Option<PathBuf>,

    /// Worker thread cap; 1 makes every artifact bit-reproducible.
    #[arg(long, global = true, env = "SCATTERFIELD_THREADS")]
    threads: Option<usize>,

    /// Rebuild even when the artifact is up to date.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the default scene config to the workspace.
    Init,
    /// Generate a procedural density grid (.vgrid).
    GenMedium {
        #[arg(long, value_enum, default_value = "procedural-cloud")]
        kind: MediumKind,
        /// Voxels per axis (power of two).
        #[arg(long, default_value_t = 32)]
        dims: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output path instead of `paths.medium`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the mean-pooled density pyramid (.vpyr).
    BuildPyramid,
    /// Generate the diffuse and highlight sampling templates (.vtmpl).
    GenTemplate,
    /// Sample feature blocks at random centres (.vfeat).
    Precompute,
    /// Path-trace in-scattering labels for the feature table (.vdata).
    GenDataset,
    /// Train the predictor (.vnet) and write the loss curve (CSV).
    Train,
    /// Render an image (PFM + PPM preview).
    Render {
        #[arg(long, value_enum)]
        mode: RenderMode,
        /// Camera spec (JSON file) replacing the configured camera.
        #[arg(long)]
        camera: Option<PathBuf>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        /// Paths per pixel for the reference mode.
        #[arg(long)]
        spp: Option<usize>,
        /// Output PFM path instead of `<renders>/<mode>.pfm`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a render against a reference render of the same scene.
    Compare {
        test: PathBuf,
        reference: PathBuf,
        /// Report path instead of `compare.json` in the workspace.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn lock(workdir: &Path) -> Result<File, CliError> {
    std::fs::create_dir_all(workdir)?;
    let file = File::create(workdir.join(".scatterfield.lock"))?;
    match file.try_lock() {
        Ok(()) => Ok(file),
        Err(TryLockError::WouldBlock) => Err(CliError::Locked(workdir.display().to_string())),
        Err(TryLockError::Error(e)) => Err(e.into()),
    }
}

fn load_config(cli: &Cli) -> Result<SceneConfig, CliError> {
    match &cli.config {
        Some(path) => SceneConfig::load(path),
        None => {
            let path = cli.workdir.join("scene.json");
            if path.is_file() {
                SceneConfig::load(&path)
            } else {
                Ok(SceneConfig::default())
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Validation("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(format!("thread pool: {e}")))?;
    }
    let _lock = lock(&cli.workdir)?;
    let mut ws = Workspace::new(cli.workdir.clone(), load_config(&cli)?);
    ws.force = cli.force;
    match cli.command {
        Command::Init => {
            let path = cli.workdir.join("scene.json");
            if path.exists() && !cli.force {
                return Err(CliError::Validation(format!(
                    "{} exists (use --force to overwrite)",
                    path.display()
                )));
            }
            std::fs::write(&path, ws.config.to_json() + "\n")?;
            println!("init: wrote {}", path.display());
        }
        Command::GenMedium {
            kind,
            dims,
            seed,
            out,
        } => println!(
            "{}",
            stages::gen_medium(&ws, kind, dims, seed, out)?.summary()
        ),
        Command::BuildPyramid => println!("{}", stages::build_pyramid_stage(&ws)?.summary()),
        Command::GenTemplate => {
            let (d, h) = stages::gen_template(&ws)?;
            println!("{}\n{}", d.summary(), h.summary());
        }
        Command::Precompute => println!("{}", stages::precompute(&ws)?.summary()),
        Command::GenDataset => println!("{}", stages::gen_dataset(&ws)?.summary()),
        Command::Train => {
            let outcome = stages::train(&ws)?;
            println!("{}", outcome.summary());
            let info = &outcome.manifest().info;
            if let (Some(a), Some(b)) = (info["initial_loss"].as_f64(), info["final_loss"].as_f64())
            {
                println!("train: loss {a:.6} -> {b:.6}");
            }
        }
        Command::Render {
            mode,
            camera,
            width,
            height,
            spp,
            out,
        } => {
            let camera = match camera {
                Some(path) => {
                    let text = std::fs::read_to_string(ws.path(&path))?;
                    Some(serde_json::from_str::<CameraSpec>(&text).map_err(|e| {
                        CliError::Validation(format!("camera {}: {e}", path.display()))
                    })?)
                }
                None => None,
            };
            let opts = RenderOptions {
                camera,
                width,
                height,
                spp,
                out,
            };
            println!("{}", stages::render(&ws, mode, &opts)?.summary());
        }
        Command::Compare {
            test,
            reference,
            out,
        } => print!("{}", stages::compare(&ws, &test, &reference, out)?.table()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
