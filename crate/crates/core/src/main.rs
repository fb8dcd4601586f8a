use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rfsslp::metrics::{evaluate, rank_atlases};
use rfsslp::phantom::{generate_phantom, write_phantom, PhantomSpec};
use rfsslp::pipeline::{load_atlas_dir, load_cases, sweep, sweep_csv, SweepGrid};
use rfsslp::volume::{bounding_box_from_labels, read_image, read_labels, write_volume};
use rfsslp::{segment, Error, Mode, Result, RunConfig};

#[derive(Parser)]
#[command(
    name = "rfsslp",
    version,
    about = "Multi-atlas segmentation with forest fusion and label propagation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment a target from a directory of registered atlases.
    Segment {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        atlas_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the mode in the config file.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Output mask (MVOL stem).
        #[arg(long)]
        out: PathBuf,
        /// Output probabilistic map (MVOL stem, f32).
        #[arg(long)]
        prob_out: Option<PathBuf>,
        /// Write run metadata JSON here instead of standard output.
        #[arg(long)]
        meta_out: Option<PathBuf>,
    },
    /// Dice and mean surface distance of a mask against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Generate a synthetic phantom directory.
    Phantom {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank atlases by normalized mutual information with the target.
    RankAtlases {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        atlas_dir: PathBuf,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        margin: usize,
    },
    /// Evaluate a grid of configurations over a set of phantom cases.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        phantom_dir: PathBuf,
        /// Write the CSV table here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Segment {
            target,
            atlas_dir,
            config,
            mode,
            out,
            prob_out,
            meta_out,
        } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            if let Some(m) = mode {
                cfg.mode = m;
            }
            let target = read_image(&target)?;
            let (atlases, _) = load_atlas_dir(&atlas_dir)?;
            let seg = segment(&target, &atlases, &cfg)?;
            write_volume(&seg.mask, &out)?;
            if let Some(p) = prob_out {
                write_volume(&seg.prob_volume()?, &p)?;
            }
            let meta = serde_json::to_string_pretty(&seg.meta).expect("metadata serializes");
            match meta_out {
                Some(p) => write_text(&p, &(meta + "\n"))?,
                None => println!("{meta}"),
            }
        }
        Command::Evaluate { pred, truth } => {
            let report = evaluate(&read_labels(&pred)?, &read_labels(&truth)?)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            );
        }
        Command::Phantom { spec, out } => {
            let spec: PhantomSpec = match spec {
                Some(p) => read_json(&p)?,
                None => PhantomSpec::default(),
            };
            let phantom = generate_phantom(&spec)?;
            write_phantom(&out, &phantom, &spec)?;
        }
        Command::RankAtlases {
            target,
            atlas_dir,
            n,
            margin,
        } => {
            let target = read_image(&target)?;
            let (atlases, _) = load_atlas_dir(&atlas_dir)?;
            atlases.check_grid(&target)?;
            let bbox = bounding_box_from_labels(&atlases.labels(), margin)?;
            let order = rank_atlases(&target, &atlases, &bbox, n)?;
            println!(
                "{}",
                serde_json::to_string(&order).expect("indices serialize")
            );
        }
        Command::Sweep {
            grid,
            phantom_dir,
            out,
        } => {
            let grid: SweepGrid = read_json(&grid)?;
            let cases = load_cases(&phantom_dir)?;
            let rows = sweep(&grid, &cases)?;
            let csv = sweep_csv(&grid, &rows)?;
            match out {
                Some(p) => write_text(&p, &csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 3 } else { 2 })
        }
    }
}
