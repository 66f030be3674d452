use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use skygan::eval::evaluate;
use skygan::haze::{build_dataset, synthesize, BuildOptions};
use skygan::i2i::{dehaze, Pipeline};
use skygan::image::{load_image, save_image};
use skygan::orchestrator::{load_model, resume_with, train, RunConfig};
use skygan::spectral::{make_spectral_fixtures, save_cube};
use skygan::Error;

const SEED_ENV: &str = "SKYGAN_SEED";

#[derive(Parser)]
#[command(name = "skygan", version, about = "Aerial image dehazing with hyperspectral catalysts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render one hazy version of a clean image.
    Synthesize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=5))]
        level: u8,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tile a directory of clean images and render hazy pairs plus a manifest.
    BuildDataset {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Haze levels, e.g. `1..5` or `2,4`.
        #[arg(long, default_value = "1..5", value_parser = parse_levels)]
        levels: Levels,
        #[arg(long, default_value_t = 500)]
        tile: usize,
        /// Defaults to the tile size.
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the staged training schedule from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the checkpoints in the configured directory.
        #[arg(long)]
        resume: bool,
    },
    /// Dehaze one image with a trained model.
    Dehaze {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the spanned input, reconstructed cube and catalyst here.
        #[arg(long)]
        dump_intermediates: Option<PathBuf>,
    },
    /// Score a model on every pair of a dataset manifest.
    Evaluate {
        #[command(flatten)]
        model: ModelChoice,
        #[arg(long)]
        manifest: PathBuf,
        /// Report path; `.json` and `.txt` files are written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic spectral cubes.
    Fixtures {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ModelChoice {
    /// Checkpoint directory of a trained run.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Use the pass-through pipeline (scores the hazy input itself).
    #[arg(long)]
    identity: bool,
}

/// Parsed `--levels` list; a newtype so clap takes the whole list as one value.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Levels(Vec<u8>);

fn parse_levels(s: &str) -> Result<Levels, String> {
    let parse = |t: &str| t.trim().parse::<u8>().map_err(|e| format!("bad level `{t}`: {e}"));
    let levels: Vec<u8> = match s.split_once("..") {
        Some((a, b)) => {
            let b = b.strip_prefix('=').unwrap_or(b);
            (parse(a)?..=parse(b)?).collect()
        }
        None => s.split(',').map(parse).collect::<Result<_, _>>()?,
    };
    if levels.is_empty() || levels.iter().any(|l| !(1..=5).contains(l)) {
        return Err(format!("levels must lie in 1..5, got `{s}`"));
    }
    Ok(Levels(levels))
}

fn resolve_seed(flag: Option<u64>) -> Result<u64, Error> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        "io" => 3,
        "format" => 4,
        "dimension" => 5,
        "config" => 6,
        "numeric" => 7,
        "checkpoint" => 8,
        "dataset" => 9,
        _ => 1,
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synthesize { input, level, seed, out } => {
            let seed = resolve_seed(seed)?;
            let clean = load_image(&input)?;
            let hazy = synthesize(&clean, level, seed)?;
            save_image(&hazy, &out)?;
        }
        Command::BuildDataset { src, out, levels, tile, stride, seed } => {
            let opts = BuildOptions { levels: levels.0, tile, stride: stride.unwrap_or(tile), seed: resolve_seed(seed)? };
            let manifest = build_dataset(&src, &out, &opts)?;
            println!("{} pairs written to {}", manifest.pairs.len(), out.display());
        }
        Command::Train { config, resume } => {
            let cfg = RunConfig::load(&config)?;
            let outcome = if resume { resume_with(&cfg)? } else { train(&cfg)? };
            for p in &outcome.checkpoints {
                println!("{}", p.display());
            }
        }
        Command::Dehaze { model, input, out, dump_intermediates } => {
            let model = load_model(&model)?;
            let x = load_image(&input)?;
            let r = dehaze(&model.pipeline(), &x, dump_intermediates.is_some())?;
            save_image(&r.dehazed, &out)?;
            if let (Some(dir), Some(i)) = (dump_intermediates, r.intermediates) {
                create_dir(&dir)?;
                save_cube(&i.spanned, &dir.join("spanned.hsc"))?;
                save_cube(&i.cube, &dir.join("cube.hsc"))?;
                save_image(&i.catalyst, &dir.join("catalyst.png"))?;
            }
        }
        Command::Evaluate { model, manifest, out } => {
            let loaded = model.model.as_deref().map(load_model).transpose()?;
            let pipeline = match &loaded {
                Some(m) => m.pipeline(),
                None => Pipeline::identity(),
            };
            let report = evaluate(&manifest, &pipeline)?;
            report.save(&out)?;
            print!("{}", report.to_table());
            if report.warnings() > 0 {
                log::warn!("{} pair(s) could not be read", report.warnings());
            }
        }
        Command::Fixtures { count, seed, out, size } => {
            if count == 0 {
                return Err(Error::Config("--count must be at least 1".into()));
            }
            let seed = resolve_seed(seed)?;
            create_dir(&out)?;
            for (i, f) in make_spectral_fixtures(count, size, size, seed)?.iter().enumerate() {
                save_cube(&f.cube, &out.join(format!("fixture_{i:03}.hsc")))?;
                save_image(&f.rgb, &out.join(format!("fixture_{i:03}.png")))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
