use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dnpr_cli::config::{parse_config, Format};
use dnpr_cli::error::{CliError, CliResult};
use dnpr_cli::figures::run_figure;
use dnpr_cli::output::emit;
use dnpr_cli::run::{run, RunOutput};

#[derive(Parser)]
#[command(
    name = "dnpr",
    version,
    about = "NV-P1 level anti-crossing DNP simulations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path; overrides the config. Stdout when neither is set.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Subcommand)]
enum Command {
    /// Eigenlevels versus field.
    Levels(RunArgs),
    /// Avoided crossings and their gaps.
    Crossings(RunArgs),
    /// Matching field versus field angle.
    MatchingField(RunArgs),
    /// One field sweep from the pumped state.
    Sweep(RunArgs),
    /// Single-sweep polarization versus sweep rate.
    RateScan(RunArgs),
    /// Multi-cycle polarization versus low-to-high fraction.
    FractionScan(RunArgs),
    /// Static-field DNP spectrum.
    DnpSpectrum(RunArgs),
    /// Polarization versus sweep range.
    RangeScan(RunArgs),
    /// Defect-ensemble statistics.
    Geometry(RunArgs),
    /// Fit of the transfer model to rate data.
    Fit(RunArgs),
    /// Thermal polarization and enhancement accounting.
    Thermal(RunArgs),
    /// Runs a bundled figure configuration.
    Figure {
        name: String,
        /// Output directory.
        #[arg(long, default_value = "dnpr-figures")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Parses and validates a configuration without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

impl Command {
    fn kind(&self) -> Option<&'static str> {
        Some(match self {
            Command::Levels(_) => "levels",
            Command::Crossings(_) => "crossings",
            Command::MatchingField(_) => "matching-field",
            Command::Sweep(_) => "sweep",
            Command::RateScan(_) => "rate-scan",
            Command::FractionScan(_) => "fraction-scan",
            Command::DnpSpectrum(_) => "dnp-spectrum",
            Command::RangeScan(_) => "range-scan",
            Command::Geometry(_) => "geometry",
            Command::Fit(_) => "fit",
            Command::Thermal(_) => "thermal",
            Command::Figure { .. } | Command::Validate { .. } => return None,
        })
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("DNPR_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|n| *n > 0).ok_or_else(|| {
        CliError::Config(format!("DNPR_THREADS: `{v}` is not a positive integer"))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))
}

fn read_config(path: &Path) -> CliResult<(dnpr_cli::RunConfig, PathBuf)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let cfg = parse_config(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, dir))
}

fn report(out: &RunOutput) {
    eprintln!("seed: {}", out.envelope.seed);
    for w in &out.envelope.warnings {
        eprintln!("warning: {w}");
    }
}

fn execute(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    let kind = cli.command.kind();
    match cli.command {
        Command::Validate { config } => {
            let (cfg, _) = read_config(&config)?;
            eprintln!("ok: [{}]", cfg.experiment()?.kind());
            Ok(())
        }
        Command::Figure {
            name,
            out,
            seed,
            format,
        } => {
            let parts = run_figure(&name, seed)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
            for (stem, result) in &parts {
                report(result);
                let ext = match format {
                    Format::Csv => "csv",
                    Format::Json => "json",
                };
                let path = out.join(format!("{stem}.{ext}"));
                emit(result, Some(&path), format)?;
                eprintln!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Levels(a)
        | Command::Crossings(a)
        | Command::MatchingField(a)
        | Command::Sweep(a)
        | Command::RateScan(a)
        | Command::FractionScan(a)
        | Command::DnpSpectrum(a)
        | Command::RangeScan(a)
        | Command::Geometry(a)
        | Command::Fit(a)
        | Command::Thermal(a) => {
            let (mut cfg, dir) = read_config(&a.config)?;
            let found = cfg.experiment()?.kind();
            let want = kind.expect("experiment subcommand");
            if found != want {
                return Err(CliError::Config(format!(
                    "subcommand `{want}` does not match the [{found}] table of {}",
                    a.config.display()
                )));
            }
            if a.seed.is_some() {
                cfg.seed = a.seed;
            }
            if a.out.is_some() {
                cfg.output = a.out;
            }
            if let Some(f) = a.format {
                cfg.format = f;
            }
            cfg.validate()?;
            let result = run(&cfg, &dir)?;
            report(&result);
            emit(&result, cfg.output.as_deref(), cfg.format)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dnpr: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
