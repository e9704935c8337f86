use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mkqr::io::{self, CsvOptions, CurveTable, ExperimentConfig, KChoice, ReportBundle, RunMeta};
use mkqr::qif::BasisKind;
use mkqr::wi::Method;
use mkqr::{MkqrError, Result};

#[derive(Parser)]
#[command(name = "mkqr", version, about = "Multi-kink quantile regression for longitudinal data")]
struct Cli {
    /// Worker threads for parallel studies (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Base seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Long-format CSV: subject_id, x, y and covariates.
    csv: PathBuf,
    /// Covariate columns, comma separated (needs a header row).
    #[arg(long = "z-cols", value_delimiter = ',')]
    z_cols: Vec<String>,
    /// Quantile levels, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    tau: Vec<f64>,
    /// Output directory; without it report.json goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "wi")]
    method: Method,
    /// Number of kinks, or `auto` for SIC selection.
    #[arg(long, default_value = "auto")]
    k: KChoice,
    /// Largest kink count tried by `auto`.
    #[arg(long, default_value_t = 3)]
    kmax: usize,
    /// Working-correlation basis for `--method qif`.
    #[arg(long, default_value = "CS-2")]
    basis: BasisKind,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate kink models at each quantile level.
    Fit(FitArgs),
    /// SIC table over k = 0..=kmax and the selected fit.
    Select(FitArgs),
    /// Bootstrap test for the existence of a kink.
    Test {
        #[command(flatten)]
        data: DataArgs,
        /// Bootstrap replicates.
        #[arg(long = "B", alias = "b", default_value_t = 500)]
        b: usize,
        /// Grid points between the 10th and 90th percentiles of x.
        #[arg(long, default_value_t = 100)]
        grid_size: usize,
    },
    /// Run a Monte Carlo experiment from a config file or bundled name.
    Simulate {
        /// Path to a key = value config, or one of table1-desk, table2-desk, power-desk.
        config: String,
        #[arg(long, default_value = "sim-out")]
        out: PathBuf,
        /// Use the full replication counts from the config.
        #[arg(long)]
        full_scale: bool,
    },
}

const DEFAULT_SEED: u64 = 1;

fn load(data: &DataArgs) -> Result<io::PanelRead> {
    let read = io::read_panel_file(&data.csv, &CsvOptions { z_cols: data.z_cols.clone() })?;
    if read.dropped > 0 {
        eprintln!("dropped {} of {} rows with missing or non-finite values", read.dropped, read.rows_in);
    }
    Ok(read)
}

fn emit(bundle: &ReportBundle, out: Option<&Path>) -> Result<()> {
    match out {
        Some(dir) => {
            let files = bundle.write_dir(dir)?;
            eprintln!("wrote {} to {}", files.join(", "), dir.display());
        }
        None => println!("{}", bundle.to_json()?),
    }
    Ok(())
}

fn run_fit(args: &FitArgs, force_auto: bool, command: &str, seed: u64) -> Result<()> {
    let read = load(&args.data)?;
    let k = match (force_auto, args.k) {
        (true, _) | (_, KChoice::Auto { .. }) => KChoice::Auto { kmax: args.kmax },
        (false, fixed) => fixed,
    };
    let fits = io::fit_levels(&read.data, &args.data.tau, args.method, args.basis, k)?;
    for f in &fits {
        eprintln!("tau {}: K = {}, S_n = {:.6}, SIC = {:.6}", f.tau, f.k_hat, f.fit.objective, f.fit.sic);
        if !f.fit.converged {
            eprintln!("WARNING: tau {}: estimator did not converge (converged=false)", f.tau);
        }
    }
    let curves = CurveTable::from_fits(&read.data, &fits);
    let bundle = ReportBundle {
        meta: RunMeta::new(command, seed, Some(args.data.csv.display().to_string()), &read),
        fits,
        tests: Vec::new(),
        curves: Some(curves),
    };
    emit(&bundle, args.data.out.as_deref())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| MkqrError::Config(format!("thread pool: {e}")))?;
    }
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    match &cli.cmd {
        Command::Fit(a) => run_fit(a, false, "fit", seed),
        Command::Select(a) => run_fit(a, true, "select", seed),
        Command::Test { data, b, grid_size } => {
            let read = load(data)?;
            let tests = io::test_levels(&read.data, &data.tau, *b, seed, *grid_size)?;
            for t in &tests {
                eprintln!("tau {}: T_n = {:.6}, p = {}", t.tau.value(), t.t_n, t.p_value);
            }
            let bundle = ReportBundle {
                meta: RunMeta::new("test", seed, Some(data.csv.display().to_string()), &read),
                fits: Vec::new(),
                tests,
                curves: None,
            };
            emit(&bundle, data.out.as_deref())
        }
        Command::Simulate { config, out, full_scale } => {
            let text = match io::bundled_config(config) {
                Some(t) => t.to_string(),
                None => std::fs::read_to_string(config)
                    .map_err(|e| MkqrError::Config(format!("cannot read config '{config}': {e}")))?,
            };
            let mut cfg = ExperimentConfig::parse(&text)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let report = cfg.run(*full_scale)?;
            for f in &report.failures {
                eprintln!("replication failed: {f}");
            }
            let mut files = io::write_experiment(&report, out)?;
            std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
            files.push("report.json".into());
            eprintln!("wrote {} to {}", files.join(", "), out.display());
            Ok(())
        }
    }
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
