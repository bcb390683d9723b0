//! `tmap`: fit, apply and evaluate transport maps from the command line.
//!
//! Every successful command prints one JSON status line on stdout. Errors go
//! to stderr with exit code 1 (usage), 2 (data or file) or 3 (numerical).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::{json, Value};
use tmap::io::{self, IngestOptions};
use tmap::scenarios::{make_scenario, scenario_sample, Scenario};
use tmap::{
    baseline_exp_cov, baseline_samp_tap, coef_diagnostics, conditional_sample, dpm_gibbs, dpm_sample, fit_map,
    forward, inverse, kl_estimate, log_score, maximin_order, sample, DpmChain, DpmConfig, Error,
    FitConfig, FittedMap, GaussianModel, LogDensity, OrderConfig,
};

#[derive(Parser)]
#[command(name = "tmap", version, about = "Bayesian triangular transport maps for spatial fields")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML or JSON file with [order], [fit] and [dpm] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Replicates, one per row (`.csv`, or binary with a `.json` sidecar).
    #[arg(long)]
    data: PathBuf,
    /// Take logs of the data before modelling.
    #[arg(long)]
    log: bool,
}

#[derive(Args)]
struct OutArgs {
    /// Output matrix (`.csv`, or binary with a `.json` sidecar).
    #[arg(long)]
    out: PathBuf,
    /// Exponentiate outputs, undoing `--log`.
    #[arg(long)]
    exp: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Linear,
    Nonlin,
    SNonlin,
    Samptap,
    Expcov,
    Dpm,
}

#[derive(Subcommand)]
enum Command {
    /// Maximin ordering and conditioning sets, written as JSON.
    Order {
        #[arg(long)]
        locs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a map by empirical Bayes and save it.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        locs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Linear regressions only.
        #[arg(long)]
        linear: bool,
        /// Save the plug-in map instead of the posterior map.
        #[arg(long)]
        simplified: bool,
        #[arg(long)]
        no_standardize: bool,
    },
    /// Run the Dirichlet-process-mixture sampler and save the chain.
    FitDpm {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        locs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        burn_in: Option<usize>,
        #[arg(long)]
        thin: Option<usize>,
        #[arg(long)]
        no_standardize: bool,
    },
    /// Map fields to coefficients (columns in map order).
    Transform {
        #[arg(long)]
        map: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Map coefficients back to fields.
    Invert {
        #[arg(long)]
        map: PathBuf,
        /// Coefficients, one field per row, columns in map order.
        #[arg(long)]
        coefs: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Draw new fields from a map or DPM chain.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Draw fields sharing the first k coefficients of a reference field.
    Condsim {
        #[arg(long)]
        map: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Row of the data file used as reference.
        #[arg(long, default_value_t = 0)]
        row: usize,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Log-score of test fields, either for a saved model or a method fitted on --train.
    Score {
        #[arg(long, value_enum)]
        method: Option<Method>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        locs: Option<PathBuf>,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        log: bool,
        /// JSON report; per-field values also go to the same path with `.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// KL divergence from a simulated truth, regenerated from the scenario and its seed.
    Kl {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scenario: Scenario,
        /// Seed that was given to `simulate`.
        #[arg(long)]
        truth_seed: u64,
        #[arg(long)]
        test: PathBuf,
    },
    /// Simulate a benchmark scenario: locations, training and test fields.
    Simulate {
        #[arg(long)]
        scenario: Scenario,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        n_test: usize,
        #[arg(long)]
        out_dir: PathBuf,
        /// Write matrices as CSV instead of binary.
        #[arg(long)]
        csv: bool,
    },
    /// Coefficient summaries for held-out fields.
    Diagnose {
        #[arg(long)]
        map: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Treat rows as a time sequence and report lag-1 autocorrelation.
        #[arg(long)]
        sequence: bool,
        /// JSON summary; per-coordinate CSV goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    order: OrderConfig,
    fit: FitConfig,
    dpm: DpmConfig,
}

fn load_config(path: Option<&Path>) -> tmap::Result<FileConfig> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = fs::read_to_string(path)?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| Error::InvalidInput(format!("config {}: {e}", path.display())))
}

enum Model {
    Map(FittedMap),
    Chain(DpmChain),
    Gaussian(GaussianModel),
}

impl Model {
    fn density(&self) -> &dyn LogDensity {
        match self {
            Model::Map(m) => m,
            Model::Chain(c) => c,
            Model::Gaussian(g) => g,
        }
    }
}

fn load_model(path: &Path) -> tmap::Result<Model> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"BTMDPM") {
        Ok(Model::Chain(io::chain_from_bytes(&bytes)?))
    } else {
        Ok(Model::Map(io::map_from_bytes(&bytes)?))
    }
}

fn read_data(args: &DataArgs) -> tmap::Result<DMatrix<f64>> {
    read_values(&args.data, args.log)
}

fn read_values(path: &Path, log: bool) -> tmap::Result<DMatrix<f64>> {
    Ok(io::ingest(path, IngestOptions { log_transform: log, standardize: false })?.values)
}

fn write_out(args: &OutArgs, m: DMatrix<f64>) -> tmap::Result<()> {
    let m = if args.exp { m.map(f64::exp) } else { m };
    io::write_matrix(&args.out, &m)
}

fn rows(m: &DMatrix<f64>) -> impl Iterator<Item = Vec<f64>> + '_ {
    (0..m.nrows()).map(move |r| m.row(r).iter().copied().collect())
}

fn from_rows(v: Vec<Vec<f64>>, n_cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(v.len(), n_cols, |r, c| v[r][c])
}

fn fit_method(method: Method, y: &DMatrix<f64>, locs: &Path, cfg: &FileConfig, rng: &mut ChaCha8Rng) -> tmap::Result<Model> {
    let locs = io::read_locations(locs)?;
    let fit = |linear: bool, simplified: bool| {
        let config = FitConfig { linear_only: linear || cfg.fit.linear_only, simplified, ..cfg.fit.clone() };
        fit_map(y, &locs, &config).map(Model::Map)
    };
    match method {
        Method::Linear => fit(true, false),
        Method::Nonlin => fit(false, false),
        Method::SNonlin => fit(false, true),
        Method::Samptap => baseline_samp_tap(y, &locs).map(Model::Gaussian),
        Method::Expcov => baseline_exp_cov(y, &locs).map(Model::Gaussian),
        Method::Dpm => {
            let ordering = maximin_order(&locs, &OrderConfig { m_max: cfg.dpm.m_max, first: cfg.fit.first_point })?;
            dpm_gibbs(y, ordering, &cfg.dpm, rng).map(Model::Chain)
        }
    }
}

fn run(cli: Cli) -> tmap::Result<Value> {
    let cfg = load_config(cli.config.as_deref())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    let status = match cli.command {
        Command::Order { locs, out } => {
            let locs = io::read_locations(&locs)?;
            let ordering = maximin_order(&locs, &cfg.order)?;
            fs::write(&out, serde_json::to_vec_pretty(&ordering)?)?;
            json!({ "command": "order", "n_vars": ordering.len(), "out": out })
        }
        Command::Fit { data, locs, out, linear, simplified, no_standardize } => {
            let y = read_data(&data)?;
            let locs = io::read_locations(&locs)?;
            let config = FitConfig {
                linear_only: linear || cfg.fit.linear_only,
                simplified: simplified || cfg.fit.simplified,
                standardize: cfg.fit.standardize && !no_standardize,
                ..cfg.fit.clone()
            };
            let map = fit_map(&y, &locs, &config)?;
            io::save_map(&out, &map)?;
            info!("fitted map with loglik {}", map.loglik());
            json!({
                "command": "fit", "n": map.n(), "n_vars": map.n_vars(), "loglik": map.loglik(),
                "theta": map.hyper().theta.to_array().map(|v| if v.is_finite() { Some(v) } else { None }),
                "out": out,
            })
        }
        Command::FitDpm { data, locs, out, iterations, burn_in, thin, no_standardize } => {
            let y = read_data(&data)?;
            let locs = io::read_locations(&locs)?;
            let mut config = cfg.dpm.clone();
            config.iterations = iterations.unwrap_or(config.iterations);
            config.burn_in = burn_in.unwrap_or(config.burn_in);
            config.thin = thin.unwrap_or(config.thin);
            config.standardize &= !no_standardize;
            let ordering = maximin_order(&locs, &OrderConfig { m_max: config.m_max, first: cfg.order.first })?;
            let chain = dpm_gibbs(&y, ordering, &config, &mut rng)?;
            io::save_chain(&out, &chain)?;
            let rates = chain.acceptance().map(|a| if a.is_finite() { Some(a) } else { None });
            json!({ "command": "fit-dpm", "states": chain.states().len(), "acceptance": rates, "out": out })
        }
        Command::Transform { map, data, out } => {
            let map = io::load_map(&map)?;
            let y = read_data(&data)?;
            let mut clamped = 0;
            let z = rows(&y)
                .map(|f| {
                    let c = forward(&map, &f)?;
                    clamped += c.clamped.len();
                    Ok(c.z)
                })
                .collect::<tmap::Result<Vec<_>>>()?;
            io::write_matrix(&out, &from_rows(z, map.n_vars()))?;
            json!({ "command": "transform", "fields": y.nrows(), "clamped": clamped, "out": out })
        }
        Command::Invert { map, coefs, out } => {
            let map = io::load_map(&map)?;
            let z = io::read_matrix(&coefs)?;
            let y = rows(&z).map(|c| inverse(&map, &c)).collect::<tmap::Result<Vec<_>>>()?;
            let count = y.len();
            write_out(&out, from_rows(y, map.n_vars()))?;
            json!({ "command": "invert", "fields": count, "out": out.out })
        }
        Command::Sample { model, count, out } => {
            let draws = match load_model(&model)? {
                Model::Map(m) => sample(&m, &mut rng, count)?,
                Model::Chain(c) => dpm_sample(&c, &mut rng, count)?,
                Model::Gaussian(_) => unreachable!("baselines are never loaded from disk"),
            };
            write_out(&out, draws)?;
            json!({ "command": "sample", "fields": count, "out": out.out })
        }
        Command::Condsim { map, data, row, k, count, out } => {
            let map = io::load_map(&map)?;
            let y = read_data(&data)?;
            if row >= y.nrows() {
                return Err(Error::InvalidInput(format!("row {row} out of range for {} fields", y.nrows())));
            }
            let reference: Vec<f64> = y.row(row).iter().copied().collect();
            let draws =
                (0..count).map(|_| conditional_sample(&map, &reference, k, &mut rng)).collect::<tmap::Result<Vec<_>>>()?;
            write_out(&out, from_rows(draws, map.n_vars()))?;
            json!({ "command": "condsim", "fields": count, "k": k, "out": out.out })
        }
        Command::Score { method, model, train, locs, test, log, out } => {
            let test_y = read_values(&test, log)?;
            let (model, label, n) = match (model, method) {
                (Some(path), None) => {
                    let m = load_model(&path)?;
                    (m, path.display().to_string(), None)
                }
                (None, Some(method)) => {
                    let (Some(train), Some(locs)) = (train, locs) else {
                        return Err(Error::InvalidInput("--method needs --train and --locs".into()));
                    };
                    let y = read_values(&train, log)?;
                    let label = method.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default();
                    (fit_method(method, &y, &locs, &cfg, &mut rng)?, label, Some(y.nrows()))
                }
                _ => return Err(Error::InvalidInput("give exactly one of --model and --method".into())),
            };
            let mut report = log_score(model.density(), &test_y, &label)?;
            report.n = n;
            report.seed = Some(cli.seed);
            if let Some(path) = &out {
                fs::write(path, serde_json::to_vec_pretty(&report)?)?;
                fs::write(path.with_extension("csv"), report.to_csv())?;
            }
            json!({
                "command": "score", "method": report.method, "log_score": report.mean, "se": report.se,
                "excluded": report.excluded, "fields": test_y.nrows(),
            })
        }
        Command::Kl { model, scenario, truth_seed, test } => {
            let (truth, _) = make_scenario(scenario, &mut ChaCha8Rng::seed_from_u64(truth_seed))?;
            let model = load_model(&model)?;
            let fields = io::read_matrix(&test)?;
            let kl = kl_estimate(&truth, model.density(), &fields)?;
            json!({ "command": "kl", "kl": kl.kl, "se": kl.se, "excluded": kl.excluded, "fields": fields.nrows() })
        }
        Command::Simulate { scenario, n, n_test, out_dir, csv } => {
            fs::create_dir_all(&out_dir)?;
            let (truth, locs) = make_scenario(scenario, &mut rng)?;
            let ext = if csv { "csv" } else { "bin" };
            let train_path = out_dir.join(format!("train.{ext}"));
            io::write_locations_csv(&out_dir.join("locations.csv"), &locs)?;
            io::write_matrix(&train_path, &scenario_sample(&truth, &mut rng, n))?;
            let mut status = json!({ "command": "simulate", "scenario": scenario.to_string(), "n": n, "train": train_path });
            if n_test > 0 {
                let test_path = out_dir.join(format!("test.{ext}"));
                io::write_matrix(&test_path, &scenario_sample(&truth, &mut rng, n_test))?;
                status["test"] = json!(test_path);
            }
            status
        }
        Command::Diagnose { map, data, sequence, out } => {
            let map = io::load_map(&map)?;
            let y = read_data(&data)?;
            let d = coef_diagnostics(&map, &y, sequence)?;
            fs::write(&out, serde_json::to_vec_pretty(&d)?)?;
            fs::write(out.with_extension("csv"), d.to_csv())?;
            json!({
                "command": "diagnose", "pooled_mean": d.pooled_mean, "pooled_var": d.pooled_var,
                "qq_max_abs_dev": d.qq_max_abs_dev, "clamped": d.clamped, "out": out,
            })
        }
    };
    Ok(status)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidInput(_) => 1,
        Error::Numerical(_) => 3,
        Error::Data(_) | Error::Format(_) | Error::Io(_) | Error::Json(_) => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(mut status) => {
            status["status"] = json!("ok");
            println!("{status}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
