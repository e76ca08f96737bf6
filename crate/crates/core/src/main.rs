use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stfusion::compare::{compare_linearized_nonlinear, CompareReport};
use stfusion::config::{digest_file, schema_from_header, ConfigError, Manifest, Overrides, RunConfig};
use stfusion::cv::{cv_partition, format_table, run_cv, write_reports_csv};
use stfusion::data::{Dataset, DatasetPaths};
use stfusion::fit::{fit, FitResult, SummaryRow};
use stfusion::hyper::ModelFlags;
use stfusion::prediction::{predict, rao_blackwell, write_predictions, PredictionGrid};
use stfusion::simulate::{simulate, write_truth, ScenarioConfig};
use stfusion::smooth::write_knots;

/// Thread count for parallel chains and folds.
const THREADS_ENV: &str = "STFUSION_THREADS";

#[derive(Parser)]
#[command(name = "stfusion", version, about = "Fuse daily and multiday monitoring data in a latent spatio-temporal model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Posterior fit: archive plus parameter summary.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Predict the latent process on a grid from a fit archive.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        fit: PathBuf,
        /// CSV with `x_km,y_km,day` and the base covariate columns.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the predictive standard deviation.
        #[arg(long)]
        sd: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Spatial cross-validation of held-out outdoor readings.
    Cv {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Score all eight model variants instead of `--model`.
        #[arg(long)]
        all_models: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Simulate a network from a scenario file or a built-in preset.
    Simulate {
        #[arg(long, conflicts_with = "preset")]
        scenario: Option<PathBuf>,
        /// One of: small, linearization, cv-benchmark.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare linearized and exact nonlinear posteriors (model 0,0,1).
    Compare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Prediction grid; defaults to a lattice over the site bounding box.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Model flags `U,GST,A`.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long = "burnin")]
    burn_in: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    taper_range: Option<f64>,
    #[arg(long)]
    spatial_knots: Option<usize>,
    #[arg(long)]
    temporal_knots: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    /// TOML file; its keys override the flags above.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let flags = Overrides {
            model: self.model.clone(),
            chains: self.chains,
            iters: self.iters,
            burn_in: self.burn_in,
            seed: self.seed,
            taper_range: self.taper_range,
            spatial_knots: self.spatial_knots,
            temporal_knots: self.temporal_knots,
            delta: self.delta,
            ..Overrides::default()
        };
        match &self.config {
            Some(p) => RunConfig::resolve(&[&flags, &Overrides::load(p)?]),
            None => RunConfig::resolve(&[&flags]),
        }
    }
}

enum Failure {
    Config(String),
    Runtime(String),
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn load_dataset(dir: &Path, cfg: &RunConfig) -> Result<(Dataset, Vec<PathBuf>), Failure> {
    let paths = DatasetPaths::in_dir(dir);
    let schema = match &cfg.schema {
        Some(s) => s.clone(),
        None => schema_from_header(&paths.covariates).map_err(config_err)?,
    };
    let ds = Dataset::load(&paths, &schema).map_err(config_err)?;
    Ok((ds, vec![paths.sites, paths.readings, paths.covariates]))
}

fn finish_manifest(mut m: Manifest, inputs: &[PathBuf], outputs: &[&Path], path: &Path) -> Result<(), Failure> {
    for p in inputs {
        m.inputs.push(digest_file(p).map_err(runtime)?);
    }
    m.outputs = outputs.iter().map(|p| p.display().to_string()).collect();
    m.write(path).map_err(runtime)
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path).map_err(runtime)?;
    w.write_record(["parameter", "mean", "q2.5", "q50", "q97.5", "ess"]).map_err(runtime)?;
    for r in rows {
        w.write_record([
            r.name.clone(),
            r.mean.to_string(),
            r.q025.to_string(),
            r.q50.to_string(),
            r.q975.to_string(),
            r.ess.to_string(),
        ])
        .map_err(runtime)?;
    }
    w.flush().map_err(runtime)
}

fn print_summary(rows: &[SummaryRow]) {
    println!("{:<22} {:>11} {:>11} {:>11} {:>11} {:>8}", "parameter", "mean", "2.5%", "50%", "97.5%", "ess");
    for r in rows {
        println!(
            "{:<22} {:>11.4} {:>11.4} {:>11.4} {:>11.4} {:>8.0}",
            r.name, r.mean, r.q025, r.q50, r.q975, r.ess
        );
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Fit { data, out, common } => {
            let cfg = common.resolve().map_err(config_err)?;
            let (ds, inputs) = load_dataset(&data, &cfg)?;
            std::fs::create_dir_all(&out).map_err(runtime)?;
            let opts = cfg.fit_options();
            let (res, sys) = fit(&ds, &opts).map_err(runtime)?;
            let mut rows = res.summary(&sys);
            rows.extend(res.coefficient_summary(&sys, &ds.schema.predictor_names()));
            print_summary(&rows);
            let archive = out.join("fit.json");
            let summary = out.join("summary.csv");
            let knots = out.join("knots.csv");
            res.save(&archive).map_err(runtime)?;
            write_summary(&summary, &rows)?;
            write_knots(&knots, &res.knots).map_err(runtime)?;
            let mut m = Manifest::new("fit", &cfg);
            m.streams = (0..opts.chains as u64).collect();
            finish_manifest(m, &inputs, &[&archive, &summary, &knots], &out.join("manifest.json"))
        }
        Command::Predict {
            data,
            fit: fit_path,
            grid,
            out,
            sd,
            common,
        } => {
            let cfg = common.resolve().map_err(config_err)?;
            let (ds, mut inputs) = load_dataset(&data, &cfg)?;
            let res = FitResult::load(&fit_path).map_err(config_err)?;
            let sys = res.system(&ds).map_err(runtime)?;
            let mut g = PredictionGrid::read_csv(&grid, &ds.schema).map_err(config_err)?;
            g.want_sd = sd;
            let pred = if res.draws.is_empty() {
                let eval = sys.evaluate(&res.mode_hyper).map_err(runtime)?;
                let v = nalgebra::DVector::from_vec(res.v_hat.clone());
                predict(&g, &sys, &eval, &v).map_err(runtime)?
            } else {
                let states = res.posterior_states(&sys).map_err(runtime)?;
                let mut p = rao_blackwell(&g, &sys, &states).map_err(runtime)?;
                if !sd {
                    p.sd = None;
                }
                p
            };
            write_predictions(&out, &g, &pred).map_err(runtime)?;
            inputs.push(fit_path.clone());
            inputs.push(grid.clone());
            finish_manifest(Manifest::new("predict", &cfg), &inputs, &[&out], &sibling(&out, ".manifest.json"))
        }
        Command::Cv {
            data,
            out,
            all_models,
            common,
        } => {
            let cfg = common.resolve().map_err(config_err)?;
            let (ds, inputs) = load_dataset(&data, &cfg)?;
            let partition = cv_partition(&ds, &cfg.partition_options()).map_err(runtime)?;
            let models: Vec<ModelFlags> = if all_models {
                ModelFlags::all().to_vec()
            } else {
                vec![cfg.model]
            };
            let opts = cfg.cv_options();
            let mut reports = Vec::new();
            for flags in models {
                reports.push(run_cv(&ds, flags, &partition, &opts).map_err(runtime)?);
            }
            print!("{}", format_table(&reports));
            let file = File::create(&out).map_err(runtime)?;
            write_reports_csv(&reports, file).map_err(runtime)?;
            let part_path = sibling(&out, ".partition.json");
            let groups: Vec<Vec<&str>> = partition
                .groups
                .iter()
                .map(|g| g.iter().map(|&s| ds.sites[s].id.0.as_str()).collect())
                .collect();
            std::fs::write(&part_path, serde_json::to_string_pretty(&groups).map_err(runtime)?).map_err(runtime)?;
            finish_manifest(Manifest::new("cv", &cfg), &inputs, &[&out, &part_path], &sibling(&out, ".manifest.json"))
        }
        Command::Simulate {
            scenario,
            preset,
            out,
            common,
        } => {
            let cfg = common.resolve().map_err(config_err)?;
            let mut sc = match (&scenario, &preset) {
                (Some(p), _) => ScenarioConfig::load(p).map_err(config_err)?,
                (None, Some(name)) => ScenarioConfig::preset(name).ok_or_else(|| {
                    Failure::Config(format!(
                        "unknown preset `{name}`; expected one of {}",
                        ScenarioConfig::PRESETS.join(", ")
                    ))
                })?,
                (None, None) => ScenarioConfig::default(),
            };
            if let Some(s) = common.seed {
                sc.seed = s;
            }
            let (ds, truth) = simulate(&sc).map_err(|e| match e {
                stfusion::simulate::SimulateError::Infeasible(_) | stfusion::simulate::SimulateError::Config { .. } => {
                    config_err(e)
                }
                other => runtime(other),
            })?;
            std::fs::create_dir_all(&out).map_err(runtime)?;
            let paths = DatasetPaths::in_dir(&out);
            ds.write(&paths).map_err(runtime)?;
            write_truth(&out, &ds, &truth).map_err(runtime)?;
            let sc_path = out.join("scenario.toml");
            std::fs::write(&sc_path, sc.to_toml()).map_err(runtime)?;
            println!("{} sites, {} readings written to {}", ds.sites.len(), ds.readings.len(), out.display());
            let mut m = Manifest::new("simulate", &cfg);
            m.seed = sc.seed;
            let inputs: Vec<PathBuf> = scenario.into_iter().collect();
            let written = [paths.sites.as_path(), paths.readings.as_path(), paths.covariates.as_path(), &sc_path];
            finish_manifest(m, &inputs, &written, &out.join("manifest.json"))
        }
        Command::Compare {
            data,
            out,
            grid,
            common,
        } => {
            let cfg = common.resolve().map_err(config_err)?;
            let (ds, mut inputs) = load_dataset(&data, &cfg)?;
            let g = match &grid {
                Some(p) => {
                    inputs.push(p.clone());
                    PredictionGrid::read_csv(p, &ds.schema).map_err(config_err)?
                }
                None => default_grid(&ds)?,
            };
            let report: CompareReport = compare_linearized_nonlinear(&ds, &g, &cfg.compare_options()).map_err(runtime)?;
            print!("{}", report.format());
            let text = serde_json::to_string_pretty(&report).map_err(runtime)?;
            let mut f = File::create(&out).map_err(runtime)?;
            f.write_all(text.as_bytes()).map_err(runtime)?;
            finish_manifest(Manifest::new("compare", &cfg), &inputs, &[&out], &sibling(&out, ".manifest.json"))
        }
    }
}

/// 6 x 6 lattice over the site bounding box every 15 days, for intercept-only data.
fn default_grid(ds: &Dataset) -> Result<PredictionGrid, Failure> {
    if ds.schema.width() != 1 {
        return Err(Failure::Config(
            "data carry covariates; pass --grid with covariate columns".into(),
        ));
    }
    let (lo, hi) = ds.readings.iter().fold((u32::MAX, 0), |(a, b), r| (a.min(r.start_day), b.max(r.end_day())));
    let days: Vec<u32> = (lo..=hi).step_by(15).collect();
    let extent = ds
        .sites
        .iter()
        .map(|s| s.point.x_km.max(s.point.y_km))
        .fold(0.0, f64::max);
    Ok(PredictionGrid::lattice(extent, 6, &days, &[1.0]))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Ok(n) = std::env::var(THREADS_ENV) {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: {THREADS_ENV} must be a positive integer, got `{n}`");
                return ExitCode::from(1);
            }
        }
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error[config]: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error[runtime]: {m}");
            ExitCode::from(2)
        }
    }
}
