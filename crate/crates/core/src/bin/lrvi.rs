use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use lrvi::bounds::{bound_report, check_extendibility};
use lrvi::cli::bench::{run_bench, to_csv, BenchSpec, Family};
use lrvi::cli::cluster::cluster_columns;
use lrvi::cli::format::ModelFile;
use lrvi::cli::obs::{parse_observations, ObsMatrix};
use lrvi::cli::pipeline::{find_variational_rhm, lift_ground_table, parfactor_atoms, run_pipeline, ErrorDoc, FitCache, Method, PipelineConfig, Query, Timings};
use lrvi::cli::synthetic::{generate, SyntheticSpec};
use lrvi::error::Error;
use lrvi::lve::Observation;
use lrvi::math::stage_seed;
use lrvi::model::{ParametricDensity, Potential};

#[derive(Parser)]
#[command(name = "lrvi", version, about = "Lifted variational inference for relational hybrid models")]
struct Cli {
    /// Top-level seed; every stage derives its own seed from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Refit every parfactor instead of reading the fit cache.
    #[arg(long, global = true)]
    no_cache: bool,
    /// Largest component count for fits and during elimination.
    #[arg(long, global = true, default_value_t = 64)]
    k_cap: usize,
    /// Total-variation tolerance for fits.
    #[arg(long, global = true, default_value_t = 1e-3)]
    tol: f64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct QueryArgs {
    /// Model file (text or JSON).
    model: PathBuf,
    /// Observation file (CSV or JSON).
    #[arg(long)]
    obs: Option<PathBuf>,
    /// `marginal:A,B`, `pmf:A`, `cdf:A:t` or `density:A:x`.
    #[arg(long)]
    query: String,
}

#[derive(Subcommand)]
enum Command {
    /// Fit every parfactor and print the variational model.
    Lift {
        model: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Lifted variable elimination.
    Infer(QueryArgs),
    /// Lifted Gibbs sampling over the latents.
    Mcmc {
        #[command(flatten)]
        q: QueryArgs,
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
        #[arg(long, default_value_t = 1_000)]
        burn_in: usize,
    },
    /// Answer a query by elimination and by sampling and compare.
    Verify {
        #[command(flatten)]
        q: QueryArgs,
        #[arg(long, default_value_t = 20_000)]
        steps: usize,
        /// Fail when the answers differ by more than this (TV for pmfs).
        #[arg(long, default_value_t = 0.05)]
        max_diff: f64,
    },
    /// Error bounds from the model's extendibility declarations.
    Bound {
        model: PathBuf,
        /// Normalizing constant to divide the model bound by.
        #[arg(long)]
        z: Option<f64>,
    },
    /// Whether a one-atom binary table extends to a larger population.
    ExtendCheck {
        model: PathBuf,
        #[arg(long)]
        parfactor: String,
        #[arg(long)]
        n_bar: usize,
    },
    /// k-means grouping of the columns of a CSV matrix.
    Cluster {
        csv: PathBuf,
        #[arg(long)]
        k: usize,
    },
    /// Benchmark sweep written as CSV.
    Bench {
        #[arg(long, value_enum, default_value = "job-house")]
        family: FamilyArg,
        #[arg(long, value_delimiter = ',', default_value = "16,64,256")]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
        #[arg(long, default_value_t = 1_000)]
        burn_in: usize,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Write a synthetic well-level matrix as CSV.
    Synth {
        #[arg(long, default_value_t = 480)]
        rows: usize,
        #[arg(long, default_value_t = 3420)]
        columns: usize,
        #[arg(long, default_value_t = 92)]
        regimes: usize,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum FamilyArg {
    JobHouse,
    Groundwater,
}

/// A failure with its exit status and error document.
struct Failure {
    code: u8,
    doc: ErrorDoc,
}

impl Failure {
    fn input(e: Error) -> Self {
        Failure {
            code: 1,
            doc: ErrorDoc {
                stage: "input".into(),
                parfactor: e.parfactor().map(str::to_string),
                message: e.to_string(),
            },
        }
    }

    fn stage(stage: &str, e: Error) -> Self {
        Failure {
            code: 2,
            doc: ErrorDoc {
                stage: stage.into(),
                parfactor: e.parfactor().map(str::to_string),
                message: e.to_string(),
            },
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn read(path: &Path) -> std::result::Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::input(Error::Io(format!("{}: {e}", path.display()))))
}

fn load_model(path: &Path) -> std::result::Result<ModelFile, Failure> {
    let m = ModelFile::parse(&read(path)?).map_err(Failure::input)?;
    m.validate().map_err(Failure::input)?;
    Ok(m)
}

fn load_obs(model: &ModelFile, path: Option<&Path>) -> std::result::Result<Vec<Observation>, Failure> {
    let Some(path) = path else { return Ok(Vec::new()) };
    let atoms = model.atoms.iter().map(|a| (a.name.clone(), a.clone())).collect::<BTreeMap<_, _>>();
    parse_observations(&read(path)?, &atoms).map_err(Failure::input)
}

fn parse_query(s: &str) -> std::result::Result<Query, Failure> {
    s.parse().map_err(Failure::input)
}

fn emit(value: &impl Serialize) {
    let text = serde_json::to_string_pretty(value).expect("documents serialize");
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn write_or_print(output: Option<&Path>, text: &str) -> Outcome {
    match output {
        Some(p) => fs::write(p, text).map_err(|e| Failure::stage("output", Error::Io(e.to_string()))),
        None => {
            let _ = std::io::stdout().write_all(text.as_bytes());
            Ok(())
        }
    }
}

struct Ctx {
    cfg: PipelineConfig,
}

impl Ctx {
    fn cache(&self, model: &Path) -> Option<FitCache> {
        self.cfg.use_cache.then(|| FitCache::beside(model))
    }

    fn pipeline(&self, q: &QueryArgs, method: Method, cfg: &PipelineConfig) -> std::result::Result<(serde_json::Value, Timings), Failure> {
        let model = load_model(&q.model)?;
        let obs = load_obs(&model, q.obs.as_deref())?;
        let query = parse_query(&q.query)?;
        let (doc, timings) = run_pipeline(&model, &obs, &query, method, cfg, self.cache(&q.model).as_ref())
            .map_err(|e| Failure::stage(&e.stage, e.error))?;
        Ok((serde_json::to_value(doc).expect("documents serialize"), timings))
    }
}

fn run(cli: Cli) -> Outcome {
    let mut cfg = PipelineConfig {
        seed: cli.seed,
        tol: cli.tol,
        k_cap: cli.k_cap,
        use_cache: !cli.no_cache,
        ..Default::default()
    };
    cfg.lve.k_cap = cli.k_cap;
    let ctx = Ctx { cfg };
    match cli.command {
        Command::Lift { model: path, json } => {
            let model = load_model(&path)?;
            let mut timings = Timings::default();
            let (fitted, reports) = find_variational_rhm(&model, &ctx.cfg, ctx.cache(&path).as_ref(), &mut timings)
                .map_err(|e| Failure::stage("fit", e))?;
            if json {
                emit(&json!({ "model": fitted, "fit_reports": reports, "timings": timings }));
            } else {
                print!("{}", fitted.to_text().map_err(|e| Failure::stage("output", e))?);
                eprintln!("{}", serde_json::to_string(&timings).expect("timings serialize"));
            }
        }
        Command::Infer(q) => {
            let (doc, timings) = ctx.pipeline(&q, Method::Ve, &ctx.cfg)?;
            emit(&json!({ "result": doc, "timings": timings }));
        }
        Command::Mcmc { q, steps, burn_in } => {
            let mut cfg = ctx.cfg.clone();
            cfg.mcmc.steps = steps;
            cfg.mcmc.burn_in = burn_in;
            let (doc, timings) = ctx.pipeline(&q, Method::Mcmc, &cfg)?;
            emit(&json!({ "result": doc, "timings": timings }));
        }
        Command::Verify { q, steps, max_diff } => {
            let mut cfg = ctx.cfg.clone();
            cfg.mcmc.steps = steps;
            cfg.mcmc.burn_in = steps / 10;
            let (ve, _) = ctx.pipeline(&q, Method::Ve, &cfg)?;
            let (mc, _) = ctx.pipeline(&q, Method::Mcmc, &cfg)?;
            let est = |d: &serde_json::Value| -> std::result::Result<Vec<f64>, Failure> {
                serde_json::from_value(d["estimate"].clone()).map_err(|_| {
                    Failure::input(Error::InvalidArgument("verify needs a pmf, cdf or density query".into()))
                })
            };
            let (a, b) = (est(&ve)?, est(&mc)?);
            let diff = if a.len() > 1 {
                0.5 * a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>()
            } else {
                (a[0] - b[0]).abs()
            };
            let ok = diff <= max_diff;
            emit(&json!({ "ve": a, "mcmc": b, "difference": diff, "max_difference": max_diff, "agree": ok }));
            if !ok {
                return Err(Failure::stage(
                    "verify",
                    Error::InvalidArgument(format!("answers differ by {diff} > {max_diff}")),
                ));
            }
        }
        Command::Bound { model: path, z } => {
            let model = load_model(&path)?;
            let rhm = model.to_rhm().map_err(Failure::input)?;
            let r = bound_report(&rhm, &model.extendibility, z).map_err(|e| Failure::stage("bound", e))?;
            emit(&r);
        }
        Command::ExtendCheck { model: path, parfactor, n_bar } => {
            let model = load_model(&path)?;
            let g = model
                .parfactors
                .iter()
                .find(|g| g.name == parfactor)
                .ok_or_else(|| Failure::input(Error::InvalidArgument(format!("no parfactor `{parfactor}`"))))?;
            let t = match &g.potential {
                Potential::HistTable(t) => t.clone(),
                Potential::Parametric(ParametricDensity::GroundTable { .. }) => {
                    parfactor_atoms(&model, g)
                    .and_then(|atoms| lift_ground_table(g, &atoms))
                    .map_err(|e| Failure::input(e.in_parfactor(&parfactor)))?
                }
                _ => {
                    return Err(Failure::input(
                        Error::InvalidArgument("not a discrete table".to_string()).in_parfactor(&parfactor),
                    ))
                }
            };
            let r = check_extendibility(&t, n_bar).map_err(|e| Failure::stage("extend-check", e.in_parfactor(&parfactor)))?;
            emit(&r);
        }
        Command::Cluster { csv, k } => {
            let m = ObsMatrix::parse_csv(&read(&csv)?).map_err(Failure::input)?;
            let c = cluster_columns(&m, k, stage_seed(ctx.cfg.seed, "cluster")).map_err(|e| Failure::stage("cluster", e))?;
            let groups: BTreeMap<usize, Vec<&str>> = c.assignment.iter().enumerate().fold(BTreeMap::new(), |mut acc, (j, &g)| {
                acc.entry(g).or_insert_with(Vec::new).push(m.columns[j].as_str());
                acc
            });
            emit(&json!({ "sizes": c.sizes, "centroids": c.centroids, "iterations": c.iterations, "groups": groups }));
        }
        Command::Bench {
            family,
            sizes,
            seeds,
            steps,
            burn_in,
            output,
        } => {
            let spec = BenchSpec {
                family: match family {
                    FamilyArg::JobHouse => Family::JobHouse,
                    FamilyArg::Groundwater => Family::Groundwater,
                },
                sizes,
                seeds,
                steps,
                burn_in,
            };
            let rows = run_bench(&spec).map_err(|e| Failure::stage("bench", e))?;
            write_or_print(output.as_deref(), &to_csv(&rows).map_err(|e| Failure::stage("bench", e))?)?;
        }
        Command::Synth {
            rows,
            columns,
            regimes,
            output,
        } => {
            let data = generate(&SyntheticSpec {
                rows,
                columns,
                regimes,
                seed: stage_seed(ctx.cfg.seed, "synth"),
                ..Default::default()
            })
            .map_err(Failure::input)?;
            write_or_print(output.as_deref(), &data.matrix.to_csv())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
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
        Err(f) => {
            emit(&f.doc);
            ExitCode::from(f.code)
        }
    }
}
