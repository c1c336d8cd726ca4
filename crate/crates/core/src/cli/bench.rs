//! Benchmark sweeps written as CSV rows of (method, size, seed, error, step_time_us).

use serde::{Deserialize, Serialize};

use super::synthetic::{compare_elimination, generate, SyntheticSpec};
use crate::error::{Error, Result};
use crate::math::stage_seed;
use crate::mcmc::{
    exact_latent_query, job_house_model, job_house_observations, run_ground_mcmc, run_lifted_mcmc, JobHouseParams,
    McmcConfig, RvQuery,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Job/house-price model; size is the house count.
    JobHouse,
    /// Synthetic well matrix; size is the column count.
    Groundwater,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub family: Family,
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub burn_in: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub size: usize,
    pub seed: u64,
    pub error: f64,
    pub step_time_us: f64,
}

pub const HEADER: [&str; 5] = ["method", "size", "seed", "error", "step_time_us"];

/// Job/house parameters used by the sweep: overlapping market states and a
/// handful of observations, so the posterior over the latents stays uncertain.
pub fn bench_job_house(houses: usize) -> JobHouseParams {
    JobHouseParams {
        people: 64,
        houses,
        var_down: 0.09,
        var_up: 0.09,
        ..Default::default()
    }
}

pub fn run_bench(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &size in &spec.sizes {
        for &seed in &spec.seeds {
            match spec.family {
                Family::JobHouse => {
                    let p = bench_job_house(size);
                    let vm = job_house_model(&p)?;
                    let obs = job_house_observations(&p, 0.3, true, 8, 2.min(size), stage_seed(seed, "data"))?;
                    let q = RvQuery::Cdf { atom: "HP".into(), t: 0.0 };
                    let exact = exact_latent_query(&vm, &q, &obs, 200)?[0];
                    let cfg = McmcConfig {
                        steps: spec.steps,
                        burn_in: spec.burn_in,
                        seed: stage_seed(seed, "chain"),
                        keep_trace: false,
                        ..Default::default()
                    };
                    for (method, r) in [
                        ("lifted-mcmc", run_lifted_mcmc(&vm, &q, &obs, &cfg)?),
                        ("ground-mcmc", run_ground_mcmc(&vm, &q, &obs, &cfg)?),
                    ] {
                        rows.push(BenchRow {
                            method: method.into(),
                            size,
                            seed,
                            error: (r.estimate[0] - exact).abs() / exact,
                            step_time_us: r.diagnostics.step_time_us,
                        });
                    }
                }
                Family::Groundwater => {
                    let regimes = (size / 37).max(1);
                    let data = generate(&SyntheticSpec {
                        columns: size,
                        regimes,
                        seed: stage_seed(seed, "data"),
                        ..Default::default()
                    })?;
                    let c = compare_elimination(&data, regimes, 10, seed)?;
                    for (method, err, secs) in [
                        ("lifted-ve", c.lifted_error, c.lifted_s),
                        ("ground-ve", c.ground_error, c.ground_s),
                    ] {
                        rows.push(BenchRow {
                            method: method.into(),
                            size,
                            seed,
                            error: err,
                            step_time_us: secs * 1e6 / c.queries as f64,
                        });
                    }
                }
            }
        }
    }
    Ok(rows)
}

pub fn to_csv(rows: &[BenchRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER).map_err(|e| Error::Io(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.size.to_string(),
            r.seed.to_string(),
            r.error.to_string(),
            r.step_time_us.to_string(),
        ])
        .map_err(|e| Error::Io(e.to_string()))?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.to_string()))?).map_err(|e| Error::Io(e.to_string()))
}
