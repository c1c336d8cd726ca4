//! The full learning and inference pipeline behind the command line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::format::ModelFile;
use crate::bounds::{bound_report, BoundReport};
use crate::continuous::{fit_kde_mixture, sample_potential, KdeFitConfig, ParfactorDensity, SamplerConfig};
use crate::discrete::{fit_distribution, normalize_hist_table, FitReport, KeyWeighting};
use crate::error::{Error, Result};
use crate::lve::{
    latent_variable_elimination, rv_cdf, rv_density, rv_predictive_pmf, LveConfig, Observation, VariationalModel,
};
use crate::math::{log_sum_exp, stage_seed};
use crate::mcmc::{run_lifted_mcmc, McmcConfig, RvQuery};
use crate::mixture::{AtomFactor, IidMixture, MixtureAtom};
use crate::model::{Atom, HistTable, ParametricDensity, Parfactor, Potential, Rhm};
use crate::oracle::mass_tables;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    /// TV tolerance handed to the fitters.
    pub tol: f64,
    pub k_cap: usize,
    /// Samples drawn per continuous parfactor before KDE fitting.
    pub samples: usize,
    pub use_cache: bool,
    pub lve: LveConfig,
    pub mcmc: McmcConfig,
    pub sampler: SamplerConfig,
    pub kde: KdeFitConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            tol: 1e-3,
            k_cap: 64,
            samples: 2000,
            use_cache: true,
            lve: LveConfig::default(),
            mcmc: McmcConfig {
                keep_trace: false,
                ..McmcConfig::default()
            },
            sampler: SamplerConfig::default(),
            kde: KdeFitConfig::default(),
        }
    }
}

/// A pipeline failure tagged with its stage.
#[derive(Debug, thiserror::Error)]
#[error("{stage}: {error}")]
pub struct StageError {
    pub stage: String,
    pub error: Error,
}

impl StageError {
    pub fn new(stage: &str, error: Error) -> Self {
        StageError {
            stage: stage.to_string(),
            error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDoc {
    pub stage: String,
    pub parfactor: Option<String>,
    pub message: String,
}

impl From<&StageError> for ErrorDoc {
    fn from(e: &StageError) -> Self {
        ErrorDoc {
            stage: e.stage.clone(),
            parfactor: e.error.parfactor().map(str::to_string),
            message: e.error.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub parfactor: String,
    /// `discrete`, `kde` or `given`.
    pub method: String,
    pub report: Option<FitReport>,
}

/// Wall-clock facts kept out of result documents so those stay reproducible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stages_s: BTreeMap<String, f64>,
    pub cache_hits: Vec<String>,
    pub step_time_us: Option<f64>,
}

impl Timings {
    fn add(&mut self, stage: &str, start: Instant) {
        *self.stages_s.entry(stage.to_string()).or_default() += start.elapsed().as_secs_f64();
    }
}

/// On-disk cache of fitted mixtures keyed by a content hash.
pub struct FitCache {
    dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    mixture: IidMixture,
    report: FitReport,
}

impl FitCache {
    pub fn beside(model_path: &Path) -> Self {
        let mut name = model_path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
        name.push(".lrvi-cache");
        FitCache {
            dir: model_path.with_file_name(name),
        }
    }

    pub fn at(dir: impl Into<PathBuf>) -> Self {
        FitCache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(parts: &impl Serialize) -> String {
        let bytes = serde_json::to_vec(parts).expect("cache key serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    fn get(&self, key: &str) -> Option<(IidMixture, FitReport)> {
        let text = fs::read_to_string(self.dir.join(format!("{key}.json"))).ok()?;
        let e: CacheEntry = serde_json::from_str(&text).ok()?;
        Some((e.mixture, e.report))
    }

    /// Writes through a temporary file and a rename so readers never see a
    /// partial entry.
    fn put(&self, key: &str, mixture: &IidMixture, report: &FitReport) -> Result<()> {
        fs::create_dir_all(&self.dir)?;
        let tmp = self.dir.join(format!(".{key}.{}.tmp", std::process::id()));
        let text = serde_json::to_string(&CacheEntry {
            mixture: mixture.clone(),
            report: report.clone(),
        })
        .expect("cache entry serializes");
        fs::write(&tmp, text)?;
        fs::rename(&tmp, self.dir.join(format!("{key}.json")))?;
        Ok(())
    }
}

/// Histogram table of a ground table applied to every tuple of rvs: a value
/// combination appears prod_j h_j[v_j] times.
pub fn lift_ground_table(g: &Parfactor, atoms: &[Atom]) -> Result<HistTable> {
    let Potential::Parametric(ParametricDensity::GroundTable { values }) = &g.potential else {
        return Err(Error::InvalidArgument(format!("parfactor `{}` is not a ground table", g.name)));
    };
    let dims = atoms.iter().map(|a| a.values()).collect::<Result<Vec<_>>>()?;
    let logs: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    HistTable::from_log_fn(atoms.to_vec(), |key| {
        let mut total = 0.0;
        let mut combo = vec![0usize; dims.len()];
        for (i, lv) in logs.iter().enumerate() {
            let mut r = i;
            for j in (0..dims.len()).rev() {
                combo[j] = r % dims[j];
                r /= dims[j];
            }
            let times: f64 = combo.iter().zip(key).map(|(v, h)| h.counts()[*v] as f64).product();
            if times > 0.0 {
                if *lv == f64::NEG_INFINITY {
                    return f64::NEG_INFINITY;
                }
                total += times * lv;
            }
        }
        total
    })
}

/// Atoms of a parfactor in argument order.
pub fn parfactor_atoms(model: &ModelFile, g: &Parfactor) -> Result<Vec<Atom>> {
    g.atom_names()
        .iter()
        .map(|n| {
            model
                .atoms
                .iter()
                .find(|a| a.name == *n)
                .cloned()
                .ok_or_else(|| Error::UnknownAtom(n.to_string()))
        })
        .collect()
}

/// Replaces every parfactor by a fitted mixture. Discrete parfactors are fit
/// to their histogram mass tables; parfactors with a continuous atom are
/// sampled and fit with KDE mixtures.
pub fn find_variational_rhm(
    model: &ModelFile,
    cfg: &PipelineConfig,
    cache: Option<&FitCache>,
    timings: &mut Timings,
) -> Result<(ModelFile, Vec<FitRecord>)> {
    if model.is_variational() {
        let records = model
            .parfactors
            .iter()
            .map(|g| FitRecord {
                parfactor: g.name.clone(),
                method: "given".into(),
                report: None,
            })
            .collect();
        return Ok((model.clone(), records));
    }
    // Discrete part as histogram tables.
    let mut disc = Rhm::new();
    let mut discrete_names = Vec::new();
    for g in &model.parfactors {
        let atoms = parfactor_atoms(model, g).map_err(|e| e.in_parfactor(&g.name))?;
        if atoms.iter().all(|a| a.is_discrete()) {
            for a in &atoms {
                if !disc.atoms.contains_key(&a.name) {
                    disc.add_atom(a.clone())?;
                }
            }
            let mut g2 = g.clone();
            if let Potential::Parametric(_) = g.potential {
                g2.potential = Potential::HistTable(lift_ground_table(g, &atoms).map_err(|e| e.in_parfactor(&g.name))?);
            }
            disc.add_parfactor(g2).map_err(|e| e.in_parfactor(&g.name))?;
            discrete_names.push(g.name.clone());
        }
    }
    let tables = if discrete_names.is_empty() {
        Vec::new()
    } else {
        mass_tables(&disc)?
    };
    let mut fitted: Vec<(String, IidMixture)> = Vec::new();
    let mut records = Vec::new();
    for g in &model.parfactors {
        let fit_seed = stage_seed(cfg.seed, &format!("fit/{}", g.name));
        if let Potential::Variational(_) = g.potential {
            records.push(FitRecord {
                parfactor: g.name.clone(),
                method: "given".into(),
                report: None,
            });
            continue;
        }
        let start = Instant::now();
        let (method, key, target) = if let Some(i) = discrete_names.iter().position(|n| n == &g.name) {
            let key = FitCache::key(&("discrete", &tables[i], cfg.tol, cfg.k_cap, fit_seed));
            ("discrete", key, Some(&tables[i]))
        } else {
            let atoms = parfactor_atoms(model, g)?;
            let key = FitCache::key(&(
                "kde", g, &atoms, cfg.tol, cfg.k_cap, cfg.samples, fit_seed, &cfg.sampler, &cfg.kde,
            ));
            ("kde", key, None)
        };
        let hit = if cfg.use_cache { cache.and_then(|c| c.get(&key)) } else { None };
        let (mix, report) = match hit {
            Some(found) => {
                log::info!("fit cache hit for parfactor `{}`", g.name);
                timings.cache_hits.push(g.name.clone());
                found
            }
            None => {
                let out = match target {
                    Some(t) => fit_table(t, cfg, fit_seed),
                    None => fit_continuous(model, g, cfg, fit_seed),
                }
                .map_err(|e| e.in_parfactor(&g.name))?;
                if let Some(c) = cache {
                    if let Err(e) = c.put(&key, &out.0, &out.1) {
                        log::warn!("could not write fit cache: {e}");
                    }
                }
                out
            }
        };
        timings.add(&format!("fit/{}", g.name), start);
        records.push(FitRecord {
            parfactor: g.name.clone(),
            method: method.into(),
            report: Some(report),
        });
        fitted.push((g.name.clone(), mix));
    }
    Ok((model.with_mixtures(&fitted)?, records))
}

fn fit_table(t: &HistTable, cfg: &PipelineConfig, seed: u64) -> Result<(IidMixture, FitReport)> {
    let dist = normalize_hist_table(t, KeyWeighting::Plain)?;
    let (mut mix, report) = fit_distribution(&dist, cfg.tol, cfg.k_cap, seed)?;
    let logs: Vec<f64> = t.entries().map(|(_, v)| v).collect();
    mix.set_log_mass(log_sum_exp(&logs));
    Ok((mix, report))
}

fn fit_continuous(model: &ModelFile, g: &Parfactor, cfg: &PipelineConfig, seed: u64) -> Result<(IidMixture, FitReport)> {
    let atoms = parfactor_atoms(model, g)?;
    let matoms: Vec<MixtureAtom> = atoms.iter().map(MixtureAtom::from_atom).collect();
    let density = ParfactorDensity::new(g, atoms);
    let samples = sample_potential(&density, &matoms, cfg.samples, stage_seed(seed, "sample"), &cfg.sampler)?;
    fit_kde_mixture(&samples, cfg.tol, cfg.k_cap, stage_seed(seed, "em"), &cfg.kde)
}

/// Variational model with a uniform potential on every discrete atom that no
/// parfactor mentions.
pub fn variational_model(model: &ModelFile) -> Result<VariationalModel> {
    let mut vm = model.to_variational()?;
    for a in &model.atoms {
        if vm.potentials.iter().any(|p| p.mentions(&a.name)) {
            continue;
        }
        let d = a.values().map_err(|_| {
            Error::InvalidModel(format!("continuous atom `{}` appears in no parfactor", a.name))
        })?;
        let m = IidMixture::single(vec![MixtureAtom::from_atom(a)], vec![AtomFactor::categorical(vec![1.0 / d as f64; d])])?;
        vm.potentials.push(crate::lve::VariationalPotential::new(format!("{}.uniform", a.name), m));
    }
    Ok(vm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ve,
    Mcmc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Query {
    /// Marginal over the histograms of these atoms.
    Marginal { atoms: Vec<String> },
    /// Question about one unobserved ground rv.
    Rv(RvQuery),
}

impl std::str::FromStr for Query {
    type Err = Error;

    /// `marginal:A,B`, `pmf:A`, `cdf:A:t` or `density:A:x`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("invalid query `{s}`"));
        let num = |t: &str| t.parse::<f64>().map_err(|_| bad());
        let parts: Vec<&str> = s.split(':').collect();
        Ok(match parts.as_slice() {
            ["marginal", atoms] if !atoms.is_empty() => Query::Marginal {
                atoms: atoms.split(',').map(str::to_string).collect(),
            },
            ["pmf", a] => Query::Rv(RvQuery::Pmf { atom: a.to_string() }),
            ["cdf", a, t] => Query::Rv(RvQuery::Cdf {
                atom: a.to_string(),
                t: num(t)?,
            }),
            ["density", a, x] => Query::Rv(RvQuery::Density {
                atom: a.to_string(),
                x: num(x)?,
            }),
            _ => return Err(bad()),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AtomSummary {
    pub atom: String,
    /// Predictive pmf of one unobserved rv.
    pub rv_pmf: Option<Vec<f64>>,
    /// Distribution of the histogram of the unobserved rvs.
    pub histogram_pmf: Option<Vec<f64>>,
    /// Predictive density of one rv at 11 grid points.
    pub density_grid: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcSummary {
    pub steps: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub selections: Vec<u64>,
    pub split_disagreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDoc {
    pub method: Method,
    pub query: Query,
    pub marginal: Option<IidMixture>,
    pub atoms: Vec<AtomSummary>,
    /// Answer to an rv query: a pmf, or a single cdf or density value.
    pub estimate: Option<Vec<f64>>,
    pub fit_reports: Vec<FitRecord>,
    pub bounds: Option<BoundReport>,
    pub mcmc: Option<McmcSummary>,
}

const HISTOGRAM_REPORT_CAP: usize = 100_000;

fn summarize(marginal: &IidMixture, atom: &str) -> Result<AtomSummary> {
    let i = marginal.atom_index(atom).ok_or_else(|| Error::UnknownAtom(atom.to_string()))?;
    let a = &marginal.atoms()[i];
    let mut s = AtomSummary {
        atom: atom.to_string(),
        ..Default::default()
    };
    if let Some(d) = a.values() {
        s.rv_pmf = Some(rv_predictive_pmf(marginal, atom)?);
        if crate::model::HistogramSpace::size(d, a.population) <= HISTOGRAM_REPORT_CAP as f64 {
            s.histogram_pmf = Some(marginal.marginal_pmf(atom)?);
        }
    } else {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for c in marginal.components() {
            if let AtomFactor::Kde(k) = &c.factors[i] {
                let (l, h) = k.range(3.0);
                lo = lo.min(l);
                hi = hi.max(h);
            }
        }
        if let Some((sl, sh)) = a.domain.support() {
            lo = lo.max(sl);
            hi = hi.min(sh);
        }
        if lo.is_finite() && hi.is_finite() {
            let grid = (0..11)
                .map(|j| {
                    let x = lo + (hi - lo) * j as f64 / 10.0;
                    Ok((x, rv_density(marginal, atom, x)?))
                })
                .collect::<Result<Vec<_>>>()?;
            s.density_grid = Some(grid);
        }
    }
    Ok(s)
}

/// Runs learning, conditioning and inference.
pub fn run_pipeline(
    model: &ModelFile,
    obs: &[Observation],
    query: &Query,
    method: Method,
    cfg: &PipelineConfig,
    cache: Option<&FitCache>,
) -> std::result::Result<(ResultDoc, Timings), StageError> {
    let mut timings = Timings::default();
    let (fitted, fit_reports) =
        find_variational_rhm(model, cfg, cache, &mut timings).map_err(|e| StageError::new("fit", e))?;
    let vm = variational_model(&fitted).map_err(|e| StageError::new("build", e))?;
    let bounds = if model.extendibility.atoms.is_empty() {
        None
    } else {
        let rhm = model.to_rhm().map_err(|e| StageError::new("bound", e))?;
        Some(bound_report(&rhm, &model.extendibility, None).map_err(|e| StageError::new("bound", e))?)
    };
    let start = Instant::now();
    let mut doc = ResultDoc {
        method,
        query: query.clone(),
        marginal: None,
        atoms: Vec::new(),
        estimate: None,
        fit_reports,
        bounds,
        mcmc: None,
    };
    match method {
        Method::Ve => {
            let atoms: Vec<&str> = match query {
                Query::Marginal { atoms } => atoms.iter().map(String::as_str).collect(),
                Query::Rv(q) => vec![q.atom()],
            };
            let r = latent_variable_elimination(&vm, &atoms, obs, &cfg.lve).map_err(|e| StageError::new("infer", e))?;
            let infer = |e| StageError::new("infer", e);
            for a in &atoms {
                doc.atoms.push(summarize(&r.marginal, a).map_err(infer)?);
            }
            if let Query::Rv(q) = query {
                doc.estimate = Some(
                    match q {
                        RvQuery::Pmf { atom } => rv_predictive_pmf(&r.marginal, atom),
                        RvQuery::Cdf { atom, t } => rv_cdf(&r.marginal, atom, *t).map(|v| vec![v]),
                        RvQuery::Density { atom, x } => rv_density(&r.marginal, atom, *x).map(|v| vec![v]),
                    }
                    .map_err(infer)?,
                );
            }
            doc.marginal = Some(r.marginal);
        }
        Method::Mcmc => {
            let q = match query {
                Query::Rv(q) => q.clone(),
                Query::Marginal { atoms } if atoms.len() == 1 => RvQuery::Pmf { atom: atoms[0].clone() },
                Query::Marginal { .. } => {
                    return Err(StageError::new(
                        "infer",
                        Error::InvalidArgument("mcmc answers questions about one atom".into()),
                    ))
                }
            };
            let mcfg = McmcConfig {
                seed: stage_seed(cfg.seed, "mcmc"),
                ..cfg.mcmc.clone()
            };
            let r = run_lifted_mcmc(&vm, &q, obs, &mcfg).map_err(|e| StageError::new("infer", e))?;
            timings.step_time_us = Some(r.diagnostics.step_time_us);
            doc.estimate = Some(r.estimate);
            doc.mcmc = Some(McmcSummary {
                steps: mcfg.steps,
                burn_in: mcfg.burn_in,
                seed: mcfg.seed,
                selections: r.diagnostics.selections,
                split_disagreement: r.diagnostics.split_disagreement,
            });
        }
    }
    timings.add("infer", start);
    Ok((doc, timings))
}
