//! Discrete lifting: fits mixtures of binomials/multinomials to histogram
//! tables by incremental EM, with total variation as the stopping metric.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{ln_choose, ln_multinomial, log_sum_exp};
use crate::mixture::{log_multinomial_pmf, AtomFactor, Component, IidMixture, MixtureAtom};
use crate::model::{Atom, HistTable, Histogram, TupleSpace};

const P_CLAMP: f64 = 1e-9;
const PRUNE_WEIGHT: f64 = 1e-6;
const EM_REL_TOL: f64 = 1e-8;
const EM_MAX_ITERS: usize = 500;

/// f_B(h; n, p).
pub fn binomial_pdf(h: usize, n: usize, p: f64) -> Result<f64> {
    if h > n {
        return Err(Error::Domain(format!("count {h} exceeds population {n}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
    }
    let k = h as f64;
    let rest = (n - h) as f64;
    let log = ln_choose(n, h)
        + if h > 0 { k * p.ln() } else { 0.0 }
        + if n > h { rest * (1.0 - p).ln() } else { 0.0 };
    Ok(log.exp())
}

/// f_M(h; n, p).
pub fn multinomial_pdf(h: &Histogram, n: usize, p: &[f64]) -> Result<f64> {
    if h.population() != n {
        return Err(Error::InvalidHistogram(format!(
            "counts sum to {} but n = {n}",
            h.population()
        )));
    }
    if h.values() != p.len() {
        return Err(Error::SupportMismatch(h.values(), p.len()));
    }
    if p.iter().any(|q| !(0.0..=1.0).contains(q)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Domain("invalid probability vector".into()));
    }
    Ok(log_multinomial_pmf(h.counts(), p).exp())
}

/// Half the L1 distance between two normalized distributions on the same
/// finite outcome space.
pub fn total_variation(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::SupportMismatch(p.len(), q.len()));
    }
    for d in [p, q] {
        if d.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::Domain("distribution has negative or NaN entries".into()));
        }
        let s: f64 = d.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::NotNormalized(s));
        }
    }
    let tv = 0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>();
    Ok(tv.clamp(0.0, 1.0))
}

/// How table keys are weighted when a table is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyWeighting {
    /// Values are taken as masses of the keys.
    Plain,
    /// Values are per-valuation potentials; each key is weighted by its number
    /// of ground valuations.
    Multinomial,
}

/// A normalized distribution over the tuple space of some discrete atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct HistDistribution {
    pub atoms: Vec<Atom>,
    pub probs: Vec<f64>,
}

impl HistDistribution {
    pub fn space(&self) -> Result<TupleSpace> {
        TupleSpace::for_atoms(&self.atoms)
    }

    pub fn prob(&self, key: &[Histogram]) -> Result<f64> {
        let space = self.space()?;
        let i = space
            .index_of(key)
            .ok_or_else(|| Error::InvalidHistogram(format!("{key:?}")))?;
        Ok(self.probs[i])
    }
}

pub fn normalize_hist_table(table: &HistTable, weighting: KeyWeighting) -> Result<HistDistribution> {
    if table.is_empty() {
        return Err(Error::ZeroMass);
    }
    let (space, mut logs) = table.dense_log()?;
    if weighting == KeyWeighting::Multinomial {
        for (i, l) in logs.iter_mut().enumerate() {
            if *l > f64::NEG_INFINITY {
                let key = space.tuple(i);
                *l += key.iter().map(|h| ln_multinomial(h.counts())).sum::<f64>();
            }
        }
    }
    let lz = log_sum_exp(&logs);
    if !lz.is_finite() {
        return Err(Error::ZeroMass);
    }
    let probs = logs.iter().map(|l| (l - lz).exp()).collect();
    Ok(HistDistribution {
        atoms: table.atoms().to_vec(),
        probs,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub achieved_tv: f64,
    /// True when `achieved_tv` is a Monte Carlo estimate rather than exact.
    pub tv_is_estimate: bool,
    pub k_used: usize,
    pub em_iterations: usize,
    /// Log-likelihood after every EM iteration, all k runs concatenated.
    pub log_likelihood_trace: Vec<f64>,
    /// Start offset in the trace of every fixed-k run.
    pub run_starts: Vec<usize>,
    /// TV after each accepted k.
    pub tv_by_k: Vec<f64>,
    pub diagnostics: Vec<String>,
}

/// Cached per-atom data for EM on a fixed tuple space.
struct EmData {
    atoms: Vec<MixtureAtom>,
    /// Histogram counts per atom, per histogram index.
    hists: Vec<Vec<Vec<usize>>>,
    /// ln C(h) per atom, per histogram index.
    lncoef: Vec<Vec<f64>>,
    /// Cells with positive target mass: (per-atom histogram indices, mass).
    cells: Vec<(Vec<usize>, f64)>,
    /// Full dense target over the tuple space.
    target: Vec<f64>,
    space: TupleSpace,
}

#[derive(Clone)]
struct Params {
    w: Vec<f64>,
    /// p[l][atom] = categorical vector
    p: Vec<Vec<Vec<f64>>>,
}

impl EmData {
    fn new(dist: &HistDistribution) -> Result<Self> {
        let space = dist.space()?;
        let hists: Vec<Vec<Vec<usize>>> = space
            .spaces()
            .iter()
            .map(|s| s.items().iter().map(|h| h.counts().to_vec()).collect())
            .collect();
        let lncoef = hists
            .iter()
            .map(|hs| hs.iter().map(|h| ln_multinomial(h)).collect())
            .collect();
        let cells = dist
            .probs
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(i, p)| (space.unflatten(i), *p))
            .collect();
        Ok(EmData {
            atoms: dist.atoms.iter().map(MixtureAtom::from_atom).collect(),
            hists,
            lncoef,
            cells,
            target: dist.probs.clone(),
            space,
        })
    }

    /// Per-component, per-atom log pmf over that atom's histograms.
    fn log_tables(&self, par: &Params) -> Vec<Vec<Vec<f64>>> {
        par.p
            .iter()
            .map(|pa| {
                pa.iter()
                    .enumerate()
                    .map(|(a, p)| {
                        let lp: Vec<f64> = p.iter().map(|q| q.ln()).collect();
                        self.hists[a]
                            .iter()
                            .zip(&self.lncoef[a])
                            .map(|(h, c)| c + h.iter().zip(&lp).map(|(&x, l)| x as f64 * l).sum::<f64>())
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    fn cell_logs(&self, tables: &[Vec<Vec<f64>>], par: &Params, idx: &[usize], out: &mut Vec<f64>) {
        out.clear();
        for (l, t) in tables.iter().enumerate() {
            let mut acc = par.w[l].ln();
            for (a, &j) in idx.iter().enumerate() {
                acc += t[a][j];
            }
            out.push(acc);
        }
    }

    fn log_likelihood(&self, par: &Params) -> f64 {
        let tables = self.log_tables(par);
        let mut buf = Vec::new();
        self.cells
            .iter()
            .map(|(idx, m)| {
                self.cell_logs(&tables, par, idx, &mut buf);
                m * log_sum_exp(&buf)
            })
            .sum()
    }

    /// One EM iteration; returns the log-likelihood of the input parameters.
    fn em_step(&self, par: &Params) -> (Params, f64) {
        let k = par.w.len();
        let tables = self.log_tables(par);
        let mut w_acc = vec![0.0; k];
        let mut c_acc: Vec<Vec<Vec<f64>>> = par
            .p
            .iter()
            .map(|pa| pa.iter().map(|p| vec![0.0; p.len()]).collect())
            .collect();
        let mut ll = 0.0;
        let mut buf = Vec::with_capacity(k);
        for (idx, m) in &self.cells {
            self.cell_logs(&tables, par, idx, &mut buf);
            let lz = log_sum_exp(&buf);
            ll += m * lz;
            for l in 0..k {
                let r = m * (buf[l] - lz).exp();
                if r == 0.0 {
                    continue;
                }
                w_acc[l] += r;
                for (a, &j) in idx.iter().enumerate() {
                    for (acc, &c) in c_acc[l][a].iter_mut().zip(&self.hists[a][j]) {
                        *acc += r * c as f64;
                    }
                }
            }
        }
        let total: f64 = w_acc.iter().sum();
        let mut next = par.clone();
        for l in 0..k {
            next.w[l] = w_acc[l] / total;
            if w_acc[l] <= 0.0 {
                continue;
            }
            for a in 0..self.atoms.len() {
                let s: f64 = c_acc[l][a].iter().sum();
                let p: Vec<f64> = c_acc[l][a].iter().map(|c| c / s).collect();
                next.p[l][a] = clamp_pmf(&p);
            }
        }
        (next, ll)
    }

    fn fitted(&self, par: &Params) -> Vec<f64> {
        let tables = self.log_tables(par);
        let mut buf = Vec::new();
        (0..self.space.len())
            .map(|i| {
                let idx = self.space.unflatten(i);
                self.cell_logs(&tables, par, &idx, &mut buf);
                log_sum_exp(&buf).exp()
            })
            .collect()
    }

    fn tv(&self, par: &Params) -> f64 {
        let q = self.fitted(par);
        let s: f64 = q.iter().sum();
        0.5 * self
            .target
            .iter()
            .zip(&q)
            .map(|(a, b)| (a - b / s).abs())
            .sum::<f64>()
    }

    /// Runs EM to convergence, appending to the trace.
    fn run_em(&self, mut par: Params, trace: &mut Vec<f64>) -> (Params, usize) {
        let mut prev = f64::NEG_INFINITY;
        let mut iters = 0;
        for _ in 0..EM_MAX_ITERS {
            let (next, ll) = self.em_step(&par);
            iters += 1;
            trace.push(ll);
            let done = prev.is_finite() && ((ll - prev).abs() <= EM_REL_TOL * ll.abs().max(1e-300));
            prev = ll;
            par = next;
            if done {
                break;
            }
        }
        trace.push(self.log_likelihood(&par));
        (par, iters)
    }

    fn prune(&self, par: &mut Params) {
        if par.w.len() <= 1 {
            return;
        }
        let keep: Vec<usize> = (0..par.w.len()).filter(|&l| par.w[l] >= PRUNE_WEIGHT).collect();
        if keep.len() == par.w.len() || keep.is_empty() {
            return;
        }
        par.w = keep.iter().map(|&l| par.w[l]).collect();
        par.p = keep.iter().map(|&l| par.p[l].clone()).collect();
        let s: f64 = par.w.iter().sum();
        par.w.iter_mut().for_each(|w| *w /= s);
    }

    /// Component initialized at the given cell.
    fn component_at(&self, idx: &[usize]) -> Vec<Vec<f64>> {
        idx.iter()
            .enumerate()
            .map(|(a, &j)| {
                let h = &self.hists[a][j];
                let n: usize = h.iter().sum();
                clamp_pmf(&h.iter().map(|&c| c as f64 / n as f64).collect::<Vec<_>>())
            })
            .collect()
    }
}

fn clamp_pmf(p: &[f64]) -> Vec<f64> {
    let c: Vec<f64> = p.iter().map(|q| q.clamp(P_CLAMP, 1.0 - P_CLAMP)).collect();
    let s: f64 = c.iter().sum();
    c.iter().map(|q| q / s).collect()
}

/// Fits a mixture of iid categorical products to a table over one or more
/// discrete atoms. Table values are per-valuation potentials; the target is
/// their distribution over histogram tuples.
pub fn fit_mixture_discrete(
    table: &HistTable,
    tol: f64,
    k_max: usize,
    seed: u64,
) -> Result<(IidMixture, FitReport)> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tol must be positive, got {tol}")));
    }
    if k_max == 0 {
        return Err(Error::InvalidArgument("k_max must be at least 1".into()));
    }
    if table.is_empty() {
        return Err(Error::EmptyTable);
    }
    let dist = normalize_hist_table(table, KeyWeighting::Multinomial)?;
    fit_distribution(&dist, tol, k_max, seed)
}

/// Two-atom variant; each component carries a parameter pair.
pub fn fit_joint_mixture_discrete(
    table: &HistTable,
    tol: f64,
    k_max: usize,
    seed: u64,
) -> Result<(IidMixture, FitReport)> {
    if table.atoms().len() != 2 {
        return Err(Error::Arity(format!(
            "joint fit needs a table over two atoms, got {}",
            table.atoms().len()
        )));
    }
    fit_mixture_discrete(table, tol, k_max, seed)
}

/// Fits a normalized distribution over histogram tuples.
pub fn fit_distribution(
    dist: &HistDistribution,
    tol: f64,
    k_max: usize,
    seed: u64,
) -> Result<(IidMixture, FitReport)> {
    let data = EmData::new(dist)?;
    if data.cells.is_empty() {
        return Err(Error::ZeroMass);
    }
    let max_pop = dist.atoms.iter().map(|a| a.population).max().unwrap_or(1);
    let k_limit = k_max.min(max_pop.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FitReport::default();

    // k = 1: the MLE is the mean frequency per atom, reached in one step.
    let init = Params {
        w: vec![1.0],
        p: vec![dist
            .atoms
            .iter()
            .map(|a| vec![1.0 / a.values().unwrap() as f64; a.values().unwrap()])
            .collect()],
    };
    report.run_starts.push(0);
    let (mut best, iters) = data.run_em(init, &mut report.log_likelihood_trace);
    report.em_iterations += iters;
    let mut best_tv = data.tv(&best);
    report.tv_by_k.push(best_tv);

    while best.w.len() < k_limit && best_tv > tol {
        let k = best.w.len();
        let q = data.fitted(&best);
        let s: f64 = q.iter().sum();
        let mut residual: Vec<(usize, f64)> = data
            .target
            .iter()
            .zip(&q)
            .enumerate()
            .map(|(i, (t, f))| (i, (t - f / s).abs()))
            .collect();
        residual.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        // Largest-residual cell first, then a few runner-ups and one random
        // positive-mass cell; the best TV wins.
        let mut starts: Vec<usize> = residual.iter().take(3).map(|r| r.0).collect();
        let random_cell = data.cells[rng.random_range(0..data.cells.len())].0.clone();
        starts.push(data.space.flatten(&random_cell));
        starts.dedup();

        let mut round_best: Option<(Params, f64, Vec<f64>)> = None;
        for cell in starts {
            let mut par = best.clone();
            let scale = k as f64 / (k as f64 + 1.0);
            par.w.iter_mut().for_each(|w| *w *= scale);
            par.w.push(1.0 / (k as f64 + 1.0));
            par.p.push(data.component_at(&data.space.unflatten(cell)));
            let mut trace = Vec::new();
            let (mut fit, iters) = data.run_em(par, &mut trace);
            report.em_iterations += iters;
            data.prune(&mut fit);
            let tv = data.tv(&fit);
            if round_best.as_ref().is_none_or(|(_, b, _)| tv < *b) {
                round_best = Some((fit, tv, trace));
            }
        }
        let (fit, tv, trace) = round_best.unwrap();
        let improvement = best_tv - tv;
        if improvement <= 0.0 {
            report
                .diagnostics
                .push(format!("k={} did not improve TV ({tv:.3e} >= {best_tv:.3e})", k + 1));
            break;
        }
        report.run_starts.push(report.log_likelihood_trace.len());
        report.log_likelihood_trace.extend(trace);
        best = fit;
        best_tv = tv;
        report.tv_by_k.push(tv);
        if improvement < tol / 10.0 {
            break;
        }
    }

    report.k_used = best.w.len();
    report.achieved_tv = best_tv;
    let parts: Vec<Component> = best
        .w
        .iter()
        .zip(&best.p)
        .map(|(w, pa)| Component {
            weight: *w,
            factors: pa.iter().map(|p| AtomFactor::categorical(p.clone())).collect(),
        })
        .collect();
    let mut mixture = IidMixture::from_parts_unchecked(data.atoms.clone(), parts, 0.0);
    mixture.renormalize();
    mixture.set_log_mass(0.0);
    mixture.validate()?;
    Ok((mixture, report))
}
