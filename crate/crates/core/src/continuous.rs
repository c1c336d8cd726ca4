//! Continuous lifting: Gaussian-kernel density estimators, a Metropolis
//! sampler for unnormalized potentials, and EM for mixtures of KDE products.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::discrete::FitReport;
use crate::error::{Error, Result};
use crate::math::{log_sum_exp, normal_log_pdf};
use crate::mixture::{AtomFactor, Component, IidMixture, MixtureAtom};
use crate::model::{Atom, Parfactor, Valuation};

pub const BANDWIDTH_FLOOR: f64 = 1e-6;
pub const MAX_KERNELS: usize = 256;

/// Gaussian-kernel density estimator with optional per-kernel weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kde {
    centers: Vec<f64>,
    weights: Vec<f64>,
    bandwidth: f64,
}

impl Kde {
    /// Equal-weight estimator.
    pub fn new(centers: Vec<f64>, bandwidth: f64) -> Result<Self> {
        let s = centers.len();
        let weights = vec![1.0 / s.max(1) as f64; s];
        Self::weighted(centers, weights, bandwidth)
    }

    pub fn weighted(centers: Vec<f64>, weights: Vec<f64>, bandwidth: f64) -> Result<Self> {
        let k = Kde {
            centers,
            weights,
            bandwidth,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.centers.is_empty() {
            return Err(Error::Domain("KDE needs at least one center".into()));
        }
        if !(self.bandwidth > 0.0) || !self.bandwidth.is_finite() {
            return Err(Error::Domain(format!("bandwidth {} must be positive", self.bandwidth)));
        }
        if self.weights.len() != self.centers.len() {
            return Err(Error::Arity("KDE weights and centers differ in length".into()));
        }
        if self.centers.iter().any(|c| !c.is_finite()) || self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Domain("KDE centers must be finite and weights nonnegative".into()));
        }
        let s: f64 = self.weights.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::NotNormalized(s));
        }
        Ok(())
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn eval(&self, x: f64) -> f64 {
        let b = self.bandwidth;
        let norm = 1.0 / (b * (2.0 * PI).sqrt());
        self.centers
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| {
                let u = (x - c) / b;
                w * (-0.5 * u * u).exp()
            })
            .sum::<f64>()
            * norm
    }

    pub fn log_eval(&self, x: f64) -> f64 {
        let v = self.eval(x);
        if v > 1e-300 {
            return v.ln();
        }
        // Far tails: fall back to log-sum-exp.
        let var = self.bandwidth * self.bandwidth;
        let terms: Vec<f64> = self
            .centers
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| w.ln() + normal_log_pdf(x, *c, var))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn mean(&self) -> f64 {
        self.centers.iter().zip(&self.weights).map(|(c, w)| c * w).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.centers
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| w * (c - m) * (c - m))
            .sum::<f64>()
            + self.bandwidth * self.bandwidth
    }

    /// Lower/upper limits covering the density's mass up to `k` bandwidths.
    pub fn range(&self, k: f64) -> (f64, f64) {
        let lo = self.centers.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.centers.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo - k * self.bandwidth, hi + k * self.bandwidth)
    }
}

/// (1/S) sum K((x - mu_i)/b) / b with the standard Gaussian kernel.
pub fn kde_eval(f: &Kde, x: f64) -> f64 {
    f.eval(x)
}

/// Silverman's rule on weighted points, floored at `BANDWIDTH_FLOOR`. Weights
/// default to uniform when `weights` is empty.
pub fn bandwidth_select(points: &[f64], weights: &[f64]) -> f64 {
    let n = points.len();
    if n <= 1 {
        return BANDWIDTH_FLOOR;
    }
    let uniform;
    let w: &[f64] = if weights.is_empty() {
        uniform = vec![1.0; n];
        &uniform
    } else {
        weights
    };
    let sw: f64 = w.iter().sum();
    let sw2: f64 = w.iter().map(|x| x * x).sum();
    if sw <= 0.0 {
        return BANDWIDTH_FLOOR;
    }
    let mean = points.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / sw;
    let var = points.iter().zip(w).map(|(x, w)| w * (x - mean).powi(2)).sum::<f64>() / sw;
    // Kish effective sample size.
    let n_eff = (sw * sw / sw2).max(1.0);
    let sd = var.sqrt();
    (1.06 * sd * n_eff.powf(-0.2)).max(BANDWIDTH_FLOOR)
}

/// An unnormalized log density over a flat coordinate vector laid out atom by
/// atom.
pub trait LogDensity {
    fn log_density(&self, x: &[f64]) -> f64;
}

impl<F: Fn(&[f64]) -> f64> LogDensity for F {
    fn log_density(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

/// The density of one parfactor's potential over its atoms' ground values.
pub struct ParfactorDensity<'a> {
    pub parfactor: &'a Parfactor,
    pub atoms: Vec<Atom>,
}

impl<'a> ParfactorDensity<'a> {
    pub fn new(parfactor: &'a Parfactor, atoms: Vec<Atom>) -> Self {
        ParfactorDensity { parfactor, atoms }
    }

    fn valuation(&self, x: &[f64]) -> Valuation {
        let mut v = Valuation::new();
        let mut off = 0;
        for a in &self.atoms {
            v.set(&a.name, x[off..off + a.population].to_vec());
            off += a.population;
        }
        v
    }
}

impl LogDensity for ParfactorDensity<'_> {
    fn log_density(&self, x: &[f64]) -> f64 {
        let map = self.atoms.iter().map(|a| (a.name.clone(), a.clone())).collect();
        self.parfactor
            .log_value_at(&map, &self.valuation(x))
            .unwrap_or(f64::NEG_INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub burn_in: usize,
    pub thin: usize,
    pub max_restarts: usize,
    pub initial_step: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            burn_in: 1000,
            thin: 5,
            max_restarts: 50,
            initial_step: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerDiagnostics {
    pub acceptance_rate: f64,
    pub effective_sample_size: f64,
    pub restarts: usize,
    pub seed: u64,
}

/// Rows of ground values; every row lists each atom's population-many
/// values in atom order. NaN marks a missing value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub atoms: Vec<MixtureAtom>,
    pub rows: Vec<Vec<f64>>,
    pub diagnostics: SamplerDiagnostics,
}

impl SampleSet {
    pub fn new(atoms: Vec<MixtureAtom>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let width: usize = atoms.iter().map(|a| a.population).sum();
        for r in &rows {
            if r.len() != width {
                return Err(Error::Arity(format!("sample row has {} values, expected {width}", r.len())));
            }
            let mut off = 0;
            for a in &atoms {
                for &x in &r[off..off + a.population] {
                    if !x.is_nan() && !a.domain.contains(x) {
                        return Err(Error::Domain(format!("sample value {x} outside the domain of `{}`", a.name)));
                    }
                }
                off += a.population;
            }
        }
        Ok(SampleSet {
            atoms,
            rows,
            diagnostics: SamplerDiagnostics::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Offsets of each atom's block within a row.
    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.atoms.len());
        let mut off = 0;
        for a in &self.atoms {
            out.push(off);
            off += a.population;
        }
        out
    }
}

fn initial_point(atoms: &[MixtureAtom], rng: &mut ChaCha8Rng, random: bool) -> Vec<f64> {
    let mut x = Vec::new();
    for a in atoms {
        for _ in 0..a.population {
            let v = match (a.values(), a.domain.support()) {
                (Some(d), _) => {
                    if random {
                        rng.random_range(0..d) as f64
                    } else {
                        0.0
                    }
                }
                (None, Some((lo, hi))) => {
                    if random {
                        rng.random_range(lo..hi)
                    } else {
                        0.5 * (lo + hi)
                    }
                }
                (None, None) => {
                    if random {
                        { let z: f64 = StandardNormal.sample(rng); 3.0 * z }
                    } else {
                        0.0
                    }
                }
            };
            x.push(v);
        }
    }
    x
}

/// Draws `n` approximate samples from the normalized target by Metropolis
/// within Gibbs: one Gaussian random-walk proposal per continuous coordinate
/// (uniform resample for discrete ones), with step sizes adapted during
/// burn-in.
pub fn sample_potential(
    target: &dyn LogDensity,
    atoms: &[MixtureAtom],
    n: usize,
    seed: u64,
    cfg: &SamplerConfig,
) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = initial_point(atoms, &mut rng, false);
    let mut lp = target.log_density(&x);
    let mut restarts = 0;
    while !lp.is_finite() {
        if restarts >= cfg.max_restarts {
            return Err(Error::Sampler(format!(
                "no start with positive density after {restarts} restarts"
            )));
        }
        restarts += 1;
        x = initial_point(atoms, &mut rng, true);
        lp = target.log_density(&x);
    }

    // Per-coordinate layout.
    let mut kind = Vec::with_capacity(x.len());
    for a in atoms {
        for _ in 0..a.population {
            kind.push((a.values(), a.domain.support()));
        }
    }
    let dim = x.len();
    let mut step = vec![cfg.initial_step; dim];
    let mut acc = vec![0usize; dim];
    let mut tries = vec![0usize; dim];
    let mut total_acc = 0usize;
    let mut total_tries = 0usize;
    let mut rows = Vec::with_capacity(n);
    let thin = cfg.thin.max(1);
    let sweeps = cfg.burn_in + n * thin;

    for sweep in 0..sweeps {
        for i in 0..dim {
            let old = x[i];
            let prop = match kind[i] {
                (Some(d), _) => {
                    if d < 2 {
                        continue;
                    }
                    let mut v = rng.random_range(0..d - 1);
                    if v >= old as usize {
                        v += 1;
                    }
                    v as f64
                }
                (None, support) => {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let p = old + step[i] * z;
                    if let Some((lo, hi)) = support {
                        if p < lo || p > hi {
                            tries[i] += 1;
                            continue;
                        }
                    }
                    p
                }
            };
            x[i] = prop;
            let lp_new = target.log_density(&x);
            tries[i] += 1;
            let u: f64 = rng.random();
            if lp_new.is_finite() && u.ln() < lp_new - lp {
                lp = lp_new;
                acc[i] += 1;
                if sweep >= cfg.burn_in {
                    total_acc += 1;
                }
            } else {
                x[i] = old;
            }
            if sweep >= cfg.burn_in {
                total_tries += 1;
            }
        }
        if sweep < cfg.burn_in && (sweep + 1) % 50 == 0 {
            for i in 0..dim {
                if kind[i].0.is_none() && tries[i] > 0 {
                    let rate = acc[i] as f64 / tries[i] as f64;
                    if rate > 0.44 {
                        step[i] *= 1.25;
                    } else if rate < 0.23 {
                        step[i] /= 1.25;
                    }
                }
                acc[i] = 0;
                tries[i] = 0;
            }
        }
        if sweep >= cfg.burn_in && (sweep - cfg.burn_in + 1) % thin == 0 {
            rows.push(x.clone());
        }
    }

    let mut set = SampleSet::new(atoms.to_vec(), rows)?;
    set.diagnostics = SamplerDiagnostics {
        acceptance_rate: if total_tries > 0 {
            total_acc as f64 / total_tries as f64
        } else {
            0.0
        },
        effective_sample_size: effective_sample_size(&set.rows),
        restarts,
        seed,
    };
    Ok(set)
}

/// Minimum over coordinates of N / (1 + 2 sum of initial positive
/// autocorrelations).
pub fn effective_sample_size(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len();
    if n < 4 {
        return n as f64;
    }
    let dim = rows[0].len();
    let mut best = n as f64;
    for j in 0..dim.min(64) {
        let xs: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        if v <= 0.0 {
            continue;
        }
        let mut s = 0.0;
        for lag in 1..n / 2 {
            let r = (0..n - lag).map(|t| (xs[t] - m) * (xs[t + lag] - m)).sum::<f64>() / (n as f64 * v);
            if r <= 0.0 {
                break;
            }
            s += r;
        }
        best = best.min(n as f64 / (1.0 + 2.0 * s));
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeFitConfig {
    pub max_kernels: usize,
    pub max_em_iters: usize,
    /// Minimum held-out log-likelihood gain per sample for adding a component.
    pub min_heldout_gain: f64,
    /// Components with fewer effective samples are pruned.
    pub min_component_samples: f64,
}

impl Default for KdeFitConfig {
    fn default() -> Self {
        KdeFitConfig {
            max_kernels: MAX_KERNELS,
            max_em_iters: 100,
            min_heldout_gain: 0.01,
            min_component_samples: 5.0,
        }
    }
}

struct KdeEm<'a> {
    set: &'a SampleSet,
    offsets: Vec<usize>,
    train: Vec<usize>,
    held: Vec<usize>,
    global_bw: Vec<f64>,
    cfg: &'a KdeFitConfig,
}

type Factors = Vec<AtomFactor>;

impl<'a> KdeEm<'a> {
    fn atom_values(&self, row: usize, a: usize) -> impl Iterator<Item = f64> + '_ {
        let off = self.offsets[a];
        self.set.rows[row][off..off + self.set.atoms[a].population]
            .iter()
            .cloned()
            .filter(|x| !x.is_nan())
    }

    fn row_log(&self, row: usize, factors: &Factors) -> f64 {
        let mut acc = 0.0;
        for (a, f) in factors.iter().enumerate() {
            for x in self.atom_values(row, a) {
                acc += f.log_rv(x).unwrap_or(f64::NEG_INFINITY);
            }
        }
        acc
    }

    fn logs(&self, rows: &[usize], w: &[f64], comps: &[Factors]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|&t| {
                comps
                    .iter()
                    .zip(w)
                    .map(|(f, w)| w.ln() + self.row_log(t, f))
                    .collect()
            })
            .collect()
    }

    fn mean_ll(&self, rows: &[usize], w: &[f64], comps: &[Factors]) -> f64 {
        if rows.is_empty() {
            return 0.0;
        }
        self.logs(rows, w, comps).iter().map(|l| log_sum_exp(l)).sum::<f64>() / rows.len() as f64
    }

    /// Builds one component's factors from responsibility-weighted training rows.
    fn m_step_component(&self, resp: &[f64], rng: &mut ChaCha8Rng) -> Factors {
        self.set
            .atoms
            .iter()
            .enumerate()
            .map(|(a, atom)| {
                let mut pts = Vec::new();
                let mut wts = Vec::new();
                for (i, &t) in self.train.iter().enumerate() {
                    if resp[i] <= 0.0 {
                        continue;
                    }
                    for x in self.atom_values(t, a) {
                        pts.push(x);
                        wts.push(resp[i]);
                    }
                }
                match atom.values() {
                    Some(d) => {
                        let mut c = vec![1e-9; d];
                        for (x, w) in pts.iter().zip(&wts) {
                            c[*x as usize] += w;
                        }
                        let s: f64 = c.iter().sum();
                        AtomFactor::categorical(c.iter().map(|v| v / s).collect())
                    }
                    None => {
                        let bw = bandwidth_select(&pts, &wts).max(0.1 * self.global_bw[a]);
                        let (centers, weights) = resample_kernels(&pts, &wts, self.cfg.max_kernels, rng);
                        AtomFactor::Kde(Kde {
                            centers,
                            weights,
                            bandwidth: bw,
                        })
                    }
                }
            })
            .collect()
    }

    fn m_step(&self, resp: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<Factors>) {
        let mut w = vec![0.0; k];
        for r in resp {
            for l in 0..k {
                w[l] += r[l];
            }
        }
        let total: f64 = w.iter().sum();
        let comps = (0..k)
            .map(|l| {
                let col: Vec<f64> = resp.iter().map(|r| r[l]).collect();
                self.m_step_component(&col, rng)
            })
            .collect();
        (w.iter().map(|x| x / total).collect(), comps)
    }

    fn e_step(&self, w: &[f64], comps: &[Factors]) -> (Vec<Vec<f64>>, f64) {
        let logs = self.logs(&self.train, w, comps);
        let mut ll = 0.0;
        let resp = logs
            .iter()
            .map(|l| {
                let z = log_sum_exp(l);
                ll += z;
                l.iter().map(|x| (x - z).exp()).collect()
            })
            .collect();
        (resp, ll / self.train.len() as f64)
    }

    /// Generalized EM from initial responsibilities: a step is kept only when
    /// it raises the training log-likelihood.
    fn run(
        &self,
        resp0: Vec<Vec<f64>>,
        k: usize,
        rng: &mut ChaCha8Rng,
        trace: &mut Vec<f64>,
    ) -> (Vec<f64>, Vec<Factors>, usize) {
        let (mut w, mut comps) = self.m_step(&resp0, k, rng);
        let (mut resp, mut ll) = self.e_step(&w, &comps);
        trace.push(ll);
        let mut iters = 0;
        for _ in 0..self.cfg.max_em_iters {
            let (w2, c2) = self.m_step(&resp, k, rng);
            let (r2, ll2) = self.e_step(&w2, &c2);
            iters += 1;
            if !(ll2 > ll) {
                break;
            }
            let rel = (ll2 - ll) / ll.abs().max(1.0);
            w = w2;
            comps = c2;
            resp = r2;
            ll = ll2;
            trace.push(ll);
            if rel < 1e-6 {
                break;
            }
        }
        (w, comps, iters)
    }

    /// Per-row summary used to seed new components: per atom, the mean of its
    /// values (and value frequencies for discrete atoms).
    fn features(&self, row: usize) -> Vec<f64> {
        let mut f = Vec::new();
        for (a, atom) in self.set.atoms.iter().enumerate() {
            let vals: Vec<f64> = self.atom_values(row, a).collect();
            match atom.values() {
                Some(d) => {
                    let mut c = vec![0.0; d];
                    for v in &vals {
                        c[*v as usize] += 1.0;
                    }
                    let n = vals.len().max(1) as f64;
                    f.extend(c.iter().map(|x| x / n));
                }
                None => {
                    let m = if vals.is_empty() {
                        0.0
                    } else {
                        vals.iter().sum::<f64>() / vals.len() as f64
                    };
                    f.push(m / self.global_bw[a].max(1e-9));
                }
            }
        }
        f
    }
}

/// Weighted resampling of kernel centers down to at most `cap` points with
/// systematic resampling; small inputs are kept with their weights.
fn resample_kernels(pts: &[f64], wts: &[f64], cap: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let s: f64 = wts.iter().sum();
    if pts.len() <= cap {
        return (pts.to_vec(), wts.iter().map(|w| w / s).collect());
    }
    let u0: f64 = rng.random::<f64>() / cap as f64;
    let mut out = Vec::with_capacity(cap);
    let mut cum = 0.0;
    let mut i = 0;
    for j in 0..cap {
        let target = (u0 + j as f64 / cap as f64) * s;
        while i + 1 < pts.len() && cum + wts[i] < target {
            cum += wts[i];
            i += 1;
        }
        out.push(pts[i]);
    }
    let w = vec![1.0 / cap as f64; cap];
    (out, w)
}

/// Fits a mixture of products of per-atom KDEs (categorical pmfs for discrete
/// atoms) to a sample set by EM, growing k while held-out likelihood improves.
pub fn fit_kde_mixture(
    samples: &SampleSet,
    tol: f64,
    k_max: usize,
    seed: u64,
    cfg: &KdeFitConfig,
) -> Result<(IidMixture, FitReport)> {
    if k_max == 0 {
        return Err(Error::InvalidArgument("k_max must be at least 1".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tol must be positive, got {tol}")));
    }
    if samples.atoms.iter().all(|a| a.domain.is_discrete()) {
        return Err(Error::InvalidArgument("KDE fit needs at least one continuous atom".into()));
    }
    let n = samples.len();
    if n == 0 {
        return Err(Error::Fit("no samples".into()));
    }
    let mut distinct = samples.rows.clone();
    distinct.sort_by(|a, b| a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    distinct.dedup();
    if distinct.len() < k_max.min(n) {
        return Err(Error::Fit(format!(
            "{} distinct samples cannot support {} components",
            distinct.len(),
            k_max.min(n)
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Every fifth row is held out once there are enough rows.
    let (train, held): (Vec<usize>, Vec<usize>) = if n >= 50 {
        (0..n).partition(|i| i % 5 != 4)
    } else {
        ((0..n).collect(), Vec::new())
    };
    let offsets = samples.offsets();
    let global_bw = samples
        .atoms
        .iter()
        .enumerate()
        .map(|(a, atom)| {
            let pts: Vec<f64> = samples
                .rows
                .iter()
                .flat_map(|r| r[offsets[a]..offsets[a] + atom.population].iter().cloned())
                .filter(|x| !x.is_nan())
                .collect();
            bandwidth_select(&pts, &[])
        })
        .collect();
    let em = KdeEm {
        set: samples,
        offsets,
        train,
        held,
        global_bw,
        cfg,
    };
    let mut report = FitReport {
        tv_is_estimate: true,
        ..Default::default()
    };

    let k_limit = k_max.min(em.train.len()).max(1);
    report.run_starts.push(0);
    let ones = vec![vec![1.0]; em.train.len()];
    let (mut w, mut comps, iters) = em.run(ones, 1, &mut rng, &mut report.log_likelihood_trace);
    report.em_iterations += iters;
    let score_rows = if em.held.is_empty() { &em.train } else { &em.held };
    let mut score = em.mean_ll(score_rows, &w, &comps);
    let mut tv = estimate_tv(&em, &w, &comps);
    report.tv_by_k.push(tv);

    while w.len() < k_limit && tv > tol {
        let k = w.len();
        let (cur_resp, _) = em.e_step(&w, &comps);
        let row_ll: Vec<f64> = em
            .logs(&em.train, &w, &comps)
            .iter()
            .map(|l| log_sum_exp(l))
            .collect();
        let worst = (0..em.train.len())
            .min_by(|a, b| row_ll[*a].total_cmp(&row_ll[*b]).then(a.cmp(b)))
            .unwrap();
        let seeds = [worst, rng.random_range(0..em.train.len()), rng.random_range(0..em.train.len())];
        let feats: Vec<Vec<f64>> = em.train.iter().map(|&t| em.features(t)).collect();
        let take = (em.train.len() / (k + 1)).max(1);

        let mut cand: Option<(Vec<f64>, Vec<Factors>, f64, Vec<f64>)> = None;
        for &s in &seeds {
            let mut order: Vec<usize> = (0..em.train.len()).collect();
            let dist = |i: usize| -> f64 { feats[i].iter().zip(&feats[s]).map(|(a, b)| (a - b).powi(2)).sum() };
            order.sort_by(|a, b| dist(*a).total_cmp(&dist(*b)).then(a.cmp(b)));
            let mut resp: Vec<Vec<f64>> = cur_resp.iter().map(|r| {
                let mut r = r.clone();
                r.push(0.0);
                r
            }).collect();
            for &i in order.iter().take(take) {
                resp[i] = vec![0.0; k + 1];
                resp[i][k] = 1.0;
            }
            let mut trace = Vec::new();
            let (mut w2, mut c2, iters) = em.run(resp, k + 1, &mut rng, &mut trace);
            report.em_iterations += iters;
            // Prune components supported by too few samples.
            let m = em.train.len() as f64;
            let keep: Vec<usize> = (0..w2.len())
                .filter(|&l| w2[l] * m >= cfg.min_component_samples.min(m))
                .collect();
            if keep.len() < w2.len() && !keep.is_empty() {
                let s: f64 = keep.iter().map(|&l| w2[l]).sum();
                w2 = keep.iter().map(|&l| w2[l] / s).collect();
                c2 = keep.iter().map(|&l| c2[l].clone()).collect();
            }
            let sc = em.mean_ll(score_rows, &w2, &c2);
            if cand.as_ref().is_none_or(|c| sc > c.2) {
                cand = Some((w2, c2, sc, trace));
            }
        }
        let (w2, c2, sc, trace) = cand.unwrap();
        if w2.len() <= k || sc - score < cfg.min_heldout_gain {
            report.diagnostics.push(format!(
                "stopped at k={k}: held-out gain {:.4} below {}",
                sc - score,
                cfg.min_heldout_gain
            ));
            break;
        }
        report.run_starts.push(report.log_likelihood_trace.len());
        report.log_likelihood_trace.extend(trace);
        w = w2;
        comps = c2;
        score = sc;
        tv = estimate_tv(&em, &w, &comps);
        report.tv_by_k.push(tv);
    }

    report.k_used = w.len();
    report.achieved_tv = tv;
    report.diagnostics.push(format!("held-out mean log-likelihood {score:.6}"));
    let components = w
        .into_iter()
        .zip(comps)
        .map(|(weight, factors)| Component { weight, factors })
        .collect();
    let mut m = IidMixture::from_parts_unchecked(samples.atoms.clone(), components, 0.0);
    m.renormalize();
    m.set_log_mass(0.0);
    m.validate()?;
    Ok((m, report))
}

/// TV estimate between the sampled target and the fit: the target density is
/// proxied by a full-dimensional KDE on training rows, evaluated at held-out
/// rows, so TV ~ mean over held-out of max(0, 1 - q/p).
fn estimate_tv(em: &KdeEm<'_>, w: &[f64], comps: &[Factors]) -> f64 {
    if em.held.is_empty() {
        return f64::NAN;
    }
    let dim = em.set.rows[0].len();
    let train: Vec<&Vec<f64>> = em.train.iter().take(1000).map(|&t| &em.set.rows[t]).collect();
    // Per-coordinate bandwidths from the global per-atom values, scaled for dimension.
    let mut bw = Vec::with_capacity(dim);
    for (a, atom) in em.set.atoms.iter().enumerate() {
        for _ in 0..atom.population {
            bw.push(em.global_bw[a].max(1e-3) * (train.len() as f64).powf(-1.0 / (dim as f64 + 4.0) + 0.2));
        }
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for &h in em.held.iter().take(500) {
        let x = &em.set.rows[h];
        if x.iter().any(|v| v.is_nan()) {
            continue;
        }
        let terms: Vec<f64> = train
            .iter()
            .map(|c| {
                c.iter()
                    .zip(x)
                    .zip(&bw)
                    .enumerate()
                    .map(|(j, ((ci, xi), b))| {
                        if em.coord_is_discrete(j) {
                            if ci == xi { 0.0 } else { f64::NEG_INFINITY }
                        } else {
                            normal_log_pdf(*xi, *ci, b * b)
                        }
                    })
                    .sum()
            })
            .collect();
        let lp = log_sum_exp(&terms) - (train.len() as f64).ln();
        let lq = log_sum_exp(
            &comps
                .iter()
                .zip(w)
                .map(|(f, w)| w.ln() + em.row_log(h, f))
                .collect::<Vec<_>>(),
        );
        acc += (1.0 - (lq - lp).exp()).max(0.0);
        count += 1;
    }
    if count == 0 {
        f64::NAN
    } else {
        acc / count as f64
    }
}

impl KdeEm<'_> {
    fn coord_is_discrete(&self, j: usize) -> bool {
        let mut off = 0;
        for a in &self.set.atoms {
            if j < off + a.population {
                return a.domain.is_discrete();
            }
            off += a.population;
        }
        false
    }
}
