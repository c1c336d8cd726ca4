//! Latent-variable elimination over variational models.
//!
//! Potentials are mixtures of per-atom factors. Multiplying two potentials
//! that share an atom multiplies the shared factors component pair by
//! component pair; the normalizer of each factor product becomes a weight
//! scale. Eliminating an atom then just drops its (normalized) factor.
//!
//! Discrete factors multiply as laws over the atom's histogram; large
//! populations use a Normal approximation of the histogram law so the product
//! stays closed-form. Continuous factors multiply per ground rv.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::continuous::{Kde, MAX_KERNELS};
use crate::error::{Error, Result};
use crate::math::{digamma, ln_choose, ln_multinomial, log_sum_exp, normal_cdf, normal_log_pdf, trigamma};
use crate::mixture::{power_count_laplace, AtomFactor, Component, IidMixture, MixtureAtom};
use crate::model::{Atom, HistogramSpace, Potential, Rhm};

/// Cap on histogram-space sizes handled by exact factor products.
const EXACT_SPACE_CAP: f64 = 2e6;

/// Normal approximation of one histogram coordinate's law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianApproxComponent {
    pub mean: f64,
    pub var: f64,
}

impl GaussianApproxComponent {
    pub fn new(mean: f64, var: f64) -> Result<Self> {
        if !(var > 0.0) {
            return Err(Error::Domain(format!("variance {var} must be positive")));
        }
        Ok(GaussianApproxComponent { mean, var })
    }

    /// Mean n p and variance n p (1 - p) of a binomial count.
    pub fn from_binomial(n: usize, p: f64) -> Result<Self> {
        Self::new(n as f64 * p, n as f64 * p * (1.0 - p))
    }
}

/// Integral of the product of two Normal densities.
pub fn normal_overlap(a: &GaussianApproxComponent, b: &GaussianApproxComponent) -> f64 {
    normal_log_pdf(a.mean, b.mean, a.var + b.var).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LveConfig {
    pub k_cap: usize,
    /// Minimum population for the Normal approximation.
    pub normal_min_population: usize,
    /// Per-value probabilities must lie in this range for the Normal approximation.
    pub normal_p_range: (f64, f64),
    /// Grid points per continuous latent when compiling them away.
    pub latent_grid: usize,
    /// Explicit elimination order; atoms not listed follow the default policy.
    pub order: Option<Vec<String>>,
    pub normal_mode: NormalMode,
}

/// How products of histogram laws are approximated once the gate passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalMode {
    /// Each factor becomes f_N(mean, var) of its counts; products follow the
    /// Gaussian product rule.
    Moment,
    /// The Normal is centered at the mode of the exact log-product, with the
    /// curvature there as precision.
    #[default]
    Laplace,
}

impl Default for LveConfig {
    fn default() -> Self {
        LveConfig {
            k_cap: 64,
            normal_min_population: 10,
            normal_p_range: (0.05, 0.95),
            latent_grid: 64,
            order: None,
            normal_mode: NormalMode::default(),
        }
    }
}

/// Inner-loop counters, used to check that costs do not depend on populations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub component_pairs: u64,
    pub factor_products: u64,
    pub exact_cells: u64,
    pub kernel_pairs: u64,
    pub merges: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Observation {
    /// Counts per value of observed rvs of a discrete atom.
    Counts { atom: String, counts: Vec<usize> },
    /// Observed values of rvs of an atom (continuous, or discrete values).
    Values { atom: String, values: Vec<f64> },
}

impl Observation {
    pub fn atom(&self) -> &str {
        match self {
            Observation::Counts { atom, .. } | Observation::Values { atom, .. } => atom,
        }
    }

    pub fn observed(&self) -> usize {
        match self {
            Observation::Counts { counts, .. } => counts.iter().sum(),
            Observation::Values { values, .. } => values.len(),
        }
    }
}

/// Role of a continuous latent variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum LatentRole {
    /// The success probability of a single-component potential's binary factor.
    BernoulliParameter { potential: String, atom: String },
    /// The weight of component 0 of a two-component potential.
    ComponentWeight { potential: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousLatent {
    pub name: String,
    pub role: LatentRole,
    pub support: (f64, f64),
}

impl ContinuousLatent {
    pub fn potential(&self) -> &str {
        match &self.role {
            LatentRole::BernoulliParameter { potential, .. } | LatentRole::ComponentWeight { potential } => potential,
        }
    }
}

/// f_N(a - b; mean, var) between two continuous latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCoupling {
    pub a: String,
    pub b: String,
    pub mean: f64,
    pub var: f64,
}

impl LatentCoupling {
    pub fn log_eval(&self, a: f64, b: f64) -> f64 {
        normal_log_pdf(a - b, self.mean, self.var)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalPotential {
    pub name: String,
    pub mixture: IidMixture,
    /// Per-component log-likelihood of everything observed so far.
    pub evidence: Vec<f64>,
    /// Observed value counts per discrete atom.
    pub observed_counts: BTreeMap<String, Vec<usize>>,
    /// Per-component evidence split by observed atom.
    #[serde(default)]
    pub atom_evidence: BTreeMap<String, Vec<f64>>,
}

impl VariationalPotential {
    pub fn new(name: impl Into<String>, mixture: IidMixture) -> Self {
        let k = mixture.k();
        VariationalPotential {
            name: name.into(),
            mixture,
            evidence: vec![0.0; k],
            observed_counts: BTreeMap::new(),
            atom_evidence: BTreeMap::new(),
        }
    }

    pub fn mentions(&self, atom: &str) -> bool {
        self.mixture.atom_index(atom).is_some()
    }
}

/// A model whose every potential is a mixture of iid components.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VariationalModel {
    /// Atoms with their effective (unobserved) populations.
    pub atoms: BTreeMap<String, Atom>,
    pub potentials: Vec<VariationalPotential>,
    pub latents: Vec<ContinuousLatent>,
    pub couplings: Vec<LatentCoupling>,
}

impl VariationalModel {
    pub fn new(atoms: Vec<Atom>, potentials: Vec<VariationalPotential>) -> Result<Self> {
        let m = VariationalModel {
            atoms: atoms.into_iter().map(|a| (a.name.clone(), a)).collect(),
            potentials,
            latents: Vec::new(),
            couplings: Vec::new(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Wraps an RHM whose parfactors all hold variational potentials.
    pub fn from_rhm(rhm: &Rhm) -> Result<Self> {
        let mut potentials = Vec::new();
        for g in &rhm.parfactors {
            match &g.potential {
                Potential::Variational(m) => potentials.push(VariationalPotential::new(g.name.clone(), m.clone())),
                _ => {
                    return Err(Error::InvalidModel(format!(
                        "parfactor `{}` is not variational",
                        g.name
                    )))
                }
            }
        }
        Self::new(rhm.atoms.values().cloned().collect(), potentials)
    }

    pub fn with_latents(mut self, latents: Vec<ContinuousLatent>, couplings: Vec<LatentCoupling>) -> Result<Self> {
        self.latents = latents;
        self.couplings = couplings;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for p in &self.potentials {
            if !names.insert(p.name.as_str()) {
                return Err(Error::InvalidModel(format!("duplicate potential `{}`", p.name)));
            }
            p.mixture.validate().map_err(|e| e.in_parfactor(&p.name))?;
            if p.evidence.len() != p.mixture.k() {
                return Err(Error::InvalidModel(format!("potential `{}` evidence length mismatch", p.name)));
            }
            for a in p.mixture.atoms() {
                let decl = self.atoms.get(&a.name).ok_or_else(|| Error::UnknownAtom(a.name.clone()))?;
                if decl.population != a.population || decl.domain.value_count() != a.domain.value_count() {
                    return Err(Error::InvalidModel(format!(
                        "potential `{}` disagrees with the declaration of atom `{}`",
                        p.name, a.name
                    )));
                }
            }
            if !p.mixture.log_mass().is_finite() {
                return Err(Error::InvalidModel(format!("potential `{}` has zero mass", p.name)));
            }
        }
        let mut lnames = BTreeSet::new();
        for l in &self.latents {
            if !lnames.insert(l.name.as_str()) {
                return Err(Error::InvalidModel(format!("duplicate latent `{}`", l.name)));
            }
            if !(l.support.0 < l.support.1) {
                return Err(Error::Domain(format!("latent `{}` has an empty support", l.name)));
            }
            let p = self
                .potential(l.potential())
                .ok_or_else(|| Error::InvalidModel(format!("latent `{}` names unknown potential", l.name)))?;
            match &l.role {
                LatentRole::BernoulliParameter { atom, .. } => {
                    let i = p.mixture.atom_index(atom).ok_or_else(|| Error::UnknownAtom(atom.clone()))?;
                    if p.mixture.atoms()[i].values() != Some(2) || p.mixture.k() != 1 {
                        return Err(Error::InvalidModel(format!(
                            "latent `{}` needs a single-component potential over binary `{atom}`",
                            l.name
                        )));
                    }
                    if l.support.0 < 0.0 || l.support.1 > 1.0 {
                        return Err(Error::Domain(format!("latent `{}` must lie in [0, 1]", l.name)));
                    }
                }
                LatentRole::ComponentWeight { .. } => {
                    if p.mixture.k() != 2 {
                        return Err(Error::InvalidModel(format!(
                            "latent `{}` needs a two-component potential",
                            l.name
                        )));
                    }
                    if l.support.0 < 0.0 || l.support.1 > 1.0 {
                        return Err(Error::Domain(format!("latent `{}` must lie in [0, 1]", l.name)));
                    }
                }
            }
        }
        for c in &self.couplings {
            if !(c.var > 0.0) {
                return Err(Error::Domain("coupling variance must be positive".into()));
            }
            for n in [&c.a, &c.b] {
                if !lnames.contains(n.as_str()) {
                    return Err(Error::InvalidModel(format!("coupling names unknown latent `{n}`")));
                }
            }
        }
        Ok(())
    }

    pub fn potential(&self, name: &str) -> Option<&VariationalPotential> {
        self.potentials.iter().find(|p| p.name == name)
    }

    pub fn potential_index(&self, name: &str) -> Option<usize> {
        self.potentials.iter().position(|p| p.name == name)
    }

    pub fn latent_for(&self, potential: &str) -> Option<&ContinuousLatent> {
        self.latents.iter().find(|l| l.potential() == potential)
    }
}

fn discrete_counts(atom: &Atom, obs: &Observation) -> Result<Option<Vec<usize>>> {
    let d = match atom.domain.value_count() {
        Some(d) => d,
        None => {
            return match obs {
                Observation::Counts { .. } => Err(Error::Domain(format!(
                    "counts given for continuous atom `{}`",
                    atom.name
                ))),
                Observation::Values { values, .. } => {
                    if let Some(x) = values.iter().find(|x| !atom.domain.contains(**x)) {
                        return Err(Error::Domain(format!("value {x} outside the domain of `{}`", atom.name)));
                    }
                    Ok(None)
                }
            }
        }
    };
    let counts = match obs {
        Observation::Counts { counts, .. } => {
            if counts.len() != d {
                return Err(Error::Arity(format!(
                    "atom `{}` has {d} values but {} counts were given",
                    atom.name,
                    counts.len()
                )));
            }
            counts.clone()
        }
        Observation::Values { values, .. } => {
            let mut c = vec![0usize; d];
            for &x in values {
                if !atom.domain.contains(x) {
                    return Err(Error::Domain(format!("value {x} outside the domain of `{}`", atom.name)));
                }
                c[x as usize] += 1;
            }
            c
        }
    };
    Ok(Some(counts))
}

/// Conditions a histogram pmf on `c` observed rvs: the result is a pmf over
/// the remaining population and the log-likelihood of the observation.
fn condition_count_table(pmf: &[f64], d: usize, n: usize, c: &[usize]) -> Result<(Vec<f64>, f64)> {
    let observed: usize = c.iter().sum();
    let rest = n - observed;
    let big = HistogramSpace::new(d, n);
    let small = HistogramSpace::new(d, rest);
    let mut out = Vec::with_capacity(small.len());
    for h in small.items() {
        let full: Vec<usize> = h.counts().iter().zip(c).map(|(a, b)| a + b).collect();
        let idx = big
            .index_of(&crate::model::Histogram::new(full.clone()))
            .ok_or_else(|| Error::InvalidHistogram(format!("{full:?}")))?;
        let q = pmf[idx];
        out.push(if q > 0.0 {
            q.ln() + ln_multinomial(h.counts()) - ln_multinomial(&full)
        } else {
            f64::NEG_INFINITY
        });
    }
    let lz = log_sum_exp(&out);
    if !lz.is_finite() {
        return Ok((vec![0.0; out.len()], f64::NEG_INFINITY));
    }
    Ok((out.iter().map(|l| (l - lz).exp()).collect(), lz))
}

/// Conditions the model on observed ground rvs. Every potential over an
/// observed atom multiplies each component weight by that component's
/// likelihood of the observation; the atom's population shrinks by the
/// number of observed rvs.
pub fn update_obs(model: &VariationalModel, obs: &[Observation]) -> Result<VariationalModel> {
    let mut out = model.clone();
    for o in obs {
        let atom = out
            .atoms
            .get(o.atom())
            .ok_or_else(|| Error::UnknownAtom(o.atom().to_string()))?
            .clone();
        let k_obs = o.observed();
        if k_obs > atom.population {
            return Err(Error::Domain(format!(
                "observed {k_obs} rvs of `{}` but only {} remain",
                atom.name, atom.population
            )));
        }
        if k_obs == 0 {
            continue;
        }
        let counts = discrete_counts(&atom, o)?;
        let rest = atom.population - k_obs;
        for pot in out.potentials.iter_mut() {
            let Some(ai) = pot.mixture.atom_index(&atom.name) else {
                continue;
            };
            if let Some(c) = &counts {
                let e = pot.observed_counts.entry(atom.name.clone()).or_insert_with(|| vec![0; c.len()]);
                for (x, y) in e.iter_mut().zip(c) {
                    *x += y;
                }
            }
            let matom = pot.mixture.atoms()[ai].clone();
            let k = pot.mixture.k();
            let mut parts = Vec::with_capacity(pot.mixture.k());
            for (l, comp) in pot.mixture.components().iter().enumerate() {
                let mut factors = comp.factors.clone();
                let ll = match (&comp.factors[ai], &counts, o) {
                    (AtomFactor::Categorical { p }, Some(c), _) => c
                        .iter()
                        .zip(p)
                        .map(|(&c, &q)| if c == 0 { 0.0 } else { c as f64 * q.ln() })
                        .sum::<f64>(),
                    (AtomFactor::Kde(k), None, Observation::Values { values, .. }) => {
                        values.iter().map(|&x| k.log_eval(x)).sum()
                    }
                    (f @ (AtomFactor::CountTable { .. } | AtomFactor::CountNormal { .. } | AtomFactor::PowerCount { .. }), Some(c), _) => {
                        let d = matom.values().unwrap();
                        let space = HistogramSpace::new(d, matom.population);
                        let pmf = f.hist_pmf(&matom, &space)?;
                        let (t, lz) = condition_count_table(&pmf, d, matom.population, c)?;
                        if rest > 0 {
                            factors[ai] = AtomFactor::CountTable { pmf: t };
                        }
                        lz
                    }
                    (f, _, _) => {
                        return Err(Error::Domain(format!(
                            "cannot condition a {} factor of `{}` on this observation",
                            f.kind(),
                            atom.name
                        )))
                    }
                };
                pot.evidence[l] += ll;
                pot.atom_evidence.entry(atom.name.clone()).or_insert_with(|| vec![0.0; k])[l] += ll;
                parts.push((comp.weight.ln() + ll, factors));
            }
            let mut atoms = pot.mixture.atoms().to_vec();
            atoms[ai].population = rest;
            let mut m = if parts.iter().all(|(l, _)| *l == f64::NEG_INFINITY) {
                return Err(Error::InconsistentObservations(format!(
                    "potential `{}` gives zero likelihood to the observation of `{}`",
                    pot.name, atom.name
                )));
            } else {
                build_with_zero_weights(atoms, parts, pot.mixture.log_mass())?
            };
            if rest == 0 {
                let keep: Vec<String> = m
                    .atoms()
                    .iter()
                    .filter(|a| a.name != atom.name)
                    .map(|a| a.name.clone())
                    .collect();
                let keep_ref: Vec<&str> = keep.iter().map(|s| s.as_str()).collect();
                m = m.restrict(&keep_ref)?;
            }
            pot.mixture = m;
        }
        if rest == 0 {
            out.atoms.remove(&atom.name);
        } else {
            out.atoms.get_mut(&atom.name).unwrap().population = rest;
        }
    }
    Ok(out)
}

/// Like `IidMixture::from_log_weights` but keeps zero-weight components so
/// component indices stay aligned with evidence vectors.
fn build_with_zero_weights(atoms: Vec<MixtureAtom>, parts: Vec<(f64, Vec<AtomFactor>)>, log_mass: f64) -> Result<IidMixture> {
    let logs: Vec<f64> = parts.iter().map(|(l, _)| *l).collect();
    let lz = log_sum_exp(&logs);
    if !lz.is_finite() {
        return Err(Error::Underflow("all component weights vanished".into()));
    }
    let components = parts
        .into_iter()
        .map(|(l, factors)| Component {
            weight: (l - lz).exp(),
            factors,
        })
        .collect();
    let mut m = IidMixture::from_parts_unchecked(atoms, components, log_mass + lz);
    m.renormalize();
    m.validate()?;
    Ok(m)
}

fn normal_gate(atom: &MixtureAtom, f: &AtomFactor, cfg: &LveConfig) -> bool {
    if atom.population < cfg.normal_min_population {
        return false;
    }
    let (lo, hi) = cfg.normal_p_range;
    match f {
        AtomFactor::Categorical { p } => p.iter().all(|q| (lo..=hi).contains(q)),
        AtomFactor::CountNormal { .. } => true,
        AtomFactor::PowerCount { power, theta, .. } => match power_count_laplace(atom.population, *power, theta) {
            Ok(l) => l.mode.iter().all(|m| (lo..=hi).contains(&(m / atom.population as f64))),
            Err(_) => false,
        },
        _ => false,
    }
}

/// Product of two Gaussian-kernel KDEs as a density: returns the log of the
/// per-rv normalizer and the normalized product KDE (kernel count capped).
pub fn kde_product(a: &Kde, b: &Kde, cap: usize, counts: &mut OpCounts) -> Result<(f64, Kde)> {
    let b1 = a.bandwidth() * a.bandwidth();
    let b2 = b.bandwidth() * b.bandwidth();
    let s = b1 + b2;
    let bw2 = b1 * b2 / s;
    let mut centers = Vec::with_capacity(a.len() * b.len());
    let mut logw = Vec::with_capacity(a.len() * b.len());
    for (mu, wa) in a.centers().iter().zip(a.weights()) {
        for (nu, wb) in b.centers().iter().zip(b.weights()) {
            counts.kernel_pairs += 1;
            centers.push((mu * b2 + nu * b1) / s);
            logw.push(wa.ln() + wb.ln() + normal_log_pdf(*mu, *nu, s));
        }
    }
    let lz = log_sum_exp(&logw);
    if !lz.is_finite() {
        return Err(Error::Underflow("kernel products vanished".into()));
    }
    let w: Vec<f64> = logw.iter().map(|l| (l - lz).exp()).collect();
    let (centers, w) = cap_kernels(centers, w, cap);
    Ok((lz, Kde::weighted(centers, w, bw2.sqrt())?))
}

/// Deterministic systematic resampling down to `cap` kernels; the weighted
/// mean of the centers is preserved by a final shift.
fn cap_kernels(centers: Vec<f64>, w: Vec<f64>, cap: usize) -> (Vec<f64>, Vec<f64>) {
    let w: Vec<f64> = {
        let s: f64 = w.iter().sum();
        w.iter().map(|x| x / s).collect()
    };
    if centers.len() <= cap {
        return (centers, w);
    }
    let mean: f64 = centers.iter().zip(&w).map(|(c, w)| c * w).sum();
    let mut out = Vec::with_capacity(cap);
    let mut cum = 0.0;
    let mut i = 0;
    for j in 0..cap {
        let target = (j as f64 + 0.5) / cap as f64;
        while i + 1 < centers.len() && cum + w[i] < target {
            cum += w[i];
            i += 1;
        }
        out.push(centers[i]);
    }
    let new_mean = out.iter().sum::<f64>() / cap as f64;
    let shift = mean - new_mean;
    let out = out.into_iter().map(|c| c + shift).collect();
    (out, vec![1.0 / cap as f64; cap])
}

fn moment_product(atom: &MixtureAtom, f1: &AtomFactor, f2: &AtomFactor) -> Result<(f64, AtomFactor)> {
    let (m1, v1) = f1.count_moments(atom)?;
    let (m2, v2) = f2.count_moments(atom)?;
    let mut lz = 0.0;
    let mut mean = Vec::with_capacity(m1.len());
    let mut var = Vec::with_capacity(m1.len());
    for i in 0..m1.len() {
        let a = GaussianApproxComponent::new(m1[i], v1[i])?;
        let b = GaussianApproxComponent::new(m2[i], v2[i])?;
        lz += normal_overlap(&a, &b).ln();
        mean.push((a.mean * b.var + b.mean * a.var) / (a.var + b.var));
        var.push(a.var * b.var / (a.var + b.var));
    }
    Ok((lz, AtomFactor::CountNormal { mean, var }))
}

/// A factor as a power-count law: (power, tilts, Laplace log normalizer).
fn as_power(atom: &MixtureAtom, f: &AtomFactor) -> Result<Option<(f64, Vec<f64>, f64)>> {
    match f {
        AtomFactor::Categorical { p } => {
            let theta: Vec<f64> = p.iter().map(|q| q.max(1e-300).ln()).collect();
            let l = power_count_laplace(atom.population, 1.0, &theta)?;
            Ok(Some((1.0, theta, l.log_z)))
        }
        AtomFactor::PowerCount { power, theta, log_norm } => Ok(Some((*power, theta.clone(), *log_norm))),
        _ => Ok(None),
    }
}

fn laplace_product(atom: &MixtureAtom, f1: &AtomFactor, f2: &AtomFactor) -> Result<(f64, AtomFactor)> {
    match (as_power(atom, f1)?, as_power(atom, f2)?) {
        (Some((p1, t1, z1)), Some((p2, t2, z2))) => {
            let theta: Vec<f64> = t1.iter().zip(&t2).map(|(a, b)| a + b).collect();
            let f = AtomFactor::power_count(atom.population, p1 + p2, theta)?;
            let AtomFactor::PowerCount { log_norm, .. } = &f else { unreachable!() };
            Ok((log_norm - z1 - z2, f))
        }
        _ => moment_product(atom, f1, f2),
    }
}

/// Power-count law whose Laplace mode and variances match the given count
/// moments (exactly for binary atoms).
fn power_from_moments(atom: &MixtureAtom, mean: &[f64], var: &[f64]) -> Result<AtomFactor> {
    let n = atom.population as f64;
    let m0 = (n - mean.iter().sum::<f64>()).max(1e-9);
    let mut precision = 0.0;
    for (m, v) in mean.iter().zip(var) {
        let m = m.clamp(1e-9, n);
        precision += 1.0 / (v.max(1e-9) * (trigamma(m + 1.0) + trigamma(m0 + 1.0)));
    }
    let power = precision / mean.len() as f64;
    let mut theta = vec![0.0];
    theta.extend(
        mean.iter()
            .map(|m| power * (digamma(m.clamp(1e-9, n) + 1.0) - digamma(m0 + 1.0))),
    );
    AtomFactor::power_count(atom.population, power, theta)
}

/// Product of two factors of the same atom: log normalizer and normalized product.
pub(crate) fn factor_product(
    atom: &MixtureAtom,
    f1: &AtomFactor,
    f2: &AtomFactor,
    cfg: &LveConfig,
    counts: &mut OpCounts,
) -> Result<(f64, AtomFactor)> {
    counts.factor_products += 1;
    match (f1, f2) {
        (AtomFactor::Kde(a), AtomFactor::Kde(b)) => {
            let (lz, k) = kde_product(a, b, MAX_KERNELS, counts)?;
            Ok((atom.population as f64 * lz, AtomFactor::Kde(k)))
        }
        (AtomFactor::Kde(_), _) | (_, AtomFactor::Kde(_)) => Err(Error::Domain(format!(
            "cannot multiply a KDE with a {} factor on `{}`",
            if matches!(f1, AtomFactor::Kde(_)) { f2.kind() } else { f1.kind() },
            atom.name
        ))),
        _ => {
            if normal_gate(atom, f1, cfg) && normal_gate(atom, f2, cfg) {
                match cfg.normal_mode {
                    NormalMode::Moment => moment_product(atom, f1, f2),
                    NormalMode::Laplace => laplace_product(atom, f1, f2),
                }
            } else {
                let d = atom.values().unwrap();
                if HistogramSpace::size(d, atom.population) > EXACT_SPACE_CAP {
                    return Err(Error::StateSpaceCap {
                        states: HistogramSpace::size(d, atom.population),
                        cap: EXACT_SPACE_CAP,
                    });
                }
                let space = HistogramSpace::new(d, atom.population);
                let p1 = f1.hist_pmf(atom, &space)?;
                let p2 = f2.hist_pmf(atom, &space)?;
                counts.exact_cells += space.len() as u64;
                let prod: Vec<f64> = p1.iter().zip(&p2).map(|(a, b)| a * b).collect();
                let z: f64 = prod.iter().sum();
                if z <= 0.0 {
                    return Ok((f64::NEG_INFINITY, f1.clone()));
                }
                Ok((z.ln(), AtomFactor::CountTable {
                    pmf: prod.iter().map(|x| x / z).collect(),
                }))
            }
        }
    }
}

/// Product of two variational potentials over possibly overlapping atoms.
pub fn multiply_potentials(p1: &IidMixture, p2: &IidMixture, cfg: &LveConfig, counts: &mut OpCounts) -> Result<IidMixture> {
    let mut atoms = p1.atoms().to_vec();
    let mut map2 = Vec::with_capacity(p2.atoms().len());
    for a in p2.atoms() {
        match p1.atom_index(&a.name) {
            Some(i) => {
                let b = &p1.atoms()[i];
                if b.population != a.population || b.domain.value_count() != a.domain.value_count() {
                    return Err(Error::Arity(format!(
                        "atom `{}` has population {} in one potential and {} in the other",
                        a.name, b.population, a.population
                    )));
                }
                map2.push(Some(i));
            }
            None => {
                map2.push(None);
                atoms.push(a.clone());
            }
        }
    }
    let mut parts = Vec::with_capacity(p1.k() * p2.k());
    for c1 in p1.components() {
        for c2 in p2.components() {
            counts.component_pairs += 1;
            let mut lw = c1.weight.ln() + c2.weight.ln();
            let mut factors = c1.factors.clone();
            for (j, f2) in c2.factors.iter().enumerate() {
                match map2[j] {
                    Some(i) => {
                        let (lz, f) = factor_product(&p1.atoms()[i], &c1.factors[i], f2, cfg, counts)?;
                        lw += lz;
                        factors[i] = f;
                    }
                    None => factors.push(f2.clone()),
                }
            }
            if lw > f64::NEG_INFINITY {
                parts.push((lw, factors));
            }
        }
    }
    if parts.is_empty() {
        return Err(Error::InconsistentObservations("every component pair has zero overlap".into()));
    }
    IidMixture::from_log_weights(atoms, parts, p1.log_mass() + p2.log_mass())
}

fn shared_atoms(p1: &IidMixture, p2: &IidMixture) -> Vec<String> {
    p1.atoms()
        .iter()
        .filter(|a| p2.atom_index(&a.name).is_some())
        .map(|a| a.name.clone())
        .collect()
}

/// Product of two discrete variational potentials sharing at least one atom.
pub fn multiply_discrete_potentials(p1: &IidMixture, p2: &IidMixture, cfg: &LveConfig) -> Result<IidMixture> {
    if !p1.is_discrete() || !p2.is_discrete() {
        return Err(Error::Domain("discrete product given a continuous atom".into()));
    }
    if shared_atoms(p1, p2).is_empty() {
        return Err(Error::Arity("potentials share no atom".into()));
    }
    multiply_potentials(p1, p2, cfg, &mut OpCounts::default())
}

/// Product of two potentials sharing at least one continuous atom.
pub fn multiply_continuous_potentials(p1: &IidMixture, p2: &IidMixture, cfg: &LveConfig) -> Result<IidMixture> {
    let shared = shared_atoms(p1, p2);
    if shared.is_empty() {
        return Err(Error::Arity("potentials share no atom".into()));
    }
    if shared
        .iter()
        .all(|a| p1.atoms()[p1.atom_index(a).unwrap()].domain.is_discrete())
    {
        return Err(Error::Domain("continuous product given only discrete shared atoms".into()));
    }
    multiply_potentials(p1, p2, cfg, &mut OpCounts::default())
}

fn eliminate_counted(
    potentials: &[IidMixture],
    atom: &str,
    cfg: &LveConfig,
    counts: &mut OpCounts,
) -> Result<IidMixture> {
    let mut it = potentials.iter().filter(|p| p.atom_index(atom).is_some());
    let mut acc = it
        .next()
        .ok_or_else(|| Error::UnknownAtom(atom.to_string()))?
        .clone();
    for p in it {
        acc = multiply_potentials(&acc, p, cfg, counts)?;
        if acc.k() > cfg.k_cap {
            acc = collapse_counted(&acc, cfg.k_cap, cfg, counts);
        }
    }
    let keep: Vec<String> = acc
        .atoms()
        .iter()
        .filter(|a| a.name != atom)
        .map(|a| a.name.clone())
        .collect();
    let keep_ref: Vec<&str> = keep.iter().map(|s| s.as_str()).collect();
    let mut out = acc.restrict(&keep_ref)?;
    if out.k() > cfg.k_cap {
        out = collapse_counted(&out, cfg.k_cap, cfg, counts);
    }
    Ok(out)
}

/// Multiplies every potential mentioning discrete atom `atom` and sums the
/// atom out. Potentials not mentioning it are ignored.
pub fn eliminate_discrete_atom(potentials: &[IidMixture], atom: &str, cfg: &LveConfig) -> Result<IidMixture> {
    check_atom_kind(potentials, atom, true)?;
    eliminate_counted(potentials, atom, cfg, &mut OpCounts::default())
}

/// Continuous counterpart of `eliminate_discrete_atom`.
pub fn eliminate_continuous_atom(potentials: &[IidMixture], atom: &str, cfg: &LveConfig) -> Result<IidMixture> {
    check_atom_kind(potentials, atom, false)?;
    eliminate_counted(potentials, atom, cfg, &mut OpCounts::default())
}

fn check_atom_kind(potentials: &[IidMixture], atom: &str, discrete: bool) -> Result<()> {
    let a = potentials
        .iter()
        .find_map(|p| p.atom_index(atom).map(|i| &p.atoms()[i]))
        .ok_or_else(|| Error::UnknownAtom(atom.to_string()))?;
    if a.domain.is_discrete() != discrete {
        return Err(Error::Domain(format!(
            "atom `{atom}` is {}",
            if discrete { "continuous" } else { "discrete" }
        )));
    }
    Ok(())
}

fn gauss_sym_kl(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
    0.5 * (v1 / v2 + v2 / v1 - 2.0) + 0.5 * (m1 - m2).powi(2) * (1.0 / v1 + 1.0 / v2)
}

fn factor_divergence(atom: &MixtureAtom, f1: &AtomFactor, f2: &AtomFactor) -> f64 {
    if f1 == f2 {
        return 0.0;
    }
    match (f1, f2) {
        (AtomFactor::Categorical { p }, AtomFactor::Categorical { p: q }) => {
            atom.population as f64
                * p.iter()
                    .zip(q)
                    .map(|(a, b)| (a - b) * (a.max(1e-300).ln() - b.max(1e-300).ln()))
                    .sum::<f64>()
        }
        (AtomFactor::Kde(a), AtomFactor::Kde(b)) => {
            atom.population as f64 * gauss_sym_kl(a.mean(), a.variance(), b.mean(), b.variance())
        }
        _ => match (f1.count_moments(atom), f2.count_moments(atom)) {
            (Ok((m1, v1)), Ok((m2, v2))) => (0..m1.len())
                .map(|i| gauss_sym_kl(m1[i], v1[i].max(1e-6), m2[i], v2[i].max(1e-6)))
                .sum(),
            _ => f64::INFINITY,
        },
    }
}

fn merge_factor(atom: &MixtureAtom, f1: &AtomFactor, a: f64, f2: &AtomFactor, b: f64, cfg: &LveConfig) -> Result<AtomFactor> {
    if f1 == f2 {
        return Ok(f1.clone());
    }
    match (f1, f2) {
        (AtomFactor::Kde(k1), AtomFactor::Kde(k2)) => {
            let mut centers = k1.centers().to_vec();
            centers.extend_from_slice(k2.centers());
            let mut w: Vec<f64> = k1.weights().iter().map(|x| x * a).collect();
            w.extend(k2.weights().iter().map(|x| x * b));
            let bw = (a * k1.bandwidth().powi(2) + b * k2.bandwidth().powi(2)).sqrt();
            let (centers, w) = cap_kernels(centers, w, MAX_KERNELS);
            Ok(AtomFactor::Kde(Kde::weighted(centers, w, bw)?))
        }
        _ => {
            if normal_gate(atom, f1, cfg) && normal_gate(atom, f2, cfg) {
                let (m1, v1) = f1.count_moments(atom)?;
                let (m2, v2) = f2.count_moments(atom)?;
                let mean: Vec<f64> = m1.iter().zip(&m2).map(|(x, y)| a * x + b * y).collect();
                let var: Vec<f64> = (0..m1.len())
                    .map(|i| (a * (v1[i] + m1[i] * m1[i]) + b * (v2[i] + m2[i] * m2[i]) - mean[i] * mean[i]).max(1e-9))
                    .collect();
                match cfg.normal_mode {
                    NormalMode::Moment => Ok(AtomFactor::CountNormal { mean, var }),
                    NormalMode::Laplace => power_from_moments(atom, &mean, &var),
                }
            } else {
                let d = atom
                    .values()
                    .ok_or_else(|| Error::Domain(format!("cannot merge factors of `{}`", atom.name)))?;
                let space = HistogramSpace::new(d, atom.population);
                let p1 = f1.hist_pmf(atom, &space)?;
                let p2 = f2.hist_pmf(atom, &space)?;
                Ok(AtomFactor::CountTable {
                    pmf: p1.iter().zip(&p2).map(|(x, y)| a * x + b * y).collect(),
                })
            }
        }
    }
}

/// Greedily merges components until at most `k_target` remain. Pairs with the
/// smallest weighted divergence merge first; merged factors keep each atom's
/// mean (and, where a Normal is used, the variance). Weights and mass are
/// preserved.
pub fn collapse_mixture(m: &IidMixture, k_target: usize) -> IidMixture {
    collapse_counted(m, k_target, &LveConfig::default(), &mut OpCounts::default())
}

pub fn collapse_mixture_with(m: &IidMixture, k_target: usize, cfg: &LveConfig) -> IidMixture {
    collapse_counted(m, k_target, cfg, &mut OpCounts::default())
}

fn pair_cost(m_atoms: &[MixtureAtom], c1: &Component, c2: &Component) -> f64 {
    let w = c1.weight * c2.weight / (c1.weight + c2.weight).max(1e-300);
    let div: f64 = m_atoms
        .iter()
        .enumerate()
        .map(|(i, a)| factor_divergence(a, &c1.factors[i], &c2.factors[i]))
        .sum();
    if div == 0.0 {
        0.0
    } else {
        w * div
    }
}

fn collapse_counted(m: &IidMixture, k_target: usize, cfg: &LveConfig, counts: &mut OpCounts) -> IidMixture {
    let k_target = k_target.max(1);
    if m.k() <= k_target {
        return m.clone();
    }
    let atoms = m.atoms().to_vec();
    if let [a] = atoms.as_slice() {
        if a.population == 1 {
            if let Some(d) = a.values() {
                if let Some(out) = merge_single_rv(m, a, d) {
                    counts.merges += (m.k() - 1) as u64;
                    return out;
                }
            }
        }
    }
    let mut comps: Vec<Component> = m.components().to_vec();

    // Identical components merge first, for free.
    let mut dedup: Vec<Component> = Vec::with_capacity(comps.len());
    for c in comps.drain(..) {
        if let Some(d) = dedup.iter_mut().find(|d| d.factors == c.factors) {
            d.weight += c.weight;
        } else {
            dedup.push(c);
        }
    }
    comps = dedup;

    let merge = |comps: &mut Vec<Component>, i: usize, j: usize, counts: &mut OpCounts| {
        counts.merges += 1;
        let (ci, cj) = (comps[i].clone(), comps[j].clone());
        let w = ci.weight + cj.weight;
        let (a, b) = if w > 0.0 { (ci.weight / w, cj.weight / w) } else { (0.5, 0.5) };
        let factors = atoms
            .iter()
            .enumerate()
            .map(|(t, at)| merge_factor(at, &ci.factors[t], a, &cj.factors[t], b, cfg).unwrap_or_else(|_| ci.factors[t].clone()))
            .collect();
        comps[i] = Component { weight: w, factors };
        comps.remove(j);
    };

    while comps.len() > k_target {
        if comps.len() <= 512 {
            let mut best = (f64::INFINITY, 0, 1);
            for i in 0..comps.len() {
                for j in i + 1..comps.len() {
                    let c = pair_cost(&atoms, &comps[i], &comps[j]);
                    if c < best.0 {
                        best = (c, i, j);
                    }
                }
            }
            merge(&mut comps, best.1, best.2, counts);
        } else {
            // Large mixtures: the lightest component joins its cheapest partner.
            let light = (0..comps.len())
                .min_by(|a, b| comps[*a].weight.total_cmp(&comps[*b].weight))
                .unwrap();
            let partner = (0..comps.len())
                .filter(|&j| j != light)
                .min_by(|a, b| {
                    pair_cost(&atoms, &comps[light], &comps[*a]).total_cmp(&pair_cost(&atoms, &comps[light], &comps[*b]))
                })
                .unwrap();
            let (i, j) = if partner < light { (partner, light) } else { (light, partner) };
            merge(&mut comps, i, j, counts);
        }
    }
    let mut out = IidMixture::from_parts_unchecked(atoms, comps, m.log_mass());
    let s: f64 = out.weights().iter().sum();
    // Absorb rounding so weights sum to one without touching the mass.
    let (_, cs, _) = out.parts_mut();
    for c in cs.iter_mut() {
        c.weight /= s;
    }
    out
}

/// A mixture over one discrete rv is itself a single pmf, so merging is exact.
fn merge_single_rv(m: &IidMixture, atom: &MixtureAtom, d: usize) -> Option<IidMixture> {
    let space = HistogramSpace::new(d, 1);
    let mut pmf = vec![0.0; space.len()];
    for c in m.components() {
        let p = c.factors[0].hist_pmf(atom, &space).ok()?;
        for (acc, x) in pmf.iter_mut().zip(p) {
            *acc += c.weight * x;
        }
    }
    let s: f64 = pmf.iter().sum();
    pmf.iter_mut().for_each(|x| *x /= s);
    let comp = Component {
        weight: 1.0,
        factors: vec![AtomFactor::CountTable { pmf }],
    };
    Some(IidMixture::from_parts_unchecked(vec![atom.clone()], vec![comp], m.log_mass() + s.ln()))
}

/// Replaces potentials bound to continuous latents by one joint mixture in
/// which each latent is discretized on a midpoint grid.
pub fn compile_latents(model: &VariationalModel, grid: usize) -> Result<VariationalModel> {
    if model.latents.is_empty() {
        return Ok(model.clone());
    }
    if model.latents.len() > 2 {
        return Err(Error::StateSpaceCap {
            states: (grid as f64).powi(model.latents.len() as i32),
            cap: (grid as f64).powi(2),
        });
    }
    let grid = grid.max(2);
    let bound: Vec<usize> = model
        .latents
        .iter()
        .map(|l| model.potential_index(l.potential()).unwrap())
        .collect();
    let mut atoms_seen = BTreeSet::new();
    for &p in &bound {
        for a in model.potentials[p].mixture.atoms() {
            if !atoms_seen.insert(a.name.clone()) {
                return Err(Error::InvalidModel(
                    "potentials bound to continuous latents must not share atoms".into(),
                ));
            }
        }
    }
    let axes: Vec<Vec<f64>> = model
        .latents
        .iter()
        .map(|l| {
            let (lo, hi) = l.support;
            (0..grid).map(|i| lo + (i as f64 + 0.5) * (hi - lo) / grid as f64).collect()
        })
        .collect();
    let cell: f64 = model.latents.iter().map(|l| (l.support.1 - l.support.0) / grid as f64).product();
    let joint_atoms: Vec<MixtureAtom> = bound
        .iter()
        .flat_map(|&p| model.potentials[p].mixture.atoms().to_vec())
        .collect();

    let mut parts: Vec<(f64, Vec<AtomFactor>)> = Vec::new();
    let total = grid.pow(model.latents.len() as u32);
    for g in 0..total {
        let mut idx = g;
        let mut theta = Vec::with_capacity(axes.len());
        for ax in axes.iter().rev() {
            theta.push(ax[idx % grid]);
            idx /= grid;
        }
        theta.reverse();
        let mut base = cell.ln();
        for c in &model.couplings {
            let ia = model.latents.iter().position(|l| l.name == c.a).unwrap();
            let ib = model.latents.iter().position(|l| l.name == c.b).unwrap();
            base += c.log_eval(theta[ia], theta[ib]);
        }
        // Enumerate component choices of every bound potential.
        let mut choices: Vec<(f64, Vec<AtomFactor>)> = vec![(base, Vec::new())];
        for (li, &p) in bound.iter().enumerate() {
            let pot = &model.potentials[p];
            let lat = &model.latents[li];
            let mut next = Vec::new();
            for (acc, fs) in &choices {
                for (l, comp) in pot.mixture.components().iter().enumerate() {
                    let (lw, factors) = bound_component(pot, lat, l, comp, theta[li])?;
                    if lw == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut f = fs.clone();
                    f.extend(factors);
                    next.push((acc + lw, f));
                }
            }
            choices = next;
        }
        parts.extend(choices);
    }
    // Merge identical factor tuples exactly.
    let mut merged: Vec<(f64, Vec<AtomFactor>)> = Vec::new();
    for (lw, f) in parts {
        if let Some(m) = merged.iter_mut().find(|m| m.1 == f) {
            m.0 = log_sum_exp(&[m.0, lw]);
        } else {
            merged.push((lw, f));
        }
    }
    // Stored masses include the evidence normalizer at the stored parameters;
    // evidence is recomputed per grid point instead.
    let log_mass: f64 = bound
        .iter()
        .map(|&p| model.potentials[p].mixture.log_mass() - stored_evidence_norm(&model.potentials[p]))
        .sum();
    let joint = IidMixture::from_log_weights(joint_atoms, merged, log_mass)?;
    let mut out = model.clone();
    let name = bound
        .iter()
        .map(|&p| model.potentials[p].name.clone())
        .collect::<Vec<_>>()
        .join("*");
    let mut keep: Vec<VariationalPotential> = model
        .potentials
        .iter()
        .enumerate()
        .filter(|(i, _)| !bound.contains(i))
        .map(|(_, p)| p.clone())
        .collect();
    keep.push(VariationalPotential::new(name, joint));
    out.potentials = keep;
    out.latents.clear();
    out.couplings.clear();
    Ok(out)
}

/// Log normalizer that update_obs folded into a potential's mass.
fn stored_evidence_norm(pot: &VariationalPotential) -> f64 {
    // weights_post = w_prior * exp(ev) / Z, so Z = 1 / sum(w_post * exp(-ev)).
    let terms: Vec<f64> = pot
        .mixture
        .components()
        .iter()
        .zip(&pot.evidence)
        .filter(|(c, _)| c.weight > 0.0)
        .map(|(c, e)| c.weight.ln() - e)
        .collect();
    -log_sum_exp(&terms)
}

/// Weight and factors of component `l` of a latent-bound potential at latent value `theta`.
pub(crate) fn bound_component(
    pot: &VariationalPotential,
    lat: &ContinuousLatent,
    l: usize,
    comp: &Component,
    theta: f64,
) -> Result<(f64, Vec<AtomFactor>)> {
    match &lat.role {
        LatentRole::BernoulliParameter { atom, .. } => {
            let mut factors = comp.factors.clone();
            if let Some(ai) = pot.mixture.atom_index(atom) {
                factors[ai] = AtomFactor::bernoulli(theta);
            }
            let ev = match pot.observed_counts.get(atom) {
                Some(c) => {
                    let p = [1.0 - theta, theta];
                    c.iter()
                        .zip(&p)
                        .map(|(&c, &q)| if c == 0 { 0.0 } else { c as f64 * q.ln() })
                        .sum::<f64>()
                }
                None => 0.0,
            };
            // Evidence on other atoms does not depend on theta.
            let stored = pot.atom_evidence.get(atom).map(|e| e[l]).unwrap_or(0.0);
            Ok((ev + pot.evidence[l] - stored, factors))
        }
        LatentRole::ComponentWeight { .. } => {
            let w = if l == 0 { theta } else { 1.0 - theta };
            Ok((w.ln() + pot.evidence[l], comp.factors.clone()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LveResult {
    /// Normalized-weight mixture over the query atoms; its mass carries the
    /// model's normalizer.
    pub marginal: IidMixture,
    pub order: Vec<String>,
    pub counts: OpCounts,
}

/// Answers a marginal query by conditioning, then repeatedly multiplying the
/// potentials around one non-query atom and summing it out.
pub fn latent_variable_elimination(
    model: &VariationalModel,
    query: &[&str],
    obs: &[Observation],
    cfg: &LveConfig,
) -> Result<LveResult> {
    model.validate()?;
    for q in query {
        if !model.atoms.contains_key(*q) {
            return Err(Error::UnknownAtom(q.to_string()));
        }
    }
    let conditioned = update_obs(model, obs)?;
    for q in query {
        if !conditioned.atoms.contains_key(*q) {
            return Err(Error::Domain(format!("every rv of query atom `{q}` is observed")));
        }
    }
    let compiled = compile_latents(&conditioned, cfg.latent_grid)?;
    let mut pots: Vec<IidMixture> = compiled.potentials.iter().map(|p| p.mixture.clone()).collect();
    let mut counts = OpCounts::default();
    let qset: BTreeSet<&str> = query.iter().copied().collect();
    let mut order = Vec::new();
    loop {
        let mut candidates: BTreeMap<String, usize> = BTreeMap::new();
        for p in &pots {
            for a in p.atoms() {
                if !qset.contains(a.name.as_str()) {
                    *candidates.entry(a.name.clone()).or_default() += 1;
                }
            }
        }
        if candidates.is_empty() {
            break;
        }
        let next = cfg
            .order
            .as_ref()
            .and_then(|o| o.iter().find(|a| candidates.contains_key(*a)).cloned())
            .unwrap_or_else(|| {
                candidates
                    .iter()
                    .min_by(|a, b| a.1.cmp(b.1).then(a.0.cmp(b.0)))
                    .map(|(k, _)| k.clone())
                    .unwrap()
            });
        let (with, without): (Vec<IidMixture>, Vec<IidMixture>) =
            pots.into_iter().partition(|p| p.atom_index(&next).is_some());
        let reduced = eliminate_counted(&with, &next, cfg, &mut counts)?;
        pots = without;
        pots.push(reduced);
        order.push(next);
    }
    // Product of what remains, restricted to the query atoms.
    let mut acc: Option<IidMixture> = None;
    for p in pots {
        acc = Some(match acc {
            None => p,
            Some(a) => {
                let m = multiply_potentials(&a, &p, cfg, &mut counts)?;
                if m.k() > cfg.k_cap {
                    collapse_counted(&m, cfg.k_cap, cfg, &mut counts)
                } else {
                    m
                }
            }
        });
    }
    let acc = acc.ok_or_else(|| Error::InvalidModel("model has no potentials".into()))?;
    let marginal = acc.restrict(query)?;
    Ok(LveResult {
        marginal,
        order,
        counts,
    })
}

/// Per-rv predictive pmf of one unobserved ground rv of a discrete atom.
pub fn rv_predictive_pmf(m: &IidMixture, atom: &str) -> Result<Vec<f64>> {
    let i = m.atom_index(atom).ok_or_else(|| Error::UnknownAtom(atom.to_string()))?;
    let a = &m.atoms()[i];
    let d = a.values().ok_or_else(|| Error::Domain(format!("atom `{atom}` is continuous")))?;
    let mut out = vec![0.0; d];
    for c in m.components() {
        let p = match &c.factors[i] {
            AtomFactor::Categorical { p } => p.clone(),
            f => {
                let (mean, _) = f.count_moments(a)?;
                let n = a.population as f64;
                let mut p: Vec<f64> = std::iter::once(0.0).chain(mean.iter().map(|x| (x / n).clamp(0.0, 1.0))).collect();
                p[0] = (1.0 - p[1..].iter().sum::<f64>()).max(0.0);
                p
            }
        };
        for (o, q) in out.iter_mut().zip(p) {
            *o += c.weight * q;
        }
    }
    let s: f64 = out.iter().sum();
    Ok(out.iter().map(|x| x / s).collect())
}

/// Per-rv predictive P(X(a) <= t) of one unobserved rv of a continuous atom.
pub fn rv_cdf(m: &IidMixture, atom: &str, t: f64) -> Result<f64> {
    let i = m.atom_index(atom).ok_or_else(|| Error::UnknownAtom(atom.to_string()))?;
    let mut acc = 0.0;
    for c in m.components() {
        match &c.factors[i] {
            AtomFactor::Kde(k) => acc += c.weight * kde_cdf(k, t),
            f => {
                return Err(Error::Domain(format!("cdf query on a {} factor", f.kind())));
            }
        }
    }
    Ok(acc)
}

/// Per-rv predictive density of one unobserved rv of a continuous atom.
pub fn rv_density(m: &IidMixture, atom: &str, x: f64) -> Result<f64> {
    let i = m.atom_index(atom).ok_or_else(|| Error::UnknownAtom(atom.to_string()))?;
    let mut acc = 0.0;
    for c in m.components() {
        match &c.factors[i] {
            AtomFactor::Kde(k) => acc += c.weight * k.eval(x),
            f => return Err(Error::Domain(format!("density query on a {} factor", f.kind()))),
        }
    }
    Ok(acc)
}

pub fn kde_cdf(k: &Kde, t: f64) -> f64 {
    let v = k.bandwidth() * k.bandwidth();
    k.centers().iter().zip(k.weights()).map(|(c, w)| w * normal_cdf(t, *c, v)).sum()
}

/// ln C(n, k) re-exported for callers that build exact references.
pub fn log_binomial_coefficient(n: usize, k: usize) -> f64 {
    ln_choose(n, k)
}
