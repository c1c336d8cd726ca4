//! Mixtures of iid components: the variational form shared by discrete and
//! continuous potentials.
//!
//! Each component carries one factor per atom. A factor describes the iid law
//! of every ground rv of that atom (categorical pmf or KDE), or, after lifted
//! products have left the iid family, a law over the atom's histogram directly
//! (a diagonal Normal over counts or an exact pmf table).

use serde::{Deserialize, Serialize};

use crate::continuous::Kde;
use crate::error::{Error, Result};
use crate::math::{digamma, ln_gamma, ln_multinomial, log_sum_exp, normal_log_pdf, normalize_log_weights, trigamma};
use crate::model::{Atom, AtomDomain, Histogram, HistogramSpace, TupleSpace};

const WEIGHT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureAtom {
    pub name: String,
    pub population: usize,
    pub domain: AtomDomain,
}

impl MixtureAtom {
    pub fn from_atom(a: &Atom) -> Self {
        MixtureAtom {
            name: a.name.clone(),
            population: a.population,
            domain: a.domain,
        }
    }

    pub fn to_atom(&self) -> Atom {
        Atom {
            name: self.name.clone(),
            domain: self.domain,
            population: self.population,
        }
    }

    pub fn values(&self) -> Option<usize> {
        self.domain.value_count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AtomFactor {
    /// Per-rv categorical pmf over the atom's values.
    Categorical { p: Vec<f64> },
    /// Diagonal Normal over histogram coordinates 1..d (count of value 0 is
    /// implied by the population).
    CountNormal { mean: Vec<f64>, var: Vec<f64> },
    /// Exact pmf over the atom's histogram space in canonical order.
    CountTable { pmf: Vec<f64> },
    /// Law over histograms proportional to C(h)^power * exp(theta . h); the
    /// family is closed under products of categorical factors. `log_norm` is
    /// the Laplace estimate of the log normalizer.
    PowerCount { power: f64, theta: Vec<f64>, log_norm: f64 },
    /// Per-rv kernel density estimate.
    Kde(Kde),
}

impl AtomFactor {
    pub fn categorical(p: Vec<f64>) -> Self {
        AtomFactor::Categorical { p }
    }

    pub fn bernoulli(p1: f64) -> Self {
        AtomFactor::Categorical {
            p: vec![1.0 - p1, p1],
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AtomFactor::Categorical { .. } => "categorical",
            AtomFactor::CountNormal { .. } => "count-normal",
            AtomFactor::CountTable { .. } => "count-table",
            AtomFactor::PowerCount { .. } => "power-count",
            AtomFactor::Kde(_) => "kde",
        }
    }

    /// True when the factor is a product of identical per-rv laws.
    pub fn is_iid(&self) -> bool {
        matches!(self, AtomFactor::Categorical { .. } | AtomFactor::Kde(_))
    }

    pub fn validate(&self, atom: &MixtureAtom) -> Result<()> {
        match (self, atom.values()) {
            (AtomFactor::Categorical { p }, Some(d)) => {
                if p.len() != d {
                    return Err(Error::Arity(format!(
                        "categorical factor for `{}` has {} entries, domain has {d}",
                        atom.name,
                        p.len()
                    )));
                }
                check_pmf(p, &atom.name)
            }
            (AtomFactor::CountNormal { mean, var }, Some(d)) => {
                if mean.len() != d - 1 || var.len() != d - 1 {
                    return Err(Error::Arity(format!(
                        "count-normal factor for `{}` needs {} coordinates",
                        atom.name,
                        d - 1
                    )));
                }
                if var.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || mean.iter().any(|m| !m.is_finite()) {
                    return Err(Error::Domain(format!(
                        "count-normal factor for `{}` needs finite means and positive variances",
                        atom.name
                    )));
                }
                Ok(())
            }
            (AtomFactor::CountTable { pmf }, Some(d)) => {
                let size = HistogramSpace::size(d, atom.population) as usize;
                if pmf.len() != size {
                    return Err(Error::Arity(format!(
                        "count table for `{}` has {} entries, histogram space has {size}",
                        atom.name,
                        pmf.len()
                    )));
                }
                check_pmf(pmf, &atom.name)
            }
            (AtomFactor::PowerCount { power, theta, log_norm }, Some(d)) => {
                if theta.len() != d {
                    return Err(Error::Arity(format!(
                        "power-count factor for `{}` needs {d} tilts",
                        atom.name
                    )));
                }
                if !(*power > 0.0) || !power.is_finite() || theta.iter().any(|t| !t.is_finite()) || !log_norm.is_finite() {
                    return Err(Error::Domain(format!(
                        "power-count factor for `{}` needs a positive power and finite tilts",
                        atom.name
                    )));
                }
                Ok(())
            }
            (AtomFactor::Kde(k), None) => k.validate(),
            (f, _) => Err(Error::Domain(format!(
                "{} factor does not fit the domain of `{}`",
                f.kind(),
                atom.name
            ))),
        }
    }

    /// Log probability of histogram `h` of `atom`'s population.
    pub fn log_hist_mass(&self, atom: &MixtureAtom, h: &Histogram) -> Result<f64> {
        match self {
            AtomFactor::Categorical { p } => Ok(log_multinomial_pmf(h.counts(), p)),
            AtomFactor::CountNormal { mean, var } => Ok(h.counts()[1..]
                .iter()
                .zip(mean.iter().zip(var))
                .map(|(&c, (m, v))| normal_log_pdf(c as f64, *m, *v))
                .sum()),
            AtomFactor::CountTable { pmf } => {
                let d = atom.values().unwrap();
                let idx = if d == 2 {
                    h.counts()[1]
                } else {
                    HistogramSpace::new(d, atom.population)
                        .index_of(h)
                        .ok_or_else(|| Error::InvalidHistogram(format!("{h:?}")))?
                };
                Ok(pmf[idx].ln())
            }
            AtomFactor::PowerCount { power, theta, log_norm } => Ok(power * ln_multinomial(h.counts())
                + h.counts().iter().zip(theta).map(|(&c, t)| c as f64 * t).sum::<f64>()
                - log_norm),
            AtomFactor::Kde(_) => Err(Error::Domain(format!(
                "atom `{}` is continuous and has no histogram",
                atom.name
            ))),
        }
    }

    /// Normalized pmf of this factor over the whole histogram space.
    pub fn hist_pmf(&self, atom: &MixtureAtom, space: &HistogramSpace) -> Result<Vec<f64>> {
        if let AtomFactor::CountTable { pmf } = self {
            return Ok(pmf.clone());
        }
        let logs = space
            .items()
            .iter()
            .map(|h| self.log_hist_mass(atom, h))
            .collect::<Result<Vec<_>>>()?;
        let (w, lz) = normalize_log_weights(&logs);
        if !lz.is_finite() {
            return Err(Error::ZeroMass);
        }
        Ok(w)
    }

    /// Log density of one ground value (iid factors only).
    pub fn log_rv(&self, x: f64) -> Result<f64> {
        match self {
            AtomFactor::Categorical { p } => {
                let i = x as usize;
                if x < 0.0 || x.fract() != 0.0 || i >= p.len() {
                    return Err(Error::Domain(format!("value {x} outside categorical domain")));
                }
                Ok(p[i].ln())
            }
            AtomFactor::Kde(k) => Ok(k.log_eval(x)),
            f => Err(Error::Domain(format!(
                "{} factor has no per-rv density",
                f.kind()
            ))),
        }
    }

    /// Mean and variance of histogram coordinates 1..d under this factor.
    pub fn count_moments(&self, atom: &MixtureAtom) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = atom.population as f64;
        match self {
            AtomFactor::Categorical { p } => Ok((
                p[1..].iter().map(|q| n * q).collect(),
                p[1..].iter().map(|q| n * q * (1.0 - q)).collect(),
            )),
            AtomFactor::CountNormal { mean, var } => Ok((mean.clone(), var.clone())),
            AtomFactor::PowerCount { power, theta, .. } => {
                let l = power_count_laplace(atom.population, *power, theta)?;
                Ok((l.mode[1..].to_vec(), l.var))
            }
            AtomFactor::CountTable { pmf } => {
                let d = atom.values().unwrap();
                let space = HistogramSpace::new(d, atom.population);
                let mut mean = vec![0.0; d - 1];
                let mut sq = vec![0.0; d - 1];
                for (h, &q) in space.items().iter().zip(pmf) {
                    for v in 1..d {
                        let c = h.counts()[v] as f64;
                        mean[v - 1] += q * c;
                        sq[v - 1] += q * c * c;
                    }
                }
                let var = mean.iter().zip(&sq).map(|(m, s)| (s - m * m).max(0.0)).collect();
                Ok((mean, var))
            }
            AtomFactor::Kde(_) => Err(Error::Domain(format!(
                "atom `{}` is continuous and has no count moments",
                atom.name
            ))),
        }
    }
}

fn check_pmf(p: &[f64], atom: &str) -> Result<()> {
    if p.iter().any(|x| !(*x >= 0.0) || *x > 1.0 + WEIGHT_TOL) {
        return Err(Error::Domain(format!("pmf for `{atom}` has entries outside [0, 1]")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::NotNormalized(s));
    }
    Ok(())
}

/// Laplace summary of a power-count law: continuous mode (all d
/// coordinates), marginal variances of coordinates 1..d and the log of the
/// normalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerLaplace {
    pub mode: Vec<f64>,
    pub var: Vec<f64>,
    pub log_z: f64,
}

/// Laplace approximation of sum_h C(h)^power exp(theta . h) over histograms
/// of `n` rvs; cost depends only on the number of values.
pub fn power_count_laplace(n: usize, power: f64, theta: &[f64]) -> Result<PowerLaplace> {
    let d = theta.len();
    if d < 2 || !(power > 0.0) {
        return Err(Error::Domain("power-count needs d >= 2 and a positive power".into()));
    }
    let nf = n as f64;
    if n == 0 {
        return Ok(PowerLaplace {
            mode: vec![0.0; d],
            var: vec![0.0; d - 1],
            log_z: 0.0,
        });
    }
    let eps = 1e-9;
    let objective = |h: &[f64]| -> f64 {
        let h0 = nf - h.iter().sum::<f64>();
        let mut v = power * (ln_gamma(nf + 1.0) - ln_gamma(h0 + 1.0)) + theta[0] * h0;
        for (i, &x) in h.iter().enumerate() {
            v += -power * ln_gamma(x + 1.0) + theta[i + 1] * x;
        }
        v
    };
    // Start from the Stirling solution, then Newton with the diagonal-plus-
    // rank-one Hessian.
    let tmax = theta.iter().map(|t| t / power).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = theta.iter().map(|t| (t / power - tmax).exp()).collect();
    let es: f64 = e.iter().sum();
    let mut h: Vec<f64> = e[1..]
        .iter()
        .map(|x| ((nf + d as f64 / 2.0) * x / es - 0.5).clamp(eps, nf))
        .collect();
    let fix = |h: &mut Vec<f64>| {
        let s: f64 = h.iter().sum();
        if s > nf - eps {
            let f = (nf - eps) / s;
            h.iter_mut().for_each(|x| *x *= f);
        }
    };
    fix(&mut h);
    for _ in 0..200 {
        let h0 = nf - h.iter().sum::<f64>();
        let g: Vec<f64> = h
            .iter()
            .enumerate()
            .map(|(i, &x)| power * (digamma(h0 + 1.0) - digamma(x + 1.0)) + theta[i + 1] - theta[0])
            .collect();
        let a: Vec<f64> = h.iter().map(|&x| power * trigamma(x + 1.0)).collect();
        let c = power * trigamma(h0 + 1.0);
        let dg: f64 = g.iter().zip(&a).map(|(g, a)| g / a).sum();
        let d1: f64 = a.iter().map(|a| 1.0 / a).sum();
        let delta: Vec<f64> = g
            .iter()
            .zip(&a)
            .map(|(g, a)| g / a - (c * dg / (1.0 + c * d1)) / a)
            .collect();
        let f0 = objective(&h);
        let mut t = 1.0;
        let mut next;
        loop {
            next = h.iter().zip(&delta).map(|(x, dx)| (x + t * dx).max(eps)).collect::<Vec<_>>();
            fix(&mut next);
            if objective(&next) >= f0 - 1e-12 || t < 1e-6 {
                break;
            }
            t *= 0.5;
        }
        let moved = next.iter().zip(&h).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        h = next;
        if moved < 1e-10 {
            break;
        }
    }
    let h0 = nf - h.iter().sum::<f64>();
    let a: Vec<f64> = h.iter().map(|&x| power * trigamma(x + 1.0)).collect();
    let c = power * trigamma(h0 + 1.0);
    let d1: f64 = a.iter().map(|a| 1.0 / a).sum();
    let log_det = a.iter().map(|a| a.ln()).sum::<f64>() + (1.0 + c * d1).ln();
    let var = a
        .iter()
        .map(|a| 1.0 / a - c / (a * a * (1.0 + c * d1)))
        .collect();
    let log_z = objective(&h) + 0.5 * (d - 1) as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det;
    let mut mode = vec![h0];
    mode.extend(h);
    Ok(PowerLaplace { mode, var, log_z })
}

impl AtomFactor {
    /// A power-count factor with its Laplace normalizer.
    pub fn power_count(n: usize, power: f64, theta: Vec<f64>) -> Result<Self> {
        let l = power_count_laplace(n, power, &theta)?;
        Ok(AtomFactor::PowerCount {
            power,
            theta,
            log_norm: l.log_z,
        })
    }
}

/// ln f_M(h; n, p) with 0 ln 0 = 0.
pub fn log_multinomial_pmf(h: &[usize], p: &[f64]) -> f64 {
    let mut acc = ln_multinomial(h);
    for (&c, &q) in h.iter().zip(p) {
        if c > 0 {
            if q <= 0.0 {
                return f64::NEG_INFINITY;
            }
            acc += c as f64 * q.ln();
        }
    }
    acc
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub factors: Vec<AtomFactor>,
}

/// A weighted mixture of products of per-atom factors, scaled by `exp(log_mass)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IidMixture {
    atoms: Vec<MixtureAtom>,
    components: Vec<Component>,
    log_mass: f64,
}

/// Mixture of binomials/multinomials.
pub type MixtureOfIidDiscrete = IidMixture;
/// Mixture of products of kernel density estimators (categorical factors for
/// discrete atoms in the hybrid case).
pub type KdeMixture = IidMixture;

impl IidMixture {
    pub fn new(atoms: Vec<MixtureAtom>, components: Vec<Component>) -> Result<Self> {
        let m = IidMixture {
            atoms,
            components,
            log_mass: 0.0,
        };
        m.validate()?;
        Ok(m)
    }

    /// Builds a mixture from unnormalized log weights; the normalizer moves
    /// into the mass.
    pub fn from_log_weights(
        atoms: Vec<MixtureAtom>,
        parts: Vec<(f64, Vec<AtomFactor>)>,
        log_mass: f64,
    ) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::EmptyTable);
        }
        let logs: Vec<f64> = parts.iter().map(|(l, _)| *l).collect();
        let (w, lz) = normalize_log_weights(&logs);
        if !lz.is_finite() {
            return Err(Error::Underflow("all component weights vanished".into()));
        }
        let components = parts
            .into_iter()
            .zip(w)
            .filter(|(_, w)| *w > 0.0)
            .map(|((_, factors), weight)| Component { weight, factors })
            .collect();
        let mut m = IidMixture {
            atoms,
            components,
            log_mass: log_mass + lz,
        };
        m.renormalize();
        m.validate()?;
        Ok(m)
    }

    /// Single-component mixture.
    pub fn single(atoms: Vec<MixtureAtom>, factors: Vec<AtomFactor>) -> Result<Self> {
        Self::new(atoms, vec![Component { weight: 1.0, factors }])
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Domain("mixture needs at least one component".into()));
        }
        let mut s = 0.0;
        for c in &self.components {
            if !(c.weight >= 0.0) {
                return Err(Error::Domain(format!("negative component weight {}", c.weight)));
            }
            s += c.weight;
            if c.factors.len() != self.atoms.len() {
                return Err(Error::Arity(format!(
                    "component has {} factors for {} atoms",
                    c.factors.len(),
                    self.atoms.len()
                )));
            }
            for (f, a) in c.factors.iter().zip(&self.atoms) {
                f.validate(a)?;
            }
        }
        if (s - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::NotNormalized(s));
        }
        if self.log_mass.is_nan() || self.log_mass == f64::INFINITY {
            return Err(Error::Domain(format!("invalid mass {}", self.log_mass)));
        }
        for (i, a) in self.atoms.iter().enumerate() {
            if self.atoms[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::Arity(format!("atom `{}` repeated in mixture", a.name)));
            }
        }
        Ok(())
    }

    pub fn atoms(&self) -> &[MixtureAtom] {
        &self.atoms
    }

    pub fn atom_index(&self, name: &str) -> Option<usize> {
        self.atoms.iter().position(|a| a.name == name)
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn log_mass(&self) -> f64 {
        self.log_mass
    }

    pub fn set_log_mass(&mut self, log_mass: f64) {
        self.log_mass = log_mass;
    }

    pub fn is_discrete(&self) -> bool {
        self.atoms.iter().all(|a| a.domain.is_discrete())
    }

    /// Rescales weights to sum to one, moving the factor into the mass.
    pub fn renormalize(&mut self) {
        let s: f64 = self.components.iter().map(|c| c.weight).sum();
        if s > 0.0 && s.is_finite() {
            for c in &mut self.components {
                c.weight /= s;
            }
            self.log_mass += s.ln();
        }
    }

    /// Drops components whose weight is below `min_weight` and renormalizes.
    pub fn prune(&mut self, min_weight: f64) {
        if self.components.iter().any(|c| c.weight >= min_weight) {
            self.components.retain(|c| c.weight >= min_weight);
        }
        self.renormalize();
    }

    /// Mixture mass of a tuple of histograms (one per atom, all atoms discrete),
    /// including the scale.
    pub fn log_mass_at_histograms(&self, hs: &[Histogram]) -> Result<f64> {
        if hs.len() != self.atoms.len() {
            return Err(Error::Arity(format!(
                "mixture over {} atoms given {} histograms",
                self.atoms.len(),
                hs.len()
            )));
        }
        for (h, a) in hs.iter().zip(&self.atoms) {
            h.check(&a.to_atom())?;
        }
        let terms = self
            .components
            .iter()
            .map(|c| {
                let mut acc = c.weight.ln();
                for ((f, a), h) in c.factors.iter().zip(&self.atoms).zip(hs) {
                    acc += f.log_hist_mass(a, h)?;
                }
                Ok(acc)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.log_mass + log_sum_exp(&terms))
    }

    /// Per-valuation density: one value vector per atom.
    pub fn log_density_at_valuation(&self, vals: &[Vec<f64>]) -> Result<f64> {
        if vals.len() != self.atoms.len() {
            return Err(Error::Arity(format!(
                "mixture over {} atoms given {} value vectors",
                self.atoms.len(),
                vals.len()
            )));
        }
        let mut hists: Vec<Option<Histogram>> = Vec::with_capacity(vals.len());
        for (v, a) in vals.iter().zip(&self.atoms) {
            if v.len() != a.population {
                return Err(Error::Arity(format!(
                    "atom `{}` has population {} but {} values were given",
                    a.name,
                    a.population,
                    v.len()
                )));
            }
            if let Some(x) = v.iter().find(|x| !a.domain.contains(**x)) {
                return Err(Error::Domain(format!("value {x} outside the domain of `{}`", a.name)));
            }
            hists.push(match a.values() {
                Some(d) => {
                    let mut counts = vec![0usize; d];
                    for &x in v {
                        counts[x as usize] += 1;
                    }
                    Some(Histogram::new(counts))
                }
                None => None,
            });
        }
        let terms = self
            .components
            .iter()
            .map(|c| {
                let mut acc = c.weight.ln();
                for (i, f) in c.factors.iter().enumerate() {
                    acc += if f.is_iid() {
                        vals[i].iter().map(|&x| f.log_rv(x)).sum::<Result<f64>>()?
                    } else {
                        let h = hists[i].as_ref().unwrap();
                        f.log_hist_mass(&self.atoms[i], h)? - ln_multinomial(h.counts())
                    };
                }
                Ok(acc)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.log_mass + log_sum_exp(&terms))
    }

    /// Normalized predictive distribution of one discrete atom's histogram.
    pub fn marginal_pmf(&self, atom: &str) -> Result<Vec<f64>> {
        let i = self
            .atom_index(atom)
            .ok_or_else(|| Error::UnknownAtom(atom.to_string()))?;
        let a = &self.atoms[i];
        let d = a
            .values()
            .ok_or_else(|| Error::Domain(format!("atom `{atom}` is continuous")))?;
        let space = HistogramSpace::new(d, a.population);
        let mut out = vec![0.0; space.len()];
        for c in &self.components {
            let pmf = c.factors[i].hist_pmf(a, &space)?;
            for (o, q) in out.iter_mut().zip(pmf) {
                *o += c.weight * q;
            }
        }
        Ok(out)
    }

    /// Normalized predictive distribution over the tuple space of all atoms.
    pub fn joint_pmf(&self) -> Result<(TupleSpace, Vec<f64>)> {
        let atoms: Vec<Atom> = self.atoms.iter().map(|a| a.to_atom()).collect();
        let space = TupleSpace::for_atoms(&atoms)?;
        let mut out = vec![0.0; space.len()];
        for c in &self.components {
            let pmfs = c
                .factors
                .iter()
                .zip(&self.atoms)
                .zip(space.spaces())
                .map(|((f, a), s)| f.hist_pmf(a, s))
                .collect::<Result<Vec<_>>>()?;
            for (i, o) in out.iter_mut().enumerate() {
                let idx = space.unflatten(i);
                let mut p = c.weight;
                for (pm, j) in pmfs.iter().zip(&idx) {
                    p *= pm[*j];
                }
                *o += p;
            }
        }
        let s: f64 = out.iter().sum();
        if s > 0.0 {
            for o in &mut out {
                *o /= s;
            }
        }
        Ok((space, out))
    }

    /// Mixture restricted to a subset of atoms (marginalizes the others, which
    /// is exact because every factor is normalized).
    pub fn restrict(&self, keep: &[&str]) -> Result<IidMixture> {
        let idx = keep
            .iter()
            .map(|n| self.atom_index(n).ok_or_else(|| Error::UnknownAtom(n.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let atoms = idx.iter().map(|&i| self.atoms[i].clone()).collect();
        let components = self
            .components
            .iter()
            .map(|c| Component {
                weight: c.weight,
                factors: idx.iter().map(|&i| c.factors[i].clone()).collect(),
            })
            .collect();
        Ok(IidMixture {
            atoms,
            components,
            log_mass: self.log_mass,
        })
    }

    /// Replaces atom `name` by its population-many singleton atoms, each taking
    /// the same per-rv factor; singletons are appended after the other atoms.
    pub fn split_into_singletons(&self, name: &str, rename: impl Fn(usize) -> String) -> Result<IidMixture> {
        let i = self
            .atom_index(name)
            .ok_or_else(|| Error::UnknownAtom(name.to_string()))?;
        let a = &self.atoms[i];
        let mut atoms: Vec<MixtureAtom> = self.atoms.iter().filter(|b| b.name != name).cloned().collect();
        for j in 0..a.population {
            atoms.push(MixtureAtom {
                name: rename(j),
                population: 1,
                domain: a.domain,
            });
        }
        let mut components = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let f = &c.factors[i];
            if !f.is_iid() {
                return Err(Error::Domain(format!(
                    "cannot split a {} factor of `{name}` into singletons",
                    f.kind()
                )));
            }
            let mut factors: Vec<AtomFactor> = c
                .factors
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, f)| f.clone())
                .collect();
            factors.extend(std::iter::repeat_n(f.clone(), a.population));
            components.push(Component {
                weight: c.weight,
                factors,
            });
        }
        IidMixture {
            atoms,
            components,
            log_mass: self.log_mass,
        }
        .checked()
    }

    fn checked(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Vec<MixtureAtom>, &mut Vec<Component>, &mut f64) {
        (&mut self.atoms, &mut self.components, &mut self.log_mass)
    }

    pub(crate) fn from_parts_unchecked(atoms: Vec<MixtureAtom>, components: Vec<Component>, log_mass: f64) -> Self {
        IidMixture {
            atoms,
            components,
            log_mass,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_count_laplace_close_to_exact() {
        let n = 40;
        for (power, theta) in [(1.0, vec![0.3f64.ln(), 0.7f64.ln()]), (2.0, vec![-0.4, 0.9]), (3.0, vec![0.0, 0.2, -0.5])] {
            let l = power_count_laplace(n, power, &theta).unwrap();
            let space = HistogramSpace::new(theta.len(), n);
            let logs: Vec<f64> = space
                .items()
                .iter()
                .map(|h| power * ln_multinomial(h.counts()) + h.counts().iter().zip(&theta).map(|(&c, t)| c as f64 * t).sum::<f64>())
                .collect();
            let exact = log_sum_exp(&logs);
            assert!((l.log_z - exact).abs() < 0.02, "power {power}: {} vs {exact}", l.log_z);
        }
        // Power one with log-probabilities is a multinomial: normalizer one.
        let l = power_count_laplace(100, 1.0, &[0.4f64.ln(), 0.6f64.ln()]).unwrap();
        assert!(l.log_z.abs() < 0.01);
        assert!((l.mode[1] - 60.0).abs() < 0.6);
    }


    fn bin_atom(name: &str, n: usize) -> MixtureAtom {
        MixtureAtom {
            name: name.into(),
            population: n,
            domain: AtomDomain::Binary,
        }
    }

    #[test]
    fn single_binomial_mass() {
        let m = IidMixture::single(vec![bin_atom("X", 2)], vec![AtomFactor::bernoulli(0.5)]).unwrap();
        let v = m.log_mass_at_histograms(&[Histogram::new(vec![1, 1])]).unwrap().exp();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn valuation_density_divides_coefficient() {
        let m = IidMixture::single(vec![bin_atom("X", 3)], vec![AtomFactor::bernoulli(0.2)]).unwrap();
        let v = m.log_density_at_valuation(&[vec![1.0, 0.0, 0.0]]).unwrap().exp();
        assert!((v - 0.2 * 0.8 * 0.8).abs() < 1e-12);
    }

    #[test]
    fn rejects_unnormalized_weights() {
        let err = IidMixture::new(
            vec![bin_atom("X", 2)],
            vec![Component {
                weight: 0.7,
                factors: vec![AtomFactor::bernoulli(0.5)],
            }],
        );
        assert!(matches!(err, Err(Error::NotNormalized(_))));
    }

    #[test]
    fn log_weights_move_into_mass() {
        let m = IidMixture::from_log_weights(
            vec![bin_atom("X", 2)],
            vec![(0.0, vec![AtomFactor::bernoulli(0.1)]), (0.0, vec![AtomFactor::bernoulli(0.9)])],
            0.0,
        )
        .unwrap();
        assert!((m.log_mass() - 2f64.ln()).abs() < 1e-12);
        assert_eq!(m.weights(), vec![0.5, 0.5]);
    }

    #[test]
    fn marginal_pmf_sums_to_one() {
        let m = IidMixture::from_log_weights(
            vec![bin_atom("X", 6), bin_atom("Y", 4)],
            vec![
                (0.3f64.ln(), vec![AtomFactor::bernoulli(0.1), AtomFactor::bernoulli(0.6)]),
                (0.7f64.ln(), vec![AtomFactor::bernoulli(0.8), AtomFactor::bernoulli(0.3)]),
            ],
            0.0,
        )
        .unwrap();
        let p = m.marginal_pmf("X").unwrap();
        assert_eq!(p.len(), 7);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (_, j) = m.joint_pmf().unwrap();
        assert_eq!(j.len(), 35);
        assert!((j.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
