//! The relational hybrid model: atoms, parfactors, value-histograms,
//! valuations and grounding.
//!
//! Discrete populations are represented canonically by their value-histogram
//! (per-value occupancy counts). Ground valuations only appear when a model is
//! built, when it is checked against an enumeration oracle, and when an atom is
//! shattered into singletons.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{ln_multinomial, normal_log_pdf};
use crate::mixture::IidMixture;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtomDomain {
    Binary,
    Categorical(usize),
    Continuous { support: Option<(f64, f64)> },
}

impl AtomDomain {
    pub fn continuous() -> Self {
        AtomDomain::Continuous { support: None }
    }

    pub fn bounded(lo: f64, hi: f64) -> Self {
        AtomDomain::Continuous {
            support: Some((lo, hi)),
        }
    }

    /// Number of values for discrete domains.
    pub fn value_count(&self) -> Option<usize> {
        match self {
            AtomDomain::Binary => Some(2),
            AtomDomain::Categorical(d) => Some(*d),
            AtomDomain::Continuous { .. } => None,
        }
    }

    pub fn is_discrete(&self) -> bool {
        self.value_count().is_some()
    }

    pub fn support(&self) -> Option<(f64, f64)> {
        match self {
            AtomDomain::Continuous { support } => *support,
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AtomDomain::Categorical(d) if *d < 2 => Err(Error::Domain(format!(
                "categorical domain needs at least 2 values, got {d}"
            ))),
            AtomDomain::Continuous {
                support: Some((lo, hi)),
            } if !(lo < hi) => Err(Error::Domain(format!(
                "support lower bound {lo} must be below upper bound {hi}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        match self {
            AtomDomain::Continuous { support } => match support {
                Some((lo, hi)) => v.is_finite() && v >= *lo && v <= *hi,
                None => v.is_finite(),
            },
            _ => {
                let d = self.value_count().unwrap();
                v >= 0.0 && v.fract() == 0.0 && (v as usize) < d
            }
        }
    }
}

/// A parametrized random variable standing for `population` exchangeable
/// ground rvs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub name: String,
    pub domain: AtomDomain,
    pub population: usize,
}

impl Atom {
    pub fn new(name: impl Into<String>, domain: AtomDomain, population: usize) -> Result<Self> {
        let atom = Atom {
            name: name.into(),
            domain,
            population,
        };
        atom.validate()?;
        Ok(atom)
    }

    pub fn binary(name: impl Into<String>, population: usize) -> Self {
        Self::new(name, AtomDomain::Binary, population).expect("valid binary atom")
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        if self.population == 0 {
            return Err(Error::Domain(format!(
                "atom `{}` must have population >= 1",
                self.name
            )));
        }
        if self.name.is_empty() {
            return Err(Error::Domain("atom name must not be empty".into()));
        }
        Ok(())
    }

    pub fn is_discrete(&self) -> bool {
        self.domain.is_discrete()
    }

    /// Value count of a discrete atom, or a domain error for continuous atoms.
    pub fn values(&self) -> Result<usize> {
        self.domain.value_count().ok_or_else(|| {
            Error::Domain(format!("atom `{}` is continuous", self.name))
        })
    }
}

/// Per-value occupancy counts of one population.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Histogram {
    counts: Vec<usize>,
}

impl Histogram {
    pub fn new(counts: Vec<usize>) -> Self {
        Histogram { counts }
    }

    /// Builds a histogram and checks it against `atom`.
    pub fn for_atom(atom: &Atom, counts: Vec<usize>) -> Result<Self> {
        let h = Histogram { counts };
        h.check(atom)?;
        Ok(h)
    }

    pub fn check(&self, atom: &Atom) -> Result<()> {
        let d = atom.values()?;
        if self.counts.len() != d {
            return Err(Error::InvalidHistogram(format!(
                "atom `{}` has {d} values but histogram has {} counts",
                atom.name,
                self.counts.len()
            )));
        }
        if self.population() != atom.population {
            return Err(Error::InvalidHistogram(format!(
                "counts sum to {} but atom `{}` has population {}",
                self.population(),
                atom.name,
                atom.population
            )));
        }
        Ok(())
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn population(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn values(&self) -> usize {
        self.counts.len()
    }

    /// A canonical (sorted) ground valuation with this histogram.
    pub fn representative(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.population());
        for (v, &c) in self.counts.iter().enumerate() {
            out.extend(std::iter::repeat_n(v as f64, c));
        }
        out
    }
}

/// All histograms of `n` rvs over `d` values, in canonical order. For binary
/// atoms the index of a histogram is its count of ones.
#[derive(Debug, Clone)]
pub struct HistogramSpace {
    d: usize,
    n: usize,
    items: Vec<Histogram>,
    index: HashMap<Histogram, usize>,
}

impl HistogramSpace {
    pub fn new(d: usize, n: usize) -> Self {
        let mut items = Vec::new();
        let mut counts = vec![0usize; d];
        fill(&mut items, &mut counts, d - 1, n);
        let index = items
            .iter()
            .enumerate()
            .map(|(i, h)| (h.clone(), i))
            .collect();
        HistogramSpace { d, n, items, index }
    }

    pub fn for_atom(atom: &Atom) -> Result<Self> {
        Ok(Self::new(atom.values()?, atom.population))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn values(&self) -> usize {
        self.d
    }

    pub fn population(&self) -> usize {
        self.n
    }

    pub fn items(&self) -> &[Histogram] {
        &self.items
    }

    pub fn index_of(&self, h: &Histogram) -> Option<usize> {
        if self.d == 2 {
            return (h.counts.len() == 2 && h.population() == self.n).then_some(h.counts[1]);
        }
        self.index.get(h).copied()
    }

    /// Number of histograms, C(n + d - 1, d - 1), without building the space.
    pub fn size(d: usize, n: usize) -> f64 {
        crate::math::ln_choose(n + d - 1, d - 1).exp().round()
    }
}

fn fill(out: &mut Vec<Histogram>, counts: &mut Vec<usize>, pos: usize, remaining: usize) {
    if pos == 0 {
        counts[0] = remaining;
        out.push(Histogram::new(counts.clone()));
        return;
    }
    for c in 0..=remaining {
        counts[pos] = c;
        fill(out, counts, pos - 1, remaining - c);
    }
    counts[pos] = 0;
}

/// Cartesian product of per-atom histogram spaces; the last atom varies fastest.
#[derive(Debug, Clone)]
pub struct TupleSpace {
    spaces: Vec<HistogramSpace>,
    strides: Vec<usize>,
    len: usize,
}

impl TupleSpace {
    pub fn new(spaces: Vec<HistogramSpace>) -> Self {
        let mut strides = vec![1usize; spaces.len()];
        for i in (0..spaces.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * spaces[i + 1].len();
        }
        let len = spaces.iter().map(|s| s.len()).product();
        TupleSpace {
            spaces,
            strides,
            len,
        }
    }

    pub fn for_atoms(atoms: &[Atom]) -> Result<Self> {
        let spaces = atoms
            .iter()
            .map(HistogramSpace::for_atom)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(spaces))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn spaces(&self) -> &[HistogramSpace] {
        &self.spaces
    }

    /// Per-atom histogram indices of flat index `i`.
    pub fn unflatten(&self, mut i: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.spaces.len());
        for s in &self.strides {
            out.push(i / s);
            i %= s;
        }
        out
    }

    pub fn flatten(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn tuple(&self, i: usize) -> Vec<Histogram> {
        self.unflatten(i)
            .into_iter()
            .zip(&self.spaces)
            .map(|(j, s)| s.items[j].clone())
            .collect()
    }

    pub fn index_of(&self, key: &[Histogram]) -> Option<usize> {
        if key.len() != self.spaces.len() {
            return None;
        }
        let mut idx = Vec::with_capacity(key.len());
        for (h, s) in key.iter().zip(&self.spaces) {
            idx.push(s.index_of(h)?);
        }
        Some(self.flatten(&idx))
    }
}

/// A potential over the histograms of a tuple of discrete atoms. Values are
/// per-valuation potentials: every ground valuation whose histograms equal the
/// key takes that value. Values are stored in log space; keys that are absent
/// read as zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistTable {
    atoms: Vec<Atom>,
    #[serde(with = "entry_list")]
    entries: BTreeMap<Vec<Histogram>, f64>,
}

mod entry_list {
    use super::Histogram;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    #[derive(Serialize, Deserialize)]
    struct Entry {
        key: Vec<Histogram>,
        log_value: f64,
    }

    pub fn serialize<S: Serializer>(
        m: &BTreeMap<Vec<Histogram>, f64>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let v: Vec<Entry> = m
            .iter()
            .map(|(k, v)| Entry {
                key: k.clone(),
                log_value: *v,
            })
            .collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<Vec<Histogram>, f64>, D::Error> {
        let v = Vec::<Entry>::deserialize(d)?;
        Ok(v.into_iter().map(|e| (e.key, e.log_value)).collect())
    }
}

impl HistTable {
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        for a in &atoms {
            a.validate()?;
            if !a.is_discrete() {
                return Err(Error::Domain(format!(
                    "histogram tables need discrete atoms; `{}` is continuous",
                    a.name
                )));
            }
        }
        Ok(HistTable {
            atoms,
            entries: BTreeMap::new(),
        })
    }

    /// Table whose value at every reachable key is `f(key)`.
    pub fn from_fn(atoms: Vec<Atom>, f: impl Fn(&[Histogram]) -> f64) -> Result<Self> {
        Self::from_log_fn(atoms, |k| f(k).ln())
    }

    pub fn from_log_fn(atoms: Vec<Atom>, f: impl Fn(&[Histogram]) -> f64) -> Result<Self> {
        let mut t = Self::new(atoms)?;
        let space = TupleSpace::for_atoms(&t.atoms)?;
        for i in 0..space.len() {
            let key = space.tuple(i);
            let lv = f(&key);
            if lv.is_nan() || lv == f64::INFINITY {
                return Err(Error::Domain(format!("invalid potential value at {key:?}")));
            }
            if lv > f64::NEG_INFINITY {
                t.entries.insert(key, lv);
            }
        }
        Ok(t)
    }

    /// Table from a mass over histogram tuples (probability of the whole
    /// histogram class); divides by the multinomial coefficients to obtain
    /// per-valuation values.
    pub fn from_histogram_mass(atoms: Vec<Atom>, f: impl Fn(&[Histogram]) -> f64) -> Result<Self> {
        Self::from_log_fn(atoms, |k| {
            f(k).ln() - k.iter().map(|h| ln_multinomial(h.counts())).sum::<f64>()
        })
    }

    pub fn insert(&mut self, key: Vec<Histogram>, value: f64) -> Result<()> {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(Error::Domain(format!("table value {value} must be finite and >= 0")));
        }
        self.insert_log(key, value.ln())
    }

    pub fn insert_log(&mut self, key: Vec<Histogram>, log_value: f64) -> Result<()> {
        self.check_key(&key)?;
        if log_value > f64::NEG_INFINITY {
            self.entries.insert(key, log_value);
        } else {
            self.entries.remove(&key);
        }
        Ok(())
    }

    pub fn check_key(&self, key: &[Histogram]) -> Result<()> {
        if key.len() != self.atoms.len() {
            return Err(Error::Arity(format!(
                "table over {} atoms queried with {} histograms",
                self.atoms.len(),
                key.len()
            )));
        }
        for (h, a) in key.iter().zip(&self.atoms) {
            h.check(a)?;
        }
        Ok(())
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn value(&self, key: &[Histogram]) -> f64 {
        self.log_value(key).exp()
    }

    pub fn log_value(&self, key: &[Histogram]) -> f64 {
        self.entries.get(key).copied().unwrap_or(f64::NEG_INFINITY)
    }

    /// Nonzero entries as (key, log value).
    pub fn entries(&self) -> impl Iterator<Item = (&Vec<Histogram>, f64)> {
        self.entries.iter().map(|(k, v)| (k, *v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Dense log-values over the tuple space (absent keys are -inf).
    pub fn dense_log(&self) -> Result<(TupleSpace, Vec<f64>)> {
        let space = TupleSpace::for_atoms(&self.atoms)?;
        let mut out = vec![f64::NEG_INFINITY; space.len()];
        for (k, v) in &self.entries {
            let i = space
                .index_of(k)
                .ok_or_else(|| Error::InvalidHistogram(format!("unreachable key {k:?}")))?;
            out[i] = *v;
        }
        Ok((space, out))
    }

    pub fn with_atoms(&self, atoms: Vec<Atom>) -> Result<Self> {
        let mut t = HistTable::new(atoms)?;
        for (k, v) in &self.entries {
            t.insert_log(k.clone(), *v)?;
        }
        Ok(t)
    }
}

/// Closed-form potentials of a single ground factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum ParametricDensity {
    /// f_N(x - y; mean, var) over a pair of ground rvs.
    LinearGaussian { mean: f64, var: f64 },
    /// f_N(x; mean, var) over one ground rv.
    Gaussian { mean: f64, var: f64 },
    /// A table over the value tuple of discrete ground rvs, row-major with the
    /// last argument varying fastest.
    GroundTable { values: Vec<f64> },
}

impl ParametricDensity {
    pub fn name(&self) -> &'static str {
        match self {
            ParametricDensity::LinearGaussian { .. } => "linear-gaussian",
            ParametricDensity::Gaussian { .. } => "gaussian",
            ParametricDensity::GroundTable { .. } => "ground-table",
        }
    }

    pub fn arity(&self) -> Option<usize> {
        match self {
            ParametricDensity::LinearGaussian { .. } => Some(2),
            ParametricDensity::Gaussian { .. } => Some(1),
            ParametricDensity::GroundTable { .. } => None,
        }
    }

    pub fn validate(&self, atoms: &[&Atom]) -> Result<()> {
        match self {
            ParametricDensity::LinearGaussian { var, .. } | ParametricDensity::Gaussian { var, .. } => {
                if !(*var > 0.0) {
                    return Err(Error::Domain(format!("variance {var} must be positive")));
                }
                let arity = self.arity().unwrap();
                if atoms.len() != arity {
                    return Err(Error::Arity(format!(
                        "{} takes {arity} atoms, got {}",
                        self.name(),
                        atoms.len()
                    )));
                }
                if let Some(a) = atoms.iter().find(|a| a.is_discrete()) {
                    return Err(Error::Domain(format!(
                        "{} needs continuous atoms; `{}` is discrete",
                        self.name(),
                        a.name
                    )));
                }
            }
            ParametricDensity::GroundTable { values } => {
                let mut size = 1usize;
                for a in atoms {
                    size *= a.values()?;
                }
                if values.len() != size {
                    return Err(Error::Arity(format!(
                        "ground table has {} entries, expected {size}",
                        values.len()
                    )));
                }
                if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                    return Err(Error::Domain("ground table values must be finite and >= 0".into()));
                }
                if values.iter().all(|v| *v == 0.0) {
                    return Err(Error::Domain("ground table is identically zero".into()));
                }
            }
        }
        Ok(())
    }

    /// Log potential of one ground factor at the values of its rvs.
    pub fn log_eval(&self, x: &[f64]) -> Result<f64> {
        match self {
            ParametricDensity::LinearGaussian { mean, var } => {
                if x.len() != 2 {
                    return Err(Error::Arity(format!("linear-gaussian takes 2 values, got {}", x.len())));
                }
                Ok(normal_log_pdf(x[0] - x[1], *mean, *var))
            }
            ParametricDensity::Gaussian { mean, var } => {
                if x.len() != 1 {
                    return Err(Error::Arity(format!("gaussian takes 1 value, got {}", x.len())));
                }
                Ok(normal_log_pdf(x[0], *mean, *var))
            }
            ParametricDensity::GroundTable { values } => {
                // Row-major index; the caller has validated the table shape, so
                // the radix of each position is recovered from the table size.
                let idx = ground_table_index(values.len(), x)?;
                Ok(values[idx].ln())
            }
        }
    }
}

fn ground_table_index(len: usize, x: &[f64]) -> Result<usize> {
    // All positions of a ground table share the domain sizes supplied at
    // validation; for evaluation we only need the per-position radices, which
    // are stored alongside the parfactor. Here we support the common case of
    // equal radices.
    if x.is_empty() {
        return Ok(0);
    }
    let d = (len as f64).powf(1.0 / x.len() as f64).round() as usize;
    if d.pow(x.len() as u32) != len {
        return Err(Error::Arity(format!(
            "ground table of size {len} cannot be indexed by {} values of equal radix",
            x.len()
        )));
    }
    let mut idx = 0usize;
    for &v in x {
        if v < 0.0 || v.fract() != 0.0 || v as usize >= d {
            return Err(Error::Domain(format!("value {v} outside ground table radix {d}")));
        }
        idx = idx * d + v as usize;
    }
    Ok(idx)
}

/// A potential: either a population-level function (histogram table or
/// variational mixture) or a closed-form density of each ground factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Potential {
    HistTable(HistTable),
    Parametric(ParametricDensity),
    Variational(IidMixture),
}

impl Potential {
    /// Population-level potentials are evaluated once on the whole population
    /// rather than once per ground factor.
    pub fn is_population_level(&self) -> bool {
        !matches!(self, Potential::Parametric(_))
    }

    pub fn is_variational(&self) -> bool {
        matches!(self, Potential::Variational(_))
    }
}

/// Argument of `eval_potential`.
#[derive(Debug, Clone, Copy)]
pub enum PotentialArg<'a> {
    /// One histogram per atom of the potential.
    Histograms(&'a [Histogram]),
    /// One vector of ground values per atom of the potential (a single value per
    /// atom for a ground factor of a parametric density).
    Ground(&'a [Vec<f64>]),
}

/// Evaluates a potential. Histogram tables read the per-valuation value;
/// variational mixtures evaluated on histograms return the mass of the whole
/// histogram class, sum_l w_l prod_A f(h_A; n_A, p_lA).
pub fn eval_potential(p: &Potential, arg: PotentialArg<'_>) -> Result<f64> {
    Ok(log_eval_potential(p, arg)?.exp())
}

pub fn log_eval_potential(p: &Potential, arg: PotentialArg<'_>) -> Result<f64> {
    match (p, arg) {
        (Potential::HistTable(t), PotentialArg::Histograms(hs)) => {
            t.check_key(hs)?;
            Ok(t.log_value(hs))
        }
        (Potential::HistTable(t), PotentialArg::Ground(vals)) => {
            if vals.len() != t.atoms.len() {
                return Err(Error::Arity(format!(
                    "table over {} atoms given {} value vectors",
                    t.atoms.len(),
                    vals.len()
                )));
            }
            let key = vals
                .iter()
                .zip(&t.atoms)
                .map(|(v, a)| histogram_of_values(v, a))
                .collect::<Result<Vec<_>>>()?;
            Ok(t.log_value(&key))
        }
        (Potential::Parametric(d), PotentialArg::Ground(vals)) => {
            let mut x = Vec::with_capacity(vals.len());
            for v in vals {
                if v.len() != 1 {
                    return Err(Error::Arity(
                        "parametric densities are evaluated on one ground factor (one value per atom)".into(),
                    ));
                }
                x.push(v[0]);
            }
            d.log_eval(&x)
        }
        (Potential::Parametric(_), PotentialArg::Histograms(_)) => Err(Error::Arity(
            "parametric densities take ground valuations, not histograms".into(),
        )),
        (Potential::Variational(m), PotentialArg::Histograms(hs)) => m.log_mass_at_histograms(hs),
        (Potential::Variational(m), PotentialArg::Ground(vals)) => m.log_density_at_valuation(vals),
    }
}

/// Number of ground valuations with histogram `h`: n! / prod_v h_v!.
pub fn multinomial_coefficient(h: &Histogram) -> f64 {
    ln_multinomial(h.counts()).exp()
}

/// Log of `multinomial_coefficient`, usable for large populations.
pub fn log_multinomial_coefficient(h: &Histogram) -> f64 {
    ln_multinomial(h.counts())
}

/// Ground values of every atom in a model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Valuation {
    values: BTreeMap<String, Vec<f64>>,
}

impl Valuation {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, atom: &str, values: Vec<f64>) -> Self {
        self.values.insert(atom.to_string(), values);
        self
    }

    pub fn set(&mut self, atom: &str, values: Vec<f64>) {
        self.values.insert(atom.to_string(), values);
    }

    pub fn get(&self, atom: &str) -> Option<&[f64]> {
        self.values.get(atom).map(|v| v.as_slice())
    }

    pub fn check(&self, atom: &Atom) -> Result<&[f64]> {
        let v = self
            .get(&atom.name)
            .ok_or_else(|| Error::UnknownAtom(atom.name.clone()))?;
        if v.len() != atom.population {
            return Err(Error::Domain(format!(
                "valuation of `{}` has {} values, population is {}",
                atom.name,
                v.len(),
                atom.population
            )));
        }
        if let Some(x) = v.iter().find(|x| !atom.domain.contains(**x)) {
            return Err(Error::Domain(format!("value {x} outside the domain of `{}`", atom.name)));
        }
        Ok(v)
    }
}

/// Value-histogram of one atom's population under a valuation.
pub fn histogram_of(valuation: &Valuation, atom: &Atom) -> Result<Histogram> {
    if !atom.is_discrete() {
        return Err(Error::Domain(format!(
            "cannot take the histogram of continuous atom `{}`",
            atom.name
        )));
    }
    let v = valuation.check(atom)?;
    histogram_of_values(v, atom)
}

fn histogram_of_values(values: &[f64], atom: &Atom) -> Result<Histogram> {
    let d = atom.values()?;
    let mut counts = vec![0usize; d];
    for &x in values {
        if !atom.domain.contains(x) {
            return Err(Error::Domain(format!("value {x} outside the domain of `{}`", atom.name)));
        }
        counts[x as usize] += 1;
    }
    Ok(Histogram::new(counts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVar {
    pub name: String,
    pub size: usize,
}

/// One atom occurrence in a parfactor, `atom(param)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomArg {
    pub atom: String,
    pub param: String,
}

impl AtomArg {
    pub fn new(atom: impl Into<String>, param: impl Into<String>) -> Self {
        AtomArg {
            atom: atom.into(),
            param: param.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parfactor {
    pub name: String,
    pub params: Vec<ParamVar>,
    pub args: Vec<AtomArg>,
    pub potential: Potential,
}

impl Parfactor {
    /// Builds a parfactor where every atom gets its own parameter variable
    /// sized by its population.
    pub fn simple(name: impl Into<String>, atoms: &[&Atom], potential: Potential) -> Self {
        let params = atoms
            .iter()
            .enumerate()
            .map(|(i, a)| ParamVar {
                name: format!("p{i}"),
                size: a.population,
            })
            .collect();
        let args = atoms
            .iter()
            .enumerate()
            .map(|(i, a)| AtomArg::new(a.name.clone(), format!("p{i}")))
            .collect();
        Parfactor {
            name: name.into(),
            params,
            args,
            potential,
        }
    }

    pub fn atom_names(&self) -> Vec<&str> {
        self.args.iter().map(|a| a.atom.as_str()).collect()
    }

    pub fn mentions(&self, atom: &str) -> bool {
        self.args.iter().any(|a| a.atom == atom)
    }

    fn param(&self, name: &str) -> Option<&ParamVar> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn validate(&self, atoms: &BTreeMap<String, Atom>) -> Result<()> {
        let mut resolved = Vec::with_capacity(self.args.len());
        for arg in &self.args {
            let atom = atoms
                .get(&arg.atom)
                .ok_or_else(|| Error::UnknownAtom(arg.atom.clone()))?;
            let param = self
                .param(&arg.param)
                .ok_or_else(|| Error::UnboundParameter(arg.param.clone()))?;
            if param.size != atom.population {
                return Err(Error::InvalidModel(format!(
                    "parameter `{}` has {} constants but atom `{}` has population {}",
                    param.name, param.size, atom.name, atom.population
                )));
            }
            resolved.push(atom);
        }
        for p in &self.params {
            if !self.args.iter().any(|a| a.param == p.name) {
                return Err(Error::InvalidModel(format!(
                    "parameter `{}` appears in no atom",
                    p.name
                )));
            }
        }
        match &self.potential {
            Potential::Parametric(d) => d.validate(&resolved)?,
            Potential::HistTable(t) => {
                check_population_atoms(&resolved, t.atoms())?;
                if t.is_empty() {
                    return Err(Error::Domain("histogram table is identically zero".into()));
                }
            }
            Potential::Variational(m) => {
                m.validate()?;
                let matom: Vec<Atom> = m.atoms().iter().map(|a| a.to_atom()).collect();
                check_population_atoms(&resolved, &matom)?;
            }
        }
        Ok(())
    }

    /// Per-valuation log potential of the whole parfactor (the product over
    /// all its ground factors).
    pub fn log_value_at(&self, atoms: &BTreeMap<String, Atom>, v: &Valuation) -> Result<f64> {
        match &self.potential {
            Potential::Parametric(d) => {
                let factors = ground(self, &Bindings::default_for(self))?;
                let mut total = 0.0;
                let mut x = Vec::with_capacity(self.args.len());
                for f in &factors {
                    x.clear();
                    for (atom, idx) in &f.rvs {
                        let vals = v.get(atom).ok_or_else(|| Error::UnknownAtom(atom.clone()))?;
                        x.push(vals[*idx]);
                    }
                    total += d.log_eval(&x)?;
                }
                Ok(total)
            }
            p => {
                let vals = self
                    .args
                    .iter()
                    .map(|a| {
                        let atom = atoms.get(&a.atom).ok_or_else(|| Error::UnknownAtom(a.atom.clone()))?;
                        Ok(v.check(atom)?.to_vec())
                    })
                    .collect::<Result<Vec<_>>>()?;
                log_eval_potential(p, PotentialArg::Ground(&vals))
            }
        }
    }
}

fn check_population_atoms(args: &[&Atom], declared: &[Atom]) -> Result<()> {
    if args.len() != declared.len() {
        return Err(Error::Arity(format!(
            "potential over {} atoms used with {} atom arguments",
            declared.len(),
            args.len()
        )));
    }
    let mut seen = BTreeSet::new();
    for (a, d) in args.iter().zip(declared) {
        if a.name != d.name || a.population != d.population || a.domain.value_count() != d.domain.value_count() {
            return Err(Error::Arity(format!(
                "potential atom `{}` (n={}) does not match argument `{}` (n={})",
                d.name, d.population, a.name, a.population
            )));
        }
        if !seen.insert(a.name.clone()) {
            return Err(Error::Arity(format!(
                "population-level potentials cannot repeat atom `{}`",
                a.name
            )));
        }
    }
    Ok(())
}

/// Constants substituted for parameter variables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bindings {
    pub constants: BTreeMap<String, Vec<String>>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(mut self, param: &str, constants: Vec<String>) -> Self {
        self.constants.insert(param.to_string(), constants);
        self
    }

    /// Binds every parameter of `g` to `name_1 .. name_size`.
    pub fn default_for(g: &Parfactor) -> Self {
        let constants = g
            .params
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    (1..=p.size).map(|i| format!("{}_{i}", p.name)).collect(),
                )
            })
            .collect();
        Bindings { constants }
    }
}

/// One substitution of a parfactor: the constants used and the ground rvs
/// (atom, index into the population) it touches.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundFactor {
    pub substitution: Vec<(String, String)>,
    pub rvs: Vec<(String, usize)>,
}

/// One factor per substitution of the parameter variables.
pub fn ground(g: &Parfactor, bindings: &Bindings) -> Result<Vec<GroundFactor>> {
    let mut domains = Vec::with_capacity(g.params.len());
    for p in &g.params {
        let c = bindings
            .constants
            .get(&p.name)
            .ok_or_else(|| Error::UnboundParameter(p.name.clone()))?;
        if c.len() != p.size {
            return Err(Error::InvalidArgument(format!(
                "parameter `{}` has size {} but {} constants were bound",
                p.name,
                p.size,
                c.len()
            )));
        }
        domains.push(c);
    }
    for a in &g.args {
        if g.param(&a.param).is_none() {
            return Err(Error::UnboundParameter(a.param.clone()));
        }
    }
    let total: usize = domains.iter().map(|d| d.len()).product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; domains.len()];
    for _ in 0..total {
        let substitution = g
            .params
            .iter()
            .zip(&idx)
            .zip(&domains)
            .map(|((p, &i), d)| (p.name.clone(), d[i].clone()))
            .collect();
        let rvs = g
            .args
            .iter()
            .map(|a| {
                let pi = g.params.iter().position(|p| p.name == a.param).unwrap();
                (a.atom.clone(), idx[pi])
            })
            .collect();
        out.push(GroundFactor { substitution, rvs });
        for k in (0..idx.len()).rev() {
            idx[k] += 1;
            if idx[k] < domains[k].len() {
                break;
            }
            idx[k] = 0;
        }
    }
    Ok(out)
}

/// A relational hybrid model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Rhm {
    pub atoms: BTreeMap<String, Atom>,
    pub parfactors: Vec<Parfactor>,
}

impl Rhm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_atom(&mut self, atom: Atom) -> Result<()> {
        atom.validate()?;
        if self.atoms.contains_key(&atom.name) {
            return Err(Error::InvalidModel(format!("duplicate atom `{}`", atom.name)));
        }
        self.atoms.insert(atom.name.clone(), atom);
        Ok(())
    }

    pub fn add_parfactor(&mut self, g: Parfactor) -> Result<()> {
        g.validate(&self.atoms).map_err(|e| e.in_parfactor(&g.name))?;
        if self.parfactors.iter().any(|p| p.name == g.name) {
            return Err(Error::InvalidModel(format!("duplicate parfactor `{}`", g.name)));
        }
        self.parfactors.push(g);
        Ok(())
    }

    pub fn atom(&self, name: &str) -> Result<&Atom> {
        self.atoms.get(name).ok_or_else(|| Error::UnknownAtom(name.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        for a in self.atoms.values() {
            a.validate()?;
        }
        let mut names = BTreeSet::new();
        for g in &self.parfactors {
            if !names.insert(g.name.as_str()) {
                return Err(Error::InvalidModel(format!("duplicate parfactor `{}`", g.name)));
            }
            g.validate(&self.atoms).map_err(|e| e.in_parfactor(&g.name))?;
        }
        Ok(())
    }

    pub fn is_variational(&self) -> bool {
        self.parfactors.iter().all(|g| g.potential.is_variational())
    }

    /// Unnormalized log joint density of a full valuation.
    ///
    /// Variational potentials multiply as histogram masses: a discrete atom
    /// shared by several of them has its multinomial coefficient divided out
    /// once, not once per potential.
    pub fn log_density(&self, v: &Valuation) -> Result<f64> {
        let mut total = 0.0;
        let mut shared: BTreeMap<&str, usize> = BTreeMap::new();
        for g in &self.parfactors {
            total += g.log_value_at(&self.atoms, v)?;
            if g.potential.is_variational() {
                for a in g.atom_names() {
                    *shared.entry(a).or_default() += 1;
                }
            }
        }
        for (name, count) in shared {
            let atom = self.atom(name)?;
            if count > 1 && atom.is_discrete() {
                let h = histogram_of(v, atom)?;
                total += (count - 1) as f64 * ln_multinomial(h.counts());
            }
        }
        Ok(total)
    }
}

/// Name of the i-th singleton produced by shattering `atom`.
pub fn singleton_name(atom: &str, i: usize) -> String {
    format!("{atom}#{i}")
}

/// Replaces `atom` (and any atom sharing a parameter variable with it in a
/// ground-factor parfactor) by population-many singleton atoms, expanding every
/// parfactor that touches them. The joint density is unchanged.
pub fn shatter_non_exchangeable(model: &Rhm, atom: &str) -> Result<Rhm> {
    model.atom(atom)?;
    // Close over atoms that share a parameter with a shattered atom.
    let mut shattered: BTreeSet<String> = BTreeSet::from([atom.to_string()]);
    loop {
        let before = shattered.len();
        for g in model.parfactors.iter().filter(|g| !g.potential.is_population_level()) {
            for a in &g.args {
                if shattered.contains(&a.atom) {
                    for b in g.args.iter().filter(|b| b.param == a.param) {
                        shattered.insert(b.atom.clone());
                    }
                }
            }
        }
        if shattered.len() == before {
            break;
        }
    }
    for name in &shattered {
        let a = model.atom(name)?;
        if let Some(other) = model.atoms.values().find(|b| {
            !shattered.contains(&b.name) && model.parfactors.iter().any(|g| g.mentions(&a.name) && g.mentions(&b.name) && !g.potential.is_population_level() && shares_param(g, &a.name, &b.name))
        }) {
            return Err(Error::InvalidModel(format!("cannot shatter `{}` apart from `{}`", a.name, other.name)));
        }
    }

    let mut out = Rhm::new();
    for a in model.atoms.values() {
        if shattered.contains(&a.name) {
            for i in 0..a.population {
                out.add_atom(Atom {
                    name: singleton_name(&a.name, i),
                    domain: a.domain,
                    population: 1,
                })?;
            }
        } else {
            out.add_atom(a.clone())?;
        }
    }

    for g in &model.parfactors {
        if !g.args.iter().any(|a| shattered.contains(&a.atom)) {
            out.parfactors.push(g.clone());
            continue;
        }
        match &g.potential {
            Potential::Parametric(_) => {
                let touched: Vec<&ParamVar> = g
                    .params
                    .iter()
                    .filter(|p| g.args.iter().any(|a| a.param == p.name && shattered.contains(&a.atom)))
                    .collect();
                let total: usize = touched.iter().map(|p| p.size).product();
                let mut idx = vec![0usize; touched.len()];
                for t in 0..total {
                    let pick = |param: &str| -> Option<usize> {
                        touched.iter().position(|p| p.name == param).map(|k| idx[k])
                    };
                    let params = g
                        .params
                        .iter()
                        .map(|p| match pick(&p.name) {
                            Some(i) => ParamVar {
                                name: format!("{}#{i}", p.name),
                                size: 1,
                            },
                            None => p.clone(),
                        })
                        .collect();
                    let args = g
                        .args
                        .iter()
                        .map(|a| match pick(&a.param) {
                            Some(i) => AtomArg::new(singleton_name(&a.atom, i), format!("{}#{i}", a.param)),
                            None => a.clone(),
                        })
                        .collect();
                    out.parfactors.push(Parfactor {
                        name: format!("{}#{t}", g.name),
                        params,
                        args,
                        potential: g.potential.clone(),
                    });
                    for k in (0..idx.len()).rev() {
                        idx[k] += 1;
                        if idx[k] < touched[k].size {
                            break;
                        }
                        idx[k] = 0;
                    }
                }
            }
            Potential::HistTable(t) => {
                let mut new_atoms = Vec::new();
                let mut args = Vec::new();
                let mut params = Vec::new();
                // position in the old key for each new atom
                let mut origin = Vec::new();
                for (pos, a) in t.atoms().iter().enumerate() {
                    if shattered.contains(&a.name) {
                        for i in 0..a.population {
                            let s = out.atom(&singleton_name(&a.name, i))?.clone();
                            let pname = format!("{}#{i}", g.args[pos].param);
                            params.push(ParamVar { name: pname.clone(), size: 1 });
                            args.push(AtomArg::new(s.name.clone(), pname));
                            new_atoms.push(s);
                            origin.push(pos);
                        }
                    } else {
                        params.push(g.param(&g.args[pos].param).unwrap().clone());
                        args.push(g.args[pos].clone());
                        new_atoms.push(a.clone());
                        origin.push(pos);
                    }
                }
                let old_atoms = t.atoms().to_vec();
                let table = HistTable::from_log_fn(new_atoms, |key| {
                    let mut agg: Vec<Vec<usize>> =
                        old_atoms.iter().map(|a| vec![0; a.values().unwrap()]).collect();
                    for (h, &o) in key.iter().zip(&origin) {
                        for (c, x) in agg[o].iter_mut().zip(h.counts()) {
                            *c += x;
                        }
                    }
                    let old_key: Vec<Histogram> = agg.into_iter().map(Histogram::new).collect();
                    t.log_value(&old_key)
                })?;
                out.parfactors.push(Parfactor {
                    name: g.name.clone(),
                    params,
                    args,
                    potential: Potential::HistTable(table),
                });
            }
            Potential::Variational(m) => {
                let mut params = Vec::new();
                let mut args = Vec::new();
                let mut m2 = m.clone();
                for (pos, a) in m.atoms().iter().enumerate() {
                    if shattered.contains(&a.name) {
                        m2 = m2.split_into_singletons(&a.name, |i| singleton_name(&a.name, i))?;
                        for i in 0..a.population {
                            let pname = format!("{}#{i}", g.args[pos].param);
                            params.push(ParamVar { name: pname.clone(), size: 1 });
                            args.push(AtomArg::new(singleton_name(&a.name, i), pname));
                        }
                    } else {
                        params.push(g.param(&g.args[pos].param).unwrap().clone());
                        args.push(g.args[pos].clone());
                    }
                }
                // split_into_singletons appends singletons at the end; reorder args to match.
                let order: Vec<String> = m2.atoms().iter().map(|a| a.name.clone()).collect();
                let mut sorted_args = Vec::with_capacity(args.len());
                let mut sorted_params = Vec::with_capacity(params.len());
                for name in &order {
                    let i = args.iter().position(|a: &AtomArg| &a.atom == name).unwrap();
                    sorted_args.push(args[i].clone());
                    sorted_params.push(params[i].clone());
                }
                out.parfactors.push(Parfactor {
                    name: g.name.clone(),
                    params: sorted_params,
                    args: sorted_args,
                    potential: Potential::Variational(m2),
                });
            }
        }
    }
    out.validate()?;
    Ok(out)
}

fn shares_param(g: &Parfactor, a: &str, b: &str) -> bool {
    g.args
        .iter()
        .filter(|x| x.atom == a)
        .any(|x| g.args.iter().any(|y| y.atom == b && y.param == x.param))
}
