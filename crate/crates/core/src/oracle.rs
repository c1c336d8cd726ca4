//! Exact references: ground enumeration, histogram-space elimination and grid
//! quadrature. Arithmetic here is deliberately self-contained so agreement
//! with the lifted path is evidence rather than tautology.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::continuous::Kde;
use crate::error::{Error, Result};
use crate::lve::{Observation, VariationalModel};
use crate::mixture::{AtomFactor, IidMixture};
use crate::model::{Atom, HistTable, Histogram, HistogramSpace, Potential, Rhm, TupleSpace, Valuation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Cap on ground valuations enumerated one by one.
    pub max_ground_states: f64,
    /// Cap on the size of any dense histogram-space table.
    pub max_histogram_states: f64,
    /// Enumerate valuations even when every potential is population-level.
    pub force_ground: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            max_ground_states: (1u64 << 20) as f64,
            max_histogram_states: (1u64 << 24) as f64,
            force_ground: false,
        }
    }
}

/// Exact normalized joint over histogram tuples, dense in `TupleSpace` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactTable {
    pub atoms: Vec<Atom>,
    pub probs: Vec<f64>,
    /// Log of the normalizer of the unnormalized joint.
    pub log_z: f64,
}

impl ExactTable {
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

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }
}

fn ln_fact_table(n: usize) -> Vec<f64> {
    let mut t = Vec::with_capacity(n + 1);
    let mut acc = 0.0f64;
    t.push(0.0);
    for k in 1..=n {
        acc += (k as f64).ln();
        t.push(acc);
    }
    t
}

fn ln_coef(lf: &[f64], h: &[usize]) -> f64 {
    let n: usize = h.iter().sum();
    lf[n] - h.iter().map(|&c| lf[c]).sum::<f64>()
}

fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Dense log-valued factor over a tuple of histogram spaces.
#[derive(Debug, Clone)]
struct Dense {
    atoms: Vec<Atom>,
    space: TupleSpace,
    logv: Vec<f64>,
}

impl Dense {
    fn from_table(t: &HistTable, cap: f64) -> Result<Self> {
        check_cap(t.atoms(), cap)?;
        let (space, logv) = t.dense_log()?;
        Ok(Dense {
            atoms: t.atoms().to_vec(),
            space,
            logv,
        })
    }

    fn to_table(&self) -> Result<HistTable> {
        let mut t = HistTable::new(self.atoms.clone())?;
        for (i, &l) in self.logv.iter().enumerate() {
            if l > f64::NEG_INFINITY {
                t.insert_log(self.space.tuple(i), l)?;
            }
        }
        Ok(t)
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.atoms.iter().position(|a| a.name == name)
    }

    fn product(&self, other: &Dense, cap: f64) -> Result<Dense> {
        let mut atoms = self.atoms.clone();
        for a in &other.atoms {
            match atoms.iter().find(|b| b.name == a.name) {
                Some(b) if b.population != a.population || b.values()? != a.values()? => {
                    return Err(Error::Arity(format!("atom `{}` differs between tables", a.name)))
                }
                Some(_) => {}
                None => atoms.push(a.clone()),
            }
        }
        check_cap(&atoms, cap)?;
        let space = TupleSpace::for_atoms(&atoms)?;
        let ma: Vec<usize> = self.atoms.iter().map(|a| atoms.iter().position(|b| b.name == a.name).unwrap()).collect();
        let mb: Vec<usize> = other.atoms.iter().map(|a| atoms.iter().position(|b| b.name == a.name).unwrap()).collect();
        let mut logv = Vec::with_capacity(space.len());
        let mut ia = vec![0usize; ma.len()];
        let mut ib = vec![0usize; mb.len()];
        for i in 0..space.len() {
            let idx = space.unflatten(i);
            for (k, &p) in ma.iter().enumerate() {
                ia[k] = idx[p];
            }
            for (k, &p) in mb.iter().enumerate() {
                ib[k] = idx[p];
            }
            logv.push(self.logv[self.space.flatten(&ia)] + other.logv[other.space.flatten(&ib)]);
        }
        Ok(Dense { atoms, space, logv })
    }

    fn sum_out(&self, name: &str) -> Result<Dense> {
        let pos = self.position(name).ok_or_else(|| Error::UnknownAtom(name.to_string()))?;
        let mut atoms = self.atoms.clone();
        atoms.remove(pos);
        let space = TupleSpace::for_atoms(&atoms)?;
        let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); space.len()];
        for i in 0..self.space.len() {
            let mut idx = self.space.unflatten(i);
            idx.remove(pos);
            buckets[space.flatten(&idx)].push(self.logv[i]);
        }
        let logv = buckets.iter().map(|b| lse(b)).collect();
        Ok(Dense { atoms, space, logv })
    }

    fn normalized(&self) -> Result<ExactTable> {
        let lz = lse(&self.logv);
        if !lz.is_finite() {
            return Err(Error::ZeroMass);
        }
        Ok(ExactTable {
            atoms: self.atoms.clone(),
            probs: self.logv.iter().map(|l| (l - lz).exp()).collect(),
            log_z: lz,
        })
    }

    fn scalar(log: f64) -> Dense {
        Dense {
            atoms: Vec::new(),
            space: TupleSpace::new(Vec::new()),
            logv: vec![log],
        }
    }
}

fn check_cap(atoms: &[Atom], cap: f64) -> Result<()> {
    let mut size = 1.0;
    for a in atoms {
        size *= HistogramSpace::size(a.values()?, a.population);
    }
    if size > cap {
        return Err(Error::StateSpaceCap { states: size, cap });
    }
    Ok(())
}

/// Histogram-level mass tables of a discrete model whose product is the
/// unnormalized joint law of all histograms. Per-valuation tables pick up
/// each atom's multinomial coefficient exactly once; variational potentials
/// are already histogram masses.
pub fn mass_tables(rhm: &Rhm) -> Result<Vec<HistTable>> {
    rhm.validate()?;
    let max_n = rhm.atoms.values().map(|a| a.population).max().unwrap_or(0);
    let lf = ln_fact_table(max_n);
    let mut covered: BTreeMap<&str, bool> = BTreeMap::new();
    for g in &rhm.parfactors {
        if let Potential::Variational(_) = g.potential {
            for a in g.atom_names() {
                covered.insert(a, true);
            }
        }
    }
    let mut out = Vec::new();
    for g in &rhm.parfactors {
        let atoms: Vec<Atom> = g
            .atom_names()
            .iter()
            .map(|a| rhm.atom(a).cloned())
            .collect::<Result<_>>()?;
        if atoms.iter().any(|a| !a.is_discrete()) {
            return Err(Error::Domain(format!("parfactor `{}` has a continuous atom", g.name)));
        }
        match &g.potential {
            Potential::HistTable(t) => {
                let assign: Vec<bool> = atoms
                    .iter()
                    .map(|a| {
                        let fresh = !covered.contains_key(a.name.as_str());
                        if fresh {
                            covered.insert(rhm.atoms.get_key_value(&a.name).unwrap().0.as_str(), true);
                        }
                        fresh
                    })
                    .collect();
                let mut m = HistTable::new(atoms.clone())?;
                for (key, v) in t.entries() {
                    let extra: f64 = key
                        .iter()
                        .zip(&assign)
                        .filter(|(_, a)| **a)
                        .map(|(h, _)| ln_coef(&lf, h.counts()))
                        .sum();
                    m.insert_log(key.clone(), v + extra)?;
                }
                out.push(m);
            }
            Potential::Variational(mix) => out.push(mixture_mass_table(mix)?),
            Potential::Parametric(_) => {
                return Err(Error::InvalidModel(format!(
                    "parfactor `{}` is ground-level; use ground enumeration",
                    g.name
                )))
            }
        }
    }
    for a in rhm.atoms.values() {
        if !covered.contains_key(a.name.as_str()) {
            if !a.is_discrete() {
                return Err(Error::Domain(format!("atom `{}` is continuous", a.name)));
            }
            let t = HistTable::from_log_fn(vec![a.clone()], |hs| ln_coef(&lf, hs[0].counts()))?;
            out.push(t);
        }
    }
    Ok(out)
}

fn categorical_log_mass(lf: &[f64], h: &[usize], p: &[f64]) -> f64 {
    let mut acc = ln_coef(lf, h);
    for (&c, &q) in h.iter().zip(p) {
        if c > 0 {
            acc += c as f64 * q.ln();
        }
    }
    acc
}

fn factor_log_mass(lf: &[f64], f: &AtomFactor, space: &HistogramSpace, h: &Histogram) -> Result<f64> {
    match f {
        AtomFactor::Categorical { p } => Ok(categorical_log_mass(lf, h.counts(), p)),
        AtomFactor::CountTable { pmf } => {
            let i = space.index_of(h).ok_or_else(|| Error::InvalidHistogram(format!("{h:?}")))?;
            Ok(pmf[i].ln())
        }
        f => Err(Error::Domain(format!("oracle cannot evaluate a {} factor", f.kind()))),
    }
}

/// Histogram-mass table of a discrete mixture potential, mass included.
pub fn mixture_mass_table(m: &IidMixture) -> Result<HistTable> {
    let atoms: Vec<Atom> = m.atoms().iter().map(|a| a.to_atom()).collect();
    let max_n = atoms.iter().map(|a| a.population).max().unwrap_or(0);
    let lf = ln_fact_table(max_n);
    let spaces = atoms
        .iter()
        .map(HistogramSpace::for_atom)
        .collect::<Result<Vec<_>>>()?;
    let comps = m.components();
    for c in comps {
        if let Some(f) = c
            .factors
            .iter()
            .find(|f| !matches!(f, AtomFactor::Categorical { .. } | AtomFactor::CountTable { .. }))
        {
            return Err(Error::Domain(format!("oracle cannot evaluate a {} factor", f.kind())));
        }
    }
    let log_mass = m.log_mass();
    HistTable::from_log_fn(atoms.clone(), |hs| {
        let terms: Vec<f64> = comps
            .iter()
            .map(|c| {
                let mut acc = c.weight.ln();
                for ((f, h), s) in c.factors.iter().zip(hs).zip(&spaces) {
                    acc += factor_log_mass(&lf, f, s, h).unwrap_or(f64::NEG_INFINITY);
                }
                acc
            })
            .collect();
        log_mass + lse(&terms)
    })
}

/// Sums `atom` out of the product of the given histogram-mass tables that
/// mention it. Tables that do not mention it are ignored.
pub fn exact_eliminate_histogram(potentials: &[HistTable], atom: &str) -> Result<HistTable> {
    let cap = OracleConfig::default().max_histogram_states;
    let mut acc: Option<Dense> = None;
    for t in potentials.iter().filter(|t| t.atoms().iter().any(|a| a.name == atom)) {
        let d = Dense::from_table(t, cap)?;
        acc = Some(match acc {
            None => d,
            Some(a) => a.product(&d, cap)?,
        });
    }
    let acc = acc.ok_or_else(|| Error::UnknownAtom(atom.to_string()))?;
    acc.sum_out(atom)?.to_table()
}

/// Normalized exact marginal over `query` of the product of mass tables.
/// Atoms are summed out greedily, smallest intermediate table first.
pub fn exact_query(tables: &[HistTable], query: &[&str], cfg: &OracleConfig) -> Result<ExactTable> {
    let mut dense = tables
        .iter()
        .map(|t| Dense::from_table(t, cfg.max_histogram_states))
        .collect::<Result<Vec<_>>>()?;
    loop {
        let mut names: Vec<String> = dense
            .iter()
            .flat_map(|d| d.atoms.iter().map(|a| a.name.clone()))
            .filter(|n| !query.contains(&n.as_str()))
            .collect();
        names.sort();
        names.dedup();
        if names.is_empty() {
            break;
        }
        let cost = |name: &str| -> f64 {
            let mut atoms: Vec<&Atom> = Vec::new();
            for d in dense.iter().filter(|d| d.position(name).is_some()) {
                for a in &d.atoms {
                    if !atoms.iter().any(|b| b.name == a.name) {
                        atoms.push(a);
                    }
                }
            }
            atoms
                .iter()
                .map(|a| HistogramSpace::size(a.values().unwrap_or(1), a.population))
                .product()
        };
        let next = names
            .iter()
            .min_by(|a, b| cost(a).total_cmp(&cost(b)).then(a.cmp(b)))
            .unwrap()
            .clone();
        let (with, mut without): (Vec<Dense>, Vec<Dense>) = dense.into_iter().partition(|d| d.position(&next).is_some());
        let mut acc = with[0].clone();
        for d in &with[1..] {
            acc = acc.product(d, cfg.max_histogram_states)?;
        }
        without.push(acc.sum_out(&next)?);
        dense = without;
    }
    let mut acc = Dense::scalar(0.0);
    for d in &dense {
        acc = acc.product(d, cfg.max_histogram_states)?;
    }
    // Order the result as the query lists its atoms.
    let mut ordered = Vec::with_capacity(query.len());
    for q in query {
        let a = acc
            .atoms
            .iter()
            .find(|a| a.name == *q)
            .ok_or_else(|| Error::UnknownAtom(q.to_string()))?
            .clone();
        ordered.push(a);
    }
    let table = acc.normalized()?;
    reorder(&table, &ordered)
}

fn reorder(t: &ExactTable, atoms: &[Atom]) -> Result<ExactTable> {
    if t.atoms.iter().map(|a| &a.name).eq(atoms.iter().map(|a| &a.name)) {
        return Ok(t.clone());
    }
    let from = t.space()?;
    let to = TupleSpace::for_atoms(atoms)?;
    let perm: Vec<usize> = atoms
        .iter()
        .map(|a| t.atoms.iter().position(|b| b.name == a.name).unwrap())
        .collect();
    let mut probs = vec![0.0; to.len()];
    for (i, p) in probs.iter_mut().enumerate() {
        let idx = to.unflatten(i);
        let mut src = vec![0usize; idx.len()];
        for (k, &pos) in perm.iter().enumerate() {
            src[pos] = idx[k];
        }
        *p = t.probs[from.flatten(&src)];
    }
    Ok(ExactTable {
        atoms: atoms.to_vec(),
        probs,
        log_z: t.log_z,
    })
}

/// Exact normalized joint over the histograms of every atom.
pub fn enumerate_joint(rhm: &Rhm) -> Result<ExactTable> {
    enumerate_joint_with(rhm, &OracleConfig::default())
}

pub fn enumerate_joint_with(rhm: &Rhm, cfg: &OracleConfig) -> Result<ExactTable> {
    rhm.validate()?;
    if let Some(a) = rhm.atoms.values().find(|a| !a.is_discrete()) {
        return Err(Error::Domain(format!("atom `{}` is continuous", a.name)));
    }
    let atoms: Vec<Atom> = rhm.atoms.values().cloned().collect();
    let names: Vec<&str> = atoms.iter().map(|a| a.name.as_str()).collect();
    let population_level = rhm.parfactors.iter().all(|g| g.potential.is_population_level());
    if population_level && !cfg.force_ground {
        return exact_query(&mass_tables(rhm)?, &names, cfg);
    }
    let mut states = 1.0f64;
    for a in &atoms {
        states *= (a.values()? as f64).powi(a.population as i32);
    }
    if states > cfg.max_ground_states {
        return Err(Error::StateSpaceCap {
            states,
            cap: cfg.max_ground_states,
        });
    }
    check_cap(&atoms, cfg.max_histogram_states)?;
    let space = TupleSpace::for_atoms(&atoms)?;
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); space.len()];
    let radices: Vec<usize> = atoms
        .iter()
        .flat_map(|a| std::iter::repeat(a.values().unwrap()).take(a.population))
        .collect();
    let mut digits = vec![0usize; radices.len()];
    loop {
        let mut v = Valuation::new();
        let mut off = 0;
        let mut key = Vec::with_capacity(atoms.len());
        for a in &atoms {
            let vals: Vec<f64> = digits[off..off + a.population].iter().map(|&x| x as f64).collect();
            let mut counts = vec![0usize; a.values()?];
            for &x in &digits[off..off + a.population] {
                counts[x] += 1;
            }
            key.push(Histogram::new(counts));
            v.set(&a.name, vals);
            off += a.population;
        }
        let l = rhm.log_density(&v)?;
        let i = space.index_of(&key).unwrap();
        buckets[i].push(l);
        // Odometer increment.
        let mut k = 0;
        loop {
            if k == digits.len() {
                let logv: Vec<f64> = buckets.iter().map(|b| lse(b)).collect();
                return Dense { atoms, space, logv }.normalized();
            }
            digits[k] += 1;
            if digits[k] < radices[k] {
                break;
            }
            digits[k] = 0;
            k += 1;
        }
    }
}

/// Sums out every atom not in `query`.
pub fn exact_marginal(table: &ExactTable, query: &[&str]) -> Result<ExactTable> {
    let keep: Vec<Atom> = query
        .iter()
        .map(|q| {
            table
                .atoms
                .iter()
                .find(|a| a.name == *q)
                .cloned()
                .ok_or_else(|| Error::UnknownAtom(q.to_string()))
        })
        .collect::<Result<_>>()?;
    let from = table.space()?;
    let to = TupleSpace::for_atoms(&keep)?;
    let pos: Vec<usize> = keep
        .iter()
        .map(|a| table.atoms.iter().position(|b| b.name == a.name).unwrap())
        .collect();
    let mut probs = vec![0.0; to.len()];
    for (i, &p) in table.probs.iter().enumerate() {
        let idx = from.unflatten(i);
        let sub: Vec<usize> = pos.iter().map(|&k| idx[k]).collect();
        probs[to.flatten(&sub)] += p;
    }
    Ok(ExactTable {
        atoms: keep,
        probs,
        log_z: table.log_z,
    })
}

/// Exact query on a latent-free variational model. Each potential is
/// conditioned on the observations of its own atoms.
pub fn variational_query(model: &VariationalModel, query: &[&str], obs: &[Observation], cfg: &OracleConfig) -> Result<ExactTable> {
    if !model.latents.is_empty() {
        return Err(Error::InvalidModel("oracle needs a model without continuous latents".into()));
    }
    let mut counts: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for o in obs {
        let atom = model.atoms.get(o.atom()).ok_or_else(|| Error::UnknownAtom(o.atom().to_string()))?;
        let d = atom.values()?;
        let c = counts.entry(atom.name.clone()).or_insert_with(|| vec![0; d]);
        match o {
            Observation::Counts { counts: k, .. } => {
                if k.len() != d {
                    return Err(Error::Arity(format!("atom `{}` needs {d} counts", atom.name)));
                }
                for (a, b) in c.iter_mut().zip(k) {
                    *a += b;
                }
            }
            Observation::Values { values, .. } => {
                for &x in values {
                    if x < 0.0 || x.fract() != 0.0 || x as usize >= d {
                        return Err(Error::Domain(format!("value {x} outside `{}`", atom.name)));
                    }
                    c[x as usize] += 1;
                }
            }
        }
    }
    let max_n = model.atoms.values().map(|a| a.population).max().unwrap_or(0);
    let lf = ln_fact_table(max_n);
    let mut tables = Vec::new();
    for p in &model.potentials {
        let atoms: Vec<Atom> = p
            .mixture
            .atoms()
            .iter()
            .map(|a| {
                let mut a = a.to_atom();
                let seen: usize = counts.get(&a.name).map(|c| c.iter().sum()).unwrap_or(0);
                if seen > a.population {
                    return Err(Error::Domain(format!("too many observations of `{}`", a.name)));
                }
                a.population -= seen;
                Ok(a)
            })
            .collect::<Result<_>>()?;
        let kept: Vec<usize> = (0..atoms.len()).filter(|&i| atoms[i].population > 0).collect();
        let kept_atoms: Vec<Atom> = kept.iter().map(|&i| atoms[i].clone()).collect();
        // Per component: likelihood of the observed rvs, then the law of the rest.
        let mut comps = Vec::new();
        for c in p.mixture.components() {
            let mut ll = c.weight.ln();
            for (f, a) in c.factors.iter().zip(p.mixture.atoms()) {
                if let Some(k) = counts.get(&a.name) {
                    ll += match f {
                        AtomFactor::Categorical { p } => k
                            .iter()
                            .zip(p)
                            .map(|(&c, &q)| if c > 0 { c as f64 * q.ln() } else { 0.0 })
                            .sum::<f64>(),
                        f => return Err(Error::Domain(format!("oracle cannot condition a {} factor", f.kind()))),
                    };
                }
            }
            comps.push((ll, c.factors.clone()));
        }
        let log_mass = p.mixture.log_mass();
        let t = if kept_atoms.is_empty() {
            None
        } else {
            Some(HistTable::from_log_fn(kept_atoms.clone(), |hs| {
                let terms: Vec<f64> = comps
                    .iter()
                    .map(|(ll, fs)| {
                        let mut acc = *ll;
                        for (h, &i) in hs.iter().zip(&kept) {
                            if let AtomFactor::Categorical { p } = &fs[i] {
                                acc += categorical_log_mass(&lf, h.counts(), p);
                            }
                        }
                        acc
                    })
                    .collect();
                log_mass + lse(&terms)
            })?)
        };
        if let Some(t) = t {
            tables.push(t);
        }
    }
    for q in query {
        if !tables.iter().any(|t| t.atoms().iter().any(|a| a.name == *q)) {
            return Err(Error::UnknownAtom(q.to_string()));
        }
    }
    exact_query(&tables, query, cfg)
}

/// Uniform grid over at most two bounded axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub bounds: Vec<(f64, f64)>,
    pub points: usize,
}

/// Trapezoidal quadrature of a nonnegative function on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureTable {
    pub axes: Vec<Vec<f64>>,
    /// Trapezoid weight of each grid node (row-major, last axis fastest).
    pub node_weights: Vec<f64>,
    /// Function values divided by `z`.
    pub density: Vec<f64>,
    /// Integral of the function.
    pub z: f64,
}

impl QuadratureTable {
    /// Integral of the normalized density; 1 up to rounding.
    pub fn mass(&self) -> f64 {
        self.density.iter().zip(&self.node_weights).map(|(d, w)| d * w).sum()
    }

    /// Normalized marginal density along one axis (2-D grids only).
    pub fn axis_marginal(&self, axis: usize) -> Result<Vec<f64>> {
        if self.axes.len() != 2 || axis > 1 {
            return Err(Error::InvalidArgument("axis marginals need a 2-D grid".into()));
        }
        let n = self.axes[1].len();
        let w1 = trapezoid_weights(&self.axes[1]);
        let w0 = trapezoid_weights(&self.axes[0]);
        let mut out = vec![0.0; self.axes[axis].len()];
        for (i, d) in self.density.iter().enumerate() {
            let (a, b) = (i / n, i % n);
            if axis == 0 {
                out[a] += d * w1[b];
            } else {
                out[b] += d * w0[a];
            }
        }
        Ok(out)
    }
}

fn trapezoid_weights(axis: &[f64]) -> Vec<f64> {
    let n = axis.len();
    let h = (axis[n - 1] - axis[0]) / (n - 1) as f64;
    (0..n).map(|i| if i == 0 || i == n - 1 { h / 2.0 } else { h }).collect()
}

pub fn grid_quadrature(f: &dyn Fn(&[f64]) -> f64, spec: &GridSpec) -> Result<QuadratureTable> {
    if spec.bounds.is_empty() || spec.bounds.len() > 2 {
        return Err(Error::InvalidArgument(format!(
            "quadrature supports 1 or 2 rvs, got {}",
            spec.bounds.len()
        )));
    }
    if spec.points < 2 {
        return Err(Error::InvalidArgument("quadrature needs at least 2 points per axis".into()));
    }
    for &(lo, hi) in &spec.bounds {
        if !lo.is_finite() || !hi.is_finite() || !(lo < hi) {
            return Err(Error::Domain(format!("quadrature needs a bounded interval, got [{lo}, {hi}]")));
        }
    }
    let axes: Vec<Vec<f64>> = spec
        .bounds
        .iter()
        .map(|&(lo, hi)| {
            (0..spec.points)
                .map(|i| lo + (hi - lo) * i as f64 / (spec.points - 1) as f64)
                .collect()
        })
        .collect();
    let ws: Vec<Vec<f64>> = axes.iter().map(|a| trapezoid_weights(a)).collect();
    let mut values = Vec::new();
    let mut node_weights = Vec::new();
    if axes.len() == 1 {
        for (x, w) in axes[0].iter().zip(&ws[0]) {
            values.push(f(&[*x]));
            node_weights.push(*w);
        }
    } else {
        for (x, wx) in axes[0].iter().zip(&ws[0]) {
            for (y, wy) in axes[1].iter().zip(&ws[1]) {
                values.push(f(&[*x, *y]));
                node_weights.push(wx * wy);
            }
        }
    }
    if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain("quadrature integrand must be finite and nonnegative".into()));
    }
    let z: f64 = values.iter().zip(&node_weights).map(|(v, w)| v * w).sum();
    let density = if z > 0.0 { values.iter().map(|v| v / z).collect() } else { values };
    Ok(QuadratureTable {
        axes,
        node_weights,
        density,
        z,
    })
}

/// Doubles the grid resolution until the integral changes by less than
/// `rel_tol` relative; returns the finer grid.
pub fn refined_quadrature(f: &dyn Fn(&[f64]) -> f64, spec: &GridSpec, rel_tol: f64, max_points: usize) -> Result<QuadratureTable> {
    let mut s = spec.clone();
    let mut prev = grid_quadrature(f, &s)?;
    loop {
        let next_points = (s.points - 1) * 2 + 1;
        if next_points > max_points {
            return Err(Error::Solver(format!(
                "quadrature did not converge to {rel_tol} within {max_points} points"
            )));
        }
        s.points = next_points;
        let cur = grid_quadrature(f, &s)?;
        if (cur.z - prev.z).abs() <= rel_tol * cur.z.abs().max(f64::MIN_POSITIVE) {
            return Ok(cur);
        }
        prev = cur;
    }
}

/// Gaussian-kernel density, written out independently of the KDE type's own evaluation.
pub fn oracle_kde_density(k: &Kde, x: f64) -> f64 {
    let b = k.bandwidth();
    let c = 1.0 / (b * (2.0 * std::f64::consts::PI).sqrt());
    k.centers()
        .iter()
        .zip(k.weights())
        .map(|(m, w)| w * c * (-0.5 * ((x - m) / b).powi(2)).exp())
        .sum()
}

/// Ground density of a continuous mixture potential with at most two rvs in
/// total, as a function of the rv values in atom order.
pub fn mixture_ground_density(m: &IidMixture) -> Result<impl Fn(&[f64]) -> f64 + '_> {
    let total: usize = m.atoms().iter().map(|a| a.population).sum();
    if total == 0 || total > 2 {
        return Err(Error::InvalidArgument(format!(
            "quadrature supports 1 or 2 rvs, the potential has {total}"
        )));
    }
    for c in m.components() {
        if c.factors.iter().any(|f| !matches!(f, AtomFactor::Kde(_))) {
            return Err(Error::Domain("ground density needs KDE factors".into()));
        }
    }
    let scale = m.log_mass().exp();
    Ok(move |x: &[f64]| {
        let mut acc = 0.0;
        for c in m.components() {
            let mut p = c.weight;
            let mut off = 0;
            for (f, a) in c.factors.iter().zip(m.atoms()) {
                if let AtomFactor::Kde(k) = f {
                    for j in 0..a.population {
                        p *= oracle_kde_density(k, x[off + j]);
                    }
                }
                off += a.population;
            }
            acc += p;
        }
        scale * acc
    })
}
