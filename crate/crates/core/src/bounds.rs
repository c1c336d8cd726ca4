//! Error bounds for variational parfactors and an LP test for extendibility
//! of binary exchangeable tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::discrete::{normalize_hist_table, KeyWeighting};
use crate::error::{Error, Result};
use crate::math::ln_choose;
use crate::model::{HistTable, Rhm};

/// Declared extension of one atom: the population `n_bar` it extends to, and
/// its value count (`None` for a continuous atom).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomExtension {
    pub n_bar: usize,
    pub values: Option<usize>,
}

impl AtomExtension {
    pub fn discrete(n_bar: usize, d: usize) -> Self {
        AtomExtension { n_bar, values: Some(d) }
    }

    pub fn continuous(n_bar: usize) -> Self {
        AtomExtension { n_bar, values: None }
    }
}

/// Per-atom declared extensions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtendibilitySpec {
    pub atoms: BTreeMap<String, AtomExtension>,
}

impl ExtendibilitySpec {
    pub fn insert(&mut self, atom: impl Into<String>, ext: AtomExtension) {
        self.atoms.insert(atom.into(), ext);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundBranch {
    Discrete,
    Continuous,
    DiscreteDiscrete,
    DiscreteContinuous,
    ContinuousContinuous,
    /// Three or more atoms: sum of the single-atom terms.
    Additive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundValue {
    pub value: f64,
    /// The value exceeds 1 and says nothing about a total variation distance.
    pub vacuous: bool,
    pub branch: BoundBranch,
}

impl BoundValue {
    fn new(value: f64, branch: BoundBranch) -> Self {
        BoundValue {
            value,
            vacuous: value > 1.0,
            branch,
        }
    }
}

fn atom_term(n: usize, ext: &AtomExtension) -> Result<f64> {
    if ext.n_bar < n {
        return Err(Error::InvalidArgument(format!(
            "extension size {} is below the population {n}",
            ext.n_bar
        )));
    }
    if ext.n_bar == 0 {
        return Ok(0.0);
    }
    let (n_f, nb) = (n as f64, ext.n_bar as f64);
    Ok(match ext.values {
        Some(d) => 2.0 * d as f64 * n_f / nb,
        None => n_f * (n_f - 1.0).max(0.0) / nb,
    })
}

/// TV bound for a single-atom potential over `n` rvs that extends to `ext.n_bar`.
pub fn lemma1_bound(n: usize, ext: &AtomExtension) -> Result<BoundValue> {
    let branch = if ext.values.is_some() {
        BoundBranch::Discrete
    } else {
        BoundBranch::Continuous
    };
    Ok(BoundValue::new(atom_term(n, ext)?, branch))
}

/// TV bound for a two-atom potential.
pub fn lemma3_bound(n: usize, m: usize, x: &AtomExtension, y: &AtomExtension) -> Result<BoundValue> {
    let branch = match (x.values.is_some(), y.values.is_some()) {
        (true, true) => BoundBranch::DiscreteDiscrete,
        (false, false) => BoundBranch::ContinuousContinuous,
        _ => BoundBranch::DiscreteContinuous,
    };
    Ok(BoundValue::new(atom_term(n, x)? + atom_term(m, y)?, branch))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBound {
    pub value: f64,
    /// Whether the sum was divided by a model normalizer.
    pub normalized: bool,
    pub vacuous: bool,
}

/// Model-level bound: the sum of per-parfactor bounds, divided by `z` when given.
pub fn theorem4_bound(eps: &[f64], z: Option<f64>) -> Result<ModelBound> {
    if let Some(e) = eps.iter().find(|e| !(**e >= 0.0)) {
        return Err(Error::InvalidArgument(format!("bound terms must be non-negative, got {e}")));
    }
    let sum: f64 = eps.iter().sum();
    let value = match z {
        Some(z) if z > 0.0 && z.is_finite() => sum / z,
        Some(z) => return Err(Error::InvalidArgument(format!("normalizer must be positive, got {z}"))),
        None => sum,
    };
    Ok(ModelBound {
        value,
        normalized: z.is_some(),
        vacuous: value > 1.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub parfactors: Vec<(String, BoundValue)>,
    pub model: ModelBound,
}

/// Bounds for every parfactor whose atoms all have declared extensions.
pub fn bound_report(model: &Rhm, spec: &ExtendibilitySpec, z: Option<f64>) -> Result<BoundReport> {
    let mut parfactors = Vec::new();
    for g in &model.parfactors {
        let names = g.atom_names();
        let mut terms = Vec::new();
        for a in &names {
            let Some(ext) = spec.atoms.get(*a) else {
                terms.clear();
                break;
            };
            terms.push((model.atom(a)?.population, ext));
        }
        if terms.is_empty() {
            continue;
        }
        let b = match terms.as_slice() {
            [(n, x)] => lemma1_bound(*n, x),
            [(n, x), (m, y)] => lemma3_bound(*n, *m, x, y),
            _ => terms
                .iter()
                .map(|(n, x)| atom_term(*n, x))
                .sum::<Result<f64>>()
                .map(|v| BoundValue::new(v, BoundBranch::Additive)),
        }
        .map_err(|e| e.in_parfactor(&g.name))?;
        parfactors.push((g.name.clone(), b));
    }
    let eps: Vec<f64> = parfactors.iter().map(|(_, b)| b.value).collect();
    Ok(BoundReport {
        parfactors,
        model: theorem4_bound(&eps, z)?,
    })
}

pub const MAX_EXTEND_N: usize = 20;
pub const MAX_EXTEND_N_BAR: usize = 200;
pub const FEASIBILITY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extendibility {
    pub feasible: bool,
    pub n: usize,
    pub n_bar: usize,
    /// Distribution over the count of ones among `n_bar` rvs whose
    /// hypergeometric marginal reproduces the table.
    pub witness: Option<Vec<f64>>,
    /// Largest absolute constraint residual of the witness, or the phase-one
    /// objective when infeasible.
    pub residual: f64,
}

/// Hypergeometric marginal over `n` rvs of a count distribution over `n_bar` rvs.
pub fn marginalize_counts(p_bar: &[f64], n: usize) -> Result<Vec<f64>> {
    let n_bar = p_bar.len().checked_sub(1).ok_or(Error::EmptyTable)?;
    if n > n_bar {
        return Err(Error::InvalidArgument(format!("cannot marginalize {n_bar} rvs down to {n}")));
    }
    let m = urn_matrix(n, n_bar);
    Ok(m.iter().map(|row| row.iter().zip(p_bar).map(|(a, b)| a * b).sum()).collect())
}

/// `m[h][H]` = probability of `h` ones in `n` draws without replacement from an
/// urn of `n_bar` balls with `H` ones.
fn urn_matrix(n: usize, n_bar: usize) -> Vec<Vec<f64>> {
    let total = ln_choose(n_bar, n);
    (0..=n)
        .map(|h| {
            (0..=n_bar)
                .map(|big| {
                    if h > big || n - h > n_bar - big {
                        0.0
                    } else {
                        (ln_choose(big, h) + ln_choose(n_bar - big, n - h) - total).exp()
                    }
                })
                .collect()
        })
        .collect()
}

/// Decides whether a table over one binary atom is the marginal of an
/// exchangeable distribution over `n_bar` rvs.
pub fn check_extendibility(table: &HistTable, n_bar: usize) -> Result<Extendibility> {
    let atoms = table.atoms();
    if atoms.len() != 1 || atoms[0].values()? != 2 {
        return Err(Error::InvalidArgument("extendibility check needs a table over one binary atom".into()));
    }
    let n = atoms[0].population;
    if n > MAX_EXTEND_N || n_bar > MAX_EXTEND_N_BAR {
        return Err(Error::StateSpaceCap {
            states: n_bar.max(n) as f64,
            cap: if n > MAX_EXTEND_N { MAX_EXTEND_N } else { MAX_EXTEND_N_BAR } as f64,
        });
    }
    if n_bar < n {
        return Err(Error::InvalidArgument(format!("extension size {n_bar} is below the population {n}")));
    }
    let dist = normalize_hist_table(table, KeyWeighting::Multinomial)?;
    // Histogram (n - h, h) is stored at index n - h; reindex by count of ones.
    let space = dist.space()?;
    let mut target = vec![0.0; n + 1];
    for (i, p) in dist.probs.iter().enumerate() {
        let key = space.tuple(i);
        target[key[0].counts()[1]] = *p;
    }
    extendible_counts(&target, n_bar)
}

/// LP feasibility on a distribution over the count of ones among `n` rvs.
pub fn extendible_counts(target: &[f64], n_bar: usize) -> Result<Extendibility> {
    let n = target.len().checked_sub(1).ok_or(Error::EmptyTable)?;
    let a = urn_matrix(n, n_bar);
    let lp = phase_one(&a, target)?;
    let feasible = lp.objective <= FEASIBILITY_TOL;
    let (witness, residual) = if feasible {
        let mut x: Vec<f64> = lp.x.iter().map(|v| v.max(0.0)).collect();
        let s: f64 = x.iter().sum();
        x.iter_mut().for_each(|v| *v /= s);
        let back = marginalize_counts(&x, n)?;
        let r = back.iter().zip(target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        (Some(x), r)
    } else {
        (None, lp.objective)
    };
    Ok(Extendibility {
        feasible: feasible && residual <= FEASIBILITY_TOL * 10.0,
        n,
        n_bar,
        witness,
        residual,
    })
}

struct PhaseOne {
    x: Vec<f64>,
    objective: f64,
}

/// Minimizes the sum of artificial variables for `A x = b, x >= 0` with a
/// dense tableau and Bland's rule.
fn phase_one(a: &[Vec<f64>], b: &[f64]) -> Result<PhaseOne> {
    const PIVOT_TOL: f64 = 1e-12;
    let rows = a.len();
    let cols = a.first().map(|r| r.len()).unwrap_or(0);
    if b.len() != rows || b.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Solver("right-hand side must be non-negative and match the rows".into()));
    }
    let width = cols + rows + 1;
    let mut t: Vec<Vec<f64>> = (0..rows)
        .map(|i| {
            let mut r = vec![0.0; width];
            r[..cols].copy_from_slice(&a[i]);
            r[cols + i] = 1.0;
            r[width - 1] = b[i];
            r
        })
        .collect();
    let mut basis: Vec<usize> = (cols..cols + rows).collect();
    // Reduced costs of the phase-one objective.
    let mut cost = vec![0.0; width];
    for r in &t {
        for (c, v) in cost.iter_mut().zip(r) {
            *c -= v;
        }
    }
    for c in cost.iter_mut().skip(cols).take(rows) {
        *c = 0.0;
    }
    let max_iter = 50 * (rows + cols);
    for _ in 0..max_iter {
        let Some(enter) = (0..width - 1).find(|&j| cost[j] < -PIVOT_TOL) else {
            let mut x = vec![0.0; cols];
            for (i, &bv) in basis.iter().enumerate() {
                if bv < cols {
                    x[bv] = t[i][width - 1];
                }
            }
            return Ok(PhaseOne {
                x,
                objective: -cost[width - 1],
            });
        };
        let mut leave: Option<(usize, f64)> = None;
        for (i, r) in t.iter().enumerate() {
            if r[enter] > PIVOT_TOL {
                let ratio = r[width - 1] / r[enter];
                leave = match leave {
                    Some((li, lr)) if lr < ratio - 1e-15 || (ratio - lr).abs() <= 1e-15 && basis[li] < basis[i] => Some((li, lr)),
                    _ => Some((i, ratio)),
                };
            }
        }
        let Some((li, _)) = leave else {
            return Err(Error::Solver("phase-one objective is unbounded".into()));
        };
        let piv = t[li][enter];
        t[li].iter_mut().for_each(|v| *v /= piv);
        let pivot_row = t[li].clone();
        for (i, r) in t.iter_mut().enumerate() {
            if i != li && r[enter] != 0.0 {
                let f = r[enter];
                r.iter_mut().zip(&pivot_row).for_each(|(v, p)| *v -= f * p);
            }
        }
        let f = cost[enter];
        cost.iter_mut().zip(&pivot_row).for_each(|(v, p)| *v -= f * p);
        basis[li] = enter;
    }
    Err(Error::Solver("iteration limit reached".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Atom, Histogram};

    #[test]
    fn lemma1_examples() {
        assert!((lemma1_bound(10, &AtomExtension::discrete(100, 2)).unwrap().value - 0.4).abs() < 1e-12);
        assert!((lemma1_bound(10, &AtomExtension::continuous(1000)).unwrap().value - 0.09).abs() < 1e-12);
        let v = lemma1_bound(10, &AtomExtension::discrete(10, 2)).unwrap();
        assert!((v.value - 4.0).abs() < 1e-12 && v.vacuous);
        assert!(lemma1_bound(10, &AtomExtension::discrete(9, 2)).is_err());
    }

    #[test]
    fn lemma3_examples() {
        let b = lemma3_bound(10, 10, &AtomExtension::discrete(200, 2), &AtomExtension::discrete(200, 2)).unwrap();
        assert!((b.value - 0.4).abs() < 1e-12);
        let b = lemma3_bound(5, 5, &AtomExtension::discrete(100, 2), &AtomExtension::continuous(500)).unwrap();
        assert!((b.value - 0.24).abs() < 1e-12);
        assert_eq!(b.branch, BoundBranch::DiscreteContinuous);
        let huge = usize::MAX / 4;
        let b = lemma3_bound(5, 5, &AtomExtension::discrete(huge, 2), &AtomExtension::continuous(huge)).unwrap();
        assert!(b.value < 1e-15);
    }

    #[test]
    fn theorem4_examples() {
        assert!((theorem4_bound(&[0.25], None).unwrap().value - 0.25).abs() < 1e-15);
        assert!((theorem4_bound(&[0.1, 0.2], Some(1.0)).unwrap().value - 0.3).abs() < 1e-12);
        assert_eq!(theorem4_bound(&[], None).unwrap().value, 0.0);
        assert!(theorem4_bound(&[-0.1], None).is_err());
    }

    fn table_from_counts(n: usize, p: &[f64]) -> HistTable {
        // p is a distribution over the count of ones; convert to per-valuation values.
        let atom = Atom::binary("X", n);
        HistTable::from_fn(vec![atom], |k| {
            let ones = k[0].counts()[1];
            p[ones] / ln_choose(n, ones).exp()
        })
        .unwrap()
    }

    #[test]
    fn point_mass_is_not_extendible() {
        let mut p = vec![0.0; 11];
        p[5] = 1.0;
        let t = table_from_counts(10, &p);
        let r = check_extendibility(&t, 100).unwrap();
        assert!(!r.feasible);
        assert!(r.witness.is_none());
        // It is trivially extendible to itself.
        assert!(check_extendibility(&t, 10).unwrap().feasible);
    }

    #[test]
    fn binomial_is_extendible() {
        let n = 10;
        let p: Vec<f64> = (0..=n)
            .map(|h| (ln_choose(n, h) + h as f64 * 0.3f64.ln() + (n - h) as f64 * 0.7f64.ln()).exp())
            .collect();
        let t = table_from_counts(n, &p);
        let r = check_extendibility(&t, 100).unwrap();
        assert!(r.feasible, "{r:?}");
        let w = r.witness.unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn caps_and_arity() {
        let t = table_from_counts(10, &[1.0 / 11.0; 11]);
        assert!(check_extendibility(&t, 201).is_err());
        assert!(check_extendibility(&t, 9).is_err());
        let mut two = HistTable::new(vec![Atom::binary("A", 1), Atom::binary("B", 1)]).unwrap();
        two.insert(vec![Histogram::new(vec![1, 0]), Histogram::new(vec![1, 0])], 1.0).unwrap();
        assert!(check_extendibility(&two, 5).is_err());
    }
}
