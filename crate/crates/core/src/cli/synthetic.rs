//! Synthetic well-level matrices (rows = months, columns = wells) and the
//! lifted-versus-ground elimination comparison built on them.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::cluster::{cluster_columns, Clustering};
use super::obs::ObsMatrix;
use crate::continuous::{bandwidth_select, Kde};
use crate::error::{Error, Result};
use crate::lve::{latent_variable_elimination, rv_predictive_pmf, LveConfig, Observation, VariationalModel, VariationalPotential};
use crate::math::stage_seed;
use crate::mixture::{AtomFactor, IidMixture, MixtureAtom};
use crate::model::{Atom, AtomDomain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub rows: usize,
    pub columns: usize,
    /// Number of (mean, sd) regimes the columns are drawn from.
    pub regimes: usize,
    /// Fraction of missing cells.
    pub missing: f64,
    /// Shift of a wet month, in units of the column's sd.
    pub wet_shift: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            rows: 480,
            columns: 3420,
            regimes: 92,
            missing: 0.7,
            wet_shift: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticMatrix {
    pub matrix: ObsMatrix,
    pub regime_of_column: Vec<usize>,
    /// Hidden wet/dry state of every row.
    pub wet: Vec<bool>,
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticMatrix> {
    if spec.regimes == 0 || spec.columns < spec.regimes || spec.rows == 0 || !(0.0..1.0).contains(&spec.missing) {
        return Err(Error::InvalidArgument("invalid synthetic matrix spec".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let regimes: Vec<(f64, f64)> = (0..spec.regimes)
        .map(|_| (rng.random_range(0.0..50.0), rng.random_range(0.5..3.0)))
        .collect();
    // Every regime gets at least one column.
    let regime_of_column: Vec<usize> = (0..spec.columns)
        .map(|j| if j < spec.regimes { j } else { rng.random_range(0..spec.regimes) })
        .collect();
    let wet: Vec<bool> = (0..spec.rows).map(|_| rng.random::<bool>()).collect();
    let mut rows = Vec::with_capacity(spec.rows);
    for &w in &wet {
        let row = regime_of_column
            .iter()
            .map(|&r| {
                let (m, sd) = regimes[r];
                let z: f64 = StandardNormal.sample(&mut rng);
                let keep = rng.random::<f64>() >= spec.missing;
                keep.then(|| m + if w { spec.wet_shift * sd } else { 0.0 } + sd * z)
            })
            .collect();
        rows.push(row);
    }
    // Every column keeps at least one observation.
    for j in 0..spec.columns {
        if rows.iter().all(|r: &Vec<Option<f64>>| r[j].is_none()) {
            let (m, sd) = regimes[regime_of_column[j]];
            rows[0][j] = Some(m + if wet[0] { spec.wet_shift * sd } else { 0.0 });
        }
    }
    Ok(SyntheticMatrix {
        matrix: ObsMatrix {
            columns: (0..spec.columns).map(|j| format!("w{j}")).collect(),
            rows,
        },
        regime_of_column,
        wet,
    })
}

const STATE_EPS: f64 = 1e-9;
const MAX_CENTERS: usize = 32;

/// Per-group two-component potentials over the binary state atom `R` and the
/// group's wells, trained on `train` rows with known states.
fn group_mixtures(data: &SyntheticMatrix, groups: &Clustering, train: &[usize]) -> Result<Vec<IidMixture>> {
    let k = groups.sizes.len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (j, &g) in groups.assignment.iter().enumerate() {
        members[g].push(j);
    }
    let state = MixtureAtom {
        name: "R".into(),
        population: 1,
        domain: AtomDomain::Binary,
    };
    members
        .iter()
        .enumerate()
        .map(|(g, cols)| {
            let atom = MixtureAtom {
                name: format!("G{g}"),
                population: cols.len(),
                domain: AtomDomain::continuous(),
            };
            let parts = [false, true]
                .iter()
                .map(|&w| {
                    let vals: Vec<f64> = train
                        .iter()
                        .filter(|&&t| data.wet[t] == w)
                        .flat_map(|&t| cols.iter().filter_map(move |&j| data.matrix.rows[t][j]))
                        .collect();
                    if vals.is_empty() {
                        return Err(Error::InvalidArgument(format!("group {g} has no training values")));
                    }
                    let stride = vals.len().div_ceil(MAX_CENTERS);
                    let centers: Vec<f64> = vals.iter().step_by(stride).copied().collect();
                    let bw = bandwidth_select(&vals, &[]);
                    let p1 = if w { 1.0 - STATE_EPS } else { STATE_EPS };
                    Ok((0.5f64.ln(), vec![AtomFactor::bernoulli(p1), AtomFactor::Kde(Kde::new(centers, bw)?)]))
                })
                .collect::<Result<Vec<_>>>()?;
            IidMixture::from_log_weights(vec![state.clone(), atom], parts, 0.0)
        })
        .collect()
}

/// Lifted model (one atom per group) and ground model (one atom per well).
pub fn build_models(data: &SyntheticMatrix, groups: &Clustering, train: &[usize]) -> Result<(VariationalModel, VariationalModel)> {
    let mixtures = group_mixtures(data, groups, train)?;
    let mut lifted_atoms = vec![Atom::binary("R", 1)];
    let mut ground_atoms = vec![Atom::binary("R", 1)];
    let mut lifted = Vec::new();
    let mut ground = Vec::new();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); groups.sizes.len()];
    for (j, &g) in groups.assignment.iter().enumerate() {
        members[g].push(j);
    }
    for (g, m) in mixtures.into_iter().enumerate() {
        let name = format!("G{g}");
        lifted_atoms.push(Atom::new(name.clone(), AtomDomain::continuous(), members[g].len())?);
        for &j in &members[g] {
            ground_atoms.push(Atom::new(format!("w{j}"), AtomDomain::continuous(), 1)?);
        }
        // One potential per well: given R the wells are independent, so the
        // product of per-well copies matches the group potential.
        for &j in &members[g] {
            let well = MixtureAtom {
                name: format!("w{j}"),
                population: 1,
                domain: AtomDomain::continuous(),
            };
            let per_well = IidMixture::new(vec![m.atoms()[0].clone(), well], m.components().to_vec())?;
            ground.push(VariationalPotential::new(format!("w{j}"), per_well));
        }
        lifted.push(VariationalPotential::new(format!("g{g}"), m));
    }
    Ok((
        VariationalModel::new(lifted_atoms, lifted)?,
        VariationalModel::new(ground_atoms, ground)?,
    ))
}

/// Observations of one row for both models.
pub fn row_observations(data: &SyntheticMatrix, groups: &Clustering, row: usize) -> (Vec<Observation>, Vec<Observation>) {
    let k = groups.sizes.len();
    let mut by_group: Vec<Vec<f64>> = vec![Vec::new(); k];
    let mut ground = Vec::new();
    for (j, cell) in data.matrix.rows[row].iter().enumerate() {
        if let Some(v) = cell {
            by_group[groups.assignment[j]].push(*v);
            ground.push(Observation::Values {
                atom: format!("w{j}"),
                values: vec![*v],
            });
        }
    }
    let lifted = by_group
        .into_iter()
        .enumerate()
        .filter(|(_, v)| !v.is_empty())
        .map(|(g, values)| Observation::Values {
            atom: format!("G{g}"),
            values,
        })
        .collect();
    (lifted, ground)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElimComparison {
    pub groups: usize,
    pub columns: usize,
    pub queries: usize,
    pub lifted_s: f64,
    pub ground_s: f64,
    /// Mean of 1 - P(R = true state) per method.
    pub lifted_error: f64,
    pub ground_error: f64,
    /// Largest difference between the two methods' P(R = wet).
    pub max_disagreement: f64,
}

impl ElimComparison {
    pub fn speedup(&self) -> f64 {
        self.ground_s / self.lifted_s
    }
}

fn wet_posterior(model: &VariationalModel, obs: &[Observation], cfg: &LveConfig) -> Result<f64> {
    let r = latent_variable_elimination(model, &["R"], obs, cfg)?;
    Ok(rv_predictive_pmf(&r.marginal, "R")?[1])
}

/// Clusters the columns into `groups`, trains on all but the last `queries`
/// rows, then answers P(R | row) for each held-out row with both models.
pub fn compare_elimination(data: &SyntheticMatrix, groups: usize, queries: usize, seed: u64) -> Result<ElimComparison> {
    let rows = data.matrix.rows.len();
    if queries == 0 || queries >= rows {
        return Err(Error::InvalidArgument("query rows must be between 1 and rows - 1".into()));
    }
    let clustering = cluster_columns(&data.matrix, groups, stage_seed(seed, "cluster"))?;
    let train: Vec<usize> = (0..rows - queries).collect();
    let (lifted, ground) = build_models(data, &clustering, &train)?;
    let cfg = LveConfig::default();
    let held: Vec<usize> = (rows - queries..rows).collect();
    let obs: Vec<_> = held.iter().map(|&t| row_observations(data, &clustering, t)).collect();

    let start = Instant::now();
    let lp = obs.iter().map(|(o, _)| wet_posterior(&lifted, o, &cfg)).collect::<Result<Vec<_>>>()?;
    let lifted_s = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let gp = obs.iter().map(|(_, o)| wet_posterior(&ground, o, &cfg)).collect::<Result<Vec<_>>>()?;
    let ground_s = start.elapsed().as_secs_f64();

    let err = |p: &[f64]| {
        p.iter()
            .zip(&held)
            .map(|(q, &t)| 1.0 - if data.wet[t] { *q } else { 1.0 - q })
            .sum::<f64>()
            / queries as f64
    };
    Ok(ElimComparison {
        groups,
        columns: data.matrix.columns.len(),
        queries,
        lifted_s,
        ground_s,
        lifted_error: err(&lp),
        ground_error: err(&gp),
        max_disagreement: lp.iter().zip(&gp).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
    })
}
