//! Gibbs sampling over latent variables only, plus a ground comparator that
//! samples every unobserved rv.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::continuous::Kde;
use crate::error::{Error, Result};
use crate::lve::{
    bound_component, factor_product, kde_cdf, update_obs, ContinuousLatent, LatentCoupling, LatentRole, LveConfig,
    Observation, OpCounts, VariationalModel, VariationalPotential,
};
use crate::math::{log_sum_exp, normal_cdf};
use crate::mixture::{AtomFactor, IidMixture, MixtureAtom};
use crate::model::{Atom, AtomDomain};

/// Question asked of one unobserved ground rv.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RvQuery {
    /// P(X(a) <= t) for a continuous atom.
    Cdf { atom: String, t: f64 },
    /// Predictive pmf of a discrete atom.
    Pmf { atom: String },
    /// Predictive density at x for a continuous atom.
    Density { atom: String, x: f64 },
}

impl RvQuery {
    pub fn atom(&self) -> &str {
        match self {
            RvQuery::Cdf { atom, .. } | RvQuery::Pmf { atom } | RvQuery::Density { atom, .. } => atom,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    /// Component index per potential.
    pub components: Vec<usize>,
    /// Value per continuous latent.
    pub continuous: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub steps: usize,
    pub burn_in: usize,
    pub seed: u64,
    /// Visit latents in a fixed cycle instead of uniformly at random.
    pub systematic: bool,
    /// Keep the per-step latent trace.
    pub keep_trace: bool,
    /// Largest total number of ground rvs the ground chain accepts.
    pub ground_cap: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            steps: 10_000,
            burn_in: 1_000,
            seed: 0,
            systematic: false,
            keep_trace: true,
            ground_cap: 100_000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub seed: u64,
    pub steps: usize,
    pub burn_in: usize,
    /// Mean wall time per step in microseconds.
    pub step_time_us: f64,
    /// Times each latent was selected (potentials first, then continuous latents).
    pub selections: Vec<u64>,
    /// Largest difference between the estimates of the two halves of the kept steps.
    pub split_disagreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainResult {
    pub trace: Vec<LatentState>,
    pub estimate: Vec<f64>,
    pub diagnostics: ChainDiagnostics,
}

/// Which latent a Gibbs step updates.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Site {
    Component(usize),
    Continuous(usize),
}

/// Precomputed structure of a conditioned model for latent-level sampling.
pub struct LiftedSampler<'a> {
    model: &'a VariationalModel,
    cfg: LveConfig,
    latent_of: Vec<Option<usize>>,
    sites: Vec<Site>,
}

impl<'a> LiftedSampler<'a> {
    pub fn new(model: &'a VariationalModel) -> Result<Self> {
        model.validate()?;
        let latent_of = model
            .potentials
            .iter()
            .map(|p| model.latents.iter().position(|l| l.potential() == p.name))
            .collect();
        let mut sites: Vec<Site> = model
            .potentials
            .iter()
            .enumerate()
            .filter(|(_, p)| p.mixture.k() > 1)
            .map(|(i, _)| Site::Component(i))
            .collect();
        sites.extend((0..model.latents.len()).map(Site::Continuous));
        Ok(LiftedSampler {
            model,
            cfg: LveConfig::default(),
            latent_of,
            sites,
        })
    }

    pub fn initial_state(&self) -> LatentState {
        let components = self
            .model
            .potentials
            .iter()
            .map(|p| {
                p.mixture
                    .weights()
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect();
        let continuous = self
            .model
            .latents
            .iter()
            .map(|l| 0.5 * (l.support.0 + l.support.1))
            .collect();
        LatentState { components, continuous }
    }

    pub fn check_state(&self, s: &LatentState) -> Result<()> {
        if s.components.len() != self.model.potentials.len() || s.continuous.len() != self.model.latents.len() {
            return Err(Error::InvalidArgument("latent state does not match the model".into()));
        }
        for (c, p) in s.components.iter().zip(&self.model.potentials) {
            if *c >= p.mixture.k() {
                return Err(Error::InvalidArgument(format!(
                    "component {c} out of range for potential `{}`",
                    p.name
                )));
            }
        }
        for (v, l) in s.continuous.iter().zip(&self.model.latents) {
            if !(*v >= l.support.0 && *v <= l.support.1) {
                return Err(Error::Domain(format!("latent `{}` = {v} outside its support", l.name)));
            }
        }
        Ok(())
    }

    /// Log weight (evidence included) and factors of component `l` of
    /// potential `g` under the current continuous latents.
    fn base(&self, g: usize, l: usize, s: &LatentState) -> Result<(f64, Vec<AtomFactor>)> {
        let pot = &self.model.potentials[g];
        let comp = &pot.mixture.components()[l];
        match self.latent_of[g] {
            Some(j) => bound_component(pot, &self.model.latents[j], l, comp, s.continuous[j]),
            None => Ok((comp.weight.ln(), comp.factors.clone())),
        }
    }

    /// Log normalizer of the product of every potential's current factor on
    /// the atoms of potential `g`, with `g`'s own factors given.
    fn shared_coupling(&self, g: usize, own: &[AtomFactor], s: &LatentState) -> Result<f64> {
        let pot = &self.model.potentials[g];
        let mut total = 0.0;
        for (ai, atom) in pot.mixture.atoms().iter().enumerate() {
            let mut acc: Option<AtomFactor> = None;
            let mut lz = 0.0;
            for (h, other) in self.model.potentials.iter().enumerate() {
                if h == g {
                    continue;
                }
                if let Some(bi) = other.mixture.atom_index(&atom.name) {
                    let f = self.base(h, s.components[h], s)?.1.swap_remove(bi);
                    acc = Some(match acc {
                        None => own[ai].clone(),
                        Some(a) => a,
                    });
                    let (z, prod) = factor_product(atom, acc.as_ref().unwrap(), &f, &self.cfg, &mut OpCounts::default())?;
                    lz += z;
                    acc = Some(prod);
                }
            }
            total += lz;
        }
        Ok(total)
    }

    fn component_conditional(&self, g: usize, s: &LatentState) -> Result<Vec<f64>> {
        let k = self.model.potentials[g].mixture.k();
        let mut logs = Vec::with_capacity(k);
        for l in 0..k {
            let (lw, factors) = self.base(g, l, s)?;
            logs.push(if lw == f64::NEG_INFINITY {
                lw
            } else {
                lw + self.shared_coupling(g, &factors, s)?
            });
        }
        let lz = log_sum_exp(&logs);
        if !lz.is_finite() {
            return Err(Error::InconsistentObservations(format!(
                "every component of `{}` has zero conditional weight",
                self.model.potentials[g].name
            )));
        }
        Ok(logs.iter().map(|x| (x - lz).exp()).collect())
    }

    fn continuous_log_conditional(&self, j: usize, theta: f64, s: &LatentState) -> Result<f64> {
        let lat = &self.model.latents[j];
        let mut st = s.clone();
        st.continuous[j] = theta;
        let mut acc = coupling_terms(&self.model.latents, &self.model.couplings, j, &st.continuous);
        let g = self.model.potential_index(lat.potential()).unwrap();
        let (lw, factors) = self.base(g, st.components[g], &st)?;
        if lw == f64::NEG_INFINITY {
            return Ok(lw);
        }
        acc += lw;
        if matches!(lat.role, LatentRole::BernoulliParameter { .. }) {
            acc += self.shared_coupling(g, &factors, &st)?;
        }
        Ok(acc)
    }

    fn step_site(&self, site: Site, s: &mut LatentState, rng: &mut ChaCha8Rng) -> Result<()> {
        match site {
            Site::Component(g) => {
                let probs = self.component_conditional(g, s)?;
                s.components[g] = sample_index(&probs, rng);
            }
            Site::Continuous(j) => {
                let (lo, hi) = self.model.latents[j].support;
                let x0 = s.continuous[j];
                let mut err = None;
                let x = slice_sample(
                    |t| match self.continuous_log_conditional(j, t, s) {
                        Ok(v) => v,
                        Err(e) => {
                            err = Some(e);
                            f64::NEG_INFINITY
                        }
                    },
                    x0,
                    lo,
                    hi,
                    rng,
                );
                if let Some(e) = err {
                    return Err(e);
                }
                s.continuous[j] = x;
            }
        }
        Ok(())
    }

    /// One step: a uniformly chosen latent is redrawn from its full conditional.
    pub fn step(&self, s: &mut LatentState, rng: &mut ChaCha8Rng) -> Result<usize> {
        if self.sites.is_empty() {
            return Ok(usize::MAX);
        }
        let i = rng.random_range(0..self.sites.len());
        self.step_site(self.sites[i], s, rng)?;
        Ok(i)
    }

    /// Rao-Blackwellized value of a query at a latent state: the component of
    /// the first potential over the query atom is averaged out exactly.
    pub fn query_value(&self, q: &RvQuery, s: &LatentState) -> Result<Vec<f64>> {
        let atom = q.atom();
        let g = self
            .model
            .potentials
            .iter()
            .position(|p| p.mentions(atom))
            .ok_or_else(|| Error::UnknownAtom(atom.to_string()))?;
        let k = self.model.potentials[g].mixture.k();
        let probs = if k > 1 {
            self.component_conditional(g, s)?
        } else {
            vec![1.0]
        };
        let mut out: Option<Vec<f64>> = None;
        for (l, p) in probs.iter().enumerate() {
            if *p == 0.0 {
                continue;
            }
            let mut st = s.clone();
            st.components[g] = l;
            let f = self.rv_factor(atom, &st)?;
            let v = factor_query(&f.0, &f.1, q)?;
            let o = out.get_or_insert_with(|| vec![0.0; v.len()]);
            for (a, b) in o.iter_mut().zip(v) {
                *a += p * b;
            }
        }
        out.ok_or(Error::ZeroMass)
    }

    /// Product of every potential's current factor on `atom`.
    fn rv_factor(&self, atom: &str, s: &LatentState) -> Result<(MixtureAtom, AtomFactor)> {
        let mut acc: Option<(MixtureAtom, AtomFactor)> = None;
        for (g, p) in self.model.potentials.iter().enumerate() {
            if let Some(i) = p.mixture.atom_index(atom) {
                let f = self.base(g, s.components[g], s)?.1.swap_remove(i);
                acc = Some(match acc {
                    None => (p.mixture.atoms()[i].clone(), f),
                    Some((a, prev)) => {
                        let (_, prod) = factor_product(&a, &prev, &f, &self.cfg, &mut OpCounts::default())?;
                        (a, prod)
                    }
                });
            }
        }
        acc.ok_or_else(|| Error::UnknownAtom(atom.to_string()))
    }
}

fn coupling_terms(latents: &[ContinuousLatent], couplings: &[LatentCoupling], j: usize, values: &[f64]) -> f64 {
    let name = &latents[j].name;
    couplings
        .iter()
        .filter(|c| &c.a == name || &c.b == name)
        .map(|c| {
            let a = latents.iter().position(|l| l.name == c.a).unwrap();
            let b = latents.iter().position(|l| l.name == c.b).unwrap();
            c.log_eval(values[a], values[b])
        })
        .sum()
}

fn factor_query(atom: &MixtureAtom, f: &AtomFactor, q: &RvQuery) -> Result<Vec<f64>> {
    match (q, f) {
        (RvQuery::Cdf { t, .. }, AtomFactor::Kde(k)) => Ok(vec![kde_cdf(k, *t)]),
        (RvQuery::Density { x, .. }, AtomFactor::Kde(k)) => Ok(vec![k.eval(*x)]),
        (RvQuery::Pmf { .. }, AtomFactor::Categorical { p }) => Ok(p.clone()),
        (RvQuery::Pmf { .. }, f) if atom.domain.is_discrete() => {
            let (mean, _) = f.count_moments(atom)?;
            let n = atom.population as f64;
            let mut p: Vec<f64> = std::iter::once(0.0).chain(mean.iter().map(|m| (m / n).clamp(0.0, 1.0))).collect();
            p[0] = (1.0 - p[1..].iter().sum::<f64>()).max(0.0);
            let s: f64 = p.iter().sum();
            Ok(p.iter().map(|x| x / s).collect())
        }
        (q, f) => Err(Error::Domain(format!(
            "query {q:?} does not apply to a {} factor",
            f.kind()
        ))),
    }
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Slice sampling on a bounded interval with shrinkage from the full support.
pub fn slice_sample(mut logf: impl FnMut(f64) -> f64, x0: f64, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> f64 {
    let f0 = logf(x0);
    if !f0.is_finite() {
        // Restart from a point of positive density if the current one has none.
        for i in 1..64 {
            let x = lo + (hi - lo) * (i as f64 / 64.0);
            if logf(x).is_finite() {
                return slice_sample(logf, x, lo, hi, rng);
            }
        }
        return x0;
    }
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let y = f0 + u.ln();
    let (mut a, mut b) = (lo, hi);
    for _ in 0..200 {
        let x = a + (b - a) * rng.random::<f64>();
        if logf(x) >= y {
            return x;
        }
        if x < x0 {
            a = x;
        } else {
            b = x;
        }
    }
    x0
}

/// One lifted Gibbs step on a conditioned model.
pub fn lifted_gibbs_step(model: &VariationalModel, state: &LatentState, rng: &mut ChaCha8Rng) -> Result<LatentState> {
    let s = LiftedSampler::new(model)?;
    s.check_state(state)?;
    let mut next = state.clone();
    s.step(&mut next, rng)?;
    Ok(next)
}

fn finish(values: &[Vec<f64>], trace: Vec<LatentState>, diag: ChainDiagnostics) -> Result<ChainResult> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("no kept steps".into()));
    }
    let width = values[0].len();
    let mean = |rows: &[Vec<f64>]| -> Vec<f64> {
        let mut m = vec![0.0; width];
        for r in rows {
            for (a, b) in m.iter_mut().zip(r) {
                *a += b;
            }
        }
        m.iter().map(|x| x / rows.len().max(1) as f64).collect()
    };
    let estimate = mean(values);
    let half = values.len() / 2;
    let split = if half > 0 {
        let (a, b) = (mean(&values[..half]), mean(&values[half..]));
        a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    } else {
        0.0
    };
    Ok(ChainResult {
        trace,
        estimate,
        diagnostics: ChainDiagnostics {
            split_disagreement: split,
            ..diag
        },
    })
}

fn check_steps(cfg: &McmcConfig) -> Result<()> {
    if cfg.steps <= cfg.burn_in {
        return Err(Error::InvalidArgument(format!(
            "steps ({}) must exceed burn-in ({})",
            cfg.steps, cfg.burn_in
        )));
    }
    Ok(())
}

/// Conditions on `obs`, then runs the latent-level chain and averages the
/// Rao-Blackwellized query value over the kept steps.
pub fn run_lifted_mcmc(model: &VariationalModel, query: &RvQuery, obs: &[Observation], cfg: &McmcConfig) -> Result<ChainResult> {
    check_steps(cfg)?;
    let conditioned = update_obs(model, obs)?;
    let sampler = LiftedSampler::new(&conditioned)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = sampler.initial_state();
    let mut selections = vec![0u64; sampler.sites.len()];
    let mut trace = Vec::with_capacity(if cfg.keep_trace { cfg.steps } else { 0 });
    let mut values = Vec::with_capacity(cfg.steps - cfg.burn_in);
    let start = Instant::now();
    for t in 0..cfg.steps {
        if !sampler.sites.is_empty() {
            let i = if cfg.systematic {
                t % sampler.sites.len()
            } else {
                rng.random_range(0..sampler.sites.len())
            };
            sampler.step_site(sampler.sites[i], &mut state, &mut rng)?;
            selections[i] += 1;
        }
        if t >= cfg.burn_in {
            values.push(sampler.query_value(query, &state)?);
        }
        if cfg.keep_trace {
            trace.push(state.clone());
        }
    }
    let elapsed = start.elapsed().as_secs_f64() * 1e6;
    finish(
        &values,
        trace,
        ChainDiagnostics {
            seed: cfg.seed,
            steps: cfg.steps,
            burn_in: cfg.burn_in,
            step_time_us: elapsed / cfg.steps as f64,
            selections,
            split_disagreement: 0.0,
        },
    )
}

/// Ground values of one atom's unobserved rvs.
struct GroundAtom {
    atom: Atom,
    values: Vec<f64>,
    counts: Vec<usize>,
    /// Potentials mentioning the atom, with the atom's index in each.
    members: Vec<(usize, usize)>,
}

fn sample_kde(k: &Kde, rng: &mut ChaCha8Rng) -> f64 {
    let i = sample_index(k.weights(), rng);
    let z: f64 = StandardNormal.sample(rng);
    k.centers()[i] + k.bandwidth() * z
}

/// Gibbs sampler over every unobserved ground rv and every latent. Query
/// estimates average indicator values over the unobserved rvs.
pub fn run_ground_mcmc(model: &VariationalModel, query: &RvQuery, obs: &[Observation], cfg: &McmcConfig) -> Result<ChainResult> {
    check_steps(cfg)?;
    let conditioned = update_obs(model, obs)?;
    let total: usize = conditioned.atoms.values().map(|a| a.population).sum();
    if total > cfg.ground_cap {
        return Err(Error::StateSpaceCap {
            states: total as f64,
            cap: cfg.ground_cap as f64,
        });
    }
    let sampler = LiftedSampler::new(&conditioned)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = sampler.initial_state();
    let mut ground: Vec<GroundAtom> = conditioned
        .atoms
        .values()
        .map(|a| {
            let members = conditioned
                .potentials
                .iter()
                .enumerate()
                .filter_map(|(g, p)| p.mixture.atom_index(&a.name).map(|i| (g, i)))
                .collect();
            GroundAtom {
                atom: a.clone(),
                values: vec![0.0; a.population],
                counts: a.domain.value_count().map(|d| {
                    let mut c = vec![0; d];
                    c[0] = a.population;
                    c
                }).unwrap_or_default(),
                members,
            }
        })
        .collect();
    let qi = ground
        .iter()
        .position(|g| g.atom.name == query.atom())
        .ok_or_else(|| Error::UnknownAtom(query.atom().to_string()))?;
    if matches!(query, RvQuery::Density { .. }) {
        return Err(Error::InvalidArgument("the ground chain estimates cdf and pmf queries only".into()));
    }
    let mut trace = Vec::new();
    let mut values = Vec::with_capacity(cfg.steps - cfg.burn_in);
    let n_sites = sampler.sites.len();
    let mut selections = vec![0u64; n_sites];
    let start = Instant::now();
    for t in 0..cfg.steps {
        // Ground rvs given the current components.
        for ga in ground.iter_mut() {
            let factors: Vec<AtomFactor> = ga
                .members
                .iter()
                .map(|&(g, i)| Ok(sampler.base(g, state.components[g], &state)?.1.swap_remove(i)))
                .collect::<Result<_>>()?;
            match ga.atom.domain {
                AtomDomain::Continuous { .. } => {
                    let mut k: Option<Kde> = None;
                    for f in &factors {
                        let AtomFactor::Kde(f) = f else {
                            return Err(Error::Domain("ground chain needs KDE factors on continuous atoms".into()));
                        };
                        k = Some(match k {
                            None => f.clone(),
                            Some(prev) => crate::lve::kde_product(&prev, f, crate::continuous::MAX_KERNELS, &mut OpCounts::default())?.1,
                        });
                    }
                    if let Some(k) = k {
                        for v in ga.values.iter_mut() {
                            *v = sample_kde(&k, &mut rng);
                        }
                    }
                }
                _ => {
                    let d = ga.counts.len();
                    let mut logp = vec![0.0; d];
                    for f in &factors {
                        let AtomFactor::Categorical { p } = f else {
                            return Err(Error::Domain("ground chain needs categorical factors on discrete atoms".into()));
                        };
                        for (a, q) in logp.iter_mut().zip(p) {
                            *a += q.ln();
                        }
                    }
                    let extra = factors.len().saturating_sub(1) as f64;
                    for i in 0..ga.values.len() {
                        let old = ga.values[i] as usize;
                        ga.counts[old] -= 1;
                        let mut w: Vec<f64> = (0..d)
                            .map(|v| logp[v] - extra * ((ga.counts[v] + 1) as f64).ln())
                            .collect();
                        let lz = log_sum_exp(&w);
                        w.iter_mut().for_each(|x| *x = (*x - lz).exp());
                        let v = sample_index(&w, &mut rng);
                        ga.values[i] = v as f64;
                        ga.counts[v] += 1;
                    }
                }
            }
        }
        // Latents given the ground values.
        for (si, site) in sampler.sites.iter().enumerate() {
            selections[si] += 1;
            match *site {
                Site::Component(g) => {
                    let k = conditioned.potentials[g].mixture.k();
                    let mut logs = Vec::with_capacity(k);
                    for l in 0..k {
                        let (lw, factors) = sampler.base(g, l, &state)?;
                        logs.push(lw + ground_loglik(&ground, g, &factors)?);
                    }
                    let lz = log_sum_exp(&logs);
                    if !lz.is_finite() {
                        return Err(Error::InconsistentObservations("all component weights vanished".into()));
                    }
                    let probs: Vec<f64> = logs.iter().map(|x| (x - lz).exp()).collect();
                    state.components[g] = sample_index(&probs, &mut rng);
                }
                Site::Continuous(j) => {
                    let lat = &conditioned.latents[j];
                    let g = conditioned.potential_index(lat.potential()).unwrap();
                    let (lo, hi) = lat.support;
                    let x0 = state.continuous[j];
                    let mut err = None;
                    let st = state.clone();
                    let x = slice_sample(
                        |th| {
                            let mut s2 = st.clone();
                            s2.continuous[j] = th;
                            let r = sampler.base(g, s2.components[g], &s2).and_then(|(lw, f)| {
                                Ok(lw + ground_loglik(&ground, g, &f)?
                                    + coupling_terms(&conditioned.latents, &conditioned.couplings, j, &s2.continuous))
                            });
                            match r {
                                Ok(v) => v,
                                Err(e) => {
                                    err = Some(e);
                                    f64::NEG_INFINITY
                                }
                            }
                        },
                        x0,
                        lo,
                        hi,
                        &mut rng,
                    );
                    if let Some(e) = err {
                        return Err(e);
                    }
                    state.continuous[j] = x;
                }
            }
        }
        if t >= cfg.burn_in {
            let ga = &ground[qi];
            let m = ga.values.len().max(1) as f64;
            values.push(match query {
                RvQuery::Cdf { t, .. } => vec![ga.values.iter().filter(|v| **v <= *t).count() as f64 / m],
                RvQuery::Pmf { .. } => ga.counts.iter().map(|c| *c as f64 / m).collect(),
                RvQuery::Density { .. } => unreachable!(),
            });
        }
        if cfg.keep_trace {
            trace.push(state.clone());
        }
    }
    let elapsed = start.elapsed().as_secs_f64() * 1e6;
    finish(
        &values,
        trace,
        ChainDiagnostics {
            seed: cfg.seed,
            steps: cfg.steps,
            burn_in: cfg.burn_in,
            step_time_us: elapsed / cfg.steps as f64,
            selections,
            split_disagreement: 0.0,
        },
    )
}

fn ground_loglik(ground: &[GroundAtom], g: usize, factors: &[AtomFactor]) -> Result<f64> {
    let mut acc = 0.0;
    for ga in ground {
        if let Some(&(_, i)) = ga.members.iter().find(|(h, _)| *h == g) {
            match &factors[i] {
                AtomFactor::Categorical { p } => {
                    for (c, q) in ga.counts.iter().zip(p) {
                        if *c > 0 {
                            acc += *c as f64 * q.ln();
                        }
                    }
                }
                AtomFactor::Kde(k) => {
                    for &x in &ga.values {
                        acc += k.log_eval(x);
                    }
                }
                f => return Err(Error::Domain(format!("ground chain cannot evaluate a {} factor", f.kind()))),
            }
        }
    }
    Ok(acc)
}

/// Exact query by enumerating every potential's component and integrating
/// continuous latents on a midpoint grid of `grid` points each.
pub fn exact_latent_query(model: &VariationalModel, query: &RvQuery, obs: &[Observation], grid: usize) -> Result<Vec<f64>> {
    let conditioned = update_obs(model, obs)?;
    let sampler = LiftedSampler::new(&conditioned)?;
    if conditioned.latents.len() > 2 {
        return Err(Error::StateSpaceCap {
            states: (grid as f64).powi(conditioned.latents.len() as i32),
            cap: (grid as f64).powi(2),
        });
    }
    let ks: Vec<usize> = conditioned.potentials.iter().map(|p| p.mixture.k()).collect();
    let combos: f64 = ks.iter().map(|&k| k as f64).product::<f64>() * (grid as f64).powi(conditioned.latents.len() as i32);
    if combos > 1e7 {
        return Err(Error::StateSpaceCap { states: combos, cap: 1e7 });
    }
    let axes: Vec<Vec<f64>> = conditioned
        .latents
        .iter()
        .map(|l| (0..grid).map(|i| l.support.0 + (i as f64 + 0.5) * (l.support.1 - l.support.0) / grid as f64).collect())
        .collect();
    let n_grid = grid.pow(conditioned.latents.len() as u32);
    let mut logs = Vec::new();
    let mut vals = Vec::new();
    let mut state = sampler.initial_state();
    for gi in 0..n_grid {
        let mut idx = gi;
        for (j, ax) in axes.iter().enumerate().rev() {
            state.continuous[j] = ax[idx % grid];
            idx /= grid;
        }
        let coupling: f64 = conditioned
            .couplings
            .iter()
            .map(|c| {
                let a = conditioned.latents.iter().position(|l| l.name == c.a).unwrap();
                let b = conditioned.latents.iter().position(|l| l.name == c.b).unwrap();
                c.log_eval(state.continuous[a], state.continuous[b])
            })
            .sum();
        let total: usize = ks.iter().product();
        for ci in 0..total {
            let mut r = ci;
            for (g, &k) in ks.iter().enumerate().rev() {
                state.components[g] = r % k;
                r /= k;
            }
            let mut lw = coupling;
            for g in 0..ks.len() {
                lw += sampler.base(g, state.components[g], &state)?.0;
            }
            if lw == f64::NEG_INFINITY {
                continue;
            }
            lw += joint_shared_coupling(&sampler, &state)?;
            let f = sampler.rv_factor(query.atom(), &state)?;
            logs.push(lw);
            vals.push(factor_query(&f.0, &f.1, query)?);
        }
    }
    let lz = log_sum_exp(&logs);
    if !lz.is_finite() {
        return Err(Error::ZeroMass);
    }
    let mut out = vec![0.0; vals[0].len()];
    for (l, v) in logs.iter().zip(&vals) {
        let w = (l - lz).exp();
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// Log normalizer of all shared-atom products at a latent state.
fn joint_shared_coupling(s: &LiftedSampler<'_>, st: &LatentState) -> Result<f64> {
    let mut total = 0.0;
    for a in s.model.atoms.keys() {
        let members: Vec<usize> = (0..s.model.potentials.len())
            .filter(|&g| s.model.potentials[g].mentions(a))
            .collect();
        if members.len() < 2 {
            continue;
        }
        let mut acc: Option<(MixtureAtom, AtomFactor)> = None;
        for g in members {
            let p = &s.model.potentials[g];
            let i = p.mixture.atom_index(a).unwrap();
            let f = s.base(g, st.components[g], st)?.1.swap_remove(i);
            acc = Some(match acc {
                None => (p.mixture.atoms()[i].clone(), f),
                Some((atom, prev)) => {
                    let (z, prod) = factor_product(&atom, &prev, &f, &s.cfg, &mut OpCounts::default())?;
                    total += z;
                    (atom, prod)
                }
            });
        }
    }
    Ok(total)
}

/// Parameters of the job/house-price model: people with a job indicator, a
/// market that is down with probability `p_down`, and house-price changes
/// drawn from the market's Normal; the job rate and `p_down` are coupled by
/// f_N(p_job - p_down; 0, coupling_var).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobHouseParams {
    pub people: usize,
    pub houses: usize,
    pub mean_down: f64,
    pub var_down: f64,
    pub mean_up: f64,
    pub var_up: f64,
    pub coupling_var: f64,
}

impl Default for JobHouseParams {
    fn default() -> Self {
        JobHouseParams {
            people: 64,
            houses: 64,
            mean_down: -0.3,
            var_down: 0.04,
            mean_up: 0.1,
            var_up: 0.04,
            coupling_var: 0.01,
        }
    }
}

pub fn job_house_model(p: &JobHouseParams) -> Result<VariationalModel> {
    let job = MixtureAtom {
        name: "Job".into(),
        population: p.people,
        domain: AtomDomain::Binary,
    };
    let hp = MixtureAtom {
        name: "HP".into(),
        population: p.houses,
        domain: AtomDomain::continuous(),
    };
    let jobs = IidMixture::single(vec![job.clone()], vec![AtomFactor::bernoulli(0.5)])?;
    let prices = IidMixture::from_log_weights(
        vec![hp.clone()],
        vec![
            (0.5f64.ln(), vec![AtomFactor::Kde(Kde::new(vec![p.mean_down], p.var_down.sqrt())?)]),
            (0.5f64.ln(), vec![AtomFactor::Kde(Kde::new(vec![p.mean_up], p.var_up.sqrt())?)]),
        ],
        0.0,
    )?;
    VariationalModel::new(
        vec![job.to_atom(), hp.to_atom()],
        vec![VariationalPotential::new("jobs", jobs), VariationalPotential::new("prices", prices)],
    )?
    .with_latents(
        vec![
            ContinuousLatent {
                name: "p_job".into(),
                role: LatentRole::BernoulliParameter {
                    potential: "jobs".into(),
                    atom: "Job".into(),
                },
                support: (0.0, 1.0),
            },
            ContinuousLatent {
                name: "p_down".into(),
                role: LatentRole::ComponentWeight {
                    potential: "prices".into(),
                },
                support: (0.0, 1.0),
            },
        ],
        vec![LatentCoupling {
            a: "p_job".into(),
            b: "p_down".into(),
            mean: 0.0,
            var: p.coupling_var,
        }],
    )
}

/// Synthetic observations: `people_seen` job indicators drawn with rate
/// `p_job` and `houses_seen` prices drawn from the market state `down`.
pub fn job_house_observations(
    p: &JobHouseParams,
    p_job: f64,
    down: bool,
    people_seen: usize,
    houses_seen: usize,
    seed: u64,
) -> Result<Vec<Observation>> {
    if people_seen > p.people || houses_seen > p.houses {
        return Err(Error::InvalidArgument("more observations than rvs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ones = (0..people_seen).filter(|_| rng.random::<f64>() < p_job).count();
    let (m, v) = if down { (p.mean_down, p.var_down) } else { (p.mean_up, p.var_up) };
    let prices = (0..houses_seen)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            m + v.sqrt() * z
        })
        .collect();
    Ok(vec![
        Observation::Counts {
            atom: "Job".into(),
            counts: vec![people_seen - ones, ones],
        },
        Observation::Values {
            atom: "HP".into(),
            values: prices,
        },
    ])
}

/// P(HP <= t) under one market state.
pub fn market_cdf(p: &JobHouseParams, down: bool, t: f64) -> f64 {
    if down {
        normal_cdf(t, p.mean_down, p.var_down)
    } else {
        normal_cdf(t, p.mean_up, p.var_up)
    }
}
