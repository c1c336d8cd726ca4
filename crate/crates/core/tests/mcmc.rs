use lrvi::continuous::Kde;
use lrvi::lve::{Observation, VariationalModel, VariationalPotential};
use lrvi::mcmc::*;
use lrvi::mixture::{AtomFactor, IidMixture, MixtureAtom};
use lrvi::model::{Atom, AtomDomain};

fn bin(name: &str, n: usize) -> MixtureAtom {
    MixtureAtom {
        name: name.into(),
        population: n,
        domain: AtomDomain::Binary,
    }
}

fn two_comp(name: &str, n: usize, w0: f64, p0: f64, p1: f64) -> IidMixture {
    IidMixture::from_log_weights(
        vec![bin(name, n)],
        vec![
            (w0.ln(), vec![AtomFactor::bernoulli(p0)]),
            ((1.0 - w0).ln(), vec![AtomFactor::bernoulli(p1)]),
        ],
        0.0,
    )
    .unwrap()
}

fn binom(n: usize, h: usize, p: f64) -> f64 {
    let mut c = 1.0;
    for i in 0..h {
        c *= (n - i) as f64 / (i + 1) as f64;
    }
    c * p.powi(h as i32) * (1.0 - p).powi((n - h) as i32)
}

fn normal_pdf(x: f64, m: f64, v: f64) -> f64 {
    (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
}

fn phi(z: f64) -> f64 {
    let lo = -12.0;
    let n = 20_000;
    let h = (z - lo) / n as f64;
    let mut s = 0.5 * (normal_pdf(lo, 0.0, 1.0) + normal_pdf(z, 0.0, 1.0));
    for i in 1..n {
        s += normal_pdf(lo + i as f64 * h, 0.0, 1.0);
    }
    s * h
}

/// Posterior P(HP <= t) of an unobserved house by trapezoid over (p_job, p_down).
pub fn job_house_reference(p: &JobHouseParams, obs: &[Observation], t: f64) -> f64 {
    let (mut zeros, mut ones, mut prices) = (0usize, 0usize, Vec::new());
    for o in obs {
        match o {
            Observation::Counts { counts, .. } => {
                zeros = counts[0];
                ones = counts[1];
            }
            Observation::Values { values, .. } => prices = values.clone(),
        }
    }
    let ll = |m: f64, v: f64| prices.iter().map(|x| normal_pdf(*x, m, v).ln()).sum::<f64>();
    let (ld, lu) = (ll(p.mean_down, p.var_down), ll(p.mean_up, p.var_up));
    let shift = ld.max(lu);
    let (ed, eu) = ((ld - shift).exp(), (lu - shift).exp());
    let g = 801;
    let (mut md, mut mu) = (0.0, 0.0);
    for i in 0..g {
        let a = i as f64 / (g - 1) as f64;
        let wa = if i == 0 || i == g - 1 { 0.5 } else { 1.0 };
        let lik_job = a.powi(ones as i32) * (1.0 - a).powi(zeros as i32);
        for j in 0..g {
            let b = j as f64 / (g - 1) as f64;
            let wb = if j == 0 || j == g - 1 { 0.5 } else { 1.0 };
            let base = wa * wb * lik_job * normal_pdf(a - b, 0.0, p.coupling_var);
            md += base * b * ed;
            mu += base * (1.0 - b) * eu;
        }
    }
    let pd = md / (md + mu);
    pd * phi((t - p.mean_down) / p.var_down.sqrt()) + (1.0 - pd) * phi((t - p.mean_up) / p.var_up.sqrt())
}

fn uncertain_params(houses: usize) -> JobHouseParams {
    JobHouseParams {
        people: 64,
        houses,
        var_down: 0.09,
        var_up: 0.09,
        ..Default::default()
    }
}

#[test]
fn exact_enumeration_matches_independent_quadrature() {
    let p = uncertain_params(32);
    let vm = job_house_model(&p).unwrap();
    for seed in 0..3 {
        let obs = job_house_observations(&p, 0.3, seed % 2 == 0, 8, 2, seed).unwrap();
        let q = RvQuery::Cdf { atom: "HP".into(), t: 0.0 };
        let exact = exact_latent_query(&vm, &q, &obs, 200).unwrap()[0];
        let reference = job_house_reference(&p, &obs, 0.0);
        assert!((exact - reference).abs() < 1e-4, "{exact} vs {reference}");
    }
}

#[test]
fn job_house_lifted_within_ten_percent() {
    let p = uncertain_params(64);
    let vm = job_house_model(&p).unwrap();
    let obs = job_house_observations(&p, 0.3, true, 8, 2, 11).unwrap();
    let q = RvQuery::Cdf { atom: "HP".into(), t: 0.0 };
    let exact = exact_latent_query(&vm, &q, &obs, 200).unwrap()[0];
    let cfg = McmcConfig {
        steps: 100_000,
        burn_in: 1_000,
        seed: 3,
        keep_trace: false,
        ..Default::default()
    };
    let r = run_lifted_mcmc(&vm, &q, &obs, &cfg).unwrap();
    assert!((r.estimate[0] - exact).abs() / exact <= 0.1, "{} vs {exact}", r.estimate[0]);
    assert!(r.diagnostics.split_disagreement < 0.05);
}

#[test]
fn two_latent_stationary_distribution() {
    let n = 5;
    let (w1, w2) = (0.3, 0.6);
    let (pa, pb) = (0.15, 0.85);
    let vm = VariationalModel::new(
        vec![Atom::binary("X", n)],
        vec![
            VariationalPotential::new("g1", two_comp("X", n, w1, pa, pb)),
            VariationalPotential::new("g2", two_comp("X", n, w2, pa, pb)),
        ],
    )
    .unwrap();
    let ps = [pa, pb];
    let ws1 = [w1, 1.0 - w1];
    let ws2 = [w2, 1.0 - w2];
    let mut exact = [[0.0; 2]; 2];
    let mut total = 0.0;
    for l in 0..2 {
        for m in 0..2 {
            let z: f64 = (0..=n).map(|h| binom(n, h, ps[l]) * binom(n, h, ps[m])).sum();
            exact[l][m] = ws1[l] * ws2[m] * z;
            total += exact[l][m];
        }
    }
    assert!(exact[0][0] > exact[0][1] && exact[1][1] > exact[1][0]);
    let cfg = McmcConfig {
        steps: 100_000,
        burn_in: 1_000,
        seed: 9,
        ..Default::default()
    };
    let r = run_lifted_mcmc(&vm, &RvQuery::Pmf { atom: "X".into() }, &[], &cfg).unwrap();
    assert_eq!(r.trace.len(), cfg.steps);
    let mut emp = [[0.0; 2]; 2];
    for s in &r.trace[cfg.burn_in..] {
        emp[s.components[0]][s.components[1]] += 1.0;
    }
    let kept = (cfg.steps - cfg.burn_in) as f64;
    let tv: f64 = (0..2)
        .flat_map(|l| (0..2).map(move |m| (l, m)))
        .map(|(l, m)| (emp[l][m] / kept - exact[l][m] / total).abs())
        .sum::<f64>()
        / 2.0;
    assert!(tv <= 0.05, "tv {tv}");
    let s: f64 = r.estimate.iter().sum();
    assert!((s - 1.0).abs() < 1e-9);
}

#[test]
fn symmetric_components_split_evenly() {
    let vm = VariationalModel::new(
        vec![Atom::binary("X", 6)],
        vec![VariationalPotential::new("g", two_comp("X", 6, 0.5, 0.2, 0.8))],
    )
    .unwrap();
    let cfg = McmcConfig {
        steps: 100_000,
        burn_in: 1_000,
        seed: 2,
        ..Default::default()
    };
    let r = run_lifted_mcmc(&vm, &RvQuery::Pmf { atom: "X".into() }, &[], &cfg).unwrap();
    let zero = r.trace[cfg.burn_in..].iter().filter(|s| s.components[0] == 0).count() as f64
        / (cfg.steps - cfg.burn_in) as f64;
    assert!((zero - 0.5).abs() <= 0.03, "{zero}");
    assert!((r.estimate[0] - 0.5).abs() < 1e-9);
}

#[test]
fn factorized_model_ground_and_lifted_agree() {
    let m = IidMixture::single(
        vec![
            bin("X", 20),
            MixtureAtom {
                name: "Y".into(),
                population: 10,
                domain: AtomDomain::continuous(),
            },
        ],
        vec![
            AtomFactor::bernoulli(0.3),
            AtomFactor::Kde(Kde::new(vec![-1.0, 1.0], 0.5).unwrap()),
        ],
    )
    .unwrap();
    let vm = VariationalModel::new(
        vec![Atom::binary("X", 20), Atom::new("Y", AtomDomain::continuous(), 10).unwrap()],
        vec![VariationalPotential::new("g", m)],
    )
    .unwrap();
    let obs = vec![Observation::Counts {
        atom: "X".into(),
        counts: vec![3, 2],
    }];
    let cfg = McmcConfig {
        steps: 100_000,
        burn_in: 1_000,
        seed: 5,
        keep_trace: false,
        ..Default::default()
    };
    for q in [RvQuery::Pmf { atom: "X".into() }, RvQuery::Cdf { atom: "Y".into(), t: 0.3 }] {
        let l = run_lifted_mcmc(&vm, &q, &obs, &cfg).unwrap();
        let g = run_ground_mcmc(&vm, &q, &obs, &cfg).unwrap();
        for (a, b) in l.estimate.iter().zip(&g.estimate) {
            assert!((a - b).abs() <= 0.02, "{q:?}: {a} vs {b}");
        }
    }
}

#[test]
fn same_seed_same_trace() {
    let p = uncertain_params(16);
    let vm = job_house_model(&p).unwrap();
    let obs = job_house_observations(&p, 0.4, false, 4, 2, 1).unwrap();
    let q = RvQuery::Cdf { atom: "HP".into(), t: 0.0 };
    let cfg = McmcConfig {
        steps: 2_000,
        burn_in: 100,
        seed: 77,
        ..Default::default()
    };
    let a = run_lifted_mcmc(&vm, &q, &obs, &cfg).unwrap();
    let b = run_lifted_mcmc(&vm, &q, &obs, &cfg).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.estimate, b.estimate);
    let c = run_ground_mcmc(&vm, &q, &obs, &cfg).unwrap();
    let d = run_ground_mcmc(&vm, &q, &obs, &cfg).unwrap();
    assert_eq!(c.trace, d.trace);
    let other = run_lifted_mcmc(&vm, &q, &obs, &McmcConfig { seed: 78, ..cfg.clone() }).unwrap();
    assert_ne!(a.trace, other.trace);
}

#[test]
fn ground_cap_is_enforced() {
    let p = uncertain_params(256);
    let vm = job_house_model(&p).unwrap();
    let q = RvQuery::Cdf { atom: "HP".into(), t: 0.0 };
    let cfg = McmcConfig {
        steps: 10,
        burn_in: 1,
        ground_cap: 100,
        ..Default::default()
    };
    assert!(run_ground_mcmc(&vm, &q, &[], &cfg).is_err());
}

#[test]
fn systematic_sweep_visits_every_latent() {
    let p = uncertain_params(16);
    let vm = job_house_model(&p).unwrap();
    let q = RvQuery::Cdf { atom: "HP".into(), t: 0.0 };
    let cfg = McmcConfig {
        steps: 300,
        burn_in: 0,
        systematic: true,
        ..Default::default()
    };
    let r = run_lifted_mcmc(&vm, &q, &[], &cfg).unwrap();
    assert_eq!(r.diagnostics.selections, vec![100, 100, 100]);
}
