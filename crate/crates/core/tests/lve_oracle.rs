use lrvi::continuous::Kde;
use lrvi::discrete::total_variation;
use lrvi::lve::*;
use lrvi::mixture::{AtomFactor, IidMixture, MixtureAtom};
use lrvi::model::{Atom, AtomDomain, HistTable, HistogramSpace};
use lrvi::oracle::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bin(name: &str, n: usize) -> MixtureAtom {
    MixtureAtom { name: name.into(), population: n, domain: AtomDomain::Binary }
}

fn random_mixture(rng: &mut ChaCha8Rng, atoms: Vec<MixtureAtom>, k: usize, lo: f64, hi: f64) -> IidMixture {
    let parts = (0..k)
        .map(|_| {
            let w: f64 = rng.random_range(0.2..1.0);
            let fs = atoms.iter().map(|_| AtomFactor::bernoulli(rng.random_range(lo..hi))).collect();
            (w.ln(), fs)
        })
        .collect();
    IidMixture::from_log_weights(atoms, parts, 0.0).unwrap()
}

fn oracle_marginal(pots: &[IidMixture], q: &str) -> Vec<f64> {
    let tables: Vec<HistTable> = pots.iter().map(|p| mixture_mass_table(p).unwrap()).collect();
    exact_query(&tables, &[q], &OracleConfig::default()).unwrap().probs
}

fn two_atom_tv(n: usize, m: usize, lo: f64, hi: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p1 = random_mixture(&mut rng, vec![bin("X", n), bin("Y", m)], 2, lo, hi);
    let p2 = random_mixture(&mut rng, vec![bin("Y", m)], 2, lo, hi);
    let r = eliminate_discrete_atom(&[p1.clone(), p2.clone()], "Y", &LveConfig::default()).unwrap();
    total_variation(&r.marginal_pmf("X").unwrap(), &oracle_marginal(&[p1, p2], "X")).unwrap()
}

#[test]
fn two_atom_small_population() {
    for s in 0..10 {
        let tv = two_atom_tv(5, 5, 0.05, 0.95, s);
        assert!(tv <= 0.08, "seed {s}: {tv}");
    }
}

#[test]
fn two_atom_large_population() {
    for s in 0..10 {
        let tv = two_atom_tv(40, 40, 0.2, 0.8, s);
        assert!(tv <= 0.02, "seed {s}: {tv}");
    }
}

#[test]
fn binomial_product_normal() {
    let a = IidMixture::single(vec![bin("Y", 100)], vec![AtomFactor::bernoulli(0.3)]).unwrap();
    let b = IidMixture::single(vec![bin("Y", 100)], vec![AtomFactor::bernoulli(0.5)]).unwrap();
    let r = multiply_discrete_potentials(&a, &b, &LveConfig::default()).unwrap();
    assert_eq!(r.k(), 1);
    let moment = multiply_discrete_potentials(&a, &b, &LveConfig { normal_mode: NormalMode::Moment, ..Default::default() }).unwrap();
    let got = r.marginal_pmf("Y").unwrap();
    let pa = a.marginal_pmf("Y").unwrap();
    let pb = b.marginal_pmf("Y").unwrap();
    let prod: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
    let z: f64 = prod.iter().sum();
    let exact: Vec<f64> = prod.iter().map(|x| x / z).collect();
    let tv = total_variation(&got, &exact).unwrap();
    assert!(tv <= 0.02, "{tv}");
    // Precision-weighted mean.
    let (v1, v2) = (100.0 * 0.3 * 0.7, 100.0 * 0.25);
    let mean = (30.0 / v1 + 50.0 / v2) / (1.0 / v1 + 1.0 / v2);
    if let AtomFactor::CountNormal { mean: m, .. } = &moment.components()[0].factors[0] {
        assert!((m[0] - mean).abs() < 1e-9);
    } else {
        panic!("expected a Normal factor");
    }
}

#[test]
fn uniform_multiplier_keeps_component_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p1 = random_mixture(&mut rng, vec![bin("Y", 30)], 3, 0.2, 0.8);
    let u = IidMixture::single(vec![bin("Y", 30)], vec![AtomFactor::bernoulli(0.5)]).unwrap();
    let r = multiply_discrete_potentials(&p1, &u, &LveConfig::default()).unwrap();
    assert_eq!(r.k(), 3);
}

#[test]
fn square_then_eliminate() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p1 = random_mixture(&mut rng, vec![bin("X", 40), bin("Y", 40)], 2, 0.2, 0.8);
    let sq = multiply_discrete_potentials(&p1, &p1, &LveConfig::default()).unwrap();
    let r = eliminate_discrete_atom(&[sq], "Y", &LveConfig::default()).unwrap();
    let t = mixture_mass_table(&p1).unwrap();
    let sq_t = HistTable::from_log_fn(t.atoms().to_vec(), |h| 2.0 * t.log_value(h)).unwrap();
    let exact = exact_query(&[sq_t], &["X"], &OracleConfig::default()).unwrap().probs;
    let tv = total_variation(&r.marginal_pmf("X").unwrap(), &exact).unwrap();
    assert!(tv <= 0.03, "{tv}");
}

fn chain(n: usize, seed: u64) -> (VariationalModel, Vec<IidMixture>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g1 = random_mixture(&mut rng, vec![bin("X", n), bin("Y", n)], 2, 0.2, 0.8);
    let g2 = random_mixture(&mut rng, vec![bin("Y", n), bin("Z", n)], 2, 0.2, 0.8);
    let m = VariationalModel::new(
        vec![Atom::binary("X", n), Atom::binary("Y", n), Atom::binary("Z", n)],
        vec![VariationalPotential::new("g1", g1.clone()), VariationalPotential::new("g2", g2.clone())],
    )
    .unwrap();
    (m, vec![g1, g2])
}

#[test]
fn chain_small_vs_full_enumeration() {
    for s in 0..5 {
        let (m, _) = chain(5, s);
        let r = latent_variable_elimination(&m, &["X"], &[], &LveConfig::default()).unwrap();
        let mut rhm = lrvi::model::Rhm::new();
        for a in m.atoms.values() {
            rhm.add_atom(a.clone()).unwrap();
        }
        for p in &m.potentials {
            let atoms: Vec<Atom> = p.mixture.atoms().iter().map(|a| a.to_atom()).collect();
            let refs: Vec<&Atom> = atoms.iter().collect();
            rhm.add_parfactor(lrvi::model::Parfactor::simple(
                p.name.clone(),
                &refs,
                lrvi::model::Potential::Variational(p.mixture.clone()),
            ))
            .unwrap();
        }
        let full = enumerate_joint_with(&rhm, &OracleConfig { force_ground: true, ..Default::default() }).unwrap();
        let exact = exact_marginal(&full, &["X"]).unwrap().probs;
        let tv = total_variation(&r.marginal.marginal_pmf("X").unwrap(), &exact).unwrap();
        assert!(tv <= 0.1, "seed {s}: {tv}");
        // The histogram-space oracle agrees with ground enumeration.
        let hist = exact_marginal(&enumerate_joint(&rhm).unwrap(), &["X"]).unwrap().probs;
        assert!(total_variation(&hist, &exact).unwrap() < 1e-9);
    }
}

#[test]
fn chain_large_vs_histogram_sum() {
    for s in 0..5 {
        let (m, pots) = chain(40, s);
        let r = latent_variable_elimination(&m, &["X"], &[], &LveConfig::default()).unwrap();
        let exact = oracle_marginal(&pots, "X");
        let tv = total_variation(&r.marginal.marginal_pmf("X").unwrap(), &exact).unwrap();
        assert!(tv <= 0.03, "seed {s}: {tv}");
        let order = LveConfig { order: Some(vec!["Y".into(), "Z".into()]), ..Default::default() };
        let r2 = latent_variable_elimination(&m, &["X"], &[], &order).unwrap();
        let tv2 = total_variation(&r.marginal.marginal_pmf("X").unwrap(), &r2.marginal.marginal_pmf("X").unwrap()).unwrap();
        assert!(tv2 <= 0.05, "order sensitivity {tv2}");
    }
}

#[test]
fn collapse_sixteen_to_four() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = random_mixture(&mut rng, vec![bin("X", 30)], 16, 0.05, 0.95);
    let c = collapse_mixture(&m, 4);
    assert_eq!(c.k(), 4);
    assert!((c.log_mass() - m.log_mass()).abs() < 1e-12);
    assert!((c.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let tv = total_variation(&m.marginal_pmf("X").unwrap(), &c.marginal_pmf("X").unwrap()).unwrap();
    assert!(tv <= 0.05, "{tv}");
    let atom = &m.atoms()[0];
    let mean = |m: &IidMixture| -> f64 {
        m.components().iter().map(|c| c.weight * c.factors[0].count_moments(atom).unwrap().0[0]).sum()
    };
    assert!((mean(&m) - mean(&c)).abs() < 1e-9);
}

fn cont(name: &str, n: usize) -> MixtureAtom {
    MixtureAtom { name: name.into(), population: n, domain: AtomDomain::continuous() }
}

#[test]
fn disjoint_supports_vanish() {
    let k = |c: f64| AtomFactor::Kde(Kde::new(vec![c], 1.0).unwrap());
    let p1 = IidMixture::from_log_weights(vec![cont("Y", 1)], vec![(0.0, vec![k(-100.0)]), (0.0, vec![k(100.0)])], 0.0).unwrap();
    let r = multiply_continuous_potentials(&p1, &p1, &LveConfig::default()).unwrap();
    // Cross pairs underflow and are dropped, or survive with negligible weight.
    let mut w = r.weights();
    w.sort_by(|a, b| a.total_cmp(b));
    if w.len() == 4 {
        assert!(w[1] < 1e-12 * w[3]);
    } else {
        assert_eq!(w.len(), 2);
    }
}

#[test]
fn wide_kernel_multiplier() {
    let k1 = Kde::weighted(vec![-1.0, 0.5, 2.0], vec![0.3, 0.3, 0.4], 0.5).unwrap();
    let p1 = IidMixture::single(vec![cont("Y", 1)], vec![AtomFactor::Kde(k1)]).unwrap();
    let p2 = IidMixture::single(vec![cont("Y", 1)], vec![AtomFactor::Kde(Kde::new(vec![0.0], 1e4).unwrap())]).unwrap();
    let r = multiply_continuous_potentials(&p1, &p2, &LveConfig::default()).unwrap();
    for i in 0..21 {
        let x = -3.0 + 0.3 * i as f64;
        let a = rv_density(&p1, "Y", x).unwrap();
        let b = rv_density(&r, "Y", x).unwrap();
        assert!((a - b).abs() <= 0.02 * a.max(1e-3), "x={x}: {a} vs {b}");
    }
}

#[test]
fn product_then_integrate_matches_quadrature() {
    let k1 = Kde::weighted(vec![-1.0, 0.5], vec![0.4, 0.6], 0.7).unwrap();
    let k2 = Kde::weighted(vec![0.0, 1.5, 3.0], vec![0.2, 0.5, 0.3], 0.4).unwrap();
    let p1 = IidMixture::single(vec![cont("Y", 1)], vec![AtomFactor::Kde(k1.clone())]).unwrap();
    let p2 = IidMixture::single(vec![cont("Y", 1)], vec![AtomFactor::Kde(k2.clone())]).unwrap();
    let r = multiply_continuous_potentials(&p1, &p2, &LveConfig::default()).unwrap();
    let f = |x: &[f64]| oracle_kde_density(&k1, x[0]) * oracle_kde_density(&k2, x[0]);
    let q = grid_quadrature(&f, &GridSpec { bounds: vec![(-10.0, 12.0)], points: 4001 }).unwrap();
    assert!((r.log_mass().exp() - q.z).abs() < 1e-3);
}

#[test]
fn two_mode_elimination_vs_quadrature() {
    // p1(X, Y) with two modes, p2(Y) a two-component KDE mixture; one rv each.
    let k = |c: &[f64], b: f64| AtomFactor::Kde(Kde::new(c.to_vec(), b).unwrap());
    let p1 = IidMixture::from_log_weights(
        vec![cont("X", 1), cont("Y", 2)],
        vec![
            (0.4f64.ln(), vec![k(&[-2.0, -1.5], 0.5), k(&[-1.0], 0.6)]),
            (0.6f64.ln(), vec![k(&[2.0], 0.5), k(&[1.0, 1.4], 0.5)]),
        ],
        0.0,
    )
    .unwrap();
    let p2 = IidMixture::from_log_weights(
        vec![cont("Y", 2)],
        vec![(0.5f64.ln(), vec![k(&[-0.5], 0.8)]), (0.5f64.ln(), vec![k(&[1.5], 0.8)])],
        0.0,
    )
    .unwrap();
    let r = eliminate_continuous_atom(&[p1.clone(), p2.clone()], "Y", &LveConfig::default()).unwrap();
    // Oracle: weight of pair (l, l') is w w' (∫ f f' dy)^2, a 2-rv quadrature.
    let mut want = Vec::new();
    for c1 in p1.components() {
        for c2 in p2.components() {
            let (AtomFactor::Kde(a), AtomFactor::Kde(b)) = (&c1.factors[1], &c2.factors[0]) else { panic!() };
            let f = |y: &[f64]| {
                oracle_kde_density(a, y[0]) * oracle_kde_density(b, y[0]) * oracle_kde_density(a, y[1]) * oracle_kde_density(b, y[1])
            };
            let q = grid_quadrature(&f, &GridSpec { bounds: vec![(-8.0, 8.0); 2], points: 401 }).unwrap();
            want.push(c1.weight * c2.weight * q.z);
        }
    }
    let z: f64 = want.iter().sum();
    let got = r.weights();
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w / z).abs() <= 0.05 * (w / z), "{g} vs {}", w / z);
    }
    let _ = HistogramSpace::new(2, 1);
}
