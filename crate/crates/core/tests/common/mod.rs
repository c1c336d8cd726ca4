//! Seeded property suites shared by the `properties` and `acceptance` targets.
#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

use lrvi::bounds::{lemma1_bound, lemma3_bound, theorem4_bound, AtomExtension};
use lrvi::cli::format::ModelFile;
use lrvi::cli::pipeline::lift_ground_table;
use lrvi::continuous::{fit_kde_mixture, KdeFitConfig, SampleSet};
use lrvi::discrete::{fit_mixture_discrete, FitReport};
use lrvi::lve::{eliminate_discrete_atom, multiply_discrete_potentials, LveConfig};
use lrvi::math::log_sum_exp;
use lrvi::mixture::{AtomFactor, IidMixture, MixtureAtom};
use lrvi::model::{Atom, AtomDomain, HistTable, HistogramSpace, ParametricDensity, Parfactor, Potential, Rhm};
use lrvi::oracle::{enumerate_joint, exact_marginal, exact_query, mass_tables, mixture_mass_table, OracleConfig};

type Outcome = Result<(), TestCaseError>;

pub type Suite = fn() -> Result<(), String>;

pub const SUITES: &[(&str, Suite)] = &[
    ("discrete_em_is_monotone", discrete_em_is_monotone),
    ("kde_em_is_monotone", kde_em_is_monotone),
    ("products_and_eliminations_stay_mixtures", products_and_eliminations_stay_mixtures),
    ("mixture_mass_is_conserved", mixture_mass_is_conserved),
    ("ground_and_histogram_oracles_agree", ground_and_histogram_oracles_agree),
    ("lemma1_is_monotone", lemma1_is_monotone),
    ("lemma3_adds_atom_terms", lemma3_adds_atom_terms),
    ("theorem4_is_additive", theorem4_is_additive),
    ("model_files_round_trip", model_files_round_trip),
    ("hist_tables_round_trip", hist_tables_round_trip),
];

/// Runs a property with a fixed-seed generator, so failures reproduce exactly.
fn check<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Outcome) -> Result<(), String> {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn bin(name: &str, n: usize) -> MixtureAtom {
    MixtureAtom {
        name: name.into(),
        population: n,
        domain: AtomDomain::Binary,
    }
}

fn runs_nondecreasing(r: &FitReport) -> Outcome {
    let mut ends = r.run_starts[1..].to_vec();
    ends.push(r.log_likelihood_trace.len());
    for (&s, &e) in r.run_starts.iter().zip(&ends) {
        for w in r.log_likelihood_trace[s..e].windows(2) {
            let slack = 1e-8 * w[0].abs().max(1.0);
            prop_assert!(w[1] >= w[0] - slack, "log-likelihood fell from {} to {}", w[0], w[1]);
        }
    }
    Ok(())
}

/// Mixture over the given atoms from weights and per-component success
/// probabilities.
fn mixture(atoms: Vec<MixtureAtom>, comps: &[(f64, Vec<f64>)]) -> IidMixture {
    let parts = comps
        .iter()
        .map(|(w, ps)| (w.ln(), ps.iter().map(|&p| AtomFactor::bernoulli(p)).collect()))
        .collect();
    IidMixture::from_log_weights(atoms, parts, 0.0).unwrap()
}

fn comps(k: usize, atoms: usize) -> impl Strategy<Value = Vec<(f64, Vec<f64>)>> {
    prop::collection::vec((0.1f64..1.0, prop::collection::vec(0.05f64..0.95, atoms)), 1..=k)
}

pub fn discrete_em_is_monotone() -> Result<(), String> {
    let s = (3usize..12, prop::collection::vec(-3.0f64..3.0, 12), 0u64..1000);
    check(24, s, |(n, logs, seed)| {
        let atom = Atom::binary("x", n);
        let t = HistTable::from_log_fn(vec![atom], |h| logs[h[0].counts()[1]]).unwrap();
        let (m, r) = fit_mixture_discrete(&t, 1e-6, 4, seed).unwrap();
        runs_nondecreasing(&r)?;
        prop_assert!((m.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        Ok(())
    })
}

pub fn kde_em_is_monotone() -> Result<(), String> {
    check(24, (1.0f64..6.0, 0u64..1000), |(shift, seed)| {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let atom = MixtureAtom {
            name: "x".into(),
            population: 2,
            domain: AtomDomain::continuous(),
        };
        let rows: Vec<Vec<f64>> = (0..300)
            .map(|i| {
                let c = if i % 2 == 0 { -shift } else { shift };
                let d = Normal::new(c, 1.0).unwrap();
                vec![d.sample(&mut rng), d.sample(&mut rng)]
            })
            .collect();
        let set = SampleSet::new(vec![atom], rows).unwrap();
        let (m, r) = fit_kde_mixture(&set, 1e-3, 3, seed, &KdeFitConfig::default()).unwrap();
        runs_nondecreasing(&r)?;
        prop_assert!((m.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        Ok(())
    })
}

pub fn products_and_eliminations_stay_mixtures() -> Result<(), String> {
    check(24, (2usize..30, 2usize..30, comps(3, 2), comps(3, 1)), |(n, m, c1, c2)| {
        let p1 = mixture(vec![bin("X", n), bin("Y", m)], &c1);
        let p2 = mixture(vec![bin("Y", m)], &c2);
        let cfg = LveConfig::default();
        let prod = multiply_discrete_potentials(&p1, &p2, &cfg).unwrap();
        prop_assert!(prod.validate().is_ok());
        prop_assert!(prod.k() <= p1.k() * p2.k());
        prop_assert_eq!(prod.atoms().len(), 2);
        let e = eliminate_discrete_atom(&[p1, p2], "Y", &cfg).unwrap();
        prop_assert!(e.validate().is_ok());
        prop_assert_eq!(e.atoms().len(), 1);
        prop_assert_eq!(&e.atoms()[0].name, "X");
        prop_assert!((e.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let pmf = e.marginal_pmf("X").unwrap();
        prop_assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        Ok(())
    })
}

pub fn mixture_mass_is_conserved() -> Result<(), String> {
    check(24, (1usize..9, 1usize..9, comps(3, 2), -5.0f64..5.0), |(n, m, c, log_mass)| {
        let base = mixture(vec![bin("X", n), bin("Y", m)], &c);
        let mx = IidMixture::from_log_weights(
            base.atoms().to_vec(),
            base.components().iter().map(|c| (c.weight.ln(), c.factors.clone())).collect(),
            log_mass,
        )
        .unwrap();
        let t = mixture_mass_table(&mx).unwrap();
        // Entries are log masses of whole histogram classes.
        let total = log_sum_exp(&t.entries().map(|(_, v)| v).collect::<Vec<_>>());
        prop_assert!((total - mx.log_mass()).abs() < 1e-9, "{} vs {}", total, mx.log_mass());
        let marginal = exact_query(&[t], &["X"], &OracleConfig::default()).unwrap();
        prop_assert!((marginal.total() - 1.0).abs() < 1e-9);
        let direct = mx.marginal_pmf("X").unwrap();
        for (a, b) in marginal.probs.iter().zip(&direct) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        Ok(())
    })
}

pub fn ground_and_histogram_oracles_agree() -> Result<(), String> {
    let s = (
        1usize..5,
        1usize..4,
        prop::collection::vec(0.1f64..3.0, 4),
        prop::collection::vec(0.1f64..3.0, 2),
    );
    check(24, s, |(n, m, pair, single)| {
        let x = Atom::binary("X", n);
        let y = Atom::binary("Y", m);
        let mut rhm = Rhm::new();
        rhm.add_atom(x.clone()).unwrap();
        rhm.add_atom(y.clone()).unwrap();
        let pair = Parfactor::simple("pair", &[&x, &y], Potential::Parametric(ParametricDensity::GroundTable { values: pair }));
        let single = Parfactor::simple("single", &[&y], Potential::Parametric(ParametricDensity::GroundTable { values: single }));
        let mut hist = rhm.clone();
        rhm.add_parfactor(pair.clone()).unwrap();
        rhm.add_parfactor(single.clone()).unwrap();
        let ground = enumerate_joint(&rhm).unwrap();
        let lifted_pair = lift_ground_table(&pair, &[x.clone(), y.clone()]).unwrap();
        let lifted_single = lift_ground_table(&single, &[y.clone()]).unwrap();
        hist.add_parfactor(Parfactor::simple("pair", &[&x, &y], Potential::HistTable(lifted_pair))).unwrap();
        hist.add_parfactor(Parfactor::simple("single", &[&y], Potential::HistTable(lifted_single))).unwrap();
        let lifted = exact_query(&mass_tables(&hist).unwrap(), &["X", "Y"], &OracleConfig::default()).unwrap();
        prop_assert!((ground.log_z - lifted.log_z).abs() < 1e-9);
        for q in ["X", "Y"] {
            let a = exact_marginal(&ground, &[q]).unwrap();
            let b = exact_marginal(&lifted, &[q]).unwrap();
            for (u, v) in a.probs.iter().zip(&b.probs) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }
        Ok(())
    })
}

pub fn lemma1_is_monotone() -> Result<(), String> {
    check(200, (1usize..50, 1usize..500, 1usize..100, 2usize..6), |(n, extra, step, d)| {
        let n_bar = n + extra;
        let a = lemma1_bound(n, &AtomExtension::discrete(n_bar, d)).unwrap();
        let b = lemma1_bound(n, &AtomExtension::discrete(n_bar + step, d)).unwrap();
        prop_assert!(b.value <= a.value);
        if n + 1 < n_bar {
            let c = lemma1_bound(n + 1, &AtomExtension::discrete(n_bar, d)).unwrap();
            prop_assert!(c.value >= a.value);
        }
        let ca = lemma1_bound(n, &AtomExtension::continuous(n_bar)).unwrap();
        let cb = lemma1_bound(n, &AtomExtension::continuous(n_bar + step)).unwrap();
        prop_assert!(cb.value <= ca.value);
        Ok(())
    })
}

pub fn lemma3_adds_atom_terms() -> Result<(), String> {
    let s = (1usize..40, 1usize..40, 1usize..400, 1usize..400, any::<(bool, bool)>());
    check(200, s, |(n, m, ex, ey, cont)| {
        let ext = |k: usize, e: usize, c: bool| {
            if c {
                AtomExtension::continuous(k + e)
            } else {
                AtomExtension::discrete(k + e, 2)
            }
        };
        let (x, y) = (ext(n, ex, cont.0), ext(m, ey, cont.1));
        let joint = lemma3_bound(n, m, &x, &y).unwrap();
        let sum = lemma1_bound(n, &x).unwrap().value + lemma1_bound(m, &y).unwrap().value;
        prop_assert!((joint.value - sum).abs() <= 1e-12 * sum.max(1.0));
        Ok(())
    })
}

pub fn theorem4_is_additive() -> Result<(), String> {
    let s = (prop::collection::vec(0.0f64..1.0, 0..8), 0.0f64..1.0, 0.1f64..10.0);
    check(200, s, |(eps, more, z)| {
        let a = theorem4_bound(&eps, None).unwrap();
        let mut longer = eps.clone();
        longer.push(more);
        let b = theorem4_bound(&longer, None).unwrap();
        prop_assert!((b.value - a.value - more).abs() < 1e-12);
        let nz = theorem4_bound(&eps, Some(z)).unwrap();
        prop_assert!((nz.value - a.value / z).abs() < 1e-12);
        Ok(())
    })
}

#[derive(Debug, Clone)]
struct Spec {
    atoms: Vec<(String, u8, usize)>,
    tables: Vec<(usize, Vec<f64>)>,
}

fn spec() -> impl Strategy<Value = Spec> {
    prop::collection::vec((0u8..3, 1usize..6), 1..4).prop_flat_map(|kinds| {
        let atoms: Vec<(String, u8, usize)> = kinds.iter().enumerate().map(|(i, &(k, n))| (format!("a{i}"), k, n)).collect();
        let discrete: Vec<usize> = atoms.iter().enumerate().filter(|(_, a)| a.1 < 2).map(|(i, _)| i).collect();
        let arity: Vec<usize> = atoms.iter().map(|a| if a.1 == 0 { 2 } else { 3 }).collect();
        let picks = if discrete.is_empty() {
            Just(Vec::new()).boxed()
        } else {
            let d = discrete.clone();
            prop::collection::vec(prop::sample::select(d), 0..3)
                .prop_flat_map(move |ids| {
                    let arity = arity.clone();
                    ids.into_iter()
                        .map(|i| (Just(i), prop::collection::vec(0.01f64..5.0, arity[i])))
                        .collect::<Vec<_>>()
                })
                .boxed()
        };
        (Just(atoms), picks).prop_map(|(atoms, tables)| Spec { atoms, tables })
    })
}

fn render(s: &Spec) -> String {
    let mut t = String::from("ATOMS\n");
    for (name, kind, n) in &s.atoms {
        t += &match kind {
            0 => format!("{name} binary {n}\n"),
            1 => format!("{name} categorical 3 {n}\n"),
            _ => format!("{name} continuous {n} -4 4\n"),
        };
    }
    t += "PARFACTORS\n";
    for (j, (i, vals)) in s.tables.iter().enumerate() {
        let v: Vec<String> = vals.iter().map(|x| x.to_string()).collect();
        t += &format!("g{j} {} : ground-table {}\n", s.atoms[*i].0, v.join(" "));
    }
    for (i, (name, kind, _)) in s.atoms.iter().enumerate() {
        if *kind == 2 {
            t += &format!("c{i} {name} : gaussian 0.5 2\n");
        }
    }
    t
}

pub fn model_files_round_trip() -> Result<(), String> {
    check(64, spec(), |s| {
        let m = ModelFile::parse(&render(&s)).unwrap();
        let text = m.to_text().unwrap();
        let again = ModelFile::parse(&text).unwrap();
        prop_assert_eq!(&m, &again);
        prop_assert_eq!(&text, &again.to_text().unwrap());
        prop_assert_eq!(&m, &ModelFile::parse(&m.to_json()).unwrap());
        Ok(())
    })
}

pub fn hist_tables_round_trip() -> Result<(), String> {
    check(64, (1usize..6, prop::collection::vec(-4.0f64..4.0, 6)), |(n, logs)| {
        let atom = Atom::binary("x", n);
        let t = HistTable::from_log_fn(vec![atom.clone()], |h| logs[h[0].counts()[1]]).unwrap();
        let mut m = ModelFile {
            atoms: vec![atom.clone()],
            ..Default::default()
        };
        m.parfactors.push(Parfactor::simple("t", &[&atom], Potential::HistTable(t)));
        let again = ModelFile::parse(&m.to_text().unwrap()).unwrap();
        prop_assert_eq!(&m, &again);
        prop_assert_eq!(HistogramSpace::new(2, n).len(), n + 1);
        Ok(())
    })
}
