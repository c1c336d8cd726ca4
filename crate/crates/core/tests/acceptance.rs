//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lrvi::bounds::{check_extendibility, lemma1_bound, marginalize_counts, AtomExtension};
use lrvi::cli::bench::{bench_job_house, run_bench, BenchSpec, Family};
use lrvi::cli::synthetic::{compare_elimination, generate, SyntheticSpec};
use lrvi::continuous::Kde;
use lrvi::discrete::{fit_mixture_discrete, total_variation};
use lrvi::lve::{
    eliminate_continuous_atom, latent_variable_elimination, log_binomial_coefficient, rv_density, LveConfig,
    VariationalModel, VariationalPotential,
};
use lrvi::math::log_sum_exp;
use lrvi::mcmc::{job_house_model, run_ground_mcmc, run_lifted_mcmc, McmcConfig, RvQuery};
use lrvi::mixture::{AtomFactor, IidMixture, MixtureAtom};
use lrvi::model::{Atom, AtomDomain, HistTable};
use lrvi::oracle::{exact_query, grid_quadrature, mixture_mass_table, oracle_kde_density, GridSpec, OracleConfig};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }
}

fn mixture_atom(name: &str, n: usize, domain: AtomDomain) -> MixtureAtom {
    MixtureAtom {
        name: name.into(),
        population: n,
        domain,
    }
}

fn workshops() -> Verdict {
    const PEOPLE: usize = 50;
    const HOT: usize = 5;
    let start = Instant::now();
    let atom = Atom::binary("attends", PEOPLE);
    let (mut k1, mut k3) = (0, 0);
    let mut worst3 = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lp = [[0.0f64; 2]; 2];
        lp.iter_mut().flatten().for_each(|v| *v = rng.random_range(-1.0..1.0));
        // Ground product over attends(x) and hot(w), summed over hot valuations
        // grouped by their count of hot workshops.
        let table = HistTable::from_log_fn(vec![atom.clone()], |h| {
            let a = h[0].counts();
            let terms: Vec<f64> = (0..=HOT)
                .map(|t| {
                    let hot = [HOT - t, t];
                    let mut s = log_binomial_coefficient(HOT, t);
                    for i in 0..2 {
                        for j in 0..2 {
                            s += lp[i][j] * (a[i] * hot[j]) as f64;
                        }
                    }
                    s
                })
                .collect();
            log_sum_exp(&terms)
        })
        .unwrap();
        let (_, one) = fit_mixture_discrete(&table, 1e-3, 1, seed).unwrap();
        let (_, three) = fit_mixture_discrete(&table, 5e-4, 3, seed).unwrap();
        k1 += (one.achieved_tv < 1e-3) as usize;
        k3 += (three.achieved_tv < 5e-4) as usize;
        worst3 = worst3.max(three.achieved_tv);
    }
    let secs = start.elapsed().as_secs_f64();
    Verdict::new(
        k1 >= 40 && k3 == 50 && secs <= 60.0,
        format!("k=1 TV<1e-3 in {k1}/50, k<=3 TV<5e-4 in {k3}/50 (worst {worst3:.2e}), {secs:.1}s"),
    )
}

fn random_pair_mixture(rng: &mut ChaCha8Rng, atoms: Vec<MixtureAtom>) -> IidMixture {
    let k = rng.random_range(1..=3);
    let parts = (0..k)
        .map(|_| {
            let w: f64 = rng.random_range(0.2..1.0);
            let fs = atoms.iter().map(|_| AtomFactor::bernoulli(rng.random_range(0.1..0.9))).collect();
            (w.ln(), fs)
        })
        .collect();
    IidMixture::from_log_weights(atoms, parts, 0.0).unwrap()
}

/// Worst query TV over 50 chain/star models with populations in `lo..=hi`.
fn chain_star_worst(lo: usize, hi: usize) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let na = rng.random_range(3..=4);
        let star = rng.random_bool(0.5);
        let names: Vec<String> = (0..na).map(|i| format!("A{i}")).collect();
        let pops: Vec<usize> = (0..na).map(|_| rng.random_range(lo..=hi)).collect();
        let edges: Vec<(usize, usize)> = if star {
            (1..na).map(|i| (0, i)).collect()
        } else {
            (1..na).map(|i| (i - 1, i)).collect()
        };
        let pots: Vec<VariationalPotential> = edges
            .iter()
            .enumerate()
            .map(|(e, &(a, b))| {
                let atoms = vec![
                    mixture_atom(&names[a], pops[a], AtomDomain::Binary),
                    mixture_atom(&names[b], pops[b], AtomDomain::Binary),
                ];
                VariationalPotential::new(format!("g{e}"), random_pair_mixture(&mut rng, atoms))
            })
            .collect();
        let atoms: Vec<Atom> = (0..na).map(|i| Atom::binary(names[i].clone(), pops[i])).collect();
        let tables: Vec<HistTable> = pots.iter().map(|p| mixture_mass_table(&p.mixture).unwrap()).collect();
        let model = VariationalModel::new(atoms, pots).unwrap();
        for q in &names {
            let r = latent_variable_elimination(&model, &[q], &[], &LveConfig::default()).unwrap();
            let exact = exact_query(&tables, &[q], &OracleConfig::default()).unwrap().probs;
            worst = worst.max(total_variation(&r.marginal.marginal_pmf(q).unwrap(), &exact).unwrap());
        }
    }
    worst
}

fn chain_star() -> Verdict {
    let start = Instant::now();
    let large = chain_star_worst(30, 50);
    let small = chain_star_worst(5, 8);
    let secs = start.elapsed().as_secs_f64();
    Verdict::new(
        large <= 0.03 && small <= 0.10 && secs <= 120.0,
        format!("worst TV {large:.4} at n=30-50, {small:.4} at n=5-8, {secs:.1}s"),
    )
}

fn random_kde(rng: &mut ChaCha8Rng) -> Kde {
    let centers = (0..rng.random_range(1..=2)).map(|_| rng.random_range(-2.5..2.5)).collect();
    Kde::new(centers, rng.random_range(0.4..1.0)).unwrap()
}

fn kde_of(f: &AtomFactor) -> &Kde {
    match f {
        AtomFactor::Kde(k) => k,
        other => panic!("expected a KDE factor, got {}", other.kind()),
    }
}

/// Integral of `f` over `dims` rvs on [-10, 10].
fn integrate(dims: usize, f: &dyn Fn(&[f64]) -> f64) -> f64 {
    match dims {
        0 => f(&[]),
        1 => grid_quadrature(f, &GridSpec { bounds: vec![(-10.0, 10.0)], points: 1601 }).unwrap().z,
        2 => grid_quadrature(f, &GridSpec { bounds: vec![(-10.0, 10.0); 2], points: 401 }).unwrap().z,
        _ => unreachable!("at most two rvs"),
    }
}

fn continuous_model(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nx, ny) = (rng.random_range(1..=2), rng.random_range(1..=2));
    let cont = AtomDomain::continuous();
    let mut comps = |atoms: usize| -> Vec<(f64, Vec<AtomFactor>)> {
        (0..rng.random_range(1..=2))
            .map(|_| {
                let w: f64 = rng.random_range(0.2..1.0);
                (w.ln(), (0..atoms).map(|_| AtomFactor::Kde(random_kde(&mut rng))).collect())
            })
            .collect()
    };
    let (c1, c2) = (comps(2), comps(1));
    let p1 = IidMixture::from_log_weights(
        vec![mixture_atom("X", nx, cont.clone()), mixture_atom("Y", ny, cont.clone())],
        c1,
        0.0,
    )
    .unwrap();
    let p2 = IidMixture::from_log_weights(vec![mixture_atom("Y", ny, cont)], c2, 0.0).unwrap();
    let r = eliminate_continuous_atom(&[p1.clone(), p2.clone()], "Y", &LveConfig::default()).unwrap();

    // Pair (l, l') survives with weight w w' (∫ f f' dy)^ny.
    let mut want = Vec::new();
    for a in p1.components() {
        for b in p2.components() {
            let (fa, fb) = (kde_of(&a.factors[1]), kde_of(&b.factors[0]));
            let f = |y: &[f64]| y.iter().map(|&v| oracle_kde_density(fa, v) * oracle_kde_density(fb, v)).product::<f64>();
            want.push(a.weight * b.weight * integrate(ny, &f));
        }
    }
    let z: f64 = want.iter().sum();
    let got = r.weights();
    let weight_err = if got.len() != want.len() {
        f64::INFINITY
    } else {
        got.iter().zip(&want).map(|(g, w)| (g - w / z).abs() / (w / z)).fold(0.0, f64::max)
    };

    // Density of one X rv: integrate the ground joint over the other rvs when
    // that takes at most two axes, else use the pair weights.
    let joint = |x0: f64, rest: &[f64]| -> f64 {
        let (xs, ys) = rest.split_at(nx - 1);
        let p1v: f64 = p1
            .components()
            .iter()
            .map(|c| {
                let (fx, fy) = (kde_of(&c.factors[0]), kde_of(&c.factors[1]));
                c.weight
                    * oracle_kde_density(fx, x0)
                    * xs.iter().map(|&v| oracle_kde_density(fx, v)).product::<f64>()
                    * ys.iter().map(|&v| oracle_kde_density(fy, v)).product::<f64>()
            })
            .sum();
        let p2v: f64 = p2
            .components()
            .iter()
            .map(|c| c.weight * ys.iter().map(|&v| oracle_kde_density(kde_of(&c.factors[0]), v)).product::<f64>())
            .sum();
        p1v * p2v
    };
    let centers: Vec<f64> = p1.components().iter().flat_map(|c| kde_of(&c.factors[0]).centers().to_vec()).collect();
    let lo = centers.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;
    let hi = centers.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    let points: Vec<f64> = (0..11).map(|i| lo + (hi - lo) * i as f64 / 10.0).collect();
    let rest = nx - 1 + ny;
    let oracle: Vec<f64> = if rest <= 2 {
        // The joint integrates to the sum of the pair masses.
        let total = z;
        points.iter().map(|&x| integrate(rest, &|r: &[f64]| joint(x, r)) / total).collect()
    } else {
        let pairs: Vec<&Kde> = p1
            .components()
            .iter()
            .flat_map(|a| std::iter::repeat(kde_of(&a.factors[0])).take(p2.k()))
            .collect();
        points
            .iter()
            .map(|&x| pairs.iter().zip(&want).map(|(k, w)| w / z * oracle_kde_density(k, x)).sum())
            .collect()
    };
    let density_err = points
        .iter()
        .zip(&oracle)
        .map(|(&x, o)| (rv_density(&r, "X", x).unwrap() - o).abs() / o)
        .fold(0.0, f64::max);
    (weight_err, density_err)
}

fn continuous_elimination() -> Verdict {
    let (mut worst_w, mut worst_d) = (0.0f64, 0.0f64);
    for seed in 0..20 {
        let (w, d) = continuous_model(seed);
        worst_w = worst_w.max(w);
        worst_d = worst_d.max(d);
    }
    Verdict::new(
        worst_w <= 0.05 && worst_d <= 0.02,
        format!("worst relative weight error {worst_w:.2e}, worst relative density error {worst_d:.2e}"),
    )
}

fn extendibility_bound() -> Verdict {
    const N: usize = 10;
    let atom = Atom::binary("x", N);
    let (mut within, mut certified) = (0, 0);
    let mut worst_ratio = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_bar = [20, 50, 100][seed as usize % 3];
        // Random exchangeable law over n_bar rvs: a few bumps in the count of ones.
        let mut p_bar: Vec<f64> = (0..=n_bar).map(|_| rng.random_range(0.0..0.05)).collect();
        for _ in 0..rng.random_range(1..=3) {
            let c = rng.random_range(0..=n_bar);
            p_bar[c] += rng.random_range(0.5..2.0);
        }
        let s: f64 = p_bar.iter().sum();
        p_bar.iter_mut().for_each(|p| *p /= s);
        let counts = marginalize_counts(&p_bar, N).unwrap();
        let table = HistTable::from_log_fn(vec![atom.clone()], |h| {
            let ones = h[0].counts()[1];
            counts[ones].ln() - log_binomial_coefficient(N, ones)
        })
        .unwrap();
        let bound = lemma1_bound(N, &AtomExtension::discrete(n_bar, 2)).unwrap().value;
        let (_, report) = fit_mixture_discrete(&table, 1e-3, 3, seed).unwrap();
        within += (report.achieved_tv <= bound) as usize;
        worst_ratio = worst_ratio.max(report.achieved_tv / bound);
        certified += check_extendibility(&table, n_bar).unwrap().feasible as usize;
    }
    let peak = HistTable::from_log_fn(vec![atom], |h| if h[0].counts()[1] == N / 2 { 0.0 } else { -1e4 }).unwrap();
    let peak_rejected = !check_extendibility(&peak, 100).unwrap().feasible;
    Verdict::new(
        within == 100 && certified == 100 && peak_rejected,
        format!(
            "TV within bound {within}/100 (worst TV/bound {worst_ratio:.3}), extendible {certified}/100, single peak infeasible: {peak_rejected}"
        ),
    )
}

fn step_time(houses: usize, lifted: bool) -> f64 {
    let p = bench_job_house(houses);
    let vm = job_house_model(&p).unwrap();
    let q = RvQuery::Cdf { atom: "HP".into(), t: 0.0 };
    let cfg = McmcConfig {
        steps: 20_000,
        burn_in: 0,
        seed: 1,
        keep_trace: false,
        ..Default::default()
    };
    (0..3)
        .map(|_| {
            let r = if lifted {
                run_lifted_mcmc(&vm, &q, &[], &cfg)
            } else {
                run_ground_mcmc(&vm, &q, &[], &cfg)
            };
            r.unwrap().diagnostics.step_time_us
        })
        .fold(f64::INFINITY, f64::min)
}

fn lifted_mcmc() -> Verdict {
    let rows = run_bench(&BenchSpec {
        family: Family::JobHouse,
        sizes: vec![64, 256],
        seeds: (0..10).collect(),
        steps: 100_000,
        burn_in: 1_000,
    })
    .unwrap();
    let err = |method: &str, size: usize| -> Vec<f64> {
        rows.iter().filter(|r| r.method == method && r.size == size).map(|r| r.error).collect()
    };
    let accurate = err("lifted-mcmc", 64).iter().filter(|e| **e <= 0.1).count();
    let beats: Vec<usize> = [64, 256]
        .iter()
        .map(|&m| err("lifted-mcmc", m).iter().zip(err("ground-mcmc", m)).filter(|(l, g)| **l <= *g).count())
        .collect();

    let sizes = [16, 64, 256];
    let lifted: Vec<f64> = sizes.iter().map(|&m| step_time(m, true)).collect();
    let ground: Vec<f64> = sizes.iter().map(|&m| step_time(m, false)).collect();
    let ratio = lifted.iter().cloned().fold(0.0, f64::max) / lifted.iter().cloned().fold(f64::INFINITY, f64::min);
    let ground_grows = ground.windows(2).all(|w| w[1] > w[0]);

    let data = generate(&SyntheticSpec {
        seed: 7,
        ..Default::default()
    })
    .unwrap();
    let c = compare_elimination(&data, 92, 10, 3).unwrap();

    Verdict::new(
        accurate >= 9 && beats.iter().all(|&b| b >= 8) && ratio <= 1.5 && ground_grows && c.speedup() >= 10.0,
        format!(
            "within 10% in {accurate}/10; lifted<=ground {}/10 at m=64, {}/10 at m=256; lifted step us {:.2?} (max/min {ratio:.2}); ground step us {:.2?}; groundwater speedup {:.0}x",
            beats[0],
            beats[1],
            lifted,
            ground,
            c.speedup()
        ),
    )
}

fn cli_is_deterministic() -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let model = dir.path().join("w.lrvi");
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../models/workshops.lrvi"))
        .map_err(|e| e.to_string())?;
    std::fs::write(&model, text).map_err(|e| e.to_string())?;
    let model = model.to_str().unwrap();
    let run = |extra: &[&str]| -> Result<serde_json::Value, String> {
        let mut args = vec!["--seed", "5"];
        args.extend_from_slice(extra);
        args.extend_from_slice(&["infer", model, "--query", "pmf:attends"]);
        let out = Command::new(env!("CARGO_BIN_EXE_lrvi")).args(&args).output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(String::from_utf8_lossy(&out.stdout).into_owned());
        }
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
        Ok(v["result"].clone())
    };
    let (a, b, c) = (run(&[])?, run(&[])?, run(&["--no-cache"])?);
    if a != b || a != c {
        return Err("repeated runs disagree".into());
    }
    Ok(())
}

fn property_suites() -> Verdict {
    let start = Instant::now();
    let mut failed = Vec::new();
    for (name, suite) in common::SUITES {
        if let Err(e) = suite() {
            failed.push(format!("{name}: {e}"));
        }
    }
    if let Err(e) = cli_is_deterministic() {
        failed.push(format!("cli determinism: {e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    let total = common::SUITES.len() + 1;
    Verdict::new(
        failed.is_empty() && secs <= 600.0,
        format!("{}/{total} suites green in {secs:.1}s{}", total - failed.len(), if failed.is_empty() { String::new() } else { format!("; {}", failed.join("; ")) }),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 6] = [
        ("workshops fit", workshops),
        ("lifted VE vs exact", chain_star),
        ("continuous elimination vs quadrature", continuous_elimination),
        ("extendibility bound", extendibility_bound),
        ("lifted MCMC and scaling", lifted_mcmc),
        ("property suites", property_suites),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut all = true;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|f| *f == id) {
            continue;
        }
        let start = Instant::now();
        let v = run();
        all &= v.pass;
        println!(
            "criterion {id} {name}: {} ({}; {:.1}s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
