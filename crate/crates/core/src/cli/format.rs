//! Line-oriented model file format and its JSON twin.
//!
//! ```text
//! ATOMS
//! attends binary 50
//! color categorical 3 10
//! price continuous 64 -5 5
//! PARFACTORS
//! phi attends hot : ground-table 1 2 2 1
//! prior price : gaussian 0 1
//! t attends : hist-table
//!   0,50 -1.5
//! v attends : mixture {"atoms": ...}
//! LATENT-COUPLINGS
//! latent p_job bernoulli jobs Job 0 1
//! latent p_down weight prices 0 1
//! coupling p_job p_down 0 0.01
//! EXTENDIBILITY
//! attends 500
//! ```

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bounds::{AtomExtension, ExtendibilitySpec};
use crate::error::{Error, Result};
use crate::lve::{ContinuousLatent, LatentCoupling, LatentRole, VariationalModel, VariationalPotential};
use crate::mixture::IidMixture;
use crate::model::{Atom, AtomDomain, HistTable, Histogram, ParametricDensity, Parfactor, Potential, Rhm};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub atoms: Vec<Atom>,
    pub parfactors: Vec<Parfactor>,
    #[serde(default)]
    pub latents: Vec<ContinuousLatent>,
    #[serde(default)]
    pub couplings: Vec<LatentCoupling>,
    #[serde(default)]
    pub extendibility: ExtendibilitySpec,
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Atoms,
    Parfactors,
    Latents,
    Extendibility,
}

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn num<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T> {
    let t = tok.ok_or_else(|| perr(line, format!("missing {what}")))?;
    t.parse().map_err(|_| perr(line, format!("invalid {what} `{t}`")))
}

fn parse_hist(tok: &str, line: usize) -> Result<Histogram> {
    let counts = tok
        .split(',')
        .map(|c| c.parse::<usize>().map_err(|_| perr(line, format!("invalid histogram `{tok}`"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Histogram::new(counts))
}

fn fmt_hist(h: &Histogram) -> String {
    h.counts().iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
}

impl ModelFile {
    /// Parses either format; documents starting with `{` are JSON.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            let m: ModelFile = serde_json::from_str(text).map_err(|e| perr(e.line(), e.to_string()))?;
            m.validate()?;
            return Ok(m);
        }
        Self::parse_text(text)
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut m = ModelFile::default();
        let mut section = Section::None;
        let mut open_table: Option<usize> = None;
        let mut ext: Vec<(usize, String, usize)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("");
            if content.trim().is_empty() {
                continue;
            }
            let indented = content.starts_with(' ') || content.starts_with('\t');
            let toks: Vec<&str> = content.split_whitespace().collect();
            if indented {
                let Some(pi) = open_table else {
                    return Err(perr(line, "indented line outside a hist-table"));
                };
                let Potential::HistTable(t) = &mut m.parfactors[pi].potential else {
                    unreachable!()
                };
                let n = t.atoms().len();
                if toks.len() != n + 1 {
                    return Err(perr(line, format!("hist-table entry needs {n} histograms and a log value")));
                }
                let key = toks[..n].iter().map(|t| parse_hist(t, line)).collect::<Result<Vec<_>>>()?;
                let v: f64 = num(Some(toks[n]), line, "log value")?;
                t.insert_log(key, v).map_err(|e| perr(line, e.to_string()))?;
                continue;
            }
            open_table = None;
            match toks[0] {
                "ATOMS" => section = Section::Atoms,
                "PARFACTORS" => section = Section::Parfactors,
                "LATENT-COUPLINGS" => section = Section::Latents,
                "EXTENDIBILITY" => section = Section::Extendibility,
                _ => match section {
                    Section::None => return Err(perr(line, "content before the first section header")),
                    Section::Atoms => m.atoms.push(parse_atom(&toks, line)?),
                    Section::Parfactors => {
                        let (g, table) = parse_parfactor(content, &m.atoms, line)?;
                        if table {
                            open_table = Some(m.parfactors.len());
                        }
                        m.parfactors.push(g);
                    }
                    Section::Latents => parse_latent(&toks, line, &mut m)?,
                    Section::Extendibility => {
                        if toks.len() != 2 {
                            return Err(perr(line, "expected `<atom> <n_bar>`"));
                        }
                        ext.push((line, toks[0].to_string(), num(Some(toks[1]), line, "extension size")?));
                    }
                },
            }
        }
        for (line, name, n_bar) in ext {
            let a = m
                .atoms
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| perr(line, format!("unknown atom `{name}`")))?;
            let e = match a.domain.value_count() {
                Some(d) => AtomExtension::discrete(n_bar, d),
                None => AtomExtension::continuous(n_bar),
            };
            m.extendibility.insert(name, e);
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let rhm = self.to_rhm()?;
        rhm.validate()?;
        for l in &self.latents {
            if !self.parfactors.iter().any(|g| g.name == l.potential()) {
                return Err(Error::InvalidModel(format!(
                    "latent `{}` refers to unknown parfactor `{}`",
                    l.name,
                    l.potential()
                )));
            }
        }
        for c in &self.couplings {
            for n in [&c.a, &c.b] {
                if !self.latents.iter().any(|l| &l.name == n) {
                    return Err(Error::InvalidModel(format!("coupling refers to unknown latent `{n}`")));
                }
            }
        }
        for (a, e) in &self.extendibility.atoms {
            let atom = rhm.atom(a)?;
            if e.n_bar < atom.population {
                return Err(Error::InvalidModel(format!(
                    "extension size {} of `{a}` is below its population {}",
                    e.n_bar, atom.population
                )));
            }
        }
        Ok(())
    }

    pub fn to_rhm(&self) -> Result<Rhm> {
        let mut r = Rhm::new();
        for a in &self.atoms {
            r.add_atom(a.clone())?;
        }
        for g in &self.parfactors {
            r.add_parfactor(g.clone())?;
        }
        Ok(r)
    }

    pub fn is_variational(&self) -> bool {
        self.parfactors.iter().all(|g| g.potential.is_variational())
    }

    /// The variational model, when every parfactor is a mixture.
    pub fn to_variational(&self) -> Result<VariationalModel> {
        let pots = self
            .parfactors
            .iter()
            .map(|g| match &g.potential {
                Potential::Variational(m) => Ok(VariationalPotential::new(g.name.clone(), m.clone())),
                _ => Err(Error::InvalidModel(format!("parfactor `{}` is not variational", g.name))),
            })
            .collect::<Result<Vec<_>>>()?;
        VariationalModel::new(self.atoms.clone(), pots)?.with_latents(self.latents.clone(), self.couplings.clone())
    }

    /// Same model with parfactors replaced by fitted mixtures.
    pub fn with_mixtures(&self, mixtures: &[(String, IidMixture)]) -> Result<ModelFile> {
        let mut out = self.clone();
        for (name, mix) in mixtures {
            let g = out
                .parfactors
                .iter_mut()
                .find(|g| &g.name == name)
                .ok_or_else(|| Error::InvalidModel(format!("unknown parfactor `{name}`")))?;
            g.potential = Potential::Variational(mix.clone());
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    /// Canonical text form.
    pub fn to_text(&self) -> Result<String> {
        let mut s = String::from("ATOMS\n");
        for a in &self.atoms {
            match a.domain {
                AtomDomain::Binary => writeln!(s, "{} binary {}", a.name, a.population),
                AtomDomain::Categorical(d) => writeln!(s, "{} categorical {d} {}", a.name, a.population),
                AtomDomain::Continuous { support: None } => writeln!(s, "{} continuous {}", a.name, a.population),
                AtomDomain::Continuous { support: Some((lo, hi)) } => {
                    writeln!(s, "{} continuous {} {lo} {hi}", a.name, a.population)
                }
            }
            .unwrap();
        }
        s.push_str("PARFACTORS\n");
        for g in &self.parfactors {
            let simple = Parfactor::simple(
                g.name.clone(),
                &g.args
                    .iter()
                    .map(|a| self.atoms.iter().find(|b| b.name == a.atom).unwrap())
                    .collect::<Vec<_>>(),
                g.potential.clone(),
            );
            if &simple != g {
                return Err(Error::InvalidModel(format!(
                    "parfactor `{}` uses shared parameter variables, which only the JSON form stores",
                    g.name
                )));
            }
            write!(s, "{} {} : ", g.name, g.atom_names().join(" ")).unwrap();
            match &g.potential {
                Potential::Parametric(ParametricDensity::Gaussian { mean, var }) => {
                    writeln!(s, "gaussian {mean} {var}").unwrap()
                }
                Potential::Parametric(ParametricDensity::LinearGaussian { mean, var }) => {
                    writeln!(s, "linear-gaussian {mean} {var}").unwrap()
                }
                Potential::Parametric(ParametricDensity::GroundTable { values }) => {
                    let v: Vec<String> = values.iter().map(|v| v.to_string()).collect();
                    writeln!(s, "ground-table {}", v.join(" ")).unwrap()
                }
                Potential::HistTable(t) => {
                    s.push_str("hist-table\n");
                    for (key, v) in t.entries() {
                        let k: Vec<String> = key.iter().map(fmt_hist).collect();
                        writeln!(s, "  {} {v}", k.join(" ")).unwrap();
                    }
                }
                Potential::Variational(m) => {
                    writeln!(s, "mixture {}", serde_json::to_string(m).expect("mixture serializes")).unwrap()
                }
            }
        }
        if !self.latents.is_empty() || !self.couplings.is_empty() {
            s.push_str("LATENT-COUPLINGS\n");
            for l in &self.latents {
                let (lo, hi) = l.support;
                match &l.role {
                    LatentRole::BernoulliParameter { potential, atom } => {
                        writeln!(s, "latent {} bernoulli {potential} {atom} {lo} {hi}", l.name).unwrap()
                    }
                    LatentRole::ComponentWeight { potential } => {
                        writeln!(s, "latent {} weight {potential} {lo} {hi}", l.name).unwrap()
                    }
                }
            }
            for c in &self.couplings {
                writeln!(s, "coupling {} {} {} {}", c.a, c.b, c.mean, c.var).unwrap();
            }
        }
        if !self.extendibility.atoms.is_empty() {
            s.push_str("EXTENDIBILITY\n");
            for (a, e) in &self.extendibility.atoms {
                writeln!(s, "{a} {}", e.n_bar).unwrap();
            }
        }
        Ok(s)
    }
}

fn parse_atom(toks: &[&str], line: usize) -> Result<Atom> {
    let name = toks[0];
    let domain = match toks.get(1).copied() {
        Some("binary") => {
            if toks.len() != 3 {
                return Err(perr(line, "expected `<name> binary <population>`"));
            }
            return Atom::new(name, AtomDomain::Binary, num(toks.get(2).copied(), line, "population")?)
                .map_err(|e| perr(line, e.to_string()));
        }
        Some("categorical") => {
            if toks.len() != 4 {
                return Err(perr(line, "expected `<name> categorical <values> <population>`"));
            }
            AtomDomain::Categorical(num(toks.get(2).copied(), line, "value count")?)
        }
        Some("continuous") => match toks.len() {
            3 => AtomDomain::continuous(),
            5 => AtomDomain::bounded(
                num(toks.get(3).copied(), line, "lower bound")?,
                num(toks.get(4).copied(), line, "upper bound")?,
            ),
            _ => return Err(perr(line, "expected `<name> continuous <population> [<lo> <hi>]`")),
        },
        other => return Err(perr(line, format!("unknown domain {other:?}"))),
    };
    let pop_at = if matches!(domain, AtomDomain::Categorical(_)) { 3 } else { 2 };
    Atom::new(name, domain, num(toks.get(pop_at).copied(), line, "population")?).map_err(|e| perr(line, e.to_string()))
}

fn parse_parfactor(content: &str, atoms: &[Atom], line: usize) -> Result<(Parfactor, bool)> {
    let (head, spec) = content
        .split_once(" : ")
        .ok_or_else(|| perr(line, "expected `<name> <atoms...> : <potential>`"))?;
    let head: Vec<&str> = head.split_whitespace().collect();
    if head.len() < 2 {
        return Err(perr(line, "a parfactor needs a name and at least one atom"));
    }
    let args = head[1..]
        .iter()
        .map(|n| {
            atoms
                .iter()
                .find(|a| a.name == *n)
                .ok_or_else(|| perr(line, format!("unknown atom `{n}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = spec.trim();
    let (kind, rest) = spec.split_once(char::is_whitespace).unwrap_or((spec, ""));
    let nums = || -> Result<Vec<f64>> {
        rest.split_whitespace().map(|t| num(Some(t), line, "number")).collect()
    };
    let two = |v: Vec<f64>| -> Result<(f64, f64)> {
        match v.as_slice() {
            [a, b] => Ok((*a, *b)),
            _ => Err(perr(line, format!("`{kind}` takes a mean and a variance"))),
        }
    };
    let mut table = false;
    let potential = match kind {
        "gaussian" => {
            let (mean, var) = two(nums()?)?;
            Potential::Parametric(ParametricDensity::Gaussian { mean, var })
        }
        "linear-gaussian" => {
            let (mean, var) = two(nums()?)?;
            Potential::Parametric(ParametricDensity::LinearGaussian { mean, var })
        }
        "ground-table" => Potential::Parametric(ParametricDensity::GroundTable { values: nums()? }),
        "hist-table" => {
            table = true;
            let t = HistTable::new(args.iter().map(|a| (*a).clone()).collect()).map_err(|e| perr(line, e.to_string()))?;
            Potential::HistTable(t)
        }
        "mixture" => {
            let m: IidMixture = serde_json::from_str(rest).map_err(|e| perr(line, format!("mixture: {e}")))?;
            Potential::Variational(m)
        }
        other => return Err(perr(line, format!("unknown potential `{other}`"))),
    };
    Ok((Parfactor::simple(head[0], &args, potential), table))
}

fn parse_latent(toks: &[&str], line: usize, m: &mut ModelFile) -> Result<()> {
    match toks {
        ["latent", name, "bernoulli", pot, atom, lo, hi] => m.latents.push(ContinuousLatent {
            name: name.to_string(),
            role: LatentRole::BernoulliParameter {
                potential: pot.to_string(),
                atom: atom.to_string(),
            },
            support: (num(Some(lo), line, "lower bound")?, num(Some(hi), line, "upper bound")?),
        }),
        ["latent", name, "weight", pot, lo, hi] => m.latents.push(ContinuousLatent {
            name: name.to_string(),
            role: LatentRole::ComponentWeight { potential: pot.to_string() },
            support: (num(Some(lo), line, "lower bound")?, num(Some(hi), line, "upper bound")?),
        }),
        ["coupling", a, b, mean, var] => m.couplings.push(LatentCoupling {
            a: a.to_string(),
            b: b.to_string(),
            mean: num(Some(mean), line, "mean")?,
            var: num(Some(var), line, "variance")?,
        }),
        _ => return Err(perr(line, "expected a `latent` or `coupling` line")),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# people and workshops
ATOMS
attends binary 4
hot binary 2
price continuous 3 -5 5
PARFACTORS
phi attends hot : ground-table 1 2 2.5 1
prior price : gaussian 0 1
t attends : hist-table
  4,0 -1.5
  2,2 0.25
EXTENDIBILITY
attends 40
";

    #[test]
    fn parses_sections() {
        let m = ModelFile::parse(SAMPLE).unwrap();
        assert_eq!(m.atoms.len(), 3);
        assert_eq!(m.parfactors.len(), 3);
        let Potential::HistTable(t) = &m.parfactors[2].potential else { panic!() };
        assert_eq!(t.len(), 2);
        assert_eq!(m.extendibility.atoms["attends"], AtomExtension::discrete(40, 2));
    }

    #[test]
    fn text_round_trip() {
        let m = ModelFile::parse(SAMPLE).unwrap();
        let text = m.to_text().unwrap();
        let again = ModelFile::parse(&text).unwrap();
        assert_eq!(m, again);
        assert_eq!(text, again.to_text().unwrap());
        let json = ModelFile::parse(&m.to_json()).unwrap();
        assert_eq!(m, json);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad = "ATOMS\nx binary 3\nPARFACTORS\ng y : gaussian 0 1\n";
        match ModelFile::parse(bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        assert!(ModelFile::parse("x binary 3\n").is_err());
        assert!(ModelFile::parse("ATOMS\nx binary 3\nPARFACTORS\ng x : gaussian 0\n").is_err());
    }
}
