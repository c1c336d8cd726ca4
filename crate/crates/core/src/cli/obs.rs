//! Observation files: a JSON list of observations, or a CSV whose header names
//! columns and whose non-empty cells are observed values.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::lve::Observation;
use crate::model::Atom;

/// Columns of a CSV matrix; `None` marks a missing cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsMatrix {
    pub columns: Vec<String>,
    /// Row-major cells.
    pub rows: Vec<Vec<Option<f64>>>,
}

impl ObsMatrix {
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .from_reader(text.as_bytes());
        let columns: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
            .iter()
            .map(|s| s.trim().to_string())
            .collect();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
            let row = rec
                .iter()
                .map(|c| {
                    let c = c.trim();
                    if c.is_empty() {
                        Ok(None)
                    } else {
                        c.parse::<f64>()
                            .ok()
                            .filter(|v| v.is_finite())
                            .map(Some)
                            .ok_or_else(|| Error::Parse { line, msg: format!("invalid cell `{c}`") })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok(ObsMatrix { columns, rows })
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r.iter().map(|c| c.map(|v| v.to_string()).unwrap_or_default()))
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf8")
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().filter_map(move |r| r[j])
    }
}

/// Reads observations from JSON or CSV text. CSV columns are atom names; each
/// non-empty cell is one observed rv of that atom.
pub fn parse_observations(text: &str, atoms: &BTreeMap<String, Atom>) -> Result<Vec<Observation>> {
    let obs: Vec<Observation> = if text.trim_start().starts_with('[') {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?
    } else {
        let m = ObsMatrix::parse_csv(text)?;
        let mut out = Vec::new();
        for (j, name) in m.columns.iter().enumerate() {
            let atom = atoms.get(name).ok_or_else(|| Error::UnknownAtom(name.clone()))?;
            let values: Vec<f64> = m.column(j).collect();
            if values.is_empty() {
                continue;
            }
            out.push(match atom.domain.value_count() {
                Some(d) => {
                    let mut counts = vec![0usize; d];
                    for v in &values {
                        if !atom.domain.contains(*v) {
                            return Err(Error::Domain(format!("value {v} outside the domain of `{name}`")));
                        }
                        counts[*v as usize] += 1;
                    }
                    Observation::Counts { atom: name.clone(), counts }
                }
                None => Observation::Values { atom: name.clone(), values },
            });
        }
        out
    };
    for o in &obs {
        let a = atoms.get(o.atom()).ok_or_else(|| Error::UnknownAtom(o.atom().to_string()))?;
        if o.observed() > a.population {
            return Err(Error::Domain(format!(
                "{} observations of `{}` exceed its population {}",
                o.observed(),
                a.name,
                a.population
            )));
        }
    }
    Ok(obs)
}
