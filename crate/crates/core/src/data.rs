//! Datasets pooling a primary sample (outcome missing, `d = 1`) and an
//! auxiliary sample (outcome observed, `d = 0`).

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which population the moment conditions refer to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Case {
    /// The auxiliary sample is independent of the primary sample; the
    /// parameter is defined on the `d = 1` population.
    VerifyOut,
    /// The auxiliary sample is a validated subset; the parameter is defined
    /// on the pooled population.
    VerifyIn,
}

impl Case {
    pub fn as_str(&self) -> &'static str {
        match self {
            Case::VerifyOut => "verify-out",
            Case::VerifyIn => "verify-in",
        }
    }
}

impl std::str::FromStr for Case {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "verify-out" | "out" => Ok(Case::VerifyOut),
            "verify-in" | "in" => Ok(Case::VerifyIn),
            other => Err(Error::Config(format!("unknown case `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub x: Vec<f64>,
    pub y: Option<Vec<f64>>,
    /// 1 = primary (outcome missing), 0 = auxiliary (outcome observed).
    pub d: u8,
}

impl Observation {
    pub fn is_primary(&self) -> bool {
        self.d == 1
    }
}

/// Immutable validated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    rows: Vec<Observation>,
    case: Case,
    d_x: usize,
    d_y: usize,
    n_primary: usize,
}

impl Dataset {
    pub fn new(rows: Vec<Observation>, case: Case) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::InvalidDataset("dataset has no rows".into()))?;
        let d_x = first.x.len();
        let mut d_y = None;
        let mut n_primary = 0;
        for (i, r) in rows.iter().enumerate() {
            if r.x.len() != d_x {
                return Err(Error::MalformedRow {
                    row: i + 1,
                    reason: format!("expected {d_x} covariates, found {}", r.x.len()),
                });
            }
            if let Some(bad) = r.x.iter().position(|v| !v.is_finite()) {
                return Err(Error::MalformedRow {
                    row: i + 1,
                    reason: format!("covariate x{} is not finite", bad + 1),
                });
            }
            match r.d {
                0 => {}
                1 => n_primary += 1,
                other => {
                    return Err(Error::MalformedRow {
                        row: i + 1,
                        reason: format!("d must be 0 or 1, found {other}"),
                    })
                }
            }
            match &r.y {
                Some(y) => {
                    if y.iter().any(|v| !v.is_finite()) {
                        return Err(Error::MalformedRow {
                            row: i + 1,
                            reason: "outcome is not finite".into(),
                        });
                    }
                    match d_y {
                        None => d_y = Some(y.len()),
                        Some(k) if k != y.len() => {
                            return Err(Error::MalformedRow {
                                row: i + 1,
                                reason: format!("expected {k} outcomes, found {}", y.len()),
                            })
                        }
                        _ => {}
                    }
                }
                None if r.d == 0 => {
                    return Err(Error::MalformedRow {
                        row: i + 1,
                        reason: "auxiliary row (d = 0) lacks y".into(),
                    })
                }
                None => {}
            }
        }
        if n_primary == 0 || n_primary == rows.len() {
            return Err(Error::InvalidDataset(format!(
                "need both primary (d = 1) and auxiliary (d = 0) rows; found {n_primary} of {}",
                rows.len()
            )));
        }
        Ok(Self {
            d_y: d_y.unwrap_or(0),
            rows,
            case,
            d_x,
            n_primary,
        })
    }

    pub fn rows(&self) -> &[Observation] {
        &self.rows
    }

    pub fn case(&self) -> Case {
        self.case
    }

    /// Same rows under a different case label.
    pub fn with_case(&self, case: Case) -> Dataset {
        Dataset { case, ..self.clone() }
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn d_y(&self) -> usize {
        self.d_y
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn n_primary(&self) -> usize {
        self.n_primary
    }

    pub fn n_auxiliary(&self) -> usize {
        self.rows.len() - self.n_primary
    }

    /// `n × d_x` covariate matrix of the selected rows.
    pub fn x_matrix(&self, idx: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(idx.len(), self.d_x, |i, j| self.rows[idx[i]].x[j])
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.rows.len()).collect()
    }
}

/// Row indices of the two subsamples, in dataset order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSplit {
    pub primary: Vec<usize>,
    pub auxiliary: Vec<usize>,
}

pub fn split_samples(ds: &Dataset) -> SampleSplit {
    let (primary, auxiliary) = (0..ds.n()).partition(|&i| ds.rows[i].d == 1);
    SampleSplit { primary, auxiliary }
}

/// `n_p / n`.
pub fn marginal_p(ds: &Dataset) -> f64 {
    ds.n_primary() as f64 / ds.n() as f64
}

/// Column names used when reading a CSV file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub d: String,
    pub y: Vec<String>,
    pub x: Vec<String>,
}

impl ColumnSpec {
    /// Detect `d`, `y` or `y1..yk`, and `x1..xk` from a header row.
    pub fn infer(header: &[String]) -> Result<Self> {
        if !header.iter().any(|h| h == "d") {
            return Err(Error::Config("CSV header lacks a `d` column".into()));
        }
        let numbered = |prefix: char| -> Vec<String> {
            let mut cols: Vec<(usize, String)> = header
                .iter()
                .filter_map(|h| {
                    h.strip_prefix(prefix)
                        .and_then(|rest| rest.parse::<usize>().ok())
                        .filter(|&k| k >= 1)
                        .map(|k| (k, h.clone()))
                })
                .collect();
            cols.sort();
            cols.into_iter().map(|(_, h)| h).collect()
        };
        let y = if header.iter().any(|h| h == "y") {
            vec!["y".to_string()]
        } else {
            numbered('y')
        };
        let x = numbered('x');
        if x.is_empty() {
            return Err(Error::Config("CSV header lacks x1..xk columns".into()));
        }
        Ok(Self { d: "d".into(), y, x })
    }
}

/// Read a dataset from CSV. When `schema` is `None` the columns are inferred
/// from the header.
pub fn load_dataset<R: Read>(source: R, schema: Option<&ColumnSpec>, case: Case) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let schema = match schema {
        Some(s) => s.clone(),
        None => ColumnSpec::infer(&header)?,
    };
    let position = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("CSV header lacks column `{name}`")))
    };
    let d_col = position(&schema.d)?;
    let y_cols = schema.y.iter().map(|c| position(c)).collect::<Result<Vec<_>>>()?;
    let x_cols = schema.x.iter().map(|c| position(c)).collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let field = |c: usize| record.get(c).unwrap_or("");
        let d = match field(d_col) {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                return Err(Error::MalformedRow {
                    row,
                    reason: format!("d must be 0 or 1, found `{other}`"),
                })
            }
        };
        let mut x = Vec::with_capacity(x_cols.len());
        for (&c, name) in x_cols.iter().zip(&schema.x) {
            let v: f64 = field(c).parse().map_err(|_| Error::Parse {
                row,
                column: name.clone(),
                reason: format!("`{}` is not a number", field(c)),
            })?;
            x.push(v);
        }
        let cells: Vec<&str> = y_cols.iter().map(|&c| field(c)).collect();
        let y = if cells.is_empty() || cells.iter().all(|s| s.is_empty()) {
            if d == 0 {
                return Err(Error::MalformedRow {
                    row,
                    reason: "auxiliary row (d = 0) lacks y".into(),
                });
            }
            None
        } else {
            let mut y = Vec::with_capacity(cells.len());
            for (s, name) in cells.iter().zip(&schema.y) {
                let v: f64 = s.parse().map_err(|_| Error::Parse {
                    row,
                    column: name.clone(),
                    reason: format!("`{s}` is not a number"),
                })?;
                y.push(v);
            }
            Some(y)
        };
        rows.push(Observation { x, y, d });
    }
    Dataset::new(rows, case)
}

/// Write a dataset in the layout `load_dataset` reads. Floats use the
/// shortest representation that round-trips exactly.
pub fn write_dataset<W: Write>(ds: &Dataset, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["d".to_string()];
    if ds.d_y() == 1 {
        header.push("y".into());
    } else {
        header.extend((1..=ds.d_y()).map(|k| format!("y{k}")));
    }
    header.extend((1..=ds.d_x()).map(|k| format!("x{k}")));
    w.write_record(&header)?;
    for r in ds.rows() {
        let mut rec = vec![r.d.to_string()];
        match &r.y {
            Some(y) => rec.extend(y.iter().map(|v| format!("{v:?}"))),
            None => rec.extend(std::iter::repeat_n(String::new(), ds.d_y())),
        }
        rec.extend(r.x.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: "<writer>".into(),
        source: e,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(s: &str) -> Result<Dataset> {
        load_dataset(s.as_bytes(), None, Case::VerifyOut)
    }

    #[test]
    fn minimal_csv() {
        let ds = load("d,y,x1\n0,1.0,0.5\n1,,0.2").unwrap();
        assert_eq!(ds.n(), 2);
        assert_eq!(ds.n_primary(), 1);
        assert_eq!(ds.n_auxiliary(), 1);
        assert_eq!(ds.rows()[1].y, None);
        assert_eq!(ds.rows()[0].y, Some(vec![1.0]));
    }

    #[test]
    fn auxiliary_row_without_y_is_malformed() {
        let err = load("d,y,x1\n0,,0.5\n1,,0.2").unwrap_err();
        assert!(matches!(err, Error::MalformedRow { row: 1, .. }), "{err}");
    }

    #[test]
    fn bad_d_and_bad_x() {
        assert!(matches!(
            load("d,y,x1\n2,1,0.5\n0,1,0.2").unwrap_err(),
            Error::MalformedRow { .. }
        ));
        assert!(matches!(
            load("d,y,x1\n0,1,abc\n1,,0.2").unwrap_err(),
            Error::Parse { .. }
        ));
    }

    #[test]
    fn single_subsample_rejected() {
        assert!(matches!(
            load("d,y,x1\n0,1,0.5\n0,2,0.2").unwrap_err(),
            Error::InvalidDataset(_)
        ));
    }

    #[test]
    fn vector_outcome_columns() {
        let ds = load("d,y1,y2,x1,x2\n0,1,2,0.5,1\n1,,,0.2,3").unwrap();
        assert_eq!(ds.d_y(), 2);
        assert_eq!(ds.d_x(), 2);
    }

    #[test]
    fn split_and_marginal() {
        let ds = load("d,y,x1\n1,,0\n0,1,0\n1,,1").unwrap();
        let s = split_samples(&ds);
        assert_eq!(s.primary, vec![0, 2]);
        assert_eq!(s.auxiliary, vec![1]);
        assert!((marginal_p(&ds) - 2.0 / 3.0).abs() < 1e-15);
        let ds = load("d,y,x1\n1,,0\n0,1,0\n1,,1\n0,2,1").unwrap();
        assert_eq!(marginal_p(&ds), 0.5);
        let ds = load("d,y,x1\n1,,0\n1,,0\n1,,1\n0,2,1").unwrap();
        assert_eq!(marginal_p(&ds), 0.75);
    }

    #[test]
    fn write_then_load_is_identity() {
        let ds = load("d,y,x1\n1,,0.1\n0,1.25,0.3333333333333333\n1,,1e-7").unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let back = load_dataset(buf.as_slice(), None, Case::VerifyOut).unwrap();
        assert_eq!(back, ds);
    }
}
