//! JSON documents and CSV tables. Every float is written in plain decimal
//! notation with 17 significant digits, which reads back bit-exactly.

use std::io::{self, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::{Error, Result};
use crate::solver::{Policy, SolveReport};

/// `x` with 17 significant digits and no exponent.
pub fn plain_decimal(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return format!("{x:.1}");
    }
    let exponent = x.abs().log10().floor() as i64;
    let decimals = (16 - exponent).max(1) as usize;
    format!("{x:.decimals$}")
}

struct PlainFormatter<'a>(PrettyFormatter<'a>);

impl Formatter for PlainFormatter<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(plain_decimal(value).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }

    fn begin_array<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.begin_array(writer)
    }

    fn end_array<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_array(writer)
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(writer, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_array_value(writer)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.begin_object(writer)
    }

    fn end_object<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_object(writer)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(writer, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.begin_object_value(writer)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_object_value(writer)
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, PlainFormatter(PrettyFormatter::new()));
    value.serialize(&mut ser).map_err(|e| Error::Parse {
        path: "json output".into(),
        message: e.to_string(),
    })?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

pub fn from_json<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_string(),
        message: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    super::write_text(path, &to_json(value)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    from_json(&super::read_text(path)?, &path.display().to_string())
}

/// Flat table with a header row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let to_err = |e: csv::Error| Error::Parse {
            path: "csv output".into(),
            message: e.to_string(),
        };
        w.write_record(&self.header).map_err(to_err)?;
        for row in &self.rows {
            w.write_record(row).map_err(to_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Parse {
            path: "csv output".into(),
            message: e.to_string(),
        })?;
        Ok(String::from_utf8(bytes).expect("csv of UTF-8 strings"))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        super::write_text(path, &self.to_csv()?)
    }
}

pub fn num(x: f64) -> String {
    plain_decimal(x)
}

/// Serialized form of a [`Policy`]; feedback matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDoc {
    pub horizon: usize,
    pub belief_dim: usize,
    pub control_dim: usize,
    pub initial_trajectory_hash: String,
    pub nominal_beliefs: Vec<Vec<f64>>,
    pub nominal_controls: Vec<Vec<f64>>,
    pub feedforward: Vec<Vec<f64>>,
    pub feedback: Vec<Vec<Vec<f64>>>,
}

fn rows_of(v: &[DVector<f64>]) -> Vec<Vec<f64>> {
    v.iter().map(|x| x.iter().copied().collect()).collect()
}

fn vectors_of(v: &[Vec<f64>]) -> Vec<DVector<f64>> {
    v.iter().map(|x| DVector::from_row_slice(x)).collect()
}

impl PolicyDoc {
    pub fn new(policy: &Policy, initial_trajectory_hash: String) -> Self {
        Self {
            horizon: policy.horizon(),
            belief_dim: policy.nominal_beliefs.first().map_or(0, |b| b.len()),
            control_dim: policy.nominal_controls.first().map_or(0, |u| u.len()),
            initial_trajectory_hash,
            nominal_beliefs: rows_of(&policy.nominal_beliefs),
            nominal_controls: rows_of(&policy.nominal_controls),
            feedforward: rows_of(&policy.feedforward),
            feedback: policy
                .feedback
                .iter()
                .map(|l| l.row_iter().map(|r| r.iter().copied().collect()).collect())
                .collect(),
        }
    }

    pub fn policy(&self) -> Result<Policy> {
        let mut feedback = Vec::with_capacity(self.feedback.len());
        for (k, rows) in self.feedback.iter().enumerate() {
            if rows.len() != self.control_dim || rows.iter().any(|r| r.len() != self.belief_dim) {
                return Err(Error::config(
                    format!("feedback[{k}]"),
                    format!("expected a {}x{} matrix", self.control_dim, self.belief_dim),
                ));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            feedback.push(DMatrix::from_row_slice(self.control_dim, self.belief_dim, &flat));
        }
        let policy = Policy {
            nominal_beliefs: vectors_of(&self.nominal_beliefs),
            nominal_controls: vectors_of(&self.nominal_controls),
            feedforward: vectors_of(&self.feedforward),
            feedback,
        };
        policy.validate()?;
        if policy.horizon() != self.horizon {
            return Err(Error::config("horizon", "does not match the control sequence"));
        }
        let bad_b = policy.nominal_beliefs.iter().any(|b| b.len() != self.belief_dim);
        let bad_u = policy
            .nominal_controls
            .iter()
            .chain(&policy.feedforward)
            .any(|u| u.len() != self.control_dim);
        if bad_b || bad_u {
            return Err(Error::config("policy", "vector lengths disagree with the declared dimensions"));
        }
        Ok(policy)
    }
}

/// Solve report with the settings that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDoc {
    pub scenario: String,
    pub mode: String,
    pub visibility: String,
    pub initial_trajectory_hash: String,
    /// Bounds as 3-sigma values, empty in unconstrained mode.
    pub three_sigma_bounds: Vec<f64>,
    pub report: SolveReport,
}
