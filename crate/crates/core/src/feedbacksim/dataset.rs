//! Labelled example sets and their CSV representation.
//!
//! CSV schema: header `f0,...,f{d-1},label,position,b`, UTF-8, LF line
//! endings. Features and `b` are written with 17 significant digits so every
//! `f64` survives a round trip. `position` and `b` are left empty for rows
//! that were never shown by the feedback loop (e.g. held-out data).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nncore::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Matrix,
    y: Vec<f64>,
    b: Option<Vec<f64>>,
    position: Option<Vec<u8>>,
}

impl Dataset {
    pub fn new(
        x: Matrix,
        y: Vec<f64>,
        b: Option<Vec<f64>>,
        position: Option<Vec<u8>>,
    ) -> Result<Self> {
        let n = x.rows();
        if y.len() != n {
            return Err(Error::input(format!("{} labels for {n} rows", y.len())));
        }
        if let Some(i) = y.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::input(format!("label {} at row {i} is not 0 or 1", y[i])));
        }
        if let Some(b) = &b {
            if b.len() != n {
                return Err(Error::input(format!("{} bias values for {n} rows", b.len())));
            }
            if let Some(i) = b.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::input(format!("bias value {} at row {i} outside [0, 1]", b[i])));
            }
        }
        if let Some(p) = &position {
            if p.len() != n {
                return Err(Error::input(format!("{} positions for {n} rows", p.len())));
            }
            if let Some(i) = p.iter().position(|&v| v != 1 && v != 2) {
                return Err(Error::input(format!("position {} at row {i} is not 1 or 2", p[i])));
            }
        }
        Ok(Dataset { x, y, b, position })
    }

    pub fn empty(n_features: usize) -> Self {
        Dataset {
            x: Matrix::zeros(0, n_features),
            y: Vec::new(),
            b: None,
            position: None,
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn b(&self) -> Option<&[f64]> {
        self.b.as_deref()
    }

    pub fn position(&self) -> Option<&[u8]> {
        self.position.as_deref()
    }

    /// Bias values, or an input error naming `context` when absent.
    pub fn require_b(&self, context: &str) -> Result<&[f64]> {
        self.b()
            .ok_or_else(|| Error::input(format!("{context}: dataset has no bias column")))
    }

    pub fn click_rate(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.y.iter().sum::<f64>() / self.len() as f64
    }

    pub fn with_b(mut self, b: Vec<f64>) -> Result<Self> {
        let position = self.position.take();
        Dataset::new(self.x, self.y, Some(b), position)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            b: self.b.as_ref().map(|b| indices.iter().map(|&i| b[i]).collect()),
            position: self
                .position
                .as_ref()
                .map(|p| indices.iter().map(|&i| p[i]).collect()),
        }
    }

    /// Rows of `self` followed by rows of `other`. Optional columns survive
    /// only when both sides carry them.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        let x = self.x.vstack(&other.x)?;
        let join = |a: &Option<Vec<f64>>, b: &Option<Vec<f64>>| match (a, b) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        let position = match (&self.position, &other.position) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        Dataset::new(
            x,
            self.y.iter().chain(&other.y).copied().collect(),
            join(&self.b, &other.b),
            position,
        )
    }

    pub fn feature_means(&self) -> Vec<f64> {
        let d = self.n_features();
        let mut m = vec![0.0; d];
        if self.is_empty() {
            return m;
        }
        for i in 0..self.len() {
            for (acc, v) in m.iter_mut().zip(self.x.row(i)) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.len() as f64);
        m
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        let mut header: Vec<String> = (0..self.n_features()).map(|j| format!("f{j}")).collect();
        header.extend(["label", "position", "b"].map(String::from));
        w.write_record(&header).map_err(csv_io)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|v| format_f64(*v)).collect();
            rec.push(format!("{}", self.y[i] as u8));
            rec.push(self.position.as_ref().map_or(String::new(), |p| p[i].to_string()));
            rec.push(self.b.as_ref().map_or(String::new(), |b| format_f64(b[i])));
            w.write_record(&rec).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = r.headers().map_err(|e| csv_parse(&e, 1))?.clone();
        let cols: Vec<&str> = header.iter().collect();
        if cols.len() < 3 || cols[cols.len() - 3..] != ["label", "position", "b"] {
            return Err(Error::Parse {
                line: 1,
                message: "header must end with label,position,b".into(),
            });
        }
        let d = cols.len() - 3;
        for (j, name) in cols[..d].iter().enumerate() {
            if *name != format!("f{j}") {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected column f{j}, found {name:?}"),
                });
            }
        }

        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut bs: Vec<Option<f64>> = Vec::new();
        let mut ps: Vec<Option<u8>> = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_parse(&e, 0))?;
            let line = rec.position().map_or(0, |p| p.line());
            let err = |message: String| Error::Parse { line, message };
            if rec.len() != d + 3 {
                return Err(err(format!("expected {} fields, found {}", d + 3, rec.len())));
            }
            for j in 0..d {
                let v: f64 = rec[j]
                    .parse()
                    .map_err(|_| err(format!("bad value {:?} in column f{j}", &rec[j])))?;
                xs.push(v);
            }
            ys.push(match &rec[d] {
                "0" => 0.0,
                "1" => 1.0,
                other => return Err(err(format!("label must be 0 or 1, found {other:?}"))),
            });
            ps.push(match &rec[d + 1] {
                "" => None,
                "1" => Some(1),
                "2" => Some(2),
                other => return Err(err(format!("position must be 1, 2 or empty, found {other:?}"))),
            });
            bs.push(match &rec[d + 2] {
                "" => None,
                s => {
                    let v: f64 = s.parse().map_err(|_| err(format!("bad bias value {s:?}")))?;
                    if !(0.0..=1.0).contains(&v) {
                        return Err(err(format!("bias value {v} outside [0, 1]")));
                    }
                    Some(v)
                }
            });
            if ps.last().unwrap().is_some() != ps[0].is_some() || bs.last().unwrap().is_some() != bs[0].is_some() {
                return Err(err("position/b columns must be filled for all rows or none".into()));
            }
        }
        let n = ys.len();
        let b = bs.iter().copied().collect::<Option<Vec<f64>>>().filter(|_| n > 0);
        let position = ps.iter().copied().collect::<Option<Vec<u8>>>().filter(|_| n > 0);
        Dataset::new(Matrix::from_vec(n, d, xs)?, ys, b, position)
    }

    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        self.write_csv(file)
    }

    pub fn import(path: impl AsRef<Path>) -> Result<Dataset> {
        Dataset::read_csv(BufReader::new(File::open(path)?))
    }
}

/// 17 significant digits; parses back to the identical `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Internal(format!("csv writer: {other:?}")),
    }
}

fn csv_parse(e: &csv::Error, fallback_line: u64) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line());
    Error::Parse {
        line,
        message: e.to_string(),
    }
}
