//! Sample tables and their CSV form.
//!
//! A table has a `label` column followed by `x0 .. x{d-1}`. The label is
//! left empty for unlabelled rows; a file is either fully labelled or fully
//! unlabelled.

use std::path::Path;

use nalgebra::DMatrix;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One sample per row.
    pub inputs: DMatrix<f64>,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(inputs: DMatrix<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != inputs.nrows() {
                return Err(Error::DimensionMismatch {
                    context: "dataset labels",
                    expected: inputs.nrows(),
                    found: l.len(),
                });
            }
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset inputs".into()));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Rows in the given order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            inputs: crate::filters::select_rows(&self.inputs, rows),
            labels: self
                .labels
                .as_ref()
                .map(|l| rows.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Rows whose label is `k`, as a matrix.
    pub fn class_rows(&self, k: usize) -> Option<DMatrix<f64>> {
        let labels = self.labels.as_ref()?;
        let idx: Vec<usize> = (0..self.len()).filter(|&i| labels[i] == k).collect();
        Some(crate::filters::select_rows(&self.inputs, &idx))
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["label".to_string()];
        header.extend((0..self.dim()).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![self
                .labels
                .as_ref()
                .map(|l| l[i].to_string())
                .unwrap_or_default()];
            rec.extend(self.inputs.row(i).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.get(0) != Some("label") || header.len() < 2 {
            return Err(Error::Format("sample table must start with a label column".into()));
        }
        let d = header.len() - 1;
        let mut values = Vec::new();
        let mut labels = Vec::new();
        let mut labelled: Option<bool> = None;
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let raw = rec.get(0).unwrap_or("").trim();
            let has = !raw.is_empty();
            if *labelled.get_or_insert(has) != has {
                return Err(Error::Format(format!(
                    "row {}: mixed labelled and unlabelled rows",
                    line + 1
                )));
            }
            if has {
                labels.push(raw.parse::<usize>().map_err(|e| {
                    Error::Format(format!("row {}: label {raw:?}: {e}", line + 1))
                })?);
            }
            for j in 1..=d {
                let f = rec.get(j).unwrap_or("").trim();
                values.push(f.parse::<f64>().map_err(|e| {
                    Error::Format(format!("row {}, column {j}: {f:?}: {e}", line + 1))
                })?);
            }
        }
        let n = values.len() / d;
        Self::new(
            DMatrix::from_row_slice(n, d, &values),
            labelled.unwrap_or(false).then_some(labels),
        )
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

/// Contiguous slice of a stream with stable sample ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<u64>,
    pub inputs: DMatrix<f64>,
    pub labels: Option<Vec<usize>>,
}

/// Splits a dataset into arrival batches of `size` (the last may be short).
/// Sample ids are row indices.
pub fn batches(data: &Dataset, size: usize) -> Result<Vec<Batch>> {
    if size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    Ok((0..data.len())
        .step_by(size)
        .map(|start| {
            let end = (start + size).min(data.len());
            Batch {
                ids: (start as u64..end as u64).collect(),
                inputs: data.inputs.rows(start, end - start).into_owned(),
                labels: data.labels.as_ref().map(|l| l[start..end].to_vec()),
            }
        })
        .collect())
}
