//! Tabular input: routing columns into response, candidates and grouping
//! metadata, plus candidate standardization.

use std::collections::BTreeSet;
use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::Family;

/// Cluster membership with labels mapped to dense codes in order of first
/// appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct Grouping {
    pub codes: Vec<usize>,
    pub labels: Vec<String>,
}

impl Grouping {
    pub fn from_labels<S: AsRef<str>>(raw: &[S]) -> Self {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut labels = Vec::new();
        let codes = raw
            .iter()
            .map(|s| {
                let s = s.as_ref();
                *index.entry(s).or_insert_with(|| {
                    labels.push(s.to_string());
                    labels.len() - 1
                })
            })
            .collect();
        Grouping { codes, labels }
    }

    /// Contiguous blocks of `size` observations, labelled 1, 2, ...
    pub fn blocks(n_groups: usize, size: usize) -> Self {
        let codes = (0..n_groups * size).map(|i| i / size).collect();
        let labels = (1..=n_groups).map(|g| g.to_string()).collect();
        Grouping { codes, labels }
    }

    pub fn n_groups(&self) -> usize {
        self.labels.len()
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Observation indices of each cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_groups()];
        for (i, &g) in self.codes.iter().enumerate() {
            out[g].push(i);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub y: DVector<f64>,
    /// Fixed design, always retained. Column 0 is the intercept by default.
    pub x: DMatrix<f64>,
    /// Candidate predictors.
    pub z: DMatrix<f64>,
    pub z_names: Vec<String>,
    pub group: Option<Grouping>,
    pub slope: Option<DVector<f64>>,
    pub family: Family,
    pub standardized: bool,
}

impl Dataset {
    /// Intercept-only fixed design, candidates named V1..VK.
    pub fn new(y: DVector<f64>, z: DMatrix<f64>, family: Family) -> Result<Self> {
        let n = y.len();
        let names = (1..=z.ncols()).map(|k| format!("V{k}")).collect();
        let d = Dataset {
            y,
            x: DMatrix::from_element(n, 1, 1.0),
            z,
            z_names: names,
            group: None,
            slope: None,
            family,
            standardized: false,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn with_x(mut self, x: DMatrix<f64>) -> Result<Self> {
        self.x = x;
        self.validate()?;
        Ok(self)
    }

    pub fn with_group(mut self, group: Grouping) -> Result<Self> {
        self.group = Some(group);
        self.validate()?;
        Ok(self)
    }

    pub fn with_slope(mut self, t: DVector<f64>) -> Result<Self> {
        self.slope = Some(t);
        self.validate()?;
        Ok(self)
    }

    /// Same covariates, different response.
    pub fn with_response(&self, y: DVector<f64>, family: Family) -> Self {
        Dataset {
            y,
            family,
            ..self.clone()
        }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn k(&self) -> usize {
        self.z.ncols()
    }

    fn validate(&self) -> Result<()> {
        let n = self.y.len();
        let check = |what: &str, len: usize| {
            if len != n {
                Err(Error::Dimension(format!(
                    "{what} has {len} rows, response has {n}"
                )))
            } else {
                Ok(())
            }
        };
        check("X", self.x.nrows())?;
        check("Z", self.z.nrows())?;
        if self.z_names.len() != self.z.ncols() {
            return Err(Error::Dimension(format!(
                "{} names for {} candidate columns",
                self.z_names.len(),
                self.z.ncols()
            )));
        }
        if let Some(g) = &self.group {
            check("group", g.len())?;
        }
        if let Some(t) = &self.slope {
            check("slope covariate", t.len())?;
        }
        validate_response(&self.y, self.family)
    }

    /// Candidates centered and scaled to unit sample SD.
    pub fn standardize(&self) -> Result<Dataset> {
        let mut z = self.z.clone();
        for (j, mut col) in z.column_iter_mut().enumerate() {
            let (mean, sd) = mean_sd(col.as_slice());
            if !(sd > 0.0) || !sd.is_finite() {
                return Err(Error::ConstantColumn {
                    name: self.z_names[j].clone(),
                });
            }
            col.apply(|v| *v = (*v - mean) / sd);
        }
        Ok(Dataset {
            z,
            standardized: true,
            ..self.clone()
        })
    }

    /// Slope covariate centered and scaled to unit sample SD.
    pub fn standardize_slope(&self) -> Result<Dataset> {
        let t = self.slope.as_ref().ok_or(Error::MissingSlope)?;
        let (mean, sd) = mean_sd(t.as_slice());
        if !(sd > 0.0) {
            return Err(Error::ConstantColumn {
                name: "slope covariate".into(),
            });
        }
        Ok(Dataset {
            slope: Some(t.map(|v| (v - mean) / sd)),
            ..self.clone()
        })
    }

    /// Write `y[,group][,t],V...` with 17 significant digits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = std::io::BufWriter::new(File::create(path).map_err(io)?);
        let mut header = vec!["y".to_string()];
        if self.group.is_some() {
            header.push("group".into());
        }
        if self.slope.is_some() {
            header.push("t".into());
        }
        header.extend(self.z_names.iter().cloned());
        writeln!(out, "{}", header.join(",")).map_err(io)?;
        for i in 0..self.n() {
            let mut row = vec![fmt_f64(self.y[i])];
            if let Some(g) = &self.group {
                row.push(g.labels[g.codes[i]].clone());
            }
            if let Some(t) = &self.slope {
                row.push(fmt_f64(t[i]));
            }
            row.extend(self.z.row(i).iter().map(|&v| fmt_f64(v)));
            writeln!(out, "{}", row.join(",")).map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

/// Float formatting used in every output file.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

fn validate_response(y: &DVector<f64>, family: Family) -> Result<()> {
    for (i, &v) in y.iter().enumerate() {
        let ok = match family {
            Family::Gaussian => v.is_finite(),
            Family::Poisson => v >= 0.0 && v.fract() == 0.0 && v.is_finite(),
            Family::Binomial => v == 0.0 || v == 1.0,
        };
        if !ok {
            return Err(Error::InvalidResponse {
                row: i + 1,
                value: v,
                family: family.name(),
            });
        }
    }
    Ok(())
}

/// Column routing for [`load_dataset`]. Indices are 0-based.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoadSpec {
    pub y_col: usize,
    pub z_cols: Vec<usize>,
    pub group_col: Option<usize>,
    pub slope_col: Option<usize>,
    pub family: Family,
    #[serde(default)]
    pub standardize_slope: bool,
}

/// Read a comma-delimited file with a header row. Column and row numbers in
/// error messages are 1-based (rows exclude the header).
pub fn load_dataset(path: &Path, spec: &LoadSpec) -> Result<Dataset> {
    let mut seen = BTreeSet::new();
    let mut overlap = BTreeSet::new();
    let all = std::iter::once(spec.y_col)
        .chain(spec.z_cols.iter().copied())
        .chain(spec.group_col)
        .chain(spec.slope_col);
    for c in all {
        if !seen.insert(c) {
            overlap.insert(c + 1);
        }
    }
    if !overlap.is_empty() {
        return Err(Error::OverlappingColumns {
            columns: overlap.into_iter().collect(),
        });
    }

    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader.headers()?.clone();
    let ncols = headers.len();
    if let Some(&max) = seen.iter().next_back() {
        if max >= ncols {
            return Err(Error::ColumnOutOfRange {
                index: max + 1,
                ncols,
            });
        }
    }

    let mut y = Vec::new();
    let mut z_data: Vec<Vec<f64>> = vec![Vec::new(); spec.z_cols.len()];
    let mut groups = Vec::new();
    let mut slope = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let cell = |c: usize| -> Result<f64> {
            let raw = record.get(c).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::NonNumeric {
                    row: r + 1,
                    col: c + 1,
                    value: raw.to_string(),
                })
        };
        y.push(cell(spec.y_col)?);
        for (j, &c) in spec.z_cols.iter().enumerate() {
            z_data[j].push(cell(c)?);
        }
        if let Some(c) = spec.group_col {
            let raw = record.get(c).unwrap_or("");
            if raw.is_empty() {
                return Err(Error::NonNumeric {
                    row: r + 1,
                    col: c + 1,
                    value: String::new(),
                });
            }
            groups.push(raw.to_string());
        }
        if let Some(c) = spec.slope_col {
            slope.push(cell(c)?);
        }
    }

    let n = y.len();
    let z = DMatrix::from_fn(n, spec.z_cols.len(), |i, j| z_data[j][i]);
    let names = spec
        .z_cols
        .iter()
        .map(|&c| headers.get(c).unwrap_or("").to_string())
        .collect();
    let mut d = Dataset::new(DVector::from_vec(y), z, spec.family)?;
    d.z_names = names;
    if spec.group_col.is_some() {
        d = d.with_group(Grouping::from_labels(&groups))?;
    }
    if spec.slope_col.is_some() {
        d = d.with_slope(DVector::from_vec(slope))?;
        if spec.standardize_slope {
            d = d.standardize_slope()?;
        }
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn spec(y: usize, z: std::ops::Range<usize>) -> LoadSpec {
        LoadSpec {
            y_col: y,
            z_cols: z.collect(),
            group_col: None,
            slope_col: None,
            family: Family::Gaussian,
            standardize_slope: false,
        }
    }

    #[test]
    fn standardize_small_column() {
        let d = Dataset::new(
            DVector::from_vec(vec![0.0, 1.0, 2.0]),
            DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]),
            Family::Gaussian,
        )
        .unwrap();
        let s = d.standardize().unwrap();
        let col: Vec<f64> = s.z.column(0).iter().copied().collect();
        for (a, b) in col.iter().zip([-1.0, 0.0, 1.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(s.y, d.y);
    }

    #[test]
    fn standardize_rejects_constant_column() {
        let d = Dataset::new(
            DVector::from_vec(vec![0.0, 1.0, 2.0]),
            DMatrix::from_column_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 4.0, 4.0]),
            Family::Gaussian,
        )
        .unwrap();
        match d.standardize() {
            Err(Error::ConstantColumn { name }) => assert_eq!(name, "V2"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn routes_columns_and_codes_groups() {
        let f = write_tmp("y,subj,time,a,b\n1.5,s2,0,1,2\n2.5,s1,1,3,5\n0.5,s2,2,2,1\n");
        let d = load_dataset(
            f.path(),
            &LoadSpec {
                group_col: Some(1),
                slope_col: Some(2),
                ..spec(0, 3..5)
            },
        )
        .unwrap();
        assert_eq!(d.n(), 3);
        assert_eq!(d.k(), 2);
        assert_eq!(d.z_names, vec!["a", "b"]);
        let g = d.group.unwrap();
        assert_eq!(g.codes, vec![0, 1, 0]);
        assert_eq!(g.labels, vec!["s2", "s1"]);
        assert_eq!(d.slope.unwrap().as_slice(), &[0.0, 1.0, 2.0]);
        assert_eq!(d.x.ncols(), 1);
    }

    #[test]
    fn missing_group_column_leaves_group_absent() {
        let f = write_tmp("y,a\n1,2\n3,4\n");
        let d = load_dataset(f.path(), &spec(0, 1..2)).unwrap();
        assert!(d.group.is_none());
        assert!(d.slope.is_none());
    }

    #[test]
    fn overlapping_columns_are_named() {
        let f = write_tmp("a,b,c,d,e,f\n1,2,3,4,5,6\n");
        let err = load_dataset(
            f.path(),
            &LoadSpec {
                group_col: Some(4),
                ..spec(0, 2..6)
            },
        )
        .unwrap_err();
        match err {
            Error::OverlappingColumns { columns } => assert_eq!(columns, vec![5]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_reports_coordinates() {
        let f = write_tmp("y,a\n1,2\n3,oops\n");
        match load_dataset(f.path(), &spec(0, 1..2)).unwrap_err() {
            Error::NonNumeric { row, col, value } => {
                assert_eq!((row, col, value.as_str()), (2, 2, "oops"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn binomial_response_outside_unit_set_rejected() {
        let f = write_tmp("y,a\n1,2\n2,4\n0,1\n");
        let err = load_dataset(
            f.path(),
            &LoadSpec {
                family: Family::Binomial,
                ..spec(0, 1..2)
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidResponse { row: 2, .. }));
    }

    #[test]
    fn csv_write_back_round_trips() {
        let y = DVector::from_vec(vec![0.1, -2.0 / 3.0, 1e-7, 12345.678]);
        let z = DMatrix::from_fn(4, 2, |i, j| (i as f64 + 1.0).sqrt() * (j as f64 - 0.3));
        let d = Dataset::new(y, z, Family::Gaussian)
            .unwrap()
            .with_group(Grouping::from_labels(&["a", "a", "b", "b"]))
            .unwrap()
            .with_slope(DVector::from_vec(vec![0.0, 1.0, 0.0, 1.0]))
            .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        d.write_csv(f.path()).unwrap();
        let back = load_dataset(
            f.path(),
            &LoadSpec {
                group_col: Some(1),
                slope_col: Some(2),
                ..spec(0, 3..5)
            },
        )
        .unwrap();
        assert_eq!(back.y, d.y);
        assert_eq!(back.z, d.z);
        assert_eq!(back.group, d.group);
        assert_eq!(back.slope, d.slope);
    }
}
