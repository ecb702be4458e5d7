//! Plain-text formats: headerless CSV matrices and the covariance-set JSON
//! document `{"d": int, "domains": [{"n": float, "S": [[...]]}]}`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CovarianceMatrix, CovarianceSet, Matrix, WeightedCovariance};
use crate::error::{shape_err, Error, Result};

/// Formats a float with 17 significant digits so it round-trips exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn read_matrix_csv<R: Read>(reader: R, has_header: bool) -> Result<Matrix> {
    read_matrix_csv_named(reader, has_header, Path::new("<csv>"))
}

pub(crate) fn read_matrix_csv_named<R: Read>(
    reader: R,
    has_header: bool,
    name: &Path,
) -> Result<Matrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::SchemaMismatch {
                        path: name.to_path_buf(),
                        row: r + 1,
                        col: c + 1,
                        detail: format!("not a finite number: {cell:?}"),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Matrix::from_rows(&rows)
}

pub fn read_matrix_csv_file(path: &Path, has_header: bool) -> Result<Matrix> {
    let file = std::fs::File::open(path)?;
    read_matrix_csv_named(file, has_header, path)
}

pub fn write_matrix_csv<W: Write>(mut writer: W, m: &Matrix) -> Result<()> {
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|&v| fmt_f64(v)).collect();
        writeln!(writer, "{}", line.join(","))?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CovarianceSetDoc {
    d: usize,
    domains: Vec<DomainDoc>,
}

#[derive(Serialize, Deserialize)]
struct DomainDoc {
    n: f64,
    #[serde(rename = "S")]
    s: Vec<Vec<f64>>,
}

impl CovarianceSet {
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CovarianceSetDoc = serde_json::from_str(text)?;
        let domains = doc
            .domains
            .into_iter()
            .enumerate()
            .map(|(k, dom)| {
                let m = Matrix::from_rows(&dom.s)?;
                if m.shape() != (doc.d, doc.d) {
                    return Err(shape_err(
                        "covariance set",
                        format!("domain {k} is {}x{}, header says d = {}", m.rows(), m.cols(), doc.d),
                    ));
                }
                Ok(WeightedCovariance {
                    cov: CovarianceMatrix::new(m)?,
                    weight: dom.n,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        CovarianceSet::new(domains)
    }

    pub fn to_json(&self) -> String {
        let doc = CovarianceSetDoc {
            d: self.dim(),
            domains: self
                .iter()
                .map(|(s, n)| DomainDoc { n, s: s.to_rows() })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("covariance set serialises")
    }

    pub fn read_json_file(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_and_header() {
        let m = Matrix::from_rows(&[vec![1.0, -2.5], vec![1e-300, 0.1]]).unwrap();
        let mut buf = Vec::new();
        write_matrix_csv(&mut buf, &m).unwrap();
        assert_eq!(read_matrix_csv(buf.as_slice(), false).unwrap(), m);

        let with_header = format!("a,b\n{}", String::from_utf8(buf).unwrap());
        assert_eq!(read_matrix_csv(with_header.as_bytes(), true).unwrap(), m);
    }

    #[test]
    fn csv_bad_cell_names_position() {
        let err = read_matrix_csv("1,2\n3,x\n".as_bytes(), false).unwrap_err();
        match err {
            Error::SchemaMismatch { row, col, .. } => assert_eq!((row, col), (2, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn covariance_json_round_trip() {
        let set = CovarianceSet::from_pairs([
            (Matrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap(), 9.0),
            (Matrix::identity(2), 4.0),
        ])
        .unwrap();
        let back = CovarianceSet::from_json(&set.to_json()).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn covariance_json_rejects_bad_dim() {
        let text = r#"{"d": 3, "domains": [{"n": 1.0, "S": [[1.0, 0.0], [0.0, 1.0]]}]}"#;
        assert!(CovarianceSet::from_json(text).is_err());
        let text = r#"{"d": 2, "domains": [{"n": 0.0, "S": [[1.0, 0.0], [0.0, 1.0]]}]}"#;
        assert!(CovarianceSet::from_json(text).is_err());
    }
}
