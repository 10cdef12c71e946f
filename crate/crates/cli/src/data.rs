//! Unit-level CSV files: an id column, covariates, and optional `y` and `z` columns.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{CliError, CliResult};

pub const OUTCOME_COLUMN: &str = "y";
pub const ASSIGNMENT_COLUMN: &str = "z";

#[derive(Debug, Clone, PartialEq)]
pub struct DataFile {
    pub ids: Vec<String>,
    pub covariate_names: Vec<String>,
    pub x: DMatrix<f64>,
    pub y: Option<DVector<f64>>,
    /// One-based treatment combinations as written in the file.
    pub z: Option<Vec<usize>>,
}

/// Read a data file. The first column is the unit id; `y` and `z` are the
/// outcome and assignment; every other column is a numeric covariate.
pub fn read_data(path: &Path) -> CliResult<DataFile> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    parse_data(file, path)
}

pub fn parse_data(reader: impl std::io::Read, path: &Path) -> CliResult<DataFile> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::Data { path: path.into(), row: 1, message: e.to_string() })?
        .iter()
        .map(str::to_owned)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(CliError::Data { path: path.into(), row: 1, message: "missing header".into() });
    }
    let find = |name: &str| header.iter().position(|h| h.eq_ignore_ascii_case(name)).filter(|&i| i > 0);
    let (y_col, z_col) = (find(OUTCOME_COLUMN), find(ASSIGNMENT_COLUMN));
    let cov_cols: Vec<usize> = (1..header.len()).filter(|i| Some(*i) != y_col && Some(*i) != z_col).collect();

    let mut ids = Vec::new();
    let mut cov = Vec::new();
    let mut y = Vec::new();
    let mut z = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let data_err = |message: String| CliError::Data { path: path.into(), row, message };
        let rec = rec.map_err(|e| data_err(e.to_string()))?;
        if rec.len() != header.len() {
            return Err(data_err(format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        let number = |i: usize| -> CliResult<f64> {
            let v: f64 = rec[i]
                .parse()
                .map_err(|_| data_err(format!("column \"{}\" is not a number: \"{}\"", header[i], &rec[i])))?;
            if !v.is_finite() {
                return Err(data_err(format!("column \"{}\" is not finite", header[i])));
            }
            Ok(v)
        };
        ids.push(rec[0].to_owned());
        for &c in &cov_cols {
            cov.push(number(c)?);
        }
        if let Some(c) = y_col {
            y.push(number(c)?);
        }
        if let Some(c) = z_col {
            let v: usize = rec[c]
                .parse()
                .ok()
                .filter(|v| *v >= 1)
                .ok_or_else(|| data_err(format!("assignment \"{}\" is not a positive integer", &rec[c])))?;
            z.push(v);
        }
    }
    if ids.is_empty() {
        return Err(CliError::file(path, "no data rows"));
    }
    let n = ids.len();
    Ok(DataFile {
        ids,
        covariate_names: cov_cols.iter().map(|&c| header[c].clone()).collect(),
        x: DMatrix::from_row_slice(n, cov_cols.len(), &cov),
        y: y_col.map(|_| DVector::from_vec(y)),
        z: z_col.map(|_| z),
    })
}

/// `id,z` rows with one-based combinations.
pub fn assignment_csv(ids: &[String], one_based: &[usize]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", ASSIGNMENT_COLUMN]).expect("in-memory write");
    for (id, z) in ids.iter().zip(one_based) {
        w.write_record([id.as_str(), &z.to_string()]).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 output")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_are_recognized() {
        let text = "id,age,Y,z,score\na,1.5,2.0,1,3\nb,2.5,4.0,2,-1\n";
        let d = parse_data(text.as_bytes(), Path::new("t.csv")).unwrap();
        assert_eq!(d.covariate_names, vec!["age", "score"]);
        assert_eq!(d.x, DMatrix::from_row_slice(2, 2, &[1.5, 3.0, 2.5, -1.0]));
        assert_eq!(d.y.unwrap().as_slice(), &[2.0, 4.0]);
        assert_eq!(d.z.unwrap(), vec![1, 2]);
    }

    #[test]
    fn ragged_row_is_located() {
        let text = "id,a,b\n1,0.1,0.2\n2,0.3\n";
        match parse_data(text.as_bytes(), Path::new("t.csv")) {
            Err(CliError::Data { row, .. }) => assert_eq!(row, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_numeric_covariate_rejected() {
        let text = "id,a\n1,zero\n";
        let err = parse_data(text.as_bytes(), Path::new("t.csv")).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
    }
}
