use std::path::Path;

use super::Example;
use crate::{Error, Result, Scalar};

/// Reads a CSV file with a header row whose last column is the label.
/// With `classification` the label must be a non-negative integer.
pub fn load_csv<T: Scalar>(path: &Path, classification: bool) -> Result<Vec<Example<T>>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        field: "csv".into(),
        reason: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            field: format!("csv.row[{row}]"),
            reason: e.to_string(),
        })?;
        if record.len() < 2 {
            return Err(Error::Parse {
                field: format!("csv.row[{row}]"),
                reason: "need at least one feature and a label".into(),
            });
        }
        let parse = |col: usize| -> Result<f64> {
            record[col].trim().parse::<f64>().map_err(|e| Error::Parse {
                field: format!("csv.row[{row}].col[{col}]"),
                reason: e.to_string(),
            })
        };
        let last = record.len() - 1;
        let x = (0..last).map(|c| parse(c).map(T::of)).collect::<Result<Vec<_>>>()?;
        let label = parse(last)?;
        let ex = if classification {
            if label < 0.0 || label.fract() != 0.0 {
                return Err(Error::Parse {
                    field: format!("csv.row[{row}].label"),
                    reason: format!("{label} is not a class index"),
                });
            }
            Example::classification(x, label as usize)
        } else {
            Example::regression(x, T::of(label))
        };
        out.push(ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::Target;

    #[test]
    fn reads_header_and_label_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "a,b,label\n1,2,0\n3.5,-1,2\n").unwrap();
        let ex = load_csv::<f64>(&path, true).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[1].x, vec![3.5, -1.0]);
        assert_eq!(ex[1].y, Target::Class(2));

        let reg = load_csv::<f64>(&path, false).unwrap();
        assert_eq!(reg[0].y, Target::Value(0.0));

        std::fs::write(&path, "a,label\n1,0.5\n").unwrap();
        assert!(load_csv::<f64>(&path, true).is_err());
    }
}
