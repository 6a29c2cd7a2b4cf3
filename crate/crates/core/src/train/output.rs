use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::EpochRecord;
use crate::error::{Error, Result};

/// One line of a predictions file; `pred` is empty when the model abstained.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub id: String,
    pub pred: Option<f64>,
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(csv_err)?;
    w.write_record(["id", "pred"]).map_err(csv_err)?;
    for row in rows {
        let pred = row.pred.map(|p| p.to_string()).unwrap_or_default();
        w.write_record([row.id.as_str(), pred.as_str()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = r.headers().map_err(csv_err)?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "pred"] {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!(
                "expected header `id,pred`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(csv_err)?;
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let id = rec.get(0).ok_or_else(|| parse_err("missing id".into()))?.to_string();
        let field = rec.get(1).unwrap_or("").trim();
        let pred = if field.is_empty() {
            None
        } else {
            let v: f64 = field
                .parse()
                .map_err(|e| parse_err(format!("bad prediction `{field}`: {e}")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("non-finite prediction `{field}`")));
            }
            Some(v)
        };
        rows.push(PredictionRow { id, pred });
    }
    Ok(rows)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("csv: {other:?}")),
    }
}

/// Appends one JSON object per epoch.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(MetricsWriter {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write(&mut self, record: &EpochRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predictions_round_trip_with_empty_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let rows = vec![
            PredictionRow {
                id: "m1".into(),
                pred: Some(0.1 + 0.2),
            },
            PredictionRow {
                id: "m2".into(),
                pred: None,
            },
            PredictionRow {
                id: "m,3".into(),
                pred: Some(-4.5e-7),
            },
        ];
        write_predictions(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("id,pred\nm1,0.30000000000000004\nm2,\n"));
        assert!(!text.contains('\r'));
        assert_eq!(read_predictions(&path).unwrap(), rows);
    }

    #[test]
    fn metrics_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::create(&path).unwrap();
        for e in 0..3 {
            w.write(&EpochRecord {
                epoch: e,
                lr: 1e-3,
                train_mae: 0.5,
                valid_mae: Some(0.6),
            })
            .unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(v["epoch"], 0);
        assert_eq!(v["valid_mae"], 0.6);
    }
}
