use std::fs::File;
use std::path::Path;

use gudrl_core::agent::EvalReport;
use serde::{Deserialize, Serialize};

use crate::error::{unwritable, CliError};

pub const CSV_HEADER: [&str; 5] = ["progress", "condition", "mean_return", "std_return", "seed"];

/// One row of a learning curve: an evaluation of one condition for one
/// seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub progress: u64,
    pub condition: String,
    pub mean_return: f64,
    pub std_return: f64,
    pub seed: u64,
}

pub fn points_from_report(report: &EvalReport, seed: u64) -> Vec<CurvePoint> {
    report
        .conditions
        .iter()
        .map(|c| CurvePoint {
            progress: report.progress,
            condition: c.label.clone(),
            mean_return: c.mean,
            std_return: c.std,
            seed,
        })
        .collect()
}

pub fn curve_to_string(points: &[CurvePoint]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in points {
        w.serialize(p).expect("writing to memory");
    }
    if points.is_empty() {
        w.write_record(CSV_HEADER).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("flushing to memory")).expect("csv output is utf-8")
}

pub fn write_curve(path: &Path, points: &[CurvePoint]) -> Result<(), CliError> {
    std::fs::write(path, curve_to_string(points)).map_err(unwritable(path))
}

pub fn read_curve(path: &Path) -> Result<Vec<CurvePoint>, CliError> {
    let malformed = |line: u64, reason: String| CliError::MalformedCsv {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let file = File::open(path).map_err(|e| malformed(0, e.to_string()))?;
    let mut r = csv::Reader::from_reader(file);
    let header = r.headers().map_err(|e| malformed(1, e.to_string()))?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(malformed(1, format!("expected header {}", CSV_HEADER.join(","))));
    }
    let mut points = Vec::new();
    for row in r.deserialize::<CurvePoint>() {
        let p = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            malformed(line, e.to_string())
        })?;
        points.push(p);
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(progress: u64, condition: &str, mean: f64, seed: u64) -> CurvePoint {
        CurvePoint {
            progress,
            condition: condition.into(),
            mean_return: mean,
            std_return: 1.5,
            seed,
        }
    }

    #[test]
    fn csv_round_trip() {
        let pts = vec![point(0, "all", 21.0, 0), point(5000, "half_length=0.25;mass=0.05;force=5", 0.1 + 0.2, 3)];
        let text = curve_to_string(&pts);
        assert!(text.starts_with("progress,condition,mean_return,std_return,seed\n"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        write_curve(&path, &pts).unwrap();
        assert_eq!(read_curve(&path).unwrap(), pts);
    }

    #[test]
    fn malformed_rows_report_their_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        std::fs::write(&path, "progress,condition,mean_return,std_return,seed\n0,all,1,0,0\n5,all,oops,0,0\n").unwrap();
        match read_curve(&path) {
            Err(CliError::MalformedCsv { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, "a,b\n").unwrap();
        assert!(matches!(read_curve(&path), Err(CliError::MalformedCsv { line: 1, .. })));
    }
}
