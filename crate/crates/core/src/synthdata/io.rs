//! Line-delimited JSON cohort files: one object per visit.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{DataError, Speed, Split, SubjectRecord, Visit};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitRow {
    pub subject: usize,
    pub split: Split,
    pub speed: Speed,
    pub time: f64,
    pub age: f64,
    pub grade: usize,
    pub severity: f64,
    pub x: Vec<f64>,
}

pub fn write_jsonl<W: Write>(subjects: &[SubjectRecord], mut out: W) -> Result<(), DataError> {
    for s in subjects {
        for v in &s.visits {
            let row =
                VisitRow { subject: s.id, split: s.split, speed: s.speed, time: v.time, age: v.age, grade: v.grade, severity: v.severity, x: v.x.clone() };
            serde_json::to_writer(&mut out, &row).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads rows grouped by subject in file order. Generator parameters are
/// not stored, so `truth` is `None`.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<SubjectRecord>, DataError> {
    let mut subjects: Vec<SubjectRecord> = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| DataError::Parse { line: n + 1, msg };
        let row: VisitRow = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let visit = Visit { time: row.time, age: row.age, severity: row.severity, grade: row.grade, x: row.x };
        match subjects.last_mut() {
            Some(s) if s.id == row.subject => {
                if s.split != row.split || s.speed != row.speed {
                    return Err(err(format!("subject {} changes split or speed", row.subject)));
                }
                if s.visits.last().is_some_and(|p| p.time >= visit.time) {
                    return Err(err(format!("subject {} visit times are not increasing", row.subject)));
                }
                s.visits.push(visit);
            }
            _ => {
                if subjects.iter().any(|s| s.id == row.subject) {
                    return Err(err(format!("subject {} is not contiguous", row.subject)));
                }
                subjects.push(SubjectRecord {
                    id: row.subject,
                    baseline_age: visit.age - visit.time,
                    speed: row.speed,
                    split: row.split,
                    visits: vec![visit],
                    truth: None,
                });
            }
        }
    }
    Ok(subjects)
}
