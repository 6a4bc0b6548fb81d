//! Run tables: design points paired with simulator outputs, persisted as CSV.
//!
//! Column order is fixed: `run_id, wave, status, seed, timestamp`, then one
//! `u_<name>` column per input (unit coordinates), one `raw_<name>` column per
//! input, one `f<k>` column per output, and a trailing `failure` column.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, parse_f64};
use crate::space::ParameterSpace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
    /// Designed but not yet simulated.
    Planned,
}

impl RunStatus {
    fn as_str(self) -> &'static str {
        match self {
            RunStatus::Ok => "ok",
            RunStatus::Failed => "failed",
            RunStatus::Planned => "planned",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "ok" => Some(RunStatus::Ok),
            "failed" => Some(RunStatus::Failed),
            "planned" => Some(RunStatus::Planned),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run_id: u64,
    pub wave: usize,
    pub status: RunStatus,
    pub seed: u64,
    pub timestamp: u64,
    pub unit: Vec<f64>,
    pub raw: Vec<f64>,
    pub outputs: Vec<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTable {
    inputs: Vec<String>,
    outputs: usize,
    rows: Vec<RunRecord>,
}

impl RunTable {
    pub fn new(inputs: Vec<String>, outputs: usize) -> Self {
        RunTable {
            inputs,
            outputs,
            rows: Vec::new(),
        }
    }

    pub fn for_space(space: &ParameterSpace, outputs: usize) -> Self {
        Self::new(space.names().map(str::to_string).collect(), outputs)
    }

    /// Builds a table of `ok` rows directly from points and outputs (ids 0..n).
    pub fn from_points(points: &[Vec<f64>], outputs: &[Vec<f64>]) -> Result<Self> {
        let d = points.first().map_or(0, Vec::len);
        let m = outputs.first().map_or(0, Vec::len);
        let mut t = Self::new((0..d).map(|k| format!("x{k}")).collect(), m);
        for (i, (x, f)) in points.iter().zip(outputs).enumerate() {
            t.push(RunRecord {
                run_id: i as u64,
                wave: 0,
                status: RunStatus::Ok,
                seed: 0,
                timestamp: 0,
                unit: x.clone(),
                raw: x.clone(),
                outputs: f.clone(),
                failure: None,
            })?;
        }
        Ok(t)
    }

    pub fn dimension(&self) -> usize {
        self.inputs.len()
    }

    pub fn output_count(&self) -> usize {
        self.outputs
    }

    pub fn input_names(&self) -> &[String] {
        &self.inputs
    }

    pub fn rows(&self) -> &[RunRecord] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn ok_rows(&self) -> impl Iterator<Item = &RunRecord> {
        self.rows.iter().filter(|r| r.status == RunStatus::Ok)
    }

    pub fn ok_count(&self) -> usize {
        self.ok_rows().count()
    }

    pub fn failed_count(&self) -> usize {
        self.rows.iter().filter(|r| r.status == RunStatus::Failed).count()
    }

    pub fn contains_id(&self, id: u64) -> bool {
        self.rows.iter().any(|r| r.run_id == id)
    }

    /// Unit coordinates and values of `output` over the successful runs.
    pub fn training_data(&self, output: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        self.ok_rows()
            .map(|r| (r.unit.clone(), r.outputs[output]))
            .unzip()
    }

    pub fn push(&mut self, row: RunRecord) -> Result<()> {
        if row.unit.len() != self.dimension() || row.raw.len() != self.dimension() {
            return Err(Error::Dimension {
                context: format!("run {} coordinates", row.run_id),
                expected: self.dimension(),
                found: row.unit.len(),
            });
        }
        if row.status == RunStatus::Ok && row.outputs.len() != self.outputs {
            return Err(Error::Dimension {
                context: format!("run {} outputs", row.run_id),
                expected: self.outputs,
                found: row.outputs.len(),
            });
        }
        if self.contains_id(row.run_id) {
            return Err(Error::State(format!("duplicate run id {}", row.run_id)));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Replaces the row with the same id (used when a planned run completes).
    pub fn upsert(&mut self, row: RunRecord) -> Result<()> {
        if let Some(pos) = self.rows.iter().position(|r| r.run_id == row.run_id) {
            let old = self.rows.remove(pos);
            if let Err(e) = self.push(row) {
                self.rows.insert(pos, old);
                return Err(e);
            }
            let new = self.rows.pop().expect("just pushed");
            self.rows.insert(pos, new);
            Ok(())
        } else {
            self.push(row)
        }
    }

    pub fn sort_by_id(&mut self) {
        self.rows.sort_by_key(|r| r.run_id);
    }

    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["run_id", "wave", "status", "seed", "timestamp"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend(self.inputs.iter().map(|n| format!("u_{n}")));
        h.extend(self.inputs.iter().map(|n| format!("raw_{n}")));
        h.extend((0..self.outputs).map(|k| format!("f{k}")));
        h.push("failure".into());
        h
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let err = |e: csv::Error| Error::parse("run table", e);
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header()).map_err(err)?;
        for r in &self.rows {
            let mut rec = vec![
                r.run_id.to_string(),
                r.wave.to_string(),
                r.status.as_str().to_string(),
                r.seed.to_string(),
                r.timestamp.to_string(),
            ];
            rec.extend(r.unit.iter().map(|v| fmt_f64(*v)));
            rec.extend(r.raw.iter().map(|v| fmt_f64(*v)));
            if r.status == RunStatus::Ok {
                rec.extend(r.outputs.iter().map(|v| fmt_f64(*v)));
            } else {
                rec.extend(std::iter::repeat_n(String::new(), self.outputs));
            }
            rec.push(r.failure.clone().unwrap_or_default());
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io("run table", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        crate::io::write_atomic(path, &buf)
    }

    pub fn read_csv<R: Read>(input: R, path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::parse(path, e))?
            .iter()
            .map(str::to_string)
            .collect();
        let fixed = ["run_id", "wave", "status", "seed", "timestamp"];
        if header.len() < fixed.len() + 1 || header[..fixed.len()] != fixed {
            return Err(Error::parse(path, "unexpected run table header"));
        }
        let inputs: Vec<String> = header[fixed.len()..]
            .iter()
            .take_while(|h| h.starts_with("u_"))
            .map(|h| h[2..].to_string())
            .collect();
        let d = inputs.len();
        let outputs = header.len() - fixed.len() - 2 * d - 1;
        let mut table = RunTable::new(inputs, outputs);
        if table.header() != header {
            return Err(Error::parse(path, "run table header does not follow the fixed column order"));
        }
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::parse(path, e))?;
            let field = |k: usize| rec.get(k).unwrap_or("");
            let int = |k: usize| {
                field(k)
                    .parse::<u64>()
                    .map_err(|_| Error::parse(path, format!("bad integer `{}` in column {}", field(k), header[k])))
            };
            let status = RunStatus::parse(field(2))
                .ok_or_else(|| Error::parse(path, format!("bad status `{}`", field(2))))?;
            let floats = |from: usize, n: usize| -> Result<Vec<f64>> {
                (from..from + n).map(|k| parse_f64(field(k), path)).collect()
            };
            let base = fixed.len();
            let unit = floats(base, d)?;
            let raw = floats(base + d, d)?;
            let out = if status == RunStatus::Ok {
                floats(base + 2 * d, outputs)?
            } else {
                Vec::new()
            };
            let failure = Some(field(base + 2 * d + outputs).to_string()).filter(|s| !s.is_empty());
            table.push(RunRecord {
                run_id: int(0)?,
                wave: int(1)? as usize,
                status,
                seed: int(3)?,
                timestamp: int(4)?,
                unit,
                raw,
                outputs: out,
                failure,
            })?;
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(f, path)
    }

    /// Unit points appearing in both tables (bitwise-equal coordinates).
    pub fn shared_points(&self, other: &RunTable) -> usize {
        let keys: HashSet<Vec<u64>> = self
            .rows
            .iter()
            .map(|r| r.unit.iter().map(|v| v.to_bits()).collect())
            .collect();
        other
            .rows
            .iter()
            .filter(|r| keys.contains(&r.unit.iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(id: u64, status: RunStatus, unit: Vec<f64>, outputs: Vec<f64>) -> RunRecord {
        RunRecord {
            run_id: id,
            wave: 1,
            status,
            seed: 9,
            timestamp: 0,
            raw: unit.iter().map(|v| 10.0 * v).collect(),
            unit,
            outputs,
            failure: (status == RunStatus::Failed).then(|| "exit".to_string()),
        }
    }

    #[test]
    fn rejects_duplicates_and_bad_lengths() {
        let mut t = RunTable::new(vec!["a".into(), "b".into()], 2);
        t.push(row(1, RunStatus::Ok, vec![0.1, 0.2], vec![1.0, 2.0])).unwrap();
        assert!(t.push(row(1, RunStatus::Ok, vec![0.1, 0.2], vec![1.0, 2.0])).is_err());
        assert!(t.push(row(2, RunStatus::Ok, vec![0.1], vec![1.0, 2.0])).is_err());
        assert!(t.push(row(3, RunStatus::Ok, vec![0.1, 0.2], vec![1.0])).is_err());
        t.push(row(4, RunStatus::Failed, vec![0.1, 0.3], vec![])).unwrap();
        assert_eq!(t.ok_count(), 1);
        assert_eq!(t.failed_count(), 1);
    }

    #[test]
    fn header_layout() {
        let t = RunTable::new(vec!["a".into()], 2);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "run_id,wave,status,seed,timestamp,u_a,raw_a,f0,f1,failure\n");
    }

    proptest! {
        #[test]
        fn csv_round_trip(
            pts in prop::collection::vec((prop::collection::vec(-1.0f64..=1.0, 3), prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 2), any::<bool>()), 1..20)
        ) {
            let mut t = RunTable::new(vec!["a".into(), "b".into(), "c".into()], 2);
            for (i, (u, f, ok)) in pts.into_iter().enumerate() {
                let status = if ok { RunStatus::Ok } else { RunStatus::Failed };
                t.push(row(i as u64, status, u, if ok { f } else { vec![] })).unwrap();
            }
            let mut buf = Vec::new();
            t.write_csv(&mut buf).unwrap();
            let back = RunTable::read_csv(&buf[..], Path::new("t.csv")).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
