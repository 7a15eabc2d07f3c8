//! Append-only record of simulator evaluations.
//!
//! The ledger is the integration point between the design loop, the CLI, and
//! external simulators: every attempted run is one row with its inputs in
//! natural units, its seed, and an outcome status. Failed runs are
//! first-class rows, and pending rows let external tools fill in results
//! offline. Serialized as CSV with the header
//! `iter,replicate,seed,x_1..x_p,y,status`.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::domain::Domain;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Pending,
    Ok,
    Failed,
}

impl RunStatus {
    fn as_str(&self) -> &'static str {
        match self {
            RunStatus::Pending => "pending",
            RunStatus::Ok => "ok",
            RunStatus::Failed => "failed",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "pending" => Ok(RunStatus::Pending),
            "ok" => Ok(RunStatus::Ok),
            "failed" => Ok(RunStatus::Failed),
            other => Err(Error::invalid(format!("unknown run status '{other}'"))),
        }
    }
}

/// One attempted simulator evaluation. `iter` 0 marks the initial design;
/// sequential batches count from 1.
#[derive(Debug, Clone)]
pub struct RunRow {
    pub iter: u64,
    pub replicate: u64,
    pub seed: u64,
    /// Inputs in natural units.
    pub x: Vec<f64>,
    pub y: Option<f64>,
    pub status: RunStatus,
}

/// In-memory ledger; append-only by construction of the public API.
#[derive(Debug, Clone, Default)]
pub struct RunLedger {
    rows: Vec<RunRow>,
}

impl RunLedger {
    pub fn new() -> Self {
        RunLedger { rows: Vec::new() }
    }

    pub fn push(&mut self, row: RunRow) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[RunRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.rows.first().map(|r| r.x.len())
    }

    /// Mark a pending row as completed (used when evaluating pending rows).
    pub fn complete(&mut self, index: usize, y: f64) {
        let row = &mut self.rows[index];
        row.y = Some(y);
        row.status = RunStatus::Ok;
    }

    pub fn fail(&mut self, index: usize) {
        let row = &mut self.rows[index];
        row.y = None;
        row.status = RunStatus::Failed;
    }

    pub fn pending_indices(&self) -> Vec<usize> {
        self.rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.status == RunStatus::Pending)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn n_successful(&self) -> usize {
        self.rows.iter().filter(|r| r.status == RunStatus::Ok).count()
    }

    /// Rows consumed by the sequential budget (everything past iteration 0).
    pub fn n_sequential(&self) -> usize {
        self.rows.iter().filter(|r| r.iter > 0).count()
    }

    pub fn last_iter(&self) -> u64 {
        self.rows.iter().map(|r| r.iter).max().unwrap_or(0)
    }

    /// Successful rows as (unit-scaled inputs, responses).
    pub fn successful_xy(&self, domain: &Domain) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let ok: Vec<&RunRow> = self.rows.iter().filter(|r| r.status == RunStatus::Ok).collect();
        if ok.is_empty() {
            return Err(Error::invalid("ledger holds no successful rows"));
        }
        let p = domain.dim();
        let mut x = DMatrix::zeros(ok.len(), p);
        let mut y = DVector::zeros(ok.len());
        for (i, row) in ok.iter().enumerate() {
            if row.x.len() != p {
                return Err(Error::invalid("ledger row dimension does not match domain"));
            }
            let u = domain.to_unit(&row.x);
            for k in 0..p {
                x[(i, k)] = u[k];
            }
            y[i] = row.y.ok_or_else(|| Error::invalid("successful row without response"))?;
        }
        Ok((x, y))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let p = self.dim().unwrap_or(0);
        let mut header = String::from("iter,replicate,seed");
        for k in 1..=p {
            header.push_str(&format!(",x_{k}"));
        }
        header.push_str(",y,status\n");
        w.write_all(header.as_bytes())?;
        for r in &self.rows {
            let mut line = format!("{},{},{}", r.iter, r.replicate, r.seed);
            for v in &r.x {
                line.push_str(&format!(",{v}"));
            }
            match r.y {
                Some(y) => line.push_str(&format!(",{y}")),
                None => line.push(','),
            }
            line.push_str(&format!(",{}\n", r.status.as_str()));
            w.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::invalid(format!("non-utf8 ledger: {e}")))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<RunLedger> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let headers = reader.headers()?.clone();
        let p = headers.len().saturating_sub(5);
        let mut ledger = RunLedger::new();
        for record in reader.records() {
            let record = record?;
            if record.len() != p + 5 {
                return Err(Error::invalid(format!(
                    "ledger row has {} fields, expected {}",
                    record.len(),
                    p + 5
                )));
            }
            let parse_u64 = |s: &str, what: &str| {
                s.parse::<u64>()
                    .map_err(|e| Error::invalid(format!("bad {what} '{s}': {e}")))
            };
            let iter = parse_u64(&record[0], "iter")?;
            let replicate = parse_u64(&record[1], "replicate")?;
            let seed = parse_u64(&record[2], "seed")?;
            let mut x = Vec::with_capacity(p);
            for k in 0..p {
                let s = &record[3 + k];
                x.push(
                    s.parse::<f64>()
                        .map_err(|e| Error::invalid(format!("bad input '{s}': {e}")))?,
                );
            }
            let y_str = &record[3 + p];
            let y = if y_str.is_empty() {
                None
            } else {
                Some(
                    y_str
                        .parse::<f64>()
                        .map_err(|e| Error::invalid(format!("bad response '{y_str}': {e}")))?,
                )
            };
            let status = RunStatus::parse(&record[4 + p])?;
            ledger.push(RunRow { iter, replicate, seed, x, y, status });
        }
        Ok(ledger)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write-then-rename keeps the on-disk ledger consistent under
        // interruption.
        let tmp = path.with_extension("csv.tmp");
        {
            let f = std::fs::File::create(&tmp)?;
            self.write_csv(std::io::BufWriter::new(f))?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunLedger> {
        let f = std::fs::File::open(path)?;
        RunLedger::read_csv(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_ledger() -> RunLedger {
        let mut l = RunLedger::new();
        l.push(RunRow {
            iter: 0,
            replicate: 0,
            seed: 11,
            x: vec![0.25, 3.5],
            y: Some(1.25),
            status: RunStatus::Ok,
        });
        l.push(RunRow {
            iter: 0,
            replicate: 1,
            seed: 12,
            x: vec![0.75, 4.5],
            y: None,
            status: RunStatus::Pending,
        });
        l.push(RunRow {
            iter: 1,
            replicate: 0,
            seed: 13,
            x: vec![0.5, 4.0],
            y: None,
            status: RunStatus::Failed,
        });
        l
    }

    #[test]
    fn csv_round_trip_is_byte_identical() {
        let l = sample_ledger();
        let text = l.to_csv_string().unwrap();
        assert!(text.starts_with("iter,replicate,seed,x_1,x_2,y,status\n"));
        let back = RunLedger::read_csv(text.as_bytes()).unwrap();
        assert_eq!(back.to_csv_string().unwrap(), text);
        assert_eq!(back.len(), 3);
        assert_eq!(back.rows()[1].status, RunStatus::Pending);
        assert_eq!(back.rows()[2].status, RunStatus::Failed);
    }

    #[test]
    fn successful_rows_scale_to_unit() {
        let l = sample_ledger();
        let d = Domain::new(vec![0.0, 3.0], vec![1.0, 5.0]).unwrap();
        let (x, y) = l.successful_xy(&d).unwrap();
        assert_eq!(x.nrows(), 1);
        assert_eq!(x[(0, 0)], 0.25);
        assert_eq!(x[(0, 1)], 0.25);
        assert_eq!(y[0], 1.25);
    }

    #[test]
    fn float_formatting_round_trips_exactly() {
        let mut l = RunLedger::new();
        let tricky = [0.1, 1.0 / 3.0, f64::MIN_POSITIVE, 1e300, -2.5e-17];
        for (i, v) in tricky.iter().enumerate() {
            l.push(RunRow {
                iter: 0,
                replicate: i as u64,
                seed: i as u64,
                x: vec![*v],
                y: Some(*v),
                status: RunStatus::Ok,
            });
        }
        let text = l.to_csv_string().unwrap();
        let back = RunLedger::read_csv(text.as_bytes()).unwrap();
        for (row, v) in back.rows().iter().zip(&tricky) {
            assert_eq!(row.x[0], *v);
            assert_eq!(row.y, Some(*v));
        }
    }
}
