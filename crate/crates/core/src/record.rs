//! Trajectory logs: CSV for inspection, little-endian binary for exact replay.

use std::io::{self, BufRead, BufReader, Read, Write};

use thiserror::Error;

use crate::sme::TrajectoryRecord;

const MAGIC: &[u8; 4] = b"DWTR";
pub const LOG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported log version {0}")]
    UnsupportedVersion(u32),
    #[error("column lengths differ")]
    RaggedColumns,
    #[error("malformed csv line {line}: {reason}")]
    Csv { line: usize, reason: String },
}

/// Per-step columns of one trajectory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryLog {
    pub dt: f64,
    pub currents: Vec<f64>,
    pub actions: Vec<f64>,
    pub fidelities: Vec<f64>,
    pub expect_x2: Vec<f64>,
}

impl TrajectoryLog {
    pub fn from_record(record: &TrajectoryRecord, dt: f64) -> Self {
        Self {
            dt,
            currents: record.currents.clone(),
            actions: record.actions.clone(),
            fidelities: record.fidelities.clone(),
            expect_x2: record.expect_x2.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.currents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.currents.is_empty()
    }

    fn check(&self) -> Result<(), RecordError> {
        let n = self.len();
        if self.actions.len() != n || self.fidelities.len() != n || self.expect_x2.len() != n {
            return Err(RecordError::RaggedColumns);
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), RecordError> {
        self.check()?;
        writeln!(w, "step,t,current,action,fidelity,expect_x2")?;
        for k in 0..self.len() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                k,
                (k + 1) as f64 * self.dt,
                self.currents[k],
                self.actions[k],
                self.fidelities[k],
                self.expect_x2[k]
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, RecordError> {
        let mut log = TrajectoryLog::default();
        for (line_no, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            if line_no == 0 || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| RecordError::Csv {
                    line: line_no + 1,
                    reason: e.to_string(),
                })?;
            if fields.len() != 6 {
                return Err(RecordError::Csv {
                    line: line_no + 1,
                    reason: format!("expected 6 fields, found {}", fields.len()),
                });
            }
            if log.currents.is_empty() {
                log.dt = fields[1];
            }
            log.currents.push(fields[2]);
            log.actions.push(fields[3]);
            log.fidelities.push(fields[4]);
            log.expect_x2.push(fields[5]);
        }
        Ok(log)
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), RecordError> {
        self.check()?;
        w.write_all(MAGIC)?;
        w.write_all(&LOG_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&self.dt.to_le_bytes())?;
        for col in [&self.currents, &self.actions, &self.fidelities, &self.expect_x2] {
            for v in col.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self, RecordError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(RecordError::BadMagic);
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != LOG_FORMAT_VERSION {
            return Err(RecordError::UnsupportedVersion(version));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8)?;
        let dt = f64::from_le_bytes(b8);
        let mut read_col = |r: &mut R| -> io::Result<Vec<f64>> {
            (0..n)
                .map(|_| {
                    r.read_exact(&mut b8)?;
                    Ok(f64::from_le_bytes(b8))
                })
                .collect()
        };
        Ok(Self {
            dt,
            currents: read_col(&mut r)?,
            actions: read_col(&mut r)?,
            fidelities: read_col(&mut r)?,
            expect_x2: read_col(&mut r)?,
        })
    }
}
