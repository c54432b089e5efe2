//! Append-only binary log of per-client round deltas.
//!
//! Layout (little endian): 8-byte magic, `u32` version, `u64` feature
//! count, `u64` client count, `u64` seed, the initial model as `f64`s, then
//! one record per (round, participant): `u64` round, `u64` client, `f64`
//! weight and the delta as `f64`s. Records of a round are contiguous.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::{RoundRecord, UpdateHistory};
use crate::error::{Error, Result};
use crate::ranker::LinearRanker;

const MAGIC: &[u8; 8] = b"FOLTRHIS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HistoryHeader {
    pub feature_count: usize,
    pub n_clients: usize,
    pub seed: u64,
}

pub struct HistoryWriter<W: Write> {
    inner: W,
    header: HistoryHeader,
    last_round: usize,
}

impl HistoryWriter<BufWriter<File>> {
    pub fn create(path: &Path, header: HistoryHeader, initial: &LinearRanker) -> Result<Self> {
        HistoryWriter::new(BufWriter::new(File::create(path)?), header, initial)
    }
}

impl<W: Write> HistoryWriter<W> {
    pub fn new(mut inner: W, header: HistoryHeader, initial: &LinearRanker) -> Result<Self> {
        if initial.dim() != header.feature_count {
            return Err(Error::History("initial model does not match the feature count".into()));
        }
        inner.write_all(MAGIC)?;
        inner.write_all(&VERSION.to_le_bytes())?;
        for v in [header.feature_count as u64, header.n_clients as u64, header.seed] {
            inner.write_all(&v.to_le_bytes())?;
        }
        write_f64s(&mut inner, &initial.weights)?;
        Ok(HistoryWriter {
            inner,
            header,
            last_round: 0,
        })
    }

    pub fn append(&mut self, record: &RoundRecord) -> Result<()> {
        if record.round != self.last_round + 1 {
            return Err(Error::History(format!(
                "round {} appended after round {}",
                record.round, self.last_round
            )));
        }
        for ((&client, &weight), delta) in record.participants.iter().zip(&record.weights).zip(&record.deltas) {
            if delta.len() != self.header.feature_count || client >= self.header.n_clients {
                return Err(Error::History(format!("malformed record for client {client}")));
            }
            self.inner.write_all(&(record.round as u64).to_le_bytes())?;
            self.inner.write_all(&(client as u64).to_le_bytes())?;
            self.inner.write_all(&weight.to_le_bytes())?;
            write_f64s(&mut self.inner, delta)?;
        }
        self.last_round = record.round;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| read_u64(r).map(f64::from_bits)).collect()
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == ErrorKind::UnexpectedEof {
        Error::History("truncated file".into())
    } else {
        Error::Io(e)
    }
}

/// Reads `[u64]` at the start of a record; `None` at a clean end of file.
fn read_record_start<R: Read>(r: &mut R) -> Result<Option<u64>> {
    let mut buf = [0u8; 8];
    let mut filled = 0;
    while filled < 8 {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(Error::History("truncated file".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Some(u64::from_le_bytes(buf)))
}

pub fn read_history<R: Read>(mut r: R) -> Result<(HistoryHeader, UpdateHistory)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::History("not a history file".into()));
    }
    let mut version = [0u8; 4];
    r.read_exact(&mut version).map_err(truncated)?;
    let version = u32::from_le_bytes(version);
    if version != VERSION {
        return Err(Error::History(format!("unsupported version {version}")));
    }
    let header = HistoryHeader {
        feature_count: read_u64(&mut r)? as usize,
        n_clients: read_u64(&mut r)? as usize,
        seed: read_u64(&mut r)?,
    };
    let mut history = UpdateHistory::new(LinearRanker::new(read_f64s(&mut r, header.feature_count)?));

    let mut current: Option<RoundRecord> = None;
    while let Some(round) = read_record_start(&mut r)? {
        let round = round as usize;
        let client = read_u64(&mut r)? as usize;
        let weight = f64::from_bits(read_u64(&mut r)?);
        let delta = read_f64s(&mut r, header.feature_count)?;
        if client >= header.n_clients {
            return Err(Error::History(format!("client {client} out of range")));
        }
        match current.as_mut() {
            Some(rec) if rec.round == round => {
                rec.participants.push(client);
                rec.weights.push(weight);
                rec.deltas.push(delta);
                continue;
            }
            _ => {}
        }
        if let Some(done) = current.take() {
            history.push(done);
        }
        if round != history.len() + 1 {
            return Err(Error::History(format!("round {round} out of order")));
        }
        current = Some(RoundRecord {
            round,
            participants: vec![client],
            weights: vec![weight],
            deltas: vec![delta],
        });
    }
    if let Some(done) = current {
        history.push(done);
    }
    Ok((header, history))
}

pub fn read_history_file(path: &Path) -> Result<(HistoryHeader, UpdateHistory)> {
    read_history(BufReader::new(File::open(path)?))
}
