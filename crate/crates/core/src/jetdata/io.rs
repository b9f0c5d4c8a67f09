//! Dataset files: a one-particle-per-row csv and the `JJPA1` binary stream.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{JetRecord, RawParticle};
use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 5] = b"JJPA1";
const CSV_HEADER: &str = "jet_id,label,pt,eta,phi,energy,mass";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    Csv,
    Binary,
}

impl DataFormat {
    /// `.csv` files are csv, everything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => DataFormat::Csv,
            _ => DataFormat::Binary,
        }
    }
}

impl std::str::FromStr for DataFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(DataFormat::Csv),
            "binary" | "bin" => Ok(DataFormat::Binary),
            other => Err(Error::Config(format!("unknown data format {other:?}"))),
        }
    }
}

pub fn load_dataset(path: &Path, format: DataFormat) -> Result<Vec<JetRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_dataset(&bytes, format)
}

pub fn read_dataset(bytes: &[u8], format: DataFormat) -> Result<Vec<JetRecord>> {
    match format {
        DataFormat::Csv => {
            let text = std::str::from_utf8(bytes)
                .map_err(|e| Error::Parse { location: format!("byte {}", e.valid_up_to()), message: "invalid utf-8".into() })?;
            read_csv(text)
        }
        DataFormat::Binary => read_binary(bytes),
    }
}

fn finish_jet(index: usize, particles: Vec<RawParticle>, label: Option<u32>) -> Result<JetRecord> {
    JetRecord::new(particles, label).map_err(|e| Error::InvalidJet { jet: index, message: e.to_string() })
}

fn read_csv(text: &str) -> Result<Vec<JetRecord>> {
    let mut jets = Vec::new();
    let mut current: Option<(String, Option<u32>, Vec<RawParticle>)> = None;
    let mut seen_header = false;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let loc = || format!("line {}", lineno + 1);
        if !seen_header {
            if line != CSV_HEADER {
                return Err(Error::Parse { location: loc(), message: format!("expected header {CSV_HEADER:?}") });
            }
            seen_header = true;
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(Error::Parse { location: loc(), message: format!("expected 7 columns, found {}", cols.len()) });
        }
        let label = if cols[1].is_empty() {
            None
        } else {
            Some(cols[1].parse::<u32>().map_err(|e| Error::Parse { location: loc(), message: format!("label: {e}") })?)
        };
        let mut vals = [0.0; 5];
        for (v, s) in vals.iter_mut().zip(&cols[2..]) {
            *v = s.parse::<f64>().map_err(|e| Error::Parse { location: loc(), message: format!("{s:?}: {e}") })?;
        }
        let particle = RawParticle { pt: vals[0], eta: vals[1], phi: vals[2], energy: vals[3], mass: vals[4] };
        match &mut current {
            Some((id, lab, ps)) if id == cols[0] => {
                if *lab != label {
                    return Err(Error::Parse { location: loc(), message: format!("label changes within jet {id}") });
                }
                ps.push(particle);
            }
            _ => {
                if let Some((_, lab, ps)) = current.take() {
                    jets.push(finish_jet(jets.len(), ps, lab)?);
                }
                current = Some((cols[0].to_string(), label, vec![particle]));
            }
        }
    }
    if let Some((_, lab, ps)) = current {
        jets.push(finish_jet(jets.len(), ps, lab)?);
    }
    Ok(jets)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse { location: format!("offset {}", self.pos), message: "truncated record".into() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_binary(bytes: &[u8]) -> Result<Vec<JetRecord>> {
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(5)? != BINARY_MAGIC {
        return Err(Error::Parse { location: "offset 0".into(), message: "bad magic".into() });
    }
    let count = c.u32()? as usize;
    let mut jets = Vec::with_capacity(count.min(1 << 20));
    for index in 0..count {
        let at = c.pos;
        let label = match c.i32()? {
            -1 => None,
            l if l >= 0 => Some(l as u32),
            l => return Err(Error::Parse { location: format!("offset {at}"), message: format!("label {l}") }),
        };
        let n = c.u32()? as usize;
        let mut ps = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let (pt, eta, phi, energy, mass) = (c.f64()?, c.f64()?, c.f64()?, c.f64()?, c.f64()?);
            ps.push(RawParticle { pt, eta, phi, energy, mass });
        }
        jets.push(finish_jet(index, ps, label)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::Parse { location: format!("offset {}", c.pos), message: "trailing bytes".into() });
    }
    Ok(jets)
}

/// Serializes records into `out`.
pub fn write_dataset_to(records: &[JetRecord], format: DataFormat, out: &mut Vec<u8>) {
    match format {
        DataFormat::Csv => {
            out.extend_from_slice(CSV_HEADER.as_bytes());
            out.push(b'\n');
            for (id, jet) in records.iter().enumerate() {
                let label = jet.label.map(|l| l.to_string()).unwrap_or_default();
                for p in &jet.particles {
                    // `{}` on f64 prints the shortest representation that round-trips.
                    writeln!(out, "{id},{label},{},{},{},{},{}", p.pt, p.eta, p.phi, p.energy, p.mass).unwrap();
                }
            }
        }
        DataFormat::Binary => {
            out.extend_from_slice(BINARY_MAGIC);
            out.extend_from_slice(&(records.len() as u32).to_le_bytes());
            for jet in records {
                let label = jet.label.map_or(-1, |l| l as i32);
                out.extend_from_slice(&label.to_le_bytes());
                out.extend_from_slice(&(jet.particles.len() as u32).to_le_bytes());
                for p in &jet.particles {
                    for v in [p.pt, p.eta, p.phi, p.energy, p.mass] {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
    }
}

pub fn write_dataset(records: &[JetRecord], path: &Path, format: DataFormat) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset_to(records, format, &mut buf);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}
