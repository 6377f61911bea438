//! `HRSNAP1` matrix container: magic, `u64 n`, `u64 ℓ`, `n·ℓ` little-endian
//! `f64` in column-major order, then a JSON trailer running to end of file.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 7] = b"HRSNAP1";

pub fn write_matrix<W: Write>(mut w: W, m: &DMatrix<f64>, trailer: &serde_json::Value) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(8 * m.len());
    for v in m.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.write_all(serde_json::to_string(trailer)?.as_bytes())?;
    Ok(())
}

pub fn read_matrix<R: Read>(mut r: R) -> Result<(DMatrix<f64>, serde_json::Value)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 23 || &bytes[..7] != MAGIC {
        return Err(Error::Format("missing HRSNAP1 header".into()));
    }
    let word = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes")) as usize;
    let (n, l) = (word(7), word(15));
    let len = n.checked_mul(l).and_then(|c| c.checked_mul(8)).ok_or_else(|| Error::Format("matrix size overflows".into()))?;
    let end = 23usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::Format(format!("truncated payload for a {n}×{l} matrix")))?;
    let data: Vec<f64> = bytes[23..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let trailer = if end == bytes.len() { serde_json::Value::Null } else { serde_json::from_slice(&bytes[end..])? };
    Ok((DMatrix::from_vec(n, l, data), trailer))
}

pub fn save_matrix(path: &Path, m: &DMatrix<f64>, trailer: &serde_json::Value) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_matrix(&mut w, m, trailer)?;
    w.flush()?;
    Ok(())
}

pub fn load_matrix(path: &Path) -> Result<(DMatrix<f64>, serde_json::Value)> {
    read_matrix(std::fs::File::open(path)?)
}
