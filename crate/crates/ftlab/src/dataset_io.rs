//! Dataset file format.
//!
//! Layout: magic `FTDS`, format version, provenance hash, provenance text,
//! the terminal-name table, then fixed-width token-id records. The loader
//! recomputes the provenance hash and rejects mismatching files.

use crate::data::{Dataset, EncodedSample, Provenance};
use crate::rng::fnv1a;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"FTDS";
pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum FileError {
    Io(std::io::Error),
    BadMagic,
    VersionMismatch { found: u32, expected: u32 },
    HashMismatch,
    Corrupt(&'static str),
}

impl fmt::Display for FileError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FileError::Io(e) => write!(f, "io error: {e}"),
            FileError::BadMagic => write!(f, "not a dataset file (bad magic)"),
            FileError::VersionMismatch { found, expected } => {
                write!(f, "dataset format version {found}, expected {expected}")
            }
            FileError::HashMismatch => write!(f, "provenance hash mismatch"),
            FileError::Corrupt(what) => write!(f, "corrupt dataset file: {what}"),
        }
    }
}

impl std::error::Error for FileError {}

impl From<std::io::Error> for FileError {
    fn from(e: std::io::Error) -> Self {
        FileError::Io(e)
    }
}

pub fn write_u16(w: &mut impl Write, v: u16) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
pub fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
pub fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
pub fn read_u16(r: &mut impl Read) -> std::io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}
pub fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
pub fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_string(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

pub fn read_string(r: &mut impl Read) -> Result<String, FileError> {
    let len = read_u32(r)? as usize;
    if len > 1 << 24 {
        return Err(FileError::Corrupt("string too long"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| FileError::Corrupt("non-utf8 string"))
}

pub fn save_dataset(
    path: &Path,
    dataset: &Dataset,
    terminal_names: &[String],
) -> Result<(), FileError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, DATASET_FORMAT_VERSION)?;
    let text = dataset.provenance.canonical_text();
    write_u64(&mut w, fnv1a(text.as_bytes()))?;
    write_string(&mut w, &text)?;
    write_u16(&mut w, terminal_names.len() as u16)?;
    for name in terminal_names {
        write_string(&mut w, name)?;
    }
    let context_len = dataset.samples.first().map(|s| s.token_ids.len()).unwrap_or(0);
    write_u64(&mut w, dataset.samples.len() as u64)?;
    write_u32(&mut w, context_len as u32)?;
    for s in &dataset.samples {
        debug_assert_eq!(s.token_ids.len(), context_len);
        for &t in &s.token_ids {
            write_u16(&mut w, t)?;
        }
        write_u16(&mut w, s.answer_position)?;
        write_u32(&mut w, s.answer_value)?;
        w.write_all(&[s.is_correlated as u8])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<(Dataset, Vec<String>), FileError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(FileError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != DATASET_FORMAT_VERSION {
        return Err(FileError::VersionMismatch {
            found: version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let stored_hash = read_u64(&mut r)?;
    let text = read_string(&mut r)?;
    if fnv1a(text.as_bytes()) != stored_hash {
        return Err(FileError::HashMismatch);
    }
    let provenance = Provenance::parse(&text);
    let n_terminals = read_u16(&mut r)? as usize;
    let mut terminal_names = Vec::with_capacity(n_terminals);
    for _ in 0..n_terminals {
        terminal_names.push(read_string(&mut r)?);
    }
    let n = read_u64(&mut r)? as usize;
    let context_len = read_u32(&mut r)? as usize;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let mut token_ids = Vec::with_capacity(context_len);
        for _ in 0..context_len {
            token_ids.push(read_u16(&mut r)?);
        }
        let answer_position = read_u16(&mut r)?;
        let answer_value = read_u32(&mut r)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        samples.push(EncodedSample {
            token_ids,
            answer_position,
            answer_value,
            is_correlated: flag[0] != 0,
        });
    }
    Ok((
        Dataset {
            samples,
            provenance,
        },
        terminal_names,
    ))
}
