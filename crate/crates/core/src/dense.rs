//! Dense little-endian `f32` matrix files.
//!
//! Layout: 4-byte magic, then `version`, `rows`, `cols` as `u32` LE, then
//! `rows * cols` row-major `f32` LE values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const DENSE_MAGIC: &[u8; 4] = b"LSIM";
pub const DENSE_VERSION: u32 = 1;
pub const DENSE_HEADER_LEN: usize = 16;

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_f32s(w: &mut impl Write, values: impl IntoIterator<Item = f32>) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_f32s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn dim_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{what} {n} does not fit in u32")))
}

pub fn write_dense(
    w: &mut impl Write,
    rows: usize,
    cols: usize,
    values: impl IntoIterator<Item = f32>,
) -> Result<()> {
    let (r, c) = (dim_u32(rows, "row count")?, dim_u32(cols, "column count")?);
    let io = |e| Error::io("<dense writer>", e);
    w.write_all(DENSE_MAGIC).map_err(io)?;
    write_u32(w, DENSE_VERSION).map_err(io)?;
    write_u32(w, r).map_err(io)?;
    write_u32(w, c).map_err(io)?;
    write_f32s(w, values).map_err(io)?;
    Ok(())
}

pub fn read_dense(r: &mut impl Read) -> Result<(usize, usize, Vec<f32>)> {
    let mut magic = [0u8; 4];
    let short = |e: std::io::Error| Error::Format(format!("truncated header: {e}"));
    r.read_exact(&mut magic).map_err(short)?;
    if &magic != DENSE_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r).map_err(short)?;
    if version != DENSE_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let rows = read_u32(r).map_err(short)? as usize;
    let cols = read_u32(r).map_err(short)? as usize;
    let values = read_f32s(r, rows * cols)
        .map_err(|e| Error::Format(format!("truncated payload: {e}")))?;
    let mut probe = [0u8; 1];
    if r.read(&mut probe).map_err(|e| Error::Format(e.to_string()))? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok((rows, cols, values))
}

pub fn save_dense(path: &Path, rows: usize, cols: usize, values: impl IntoIterator<Item = f32>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dense(&mut w, rows, cols, values)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dense(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dense(&mut BufReader::new(file))
}
