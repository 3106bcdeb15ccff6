//! Little-endian binary primitives shared by the on-disk formats
//! (representation files, corpus items, checkpoints).

use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use std::io::{Read, Write};

pub(crate) fn write_u16(w: &mut impl Write, v: u16) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_exact(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format("unexpected end of file"))?;
    Ok(buf)
}

pub(crate) fn read_u16(r: &mut impl Read) -> Result<u16> {
    Ok(u16::from_le_bytes(read_exact(r, 2)?.try_into().unwrap()))
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r, 4)?.try_into().unwrap()))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r, 8)?.try_into().unwrap()))
}

pub(crate) fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(read_exact(r, 8)?.try_into().unwrap()))
}

pub(crate) fn write_string(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn read_string(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    String::from_utf8(read_exact(r, len)?).map_err(|_| Error::format("invalid utf-8 string"))
}

pub(crate) fn write_array2(w: &mut impl Write, a: &Array2<f64>) -> Result<()> {
    write_u64(w, a.nrows() as u64)?;
    write_u64(w, a.ncols() as u64)?;
    for v in a.iter() {
        write_f64(w, *v)?;
    }
    Ok(())
}

pub(crate) fn read_array2(r: &mut impl Read) -> Result<Array2<f64>> {
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    if rows.checked_mul(cols).is_none() || rows * cols > 1 << 32 {
        return Err(Error::format("array dimensions out of range"));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(read_f64(r)?);
    }
    Array2::from_shape_vec((rows, cols), data).map_err(|_| Error::format("bad array shape"))
}

pub(crate) fn write_array1(w: &mut impl Write, a: &Array1<f64>) -> Result<()> {
    write_u64(w, a.len() as u64)?;
    for v in a.iter() {
        write_f64(w, *v)?;
    }
    Ok(())
}

pub(crate) fn read_array1(r: &mut impl Read) -> Result<Array1<f64>> {
    let len = read_u64(r)? as usize;
    if len > 1 << 32 {
        return Err(Error::format("array length out of range"));
    }
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(read_f64(r)?);
    }
    Ok(Array1::from_vec(data))
}

pub(crate) fn expect_magic(r: &mut impl Read, magic: &[u8]) -> Result<()> {
    let got = read_exact(r, magic.len())?;
    if got != magic {
        return Err(Error::format(format!(
            "bad magic: expected {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}
