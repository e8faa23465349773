//! Binary debug dump of a [`HodlrMatrix`].
//!
//! Layout (little-endian): magic `HODLRDMP`, `u32` version, `u64` n,
//! `u32` levels, `u64` leaf size, `f64` eps; then for every off-diagonal block
//! in level order `u64` rows, `u64` cols, `u64` rank, `U` and `V` row-major;
//! then for every leaf `u64` size and the block row-major.

use std::io::{Read, Write};

use nalgebra::DMatrix;

use super::HodlrMatrix;
use crate::error::{Error, Result};
use crate::lowrank::LowRankFactor;

const MAGIC: &[u8; 8] = b"HODLRDMP";
pub const DUMP_VERSION: u32 = 1;

fn put_u64<W: Write>(w: &mut W, v: usize) -> Result<()> {
    w.write_all(&(v as u64).to_le_bytes())?;
    Ok(())
}

fn put_matrix<W: Write>(w: &mut W, m: &DMatrix<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(m.len() * 8);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            buf.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_dump<W: Write>(h: &HodlrMatrix, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&DUMP_VERSION.to_le_bytes())?;
    put_u64(&mut w, h.n())?;
    w.write_all(&(h.levels() as u32).to_le_bytes())?;
    put_u64(&mut w, h.leaf_size())?;
    w.write_all(&h.eps().to_le_bytes())?;
    for level in h.offdiag_levels() {
        for f in level {
            put_u64(&mut w, f.rows())?;
            put_u64(&mut w, f.cols())?;
            put_u64(&mut w, f.rank())?;
            put_matrix(&mut w, &f.u)?;
            put_matrix(&mut w, &f.v)?;
        }
    }
    for b in h.leaves() {
        put_u64(&mut w, b.nrows())?;
        put_matrix(&mut w, b)?;
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    r: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.r.read_exact(&mut b)?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.bytes()?);
        usize::try_from(v).map_err(|_| Error::Numerical("dump size overflows usize".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Numerical("dump matrix too large".into()))?;
        let mut buf = vec![0u8; len * 8];
        self.r.read_exact(&mut buf)?;
        let vals: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(DMatrix::from_row_slice(rows, cols, &vals))
    }
}

pub fn read_dump<R: Read>(r: R) -> Result<HodlrMatrix> {
    let mut rd = Reader { r };
    if &rd.bytes::<8>()? != MAGIC {
        return Err(Error::Numerical("not a HODLR dump".into()));
    }
    let version = rd.u32()?;
    if version != DUMP_VERSION {
        return Err(Error::Numerical(format!("unsupported dump version {version}")));
    }
    let n = rd.usize()?;
    let levels = rd.u32()? as usize;
    let leaf_size = rd.usize()?;
    let eps = rd.f64()?;
    if levels >= usize::BITS as usize || (1usize << levels) > n.max(1) {
        return Err(Error::Numerical(format!("dump has {levels} levels for n = {n}")));
    }
    let mut offdiag = Vec::with_capacity(levels);
    for k in 0..levels {
        let mut level = Vec::with_capacity(1 << k);
        for _ in 0..1usize << k {
            let rows = rd.usize()?;
            let cols = rd.usize()?;
            let rank = rd.usize()?;
            if rows > n || cols > n || rank > rows.min(cols) {
                return Err(Error::Numerical("corrupt block header in dump".into()));
            }
            let u = rd.matrix(rows, rank)?;
            let v = rd.matrix(cols, rank)?;
            level.push(LowRankFactor::from_factors(u, v)?);
        }
        offdiag.push(level);
    }
    let mut leaves = Vec::with_capacity(1 << levels);
    for _ in 0..1usize << levels {
        let size = rd.usize()?;
        if size > n {
            return Err(Error::Numerical("corrupt leaf header in dump".into()));
        }
        leaves.push(rd.matrix(size, size)?);
    }
    HodlrMatrix::from_parts(n, eps, leaf_size, offdiag, leaves)
}
