//! Single-file parameter checkpoints.
//!
//! Layout (all integers little-endian): magic `CTSN`, version `u32`, tensor
//! count `u32`, then per tensor: name length `u32`, UTF-8 name, rank `u32`,
//! `rank` extents as `u64`, and the values as `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{Error, ParamStore, Result, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"CTSN";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<T: Scalar, W: Write>(store: &ParamStore<T>, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        let mut filled = 0;
        while filled < n {
            match self.inner.read(&mut buf[filled..])? {
                0 => return Err(Error::format(self.offset + filled as u64, format!("truncated while reading {what}"))),
                k => filled += k,
            }
        }
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<T: Scalar, R: Read>(r: R) -> Result<ParamStore<T>> {
    let mut c = Cursor { inner: r, offset: 0 };
    if c.bytes(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic (expected CTSN)"));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let count = c.u32("tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let at = c.offset;
        let len = c.u32("name length")? as usize;
        let name = String::from_utf8(c.bytes(len, "name")?).map_err(|_| Error::format(at + 4, "tensor name is not UTF-8"))?;
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = c.bytes(4 * n, "values")?;
        let data = raw.chunks_exact(4).map(|b| T::of(f32::from_le_bytes(b.try_into().unwrap()) as f64)).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(at, e.to_string()))?;
        store.add(name, t).map_err(|e| Error::format(at, e.to_string()))?;
    }
    Ok(store)
}

pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(store, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<ParamStore<T>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
