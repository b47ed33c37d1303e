//! Parameter checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "ISWT" | version: u16 | count: u32
//! repeated count times:
//!     name_len: u16 | name: UTF-8 | rank: u8 | extents: u32 × rank | values: f64 × Π extents
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ISWT";
const VERSION: u16 = 1;

pub fn write_checkpoint<T: Element, W: Write>(store: &ParamStore<T>, mut w: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        let name = p.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::contract(format!("parameter name too long: {}", p.name)))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            buf.extend_from_slice(&v.f64().to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn save_checkpoint<T: Element>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let file = fs::File::create(path)?;
    write_checkpoint(store, std::io::BufWriter::new(file))
}

pub fn read_checkpoint<T: Element>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format(0, "bad magic, expected ISWT"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_at = r.pos;
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(name_at as u64, "parameter name is not UTF-8"))?
            .to_owned();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = r.pos;
            let d = r.u32()? as usize;
            if d == 0 {
                return Err(Error::format(at as u64, "zero extent"));
            }
            shape.push(d);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let raw = r.take(8)?;
            data.push(T::of(f64::from_le_bytes(raw.try_into().unwrap())));
        }
        store
            .add(name, Tensor::from_parts(shape, data))
            .map_err(|e| Error::format(name_at as u64, e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes"));
    }
    Ok(store)
}

pub fn load_checkpoint<T: Element>(path: impl AsRef<Path>) -> Result<ParamStore<T>> {
    read_checkpoint(&fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
