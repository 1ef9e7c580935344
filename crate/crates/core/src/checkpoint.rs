//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "TKIT" | version
//! repeated until EOF:
//!   name_len | name (UTF-8) | rank | dims[rank] | values (f32 LE, product(dims))
//! ```
//!
//! Values are stored in single precision; loading widens them to `f64`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"TKIT";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<Option<u32>> {
    let mut buf = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let n = r.read(&mut buf[got..])?;
        if n == 0 {
            return if got == 0 {
                Ok(None)
            } else {
                Err(Error::Format("truncated integer".into()))
            };
        }
        got += n;
    }
    Ok(Some(u32::from_le_bytes(buf)))
}

fn need_u32<R: Read>(r: &mut R) -> Result<u32> {
    read_u32(r)?.ok_or_else(|| Error::Format("unexpected end of checkpoint".into()))
}

/// Reads every record in file order.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = need_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while let Some(len) = read_u32(&mut r)? {
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("name is not UTF-8".into()))?;
        let rank = need_u32(&mut r)? as usize;
        let dims = (0..rank).map(|_| need_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    Ok(out)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(store, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Overwrites every parameter of `store` from the checkpoint at `path`.
/// Missing, extra or mis-shaped records are errors.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let f = std::fs::File::open(path)?;
    let records = read_checkpoint(std::io::BufReader::new(f))?;
    if records.len() != store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, model has {}",
            records.len(),
            store.len()
        )));
    }
    for (name, t) in records {
        let id = store
            .id(&name)
            .ok_or_else(|| Error::Format(format!("unknown parameter `{name}`")))?;
        let dst = store.get_mut(id);
        if dst.shape() != t.shape() {
            return Err(Error::Shape {
                op: "load_checkpoint",
                lhs: dst.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        dst.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store_from(values: &[Vec<f32>]) -> ParamStore {
        let mut s = ParamStore::new();
        for (i, v) in values.iter().enumerate() {
            let t = Tensor::new(vec![v.len()], v.iter().map(|&x| x as f64).collect()).unwrap();
            s.add(format!("p.{i}"), t).unwrap();
        }
        s
    }

    proptest! {
        #[test]
        fn bytes_round_trip_exactly(values in prop::collection::vec(prop::collection::vec(-1e6f32..1e6, 1..20), 1..5)) {
            let s = store_from(&values);
            let mut first = Vec::new();
            write_checkpoint(&s, &mut first).unwrap();
            let records = read_checkpoint(first.as_slice()).unwrap();
            let mut s2 = ParamStore::new();
            for (n, t) in records {
                s2.add(n, t).unwrap();
            }
            let mut second = Vec::new();
            write_checkpoint(&s2, &mut second).unwrap();
            prop_assert_eq!(first, second);
        }
    }

    #[test]
    fn header_layout() {
        let mut s = ParamStore::new();
        s.add("pn.q", Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&s, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"TKIT");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 4);
        assert_eq!(&buf[12..16], b"pn.q");
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 2);
        assert_eq!(buf.len(), 20 + 8 + 8);
        assert_eq!(f32::from_le_bytes(buf[32..36].try_into().unwrap()), -2.0);
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(read_checkpoint(&b"NOPE\x01\0\0\0"[..]).is_err());
    }
}
