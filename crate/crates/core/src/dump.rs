//! Binary tensor dumps.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes  "PRJRDUMP"
//! version  u32      1
//! seed     u64
//! count    u32      number of tensors
//! count × {
//!     name_len u32, name (UTF-8, name_len bytes),
//!     rows u32, cols u32,
//!     rows·cols × f64   row-major
//! }
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 8] = b"PRJRDUMP";
pub const VERSION: u32 = 1;

pub fn write_dump<W: Write>(mut w: W, seed: u64, tensors: &[(&str, &Matrix)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&seed.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, m) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(m.rows() as u32).to_le_bytes())?;
        w.write_all(&(m.cols() as u32).to_le_bytes())?;
        for v in m.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_dump<R: Read>(mut r: R) -> Result<(u64, Vec<(String, Matrix)>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let seed = u64::from_le_bytes(b8);
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut m = Matrix::zeros(rows, cols);
        for v in m.as_mut_slice() {
            r.read_exact(&mut b8)?;
            *v = f64::from_le_bytes(b8);
        }
        if !m.is_finite() {
            return Err(Error::Format(format!("tensor {name} has non-finite entries")));
        }
        out.push((name, m));
    }
    Ok((seed, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..5,
                      vals in proptest::collection::vec(-1e6f64..1e6, 25)) {
            let m = Matrix::from_fn(rows, cols, |i, j| vals[i * 5 + j]);
            let mut buf = Vec::new();
            write_dump(&mut buf, seed, &[("a.b", &m), ("empty", &Matrix::zeros(2, 0))]).unwrap();
            let (s, t) = read_dump(buf.as_slice()).unwrap();
            prop_assert_eq!(s, seed);
            prop_assert_eq!(&t[0].0, "a.b");
            prop_assert_eq!(&t[0].1, &m);
            prop_assert_eq!(t[1].1.shape(), (2, 0));
        }
    }

    #[test]
    fn header_layout() {
        let m = Matrix::identity(1);
        let mut buf = Vec::new();
        write_dump(&mut buf, 7, &[("x", &m)]).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..20], &7u64.to_le_bytes());
        assert_eq!(buf.len(), 8 + 4 + 8 + 4 + 4 + 1 + 4 + 4 + 8);
        assert!(read_dump(&b"NOTADUMP"[..]).is_err());
    }
}
