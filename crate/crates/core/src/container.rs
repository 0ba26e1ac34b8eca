//! Binary container for named f32 tensors.
//!
//! One format serves checkpoints, cached features, and the world file:
//!
//! ```text
//! magic  b"RFRE"
//! u32 LE version (= 1)
//! u32 LE entry count
//! entry: u16 LE name length, UTF-8 name,
//!        u8 rank, u32 LE dim per axis,
//!        f32 LE data (row-major, product(dims) values)
//! ```
//!
//! Reads validate magic, version, shape arithmetic, and exact file length,
//! so a truncated or foreign file fails loudly instead of yielding garbage.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"RFRE";
pub const VERSION: u32 = 1;

/// One named tensor.
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Entry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Entry {
            name: name.into(),
            shape,
            data,
        }
    }
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Container {
        reason: reason.into(),
    }
}

pub fn write(path: &Path, entries: &[Entry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(entries.len()).map_err(|_| bad("too many entries"))?;
    w.write_all(&count.to_le_bytes())?;
    for e in entries {
        let numel: usize = e.shape.iter().product();
        if numel != e.data.len() {
            return Err(bad(format!(
                "entry {}: shape {:?} does not match {} values",
                e.name,
                e.shape,
                e.data.len()
            )));
        }
        let name = e.name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| bad("name too long"))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name)?;
        let rank = u8::try_from(e.shape.len()).map_err(|_| bad("rank too large"))?;
        w.write_all(&[rank])?;
        for &d in &e.shape {
            let d = u32::try_from(d).map_err(|_| bad("dim too large"))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &e.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<Entry>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        let mut numel = 1usize;
        for _ in 0..rank[0] {
            let d = read_u32(&mut r)? as usize;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| bad(format!("entry {name}: shape overflow")))?;
            shape.push(d);
        }
        let mut buf = vec![0u8; numel * 4];
        r.read_exact(&mut buf).map_err(|_| {
            bad(format!("entry {name}: truncated data"))
        })?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push(Entry { name, shape, data });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after last entry"));
    }
    Ok(entries)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let entries = vec![
            Entry::new("alpha", vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-7, 9.0]),
            Entry::new("beta/gamma", vec![4], vec![0.5; 4]),
            Entry::new("scalarish", vec![1], vec![42.0]),
        ];
        write(&path, &entries).unwrap();
        let back = read(&path).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in entries.iter().zip(&back) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert_eq!(a.data, b.data); // bitwise
        }
    }

    #[test]
    fn rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        write(&path, &[Entry::new("x", vec![2], vec![1.0, 2.0])]).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        let bad_magic = dir.path().join("bad_magic.bin");
        std::fs::write(&bad_magic, &bytes).unwrap();
        assert!(matches!(read(&bad_magic), Err(Error::Container { .. })));

        let mut ok = std::fs::read(&path).unwrap();
        ok.truncate(ok.len() - 3);
        let truncated = dir.path().join("trunc.bin");
        std::fs::write(&truncated, &ok).unwrap();
        assert!(read(&truncated).is_err());

        let mut padded = std::fs::read(&path).unwrap();
        padded.push(0);
        let trailing = dir.path().join("trail.bin");
        std::fs::write(&trailing, &padded).unwrap();
        assert!(matches!(read(&trailing), Err(Error::Container { .. })));
    }

    #[test]
    fn shape_data_mismatch_refused_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let e = Entry::new("x", vec![3], vec![1.0]);
        assert!(matches!(write(&path, &[e]), Err(Error::Container { .. })));
    }
}
