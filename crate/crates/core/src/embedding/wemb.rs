//! WEMB: little-endian binary container for one extractor's embeddings of
//! one slide.
//!
//! ```text
//! magic      4 bytes  "WEMB"
//! version    u16      1
//! name_len   u16      followed by name_len bytes of UTF-8
//! dim        u32
//! count      u32
//! count × { row u32, col u32, dim × f32 }
//! ```

use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"WEMB";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct WembFile {
    pub name: String,
    pub keys: Vec<(u32, u32)>,
    /// `count × dim`.
    pub matrix: Array2<f32>,
}

pub fn encode(name: &str, keys: &[(u32, u32)], matrix: ArrayView2<f32>) -> Result<Vec<u8>> {
    let (count, dim) = matrix.dim();
    if keys.len() != count {
        return Err(Error::DimensionMismatch(format!(
            "{} patch keys for {count} rows",
            keys.len()
        )));
    }
    if dim == 0 {
        return Err(Error::Format("dim must be at least 1".into()));
    }
    let name_len = u16::try_from(name.len())
        .map_err(|_| Error::Format("extractor name longer than 65535 bytes".into()))?;
    let dim32 = u32::try_from(dim).map_err(|_| Error::Format("dim exceeds u32".into()))?;
    let count32 = u32::try_from(count).map_err(|_| Error::Format("count exceeds u32".into()))?;
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("refusing to write non-finite embeddings".into()));
    }

    let mut buf = Vec::with_capacity(16 + name.len() + count * (8 + 4 * dim));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&name_len.to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&dim32.to_le_bytes());
    buf.extend_from_slice(&count32.to_le_bytes());
    for (&(row, col), values) in keys.iter().zip(matrix.rows()) {
        buf.extend_from_slice(&row.to_le_bytes());
        buf.extend_from_slice(&col.to_le_bytes());
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Length(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<WembFile> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a WEMB file".into()));
    }
    let version = cur.u16("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported WEMB version {version}")));
    }
    let name_len = cur.u16("name length")? as usize;
    let name = std::str::from_utf8(cur.take(name_len, "name")?)
        .map_err(|_| Error::Format("extractor name is not UTF-8".into()))?
        .to_string();
    let dim = cur.u32("dim")? as usize;
    let count = cur.u32("count")? as usize;
    if dim == 0 {
        return Err(Error::Format("dim is 0".into()));
    }
    let record = 8 + 4 * dim;
    let expected = count
        .checked_mul(record)
        .and_then(|n| n.checked_add(cur.pos))
        .ok_or_else(|| Error::Length("declared size overflows".into()))?;
    if bytes.len() != expected {
        return Err(Error::Length(format!(
            "declared {count} rows of dim {dim} need {expected} bytes, file has {}",
            bytes.len()
        )));
    }

    let mut keys = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count * dim);
    for i in 0..count {
        let row = cur.u32("row")?;
        let col = cur.u32("col")?;
        keys.push((row, col));
        for chunk in cur.take(4 * dim, "values")?.chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::Data(format!("non-finite value {v} in row {i}")));
            }
            values.push(v);
        }
    }
    let matrix = Array2::from_shape_vec((count, dim), values).expect("sized above");
    Ok(WembFile { name, keys, matrix })
}

pub fn write_wemb(
    path: impl AsRef<Path>,
    name: &str,
    keys: &[(u32, u32)],
    matrix: ArrayView2<f32>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(name, keys, matrix)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_wemb(path: impl AsRef<Path>) -> Result<WembFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> (Vec<(u32, u32)>, Array2<f32>) {
        let keys = vec![(0, 0), (0, 3), (7, 1)];
        let m = Array2::from_shape_vec(
            (3, 4),
            vec![1.0, -2.5, 0.125, 3.0e-8, 0.0, -0.0, 1e30, -7.75, 42.0, 0.5, -0.25, 9.0],
        )
        .unwrap();
        (keys, m)
    }

    #[test]
    fn known_layout() {
        let (keys, m) = sample();
        let bytes = encode("ab", &keys, m.view()).unwrap();
        assert_eq!(&bytes[..4], b"WEMB");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..8], &[2, 0]);
        assert_eq!(&bytes[8..10], b"ab");
        assert_eq!(&bytes[10..14], &[4, 0, 0, 0]);
        assert_eq!(&bytes[14..18], &[3, 0, 0, 0]);
        assert_eq!(bytes.len(), 18 + 3 * (8 + 16));
        // row 1 = (0, 3)
        let r1 = 18 + 24;
        assert_eq!(&bytes[r1..r1 + 8], &[0, 0, 0, 0, 3, 0, 0, 0]);
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wemb");
        let (keys, m) = sample();
        write_wemb(&path, "fm", &keys, m.view()).unwrap();
        let back = read_wemb(&path).unwrap();
        assert_eq!(back.name, "fm");
        assert_eq!(back.keys, keys);
        for (a, b) in back.matrix.iter().zip(m.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn empty_patch_list() {
        let bytes = encode("e", &[], Array2::<f32>::zeros((0, 5)).view()).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.matrix.dim(), (0, 5));
        assert!(back.keys.is_empty());
    }

    #[test]
    fn corrupted_magic() {
        let (keys, m) = sample();
        let mut bytes = encode("fm", &keys, m.view()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn bad_version() {
        let (keys, m) = sample();
        let mut bytes = encode("fm", &keys, m.view()).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated() {
        let (keys, m) = sample();
        let bytes = encode("fm", &keys, m.view()).unwrap();
        for cut in [3, 9, 17, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Length(_))), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::Length(_))));
    }

    #[test]
    fn nan_is_data_error() {
        let (keys, m) = sample();
        let mut bytes = encode("fm", &keys, m.view()).unwrap();
        let off = 18 + 8 + 4;
        bytes[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Data(_))));
        let mut bytes = encode("fm", &keys, m.view()).unwrap();
        bytes[off..off + 4].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Data(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dim in 1usize..12,
            rows in proptest::collection::vec((any::<u32>(), any::<u32>()), 0..10),
            seed in any::<u64>(),
        ) {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let m = Array2::from_shape_simple_fn((rows.len(), dim), || {
                f32::from_bits(rng.next_u64() as u32 & 0xbfff_ffff)
            });
            let bytes = encode("p", &rows, m.view()).unwrap();
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(back.keys, rows);
            prop_assert!(back.matrix.iter().zip(m.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
