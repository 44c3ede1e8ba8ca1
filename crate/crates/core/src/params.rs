//! Flat parameter vectors with named segments, and their on-disk container.
//!
//! A `ParamVector` is a single contiguous `f64` buffer plus a segment table
//! mapping layer-scoped names to ranges. Vectors over the same table support
//! exact linear algebra (dot, axpy) with a fixed left-to-right summation
//! order, which keeps whole-pipeline runs bit-reproducible.
//!
//! Checkpoint container layout (all integers little-endian):
//! magic `QCW1`, u32 version, u32 segment count, then per segment a
//! u32-length-prefixed UTF-8 name with u64 offset and u64 length, then a
//! u64 element count followed by the raw f64 data.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"QCW1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Immutable layout shared by every vector over the same parameter space.
#[derive(Debug, PartialEq, Eq)]
pub struct SegmentTable {
    segments: Vec<Segment>,
    by_name: BTreeMap<String, usize>,
    total: usize,
}

impl SegmentTable {
    /// Builds a table from `(name, len)` pairs laid out consecutively.
    pub fn new(entries: &[(String, usize)]) -> Result<Arc<Self>> {
        let mut segments = Vec::with_capacity(entries.len());
        let mut by_name = BTreeMap::new();
        let mut offset = 0;
        for (name, len) in entries {
            if by_name.insert(name.clone(), segments.len()).is_some() {
                return Err(Error::invalid(
                    "segment table",
                    format!("duplicate segment `{name}`"),
                ));
            }
            segments.push(Segment {
                name: name.clone(),
                offset,
                len: *len,
            });
            offset += len;
        }
        Ok(Arc::new(SegmentTable {
            segments,
            by_name,
            total: offset,
        }))
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownSegment(name.to_string()))
    }

    pub fn segment(&self, idx: usize) -> &Segment {
        &self.segments[idx]
    }
}

#[derive(Debug, Clone)]
pub struct ParamVector {
    table: Arc<SegmentTable>,
    data: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(table: Arc<SegmentTable>) -> Self {
        let n = table.total_len();
        ParamVector {
            table,
            data: vec![0.0; n],
        }
    }

    pub fn from_data(table: Arc<SegmentTable>, data: Vec<f64>) -> Result<Self> {
        if data.len() != table.total_len() {
            return Err(Error::ShapeMismatch {
                context: "parameter vector construction",
                expected: vec![table.total_len()],
                got: vec![data.len()],
            });
        }
        Ok(ParamVector { table, data })
    }

    pub fn table(&self) -> &Arc<SegmentTable> {
        &self.table
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn segment_slice(&self, name: &str) -> Result<&[f64]> {
        let seg = self.table.segment(self.table.index_of(name)?);
        Ok(&self.data[seg.offset..seg.offset + seg.len])
    }

    pub fn segment_slice_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let seg = self.table.segment(self.table.index_of(name)?).clone();
        Ok(&mut self.data[seg.offset..seg.offset + seg.len])
    }

    /// Copies a segment out as a tensor of the given shape.
    pub fn segment_tensor(&self, name: &str, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.segment_slice(name)?.to_vec())
    }

    fn check_same_table(&self, other: &ParamVector) -> Result<()> {
        if Arc::ptr_eq(&self.table, &other.table) || self.table == other.table {
            Ok(())
        } else {
            Err(Error::SegmentTableMismatch)
        }
    }

    /// Inner product with a fixed left-to-right accumulation order.
    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_same_table(other)?;
        let mut acc = 0.0;
        for (a, b) in self.data.iter().zip(&other.data) {
            acc += a * b;
        }
        Ok(acc)
    }

    /// `self += alpha * other`, in place.
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) -> Result<()> {
        self.check_same_table(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.data {
            *a *= alpha;
        }
    }

    pub fn norm(&self) -> f64 {
        let mut acc = 0.0;
        for &v in &self.data {
            acc += v * v;
        }
        acc.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(64 + self.data.len() * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.table.segments().len() as u32).to_le_bytes());
        for seg in self.table.segments() {
            buf.extend_from_slice(&(seg.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(seg.name.as_bytes());
            buf.extend_from_slice(&(seg.offset as u64).to_le_bytes());
            buf.extend_from_slice(&(seg.len as u64).to_le_bytes());
        }
        buf.extend_from_slice(&(self.data.len() as u64).to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |why: &str| Error::BadArtifact {
            path: path.to_path_buf(),
            why: why.to_string(),
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cursor = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cursor + n > bytes.len() {
                return Err(bad("truncated"));
            }
            let s = &bytes[cursor..cursor + n];
            cursor += n;
            Ok(s)
        };

        if take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let n_segs = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut entries = Vec::with_capacity(n_segs);
        let mut expected_offset = 0usize;
        for _ in 0..n_segs {
            let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(name_len)?)
                .map_err(|_| bad("segment name is not UTF-8"))?
                .to_string();
            let offset = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            if offset != expected_offset {
                return Err(bad("segments are not contiguous"));
            }
            expected_offset = offset + len;
            entries.push((name, len));
        }
        let n_data = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        if n_data != expected_offset {
            return Err(bad("data length disagrees with segment table"));
        }
        let mut data = Vec::with_capacity(n_data);
        for _ in 0..n_data {
            data.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let table = SegmentTable::new(&entries)?;
        ParamVector::from_data(table, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> Arc<SegmentTable> {
        SegmentTable::new(&[("a.w".to_string(), 4), ("a.b".to_string(), 2)]).unwrap()
    }

    #[test]
    fn dot_requires_matching_tables() {
        let other = SegmentTable::new(&[("z.w".to_string(), 6)]).unwrap();
        let a = ParamVector::zeros(table());
        let b = ParamVector::zeros(other);
        assert!(matches!(a.dot(&b), Err(Error::SegmentTableMismatch)));
    }

    #[test]
    fn dot_of_disjoint_one_hots_is_zero() {
        let mut a = ParamVector::zeros(table());
        let mut b = ParamVector::zeros(table());
        a.data_mut()[0] = 1.0;
        b.data_mut()[3] = 1.0;
        assert_eq!(a.dot(&b).unwrap(), 0.0);
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.qcw");
        let v = ParamVector::from_data(
            table(),
            vec![0.1, -2.5, f64::MIN_POSITIVE, 3e300, -0.0, 7.25],
        )
        .unwrap();
        v.save(&path).unwrap();
        let r = ParamVector::load(&path).unwrap();
        let bits =
            |p: &ParamVector| p.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&v), bits(&r));
        assert_eq!(v.table().segments(), r.table().segments());
    }

    #[test]
    fn load_rejects_corrupted_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.qcw");
        std::fs::write(&path, b"QCW2junk").unwrap();
        assert!(matches!(
            ParamVector::load(&path),
            Err(Error::BadArtifact { .. })
        ));
    }
}
