//! CCEMB1 embedding files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "CCEMB1"
//! u32 count
//! u32 dim
//! count × { u32 id_len, id_len bytes (UTF-8), dim × f32 }
//! ```

use std::fs;
use std::io::Read;
use std::path::Path;

use ndarray::Array2;

use super::IdMap;
use crate::error::{Error, Result};
use crate::graph::{EmbeddingTable, NodeKind};
use crate::io::write_atomic;

pub const EMBEDDING_MAGIC: &[u8; 6] = b"CCEMB1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingHeader {
    pub count: usize,
    pub dim: usize,
}

/// Little-endian reader over an in-memory buffer.
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corrupt(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    pub(crate) fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)?;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Corrupt(format!("{what} is not UTF-8")))
    }

    pub(crate) fn f32s(&mut self, n: usize, out: &mut Vec<f32>, what: &str) -> Result<()> {
        let bytes = self.take(n * 4, what)?;
        out.extend(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
        );
        Ok(())
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("length fits in u32").to_le_bytes());
}

pub(crate) fn put_record(out: &mut Vec<u8>, id: &str, row: impl IntoIterator<Item = f32>) {
    put_u32(out, id.len());
    out.extend_from_slice(id.as_bytes());
    for x in row {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub(crate) fn check_magic(bytes: &[u8], magic: &[u8; 6]) -> Result<()> {
    if bytes.len() < magic.len() || &bytes[..magic.len()] != magic {
        return Err(Error::Corrupt(format!(
            "invalid magic, expected {:?}",
            std::str::from_utf8(magic).unwrap_or_default()
        )));
    }
    Ok(())
}

/// Reads only the magic, count and dim.
pub fn read_embedding_header(path: impl AsRef<Path>) -> Result<EmbeddingHeader> {
    let path = path.as_ref();
    let mut head = [0u8; 14];
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let n = f.read(&mut head).map_err(|e| Error::io(path, e))?;
    check_magic(&head[..n], EMBEDDING_MAGIC)?;
    let mut cur = Cursor::new(&head[6..n]);
    Ok(EmbeddingHeader {
        count: cur.u32("count")?,
        dim: cur.u32("dim")?,
    })
}

/// Parses a whole file: ids in file order and a row-major `count × dim` buffer.
pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<(Vec<String>, EmbeddingHeader, Vec<f32>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    check_magic(&bytes, EMBEDDING_MAGIC)?;
    let mut cur = Cursor::new(&bytes[6..]);
    let count = cur.u32("count")?;
    let dim = cur.u32("dim")?;
    if dim == 0 {
        return Err(Error::Corrupt("embedding dim is zero".into()));
    }
    let mut ids = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count.saturating_mul(dim));
    for r in 0..count {
        ids.push(cur.string(&format!("id of record {r}"))?);
        cur.f32s(dim, &mut data, &format!("vector of record {r}"))?;
    }
    if !cur.is_empty() {
        return Err(Error::Corrupt(format!(
            "trailing bytes after {count} records (count/dim header inconsistent with payload)"
        )));
    }
    Ok((ids, EmbeddingHeader { count, dim }, data))
}

pub fn write_embedding_file<S: AsRef<str>>(path: impl AsRef<Path>, ids: &[S], rows: &Array2<f32>) -> Result<()> {
    assert_eq!(ids.len(), rows.nrows(), "one id per row");
    let mut out = Vec::with_capacity(14 + rows.len() * 4 + ids.len() * 16);
    out.extend_from_slice(EMBEDDING_MAGIC);
    put_u32(&mut out, rows.nrows());
    put_u32(&mut out, rows.ncols());
    for (id, row) in ids.iter().zip(rows.rows()) {
        put_record(&mut out, id.as_ref(), row.iter().copied());
    }
    write_atomic(path, &out)
}

/// Loads item contextual embeddings in `expected` index order, frozen.
/// Records for ids outside `expected` are ignored.
pub fn load_embeddings(
    path: impl AsRef<Path>,
    expected: &IdMap,
    expected_dim: Option<usize>,
) -> Result<EmbeddingTable> {
    let (ids, header, data) = read_embedding_file(path)?;
    if let Some(d) = expected_dim {
        if d != header.dim {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: header.dim,
                context: "embedding file dim".into(),
            });
        }
    }
    let mut matrix = Array2::<f64>::zeros((expected.len(), header.dim));
    let mut filled = vec![false; expected.len()];
    for (r, id) in ids.iter().enumerate() {
        if let Some(i) = expected.index_of(id) {
            let src = &data[r * header.dim..(r + 1) * header.dim];
            for (dst, &x) in matrix.row_mut(i).iter_mut().zip(src) {
                *dst = f64::from(x);
            }
            filled[i] = true;
        }
    }
    let missing: Vec<String> = filled
        .iter()
        .enumerate()
        .filter(|(_, &f)| !f)
        .map(|(i, _)| expected.raw(i).to_owned())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingIds {
            count: missing.len(),
            first: missing.into_iter().take(10).collect(),
        });
    }
    EmbeddingTable::new(matrix, NodeKind::Item, false)
}
