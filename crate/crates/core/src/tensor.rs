//! Dense row-major `f32` matrices and their on-disk binary format.
//!
//! Every matrix file is a 16-byte header followed by the payload:
//!
//! ```text
//! bytes 0..8    magic  b"SAEMAT01"
//! bytes 8..12   rows   u32 little-endian
//! bytes 12..16  cols   u32 little-endian
//! bytes 16..    rows * cols f32 little-endian, row-major
//! ```

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use memmap2::Mmap;

use crate::error::{Error, Result};

pub const MATRIX_MAGIC: &[u8; 8] = b"SAEMAT01";
pub const HEADER_LEN: usize = 16;

enum Storage {
    Owned(Vec<f32>),
    Mapped(Mmap),
}

/// A dense `rows x cols` matrix, either owned or backed by a read-only
/// memory map of a matrix file.
pub struct Matrix {
    rows: usize,
    cols: usize,
    storage: Storage,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "matrix data",
                format!("{} values ({rows}x{cols})", rows * cols),
                data.len(),
            ));
        }
        Ok(Matrix {
            rows,
            cols,
            storage: Storage::Owned(data),
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            storage: Storage::Owned(vec![0.0; rows * cols]),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix {
            rows,
            cols,
            storage: Storage::Owned(data),
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(format!("row {i}"), cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    /// A `1 x n` matrix, the storage form used for bias vectors.
    pub fn row_vector(values: Vec<f32>) -> Self {
        let n = values.len();
        Matrix {
            rows: 1,
            cols: n,
            storage: Storage::Owned(values),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_mapped(&self) -> bool {
        matches!(self.storage, Storage::Mapped(_))
    }

    pub fn as_slice(&self) -> &[f32] {
        match &self.storage {
            Storage::Owned(v) => v,
            Storage::Mapped(m) => bytemuck::cast_slice(&m[HEADER_LEN..]),
        }
    }

    /// Mutable access; a mapped matrix is copied into owned storage first.
    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        if let Storage::Mapped(_) = self.storage {
            let owned = self.as_slice().to_vec();
            self.storage = Storage::Owned(owned);
        }
        match &mut self.storage {
            Storage::Owned(v) => v,
            Storage::Mapped(_) => unreachable!(),
        }
    }

    pub fn into_vec(self) -> Vec<f32> {
        match self.storage {
            Storage::Owned(v) => v,
            Storage::Mapped(_) => self.as_slice().to_vec(),
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.as_slice()[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        let cols = self.cols;
        &mut self.as_mut_slice()[r * cols..(r + 1) * cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.as_slice()[r * self.cols + c]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.as_slice().chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// `y = self · x`, one output per row.
    pub fn matvec(&self, x: &[f32]) -> Vec<f32> {
        debug_assert_eq!(x.len(), self.cols);
        self.iter_rows().map(|row| dot(row, x)).collect()
    }

    /// `y += self · x`.
    pub fn matvec_add(&self, x: &[f32], y: &mut [f32]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        for (out, row) in y.iter_mut().zip(self.iter_rows()) {
            *out += dot(row, x);
        }
    }

    pub fn transpose(&self) -> Matrix {
        let src = self.as_slice();
        Matrix::from_fn(self.cols, self.rows, |r, c| src[c * self.cols + r])
    }

    pub fn is_finite(&self) -> bool {
        self.as_slice().iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn ensure_shape(&self, what: &str, rows: usize, cols: usize) -> Result<()> {
        if self.shape() == (rows, cols) {
            Ok(())
        } else {
            Err(Error::shape(
                what,
                format!("{rows}x{cols}"),
                format!("{}x{}", self.rows, self.cols),
            ))
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.rows * self.cols * 4);
        out.extend_from_slice(MATRIX_MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for v in self.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (rows, cols) = parse_header(bytes, path)?;
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Matrix::new(rows, cols, data)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Matrix::from_bytes(&bytes, path)
    }

    /// Memory-maps a matrix file. On big-endian targets the payload cannot be
    /// reinterpreted in place, so the file is read into owned storage instead.
    pub fn map(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if cfg!(target_endian = "big") {
            return Matrix::read(path);
        }
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        // SAFETY: pack files are written once by the offline pipeline and
        // treated as read-only while a registry is alive.
        let mmap = unsafe { Mmap::map(&file) }.map_err(|e| Error::io(path, e))?;
        let (rows, cols) = parse_header(&mmap, path)?;
        // The payload starts 16 bytes into a page-aligned mapping, so it is
        // always f32-aligned; bytemuck would panic otherwise.
        Ok(Matrix {
            rows,
            cols,
            storage: Storage::Mapped(mmap),
        })
    }
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<(usize, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "file shorter than matrix header"));
    }
    if &bytes[..8] != MATRIX_MAGIC {
        return Err(Error::format(path, "bad matrix magic"));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = HEADER_LEN + rows * cols * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "payload length {} does not match {rows}x{cols} header (expected {expected} bytes)",
                bytes.len()
            ),
        ));
    }
    Ok((rows, cols))
}

impl Clone for Matrix {
    fn clone(&self) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            storage: Storage::Owned(self.as_slice().to_vec()),
        }
    }
}

impl PartialEq for Matrix {
    fn eq(&self, other: &Self) -> bool {
        self.shape() == other.shape() && self.as_slice() == other.as_slice()
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Matrix")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("mapped", &self.is_mapped())
            .finish()
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f32]) -> f32 {
    dot(a, a).sqrt()
}

pub fn normalized(a: &[f32]) -> Vec<f32> {
    let n = l2_norm(a);
    if n == 0.0 {
        a.to_vec()
    } else {
        a.iter().map(|v| v / n).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matvec_matches_hand_product() {
        let m = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap();
        assert_eq!(m.matvec(&[1.0, 1.0, 1.0]), vec![6.0, 0.0]);
    }

    #[test]
    fn header_rejects_truncated_payload() {
        let m = Matrix::zeros(3, 4);
        let mut bytes = m.to_bytes();
        bytes.truncate(bytes.len() - 4);
        assert!(Matrix::from_bytes(&bytes, Path::new("x.bin")).is_err());
    }

    #[test]
    fn mapped_and_read_agree() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = Matrix::from_fn(5, 7, |r, c| (r * 7 + c) as f32 * 0.25 - 3.0);
        m.write(&path).unwrap();
        let mapped = Matrix::map(&path).unwrap();
        assert_eq!(mapped, Matrix::read(&path).unwrap());
        assert_eq!(mapped.row(4), m.row(4));
    }

    proptest! {
        #[test]
        fn bytes_round_trip_is_bitwise(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = Matrix::from_fn(rows, cols, |_, _| f32::from_bits(rng.random::<u32>() & 0xBF7F_FFFF));
            let back = Matrix::from_bytes(&m.to_bytes(), Path::new("p")).unwrap();
            let a: Vec<u32> = m.as_slice().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.as_slice().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
