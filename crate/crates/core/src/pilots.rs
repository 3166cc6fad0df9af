//! Sensing matrices: dense Gaussian pilot books and sparse binary graphs.

use std::io::{Read, Write};

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::rng::RandomStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PilotKind {
    DenseGaussian,
    SparseBinary,
}

impl PilotKind {
    fn code(self) -> u8 {
        match self {
            PilotKind::DenseGaussian => 0,
            PilotKind::SparseBinary => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(PilotKind::DenseGaussian),
            1 => Some(PilotKind::SparseBinary),
            _ => None,
        }
    }
}

/// An `L x (N 2^J)` pilot book. Column `n * 2^J + i` holds pilot `i + 1`
/// of device `n` (both zero-based in the API).
#[derive(Debug, Clone, PartialEq)]
pub struct PilotMatrix {
    entries: Array2<Complex64>,
    kind: PilotKind,
    devices: usize,
    bits: u32,
}

impl PilotMatrix {
    pub fn new(entries: Array2<Complex64>, kind: PilotKind, bits: u32) -> Result<Self> {
        let per_device = 1usize << bits;
        if entries.ncols() % per_device != 0 {
            return Err(Error::Dimension {
                what: "pilot columns",
                expected: format!("a multiple of 2^{bits}"),
                got: entries.ncols().to_string(),
            });
        }
        let devices = entries.ncols() / per_device;
        Ok(Self {
            entries,
            kind,
            devices,
            bits,
        })
    }

    pub fn entries(&self) -> &Array2<Complex64> {
        &self.entries
    }

    pub fn kind(&self) -> PilotKind {
        self.kind
    }

    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn cols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn devices(&self) -> usize {
        self.devices
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn pilots_per_device(&self) -> usize {
        1 << self.bits
    }

    /// Column of pilot `message` (zero-based) of `device`.
    pub fn column(&self, device: usize, message: usize) -> usize {
        debug_assert!(device < self.devices && message < self.pilots_per_device());
        device * self.pilots_per_device() + message
    }

    /// Inverse of [`column`](Self::column).
    pub fn owner(&self, column: usize) -> (usize, usize) {
        (column / self.pilots_per_device(), column % self.pilots_per_device())
    }

    /// Rescale every column to unit energy.
    pub fn normalize_columns(&mut self) {
        for mut col in self.entries.columns_mut() {
            let e = col.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            if e > 0.0 {
                col.mapv_inplace(|v| v / e);
            }
        }
    }

    /// Write the matrix in the fixture cache format: a little-endian header
    /// `b"PLTM", L: u32, N: u32, J: u32, kind: u8, seed: u64` followed by
    /// the entries in row-major order as `(re: f32, im: f32)` pairs.
    pub fn write_cache<W: Write>(&self, seed: u64, mut w: W) -> std::io::Result<()> {
        w.write_all(b"PLTM")?;
        w.write_all(&(self.rows() as u32).to_le_bytes())?;
        w.write_all(&(self.devices as u32).to_le_bytes())?;
        w.write_all(&self.bits.to_le_bytes())?;
        w.write_all(&[self.kind.code()])?;
        w.write_all(&seed.to_le_bytes())?;
        for v in self.entries.iter() {
            w.write_all(&(v.re as f32).to_le_bytes())?;
            w.write_all(&(v.im as f32).to_le_bytes())?;
        }
        Ok(())
    }

    /// Read a matrix written by [`write_cache`](Self::write_cache); returns it with its seed.
    pub fn read_cache<R: Read>(mut r: R) -> Result<(Self, u64)> {
        let bad = |msg: &str| Error::config(format!("pilot cache: {msg}"));
        let mut header = [0u8; 4 + 4 + 4 + 4 + 1 + 8];
        r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
        if &header[..4] != b"PLTM" {
            return Err(bad("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
        let rows = u32_at(4) as usize;
        let devices = u32_at(8) as usize;
        let bits = u32_at(12);
        let kind = PilotKind::from_code(header[16]).ok_or_else(|| bad("unknown kind"))?;
        let seed = u64::from_le_bytes(header[17..25].try_into().unwrap());
        if bits > 16 {
            return Err(bad("J too large"));
        }
        let cols = devices << bits;
        let mut raw = vec![0u8; rows * cols * 8];
        r.read_exact(&mut raw).map_err(|_| bad("truncated body"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| {
                let re = f32::from_le_bytes(c[..4].try_into().unwrap());
                let im = f32::from_le_bytes(c[4..].try_into().unwrap());
                Complex64::new(re as f64, im as f64)
            })
            .collect();
        let entries = Array2::from_shape_vec((rows, cols), data).map_err(|_| bad("shape"))?;
        Ok((Self::new(entries, kind, bits)?, seed))
    }
}

/// `L x (N 2^J)` book with i.i.d. `CN(0, 1/L)` entries.
pub fn generate_gaussian_pilots(
    pilot_length: usize,
    devices: usize,
    bits: u32,
    stream: &mut RandomStream,
) -> PilotMatrix {
    let cols = devices << bits;
    let var = 1.0 / pilot_length as f64;
    let entries = Array2::from_shape_simple_fn((pilot_length, cols), || stream.complex_normal(var));
    PilotMatrix {
        entries,
        kind: PilotKind::DenseGaussian,
        devices,
        bits,
    }
}

/// One-based pilot number `1 + b_1 + 2 b_2 + ... + 2^(J-1) b_J`.
pub fn pilot_index(bits: &[bool]) -> usize {
    1 + bits
        .iter()
        .enumerate()
        .map(|(i, &b)| (b as usize) << i)
        .sum::<usize>()
}

/// Inverse of [`pilot_index`].
pub fn decode_bits(index: usize, j: u32) -> Vec<bool> {
    assert!(index >= 1 && index <= 1 << j, "pilot index {index} out of range for J={j}");
    (0..j).map(|i| ((index - 1) >> i) & 1 == 1).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseGraphSpec {
    pub rows: usize,
    pub cols: usize,
    /// Support of each row.
    pub row_patterns: Vec<Vec<usize>>,
}

impl SparseGraphSpec {
    /// The 3 x 7 sensing matrix of the three-sparse peeling walk-through.
    pub fn walkthrough() -> Self {
        Self {
            rows: 3,
            cols: 7,
            row_patterns: vec![vec![0, 3, 6], vec![0, 2, 4], vec![1, 2, 5]],
        }
    }

    /// Every column gets exactly `degree` ones in distinct, uniformly chosen rows.
    pub fn column_regular(rows: usize, cols: usize, degree: usize, stream: &mut RandomStream) -> Self {
        assert!(degree <= rows, "column degree exceeds row count");
        let mut row_patterns = vec![Vec::new(); rows];
        for c in 0..cols {
            for r in stream.distinct_indices(rows, degree) {
                row_patterns[r].push(c);
            }
        }
        Self {
            rows,
            cols,
            row_patterns,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.row_patterns.len() != self.rows {
            return Err(Error::config(format!(
                "sparse graph lists {} row patterns for {} rows",
                self.row_patterns.len(),
                self.rows
            )));
        }
        for (r, pat) in self.row_patterns.iter().enumerate() {
            let mut seen = vec![false; self.cols];
            for &c in pat {
                if c >= self.cols {
                    return Err(Error::config(format!("row {r}: column {c} out of range (N = {})", self.cols)));
                }
                if std::mem::replace(&mut seen[c], true) {
                    return Err(Error::config(format!("row {r}: duplicate column {c}")));
                }
            }
        }
        Ok(())
    }

    /// Column supports (rows touching each column), sorted.
    pub fn column_patterns(&self) -> Vec<Vec<usize>> {
        let mut cols = vec![Vec::new(); self.cols];
        for (r, pat) in self.row_patterns.iter().enumerate() {
            for &c in pat {
                cols[c].push(r);
            }
        }
        cols
    }
}

pub fn build_sparse_matrix(spec: &SparseGraphSpec) -> Result<PilotMatrix> {
    spec.validate()?;
    let mut entries = Array2::zeros((spec.rows, spec.cols));
    for (r, pat) in spec.row_patterns.iter().enumerate() {
        for &c in pat {
            entries[[r, c]] = Complex64::new(1.0, 0.0);
        }
    }
    PilotMatrix::new(entries, PilotKind::SparseBinary, 0)
}
