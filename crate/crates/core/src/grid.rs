//! Token grids (the latent `z_t`) and per-position categorical fields.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

const GRID_MAGIC: &[u8; 4] = b"MGTG";
const FIELD_MAGIC: &[u8; 4] = b"MGTP";
const FORMAT_VERSION: u32 = 1;
const GRID_HEADER_LEN: usize = 20;

/// A `width x height` field of token ids. Masked cells hold the sentinel id
/// `vocab`, one past the largest real token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GridJson", into = "GridJson")]
pub struct TokenGrid {
    width: usize,
    height: usize,
    vocab: u32,
    cells: Vec<u32>,
}

impl TokenGrid {
    /// A fully masked grid.
    pub fn new(width: usize, height: usize, vocab: usize) -> Result<Self> {
        if width == 0 || height == 0 || vocab == 0 {
            return invalid(format!(
                "grid dimensions must be positive, got width={width} height={height} vocab={vocab}"
            ));
        }
        if vocab >= u32::MAX as usize || width.checked_mul(height).is_none() {
            return invalid("grid too large");
        }
        Ok(Self {
            width,
            height,
            vocab: vocab as u32,
            cells: vec![vocab as u32; width * height],
        })
    }

    /// Builds a grid from raw cell ids, where `vocab` marks a masked cell.
    pub fn from_cells(width: usize, height: usize, vocab: usize, cells: Vec<u32>) -> Result<Self> {
        let mut grid = Self::new(width, height, vocab)?;
        if cells.len() != width * height {
            return invalid(format!("expected {} cells, got {}", width * height, cells.len()));
        }
        if let Some((pos, id)) = cells.iter().enumerate().find(|(_, &c)| c > grid.vocab) {
            return invalid(format!("cell {pos} has id {id} outside vocabulary {vocab}"));
        }
        grid.cells = cells;
        Ok(grid)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn vocab(&self) -> usize {
        self.vocab as usize
    }

    pub fn mask_id(&self) -> u32 {
        self.vocab
    }

    /// Raw cell ids, masked cells included as [`mask_id`](Self::mask_id).
    pub fn cells(&self) -> &[u32] {
        &self.cells
    }

    pub fn token(&self, pos: usize) -> Option<u32> {
        let c = self.cells[pos];
        (c != self.vocab).then_some(c)
    }

    pub fn is_masked(&self, pos: usize) -> bool {
        self.cells[pos] == self.vocab
    }

    pub fn masked_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c == self.vocab).count()
    }

    /// Masked flat indices in ascending order.
    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.cells.len()).filter(|&p| self.is_masked(p)).collect()
    }

    /// Committed flat indices in ascending order.
    pub fn committed_positions(&self) -> Vec<usize> {
        (0..self.cells.len()).filter(|&p| !self.is_masked(p)).collect()
    }

    pub fn is_complete(&self) -> bool {
        !self.cells.contains(&self.vocab)
    }

    pub fn set(&mut self, pos: usize, token: u32) -> Result<()> {
        if token >= self.vocab {
            return invalid(format!("token {token} outside vocabulary {}", self.vocab));
        }
        self.cells[pos] = token;
        Ok(())
    }

    pub fn mask(&mut self, pos: usize) {
        self.cells[pos] = self.vocab;
    }

    /// Serializes to the binary grid format: magic, version, width, height,
    /// vocab, then one little-endian `u32` per cell.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(GRID_HEADER_LEN + 4 * self.cells.len());
        out.extend_from_slice(GRID_MAGIC);
        for v in [FORMAT_VERSION, self.width as u32, self.height as u32, self.vocab] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in &self.cells {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(GRID_MAGIC)?;
        r.version()?;
        let width = r.u32()? as usize;
        let height = r.u32()? as usize;
        let vocab = r.u32()? as usize;
        let header_end = r.offset;
        let mut grid = Self::new(width, height, vocab).map_err(|e| Error::Decode {
            offset: header_end,
            message: e.to_string(),
        })?;
        for pos in 0..grid.cells.len() {
            let offset = r.offset;
            let id = r.u32()?;
            if id > grid.vocab {
                return Err(Error::Decode {
                    offset,
                    message: format!("cell id {id} exceeds mask sentinel {vocab}"),
                });
            }
            grid.cells[pos] = id;
        }
        r.finish()?;
        Ok(grid)
    }
}

#[derive(Serialize, Deserialize)]
struct GridJson {
    width: usize,
    height: usize,
    vocab: usize,
    cells: Vec<Option<u32>>,
}

impl From<TokenGrid> for GridJson {
    fn from(g: TokenGrid) -> Self {
        let cells = (0..g.len()).map(|p| g.token(p)).collect();
        GridJson {
            width: g.width,
            height: g.height,
            vocab: g.vocab as usize,
            cells,
        }
    }
}

impl TryFrom<GridJson> for TokenGrid {
    type Error = Error;

    fn try_from(j: GridJson) -> Result<Self> {
        let mask = j.vocab as u32;
        // a literal id equal to vocab would otherwise masquerade as MASK
        if let Some(pos) = j.cells.iter().position(|c| *c == Some(mask)) {
            return invalid(format!("cell {pos} uses the reserved mask id {mask}"));
        }
        let cells = j.cells.into_iter().map(|c| c.unwrap_or(mask)).collect();
        TokenGrid::from_cells(j.width, j.height, j.vocab, cells)
    }
}

/// Numerically stable softmax of `logits` into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(logits) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Per-position categorical distributions over the vocabulary, stored
/// row-major as `positions x vocab`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbField {
    positions: usize,
    vocab: usize,
    data: Vec<f64>,
}

impl ProbField {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(positions: usize, vocab: usize, data: Vec<f64>) -> Result<Self> {
        if positions == 0 || vocab == 0 {
            return invalid("probability field needs at least one position and one category");
        }
        if data.len() != positions * vocab {
            return invalid(format!(
                "expected {} probabilities, got {}",
                positions * vocab,
                data.len()
            ));
        }
        for (pos, row) in data.chunks(vocab).enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return invalid(format!("position {pos} has a negative or non-finite entry"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > Self::SUM_TOLERANCE {
                return invalid(format!("position {pos} sums to {s}"));
            }
        }
        Ok(Self { positions, vocab, data })
    }

    pub fn uniform(positions: usize, vocab: usize) -> Self {
        Self {
            positions,
            vocab,
            data: vec![1.0 / vocab as f64; positions * vocab],
        }
    }

    /// Row-wise softmax of a flat `positions x vocab` logit buffer.
    pub fn from_logits(positions: usize, vocab: usize, logits: &[f64]) -> Self {
        let mut data = vec![0.0; positions * vocab];
        for (out, row) in data.chunks_mut(vocab).zip(logits.chunks(vocab)) {
            softmax_into(row, out);
        }
        Self { positions, vocab, data }
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, pos: usize) -> &[f64] {
        &self.data[pos * self.vocab..(pos + 1) * self.vocab]
    }

    pub(crate) fn row_mut(&mut self, pos: usize) -> &mut [f64] {
        &mut self.data[pos * self.vocab..(pos + 1) * self.vocab]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Binary dump: magic, version, positions, vocab, then little-endian `f64`s.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.data.len());
        out.extend_from_slice(FIELD_MAGIC);
        for v in [FORMAT_VERSION, self.positions as u32, self.vocab as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in &self.data {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(FIELD_MAGIC)?;
        r.version()?;
        let positions = r.u32()? as usize;
        let vocab = r.u32()? as usize;
        let mut data = Vec::with_capacity(positions.saturating_mul(vocab).min(1 << 24));
        for _ in 0..positions * vocab {
            data.push(r.f64()?);
        }
        r.finish()?;
        Self::new(positions, vocab, data)
    }
}

/// Little-endian cursor that reports the failing byte offset.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub(crate) offset: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, offset: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.offset + n;
        if end > self.bytes.len() {
            return Err(Error::Decode {
                offset: self.offset,
                message: format!("truncated stream: need {n} bytes, {} left", self.bytes.len() - self.offset),
            });
        }
        let s = &self.bytes[self.offset..end];
        self.offset = end;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let offset = self.offset;
        let got = self.take(4)?;
        if got != expected {
            return Err(Error::Decode {
                offset,
                message: format!("bad magic {got:?}"),
            });
        }
        Ok(())
    }

    pub(crate) fn version(&mut self) -> Result<()> {
        let offset = self.offset;
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::Decode {
                offset,
                message: format!("unsupported version {v}"),
            });
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.offset != self.bytes.len() {
            return Err(Error::Decode {
                offset: self.offset,
                message: format!("{} trailing bytes", self.bytes.len() - self.offset),
            });
        }
        Ok(())
    }
}
