//! Row-major integer grids: one row per time step, one column per codebook channel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `rows × channels` matrix of token ids stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    channels: usize,
    data: Vec<u32>,
}

impl TokenGrid {
    pub fn new(channels: usize, data: Vec<u32>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidParameter("grid needs at least one channel".into()));
        }
        if data.len() % channels != 0 {
            return Err(Error::LengthMismatch {
                what: "grid data length vs channel count",
                left: data.len(),
                right: channels,
            });
        }
        Ok(Self { channels, data })
    }

    pub fn empty(channels: usize) -> Self {
        assert!(channels > 0, "grid needs at least one channel");
        Self {
            channels,
            data: Vec::new(),
        }
    }

    pub fn filled(rows: usize, channels: usize, value: u32) -> Self {
        assert!(channels > 0, "grid needs at least one channel");
        Self {
            channels,
            data: vec![value; rows * channels],
        }
    }

    pub fn from_rows<R: AsRef<[u32]>>(channels: usize, rows: &[R]) -> Result<Self> {
        let mut grid = Self::new(channels, Vec::with_capacity(rows.len() * channels))?;
        for row in rows {
            grid.push_row(row.as_ref())?;
        }
        Ok(grid)
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.channels
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, t: usize) -> &[u32] {
        &self.data[t * self.channels..(t + 1) * self.channels]
    }

    pub fn get(&self, t: usize, k: usize) -> u32 {
        self.data[t * self.channels + k]
    }

    pub fn set(&mut self, t: usize, k: usize, value: u32) {
        self.data[t * self.channels + k] = value;
    }

    pub fn push_row(&mut self, row: &[u32]) -> Result<()> {
        if row.len() != self.channels {
            return Err(Error::LengthMismatch {
                what: "row width vs channel count",
                left: row.len(),
                right: self.channels,
            });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    /// Appends one row with `value` replicated on every channel.
    pub fn push_uniform(&mut self, value: u32) {
        self.data.extend(std::iter::repeat(value).take(self.channels));
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[u32]> + '_ {
        self.data.chunks_exact(self.channels)
    }

    /// Copy of rows `range`.
    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            channels: self.channels,
            data: self.data[range.start * self.channels..range.end * self.channels].to_vec(),
        }
    }

    pub fn column(&self, k: usize) -> Vec<u32> {
        self.iter_rows().map(|r| r[k]).collect()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<u32> {
        self.data
    }
}

/// The `T × K` grid of codec tokens for one utterance. Every entry lies in `[0, V)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeGrid {
    grid: TokenGrid,
    codebook_size: u32,
}

impl CodeGrid {
    pub fn new(grid: TokenGrid, codebook_size: u32) -> Result<Self> {
        if let Some(&bad) = grid.as_slice().iter().find(|&&c| c >= codebook_size) {
            return Err(Error::TokenOutOfRange {
                what: "codec code",
                token: bad,
                limit: codebook_size,
            });
        }
        Ok(Self {
            grid,
            codebook_size,
        })
    }

    pub fn frames(&self) -> usize {
        self.grid.rows()
    }

    pub fn num_codebooks(&self) -> usize {
        self.grid.channels()
    }

    pub fn codebook_size(&self) -> u32 {
        self.codebook_size
    }

    pub fn grid(&self) -> &TokenGrid {
        &self.grid
    }

    pub fn into_grid(self) -> TokenGrid {
        self.grid
    }

    pub fn frame(&self, t: usize) -> &[u32] {
        self.grid.row(t)
    }

    pub fn slice_frames(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            grid: self.grid.slice_rows(range),
            codebook_size: self.codebook_size,
        }
    }
}
