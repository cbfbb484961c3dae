use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{CellRange, Tape, Tensor, Var};

/// An `height × width × channels` grid of visual features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    channels: usize,
    values: Tensor,
}

impl FeatureGrid {
    /// `data` is row-major over (row, column, channel).
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let values = Tensor::new(vec![height, width, channels], data)?;
        values.validate("feature grid")?;
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    /// Accepts either an `H×W×C` tensor or a flattened `L×C` tensor with declared `(H, W)`.
    pub fn from_tensor(values: Tensor, height: usize, width: usize) -> Result<Self> {
        let channels = match values.shape() {
            [h, w, c] if *h == height && *w == width => *c,
            [l, c] if *l == height * width => *c,
            s => return Err(Error::dim("feature grid", s, &[height, width])),
        };
        Self::new(height, width, channels, values.into_data())
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels])
            .expect("positive dims")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Flattened token count `L = H·W`.
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn data(&self) -> &[f64] {
        self.values.data()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let c = self.channels;
        let i = row * self.width + col;
        &self.values.data()[i * c..(i + 1) * c]
    }

    /// The grid as an `L×C` matrix.
    pub fn flat(&self) -> Tensor {
        Tensor::matrix(self.len(), self.channels, self.values.data().to_vec())
            .expect("grid dims consistent")
    }

    /// Records the grid on a tape as a constant `L×C` matrix.
    pub fn record(&self, tape: &mut Tape) -> GridVar {
        GridVar {
            var: tape.constant(&self.flat()),
            height: self.height,
            width: self.width,
        }
    }
}

/// A feature grid recorded on a tape as an `L×C` matrix.
#[derive(Debug, Clone, Copy)]
pub struct GridVar {
    pub var: Var,
    pub height: usize,
    pub width: usize,
}

/// Pooled features of an `n×n` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeatures {
    pub n: usize,
    pub channels: usize,
    /// `n²×C`, bins in raster order
    pub values: Tensor,
    pub bin_map: Vec<CellRange>,
}

/// Splits an `height×width` grid into an `n×n` raster of bins. Bin `(i, j)`
/// covers rows `⌊i·H/n⌋..⌊(i+1)·H/n⌋` and the analogous columns.
pub fn adaptive_bins(height: usize, width: usize, n: usize) -> Result<Vec<CellRange>> {
    if n == 0 {
        return Err(Error::contract("pooled layout side must be at least 1"));
    }
    if n > height.min(width) {
        return Err(Error::UnsupportedUpsampling { n, height, width });
    }
    let edge = |i: usize, extent: usize| i * extent / n;
    let mut bins = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            bins.push(CellRange {
                r0: edge(i, height),
                r1: edge(i + 1, height),
                c0: edge(j, width),
                c1: edge(j + 1, width),
            });
        }
    }
    Ok(bins)
}

/// Averages each bin of the `n×n` adaptive layout.
pub fn adaptive_avg_pool(grid: &FeatureGrid, n: usize) -> Result<PooledFeatures> {
    let mut tape = Tape::new();
    let g = grid.record(&mut tape);
    let bins = adaptive_bins(grid.height, grid.width, n)?;
    let out = tape.avg_pool(g.var, grid.width, bins.clone().into())?;
    Ok(PooledFeatures {
        n,
        channels: grid.channels,
        values: tape.tensor(out),
        bin_map: bins,
    })
}

/// Tape version of [`adaptive_avg_pool`]; returns the `n²×C` pooled matrix.
pub fn pool_on_tape(tape: &mut Tape, grid: GridVar, n: usize) -> Result<Var> {
    let bins: Arc<[CellRange]> = adaptive_bins(grid.height, grid.width, n)?.into();
    tape.avg_pool(grid.var, grid.width, bins)
}
