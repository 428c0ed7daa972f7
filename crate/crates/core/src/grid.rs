use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::numerics::Tensor;

/// A `t × h × w` grid of token vectors, stored as a `(t·h·w) × channels`
/// matrix in raster order (t-major, then h, then w).
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub dims: GridDims,
    pub values: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl GridDims {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    pub fn len(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, t: usize, h: usize, w: usize) -> usize {
        (t * self.h + h) * self.w + w
    }

    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        (i / (self.h * self.w), (i / self.w) % self.h, i % self.w)
    }
}

pub type LatentGrid = Grid;
pub type SemanticGrid = Grid;
pub type RawSemanticGrid = Grid;

impl Grid {
    pub fn new(dims: GridDims, values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 || values.rows() != dims.len() {
            return Err(dim_err!(
                "grid {}x{}x{} needs {} token rows, got {:?}",
                dims.t,
                dims.h,
                dims.w,
                dims.len(),
                values.shape()
            ));
        }
        Ok(Self { dims, values })
    }

    pub fn zeros(dims: GridDims, channels: usize) -> Self {
        Self {
            dims,
            values: Tensor::zeros(&[dims.len(), channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn with_values(&self, values: Tensor) -> Result<Self> {
        Self::new(self.dims, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raster_index_round_trips() {
        let d = GridDims::new(3, 2, 4);
        for i in 0..d.len() {
            let (t, h, w) = d.coords(i);
            assert_eq!(d.index(t, h, w), i);
        }
        assert_eq!(GridDims::new(2, 2, 2).index(1, 0, 1), 5);
    }
}
