use ndarray::{s, Array2};

use crate::error::{dim_err, Result};

/// Layout of non-overlapping square blocks over a reflect-padded image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockGrid {
    pub height: usize,
    pub width: usize,
    pub block: usize,
    pub rows: usize,
    pub cols: usize,
}

impl BlockGrid {
    pub fn new(height: usize, width: usize, block: usize) -> Result<Self> {
        if block == 0 || height == 0 || width == 0 {
            return Err(dim_err("block grid needs positive sizes"));
        }
        Ok(Self {
            height,
            width,
            block,
            rows: height.div_ceil(block),
            cols: width.div_ceil(block),
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn reflect(i: usize, n: usize) -> usize {
    // symmetric reflection without repeating the edge sample: n-2, n-3, ...
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i % period;
    if k < n {
        k
    } else {
        period - k
    }
}

/// Splits an image into row-major `block x block` tiles, reflect-padding the
/// ragged border.
pub fn tile_blocks(img: &Array2<f64>, block: usize) -> Result<(BlockGrid, Vec<Array2<f64>>)> {
    let (h, w) = img.dim();
    let grid = BlockGrid::new(h, w, block)?;
    let mut out = Vec::with_capacity(grid.len());
    for br in 0..grid.rows {
        for bc in 0..grid.cols {
            out.push(Array2::from_shape_fn((block, block), |(i, j)| {
                img[[reflect(br * block + i, h), reflect(bc * block + j, w)]]
            }));
        }
    }
    Ok((grid, out))
}

/// Reassembles tiles produced by [`tile_blocks`] and crops the padding.
pub fn untile_blocks(grid: &BlockGrid, blocks: &[Array2<f64>]) -> Result<Array2<f64>> {
    if blocks.len() != grid.len() {
        return Err(dim_err(format!("expected {} blocks, got {}", grid.len(), blocks.len())));
    }
    let b = grid.block;
    let mut full = Array2::zeros((grid.rows * b, grid.cols * b));
    for (k, blk) in blocks.iter().enumerate() {
        if blk.dim() != (b, b) {
            return Err(dim_err(format!("block {k} is {:?}, expected {b}x{b}", blk.dim())));
        }
        let (br, bc) = (k / grid.cols, k % grid.cols);
        full.slice_mut(s![br * b..(br + 1) * b, bc * b..(bc + 1) * b])
            .assign(blk);
    }
    Ok(full.slice(s![..grid.height, ..grid.width]).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiles_round_trip_with_ragged_border() {
        let img = Array2::from_shape_fn((70, 40), |(i, j)| (i * 40 + j) as f64);
        let (grid, blocks) = tile_blocks(&img, 33).unwrap();
        assert_eq!((grid.rows, grid.cols), (3, 2));
        assert_eq!(blocks.len(), 6);
        assert_eq!(untile_blocks(&grid, &blocks).unwrap(), img);
    }

    #[test]
    fn padding_reflects() {
        let img = Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f64);
        let (_, blocks) = tile_blocks(&img, 4).unwrap();
        // column 3 mirrors column 1, row 2 mirrors row 0
        assert_eq!(blocks[0][[0, 3]], img[[0, 1]]);
        assert_eq!(blocks[0][[2, 0]], img[[0, 0]]);
    }
}
