//! Uniform LBP(8,1) codes with the standard 59-bin mapping.

use crate::error::Result;
use crate::tensor::Tensor;

/// 58 uniform patterns plus one shared bin for everything else.
pub const LBP_BINS: usize = 59;

// Neighbor offsets (dy, dx), walked clockwise from the top-left; bit i is
// neighbor i.
const NEIGHBORS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
];

fn transitions(code: u8) -> u32 {
    (code ^ code.rotate_right(1)).count_ones()
}

const fn build_table() -> [u8; 256] {
    let mut table = [58u8; 256];
    let mut next = 0u8;
    let mut code = 0usize;
    while code < 256 {
        let c = code as u8;
        let t = (c ^ c.rotate_right(1)).count_ones();
        if t <= 2 {
            table[code] = next;
            next += 1;
        }
        code += 1;
    }
    table
}

static BIN_TABLE: [u8; 256] = build_table();

/// Bin of an 8-bit code: uniform patterns get bins `0..58` in increasing code
/// order, non-uniform patterns share bin 58.
pub fn uniform_bin(code: u8) -> usize {
    debug_assert_eq!(BIN_TABLE[code as usize] != 58, transitions(code) <= 2);
    BIN_TABLE[code as usize] as usize
}

/// The raw 8-bit code at `(y, x)`; neighbor >= center sets the bit, and
/// out-of-range neighbors are clamped to the border.
pub fn lbp_code(image: &Tensor, y: usize, x: usize) -> Result<u8> {
    let (h, w) = image.dims2()?;
    let data = image.data();
    let center = data[y * w + x];
    let mut code = 0u8;
    for (bit, (dy, dx)) in NEIGHBORS.iter().enumerate() {
        let ny = (y as isize + dy).clamp(0, h as isize - 1) as usize;
        let nx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
        if data[ny * w + nx] >= center {
            code |= 1 << bit;
        }
    }
    Ok(code)
}

/// One-hot `[59 x H x W]` map of uniform LBP bins.
pub fn lbp_map(image: &Tensor) -> Result<Tensor> {
    let (h, w) = image.dims2()?;
    let mut out = Tensor::zeros(&[LBP_BINS, h, w]);
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let bin = uniform_bin(lbp_code(image, y, x)?);
            out.data_mut()[bin * plane + y * w + x] = 1.0;
        }
    }
    Ok(out)
}
