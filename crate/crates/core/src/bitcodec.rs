//! Lossless conversion between codebook indices, bit vectors and token grids.
//!
//! Bit order is least-significant-bit first: element `j` of a [`BitVector`]
//! holds bit `j` of the index. Tokens wider than 64 bits never become
//! integers; they only exist as bit vectors.

use std::io::{Read, Write};

use crate::error::{BarError, Result};

/// Widest token accepted anywhere in the crate.
pub const MAX_BITS: usize = 256;
/// Widest token that still has an integer index.
pub const MAX_INDEX_BITS: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitVector(Box<[u8]>);

impl BitVector {
    /// Builds a bit vector from 0/1 values.
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(BarError::Domain("bit vector must hold at least one bit".into()));
        }
        if bits.len() > MAX_BITS {
            return Err(BarError::Domain(format!(
                "bit width {} exceeds the {MAX_BITS}-bit limit",
                bits.len()
            )));
        }
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(BarError::Domain(format!("bit value {b} is not 0 or 1")));
        }
        Ok(BitVector(bits.into_boxed_slice()))
    }

    pub fn zeros(k: usize) -> Result<Self> {
        Self::new(vec![0; k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn get(&self, j: usize) -> u8 {
        self.0[j]
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b == 1).count()
    }

    pub fn hamming(&self, other: &BitVector) -> usize {
        self.0.iter().zip(other.0.iter()).filter(|(a, b)| a != b).count()
    }
}

pub fn index_to_bits(index: u64, k: usize) -> Result<BitVector> {
    if k == 0 {
        return Err(BarError::Domain("bit width must be at least 1".into()));
    }
    if k > MAX_BITS {
        return Err(BarError::Domain(format!("bit width {k} exceeds {MAX_BITS}")));
    }
    if k < 64 && index >> k != 0 {
        return Err(BarError::Domain(format!("index {index} does not fit in {k} bits")));
    }
    let bits = (0..k)
        .map(|j| if j < 64 { ((index >> j) & 1) as u8 } else { 0 })
        .collect();
    Ok(BitVector(bits))
}

pub fn bits_to_index(bits: &BitVector) -> Result<u64> {
    if bits.len() > MAX_INDEX_BITS {
        return Err(BarError::Capability(format!(
            "{}-bit token has no integer index (limit {MAX_INDEX_BITS})",
            bits.len()
        )));
    }
    Ok(bits
        .bits()
        .iter()
        .enumerate()
        .fold(0u64, |acc, (j, &b)| acc | (u64::from(b) << j)))
}

/// A row-major grid of equally wide bit tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    height: usize,
    width: usize,
    bits_per_token: usize,
    tokens: Vec<BitVector>,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, tokens: Vec<BitVector>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(BarError::Shape("token grid must be non-empty".into()));
        }
        if tokens.len() != height * width {
            return Err(BarError::Shape(format!(
                "{}x{} grid needs {} tokens, got {}",
                height,
                width,
                height * width,
                tokens.len()
            )));
        }
        let k = tokens[0].len();
        if let Some(t) = tokens.iter().find(|t| t.len() != k) {
            return Err(BarError::Shape(format!(
                "mixed token widths in grid: {} and {}",
                k,
                t.len()
            )));
        }
        Ok(TokenGrid {
            height,
            width,
            bits_per_token: k,
            tokens,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits_per_token(&self) -> usize {
        self.bits_per_token
    }

    pub fn tokens(&self) -> &[BitVector] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<BitVector> {
        self.tokens
    }

    pub fn token(&self, row: usize, col: usize) -> &BitVector {
        &self.tokens[row * self.width + col]
    }

    pub fn total_bits(&self) -> usize {
        self.height * self.width * self.bits_per_token
    }
}

/// Groups each `patch`×`patch` block of tokens into one wider token. The bits
/// of the block's tokens are concatenated in row-major order within the block.
pub fn patch_shuffle(grid: &TokenGrid, patch: usize) -> Result<TokenGrid> {
    if patch == 0 || !grid.height.is_multiple_of(patch) || !grid.width.is_multiple_of(patch) {
        return Err(BarError::Shape(format!(
            "patch size {patch} does not divide a {}x{} grid",
            grid.height, grid.width
        )));
    }
    let (h, w) = (grid.height / patch, grid.width / patch);
    let k = grid.bits_per_token * patch * patch;
    if k > MAX_BITS {
        return Err(BarError::Shape(format!("shuffled token width {k} exceeds {MAX_BITS}")));
    }
    let mut tokens = Vec::with_capacity(h * w);
    for bi in 0..h {
        for bj in 0..w {
            let mut bits = Vec::with_capacity(k);
            for dy in 0..patch {
                for dx in 0..patch {
                    bits.extend_from_slice(grid.token(bi * patch + dy, bj * patch + dx).bits());
                }
            }
            tokens.push(BitVector(bits.into_boxed_slice()));
        }
    }
    TokenGrid::new(h, w, tokens)
}

pub fn patch_unshuffle(grid: &TokenGrid, patch: usize) -> Result<TokenGrid> {
    let area = patch * patch;
    if patch == 0 || !grid.bits_per_token.is_multiple_of(area) {
        return Err(BarError::Shape(format!(
            "{}-bit tokens cannot be split into {patch}x{patch} patches",
            grid.bits_per_token
        )));
    }
    let k = grid.bits_per_token / area;
    let (h, w) = (grid.height * patch, grid.width * patch);
    let mut tokens = vec![None; h * w];
    for bi in 0..grid.height {
        for bj in 0..grid.width {
            let bits = grid.token(bi, bj).bits();
            for (slot, chunk) in bits.chunks(k).enumerate() {
                let (dy, dx) = (slot / patch, slot % patch);
                tokens[(bi * patch + dy) * w + bj * patch + dx] =
                    Some(BitVector(chunk.to_vec().into_boxed_slice()));
            }
        }
    }
    TokenGrid::new(h, w, tokens.into_iter().map(|t| t.expect("every cell filled")).collect())
}

const GRID_MAGIC: &[u8; 4] = b"BARG";
const GRID_VERSION: u8 = 1;

/// Writes one grid in the `BARG` container: magic, version byte, height,
/// width and bits-per-token as u32 LE, then the token bits packed LSB-first.
pub fn write_grid<W: Write>(mut out: W, grid: &TokenGrid) -> Result<()> {
    out.write_all(GRID_MAGIC)?;
    out.write_all(&[GRID_VERSION])?;
    for dim in [grid.height, grid.width, grid.bits_per_token] {
        out.write_all(&(dim as u32).to_le_bytes())?;
    }
    let mut packed = vec![0u8; grid.total_bits().div_ceil(8)];
    let all_bits = grid.tokens.iter().flat_map(|t| t.bits().iter());
    for (i, &b) in all_bits.enumerate() {
        packed[i / 8] |= b << (i % 8);
    }
    out.write_all(&packed)?;
    Ok(())
}

/// Reads one grid. Returns `Ok(None)` at a clean end of stream, so several
/// containers can be concatenated in one file.
pub fn read_grid<R: Read>(mut input: R) -> Result<Option<TokenGrid>> {
    let mut magic = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = input.read(&mut magic[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(None);
            }
            return Err(BarError::Format("truncated grid header".into()));
        }
        filled += n;
    }
    if &magic != GRID_MAGIC {
        return Err(BarError::Format("missing BARG magic".into()));
    }
    let mut header = [0u8; 13];
    input.read_exact(&mut header)?;
    if header[0] != GRID_VERSION {
        return Err(BarError::Format(format!("unsupported grid version {}", header[0])));
    }
    let dim = |i: usize| u32::from_le_bytes(header[1 + 4 * i..5 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, k) = (dim(0), dim(1), dim(2));
    if h == 0 || w == 0 || k == 0 || k > MAX_BITS {
        return Err(BarError::Format(format!("invalid grid dimensions {h}x{w}x{k}")));
    }
    let mut packed = vec![0u8; (h * w * k).div_ceil(8)];
    input.read_exact(&mut packed)?;
    let tokens = (0..h * w)
        .map(|t| {
            let bits = (0..k)
                .map(|j| {
                    let i = t * k + j;
                    (packed[i / 8] >> (i % 8)) & 1
                })
                .collect::<Vec<_>>();
            BitVector(bits.into_boxed_slice())
        })
        .collect();
    TokenGrid::new(h, w, tokens).map(Some)
}

pub fn read_all_grids<R: Read>(mut input: R) -> Result<Vec<TokenGrid>> {
    let mut grids = Vec::new();
    while let Some(g) = read_grid(&mut input)? {
        grids.push(g);
    }
    Ok(grids)
}
