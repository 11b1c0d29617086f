//! Single-level orthonormal 3D Haar wavelet transform and its exact inverse.
//!
//! The 8 subbands are ordered {LLL, LLH, LHL, LHH, HLL, HLH, HHL, HHH}; the
//! letters name the filter applied along axes (x, y, z), first letter = x.
//! Each axis carries a 1/sqrt(2) factor, so the transform is orthonormal.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{PowdrError, Result};
use crate::volume::{Volume, DTYPE_F32, PVOL_MAGIC, PVOL_VERSION};

pub const NUM_SUBBANDS: usize = 8;
pub const SUBBAND_NAMES: [&str; 8] = ["LLL", "LLH", "LHL", "LHH", "HLL", "HLH", "HHL", "HHH"];

const INV_2SQRT2: f64 = 0.35355339059327373; // 1/(2*sqrt(2))

/// 8-channel half-resolution coefficient tensor, channel-major then x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandTensor {
    /// Per-channel spatial dims (H/2, W/2, D/2) of the source volume.
    pub dims: (usize, usize, usize),
    pub data: Vec<f64>,
}

impl SubbandTensor {
    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        SubbandTensor {
            dims,
            data: vec![0.0; NUM_SUBBANDS * dims.0 * dims.1 * dims.2],
        }
    }

    pub fn new(dims: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        if data.len() != NUM_SUBBANDS * dims.0 * dims.1 * dims.2 {
            return Err(PowdrError::argument("subband data length mismatch"));
        }
        Ok(SubbandTensor { dims, data })
    }

    /// Coefficients per channel.
    pub fn channel_len(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.channel_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &SubbandTensor) -> bool {
        self.dims == other.dims
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Haar sign for filter `f` (0 = L, 1 = H) at block offset `i`.
#[inline]
fn sign(f: usize, i: usize) -> f64 {
    if f == 1 && i == 1 {
        -1.0
    } else {
        1.0
    }
}

/// Single-level 3D Haar DWT over non-overlapping 2x2x2 blocks.
pub fn dwt3(v: &Volume) -> Result<SubbandTensor> {
    let (nx, ny, nz) = v.dims;
    if nx % 2 != 0 || ny % 2 != 0 || nz % 2 != 0 {
        return Err(PowdrError::argument(format!(
            "dwt3 requires even dims, got {nx}x{ny}x{nz}"
        )));
    }
    let (hx, hy, hz) = (nx / 2, ny / 2, nz / 2);
    let mut out = SubbandTensor::zeros((hx, hy, hz));
    let chan_len = hx * hy * hz;
    for bz in 0..hz {
        for by in 0..hy {
            for bx in 0..hx {
                // gather the 2x2x2 block
                let mut b = [0.0f64; 8];
                for k in 0..2 {
                    for j in 0..2 {
                        for i in 0..2 {
                            b[4 * i + 2 * j + k] = v.at(2 * bx + i, 2 * by + j, 2 * bz + k) as f64;
                        }
                    }
                }
                let spatial = bx + hx * (by + hy * bz);
                for fx in 0..2 {
                    for fy in 0..2 {
                        for fz in 0..2 {
                            let ch = 4 * fx + 2 * fy + fz;
                            let mut acc = 0.0;
                            for i in 0..2 {
                                for j in 0..2 {
                                    for k in 0..2 {
                                        acc += b[4 * i + 2 * j + k]
                                            * sign(fx, i)
                                            * sign(fy, j)
                                            * sign(fz, k);
                                    }
                                }
                            }
                            out.data[ch * chan_len + spatial] = acc * INV_2SQRT2;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`dwt3`].
pub fn idwt3(s: &SubbandTensor) -> Volume {
    let (hx, hy, hz) = s.dims;
    let (nx, ny, nz) = (2 * hx, 2 * hy, 2 * hz);
    let chan_len = hx * hy * hz;
    let mut out = Volume::zeros((nx, ny, nz));
    for bz in 0..hz {
        for by in 0..hy {
            for bx in 0..hx {
                let spatial = bx + hx * (by + hy * bz);
                let mut block = [0.0f64; 8];
                for fx in 0..2 {
                    for fy in 0..2 {
                        for fz in 0..2 {
                            let coeff = s.data[(4 * fx + 2 * fy + fz) * chan_len + spatial];
                            if coeff == 0.0 {
                                continue;
                            }
                            for i in 0..2 {
                                for j in 0..2 {
                                    for k in 0..2 {
                                        block[4 * i + 2 * j + k] += coeff
                                            * sign(fx, i)
                                            * sign(fy, j)
                                            * sign(fz, k);
                                    }
                                }
                            }
                        }
                    }
                }
                for i in 0..2 {
                    for j in 0..2 {
                        for k in 0..2 {
                            let idx = (2 * bx + i) + nx * ((2 * by + j) + ny * (2 * bz + k));
                            out.data[idx] = (block[4 * i + 2 * j + k] * INV_2SQRT2) as f32;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Serialize a subband tensor: PVOL-style header plus a channel-count field,
/// then 8 consecutive f32 payload blocks.
pub fn write_subbands(s: &SubbandTensor, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PVOL_MAGIC)?;
    w.write_all(&PVOL_VERSION.to_le_bytes())?;
    w.write_all(&DTYPE_F32.to_le_bytes())?;
    for d in [s.dims.0, s.dims.1, s.dims.2] {
        let d = u32::try_from(d).map_err(|_| PowdrError::argument("dims exceed u32"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for sp in [1.0f32, 1.0, 1.0] {
        w.write_all(&sp.to_le_bytes())?;
    }
    w.write_all(&(NUM_SUBBANDS as u32).to_le_bytes())?;
    for &c in &s.data {
        w.write_all(&(c as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_subbands(path: impl AsRef<Path>) -> Result<SubbandTensor> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| PowdrError::format(0, "truncated magic"))?;
    if &magic != PVOL_MAGIC {
        return Err(PowdrError::format(0, "bad magic, expected \"PVOL\""));
    }
    let mut u32buf = [0u8; 4];
    let mut next_u32 = |offset: u64, what: &str| -> Result<u32> {
        r.read_exact(&mut u32buf)
            .map_err(|_| PowdrError::format(offset, format!("truncated {what}")))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = next_u32(4, "version")?;
    if version != PVOL_VERSION {
        return Err(PowdrError::format(4, "unsupported version"));
    }
    let dtype = next_u32(8, "dtype")?;
    if dtype != DTYPE_F32 {
        return Err(PowdrError::format(8, "subbands require f32 dtype"));
    }
    let dims = (
        next_u32(12, "dims")? as usize,
        next_u32(16, "dims")? as usize,
        next_u32(20, "dims")? as usize,
    );
    for off in [24u64, 28, 32] {
        next_u32(off, "spacing")?;
    }
    let channels = next_u32(36, "channel count")?;
    if channels as usize != NUM_SUBBANDS {
        return Err(PowdrError::format(36, format!("expected 8 channels, got {channels}")));
    }
    let count = NUM_SUBBANDS * dims.0 * dims.1 * dims.2;
    let mut payload = vec![0u8; count * 4];
    let mut rr = r;
    rr.read_exact(&mut payload)
        .map_err(|_| PowdrError::format(40, "payload length shorter than header dims"))?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    SubbandTensor::new(dims, data)
}
