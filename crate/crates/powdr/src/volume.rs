//! Dense 3D volumes, binary masks, preprocessing primitives, and PVOL file I/O.
//!
//! Voxel layout is row-major with x fastest: `data[x + nx*(y + ny*z)]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{PowdrError, Result};

pub const PVOL_MAGIC: &[u8; 4] = b"PVOL";
pub const PVOL_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;
pub const DTYPE_MASK: u32 = 2;

/// Dense 3D scalar field with voxel spacing in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: (usize, usize, usize),
    pub spacing: (f32, f32, f32),
    pub data: Vec<f32>,
}

/// Binary 3D volume, same layout as [`Volume`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub dims: (usize, usize, usize),
    pub data: Vec<bool>,
}

impl Volume {
    pub fn new(dims: (usize, usize, usize), spacing: (f32, f32, f32), data: Vec<f32>) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        if data.len() != n {
            return Err(PowdrError::argument(format!(
                "data length {} does not match dims {}x{}x{}",
                data.len(),
                dims.0,
                dims.1,
                dims.2
            )));
        }
        if spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0 {
            return Err(PowdrError::argument("spacing must be strictly positive"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(PowdrError::Numerical("volume contains non-finite values".into()));
        }
        Ok(Volume { dims, spacing, data })
    }

    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        Volume {
            dims,
            spacing: (1.0, 1.0, 1.0),
            data: vec![0.0; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }
}

impl Mask {
    pub fn new(dims: (usize, usize, usize), data: Vec<bool>) -> Result<Self> {
        if data.len() != dims.0 * dims.1 * dims.2 {
            return Err(PowdrError::argument("mask data length does not match dims"));
        }
        Ok(Mask { dims, data })
    }

    pub fn filled(dims: (usize, usize, usize), value: bool) -> Self {
        Mask {
            dims,
            data: vec![value; dims.0 * dims.1 * dims.2],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.index(x, y, z)]
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Percentile of `sorted` (ascending) via linear interpolation, `p` in [0, 100].
fn percentile_sorted(sorted: &[f32], p: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let pos = p / 100.0 * (n as f64 - 1.0);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] as f64 * (1.0 - frac) + sorted[hi.min(n - 1)] as f64 * frac
}

/// Clip values to the [p_lo, p_hi] percentiles of `v` and affinely map that range to [0, 1].
pub fn normalize_percentile(v: &Volume, lo: f64, hi: f64) -> Result<Volume> {
    if !(0.0..100.0).contains(&lo) || !(lo..=100.0).contains(&hi) || lo >= hi {
        return Err(PowdrError::argument(format!(
            "percentiles must satisfy 0 <= lo < hi <= 100, got lo={lo}, hi={hi}"
        )));
    }
    let mut sorted = v.data.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if sorted.first() == sorted.last() {
        return Err(PowdrError::argument("constant volume"));
    }
    let p_lo = percentile_sorted(&sorted, lo);
    let p_hi = percentile_sorted(&sorted, hi);
    if p_hi - p_lo <= 0.0 {
        return Err(PowdrError::argument("constant volume"));
    }
    let scale = 1.0 / (p_hi - p_lo);
    let data = v
        .data
        .iter()
        .map(|&x| {
            let c = (x as f64).clamp(p_lo, p_hi);
            (((c - p_lo) * scale).clamp(0.0, 1.0)) as f32
        })
        .collect();
    Ok(Volume {
        dims: v.dims,
        spacing: v.spacing,
        data,
    })
}

/// Morphological dilation with a spherical structuring element of the given
/// radius in voxel units. The output is a superset of the input.
pub fn dilate_spherical(m: &Mask, radius_voxels: u32) -> Mask {
    if radius_voxels == 0 {
        return m.clone();
    }
    let r = radius_voxels as i64;
    let r2 = r * r;
    let mut offsets = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy + dz * dz <= r2 {
                    offsets.push((dx, dy, dz));
                }
            }
        }
    }
    let (nx, ny, nz) = m.dims;
    let mut out = vec![false; m.data.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !m.at(x, y, z) {
                    continue;
                }
                for &(dx, dy, dz) in &offsets {
                    let (px, py, pz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                    if px >= 0
                        && py >= 0
                        && pz >= 0
                        && (px as usize) < nx
                        && (py as usize) < ny
                        && (pz as usize) < nz
                    {
                        out[px as usize + nx * (py as usize + ny * pz as usize)] = true;
                    }
                }
            }
        }
    }
    Mask { dims: m.dims, data: out }
}

/// Element-wise product of a volume with a binary mask.
pub fn apply_mask(v: &Volume, m: &Mask) -> Result<Volume> {
    if v.dims != m.dims {
        return Err(PowdrError::argument(format!(
            "dim mismatch: volume {:?} vs mask {:?}",
            v.dims, m.dims
        )));
    }
    let data = v
        .data
        .iter()
        .zip(&m.data)
        .map(|(&x, &b)| if b { x } else { 0.0 })
        .collect();
    Ok(Volume {
        dims: v.dims,
        spacing: v.spacing,
        data,
    })
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: u64, what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| PowdrError::format(offset, format!("truncated {what}")))
}

struct PvolHeader {
    dtype: u32,
    dims: (usize, usize, usize),
    spacing: (f32, f32, f32),
    count: usize,
}

fn read_pvol_header<R: Read>(r: &mut R) -> Result<PvolHeader> {
    let mut magic = [0u8; 4];
    read_exact_at(r, &mut magic, 0, "magic")?;
    if &magic != PVOL_MAGIC {
        return Err(PowdrError::format(0, "bad magic, expected \"PVOL\""));
    }
    let mut u32buf = [0u8; 4];
    read_exact_at(r, &mut u32buf, 4, "version")?;
    let version = u32::from_le_bytes(u32buf);
    if version != PVOL_VERSION {
        return Err(PowdrError::format(4, format!("unsupported version {version}")));
    }
    read_exact_at(r, &mut u32buf, 8, "dtype")?;
    let dtype = u32::from_le_bytes(u32buf);
    if dtype != DTYPE_F32 && dtype != DTYPE_MASK {
        return Err(PowdrError::format(8, format!("unknown dtype code {dtype}")));
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        read_exact_at(r, &mut u32buf, 12 + 4 * i as u64, "dims")?;
        *d = u32::from_le_bytes(u32buf) as usize;
    }
    let mut spacing = [0f32; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        read_exact_at(r, &mut u32buf, 24 + 4 * i as u64, "spacing")?;
        *s = f32::from_le_bytes(u32buf);
    }
    let count = dims[0]
        .checked_mul(dims[1])
        .and_then(|n| n.checked_mul(dims[2]))
        .filter(|&n| n <= (1usize << 33))
        .ok_or_else(|| PowdrError::format(12, "dim overflow"))?;
    Ok(PvolHeader {
        dtype,
        dims: (dims[0], dims[1], dims[2]),
        spacing: (spacing[0], spacing[1], spacing[2]),
        count,
    })
}

fn write_pvol_header<W: Write>(
    w: &mut W,
    dtype: u32,
    dims: (usize, usize, usize),
    spacing: (f32, f32, f32),
) -> Result<()> {
    w.write_all(PVOL_MAGIC)?;
    w.write_all(&PVOL_VERSION.to_le_bytes())?;
    w.write_all(&dtype.to_le_bytes())?;
    for d in [dims.0, dims.1, dims.2] {
        let d = u32::try_from(d).map_err(|_| PowdrError::argument("dims exceed u32"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for s in [spacing.0, spacing.1, spacing.2] {
        w.write_all(&s.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_pvol_header(&mut r)?;
    if h.dtype != DTYPE_F32 {
        return Err(PowdrError::format(8, "expected float32 volume dtype"));
    }
    let mut payload = vec![0u8; h.count * 4];
    r.read_exact(&mut payload)
        .map_err(|_| PowdrError::format(36, "payload length shorter than header dims"))?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    // trailing bytes beyond the declared payload are a format defect
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(PowdrError::format(
            36 + h.count as u64 * 4,
            "payload length longer than header dims",
        ));
    }
    Ok(Volume {
        dims: h.dims,
        spacing: h.spacing,
        data,
    })
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pvol_header(&mut w, DTYPE_F32, v.dims, v.spacing)?;
    for &x in &v.data {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_pvol_header(&mut r)?;
    if h.dtype != DTYPE_MASK {
        return Err(PowdrError::format(8, "expected mask dtype"));
    }
    let mut payload = vec![0u8; h.count];
    r.read_exact(&mut payload)
        .map_err(|_| PowdrError::format(36, "payload length shorter than header dims"))?;
    let data = payload
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(PowdrError::format(36, format!("mask byte {other} is not 0/1"))),
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(Mask { dims: h.dims, data })
}

pub fn write_mask(m: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pvol_header(&mut w, DTYPE_MASK, m.dims, (1.0, 1.0, 1.0))?;
    for &b in &m.data {
        w.write_all(&[u8::from(b)])?;
    }
    w.flush()?;
    Ok(())
}
