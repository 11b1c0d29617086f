//! Sample-quality and sample-diversity metrics: pairwise cosine similarity,
//! 50-bin histogram KL divergence, masked 3D (MS-)SSIM, and voxelwise
//! mean/std maps over repeated samples.

use rayon::prelude::*;

use crate::error::{PowdrError, Result};
use crate::volume::{Mask, Volume};

pub const DEFAULT_KL_BINS: usize = 50;

/// Which voxels contribute to a masked metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Inside,
    Outside,
    All,
}

fn check_dims(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims != b.dims {
        return Err(PowdrError::argument(format!(
            "volume dims mismatch: {:?} vs {:?}",
            a.dims, b.dims
        )));
    }
    Ok(())
}

/// Normalized dot product of the flattened volumes.
pub fn cosine_similarity(a: &Volume, b: &Volume) -> Result<f64> {
    check_dims(a, b)?;
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(PowdrError::argument("zero vector"));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

fn cosine_restricted(a: &Volume, b: &Volume, keep: &[bool]) -> Result<f64> {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for i in 0..a.data.len() {
        if keep[i] {
            let (x, y) = (a.data[i] as f64, b.data[i] as f64);
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
    }
    if na == 0.0 || nb == 0.0 {
        return Err(PowdrError::argument("zero vector"));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

fn histogram(values: impl Iterator<Item = f64>, lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0f64; bins];
    let width = hi - lo;
    for v in values {
        let idx = if width == 0.0 {
            0
        } else {
            (((v - lo) / width * bins as f64) as usize).min(bins - 1)
        };
        h[idx] += 1.0;
    }
    h
}

fn kl_from_counts(ha: &[f64], hb: &[f64]) -> f64 {
    const EPS: f64 = 1e-10;
    let sa: f64 = ha.iter().map(|c| c + EPS).sum();
    let sb: f64 = hb.iter().map(|c| c + EPS).sum();
    let mut kl = 0.0;
    for (&ca, &cb) in ha.iter().zip(hb) {
        let p = (ca + EPS) / sa;
        let q = (cb + EPS) / sb;
        kl += p * (p / q).ln();
    }
    kl
}

/// KL(P‖Q) between intensity histograms of `a` and `b`. Bins span the
/// min..max of the union of both volumes; counts get additive smoothing
/// 1e-10 before normalization, so no bin is ever empty.
pub fn histogram_kl(a: &Volume, b: &Volume, bins: usize) -> Result<f64> {
    check_dims(a, b)?;
    if bins == 0 {
        return Err(PowdrError::argument("bins must be >= 1"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in a.data.iter().chain(&b.data) {
        lo = lo.min(v as f64);
        hi = hi.max(v as f64);
    }
    let ha = histogram(a.data.iter().map(|&v| v as f64), lo, hi, bins);
    let hb = histogram(b.data.iter().map(|&v| v as f64), lo, hi, bins);
    Ok(kl_from_counts(&ha, &hb))
}

fn histogram_kl_restricted(a: &Volume, b: &Volume, keep: &[bool], bins: usize) -> Result<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut any = false;
    for i in 0..a.data.len() {
        if keep[i] {
            any = true;
            lo = lo.min(a.data[i] as f64).min(b.data[i] as f64);
            hi = hi.max(a.data[i] as f64).max(b.data[i] as f64);
        }
    }
    if !any {
        return Err(PowdrError::argument("empty region"));
    }
    let sel = |v: &Volume| {
        v.data
            .iter()
            .enumerate()
            .filter(|(i, _)| keep[*i])
            .map(|(_, &x)| x as f64)
            .collect::<Vec<f64>>()
    };
    let ha = histogram(sel(a).into_iter(), lo, hi, bins);
    let hb = histogram(sel(b).into_iter(), lo, hi, bins);
    Ok(kl_from_counts(&ha, &hb))
}

// --- SSIM machinery -------------------------------------------------------

const SSIM_WINDOW: usize = 7;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01; // (0.01 R)^2 with data range R = 1
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable 3D Gaussian filter with zero padding. Callers divide by the
/// filtered all-ones volume to renormalize boundary windows.
fn gauss_filter(src: &[f64], dims: (usize, usize, usize)) -> Vec<f64> {
    let (nx, ny, nz) = dims;
    let k = gaussian_kernel();
    let r = SSIM_WINDOW as i64 / 2;
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let mut tmp1 = vec![0.0f64; src.len()];
    let mut tmp2 = vec![0.0f64; src.len()];
    // along x
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut acc = 0.0;
                for (j, &w) in k.iter().enumerate() {
                    let xi = x as i64 + j as i64 - r;
                    if xi >= 0 && (xi as usize) < nx {
                        acc += w * src[idx(xi as usize, y, z)];
                    }
                }
                tmp1[idx(x, y, z)] = acc;
            }
        }
    }
    // along y
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut acc = 0.0;
                for (j, &w) in k.iter().enumerate() {
                    let yi = y as i64 + j as i64 - r;
                    if yi >= 0 && (yi as usize) < ny {
                        acc += w * tmp1[idx(x, yi as usize, z)];
                    }
                }
                tmp2[idx(x, y, z)] = acc;
            }
        }
    }
    // along z
    let mut out = vec![0.0f64; src.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut acc = 0.0;
                for (j, &w) in k.iter().enumerate() {
                    let zi = z as i64 + j as i64 - r;
                    if zi >= 0 && (zi as usize) < nz {
                        acc += w * tmp2[idx(x, y, zi as usize)];
                    }
                }
                out[idx(x, y, z)] = acc;
            }
        }
    }
    out
}

fn region_keep(mask: Option<&[bool]>, region: Region, len: usize) -> Result<Vec<bool>> {
    let keep: Vec<bool> = match (mask, region) {
        (_, Region::All) | (None, _) => vec![true; len],
        (Some(m), Region::Inside) => m.to_vec(),
        (Some(m), Region::Outside) => m.iter().map(|&b| !b).collect(),
    };
    if !keep.iter().any(|&b| b) {
        return Err(PowdrError::argument("selected region is empty"));
    }
    Ok(keep)
}

/// Per-voxel SSIM and contrast-structure maps, then the mean over the
/// selected region. Boundary windows are renormalized (weights divided by
/// their in-volume mass) rather than cropped.
fn ssim_maps(
    a: &[f64],
    b: &[f64],
    dims: (usize, usize, usize),
) -> (Vec<f64>, Vec<f64>) {
    let ones = vec![1.0f64; a.len()];
    let norm = gauss_filter(&ones, dims);
    let fa = gauss_filter(a, dims);
    let fb = gauss_filter(b, dims);
    let a2: Vec<f64> = a.iter().map(|v| v * v).collect();
    let b2: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let fa2 = gauss_filter(&a2, dims);
    let fb2 = gauss_filter(&b2, dims);
    let fab = gauss_filter(&ab, dims);
    let mut ssim = vec![0.0f64; a.len()];
    let mut cs = vec![0.0f64; a.len()];
    for i in 0..a.len() {
        let n = norm[i];
        let mu_a = fa[i] / n;
        let mu_b = fb[i] / n;
        let var_a = (fa2[i] / n - mu_a * mu_a).max(0.0);
        let var_b = (fb2[i] / n - mu_b * mu_b).max(0.0);
        let cov = fab[i] / n - mu_a * mu_b;
        let l = (2.0 * mu_a * mu_b + SSIM_C1) / (mu_a * mu_a + mu_b * mu_b + SSIM_C1);
        let c = (2.0 * cov + SSIM_C2) / (var_a + var_b + SSIM_C2);
        ssim[i] = l * c;
        cs[i] = c;
    }
    (ssim, cs)
}

fn region_mean(map: &[f64], keep: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (v, &k) in map.iter().zip(keep) {
        if k {
            sum += v;
            n += 1;
        }
    }
    sum / n as f64
}

/// Single-scale 3D SSIM averaged over the selected region.
pub fn ssim(a: &Volume, b: &Volume, mask: Option<&Mask>, region: Region) -> Result<f64> {
    check_dims(a, b)?;
    if let Some(m) = mask {
        if m.dims != a.dims {
            return Err(PowdrError::argument("mask dims mismatch"));
        }
    }
    let keep = region_keep(mask.map(|m| m.data.as_slice()), region, a.data.len())?;
    let af: Vec<f64> = a.data.iter().map(|&v| v as f64).collect();
    let bf: Vec<f64> = b.data.iter().map(|&v| v as f64).collect();
    let (ssim_map, _) = ssim_maps(&af, &bf, a.dims);
    Ok(region_mean(&ssim_map, &keep))
}

/// 2x average pooling; partial edge blocks average over the voxels present.
fn avg_pool2(src: &[f64], dims: (usize, usize, usize)) -> (Vec<f64>, (usize, usize, usize)) {
    let (nx, ny, nz) = dims;
    let (ox, oy, oz) = (nx.div_ceil(2), ny.div_ceil(2), nz.div_ceil(2));
    let mut out = vec![0.0f64; ox * oy * oz];
    for z in 0..oz {
        for y in 0..oy {
            for x in 0..ox {
                let mut sum = 0.0;
                let mut cnt = 0usize;
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (sx, sy, sz) = (2 * x + dx, 2 * y + dy, 2 * z + dz);
                            if sx < nx && sy < ny && sz < nz {
                                sum += src[sx + nx * (sy + ny * sz)];
                                cnt += 1;
                            }
                        }
                    }
                }
                out[x + ox * (y + oy * z)] = sum / cnt as f64;
            }
        }
    }
    (out, (ox, oy, oz))
}

/// Mask pooling: a pooled voxel is inside if any source voxel under it is.
fn any_pool2(src: &[bool], dims: (usize, usize, usize)) -> Vec<bool> {
    let (nx, ny, nz) = dims;
    let (ox, oy, oz) = (nx.div_ceil(2), ny.div_ceil(2), nz.div_ceil(2));
    let mut out = vec![false; ox * oy * oz];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if src[x + nx * (y + ny * z)] {
                    out[x / 2 + ox * (y / 2 + oy * (z / 2))] = true;
                }
            }
        }
    }
    out
}

/// Exponent weights for 3 scales: the standard 5-scale weights truncated
/// and renormalized.
fn ms_ssim_weights() -> [f64; 3] {
    let w = [0.0448f64, 0.2856, 0.3001];
    let s: f64 = w.iter().sum();
    [w[0] / s, w[1] / s, w[2] / s]
}

/// 3-scale MS-SSIM: contrast-structure at every scale, luminance only at
/// the coarsest, combined as a weighted geometric mean.
pub fn ms_ssim(a: &Volume, b: &Volume, mask: Option<&Mask>, region: Region) -> Result<f64> {
    check_dims(a, b)?;
    if let Some(m) = mask {
        if m.dims != a.dims {
            return Err(PowdrError::argument("mask dims mismatch"));
        }
    }
    let (nx, ny, nz) = a.dims;
    if nx < 16 || ny < 16 || nz < 16 {
        return Err(PowdrError::argument("ms_ssim needs dims >= 16 per axis"));
    }
    let weights = ms_ssim_weights();
    let mut cur_a: Vec<f64> = a.data.iter().map(|&v| v as f64).collect();
    let mut cur_b: Vec<f64> = b.data.iter().map(|&v| v as f64).collect();
    let mut cur_mask: Option<Vec<bool>> = mask.map(|m| m.data.clone());
    let mut cur_dims = a.dims;
    let mut result = 1.0f64;
    for (scale, &w) in weights.iter().enumerate() {
        let keep = region_keep(cur_mask.as_deref(), region, cur_a.len())?;
        let (ssim_map, cs_map) = ssim_maps(&cur_a, &cur_b, cur_dims);
        let term = if scale == weights.len() - 1 {
            region_mean(&ssim_map, &keep)
        } else {
            region_mean(&cs_map, &keep)
        };
        // clamp: fractional exponents of non-positive terms are undefined
        result *= term.max(1e-6).powf(w);
        if scale < weights.len() - 1 {
            let (na, d) = avg_pool2(&cur_a, cur_dims);
            let (nb, _) = avg_pool2(&cur_b, cur_dims);
            cur_mask = cur_mask.map(|m| any_pool2(&m, cur_dims));
            cur_a = na;
            cur_b = nb;
            cur_dims = d;
        }
    }
    Ok(result)
}

// --- Diversity report -----------------------------------------------------

#[derive(Debug, Clone)]
pub struct DiversityReport {
    pub n_samples: usize,
    pub pair_count: usize,
    pub mean_pairwise_cosine: f64,
    pub std_pairwise_cosine: f64,
    pub mean_pairwise_kl: f64,
    pub std_pairwise_kl: f64,
    /// Present when a mask was supplied: same statistics restricted to
    /// outside-mask voxels.
    pub outside: Option<PairStats>,
    pub per_pair: Vec<PairRecord>,
    pub voxelwise_mean: Volume,
    pub voxelwise_std: Volume,
}

#[derive(Debug, Clone, Copy)]
pub struct PairStats {
    pub mean_cosine: f64,
    pub std_cosine: f64,
    pub mean_kl: f64,
    pub std_kl: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct PairRecord {
    pub i: usize,
    pub j: usize,
    pub cosine: f64,
    pub kl: f64,
    pub cosine_outside: Option<f64>,
    pub kl_outside: Option<f64>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// All-pairs diversity statistics plus voxelwise mean/std maps.
/// Std maps use the population convention (divide by N).
pub fn diversity_report(samples: &[Volume], mask: Option<&Mask>) -> Result<DiversityReport> {
    if samples.len() < 2 {
        return Err(PowdrError::argument("need at least 2 samples"));
    }
    let dims = samples[0].dims;
    for s in samples {
        if s.dims != dims {
            return Err(PowdrError::argument("sample dims mismatch"));
        }
    }
    if let Some(m) = mask {
        if m.dims != dims {
            return Err(PowdrError::argument("mask dims mismatch"));
        }
    }
    let outside_keep: Option<Vec<bool>> = mask.map(|m| m.data.iter().map(|&b| !b).collect());
    if let Some(k) = &outside_keep {
        if !k.iter().any(|&b| b) {
            return Err(PowdrError::argument("mask leaves no outside voxels"));
        }
    }

    let n = samples.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .collect();
    let per_pair: Vec<PairRecord> = pairs
        .par_iter()
        .map(|&(i, j)| -> Result<PairRecord> {
            let cosine = cosine_similarity(&samples[i], &samples[j])?;
            let kl = histogram_kl(&samples[i], &samples[j], DEFAULT_KL_BINS)?;
            let (cosine_outside, kl_outside) = match &outside_keep {
                Some(keep) => (
                    Some(cosine_restricted(&samples[i], &samples[j], keep)?),
                    Some(histogram_kl_restricted(
                        &samples[i],
                        &samples[j],
                        keep,
                        DEFAULT_KL_BINS,
                    )?),
                ),
                None => (None, None),
            };
            Ok(PairRecord {
                i,
                j,
                cosine,
                kl,
                cosine_outside,
                kl_outside,
            })
        })
        .collect::<Result<Vec<PairRecord>>>()?;

    let (mean_cos, std_cos) = mean_std(per_pair.iter().map(|p| p.cosine));
    let (mean_kl, std_kl) = mean_std(per_pair.iter().map(|p| p.kl));
    let outside = outside_keep.as_ref().map(|_| {
        let (mc, sc) = mean_std(per_pair.iter().map(|p| p.cosine_outside.unwrap()));
        let (mk, sk) = mean_std(per_pair.iter().map(|p| p.kl_outside.unwrap()));
        PairStats {
            mean_cosine: mc,
            std_cosine: sc,
            mean_kl: mk,
            std_kl: sk,
        }
    });

    let nv = samples[0].data.len();
    let mut mean_map = Volume::zeros(dims);
    let mut std_map = Volume::zeros(dims);
    mean_map.spacing = samples[0].spacing;
    std_map.spacing = samples[0].spacing;
    for i in 0..nv {
        let mean: f64 = samples.iter().map(|s| s.data[i] as f64).sum::<f64>() / n as f64;
        let var: f64 = samples
            .iter()
            .map(|s| (s.data[i] as f64 - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        mean_map.data[i] = mean as f32;
        std_map.data[i] = var.sqrt() as f32;
    }

    Ok(DiversityReport {
        n_samples: n,
        pair_count: n * (n - 1) / 2,
        mean_pairwise_cosine: mean_cos,
        std_pairwise_cosine: std_cos,
        mean_pairwise_kl: mean_kl,
        std_pairwise_kl: std_kl,
        outside,
        per_pair,
        voxelwise_mean: mean_map,
        voxelwise_std: std_map,
    })
}
