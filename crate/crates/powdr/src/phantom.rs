//! Procedural brain-like phantoms: ellipsoidal head with a darker inner
//! ventricle, smooth cosine texture, and a grown connected bright lesion.
//! Deterministic per (seed, case index), so any case regenerates in isolation.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{PowdrError, Result};
use crate::maskgen::grow_connected_mask_within;
use crate::rng::{derive_rng, stream};
use crate::trainer::TrainingExample;
use crate::volume::Volume;

pub const BACKGROUND: f32 = 0.0;
pub const HEAD_INTENSITY: f32 = 0.5;
pub const VENTRICLE_INTENSITY: f32 = 0.2;
pub const LESION_INTENSITY: f32 = 0.85;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: (usize, usize, usize),
    pub n_cases: usize,
    /// Min/max lesion size in voxels.
    pub lesion_volume_range: (u64, u64),
    pub texture_amplitude: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (nx, ny, nz) = self.dims;
        if nx % 2 != 0 || ny % 2 != 0 || nz % 2 != 0 || nx < 4 || ny < 4 || nz < 4 {
            return Err(PowdrError::argument("dims must be even and >= 4 per axis"));
        }
        if self.n_cases == 0 {
            return Err(PowdrError::argument("n_cases must be >= 1"));
        }
        let (lo, hi) = self.lesion_volume_range;
        if lo == 0 || lo > hi {
            return Err(PowdrError::argument("need 0 < lesion_min <= lesion_max"));
        }
        if !(0.0..=0.5).contains(&self.texture_amplitude) {
            return Err(PowdrError::argument("texture_amplitude must be in [0, 0.5]"));
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: (f64, f64, f64),
    semi: (f64, f64, f64),
}

impl Ellipsoid {
    fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let dx = (x as f64 - self.center.0) / self.semi.0;
        let dy = (y as f64 - self.center.1) / self.semi.1;
        let dz = (z as f64 - self.center.2) / self.semi.2;
        dx * dx + dy * dy + dz * dz <= 1.0
    }
}

/// Generate one case. The RNG stream depends only on (spec.seed, case_index).
pub fn generate_phantom(spec: &PhantomSpec, case_index: usize) -> Result<TrainingExample> {
    spec.validate()?;
    if case_index >= spec.n_cases {
        return Err(PowdrError::argument(format!(
            "case index {case_index} out of range (n_cases = {})",
            spec.n_cases
        )));
    }
    let mut rng = derive_rng(spec.seed, stream::PHANTOM, case_index as u64);
    let (nx, ny, nz) = spec.dims;
    let center = (
        (nx as f64 - 1.0) / 2.0,
        (ny as f64 - 1.0) / 2.0,
        (nz as f64 - 1.0) / 2.0,
    );
    let head = Ellipsoid {
        center,
        semi: (
            rng.gen_range(0.35..0.45) * nx as f64,
            rng.gen_range(0.35..0.45) * ny as f64,
            rng.gen_range(0.35..0.45) * nz as f64,
        ),
    };
    let ventricle = Ellipsoid {
        center,
        semi: (
            head.semi.0 * rng.gen_range(0.2..0.35),
            head.semi.1 * rng.gen_range(0.2..0.35),
            head.semi.2 * rng.gen_range(0.2..0.35),
        ),
    };

    let mut image = Volume::zeros(spec.dims);
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let mut head_voxels = 0u64;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if head.contains(x, y, z) {
                    head_voxels += 1;
                    image.data[idx(x, y, z)] = if ventricle.contains(x, y, z) {
                        VENTRICLE_INTENSITY
                    } else {
                        HEAD_INTENSITY
                    };
                }
            }
        }
    }

    // a few random low-frequency cosine modes, head interior only
    // (background stays exactly 0)
    let n_modes = 3;
    let modes: Vec<(f64, f64, f64, f64, f64)> = (0..n_modes)
        .map(|_| {
            (
                rng.gen_range(1..=3) as f64,
                rng.gen_range(1..=3) as f64,
                rng.gen_range(1..=3) as f64,
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.5..1.0),
            )
        })
        .collect();
    if spec.texture_amplitude > 0.0 {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = idx(x, y, z);
                    if image.data[i] == 0.0 {
                        continue;
                    }
                    let mut t = 0.0f64;
                    for &(fx, fy, fz, phase, amp) in &modes {
                        let arg = std::f64::consts::TAU
                            * (fx * x as f64 / nx as f64
                                + fy * y as f64 / ny as f64
                                + fz * z as f64 / nz as f64)
                            + phase;
                        t += amp * arg.cos();
                    }
                    image.data[i] += (spec.texture_amplitude * t / n_modes as f64) as f32;
                }
            }
        }
    }

    // lesion: connected region grown inside the head; if the sampled target
    // cannot fit, retry with a smaller target, bounded
    let (lo, hi) = spec.lesion_volume_range;
    let mut target = rng.gen_range(lo..=hi).min(head_voxels);
    let lesion = loop {
        match grow_connected_mask_within(spec.dims, target, |x, y, z| head.contains(x, y, z), &mut rng)
        {
            Ok(m) => break m,
            Err(_) if target > lo => target = lo.max(target / 2),
            Err(e) => {
                return Err(PowdrError::contract(format!(
                    "lesion of {target} voxels does not fit in head: {e}"
                )))
            }
        }
    };
    for (i, &inside) in lesion.data.iter().enumerate() {
        if inside {
            image.data[i] = LESION_INTENSITY;
        }
    }
    for v in image.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(TrainingExample {
        image,
        pathology_mask: lesion,
    })
}

/// Generate all cases; independent streams make this order-free.
pub fn generate_all(spec: &PhantomSpec) -> Result<Vec<TrainingExample>> {
    spec.validate()?;
    (0..spec.n_cases)
        .into_par_iter()
        .map(|i| generate_phantom(spec, i))
        .collect()
}
