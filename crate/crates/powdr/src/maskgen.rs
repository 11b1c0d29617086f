//! Random 6-connected mask generation matched to a reference volume distribution.

use std::path::Path;

use rand::Rng;

use crate::error::{PowdrError, Result};
use crate::volume::Mask;

/// Empirical distribution of lesion voxel counts with multiplicative jitter.
#[derive(Debug, Clone)]
pub struct VolumeDistribution {
    pub samples: Vec<u64>,
    pub jitter_fraction: f64,
}

impl VolumeDistribution {
    pub fn new(samples: Vec<u64>, jitter_fraction: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(PowdrError::argument("empty volume distribution"));
        }
        if samples.iter().any(|&s| s == 0) {
            return Err(PowdrError::argument("volume samples must be positive"));
        }
        if jitter_fraction < 0.0 {
            return Err(PowdrError::argument("jitter must be non-negative"));
        }
        Ok(VolumeDistribution {
            samples,
            jitter_fraction,
        })
    }

    /// Load a one-integer-per-line text file of reference voxel counts.
    pub fn from_file(path: impl AsRef<Path>, jitter_fraction: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut samples = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let v: u64 = line.parse().map_err(|_| {
                PowdrError::argument(format!("line {}: expected an integer, got {line:?}", lineno + 1))
            })?;
            samples.push(v);
        }
        VolumeDistribution::new(samples, jitter_fraction)
    }
}

/// Draw a target voxel count: uniform pick from the reference samples,
/// multiplicative jitter, round, clamp to >= 1.
pub fn sample_target_volume(dist: &VolumeDistribution, rng: &mut impl Rng) -> u64 {
    let base = dist.samples[rng.gen_range(0..dist.samples.len())] as f64;
    let u = if dist.jitter_fraction > 0.0 {
        rng.gen_range(-dist.jitter_fraction..=dist.jitter_fraction)
    } else {
        0.0
    };
    ((base * (1.0 + u)).round() as u64).max(1)
}

const NEIGHBORS: [(i64, i64, i64); 6] = [
    (1, 0, 0),
    (-1, 0, 0),
    (0, 1, 0),
    (0, -1, 0),
    (0, 0, 1),
    (0, 0, -1),
];

/// Grow a 6-connected region of exactly `target_voxels` voxels by random
/// frontier expansion, restricted to voxels where `allowed` is true.
///
/// The seed voxel is uniform over allowed voxels. Returns an error if the
/// allowed region cannot hold the target.
pub fn grow_connected_mask_within(
    dims: (usize, usize, usize),
    target_voxels: u64,
    allowed: impl Fn(usize, usize, usize) -> bool,
    rng: &mut impl Rng,
) -> Result<Mask> {
    let (nx, ny, nz) = dims;
    let total = nx * ny * nz;
    if target_voxels == 0 {
        return Err(PowdrError::argument("target voxel count must be >= 1"));
    }
    if target_voxels as usize > total {
        return Err(PowdrError::argument(format!(
            "target {target_voxels} exceeds grid size {total}"
        )));
    }
    let allowed_list: Vec<usize> = (0..total)
        .filter(|&i| {
            let x = i % nx;
            let y = (i / nx) % ny;
            let z = i / (nx * ny);
            allowed(x, y, z)
        })
        .collect();
    if (allowed_list.len() as u64) < target_voxels {
        return Err(PowdrError::argument(format!(
            "target {target_voxels} exceeds allowed region size {}",
            allowed_list.len()
        )));
    }
    let mut in_region = vec![false; total];
    let mut in_frontier = vec![false; total];
    let mut frontier: Vec<usize> = Vec::new();

    let seed = allowed_list[rng.gen_range(0..allowed_list.len())];
    in_region[seed] = true;
    let mut count = 1u64;

    let push_neighbors = |idx: usize,
                          in_region: &[bool],
                          in_frontier: &mut [bool],
                          frontier: &mut Vec<usize>| {
        let x = (idx % nx) as i64;
        let y = ((idx / nx) % ny) as i64;
        let z = (idx / (nx * ny)) as i64;
        for &(dx, dy, dz) in &NEIGHBORS {
            let (px, py, pz) = (x + dx, y + dy, z + dz);
            if px < 0 || py < 0 || pz < 0 {
                continue;
            }
            let (px, py, pz) = (px as usize, py as usize, pz as usize);
            if px >= nx || py >= ny || pz >= nz {
                continue;
            }
            let n = px + nx * (py + ny * pz);
            if !in_region[n] && !in_frontier[n] && allowed(px, py, pz) {
                in_frontier[n] = true;
                frontier.push(n);
            }
        }
    };
    push_neighbors(seed, &in_region, &mut in_frontier, &mut frontier);

    while count < target_voxels {
        if frontier.is_empty() {
            return Err(PowdrError::argument(
                "allowed region exhausted before reaching target volume",
            ));
        }
        let pick = rng.gen_range(0..frontier.len());
        let idx = frontier.swap_remove(pick);
        in_frontier[idx] = false;
        in_region[idx] = true;
        count += 1;
        push_neighbors(idx, &in_region, &mut in_frontier, &mut frontier);
    }
    Mask::new(dims, in_region)
}

/// Grow a 6-connected region of exactly `target_voxels` voxels anywhere in the grid.
pub fn grow_connected_mask(
    dims: (usize, usize, usize),
    target_voxels: u64,
    rng: &mut impl Rng,
) -> Result<Mask> {
    grow_connected_mask_within(dims, target_voxels, |_, _, _| true, rng)
}

/// True iff the true voxels form a single non-empty face-connected component.
pub fn check_6_connected(m: &Mask) -> bool {
    let (nx, ny, nz) = m.dims;
    let total = m.data.len();
    let Some(start) = m.data.iter().position(|&b| b) else {
        return false;
    };
    let true_count = m.count_true();
    let mut visited = vec![false; total];
    let mut stack = vec![start];
    visited[start] = true;
    let mut reached = 0usize;
    while let Some(idx) = stack.pop() {
        reached += 1;
        let x = (idx % nx) as i64;
        let y = ((idx / nx) % ny) as i64;
        let z = (idx / (nx * ny)) as i64;
        for &(dx, dy, dz) in &NEIGHBORS {
            let (px, py, pz) = (x + dx, y + dy, z + dz);
            if px < 0 || py < 0 || pz < 0 {
                continue;
            }
            let (px, py, pz) = (px as usize, py as usize, pz as usize);
            if px >= nx || py >= ny || pz >= nz {
                continue;
            }
            let n = px + nx * (py + ny * pz);
            if m.data[n] && !visited[n] {
                visited[n] = true;
                stack.push(n);
            }
        }
    }
    reached == true_count
}

/// Two-sample Kolmogorov-Smirnov statistic between empirical distributions.
pub fn ks_statistic(a: &[u64], b: &[u64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty());
    let mut sa: Vec<u64> = a.to_vec();
    let mut sb: Vec<u64> = b.to_vec();
    sa.sort_unstable();
    sb.sort_unstable();
    let mut points: Vec<u64> = sa.iter().chain(sb.iter()).copied().collect();
    points.sort_unstable();
    points.dedup();
    let cdf = |sorted: &[u64], x: u64| -> f64 {
        let k = sorted.partition_point(|&v| v <= x);
        k as f64 / sorted.len() as f64
    };
    points
        .iter()
        .map(|&x| (cdf(&sa, x) - cdf(&sb, x)).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, stream};

    #[test]
    fn degenerate_distribution() {
        let d = VolumeDistribution::new(vec![100], 0.0).unwrap();
        let mut rng = derive_rng(1, stream::MASK, 0);
        for _ in 0..20 {
            assert_eq!(sample_target_volume(&d, &mut rng), 100);
        }
    }

    #[test]
    fn jitter_bounds() {
        let d = VolumeDistribution::new(vec![100], 0.1).unwrap();
        let mut rng = derive_rng(2, stream::MASK, 0);
        for _ in 0..1000 {
            let v = sample_target_volume(&d, &mut rng);
            assert!((90..=110).contains(&v), "got {v}");
        }
    }

    #[test]
    fn two_point_frequencies() {
        let d = VolumeDistribution::new(vec![50, 500], 0.0).unwrap();
        let mut rng = derive_rng(3, stream::MASK, 0);
        let n = 10_000;
        let fifties = (0..n)
            .filter(|_| sample_target_volume(&d, &mut rng) == 50)
            .count();
        let freq = fifties as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.02, "freq {freq}");
    }

    #[test]
    fn empty_distribution_rejected() {
        assert!(VolumeDistribution::new(vec![], 0.1).is_err());
    }

    #[test]
    fn grow_base_and_saturation() {
        let mut rng = derive_rng(4, stream::MASK, 0);
        let one = grow_connected_mask((4, 4, 4), 1, &mut rng).unwrap();
        assert_eq!(one.count_true(), 1);
        assert!(check_6_connected(&one));
        let full = grow_connected_mask((4, 4, 4), 64, &mut rng).unwrap();
        assert_eq!(full.count_true(), 64);
        assert!(full.data.iter().all(|&b| b));
        assert!(grow_connected_mask((4, 4, 4), 65, &mut rng).is_err());
        assert!(grow_connected_mask((4, 4, 4), 0, &mut rng).is_err());
    }

    #[test]
    fn grown_masks_connected_with_exact_counts() {
        for trial in 0..200u64 {
            let mut rng = derive_rng(5, stream::MASK, trial);
            let target = 1 + (trial * 17) % 300;
            let m = grow_connected_mask((16, 16, 16), target, &mut rng).unwrap();
            assert_eq!(m.count_true() as u64, target);
            assert!(check_6_connected(&m), "trial {trial}");
        }
    }

    #[test]
    fn connectivity_checker_cases() {
        // diagonal-only touching voxels are not 6-connected
        let mut m = Mask::filled((3, 3, 3), false);
        let a = m.index(0, 0, 0);
        let b = m.index(1, 1, 0);
        m.data[a] = true;
        m.data[b] = true;
        assert!(!check_6_connected(&m));
        // L-shaped tromino is connected
        let mut l = Mask::filled((3, 3, 1), false);
        for (x, y) in [(0, 0), (0, 1), (1, 1)] {
            let idx = l.index(x, y, 0);
            l.data[idx] = true;
        }
        assert!(check_6_connected(&l));
        // empty mask is not connected by convention
        assert!(!check_6_connected(&Mask::filled((2, 2, 2), false)));
    }

    #[test]
    fn determinism_same_seed_same_mask() {
        let mut r1 = derive_rng(9, stream::MASK, 7);
        let mut r2 = derive_rng(9, stream::MASK, 7);
        let a = grow_connected_mask((12, 12, 12), 200, &mut r1).unwrap();
        let b = grow_connected_mask((12, 12, 12), 200, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constrained_growth_stays_inside() {
        let mut rng = derive_rng(10, stream::MASK, 0);
        let m = grow_connected_mask_within((8, 8, 8), 30, |x, _, _| x < 4, &mut rng).unwrap();
        assert_eq!(m.count_true(), 30);
        for z in 0..8 {
            for y in 0..8 {
                for x in 4..8 {
                    assert!(!m.at(x, y, z));
                }
            }
        }
        assert!(check_6_connected(&m));
    }

    #[test]
    fn ks_statistic_sanity() {
        let a = [1u64, 2, 3, 4, 5];
        assert_eq!(ks_statistic(&a, &a), 0.0);
        let b = [100u64, 200, 300];
        assert_eq!(ks_statistic(&a, &b), 1.0);
    }

    #[test]
    fn volume_distribution_file_parse() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vols.txt");
        std::fs::write(&p, "10\n20\n\n30\n").unwrap();
        let d = VolumeDistribution::from_file(&p, 0.1).unwrap();
        assert_eq!(d.samples, vec![10, 20, 30]);
        std::fs::write(&p, "10\nabc\n").unwrap();
        assert!(VolumeDistribution::from_file(&p, 0.1).is_err());
    }
}
