//! Grow random 6-connected masks whose sizes follow a reference volume
//! distribution, then compare the generated sizes against the reference
//! with a Kolmogorov-Smirnov statistic.

use powdr::maskgen::{
    check_6_connected, grow_connected_mask, ks_statistic, sample_target_volume, VolumeDistribution,
};
use powdr::rng::{derive_rng, stream};

fn main() {
    // reference lesion volumes, e.g. harvested from a dataset manifest
    let reference: Vec<u64> = vec![12, 18, 18, 22, 25, 25, 30, 33, 40, 47];
    let dist = VolumeDistribution::new(reference.clone(), 0.1).unwrap();

    let dims = (16, 16, 16);
    let mut sizes = Vec::new();
    for i in 0..200u64 {
        let mut rng = derive_rng(7, stream::MASK, i);
        let target = sample_target_volume(&dist, &mut rng);
        let mask = grow_connected_mask(dims, target, &mut rng).unwrap();
        assert_eq!(mask.count_true() as u64, target);
        assert!(check_6_connected(&mask));
        sizes.push(target);
    }

    let ks = ks_statistic(&sizes, &reference);
    println!("200 masks grown on a {dims:?} grid, all 6-connected, exact sizes");
    println!(
        "size range {}..{} voxels, KS vs reference = {ks:.3}",
        sizes.iter().min().unwrap(),
        sizes.iter().max().unwrap()
    );
}
