//! PVOL round trips, percentile normalization, and spherical mask dilation.

use powdr::volume::{
    dilate_spherical, normalize_percentile, read_volume, write_volume, Mask, Volume,
};

fn main() {
    let mut v = Volume::zeros((8, 8, 8));
    v.spacing = (1.0, 1.0, 2.5); // anisotropic slices
    for (i, x) in v.data.iter_mut().enumerate() {
        *x = (i as f32).sin() * 100.0;
    }

    let path = std::env::temp_dir().join("demo.pvol");
    write_volume(&v, &path).unwrap();
    let back = read_volume(&path).unwrap();
    assert_eq!(v.data, back.data);
    assert_eq!(v.spacing, back.spacing);
    println!("PVOL roundtrip: bit-identical ({} bytes)", std::fs::metadata(&path).unwrap().len());

    let n = normalize_percentile(&v, 1.0, 99.0).unwrap();
    let lo = n.data.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = n.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    println!("normalized to [{lo}, {hi}] by clipping at the 1st/99th percentiles");

    let mut m = Mask::filled((8, 8, 8), false);
    let c = m.index(4, 4, 4);
    m.data[c] = true;
    for r in [1u32, 2, 3] {
        println!("dilation radius {r}: 1 voxel -> {}", dilate_spherical(&m, r).count_true());
    }
}
