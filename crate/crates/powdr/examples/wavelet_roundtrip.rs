//! Decompose a random volume into its 8 Haar subbands and reconstruct it.

use powdr::volume::Volume;
use powdr::wavelet::{dwt3, idwt3, SUBBAND_NAMES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let dims = (16, 16, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut v = Volume::zeros(dims);
    for x in v.data.iter_mut() {
        *x = rng.gen_range(-10.0f32..10.0);
    }

    let s = dwt3(&v).expect("even dims");
    let back = idwt3(&s);

    let max_err = v
        .data
        .iter()
        .zip(&back.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    let img_energy: f64 = v.data.iter().map(|&x| (x as f64).powi(2)).sum();
    let coef_energy = s.sq_norm();

    println!("volume {dims:?}, subband grid {:?}", s.dims);
    for (c, name) in SUBBAND_NAMES.iter().enumerate() {
        let e: f64 = s.channel(c).iter().map(|x| x * x).sum();
        println!("  {name}: {:6.2}% of energy", 100.0 * e / coef_energy);
    }
    println!("reconstruction max abs error: {max_err:.2e}");
    println!(
        "Parseval relative error: {:.2e}",
        (img_energy - coef_energy).abs() / img_energy
    );
}
