//! Diversity metrics over repeated samples: pairwise cosine similarity,
//! 50-bin histogram KL divergence, and voxelwise mean/std maps.

use powdr::metrics::{diversity_report, ms_ssim, Region};
use powdr::phantom::{generate_phantom, PhantomSpec};
use powdr::rng::{derive_rng, stream};
use powdr::volume::Volume;
use rand_distr::{Distribution, Normal};

fn main() {
    let spec = PhantomSpec {
        dims: (16, 16, 16),
        n_cases: 1,
        lesion_volume_range: (15, 30),
        texture_amplitude: 0.1,
        seed: 5,
    };
    let base = generate_phantom(&spec, 0).unwrap();

    // stand-in for repeated model samples: the same anatomy plus
    // increasing per-sample perturbations
    let noise = Normal::new(0.0f64, 0.02).unwrap();
    let samples: Vec<Volume> = (0..20u64)
        .map(|k| {
            let mut rng = derive_rng(5, stream::SAMPLE_REPEAT, k);
            let mut v = base.image.clone();
            for x in v.data.iter_mut() {
                *x = (*x as f64 + (1.0 + k as f64 / 10.0) * noise.sample(&mut rng)) as f32;
            }
            v
        })
        .collect();

    let report = diversity_report(&samples, Some(&base.pathology_mask)).unwrap();
    println!("{} samples -> {} pairs", report.n_samples, report.pair_count);
    println!(
        "cosine {:.4} +/- {:.4}   KL {:.5} +/- {:.5}",
        report.mean_pairwise_cosine,
        report.std_pairwise_cosine,
        report.mean_pairwise_kl,
        report.std_pairwise_kl
    );
    let o = report.outside.unwrap();
    println!("outside the lesion: cosine {:.4}, KL {:.5}", o.mean_cosine, o.mean_kl);
    let peak_std = report.voxelwise_std.data.iter().cloned().fold(0.0f32, f32::max);
    println!("peak voxelwise std: {peak_std:.4}");

    let m = ms_ssim(&samples[0], &samples[19], Some(&base.pathology_mask), Region::All).unwrap();
    println!("MS-SSIM between first and last sample: {m:.4}");
}
