//! Generate a small phantom dataset and write it as PVOL files, mirroring
//! the `gen-phantoms` CLI command.

use powdr::phantom::{generate_all, PhantomSpec};
use powdr::volume::{write_mask, write_volume};

fn main() {
    let spec = PhantomSpec {
        dims: (16, 16, 16),
        n_cases: 6,
        lesion_volume_range: (10, 40),
        texture_amplitude: 0.1,
        seed: 42,
    };
    let cases = generate_all(&spec).unwrap();

    let dir = std::env::temp_dir().join("powdr_phantoms");
    std::fs::create_dir_all(&dir).unwrap();
    for (i, ex) in cases.iter().enumerate() {
        write_volume(&ex.image, dir.join(format!("case{i}.pvol"))).unwrap();
        write_mask(&ex.pathology_mask, dir.join(format!("case{i}_mask.pvol"))).unwrap();
        let lesion = ex.pathology_mask.count_true();
        let head = ex.image.data.iter().filter(|&&v| v > 0.0).count();
        println!("case {i}: {head} head voxels, lesion {lesion} voxels");
    }
    println!("written to {}", dir.display());
}
