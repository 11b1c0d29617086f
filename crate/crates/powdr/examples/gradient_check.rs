//! Check the hand-written backward pass of the conditional denoiser against
//! central finite differences.

use powdr::denoiser::{finite_difference_max_rel_err, DenoiserConfig};

fn main() {
    let cfg = DenoiserConfig::desk_default();
    println!("checking 60 random parameters of the desk-scale network...");
    let err = finite_difference_max_rel_err(&cfg, (8, 8, 8), 60, 3);
    println!("max relative error vs finite differences: {err:.2e}");
    assert!(err < 1e-3);
}
