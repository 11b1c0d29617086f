//! The closed-form forward diffusion in the wavelet domain: signal fades as
//! sqrt(alpha_bar), noise grows as sqrt(1 - alpha_bar).

use powdr::rng::{derive_rng, stream};
use powdr::schedule::{forward_noise, linear_schedule};
use powdr::wavelet::SubbandTensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() {
    let sched = linear_schedule(1000, 1e-4, 0.02).unwrap();
    println!("beta(1) = {}, beta(1000) = {}", sched.beta(1), sched.beta(1000));
    println!("alpha_bar(1000) = {:.3e} (signal fully destroyed)", sched.alpha_bar(1000));

    let dims = (8, 8, 8);
    let mut rng = derive_rng(0, stream::INIT, 0);
    let mut x0 = SubbandTensor::zeros(dims);
    for v in x0.data.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let mut eps = SubbandTensor::zeros(dims);
    for v in eps.data.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }

    for t in [1usize, 100, 300, 600, 1000] {
        let xt = forward_noise(&x0, t, &eps, &sched).unwrap();
        // correlation with the clean signal drops toward 0
        let dot: f64 = xt.data.iter().zip(&x0.data).map(|(a, b)| a * b).sum();
        let nx: f64 = xt.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        let n0: f64 = x0.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!(
            "t = {t:4}: sqrt(alpha_bar) = {:.4}, corr(x_t, x0) = {:+.4}",
            sched.alpha_bar(t).sqrt(),
            dot / (nx * n0)
        );
    }
}
