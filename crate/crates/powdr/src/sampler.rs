//! Conditional DDPM reverse process: start from Gaussian noise in the wavelet
//! domain, iteratively denoise conditioned on the masked-pathology subbands,
//! and reconstruct the image volume with the inverse wavelet transform.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::denoiser::{self, Mode};
use crate::error::{PowdrError, Result};
use crate::rng::{derive_rng, stream};
use crate::schedule::{linear_schedule, NoiseSchedule};
use crate::volume::{apply_mask, Mask, Volume};
use crate::wavelet::{dwt3, idwt3, SubbandTensor};

#[derive(Debug, Clone)]
pub struct SampleRequest {
    pub condition_image: Volume,
    pub condition_mask: Mask,
    /// Must equal the schedule length stored in the checkpoint.
    pub steps: usize,
    pub seed: u64,
    /// Overwrite the conditioned region with the condition voxels after IDWT.
    pub hard_composite: bool,
    pub repeats: usize,
}

/// One reverse step: sample x_{t-1} from the posterior q(x_{t-1} | x_t, x0_hat).
/// Deterministic at t = 1 since alpha_bar(0) = 1 forces zero variance.
pub fn reverse_step(
    x_t: &SubbandTensor,
    pred_x0: &SubbandTensor,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<SubbandTensor> {
    if t < 1 || t > sched.t_max {
        return Err(PowdrError::argument(format!("step {t} out of range")));
    }
    if !x_t.same_shape(pred_x0) {
        return Err(PowdrError::argument("reverse_step shape mismatch"));
    }
    let beta_t = sched.beta(t);
    let alpha_t = sched.alpha(t);
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let denom = 1.0 - ab_t;
    let coef_x0 = ab_prev.sqrt() * beta_t / denom;
    let coef_xt = alpha_t.sqrt() * (1.0 - ab_prev) / denom;
    let sigma = (beta_t * (1.0 - ab_prev) / denom).sqrt();
    let mut out = SubbandTensor::zeros(x_t.dims);
    for i in 0..out.data.len() {
        let mu = coef_x0 * pred_x0.data[i] + coef_xt * x_t.data[i];
        out.data[i] = if t > 1 {
            let z: f64 = StandardNormal.sample(rng);
            mu + sigma * z
        } else {
            mu
        };
    }
    Ok(out)
}

fn random_normal_subbands(dims: (usize, usize, usize), rng: &mut impl Rng) -> SubbandTensor {
    let mut s = SubbandTensor::zeros(dims);
    for v in s.data.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    s
}

/// Run the full reverse chain once with an arbitrary clean-signal predictor.
/// `predict(x_t, t)` must be deterministic for reproducibility.
pub fn reverse_chain(
    predict: &mut dyn FnMut(&SubbandTensor, usize) -> Result<SubbandTensor>,
    sched: &NoiseSchedule,
    dims: (usize, usize, usize),
    rng: &mut impl Rng,
) -> Result<SubbandTensor> {
    let mut x = random_normal_subbands(dims, rng);
    for t in (1..=sched.t_max).rev() {
        let pred = predict(&x, t)?;
        x = reverse_step(&x, &pred, t, sched, rng)?;
    }
    Ok(x)
}

/// Sample `repeats` volumes conditioned on the masked condition image.
/// Repeat k uses an independent noise stream derived from (seed, k), so
/// repeats are individually reproducible and parallelizable.
pub fn sample(checkpoint: &Checkpoint, req: &SampleRequest) -> Result<Vec<Volume>> {
    if req.steps != checkpoint.t_max {
        return Err(PowdrError::contract(format!(
            "requested {} steps but checkpoint schedule has T = {}",
            req.steps, checkpoint.t_max
        )));
    }
    if req.condition_mask.count_true() == 0 {
        return Err(PowdrError::argument("condition mask has no true voxels"));
    }
    if req.repeats == 0 {
        return Err(PowdrError::argument("repeats must be >= 1"));
    }
    let dims = req.condition_image.dims;
    if dims.0 % 2 != 0 || dims.1 % 2 != 0 || dims.2 % 2 != 0 {
        return Err(PowdrError::argument("condition dims must be even"));
    }
    let sched = linear_schedule(checkpoint.t_max, checkpoint.beta_start, checkpoint.beta_end)?;
    let params = checkpoint.to_denoiser_params()?;
    let cond = dwt3(&apply_mask(&req.condition_image, &req.condition_mask)?)?;

    let results: Vec<Result<Volume>> = (0..req.repeats)
        .into_par_iter()
        .map(|k| {
            let mut rng = derive_rng(req.seed, stream::SAMPLE_REPEAT, k as u64);
            let x0 = reverse_chain(
                &mut |x_t, t| {
                    let mut eval_rng = derive_rng(req.seed, stream::SAMPLE_REPEAT, u64::MAX);
                    let (pred, _) =
                        denoiser::forward(&params, x_t, &cond, t, Mode::Eval, &mut eval_rng)?;
                    Ok(pred)
                },
                &sched,
                cond.dims,
                &mut rng,
            )?;
            let mut vol = idwt3(&x0);
            vol.spacing = req.condition_image.spacing;
            if req.hard_composite {
                for (i, &inside) in req.condition_mask.data.iter().enumerate() {
                    if inside {
                        vol.data[i] = req.condition_image.data[i];
                    }
                }
            }
            Ok(vol)
        })
        .collect();
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{init_params, DenoiserConfig, Padding};
    use crate::trainer::{train, TrainConfig, TrainingExample};

    #[test]
    fn t1_step_is_deterministic_and_returns_prediction() {
        let sched = linear_schedule(4, 0.1, 0.3).unwrap();
        let dims = (2, 2, 2);
        let mut x = SubbandTensor::zeros(dims);
        let mut p = SubbandTensor::zeros(dims);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = i as f64 * 0.01;
        }
        for (i, v) in p.data.iter_mut().enumerate() {
            *v = 1.0 - i as f64 * 0.01;
        }
        let mut rng = derive_rng(1, stream::SAMPLE_REPEAT, 0);
        let out = reverse_step(&x, &p, 1, &sched, &mut rng).unwrap();
        // at t = 1: alpha_bar(0) = 1, 1 - alpha_bar(1) = beta(1), so mu = pred
        for (o, pv) in out.data.iter().zip(&p.data) {
            assert!((o - pv).abs() < 1e-12);
        }
        let out2 = reverse_step(&x, &p, 1, &sched, &mut derive_rng(9, stream::SAMPLE_REPEAT, 4)).unwrap();
        assert_eq!(out.data, out2.data);
    }

    #[test]
    fn posterior_coefficients_hand_case() {
        // T = 2, beta = (0.1, 0.2): at t = 2,
        // mu weights are (sqrt(0.9)*0.2/0.28, sqrt(0.8)*0.1/0.28)
        let sched = linear_schedule(2, 0.1, 0.2).unwrap();
        let dims = (1, 1, 1);
        let mut x = SubbandTensor::zeros(dims);
        let mut p = SubbandTensor::zeros(dims);
        x.data.iter_mut().for_each(|v| *v = 1.0);
        p.data.iter_mut().for_each(|v| *v = 0.0);
        // capture mu by using t = 2 with a zeroed noise draw: run twice and
        // exploit sigma by computing mu from expectation is awkward; instead
        // check the coefficients directly against hand algebra.
        let beta2 = sched.beta(2);
        let ab2 = sched.alpha_bar(2);
        let ab1 = sched.alpha_bar(1);
        let coef_x0 = ab1.sqrt() * beta2 / (1.0 - ab2);
        let coef_xt = sched.alpha(2).sqrt() * (1.0 - ab1) / (1.0 - ab2);
        assert!((coef_x0 - 0.9f64.sqrt() * 0.2 / 0.28).abs() < 1e-12);
        assert!((coef_xt - 0.8f64.sqrt() * 0.1 / 0.28).abs() < 1e-12);
        // sigma^2 in [0, beta_t]
        let sigma2 = beta2 * (1.0 - ab1) / (1.0 - ab2);
        assert!(sigma2 >= 0.0 && sigma2 <= beta2);
    }

    #[test]
    fn posterior_mean_coefficient_identity() {
        // with s = sqrt(ab_{t-1}) and a = sqrt(alpha_t), the two mu weights
        // factor as (s + a) / (1 + s a); verified against the raw formulas
        let sched = linear_schedule(20, 1e-3, 0.1).unwrap();
        for t in 2..=20 {
            let ab_t = sched.alpha_bar(t);
            let ab_prev = sched.alpha_bar(t - 1);
            let c0 = ab_prev.sqrt() * sched.beta(t) / (1.0 - ab_t);
            let ct = sched.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
            let (s, a) = (ab_prev.sqrt(), sched.alpha(t).sqrt());
            assert!((c0 + ct - (s + a) / (1.0 + s * a)).abs() < 1e-12, "t={t}");
        }
        // at t = 1 the weights are exactly (1, 0): the step returns pred_x0
        let x = SubbandTensor {
            dims: (1, 1, 1),
            data: vec![0.7; 8],
        };
        let mut rng = derive_rng(0, stream::SAMPLE_REPEAT, 0);
        let out = reverse_step(&x, &x, 1, &sched, &mut rng).unwrap();
        for &v in &out.data {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_denoiser_converges_to_signal() {
        // a perfect predictor that always returns the true x0 drives the
        // chain to x0 within the residual noise floor
        let sched = linear_schedule(50, 1e-3, 0.05).unwrap();
        let dims = (2, 2, 2);
        let mut truth = SubbandTensor::zeros(dims);
        let mut rng = derive_rng(3, stream::SAMPLE_REPEAT, 11);
        for v in truth.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let t2 = truth.clone();
        let out = reverse_chain(
            &mut move |_x, _t| Ok(t2.clone()),
            &sched,
            dims,
            &mut rng,
        )
        .unwrap();
        // noise floor: the last stochastic step injects sigma(2); t=1 is exact
        let ab1 = sched.alpha_bar(1);
        let sigma2 = (sched.beta(2) * (1.0 - ab1) / (1.0 - sched.alpha_bar(2))).sqrt();
        let floor = 5.0 * sigma2.max(1e-9);
        let max_err = out
            .data
            .iter()
            .zip(&truth.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < floor.max(0.05), "err {max_err} floor {floor}");
    }

    fn trained_tiny_checkpoint() -> (Checkpoint, Volume, Mask) {
        let dims = (4, 4, 4);
        let mut image = Volume::zeros(dims);
        for (i, v) in image.data.iter_mut().enumerate() {
            *v = ((i % 5) as f32) * 0.2;
        }
        let mut mask = Mask::filled(dims, false);
        mask.data[0] = true;
        mask.data[1] = true;
        let dataset = vec![TrainingExample {
            image: image.clone(),
            pathology_mask: mask.clone(),
        }];
        let sched = linear_schedule(5, 1e-4, 0.02).unwrap();
        let cfg = TrainConfig {
            iterations: 2,
            batch_size: 1,
            seed: 5,
            ..TrainConfig::desk_default()
        };
        let net = DenoiserConfig {
            base_channels: 2,
            channel_multipliers: vec![1, 2],
            blocks_per_level: 1,
            dropout_rate: 0.1,
            time_embed_dim: 8,
            padding: Padding::Zero,
        };
        let out = train(&dataset, &cfg, &sched, &net, None, None).unwrap();
        (out.checkpoint, image, mask)
    }

    #[test]
    fn hard_composite_and_determinism() {
        let (ck, image, mask) = trained_tiny_checkpoint();
        let req = SampleRequest {
            condition_image: image.clone(),
            condition_mask: mask.clone(),
            steps: ck.t_max,
            seed: 77,
            hard_composite: true,
            repeats: 2,
        };
        let a = sample(&ck, &req).unwrap();
        let b = sample(&ck, &req).unwrap();
        assert_eq!(a.len(), 2);
        for (va, vb) in a.iter().zip(&b) {
            assert_eq!(va.data, vb.data); // bit-identical reruns
        }
        for v in &a {
            for (i, &inside) in mask.data.iter().enumerate() {
                if inside {
                    assert_eq!(v.data[i], image.data[i]); // bitwise copy
                }
            }
        }
        // repeats differ from each other
        assert_ne!(a[0].data, a[1].data);
    }

    #[test]
    fn schedule_mismatch_rejected() {
        let (ck, image, mask) = trained_tiny_checkpoint();
        let req = SampleRequest {
            condition_image: image,
            condition_mask: mask,
            steps: ck.t_max + 1,
            seed: 1,
            hard_composite: false,
            repeats: 1,
        };
        assert!(sample(&ck, &req).is_err());
    }

    #[test]
    fn empty_mask_rejected() {
        let (ck, image, _) = trained_tiny_checkpoint();
        let req = SampleRequest {
            condition_mask: Mask::filled(image.dims, false),
            condition_image: image,
            steps: ck.t_max,
            seed: 1,
            hard_composite: false,
            repeats: 1,
        };
        assert!(sample(&ck, &req).is_err());
    }

    #[test]
    fn untrained_zero_network_is_checkpointable() {
        // init params untouched -> forward returns 0 -> chain still runs
        let net = DenoiserConfig {
            base_channels: 2,
            channel_multipliers: vec![1],
            blocks_per_level: 1,
            dropout_rate: 0.0,
            time_embed_dim: 4,
            padding: Padding::Zero,
        };
        let params = init_params(&net, &mut derive_rng(1, stream::INIT, 0)).unwrap();
        let ck = Checkpoint {
            net_cfg: net,
            t_max: 3,
            beta_start: 1e-4,
            beta_end: 0.02,
            params: params.data.iter().map(|&v| v as f32).collect(),
            opt: None,
        };
        let mut image = Volume::zeros((4, 4, 4));
        image.data[0] = 1.0;
        let mut mask = Mask::filled((4, 4, 4), false);
        mask.data[0] = true;
        let req = SampleRequest {
            condition_image: image,
            condition_mask: mask,
            steps: 3,
            seed: 2,
            hard_composite: false,
            repeats: 1,
        };
        let vols = sample(&ck, &req).unwrap();
        assert_eq!(vols.len(), 1);
    }
}
