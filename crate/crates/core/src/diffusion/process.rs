use super::{ImageTensor, NoiseSchedule, Shape};
use crate::rng::Rng;
use crate::{Error, Result};

/// Closed-form forward marginal: `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`.
pub fn diffuse(
    x0: &ImageTensor,
    t: usize,
    eps: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    eps.ensure_shape(x0.shape())?;
    let abar = schedule.alpha_bar(t)?;
    schedule.check_step(t)?;
    let (signal, noise) = (abar.sqrt(), (1.0 - abar).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| (signal * x as f64 + noise * e as f64) as f32)
        .collect();
    Ok(ImageTensor::from_raw(x0.shape(), data))
}

/// One ancestral step `x_t -> x_{t-1}` given the predicted noise and a fresh
/// noise draw `z` (pass zeros at `t = 1`).
pub fn denoise_step(
    x_t: &ImageTensor,
    t: usize,
    eps_pred: &ImageTensor,
    z: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    eps_pred.ensure_shape(x_t.shape())?;
    z.ensure_shape(x_t.shape())?;
    let alpha = schedule.alpha(t)?;
    let abar = schedule.alpha_bar(t)?;
    let sigma = schedule.posterior_sigma2(t)?.sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let eps_coef = (1.0 - alpha) / (1.0 - abar).sqrt();
    let data = x_t
        .data()
        .iter()
        .zip(eps_pred.data())
        .zip(z.data())
        .map(|((&x, &e), &z)| {
            (inv_sqrt_alpha * (x as f64 - eps_coef * e as f64) + sigma * z as f64) as f32
        })
        .collect();
    Ok(ImageTensor::from_raw(x_t.shape(), data))
}

/// Runs the reverse chain from `x_start` at step `t_start` down to `x_0`.
///
/// `observe(t, x_t)` sees the starting latent and every latent produced,
/// ending with `t = 0`. Fresh noise is drawn for every `t > 1`; the final step
/// is noiseless.
pub fn reverse_from<P, O>(
    x_start: ImageTensor,
    t_start: usize,
    mut predictor: P,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
    mut observe: O,
) -> Result<ImageTensor>
where
    P: FnMut(&ImageTensor, usize) -> Result<ImageTensor>,
    O: FnMut(usize, &ImageTensor),
{
    schedule.check_step(t_start)?;
    let shape = x_start.shape();
    let mut x = x_start;
    observe(t_start, &x);
    for t in (1..=t_start).rev() {
        let eps = predictor(&x, t)?;
        if eps.shape() != shape {
            return Err(Error::Predictor(format!(
                "returned shape {} for input {shape} at t={t}",
                eps.shape()
            )));
        }
        let z = if t > 1 {
            ImageTensor::randn(shape, rng)
        } else {
            ImageTensor::zeros(shape)
        };
        x = denoise_step(&x, t, &eps, &z, schedule)?;
        observe(t - 1, &x);
    }
    Ok(x)
}

/// Draws `x_T ~ N(0, I)` and denoises it all the way to `x_0`.
pub fn sample_chain<P>(
    predictor: P,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
    shape: Shape,
) -> Result<ImageTensor>
where
    P: FnMut(&ImageTensor, usize) -> Result<ImageTensor>,
{
    let x_t = ImageTensor::randn(shape, rng);
    reverse_from(x_t, schedule.steps(), predictor, schedule, rng, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_linear_schedule, SigmaMode};
    use crate::rng::{fill_normal, seeded};

    fn constant(beta: f64, steps: usize) -> NoiseSchedule {
        build_linear_schedule(steps, beta, beta, SigmaMode::Beta).unwrap()
    }

    fn scalar(v: f32) -> ImageTensor {
        ImageTensor::filled(Shape::new(1, 1, 1), v)
    }

    #[test]
    fn diffuse_degenerate_inputs() {
        let s = constant(0.1, 3);
        let shape = Shape::new(1, 2, 2);
        let x0 = ImageTensor::new(shape, vec![0.5, -0.25, 1.0, 0.0]).unwrap();
        let zero = ImageTensor::zeros(shape);
        let out = diffuse(&x0, 3, &zero, &s).unwrap();
        let k = s.alpha_bar(3).unwrap().sqrt() as f32;
        for (o, x) in out.data().iter().zip(x0.data()) {
            assert!((o - k * x).abs() < 1e-7);
        }
        let out = diffuse(&zero, 3, &x0, &s).unwrap();
        let k = (1.0 - s.alpha_bar(3).unwrap()).sqrt() as f32;
        for (o, x) in out.data().iter().zip(x0.data()) {
            assert!((o - k * x).abs() < 1e-7);
        }
    }

    #[test]
    fn diffuse_hand_value() {
        let s = constant(0.1, 2);
        let out = diffuse(&scalar(1.0), 2, &scalar(1.0), &s).unwrap();
        let expected = 0.9 + 0.19f64.sqrt();
        assert!((out.data()[0] as f64 - expected).abs() < 1e-6);
        assert!((out.data()[0] - 1.33589).abs() < 1e-5);
    }

    #[test]
    fn diffuse_errors() {
        let s = constant(0.1, 2);
        let a = ImageTensor::zeros(Shape::new(1, 2, 2));
        let b = ImageTensor::zeros(Shape::new(1, 2, 3));
        assert!(matches!(diffuse(&a, 1, &b, &s), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(diffuse(&a, 3, &a, &s), Err(Error::StepOutOfRange { .. })));
        assert!(matches!(diffuse(&a, 0, &a, &s), Err(Error::StepOutOfRange { .. })));
    }

    #[test]
    fn denoise_hand_value() {
        let s = constant(0.1, 2);
        let out = denoise_step(&scalar(1.0), 2, &scalar(1.0), &scalar(0.0), &s).unwrap();
        let expected = (1.0 / 0.9f64.sqrt()) * (1.0 - 0.1 / 0.19f64.sqrt());
        assert!((out.data()[0] as f64 - expected).abs() < 1e-6);
        assert!((out.data()[0] - 0.81225).abs() < 1e-4);
    }

    #[test]
    fn denoise_with_zero_predictor_rescales() {
        let s = constant(0.1, 2);
        let out = denoise_step(&scalar(2.0), 2, &scalar(0.0), &scalar(0.0), &s).unwrap();
        assert!((out.data()[0] as f64 - 2.0 / 0.9f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn single_step_inversion_is_exact() {
        let s = build_linear_schedule(1, 1e-4, 0.02, SigmaMode::Beta).unwrap();
        let shape = Shape::new(3, 4, 4);
        let mut rng = seeded(7, 0);
        let x0 = ImageTensor::randn(shape, &mut rng);
        let eps = ImageTensor::randn(shape, &mut rng);
        let x1 = diffuse(&x0, 1, &eps, &s).unwrap();
        let back = denoise_step(&x1, 1, &eps, &ImageTensor::zeros(shape), &s).unwrap();
        for (a, b) in back.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn inversion_is_not_identity_beyond_first_step() {
        let s = constant(0.1, 3);
        let x0 = scalar(0.7);
        let eps = scalar(-1.2);
        for t in 2..=3 {
            let xt = diffuse(&x0, t, &eps, &s).unwrap();
            let back = denoise_step(&xt, t, &eps, &scalar(0.0), &s).unwrap();
            assert!((back.data()[0] - 0.7).abs() > 1e-3);
        }
    }

    #[test]
    fn chain_is_reproducible() {
        let s = build_linear_schedule(20, 1e-4, 0.02, SigmaMode::Beta).unwrap();
        let shape = Shape::new(1, 3, 3);
        let pred = |x: &ImageTensor, t: usize| {
            let d = x.data().iter().map(|v| v * 0.1 + t as f32 * 1e-3).collect();
            ImageTensor::new(x.shape(), d)
        };
        let a = sample_chain(pred, &s, &mut seeded(3, 1), shape).unwrap();
        let b = sample_chain(pred, &s, &mut seeded(3, 1), shape).unwrap();
        assert_eq!(a, b);
        let c = sample_chain(pred, &s, &mut seeded(4, 1), shape).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn chain_one_step_oracle_recovers_x0() {
        // The oracle knows the noise that turned x0 into the chain's own x_T.
        let s = build_linear_schedule(1, 0.02, 0.02, SigmaMode::Beta).unwrap();
        let shape = Shape::new(1, 2, 2);
        let mut probe = seeded(11, 0);
        let x_t = ImageTensor::randn(shape, &mut probe);
        let x0 = ImageTensor::new(shape, vec![0.3, -0.6, 0.9, -1.0]).unwrap();
        let abar = s.alpha_bar(1).unwrap();
        let eps_data = x_t
            .data()
            .iter()
            .zip(x0.data())
            .map(|(&x, &x0)| ((x as f64 - abar.sqrt() * x0 as f64) / (1.0 - abar).sqrt()) as f32)
            .collect();
        let eps = ImageTensor::new(shape, eps_data).unwrap();
        let out = sample_chain(|_, _| Ok(eps.clone()), &s, &mut seeded(11, 0), shape).unwrap();
        for (a, b) in out.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn chain_with_zero_predictor_matches_scalar_reference() {
        let s = build_linear_schedule(5, 1e-3, 0.05, SigmaMode::Beta).unwrap();
        let shape = Shape::new(1, 2, 3);
        let out = sample_chain(
            |x, _| Ok(ImageTensor::zeros(x.shape())),
            &s,
            &mut seeded(5, 2),
            shape,
        )
        .unwrap();

        // Reference: same draw order (x_T, then z for t = T..2).
        let mut rng = seeded(5, 2);
        let mut x = vec![0f32; shape.len()];
        fill_normal(&mut rng, &mut x);
        let mut x: Vec<f64> = x.into_iter().map(f64::from).collect();
        for t in (1..=5usize).rev() {
            let alpha = 1.0 - s.betas()[t - 1];
            let mut z = vec![0f32; shape.len()];
            if t > 1 {
                fill_normal(&mut rng, &mut z);
            }
            let sigma = s.betas()[t - 1].sqrt();
            for (xi, zi) in x.iter_mut().zip(&z) {
                *xi = *xi / alpha.sqrt() + sigma * *zi as f64;
            }
        }
        for (a, b) in out.data().iter().zip(&x) {
            assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn chain_rejects_bad_predictor_shape() {
        let s = constant(0.1, 2);
        let err = sample_chain(
            |_, _| Ok(ImageTensor::zeros(Shape::new(1, 1, 2))),
            &s,
            &mut seeded(0, 0),
            Shape::new(1, 1, 1),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Predictor(_)));
    }

    #[test]
    fn forward_marginal_statistics() {
        let s = build_linear_schedule(500, 1e-4, 0.02, SigmaMode::Beta).unwrap();
        let x0 = ImageTensor::new(Shape::new(1, 1, 2), vec![0.8, -0.5]).unwrap();
        let mut rng = seeded(21, 0);
        for t in [1usize, 250, 500] {
            let n = 10_000;
            let (mut sum, mut sq) = ([0f64; 2], [0f64; 2]);
            for _ in 0..n {
                let eps = ImageTensor::randn(x0.shape(), &mut rng);
                let x = diffuse(&x0, t, &eps, &s).unwrap();
                for k in 0..2 {
                    sum[k] += x.data()[k] as f64;
                    sq[k] += (x.data()[k] as f64).powi(2);
                }
            }
            let abar = s.alpha_bar(t).unwrap();
            for k in 0..2 {
                let mean = sum[k] / n as f64;
                let var = sq[k] / n as f64 - mean * mean;
                let want_mean = abar.sqrt() * x0.data()[k] as f64;
                let scale = want_mean.abs().max((1.0 - abar).sqrt());
                assert!((mean - want_mean).abs() / scale < 0.05, "t={t} mean {mean}");
                assert!(((var - (1.0 - abar)) / (1.0 - abar)).abs() < 0.05, "t={t} var {var}");
            }
        }
    }
}
