//! Noise schedule, forward corruption, ε-prediction inversion, the ancestral
//! posterior step and classifier-free guidance.
//!
//! All scalar coefficients are computed in `f64` on the host and only then
//! applied to tensors, so the math is identical for `f32` and `f64` models.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOGSNR_MIN: f64 = -20.0;
pub const LOGSNR_MAX: f64 = 20.0;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Signal scale `σ(λ)^½`.
pub fn alpha(logsnr: f64) -> f64 {
    sigmoid(logsnr).sqrt()
}

/// Noise scale `σ(−λ)^½`.
pub fn sigma(logsnr: f64) -> f64 {
    sigmoid(-logsnr).sqrt()
}

/// Cosine-shaped log-SNR schedule from `logsnr_max` at `t = 0` to
/// `logsnr_min` at `t = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub logsnr_min: f64,
    pub logsnr_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::cosine()
    }
}

impl NoiseSchedule {
    pub fn cosine() -> Self {
        Self {
            logsnr_min: LOGSNR_MIN,
            logsnr_max: LOGSNR_MAX,
        }
    }

    pub fn logsnr(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("schedule time {t} outside [0, 1]")));
        }
        let b = (-0.5 * self.logsnr_max).exp().atan();
        let a = (-0.5 * self.logsnr_min).exp().atan() - b;
        Ok(-2.0 * (a * t + b).tan().ln())
    }

    /// Log-SNR at `t = i / steps` for `i = 0..=steps`; index `steps` is the
    /// noisiest level.
    pub fn grid(&self, steps: usize) -> Result<Vec<f64>> {
        if steps == 0 {
            return Err(Error::InvalidArgument("need at least one step".into()));
        }
        (0..=steps).map(|i| self.logsnr(i as f64 / steps as f64)).collect()
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Per-element coefficients shaped `(B, 1, 1, …)` to broadcast over a batch.
fn per_item(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![values.len()];
    shape.extend(std::iter::repeat_n(1, like.rank() - 1));
    Ok(Tensor::from_slice(values, shape, &Device::Cpu)?
        .to_device(like.device())?
        .to_dtype(like.dtype())?)
}

/// `z = σ(λ)^½ x + σ(−λ)^½ ε`.
pub fn q_sample(x: &Tensor, logsnr: f64, eps: &Tensor) -> Result<Tensor> {
    check_same_shape(x, eps, "q_sample")?;
    Ok((x.affine(alpha(logsnr), 0.0)? + eps.affine(sigma(logsnr), 0.0)?)?)
}

/// [`q_sample`] with one log-SNR per leading-axis element.
pub fn q_sample_batch(x: &Tensor, logsnr: &[f64], eps: &Tensor) -> Result<Tensor> {
    check_same_shape(x, eps, "q_sample")?;
    if x.dim(0)? != logsnr.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} log-SNR values for batch of {}",
            logsnr.len(),
            x.dim(0)?
        )));
    }
    let a: Vec<f64> = logsnr.iter().map(|&l| alpha(l)).collect();
    let s: Vec<f64> = logsnr.iter().map(|&l| sigma(l)).collect();
    Ok((x.broadcast_mul(&per_item(&a, x)?)? + eps.broadcast_mul(&per_item(&s, x)?)?)?)
}

/// `x̂ = (z − σ(−λ)^½ ε̂) / σ(λ)^½`, clipped to `[−1, 1]`.
pub fn predict_x(z: &Tensor, logsnr: f64, eps_hat: &Tensor) -> Result<Tensor> {
    Ok(predict_x_unclipped(z, logsnr, eps_hat)?.clamp(-1.0, 1.0)?)
}

pub fn predict_x_unclipped(z: &Tensor, logsnr: f64, eps_hat: &Tensor) -> Result<Tensor> {
    check_same_shape(z, eps_hat, "predict_x")?;
    let inv_a = 1.0 / alpha(logsnr);
    Ok((z.affine(inv_a, 0.0)? - eps_hat.affine(sigma(logsnr) * inv_a, 0.0)?)?)
}

/// Coefficients of `q(z_s | z_t, x)` for `λ_s ≥ λ_t`:
/// `mean = z_coef·z_t + x_coef·x`, `variance` as stated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoefficients {
    pub z_coef: f64,
    pub x_coef: f64,
    pub variance: f64,
}

pub fn posterior_coefficients(logsnr_t: f64, logsnr_s: f64) -> Result<PosteriorCoefficients> {
    if logsnr_s < logsnr_t {
        return Err(Error::InvalidArgument(format!(
            "posterior step must not add noise: λ_s = {logsnr_s} < λ_t = {logsnr_t}"
        )));
    }
    let e = (logsnr_t - logsnr_s).exp();
    let one_minus_e = -(logsnr_t - logsnr_s).exp_m1();
    Ok(PosteriorCoefficients {
        z_coef: alpha(logsnr_s) / alpha(logsnr_t) * e,
        x_coef: alpha(logsnr_s) * one_minus_e,
        variance: sigmoid(-logsnr_s) * one_minus_e,
    })
}

/// One ancestral step `z_t → z_s`. Pass `noise = None` for a noiseless step.
pub fn posterior_step(
    z_t: &Tensor,
    x_hat: &Tensor,
    logsnr_t: f64,
    logsnr_s: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    check_same_shape(z_t, x_hat, "posterior_step")?;
    let c = posterior_coefficients(logsnr_t, logsnr_s)?;
    let mean = (z_t.affine(c.z_coef, 0.0)? + x_hat.affine(c.x_coef, 0.0)?)?;
    match noise {
        Some(n) => {
            check_same_shape(z_t, n, "posterior_step noise")?;
            Ok((mean + n.affine(c.variance.sqrt(), 0.0)?)?)
        }
        None => Ok(mean),
    }
}

/// Classifier-free guidance `ε_uncond + w (ε_cond − ε_uncond)`.
pub fn guide(eps_cond: &Tensor, eps_uncond: &Tensor, weight: f64) -> Result<Tensor> {
    check_same_shape(eps_cond, eps_uncond, "guide")?;
    Ok((eps_uncond + (eps_cond - eps_uncond)?.affine(weight, 0.0)?)?)
}

/// Mean squared error over all elements; differentiable.
pub fn eps_loss(eps_hat: &Tensor, eps: &Tensor) -> Result<Tensor> {
    check_same_shape(eps_hat, eps, "eps_loss")?;
    Ok((eps_hat - eps)?.sqr()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;
    use proptest::prelude::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::new(&[v], &Device::Cpu).unwrap()
    }

    fn val(t: &Tensor) -> f64 {
        t.to_vec1::<f64>().unwrap()[0]
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = NoiseSchedule::cosine();
        assert!((s.logsnr(0.0).unwrap() - 20.0).abs() < 1e-6);
        assert!((s.logsnr(1.0).unwrap() + 20.0).abs() < 1e-6);
        assert!(s.logsnr(0.5).unwrap().abs() < 1e-3);
        assert!(s.logsnr(1.01).is_err());
        assert!(s.logsnr(-0.01).is_err());
    }

    #[test]
    fn schedule_strictly_decreasing() {
        let g = NoiseSchedule::cosine().grid(999).unwrap();
        assert_eq!(g.len(), 1000);
        assert!(g.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn q_sample_examples() {
        let x = scalar(0.5);
        let eps = scalar(-1.0);
        // σ(2) = 0.880797, σ(−2) = 0.119203
        let z = val(&q_sample(&x, 2.0, &eps).unwrap());
        let expect = 0.880_797_077_977_882_3f64.sqrt() * 0.5 - 0.119_202_922_022_117_6f64.sqrt();
        assert!((z - expect).abs() < 1e-12);
        assert!((z - 0.1240).abs() < 1e-4);
        let z0 = val(&q_sample(&scalar(0.3), 0.0, &scalar(0.7)).unwrap());
        assert!((z0 - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        let z20 = val(&q_sample(&scalar(0.3), 20.0, &scalar(5.0)).unwrap());
        // σ(−20)^½ = e^{−10}/(1+e^{−20})^½
        assert!((z20 - (0.3 + 5.0 * (-10.0f64).exp())).abs() < 1e-8);
        assert!(q_sample(&scalar(0.0), 0.0, &Tensor::zeros(2, DType::F64, &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn predict_x_examples() {
        let z = 0.880_797_077_977_882_3f64.sqrt() * 0.5 - 0.119_202_922_022_117_6f64.sqrt();
        let x = val(&predict_x(&scalar(z), 2.0, &scalar(-1.0)).unwrap());
        assert!((x - 0.5).abs() < 1e-6);
        let near = val(&predict_x(&scalar(0.42), 20.0, &scalar(0.0)).unwrap());
        assert!((near - 0.42).abs() < 1e-6);
        let clipped = val(&predict_x(&scalar(3.0), 20.0, &scalar(0.0)).unwrap());
        assert_eq!(clipped, 1.0);
    }

    #[test]
    fn posterior_step_examples() {
        let same = posterior_step(&scalar(0.3), &scalar(0.9), 1.5, 1.5, Some(&scalar(10.0))).unwrap();
        assert_eq!(val(&same), 0.3);
        let c = posterior_coefficients(1.5, 1.5).unwrap();
        assert_eq!(c.variance, 0.0);

        let big = posterior_step(&scalar(0.8), &scalar(-0.4), -20.0, 20.0, None).unwrap();
        assert!((val(&big) + 0.4).abs() < 1e-8);

        // scalar oracle: z_t=1, x̂=0.5, λ_t=0, λ_s=2
        let e = (-2.0f64).exp();
        let a_s = sigmoid(2.0).sqrt();
        let a_t = sigmoid(0.0).sqrt();
        let mean = a_s / a_t * e * 1.0 + a_s * (1.0 - e) * 0.5;
        let var = sigmoid(-2.0) * (1.0 - e);
        let c = posterior_coefficients(0.0, 2.0).unwrap();
        assert!((c.variance - var).abs() < 1e-15);
        assert!((c.variance - 0.1031).abs() < 1e-4);
        let got = val(&posterior_step(&scalar(1.0), &scalar(0.5), 0.0, 2.0, None).unwrap());
        assert!((got - mean).abs() < 1e-14);
        assert!((got - 0.5854).abs() < 1e-4);
        let noisy = val(&posterior_step(&scalar(1.0), &scalar(0.5), 0.0, 2.0, Some(&scalar(1.0))).unwrap());
        assert!((noisy - (mean + var.sqrt())).abs() < 1e-14);

        assert!(posterior_step(&scalar(1.0), &scalar(0.5), 2.0, 0.0, None).is_err());
    }

    #[test]
    fn guide_examples() {
        let c = scalar(0.2);
        let u = scalar(0.1);
        assert_eq!(val(&guide(&c, &u, 1.0).unwrap()), 0.2);
        assert_eq!(val(&guide(&c, &u, 0.0).unwrap()), 0.1);
        assert!((val(&guide(&c, &u, 3.0).unwrap()) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn eps_loss_examples() {
        let e = Tensor::randn(0f64, 1.0, (64, 3, 16, 16), &Device::Cpu).unwrap();
        assert_eq!(eps_loss(&e, &e).unwrap().to_scalar::<f64>().unwrap(), 0.0);
        let zero = e.zeros_like().unwrap();
        let l = eps_loss(&zero, &e).unwrap().to_scalar::<f64>().unwrap();
        // mean of 49152 squared unit Gaussians: sd = sqrt(2/n) ≈ 0.0064
        let sd = (2.0f64 / 49152.0).sqrt();
        assert!((l - 1.0).abs() < 3.0 * sd, "{l}");
        assert_eq!(eps_loss(&scalar(1.0), &scalar(0.0)).unwrap().to_scalar::<f64>().unwrap(), 1.0);
    }

    #[test]
    fn oracle_posterior_chain_converges() {
        let x = Tensor::rand(-1f64, 1.0, (3, 8, 8), &Device::Cpu).unwrap();
        let lambdas = NoiseSchedule::cosine().grid(256).unwrap();
        let mut z = Tensor::randn(0f64, 1.0, (3, 8, 8), &Device::Cpu).unwrap();
        for i in (1..=256).rev() {
            let (lt, ls) = (lambdas[i], lambdas[i - 1]);
            // oracle ε̂ from the known x and current z
            let eps_hat = ((&z - x.affine(alpha(lt), 0.0).unwrap()).unwrap().affine(1.0 / sigma(lt), 0.0)).unwrap();
            let x_hat = predict_x(&z, lt, &eps_hat).unwrap();
            let noise = Tensor::randn(0f64, 1.0, (3, 8, 8), &Device::Cpu).unwrap();
            z = posterior_step(&z, &x_hat, lt, ls, Some(&noise)).unwrap();
        }
        let err = (&z - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(err < 1e-2, "{err}");
    }

    proptest! {
        #[test]
        fn predict_x_inverts_q_sample(x in -1.0f64..1.0, l in -20.0f64..20.0, e in -4.0f64..4.0) {
            let z = q_sample(&scalar(x), l, &scalar(e)).unwrap();
            let back = val(&predict_x(&z, l, &scalar(e)).unwrap());
            prop_assert!((back - x).abs() < 1e-5, "{} vs {}", back, x);
        }

        #[test]
        fn guide_is_affine_in_weight(a in -2.0f64..2.0, b in -2.0f64..2.0, w1 in 0.1f64..4.0, w2 in 0.0f64..4.0) {
            let g12 = val(&guide(&scalar(a), &scalar(b), w1 + w2).unwrap()) - b;
            let g1 = val(&guide(&scalar(a), &scalar(b), w1).unwrap()) - b;
            prop_assert!((g12 - (w1 + w2) / w1 * g1).abs() < 1e-12);
        }
    }
}
