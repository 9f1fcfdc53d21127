//! EDM preconditioning, denoising score matching, the deterministic Heun
//! sampler with classifier-free guidance, and overlapping-window co-denoising
//! for clips longer than the network's frame window.
//!
//! Latent tensors are `[B, F, c, h, w]`; noise levels are per batch element.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ensure_finite, randn};

/// Noise level together with its preconditioning coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseState {
    pub sigma: f64,
    pub sigma_data: f64,
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

pub fn precondition(sigma: f64, sigma_data: f64) -> Result<NoiseState> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("sigma", format!("must be positive, got {sigma}")));
    }
    if !(sigma_data > 0.0 && sigma_data.is_finite()) {
        return Err(Error::invalid("sigma_data", format!("must be positive, got {sigma_data}")));
    }
    let total = sigma * sigma + sigma_data * sigma_data;
    let root = total.sqrt();
    Ok(NoiseState {
        sigma,
        sigma_data,
        c_skip: sigma_data * sigma_data / total,
        c_out: sigma * sigma_data / root,
        c_in: 1.0 / root,
        c_noise: 0.25 * sigma.ln(),
    })
}

/// Loss weight `(σ² + σ_data²) / (σ·σ_data)²`, the inverse of `c_out²`.
pub fn loss_weight(sigma: f64, sigma_data: f64) -> f64 {
    (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2)
}

/// Log-normal training distribution over σ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SigmaDistribution {
    pub log_mean: f64,
    pub log_std: f64,
}

impl Default for SigmaDistribution {
    fn default() -> Self {
        Self {
            log_mean: -1.2,
            log_std: 1.2,
        }
    }
}

impl SigmaDistribution {
    pub fn validate(&self) -> Result<()> {
        if !(self.log_std > 0.0 && self.log_std.is_finite() && self.log_mean.is_finite()) {
            return Err(Error::invalid(
                "p_sigma",
                format!("degenerate log-normal ({}, {})", self.log_mean, self.log_std),
            ));
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<f64> {
        self.validate()?;
        let n = Normal::new(self.log_mean, self.log_std).map_err(|e| Error::invalid("p_sigma", e.to_string()))?;
        Ok(n.sample(rng).exp())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSchedule {
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub guidance_scale: f64,
}

impl Default for SamplerSchedule {
    fn default() -> Self {
        Self {
            steps: 25,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            guidance_scale: 2.0,
        }
    }
}

impl SamplerSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::invalid("steps", "must be >= 1"));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(Error::invalid(
                "sigma_min",
                format!("need 0 < sigma_min < sigma_max, got {} / {}", self.sigma_min, self.sigma_max),
            ));
        }
        if !(self.rho > 0.0) {
            return Err(Error::invalid("rho", "must be positive"));
        }
        Ok(())
    }

    /// Karras σ-schedule of `steps` levels followed by a terminal 0.
    pub fn sigmas(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let inv = 1.0 / self.rho;
        let (hi, lo) = (self.sigma_max.powf(inv), self.sigma_min.powf(inv));
        let mut out: Vec<f64> = if self.steps == 1 {
            vec![self.sigma_max]
        } else {
            (0..self.steps)
                .map(|i| (hi + i as f64 / (self.steps - 1) as f64 * (lo - hi)).powf(self.rho))
                .collect()
        };
        out.push(0.0);
        Ok(out)
    }
}

/// The trainable network `F_θ` seen from the diffusion layer.
pub trait RawNetwork {
    type Cond;

    /// `x_scaled = c_in·x` (`[B, F, c, h, w]`), `c_noise`: `[B]`.
    fn raw(&self, x_scaled: &Tensor, c_noise: &Tensor, cond: &Self::Cond) -> Result<Tensor>;
}

/// Conditioning that can be restricted to a frame window.
pub trait Windowed: Sized {
    fn window(&self, start: usize, len: usize) -> Result<Self>;
}

fn per_sample(values: &[f64], dims: &[usize], dtype: DType) -> Result<Tensor> {
    let mut shape = vec![1usize; dims.len()];
    shape[0] = values.len();
    Ok(Tensor::from_vec(values.to_vec(), shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// `D_θ(x; σ) = c_skip·x + c_out·F_θ(c_in·x; c_noise)` with one σ per batch element.
pub fn denoise<N: RawNetwork>(
    net: &N,
    x_noisy: &Tensor,
    sigmas: &[f64],
    sigma_data: f64,
    cond: &N::Cond,
) -> Result<Tensor> {
    let dims = x_noisy.dims().to_vec();
    if dims.first() != Some(&sigmas.len()) {
        return Err(Error::shape("denoise", sigmas.len(), dims.first()));
    }
    ensure_finite(x_noisy, "denoise input")?;
    let states = sigmas
        .iter()
        .map(|&s| precondition(s, sigma_data))
        .collect::<Result<Vec<_>>>()?;
    let dtype = x_noisy.dtype();
    let pick = |f: fn(&NoiseState) -> f64| states.iter().map(f).collect::<Vec<f64>>();
    let c_skip = per_sample(&pick(|s| s.c_skip), &dims, dtype)?;
    let c_out = per_sample(&pick(|s| s.c_out), &dims, dtype)?;
    let c_in = per_sample(&pick(|s| s.c_in), &dims, dtype)?;
    let c_noise = Tensor::from_vec(pick(|s| s.c_noise), sigmas.len(), &Device::Cpu)?.to_dtype(dtype)?;
    let raw = net.raw(&x_noisy.broadcast_mul(&c_in)?, &c_noise, cond)?;
    if raw.dims() != x_noisy.dims() {
        return Err(Error::shape("denoise: network output", x_noisy.dims(), raw.dims()));
    }
    Ok((x_noisy.broadcast_mul(&c_skip)? + raw.broadcast_mul(&c_out)?)?)
}

/// Result of one DSM evaluation.
#[derive(Debug, Clone)]
pub struct DsmOutput {
    /// Scalar, differentiable.
    pub loss: Tensor,
    /// `x̂_0` estimate, differentiable.
    pub denoised: Tensor,
    pub sigmas: Vec<f64>,
}

/// DSM loss for given noise levels and unit-variance noise `eps` (`n = σ·eps`).
/// `denoiser(x_noisy, sigmas)` must return `D_θ`.
pub fn dsm_loss_fixed<F>(denoiser: F, x0: &Tensor, sigmas: &[f64], eps: &Tensor, sigma_data: f64) -> Result<DsmOutput>
where
    F: FnOnce(&Tensor, &[f64]) -> Result<Tensor>,
{
    ensure_finite(x0, "dsm x0")?;
    let dims = x0.dims().to_vec();
    let sig = per_sample(sigmas, &dims, x0.dtype())?;
    let x_noisy = (x0 + eps.broadcast_mul(&sig)?)?;
    let denoised = denoiser(&x_noisy, sigmas)?;
    let weights: Vec<f64> = sigmas.iter().map(|&s| loss_weight(s, sigma_data)).collect();
    let b = dims[0];
    let per = (&denoised - x0)?.sqr()?.reshape((b, ()))?.mean(1)?;
    let w = Tensor::from_vec(weights, b, &Device::Cpu)?.to_dtype(x0.dtype())?;
    let loss = (per * w)?.mean_all()?;
    Ok(DsmOutput {
        loss,
        denoised,
        sigmas: sigmas.to_vec(),
    })
}

/// Draws σ ~ p(σ) per batch element and `n ~ N(0, σ²I)`, returns the weighted DSM loss.
pub fn dsm_loss<F, R: Rng>(
    denoiser: F,
    x0: &Tensor,
    dist: &SigmaDistribution,
    sigma_data: f64,
    rng: &mut R,
) -> Result<DsmOutput>
where
    F: FnOnce(&Tensor, &[f64]) -> Result<Tensor>,
{
    dist.validate()?;
    let b = x0.dims()[0];
    let sigmas = (0..b).map(|_| dist.sample(rng)).collect::<Result<Vec<_>>>()?;
    let eps = randn(rng, x0.dims(), x0.dtype())?;
    dsm_loss_fixed(denoiser, x0, &sigmas, &eps, sigma_data)
}

/// `uncond + scale·(cond − uncond)`; exact passthrough at scales 0 and 1.
pub fn cfg_combine(pred_uncond: &Tensor, pred_cond: &Tensor, scale: f64) -> Result<Tensor> {
    if pred_uncond.dims() != pred_cond.dims() {
        return Err(Error::shape("cfg_combine", pred_cond.dims(), pred_uncond.dims()));
    }
    if scale == 1.0 {
        return Ok(pred_cond.clone());
    }
    if scale == 0.0 {
        return Ok(pred_uncond.clone());
    }
    Ok((pred_uncond + ((pred_cond - pred_uncond)? * scale)?)?)
}

/// Conditional and (optional) unconditional conditioning for guided sampling.
#[derive(Debug, Clone)]
pub struct Guided<C> {
    pub cond: C,
    pub uncond: Option<C>,
}

impl<C: Windowed> Windowed for Guided<C> {
    fn window(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            cond: self.cond.window(start, len)?,
            uncond: self.uncond.as_ref().map(|u| u.window(start, len)).transpose()?,
        })
    }
}

fn guided_denoise<N: RawNetwork>(
    net: &N,
    x: &Tensor,
    sigma: f64,
    sigma_data: f64,
    cond: &Guided<N::Cond>,
    scale: f64,
) -> Result<Tensor> {
    let sig = vec![sigma; x.dims()[0]];
    match (&cond.uncond, scale) {
        (_, s) if s == 1.0 => denoise(net, x, &sig, sigma_data, &cond.cond),
        (None, _) => denoise(net, x, &sig, sigma_data, &cond.cond),
        (Some(u), s) if s == 0.0 => denoise(net, x, &sig, sigma_data, u),
        (Some(u), s) => {
            let pu = denoise(net, x, &sig, sigma_data, u)?;
            let pc = denoise(net, x, &sig, sigma_data, &cond.cond)?;
            cfg_combine(&pu, &pc, s)
        }
    }
}

/// Deterministic second-order (Heun) integration of the probability-flow ODE
/// given an `x̂_0` predictor. The final step to σ = 0 is an Euler step, which
/// lands exactly on the last prediction.
pub fn heun_sample<P>(mut predict: P, sigmas: &[f64], init: &Tensor) -> Result<Tensor>
where
    P: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    let mut x = init.clone();
    for pair in sigmas.windows(2) {
        let (t, t_next) = (pair[0], pair[1]);
        let d0 = predict(&x, t)?.detach();
        if t_next == 0.0 {
            x = d0;
            continue;
        }
        let slope0 = ((&x - &d0)? / t)?;
        let x_euler = (&x + (&slope0 * (t_next - t))?)?;
        let d1 = predict(&x_euler, t_next)?.detach();
        let slope1 = ((&x_euler - &d1)? / t_next)?;
        let slope = ((slope0 + slope1)? * 0.5)?;
        x = (&x + (slope * (t_next - t))?)?;
    }
    Ok(x)
}

/// `σ_max·ε` starting point for the sampler.
pub fn initial_noise<R: Rng>(rng: &mut R, dims: &[usize], schedule: &SamplerSchedule, dtype: DType) -> Result<Tensor> {
    Ok((randn(rng, dims, dtype)? * schedule.sigma_max)?)
}

/// Guided deterministic EDM sampling over `[B, F, c, h, w]`.
pub fn edm_sample<N: RawNetwork>(
    net: &N,
    cond: &Guided<N::Cond>,
    schedule: &SamplerSchedule,
    sigma_data: f64,
    init_noise: &Tensor,
) -> Result<Tensor> {
    let sigmas = schedule.sigmas()?;
    heun_sample(
        |x, s| guided_denoise(net, x, s, sigma_data, cond, schedule.guidance_scale),
        &sigmas,
        init_noise,
    )
}

/// Start frames of the overlapping windows covering `total` frames.
pub fn window_starts(total: usize, clip_len: usize, overlap: usize) -> Result<Vec<usize>> {
    if clip_len == 0 || total < clip_len {
        return Err(Error::invalid("clip_len", format!("need 1 <= clip_len <= total ({clip_len} / {total})")));
    }
    if overlap >= clip_len {
        return Err(Error::invalid("overlap", format!("{overlap} >= clip_len {clip_len}")));
    }
    let stride = clip_len - overlap;
    let mut starts = Vec::new();
    let mut s = 0;
    loop {
        if s + clip_len >= total {
            let last = total - clip_len;
            if starts.last() != Some(&last) {
                starts.push(last);
            }
            break;
        }
        starts.push(s);
        s += stride;
    }
    Ok(starts)
}

/// Samples a long clip by running the denoiser on overlapping windows at every
/// step and averaging the `x̂_0` predictions of shared frames (uniform weights,
/// ascending window order) before the shared ODE update.
pub fn temporal_codenoise<N>(
    net: &N,
    cond_long: &Guided<N::Cond>,
    clip_len: usize,
    overlap: usize,
    schedule: &SamplerSchedule,
    sigma_data: f64,
    init_noise: &Tensor,
) -> Result<Tensor>
where
    N: RawNetwork,
    N::Cond: Windowed,
{
    let total = init_noise.dims().get(1).copied().unwrap_or(0);
    let starts = window_starts(total, clip_len, overlap)?;
    let windows = starts
        .iter()
        .map(|&s| cond_long.window(s, clip_len))
        .collect::<Result<Vec<_>>>()?;
    // contributors[t] = windows covering frame t, ascending
    let contributors: Vec<Vec<usize>> = (0..total)
        .map(|t| {
            starts
                .iter()
                .enumerate()
                .filter(|(_, &s)| t >= s && t < s + clip_len)
                .map(|(w, _)| w)
                .collect()
        })
        .collect();
    let sigmas = schedule.sigmas()?;
    let predict = |x: &Tensor, sigma: f64| -> Result<Tensor> {
        let preds = starts
            .iter()
            .zip(&windows)
            .map(|(&s, c)| guided_denoise(net, &x.narrow(1, s, clip_len)?, sigma, sigma_data, c, schedule.guidance_scale))
            .collect::<Result<Vec<_>>>()?;
        if preds.len() == 1 {
            return Ok(preds.into_iter().next().unwrap());
        }
        let mut frames = Vec::with_capacity(total);
        for (t, ws) in contributors.iter().enumerate() {
            let mut acc: Option<Tensor> = None;
            for &w in ws {
                let f = preds[w].narrow(1, t - starts[w], 1)?;
                acc = Some(match acc {
                    None => f,
                    Some(a) => (a + f)?,
                });
            }
            let acc = acc.expect("every frame is covered");
            frames.push(if ws.len() == 1 { acc } else { (acc / ws.len() as f64)? });
        }
        Ok(Tensor::cat(&frames, 1)?)
    };
    heun_sample(predict, &sigmas, init_noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{bit_equal, max_abs_diff, scalar};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Frame-local toy: `F(x) = tanh(a·x + c_noise) + cond`.
    struct Toy {
        a: f64,
    }

    #[derive(Clone)]
    struct Offset(Tensor);

    impl Windowed for Offset {
        fn window(&self, start: usize, len: usize) -> Result<Self> {
            Ok(Offset(self.0.narrow(1, start, len)?))
        }
    }

    impl RawNetwork for Toy {
        type Cond = Offset;
        fn raw(&self, x: &Tensor, c_noise: &Tensor, cond: &Offset) -> Result<Tensor> {
            let mut shape = vec![1; x.rank()];
            shape[0] = x.dims()[0];
            let cn = c_noise.reshape(shape)?;
            Ok(((x * self.a)?.broadcast_add(&cn)?.tanh()? + &cond.0)?)
        }
    }

    #[test]
    fn coefficient_examples() {
        let s = precondition(0.5, 0.5).unwrap();
        assert!((s.c_skip - 0.5).abs() < 1e-15);
        let tiny = precondition(1e-9, 0.5).unwrap();
        assert!((tiny.c_skip - 1.0).abs() < 1e-15 && tiny.c_out < 1e-8);
        // 1/sqrt(1.25) evaluated independently
        let s = precondition(1.0, 0.5).unwrap();
        assert!((s.c_in - 0.894_427_190_999_915_9).abs() < 1e-15);
        assert!(precondition(0.0, 0.5).is_err());
        assert!(precondition(1.0, -1.0).is_err());
    }

    #[test]
    fn zero_network_gives_skip_scaled_input() {
        struct Zero;
        impl RawNetwork for Zero {
            type Cond = ();
            fn raw(&self, x: &Tensor, _: &Tensor, _: &()) -> Result<Tensor> {
                Ok(x.zeros_like()?)
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&mut rng, &[2, 3, 2, 2, 2], DType::F64).unwrap();
        let d = denoise(&Zero, &x, &[0.7, 0.7], 0.5, &()).unwrap();
        let expect = (&x * precondition(0.7, 0.5).unwrap().c_skip).unwrap();
        assert!(bit_equal(&d, &expect).unwrap());
    }

    #[test]
    fn denoise_matches_hand_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, &[1, 2, 1, 3, 3], DType::F64).unwrap();
        let off = Offset(randn(&mut rng, &[1, 2, 1, 3, 3], DType::F64).unwrap());
        let net = Toy { a: 0.8 };
        let sigma = 1.7;
        let d = denoise(&net, &x, &[sigma], 0.5, &off).unwrap();
        let xs = crate::tensor::to_f64_vec(&x).unwrap();
        let os = crate::tensor::to_f64_vec(&off.0).unwrap();
        let ds = crate::tensor::to_f64_vec(&d).unwrap();
        let total: f64 = sigma * sigma + 0.25;
        for i in 0..xs.len() {
            let f = (0.8 * xs[i] / total.sqrt() + 0.25 * sigma.ln()).tanh() + os[i];
            let want = 0.25 / total * xs[i] + sigma * 0.5 / total.sqrt() * f;
            assert!(((ds[i] - want) / want.abs().max(1e-12)).abs() < 1e-6);
        }
    }

    #[test]
    fn denoise_rejects_nan() {
        let x = Tensor::new(&[f64::NAN], &Device::Cpu).unwrap().reshape((1, 1, 1, 1, 1)).unwrap();
        let off = Offset(x.zeros_like().unwrap());
        assert!(matches!(
            denoise(&Toy { a: 1.0 }, &x, &[1.0], 0.5, &off),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn dsm_perfect_denoiser_is_zero_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = randn(&mut rng, &[3, 2, 1, 2, 2], DType::F64).unwrap();
        let out = dsm_loss(|_, _| Ok(x0.clone()), &x0, &SigmaDistribution::default(), 0.5, &mut rng).unwrap();
        assert_eq!(scalar(&out.loss).unwrap(), 0.0);
        let out = dsm_loss(|x, _| Ok((x * 0.3)?), &x0, &SigmaDistribution::default(), 0.5, &mut rng).unwrap();
        assert!(scalar(&out.loss).unwrap() >= 0.0);
        let bad = SigmaDistribution {
            log_mean: 0.0,
            log_std: 0.0,
        };
        assert!(dsm_loss(|x, _| Ok(x.clone()), &x0, &bad, 0.5, &mut rng).is_err());
    }

    #[test]
    fn dsm_identity_denoiser_matches_expectation() {
        // D(x) = x gives loss = λ_σ·mean(n²); E[loss / (λ_σ σ²)] = 1.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = Tensor::zeros((1, 1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let dist = SigmaDistribution::default();
        let n = 20_000;
        let mut ratios = Vec::with_capacity(n);
        for _ in 0..n {
            let out = dsm_loss(|x, _| Ok(x.clone()), &x0, &dist, 0.5, &mut rng).unwrap();
            let s = out.sigmas[0];
            ratios.push(scalar(&out.loss).unwrap() / (loss_weight(s, 0.5) * s * s));
        }
        let mean = ratios.iter().sum::<f64>() / n as f64;
        let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn cfg_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = randn(&mut rng, &[2, 3], DType::F32).unwrap();
        let c = randn(&mut rng, &[2, 3], DType::F32).unwrap();
        assert!(bit_equal(&cfg_combine(&u, &c, 1.0).unwrap(), &c).unwrap());
        assert!(bit_equal(&cfg_combine(&u, &c, 0.0).unwrap(), &u).unwrap());
        assert!(bit_equal(&cfg_combine(&u, &u, 2.0).unwrap(), &u).unwrap());
        let bad = randn(&mut rng, &[3, 2], DType::F32).unwrap();
        assert!(cfg_combine(&u, &bad, 2.0).is_err());
    }

    #[test]
    fn schedule_shape() {
        let s = SamplerSchedule::default().sigmas().unwrap();
        assert_eq!(s.len(), 26);
        assert!((s[0] - 80.0).abs() < 1e-9 && (s[24] - 0.002).abs() < 1e-12 && s[25] == 0.0);
        assert!(s.windows(2).all(|w| w[0] > w[1]));
        let one = SamplerSchedule {
            steps: 1,
            ..Default::default()
        };
        assert_eq!(one.sigmas().unwrap(), vec![80.0, 0.0]);
        let zero = SamplerSchedule {
            steps: 0,
            ..Default::default()
        };
        assert!(zero.sigmas().is_err());
    }

    struct Oracle(Tensor);
    impl RawNetwork for Oracle {
        type Cond = ();
        // F chosen so that D ≡ x_true: F = (x_true − c_skip·x) / c_out, expressed via c_noise.
        fn raw(&self, x_scaled: &Tensor, c_noise: &Tensor, _: &()) -> Result<Tensor> {
            let sigma = (scalar(&c_noise.get(0)?)? * 4.0).exp();
            let st = precondition(sigma, 0.5)?;
            let x = (x_scaled / st.c_in)?;
            Ok(((self.0.broadcast_as(x.dims())? - (x * st.c_skip)?)? / st.c_out)?)
        }
    }

    #[test]
    fn oracle_denoiser_recovers_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let truth = randn(&mut rng, &[1, 2, 1, 2, 2], DType::F64).unwrap();
        for steps in [1, 2, 5, 25] {
            let sched = SamplerSchedule {
                steps,
                ..Default::default()
            };
            let init = initial_noise(&mut rng, truth.dims(), &sched, DType::F64).unwrap();
            let cond = Guided { cond: (), uncond: None };
            let out = edm_sample(&Oracle(truth.clone()), &cond, &sched, 0.5, &init).unwrap();
            assert!(max_abs_diff(&out, &truth).unwrap() < 1e-9, "steps {steps}");
        }
    }

    fn toy_setup(frames: usize) -> (Toy, Guided<Offset>, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let off = randn(&mut rng, &[1, frames, 1, 2, 2], DType::F64).unwrap();
        let cond = Guided {
            cond: Offset(off.clone()),
            uncond: Some(Offset(off.zeros_like().unwrap())),
        };
        let init = initial_noise(&mut rng, off.dims(), &SamplerSchedule::default(), DType::F64).unwrap();
        (Toy { a: 0.9 }, cond, init)
    }

    #[test]
    fn sampler_is_deterministic() {
        let (net, cond, init) = toy_setup(4);
        let s = SamplerSchedule::default();
        let a = edm_sample(&net, &cond, &s, 0.5, &init).unwrap();
        let b = edm_sample(&net, &cond, &s, 0.5, &init).unwrap();
        assert!(bit_equal(&a, &b).unwrap());
    }

    #[test]
    fn zero_guidance_ignores_conditional_content() {
        let (net, cond, init) = toy_setup(4);
        let s = SamplerSchedule {
            guidance_scale: 0.0,
            ..Default::default()
        };
        let a = edm_sample(&net, &cond, &s, 0.5, &init).unwrap();
        let other = Guided {
            cond: Offset((cond.cond.0.clone() * 5.0).unwrap()),
            uncond: cond.uncond.clone(),
        };
        let b = edm_sample(&net, &other, &s, 0.5, &init).unwrap();
        assert!(bit_equal(&a, &b).unwrap());
    }

    #[test]
    fn codenoise_single_window_equals_sample() {
        let (net, cond, init) = toy_setup(4);
        let s = SamplerSchedule::default();
        let a = edm_sample(&net, &cond, &s, 0.5, &init).unwrap();
        let b = temporal_codenoise(&net, &cond, 4, 2, &s, 0.5, &init).unwrap();
        assert!(bit_equal(&a, &b).unwrap());
    }

    #[test]
    fn codenoise_without_overlap_concatenates_windows() {
        let (net, cond, init) = toy_setup(6);
        let s = SamplerSchedule::default();
        let long = temporal_codenoise(&net, &cond, 3, 0, &s, 0.5, &init).unwrap();
        let mut parts = Vec::new();
        for start in [0, 3] {
            let c = cond.window(start, 3).unwrap();
            parts.push(edm_sample(&net, &c, &s, 0.5, &init.narrow(1, start, 3).unwrap()).unwrap());
        }
        assert!(bit_equal(&long, &Tensor::cat(&parts, 1).unwrap()).unwrap());
    }

    #[test]
    fn codenoise_max_overlap_on_constant_inputs_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let one = randn(&mut rng, &[1, 1, 1, 2, 2], DType::F64).unwrap();
        let off = one.repeat((1, 7, 1, 1, 1)).unwrap();
        let cond = Guided {
            cond: Offset(off.clone()),
            uncond: Some(Offset(off.zeros_like().unwrap())),
        };
        let n = randn(&mut rng, &[1, 1, 1, 2, 2], DType::F64).unwrap().repeat((1, 7, 1, 1, 1)).unwrap();
        let init = (n * 80.0).unwrap();
        let out = temporal_codenoise(&Toy { a: 0.9 }, &cond, 4, 3, &SamplerSchedule::default(), 0.5, &init).unwrap();
        let first = out.narrow(1, 0, 1).unwrap();
        for t in 1..7 {
            assert!(max_abs_diff(&out.narrow(1, t, 1).unwrap(), &first).unwrap() < 1e-6);
        }
    }

    #[test]
    fn window_partition() {
        assert_eq!(window_starts(24, 16, 8).unwrap(), vec![0, 8]);
        assert_eq!(window_starts(16, 16, 8).unwrap(), vec![0]);
        assert_eq!(window_starts(20, 8, 0).unwrap(), vec![0, 8, 12]);
        assert_eq!(window_starts(7, 4, 3).unwrap(), vec![0, 1, 2, 3]);
        assert!(window_starts(10, 4, 4).is_err());
        assert!(window_starts(3, 4, 0).is_err());
    }
}
