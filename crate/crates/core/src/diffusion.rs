//! Linear-β DDPM: schedule tables, closed-form forward noising, the
//! noise-prediction loss and the ancestral reverse step.
//!
//! Steps are 1-based throughout: `t ∈ 1..=S`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::adnm::MaskMatrix;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Variance of the reverse transition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ReverseVariance {
    /// `σ_t² = β̃_t = (1 - ᾱ_{t-1}) / (1 - ᾱ_t) · β_t`
    #[default]
    Posterior,
    /// `σ_t² = β_t`
    Beta,
}

impl ReverseVariance {
    pub fn as_str(self) -> &'static str {
        match self {
            ReverseVariance::Posterior => "posterior",
            ReverseVariance::Beta => "beta",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "posterior" => Some(ReverseVariance::Posterior),
            "beta" => Some(ReverseVariance::Beta),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta1: f64,
    beta_end: f64,
    variance: ReverseVariance,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
    sigma: Vec<f64>,
}

/// Linear schedule from `beta1` to `beta_end` over `steps` steps.
pub fn build_schedule(steps: usize, beta1: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(steps, beta1, beta_end, ReverseVariance::Posterior)
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta1: f64, beta_end: f64, variance: ReverseVariance) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if !(0.0 < beta1 && beta1 < beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "schedule bounds must satisfy 0 < beta1 < betaT < 1, got {beta1}, {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|k| {
                let f = k as f64 / (steps - 1) as f64;
                beta1 * (1.0 - f) + beta_end * f
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar: Vec<f64> = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let beta_tilde: Vec<f64> = (0..steps)
            .map(|k| {
                let prev = if k == 0 { 1.0 } else { alpha_bar[k - 1] };
                (1.0 - prev) / (1.0 - alpha_bar[k]) * beta[k]
            })
            .collect();
        let sigma = match variance {
            ReverseVariance::Posterior => beta_tilde.iter().map(|v| v.sqrt()).collect(),
            ReverseVariance::Beta => beta.iter().map(|v| v.sqrt()).collect(),
        };
        Ok(Self {
            steps,
            beta1,
            beta_end,
            variance,
            beta,
            alpha,
            alpha_bar,
            beta_tilde,
            sigma,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta1(&self) -> f64 {
        self.beta1
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    pub fn variance(&self) -> ReverseVariance {
        self.variance
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::invalid(format!("step {t} outside 1..={}", self.steps)));
        }
        Ok(())
    }
}

/// Anything that predicts the injected noise from a noised window.
pub trait NoisePredictor {
    fn predict_noise(&self, xt: &Tensor, t: usize, mask: &MaskMatrix) -> Result<Tensor>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&Tensor, usize, &MaskMatrix) -> Result<Tensor>,
{
    fn predict_noise(&self, xt: &Tensor, t: usize, mask: &MaskMatrix) -> Result<Tensor> {
        self(xt, t, mask)
    }
}

pub fn standard_normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape")
}

/// `sqrt(ᾱ_t)·x0 + sqrt(1 - ᾱ_t)·eps`
pub fn q_sample(sched: &NoiseSchedule, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Mean over all entries of `(eps - ε̂(x_t, t))²`.
pub fn diffusion_loss(
    sched: &NoiseSchedule,
    denoiser: &impl NoisePredictor,
    x0: &Tensor,
    mask: &MaskMatrix,
    t: usize,
    eps: &Tensor,
) -> Result<f64> {
    let xt = q_sample(sched, x0, t, eps)?;
    let pred = denoiser.predict_noise(&xt, t, mask)?;
    Ok(eps.zip_map(&pred, |e, p| (e - p) * (e - p))?.mean())
}

/// One ancestral step `x_t → x_{t-1}`. The stochastic term is dropped at `t = 1`.
pub fn p_sample_step(
    sched: &NoiseSchedule,
    denoiser: &impl NoisePredictor,
    xt: &Tensor,
    t: usize,
    mask: &MaskMatrix,
    z: &Tensor,
) -> Result<Tensor> {
    sched.check_step(t)?;
    let eps = denoiser.predict_noise(xt, t, mask)?;
    if eps.shape() != xt.shape() || z.shape() != xt.shape() {
        return Err(Error::invalid(format!(
            "p_sample_step: shapes x_t {:?}, ε̂ {:?}, z {:?} differ",
            xt.shape(),
            eps.shape(),
            z.shape()
        )));
    }
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let eps_coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let sigma = if t == 1 { 0.0 } else { sched.sigma(t) };
    let data = xt
        .data()
        .iter()
        .zip(eps.data())
        .zip(z.data())
        .map(|((x, e), z)| inv_sqrt_alpha * (x - eps_coef * e) + sigma * z)
        .collect();
    Tensor::new(xt.shape().to_vec(), data)
}

/// Noises `x0` to step `t_infer` and runs the reverse chain back to step 0.
/// `t_infer = 0` returns the input unchanged.
pub fn reconstruct(
    sched: &NoiseSchedule,
    denoiser: &impl NoisePredictor,
    x0: &Tensor,
    mask: &MaskMatrix,
    t_infer: usize,
    seed: u64,
) -> Result<Tensor> {
    if t_infer > sched.steps() {
        return Err(Error::invalid(format!(
            "inference depth {t_infer} exceeds schedule length {}",
            sched.steps()
        )));
    }
    if t_infer == 0 {
        return Ok(x0.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = standard_normal(&mut rng, x0.shape());
    let mut x = q_sample(sched, x0, t_infer, &eps)?;
    for t in (1..=t_infer).rev() {
        let z = if t > 1 {
            standard_normal(&mut rng, x0.shape())
        } else {
            Tensor::zeros(x0.shape())
        };
        x = p_sample_step(sched, denoiser, &x, t, mask, &z)?;
    }
    Ok(x)
}
