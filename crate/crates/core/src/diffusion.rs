//! Forward diffusion and the ε / v / x₀ parameterization algebra.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// A `channels × height × width` grid in row-major CHW order.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LatentGrid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("latent dimensions must be positive"));
        }
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch {
                expected: vec![channels * height * width],
                got: vec![data.len()],
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite latent value at index {i}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, mut f: impl FnMut(usize) -> f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: (0..channels * height * width).map(&mut f).collect(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn ensure_same_shape(&self, other: &LatentGrid) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape().to_vec(),
                got: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `a·self + b·other`, element-wise.
    pub fn combine(&self, a: f64, other: &LatentGrid, b: f64) -> Result<LatentGrid> {
        self.ensure_same_shape(other)?;
        Ok(LatentGrid {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(x, y)| a * x + b * y)
                .collect(),
            ..*self
        })
    }

    pub fn mean_abs_diff(&self, other: &LatentGrid) -> Result<f64> {
        self.ensure_same_shape(other)?;
        let sum: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum();
        Ok(sum / self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &LatentGrid) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeighting {
    pub gamma: f64,
}

/// Smallest weight a timestep can receive; keeps zero-SNR samples in the loss.
pub const LAMBDA_FLOOR: f64 = 1e-8;

impl LossWeighting {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
        }
        Ok(Self { gamma })
    }

    /// λ = min(SNR, γ) / (SNR + 1), floored at [`LAMBDA_FLOOR`].
    pub fn lambda(&self, snr: f64) -> f64 {
        let lam = if snr.is_infinite() {
            0.0
        } else {
            snr.min(self.gamma) / (snr + 1.0)
        };
        lam.max(LAMBDA_FLOOR)
    }
}

impl Default for LossWeighting {
    fn default() -> Self {
        Self { gamma: 5.0 }
    }
}

fn check_alpha_bar(alpha_bar: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::invalid(format!("alpha_bar must lie in [0, 1], got {alpha_bar}")));
    }
    Ok(())
}

/// √ᾱ_t·x₀ + √(1−ᾱ_t)·ε.
pub fn forward_sample(s: &NoiseSchedule, x0: &LatentGrid, t: usize, eps: &LatentGrid) -> Result<LatentGrid> {
    let a = s.sqrt_alpha_bar(t)?;
    let b = s.sqrt_one_minus_alpha_bar(t)?;
    x0.combine(a, eps, b)
}

/// v = √ᾱ·ε − √(1−ᾱ)·x₀.
pub fn velocity_from(x0: &LatentGrid, eps: &LatentGrid, alpha_bar: f64) -> Result<LatentGrid> {
    check_alpha_bar(alpha_bar)?;
    eps.combine(alpha_bar.sqrt(), x0, -(1.0 - alpha_bar).sqrt())
}

/// x₀ = √ᾱ·x_t − √(1−ᾱ)·v.
pub fn x0_from_v(xt: &LatentGrid, v: &LatentGrid, alpha_bar: f64) -> Result<LatentGrid> {
    check_alpha_bar(alpha_bar)?;
    xt.combine(alpha_bar.sqrt(), v, -(1.0 - alpha_bar).sqrt())
}

/// ε = √(1−ᾱ)·x_t + √ᾱ·v.
pub fn eps_from_v(xt: &LatentGrid, v: &LatentGrid, alpha_bar: f64) -> Result<LatentGrid> {
    check_alpha_bar(alpha_bar)?;
    xt.combine((1.0 - alpha_bar).sqrt(), v, alpha_bar.sqrt())
}

fn mse(a: &LatentGrid, b: &LatentGrid) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data.len() as f64)
}

pub fn v_loss(
    v_pred: &LatentGrid,
    v_true: &LatentGrid,
    t: usize,
    s: &NoiseSchedule,
    w: &LossWeighting,
) -> Result<f64> {
    let lam = w.lambda(s.snr(t)?);
    Ok(lam * mse(v_pred, v_true)?)
}

/// Gradient of [`v_loss`] with respect to `v_pred`.
pub fn v_loss_grad(
    v_pred: &LatentGrid,
    v_true: &LatentGrid,
    t: usize,
    s: &NoiseSchedule,
    w: &LossWeighting,
) -> Result<LatentGrid> {
    v_pred.ensure_same_shape(v_true)?;
    let lam = w.lambda(s.snr(t)?);
    let scale = 2.0 * lam / v_pred.len() as f64;
    v_pred.combine(scale, v_true, -scale)
}

pub fn eps_loss(eps_pred: &LatentGrid, eps_true: &LatentGrid) -> Result<f64> {
    mse(eps_pred, eps_true)
}
