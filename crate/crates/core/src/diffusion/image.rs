use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::numerics::SeededRng;

/// `channels x height x width` image, planar, in `f64`. Clean images live in
/// `[-1, 1]`; latents along a trajectory are unbounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(shape_err!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            ));
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

    pub fn filled(channels: usize, height: usize, width: usize, v: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![v; channels * height * width],
        }
    }

    /// Standard normal noise of the given shape.
    pub fn noise(channels: usize, height: usize, width: usize, rng: &mut SeededRng) -> Self {
        Self {
            channels,
            height,
            width,
            data: rng.normal_vec(channels * height * width),
        }
    }

    pub fn noise_like(&self, rng: &mut SeededRng) -> Self {
        Self::noise(self.channels, self.height, self.width, rng)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
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

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn check_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err!(
                "images of shape {:?} and {:?}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(())
    }

    /// `a·self + b·other`.
    pub fn lincomb(&self, a: f64, other: &ImageTensor, b: f64) -> Result<ImageTensor> {
        self.check_same_shape(other)?;
        Ok(Self {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&x, &y)| a * x + b * y)
                .collect(),
            ..*self
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageTensor {
        Self {
            data: self.data.iter().map(|&x| f(x)).collect(),
            ..*self
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &ImageTensor) -> Result<f64> {
        Ok(self.lincomb(1.0, other, -1.0)?.norm())
    }

    /// `‖self - reference‖ / ‖reference‖`.
    pub fn relative_error(&self, reference: &ImageTensor) -> Result<f64> {
        Ok(self.distance(reference)? / reference.norm())
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                (lo.min(x), hi.max(x))
            })
    }

    pub fn bit_identical(&self, other: &ImageTensor) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
