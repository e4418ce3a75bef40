//! Dense grids, numerically stable softmax / log-sum-exp, and the
//! central-difference gradient oracle every analytic gradient is checked
//! against.
//!
//! Scalar reductions run in a fixed row-major order, so results are
//! bit-reproducible for a given input.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Default central-difference step for unit-scale inputs.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// A `height x width x channels` block of `f64`, pixel-major and
/// channel-minor.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    /// Wraps `data`, checking its length and that every entry is finite.
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "data length {} does not match {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        let grid = Self {
            height,
            width,
            channels,
            data,
        };
        grid.check_finite()?;
        Ok(grid)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of pixels, `height * width`.
    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.data[index * self.channels..(index + 1) * self.channels]
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        self.data[(row * self.width + col) * self.channels + channel] = value;
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite {
                index,
                value: self.data[index],
            }),
            None => Ok(()),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Grid, scale: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "cannot add {}x{}x{} to {}x{}x{}",
                other.height, other.width, other.channels, self.height, self.width, self.channels
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }
}

/// A grid of per-pixel class distributions. Entries lie in `[0, 1]` and each
/// pixel's channels sum to one within `1e-9`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbGrid(Grid);

impl ProbGrid {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn from_grid(grid: Grid) -> Result<Self> {
        grid.check_finite()?;
        if let Some(index) = grid.data.iter().position(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument(format!(
                "probability {} at flat index {} outside [0, 1]",
                grid.data[index], index
            )));
        }
        for p in 0..grid.pixels() {
            let sum: f64 = grid.pixel(p).iter().sum();
            if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
                return Err(Error::InvalidArgument(format!(
                    "pixel {p} probabilities sum to {sum}"
                )));
            }
        }
        Ok(Self(grid))
    }

    #[inline]
    pub fn as_grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }

    #[inline]
    pub fn pixel(&self, index: usize) -> &[f64] {
        self.0.pixel(index)
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.0.pixels()
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.0.channels()
    }
}

/// Per-pixel softmax over channels, max-shifted.
pub fn softmax(logits: &Grid) -> Result<ProbGrid> {
    logits.check_finite()?;
    if logits.channels == 0 {
        return Err(Error::Empty("softmax over zero channels"));
    }
    let mut out = logits.clone();
    for p in 0..out.pixels() {
        softmax_in_place(out.pixel_mut(p));
    }
    Ok(ProbGrid(out))
}

#[inline]
pub(crate) fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = math::exp(*v - max);
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}

/// `log(sum(exp(values)))`, max-shifted.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("log_sum_exp of an empty vector"));
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            index,
            value: values[index],
        });
    }
    Ok(lse(values))
}

#[inline]
pub(crate) fn lse(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().map(|v| math::exp(v - max)).sum();
    max + math::ln(sum)
}

/// Central-difference gradient of `f` at `point`:
/// `(f(x + h e_k) - f(x - h e_k)) / 2h` for every coordinate `k`.
pub fn fd_gradient<F>(mut f: F, point: &Grid, step: f64) -> Result<Grid>
where
    F: FnMut(&Grid) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut probe = point.clone();
    let mut grad = Grid::zeros(point.height, point.width, point.channels);
    for k in 0..point.data.len() {
        let x = point.data[k];
        probe.data[k] = x + step;
        let plus = f(&probe);
        probe.data[k] = x - step;
        let minus = f(&probe);
        probe.data[k] = x;
        for value in [plus, minus] {
            if !value.is_finite() {
                return Err(Error::NonFinite { index: k, value });
            }
        }
        grad.data[k] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// Outcome of comparing an analytic gradient with a numerical one.
///
/// An entry matches when `|a - n| <= abs_floor`; every other entry is
/// scored by `|a - n| / max(|a|, |n|)`, so the check passes when each entry
/// is within the absolute floor or within the relative tolerance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradComparison {
    /// Largest relative error among entries outside the absolute floor.
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub abs_floor: f64,
    /// Entries compared.
    pub entries: usize,
    /// Entries whose absolute error exceeds the floor.
    pub above_floor: usize,
}

impl GradComparison {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_relative_error < rel_tol
    }

    /// Folds another comparison into this one, keeping the worst of each.
    pub fn merge(&mut self, other: &GradComparison) {
        if other.max_relative_error > self.max_relative_error {
            self.max_relative_error = other.max_relative_error;
            self.worst_index = other.worst_index;
        }
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        self.entries += other.entries;
        self.above_floor += other.above_floor;
    }
}

pub fn compare_gradients(analytic: &[f64], numeric: &[f64], abs_floor: f64) -> Result<GradComparison> {
    if analytic.len() != numeric.len() {
        return Err(Error::Shape(format!(
            "gradient lengths differ: {} vs {}",
            analytic.len(),
            numeric.len()
        )));
    }
    let mut out = GradComparison {
        max_relative_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        abs_floor,
        entries: analytic.len(),
        above_floor: 0,
    };
    for (k, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let diff = (a - n).abs();
        out.max_abs_error = out.max_abs_error.max(diff);
        if diff > abs_floor {
            out.above_floor += 1;
            let rel = diff / a.abs().max(n.abs());
            if rel > out.max_relative_error {
                out.max_relative_error = rel;
                out.worst_index = k;
            }
        }
    }
    Ok(out)
}
