//! Turning candidate images into guidance sketches: line extraction
//! followed by edge-preserving cleanup.

mod filter;
mod xdog;

pub use filter::{backward_pass, forward_pass, iteration_sigma, rf_filter_1d, rf_filter_2d};
pub use xdog::{gaussian_blur, gaussian_kernel, xdog_extract};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{GrayImage, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterParams {
    /// Spatial scale, pixels.
    pub sigma_s: f64,
    /// Range scale, intensity units.
    pub sigma_r: f64,
    pub iterations: u32,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            sigma_s: 8.0,
            sigma_r: 0.1,
            iterations: 3,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_s > 0.0 && self.sigma_s.is_finite()) {
            return Err(Error::contract(format!("sigma_s must be positive, got {}", self.sigma_s)));
        }
        if !(self.sigma_r > 0.0 && self.sigma_r.is_finite()) {
            return Err(Error::contract(format!("sigma_r must be positive, got {}", self.sigma_r)));
        }
        if !(1..=30).contains(&self.iterations) {
            return Err(Error::contract(format!(
                "iterations must lie in 1..=30, got {}",
                self.iterations
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XdogParams {
    pub sigma: f64,
    pub k: f64,
    pub p: f64,
    pub eps: f64,
    pub phi: f64,
}

impl Default for XdogParams {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            k: 1.6,
            p: 20.0,
            eps: 0.1,
            phi: 10.0,
        }
    }
}

impl XdogParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::contract(format!("xdog sigma must be positive, got {}", self.sigma)));
        }
        if !(self.k > 1.0 && self.k.is_finite()) {
            return Err(Error::contract(format!("xdog k must exceed 1, got {}", self.k)));
        }
        if ![self.p, self.eps, self.phi].iter().all(|v| v.is_finite()) {
            return Err(Error::contract("xdog parameters must be finite"));
        }
        Ok(())
    }
}

/// Line extraction used when no learned extractor is available.
pub fn classical_lines(img: &RgbImage) -> GrayImage {
    xdog_extract(&img.to_gray(), &XdogParams::default()).expect("default parameters are valid")
}

/// Nearest-rank percentile (`q` in `[0, 1]`) of a slice.
pub fn percentile(values: &[f32], q: f64) -> f32 {
    let mut scratch = values.to_vec();
    let rank = ((scratch.len() - 1) as f64 * q).round() as usize;
    *scratch.select_nth_unstable_by(rank, f32::total_cmp).1
}

/// 2nd and 98th percentiles, computed with one copy of the data.
fn percentile_band(values: &[f32]) -> (f32, f32) {
    let mut scratch = values.to_vec();
    let last = (scratch.len() - 1) as f64;
    let hi_rank = (last * 0.98).round() as usize;
    let lo_rank = (last * 0.02).round() as usize;
    let (lower, &mut hi, _) = scratch.select_nth_unstable_by(hi_rank, f32::total_cmp);
    let lo = if lo_rank == hi_rank {
        hi
    } else {
        *lower.select_nth_unstable_by(lo_rank, f32::total_cmp).1
    };
    (lo, hi)
}

/// Smooths a rough line map and stretches its contrast.
///
/// After filtering, the 2nd/98th percentiles are mapped to 0/1 with
/// clamping. When those percentiles coincide on a non-constant image (thin
/// lines covering under 2% of the canvas) the min/max are used instead. A
/// constant image is returned unchanged.
pub fn optimize(rough: &GrayImage, params: &FilterParams) -> Result<GrayImage> {
    let smooth = rf_filter_2d(rough, params)?;
    let data = smooth.data();
    let (mut lo, mut hi) = percentile_band(data);
    if hi <= lo {
        (lo, hi) = data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if hi <= lo {
            return Ok(smooth);
        }
    }
    let (lo, span) = (f64::from(lo), f64::from(hi) - f64::from(lo));
    let (w, h) = smooth.dims();
    Ok(GrayImage::from_clamped(
        w,
        h,
        data.iter().map(|&v| (f64::from(v) - lo) / span),
    ))
}
