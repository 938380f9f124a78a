//! Edge-preserving recursive filter (domain transform, recursive variant).
//!
//! A first-order recursive smoother runs left-to-right then right-to-left
//! along each row, then down and up each column. The feedback weight between
//! neighbours is `a^d`, where the gap distance `d` grows with their
//! intensity difference, so smoothing stops at edges.

use super::FilterParams;
use crate::error::{Error, Result};
use crate::imaging::GrayImage;

/// In-place causal pass: `y[i] = (1 - w[i-1]) * x[i] + w[i-1] * y[i-1]`,
/// with `weights[i]` the feedback weight across the gap `(i, i + 1)`.
pub fn forward_pass(values: &mut [f64], weights: &[f64]) {
    debug_assert_eq!(weights.len() + 1, values.len().max(1));
    for i in 1..values.len() {
        values[i] += weights[i - 1] * (values[i - 1] - values[i]);
    }
}

/// Mirror image of [`forward_pass`], running right to left.
pub fn backward_pass(values: &mut [f64], weights: &[f64]) {
    debug_assert_eq!(weights.len() + 1, values.len().max(1));
    for i in (0..values.len().saturating_sub(1)).rev() {
        values[i] += weights[i] * (values[i + 1] - values[i]);
    }
}

/// One-dimensional recursive filter with per-gap distances.
///
/// `distances[i]` is the gap between samples `i` and `i + 1`; the feedback
/// weight across it is `a^distances[i]`.
pub fn rf_filter_1d(signal: &[f64], distances: &[f64], a: f64) -> Result<Vec<f64>> {
    if !(a > 0.0 && a < 1.0) {
        return Err(Error::contract(format!("feedback base must lie in (0, 1), got {a}")));
    }
    if signal.is_empty() || distances.len() + 1 != signal.len() {
        return Err(Error::mismatch(
            format!("{} distances", signal.len().saturating_sub(1)),
            distances.len(),
        ));
    }
    let weights: Vec<f64> = distances.iter().map(|&d| a.powf(d)).collect();
    let mut out = signal.to_vec();
    forward_pass(&mut out, &weights);
    backward_pass(&mut out, &weights);
    Ok(out)
}

/// Spatial scale used at 1-based iteration `i` of `n`; the scales halve each
/// iteration and their variances sum to `sigma_s^2`.
pub fn iteration_sigma(sigma_s: f64, i: u32, n: u32) -> f64 {
    sigma_s * 3f64.sqrt() * 2f64.powi((n - i) as i32) / (4f64.powi(n as i32) - 1.0).sqrt()
}

/// Squares every weight in place when `square` is set and returns them.
fn refresh(weights: &mut [f32], square: bool) -> &[f32] {
    if square {
        weights.iter_mut().for_each(|k| *k *= *k);
    }
    weights
}

/// Rows are grouped in bands of this many. Within a band storage is
/// column-major: pixel `(x, y0 + r)` of the band starting at row `y0` with
/// `n` rows lives at `y0 * w + x * n + r`. A band's rows then advance through
/// the horizontal recurrence side by side, and vertical neighbours inside a
/// band are adjacent in memory.
const BAND: usize = 8;

fn band_height(y0: usize, h: usize) -> usize {
    BAND.min(h - y0)
}

/// Forward then backward horizontal pass over one band. `weights` is the
/// band's slice, holding the weight across `(x-1, x)`; column 0 is unused.
fn band_row_passes(band: &mut [f32], weights: &[f32], n: usize) {
    let w = band.len() / n;
    for x in 1..w {
        let (head, tail) = band.split_at_mut(x * n);
        let prev = &head[(x - 1) * n..];
        for ((c, &p), &k) in tail[..n].iter_mut().zip(prev).zip(&weights[x * n..(x + 1) * n]) {
            *c += k * (p - *c);
        }
    }
    for x in (0..w.saturating_sub(1)).rev() {
        let (head, tail) = band.split_at_mut((x + 1) * n);
        let k = &weights[(x + 1) * n..(x + 2) * n];
        for ((c, &p), &k) in head[x * n..].iter_mut().zip(&tail[..n]).zip(k) {
            *c += k * (p - *c);
        }
    }
}

/// Forward then backward vertical pass over the whole banded buffer.
/// `weights` holds the weight across `(y-1, y)`; row 0 is unused. Each
/// sweep updates one row (lane) of a band across all columns at once.
fn column_passes(buf: &mut [f32], weights: &[f32], w: usize, h: usize) {
    for y0 in (0..h).step_by(BAND) {
        let n = band_height(y0, h);
        let (done, rest) = buf.split_at_mut(y0 * w);
        let band = &mut rest[..n * w];
        let k = &weights[y0 * w..(y0 + n) * w];
        if y0 > 0 {
            // The band above is always full height.
            let above = &done[(y0 - BAND) * w..];
            for ((c, k), a) in band.chunks_exact_mut(n).zip(k.chunks_exact(n)).zip(above.chunks_exact(BAND)) {
                c[0] += k[0] * (a[BAND - 1] - c[0]);
            }
        }
        for r in 1..n {
            for (c, k) in band.chunks_exact_mut(n).zip(k.chunks_exact(n)) {
                c[r] += k[r] * (c[r - 1] - c[r]);
            }
        }
    }
    for y0 in (0..h).step_by(BAND).rev() {
        let n = band_height(y0, h);
        let (head, below) = buf.split_at_mut((y0 + n) * w);
        let band = &mut head[y0 * w..];
        let k = &weights[y0 * w..(y0 + n) * w];
        if y0 + n < h {
            let nb = band_height(y0 + n, h);
            let kb = &weights[(y0 + n) * w..];
            for ((c, b), kb) in band.chunks_exact_mut(n).zip(below.chunks_exact(nb)).zip(kb.chunks_exact(nb)) {
                c[n - 1] += kb[0] * (b[0] - c[n - 1]);
            }
        }
        for r in (0..n - 1).rev() {
            for (c, k) in band.chunks_exact_mut(n).zip(k.chunks_exact(n)) {
                c[r] += k[r + 1] * (c[r + 1] - c[r]);
            }
        }
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<f32>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Two-dimensional edge-preserving smoothing.
///
/// Gap distances come from the input: `1 + (sigma_s / sigma_r) * |dI|`.
/// Iteration `i` uses `a_i = exp(-sqrt(2) / sigma_i)`. Since consecutive
/// sigmas halve, `a_{i+1}^d = (a_i^d)^2` and weights after the first
/// iteration are obtained by squaring instead of re-exponentiating.
///
/// Each iteration filters rows, then columns.
pub fn rf_filter_2d(img: &GrayImage, params: &FilterParams) -> Result<GrayImage> {
    params.validate()?;
    let (w, h) = img.dims();
    let src = img.data();
    let ratio = params.sigma_s / params.sigma_r;
    let log_a = -std::f64::consts::SQRT_2 / iteration_sigma(params.sigma_s, 1, params.iterations);

    // Flat gaps (the bulk of a line drawing) all share the weight `a`.
    let flat = log_a.exp() as f32;
    let weight = |p: f32, q: f32| {
        if p == q {
            flat
        } else {
            (log_a * (1.0 + ratio * f64::from((p - q).abs()))).exp() as f32
        }
    };

    // Reused across calls: fresh multi-megabyte buffers cost more to fault
    // in than the filter itself.
    let mut scratch = SCRATCH.with(|s| s.take());
    scratch.resize(3 * w * h, 0.0);
    let (buf, rest) = scratch.split_at_mut(w * h);
    let (hw, vw) = rest.split_at_mut(w * h);

    // All three buffers are banded; hw is the weight across (x-1, x) and vw
    // the weight across (y-1, x).
    for y0 in (0..h).step_by(BAND) {
        let n = band_height(y0, h);
        for r in 0..n {
            let y = y0 + r;
            let row = &src[y * w..(y + 1) * w];
            let above = (y > 0).then(|| &src[(y - 1) * w..y * w]);
            for x in 0..w {
                let i = y0 * w + x * n + r;
                buf[i] = row[x];
                if x > 0 {
                    hw[i] = weight(row[x], row[x - 1]);
                }
                if let Some(above) = above {
                    vw[i] = weight(row[x], above[x]);
                }
            }
        }
    }

    for iteration in 0..params.iterations {
        let hw = refresh(hw, iteration > 0);
        for y0 in (0..h).step_by(BAND) {
            let n = band_height(y0, h);
            let span = y0 * w..(y0 + n) * w;
            band_row_passes(&mut buf[span.clone()], &hw[span], n);
        }
        column_passes(buf, refresh(vw, iteration > 0), w, h);
    }

    // Each update is a convex combination; clamping only absorbs rounding.
    let (lo, hi) = src
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mut out = vec![0.0f32; w * h];
    for y0 in (0..h).step_by(BAND) {
        let n = band_height(y0, h);
        for (x, lanes) in buf[y0 * w..(y0 + n) * w].chunks_exact(n).enumerate() {
            for (r, &v) in lanes.iter().enumerate() {
                out[(y0 + r) * w + x] = v.clamp(lo, hi);
            }
        }
    }
    SCRATCH.with(|s| s.replace(scratch));
    GrayImage::new(w, h, out)
}
