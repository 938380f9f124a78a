//! Extended difference-of-Gaussians line extraction.

use super::XdogParams;
use crate::error::Result;
use crate::imaging::GrayImage;

/// Normalised Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(data: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![0.0; data.len()];
    for y in 0..height {
        let row = &data[y * width..(y + 1) * width];
        for x in 0..width {
            tmp[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &t)| t * row[clamp(x as isize + k as isize - r, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; data.len()];
    for (k, &t) in kernel.iter().enumerate() {
        for y in 0..height {
            let src = clamp(y as isize + k as isize - r, height);
            let (dst, src) = (&mut out[y * width..(y + 1) * width], &tmp[src * width..(src + 1) * width]);
            for (o, s) in dst.iter_mut().zip(src) {
                *o += t * s;
            }
        }
    }
    out
}

/// `D = (1 + p) G_sigma - p G_{k sigma}`, soft-thresholded:
/// `1` where `D >= eps`, `1 + tanh(phi (D - eps))` elsewhere.
pub fn xdog_extract(img: &GrayImage, params: &XdogParams) -> Result<GrayImage> {
    params.validate()?;
    let (w, h) = img.dims();
    let data: Vec<f64> = img.data().iter().map(|&v| f64::from(v)).collect();
    let narrow = gaussian_blur(&data, w, h, params.sigma);
    let wide = gaussian_blur(&data, w, h, params.k * params.sigma);
    let out = narrow.iter().zip(&wide).map(|(&g1, &g2)| {
        let d = (1.0 + params.p) * g1 - params.p * g2;
        if d >= params.eps {
            1.0
        } else {
            1.0 + (params.phi * (d - params.eps)).tanh()
        }
    });
    Ok(GrayImage::from_clamped(w, h, out))
}
