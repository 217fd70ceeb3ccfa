//! Separable filtering with mirror borders and Gaussian local moments.

use crate::error::{Error, Result};

/// Mirror reflection without repeating the edge sample
/// (`-1 -> 1`, `n -> n - 2`).
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Correlates a `width x height` plane with `kernel` along rows, then
/// along columns. `kernel` has odd length and is centred.
pub fn separable(plane: &[f64], width: usize, height: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; width * height];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (k, &w) in kernel.iter().enumerate() {
                acc += w * row[reflect(x as isize + k as isize - r, width)];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, &w) in kernel.iter().enumerate() {
                acc += w * tmp[reflect(y as isize + k as isize - r, height) * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Normalised 1-D Gaussian of `size` taps (odd) and standard deviation `sigma`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Side of the local-moment window.
pub const MOMENT_WINDOW: usize = 7;

/// The 7-tap Gaussian with sigma 7/6 used for local moments.
pub fn moment_kernel() -> Vec<f64> {
    gaussian_kernel(MOMENT_WINDOW, 7.0 / 6.0)
}

/// Gaussian-weighted local mean and standard deviation fields.
///
/// The deviation is computed around each pixel's own local mean
/// (`sqrt(sum w (x - mu)^2)`), so adding a constant leaves it unchanged.
pub fn local_moments(plane: &[f64], width: usize, height: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if width < MOMENT_WINDOW || height < MOMENT_WINDOW {
        return Err(Error::TooSmall(format!(
            "{width}x{height} is smaller than the {MOMENT_WINDOW}x{MOMENT_WINDOW} window"
        )));
    }
    let kernel = moment_kernel();
    let mu = separable(plane, width, height, &kernel);
    let r = (MOMENT_WINDOW / 2) as isize;
    let mut sigma = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            let m = mu[y * width + x];
            let mut acc = 0.0;
            for (j, &wy) in kernel.iter().enumerate() {
                let yy = reflect(y as isize + j as isize - r, height);
                for (i, &wx) in kernel.iter().enumerate() {
                    let xx = reflect(x as isize + i as isize - r, width);
                    let d = plane[yy * width + xx] - m;
                    acc += wy * wx * d * d;
                }
            }
            sigma[y * width + x] = acc.sqrt();
        }
    }
    Ok((mu, sigma))
}
