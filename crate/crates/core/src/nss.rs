//! Natural-scene-statistics features: MSCN coefficients and asymmetric
//! generalized Gaussian fits, at native and half resolution.
//!
//! Feature order per scale (18 values):
//!
//! ```text
//! 0..2    alpha, (beta_l^2 + beta_r^2) / 2     of the MSCN field
//! 2..6    alpha, eta, beta_l^2, beta_r^2       horizontal products
//! 6..10                                        vertical products
//! 10..14                                       main-diagonal products
//! 14..18                                       anti-diagonal products
//! ```
//!
//! The 36-vector is the native scale followed by the half scale.

use std::sync::OnceLock;

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::filter::local_moments;
use crate::image::{Image, Patch};

/// Stabilizing constant in the MSCN denominator.
pub const MSCN_C: f64 = 1.0 / 255.0;
pub const NSS_FEATURES: usize = 36;
/// Smallest patch side the features are defined for.
pub const NSS_MIN_SIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggdParams {
    pub alpha: f64,
    pub beta_l: f64,
    pub beta_r: f64,
    pub eta: f64,
}

/// `(I - mu) / (sigma + C)` of the luma, single channel.
pub fn mscn(img: &Image) -> Result<Image> {
    let y = img.luma()?;
    let (mu, sigma) = local_moments(y.data(), y.width(), y.height())?;
    let data = y
        .data()
        .iter()
        .zip(&mu)
        .zip(&sigma)
        .map(|((v, m), s)| (v - m) / (s + MSCN_C))
        .collect();
    Image::new(y.width(), y.height(), 1, data)
}

/// `Gamma(2/a)^2 / (Gamma(1/a) Gamma(3/a))` on the search grid.
fn rho_table() -> &'static [(f64, f64)] {
    static TABLE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..=9800)
            .map(|i| {
                let a = 0.2 + i as f64 * 1e-3;
                let r = (2.0 * ln_gamma(2.0 / a) - ln_gamma(1.0 / a) - ln_gamma(3.0 / a)).exp();
                (a, r)
            })
            .collect()
    })
}

/// Moment-matching AGGD estimate.
pub fn fit_aggd(samples: &[f64]) -> Result<AggdParams> {
    if samples.len() < 16 {
        return Err(Error::Degenerate(format!("{} samples; need at least 16", samples.len())));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("AGGD sample".into()));
    }
    let (mut sl, mut nl, mut sr, mut nr, mut abs_sum, mut sq_sum) = (0.0, 0usize, 0.0, 0usize, 0.0, 0.0);
    for &x in samples {
        if x < 0.0 {
            sl += x * x;
            nl += 1;
        } else if x > 0.0 {
            sr += x * x;
            nr += 1;
        }
        abs_sum += x.abs();
        sq_sum += x * x;
    }
    let first = samples[0];
    if samples.iter().all(|&x| x == first) || nl == 0 || nr == 0 {
        return Err(Error::Degenerate("samples lack spread on both sides of zero".into()));
    }
    let n = samples.len() as f64;
    let sigma_l = (sl / nl as f64).sqrt();
    let sigma_r = (sr / nr as f64).sqrt();
    let gamma_hat = sigma_l / sigma_r;
    let r_hat = (abs_sum / n).powi(2) / (sq_sum / n);
    let big_r = r_hat * (gamma_hat.powi(3) + 1.0) * (gamma_hat + 1.0) / (gamma_hat * gamma_hat + 1.0).powi(2);
    let alpha = rho_table()
        .iter()
        .fold((f64::INFINITY, 0.2), |best, &(a, r)| {
            let e = (r - big_r).abs();
            if e < best.0 {
                (e, a)
            } else {
                best
            }
        })
        .1;
    let ratio = (ln_gamma(1.0 / alpha) - ln_gamma(3.0 / alpha)).exp().sqrt();
    let beta_l = sigma_l * ratio;
    let beta_r = sigma_r * ratio;
    let eta = (beta_r - beta_l) * (ln_gamma(2.0 / alpha) - ln_gamma(1.0 / alpha)).exp();
    Ok(AggdParams {
        alpha,
        beta_l,
        beta_r,
        eta,
    })
}

/// 2x box downsample of a single-channel image.
fn half_scale(img: &Image) -> Image {
    let (w, h) = (img.width() / 2, img.height() / 2);
    Image::from_fn(w, h, 1, |_, y, x| {
        0.25 * (img.get(0, 2 * y, 2 * x)
            + img.get(0, 2 * y, 2 * x + 1)
            + img.get(0, 2 * y + 1, 2 * x)
            + img.get(0, 2 * y + 1, 2 * x + 1))
    })
}

fn scale_features(y: &Image) -> Result<[f64; 18]> {
    let m = mscn(y)?;
    let (w, h) = (m.width(), m.height());
    let at = |yy: usize, xx: usize| m.get(0, yy, xx);
    let mut out = [0.0; 18];
    let base = fit_aggd(m.data())?;
    out[0] = base.alpha;
    out[1] = 0.5 * (base.beta_l.powi(2) + base.beta_r.powi(2));
    let shifts: [(isize, isize); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];
    for (i, (dy, dx)) in shifts.iter().enumerate() {
        let mut prods = Vec::with_capacity(w * h);
        for yy in 0..h {
            for xx in 0..w {
                let (y2, x2) = (yy as isize + dy, xx as isize + dx);
                if y2 < 0 || x2 < 0 || y2 >= h as isize || x2 >= w as isize {
                    continue;
                }
                prods.push(at(yy, xx) * at(y2 as usize, x2 as usize));
            }
        }
        let p = fit_aggd(&prods)?;
        out[2 + 4 * i..6 + 4 * i].copy_from_slice(&[p.alpha, p.eta, p.beta_l.powi(2), p.beta_r.powi(2)]);
    }
    Ok(out)
}

pub fn nss_patch_features(patch: &Patch) -> Result<Vec<f64>> {
    if patch.side() < NSS_MIN_SIDE {
        return Err(Error::TooSmall(format!(
            "NSS features need a {NSS_MIN_SIDE}-pixel patch, got {}",
            patch.side()
        )));
    }
    let y = patch.pixels.luma()?;
    let mut v = scale_features(&y)?.to_vec();
    v.extend(scale_features(&half_scale(&y))?);
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{apply_distortion, synthetic_scene, DistortionSpec};
    use crate::filter::{moment_kernel, reflect};
    use crate::rng::SeededRng;
    use rand_distr::{Distribution, Exp};

    #[test]
    fn constant_image_has_zero_mscn() {
        let m = mscn(&Image::filled(12, 12, 3, 0.6)).unwrap();
        assert!(m.data().iter().all(|v| v.abs() < 1e-9));
        assert!(mscn(&Image::filled(5, 12, 1, 0.6)).is_err());
    }

    #[test]
    fn mscn_matches_naive_loops() {
        let mut r = SeededRng::new(3);
        let img = Image::from_fn(9, 9, 1, |_, _, _| r.uniform());
        let k = moment_kernel();
        let m = mscn(&img).unwrap();
        for y in 0..9isize {
            for x in 0..9isize {
                let px = |dy: isize, dx: isize| img.get(0, reflect(y + dy, 9), reflect(x + dx, 9));
                let mut mu = 0.0;
                for dy in -3..=3 {
                    for dx in -3..=3 {
                        mu += k[(dy + 3) as usize] * k[(dx + 3) as usize] * px(dy, dx);
                    }
                }
                let mut var = 0.0;
                for dy in -3..=3 {
                    for dx in -3..=3 {
                        var += k[(dy + 3) as usize] * k[(dx + 3) as usize] * (px(dy, dx) - mu).powi(2);
                    }
                }
                let expect = (px(0, 0) - mu) / (var.sqrt() + MSCN_C);
                assert!((m.get(0, y as usize, x as usize) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mscn_is_near_zero_mean_and_shift_invariant() {
        let img = synthetic_scene(96, 96, &mut SeededRng::new(5));
        let m = mscn(&img).unwrap();
        assert!(m.mean().abs() < 0.05, "{}", m.mean());
        let y = img.luma().unwrap();
        let a = mscn(&y).unwrap();
        let b = mscn(&y.map(|v| v + 0.25)).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-9);
    }

    fn gaussian(n: usize, seed: u64) -> Vec<f64> {
        let mut r = SeededRng::new(seed);
        (0..n).map(|_| r.normal()).collect()
    }

    fn laplacian(n: usize, seed: u64) -> Vec<f64> {
        let mut r = SeededRng::new(seed);
        let e = Exp::new(1.0).unwrap();
        (0..n)
            .map(|_| {
                let v = e.sample(&mut r);
                if r.coin() {
                    v
                } else {
                    -v
                }
            })
            .collect()
    }

    #[test]
    fn gaussian_and_laplacian_shapes() {
        let g = fit_aggd(&gaussian(100_000, 1)).unwrap();
        assert!((1.8..=2.2).contains(&g.alpha), "{g:?}");
        assert!((g.beta_l - g.beta_r).abs() / g.beta_l < 0.1);
        let l = fit_aggd(&laplacian(100_000, 2)).unwrap();
        assert!((0.85..=1.15).contains(&l.alpha), "{l:?}");
    }

    #[test]
    fn degenerate_samples() {
        assert!(matches!(fit_aggd(&[0.5; 40]), Err(Error::Degenerate(_))));
        assert!(fit_aggd(&[1.0, -1.0]).is_err());
    }

    #[test]
    fn estimator_error_shrinks_with_samples() {
        let median_err = |n: usize| {
            let mut errs: Vec<f64> = (0..20)
                .map(|s| (fit_aggd(&gaussian(n, 100 + s)).unwrap().alpha - 2.0).abs())
                .collect();
            errs.sort_by(f64::total_cmp);
            0.5 * (errs[9] + errs[10])
        };
        assert!(median_err(100_000) < median_err(1_000));
    }

    #[test]
    fn patch_features_shape() {
        let img = synthetic_scene(48, 48, &mut SeededRng::new(6));
        let p = Patch::from_image(img.clone()).unwrap();
        let f = nss_patch_features(&p).unwrap();
        assert_eq!(f.len(), NSS_FEATURES);
        assert!(f.iter().all(|v| v.is_finite()));
        assert_eq!(nss_patch_features(&Patch::from_image(img).unwrap()).unwrap(), f);
        let small = Patch::from_image(Image::filled(16, 16, 3, 0.2)).unwrap();
        assert!(matches!(nss_patch_features(&small), Err(Error::TooSmall(_))));
    }

    /// Noise pulls the MSCN shape towards a Gaussian while blur leaves
    /// mostly smooth regions with a peaked coefficient density, so on the
    /// generated scenes the blurred fit has the smaller shape parameter.
    #[test]
    fn noise_and_blur_move_alpha_apart() {
        for seed in 0..4 {
            let mut r = SeededRng::new(seed);
            let img = synthetic_scene(64, 64, &mut r);
            for s in [0.4, 0.7, 1.0] {
                let noisy = apply_distortion(&img, &DistortionSpec::new("gaussian_noise", s), &mut r).unwrap();
                let blurred = apply_distortion(&img, &DistortionSpec::new("gaussian_blur", s), &mut r).unwrap();
                let a = |i: Image| nss_patch_features(&Patch::from_image(i).unwrap()).unwrap()[0];
                let (an, ab) = (a(noisy), a(blurred));
                assert!(an - ab > 0.2, "seed {seed} severity {s}: noisy {an} blurred {ab}");
            }
        }
    }
}
