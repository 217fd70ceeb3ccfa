//! Distortion kernels, registered by name.
//!
//! Each kernel maps a severity in `[0, 1]` to a physical parameter. A spec
//! may instead pin that parameter directly through `param`; it must then
//! lie in the kernel's documented range.
//!
//! | kind                 | parameter               | range        |
//! |----------------------|-------------------------|--------------|
//! | `gamma_under`        | exponent `1 + 2.5 s`    | `[1, 3.5]`   |
//! | `gamma_over`         | exponent `1 - 0.7 s`    | `[0.3, 1]`   |
//! | `gaussian_noise`     | sigma `0.12 s`          | `[0, 0.12]`  |
//! | `poisson_like_noise` | sigma `0.12 s` at 1.0   | `[0, 0.12]`  |
//! | `gaussian_blur`      | sigma `4 s` px          | `[0, 4]`     |
//! | `color_cast`         | gain `1 + 0.5 s`        | `[1, 1.5]`   |
//! | `desaturate`         | blend `s`               | `[0, 1]`     |
//! | `hist_equalize`      | none                    |              |
//! | `clahe_like`         | clip `0.01 (1 + 4 s)`   | `[0.01, 0.05]` |
//!
//! `gamma_over` also applies a gain `1 + 0.8 (1 - e) / 0.7` (at most 1.8)
//! for exponent `e`.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{gaussian_kernel, separable};
use crate::image::{Image, LUMA_WEIGHTS};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: String,
    pub severity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param: Option<f64>,
    /// Target channel for `color_cast` (0 = R, 1 = G, 2 = B).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel: Option<usize>,
}

impl DistortionSpec {
    pub fn new(kind: &str, severity: f64) -> Self {
        Self {
            kind: kind.to_string(),
            severity,
            param: None,
            channel: None,
        }
    }

    pub fn with_param(kind: &str, param: f64) -> Self {
        Self {
            param: Some(param),
            ..Self::new(kind, 0.0)
        }
    }

    pub fn with_channel(mut self, channel: usize) -> Self {
        self.channel = Some(channel);
        self
    }
}

pub trait Distortion: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether severity maps continuously onto a parameter with severity 0
    /// the identity.
    fn parametric(&self) -> bool {
        true
    }

    /// Range of the physical parameter; `None` for severity-free kernels.
    fn param_range(&self) -> Option<(f64, f64)>;

    fn param_for(&self, severity: f64) -> f64;

    fn apply_param(&self, img: &Image, param: f64, spec: &DistortionSpec, rng: &mut SeededRng)
        -> Result<Image>;

    /// Resolves and validates the parameter a spec asks for.
    fn resolve(&self, spec: &DistortionSpec) -> Result<f64> {
        if !(0.0..=1.0).contains(&spec.severity) {
            return Err(Error::InvalidParameter(format!(
                "{}: severity {} outside [0, 1]",
                self.name(),
                spec.severity
            )));
        }
        let p = spec.param.unwrap_or_else(|| self.param_for(spec.severity));
        if let Some((lo, hi)) = self.param_range() {
            if !(lo..=hi).contains(&p) {
                return Err(Error::InvalidParameter(format!(
                    "{}: parameter {p} outside [{lo}, {hi}]",
                    self.name()
                )));
            }
        }
        Ok(p)
    }

    fn apply(&self, img: &Image, spec: &DistortionSpec, rng: &mut SeededRng) -> Result<Image> {
        if img.channels() != 3 {
            return Err(Error::InvalidParameter(format!(
                "{} expects an RGB image",
                self.name()
            )));
        }
        let p = self.resolve(spec)?;
        Ok(self.apply_param(img, p, spec, rng)?.clamp01())
    }
}

struct GammaUnder;

impl Distortion for GammaUnder {
    fn name(&self) -> &'static str {
        "gamma_under"
    }
    fn param_range(&self) -> Option<(f64, f64)> {
        Some((1.0, 3.5))
    }
    fn param_for(&self, s: f64) -> f64 {
        1.0 + 2.5 * s
    }
    fn apply_param(&self, img: &Image, e: f64, _: &DistortionSpec, _: &mut SeededRng) -> Result<Image> {
        Ok(img.map(|v| v.max(0.0).powf(e)))
    }
}

struct GammaOver;

impl Distortion for GammaOver {
    fn name(&self) -> &'static str {
        "gamma_over"
    }
    fn param_range(&self) -> Option<(f64, f64)> {
        Some((0.3, 1.0))
    }
    fn param_for(&self, s: f64) -> f64 {
        1.0 - 0.7 * s
    }
    fn apply_param(&self, img: &Image, e: f64, _: &DistortionSpec, _: &mut SeededRng) -> Result<Image> {
        let gain = 1.0 + 0.8 * (1.0 - e) / 0.7;
        Ok(img.map(|v| gain * v.max(0.0).powf(e)))
    }
}

struct GaussianNoise;

impl Distortion for GaussianNoise {
    fn name(&self) -> &'static str {
        "gaussian_noise"
    }
    fn param_range(&self) -> Option<(f64, f64)> {
        Some((0.0, 0.12))
    }
    fn param_for(&self, s: f64) -> f64 {
        0.12 * s
    }
    fn apply_param(&self, img: &Image, sigma: f64, _: &DistortionSpec, rng: &mut SeededRng) -> Result<Image> {
        if sigma == 0.0 {
            return Ok(img.clone());
        }
        Ok(img.map(|v| v + sigma * rng.normal()))
    }
}

/// Signal-dependent noise: standard deviation `sigma * sqrt(v)`.
struct PoissonLikeNoise;

impl Distortion for PoissonLikeNoise {
    fn name(&self) -> &'static str {
        "poisson_like_noise"
    }
    fn param_range(&self) -> Option<(f64, f64)> {
        Some((0.0, 0.12))
    }
    fn param_for(&self, s: f64) -> f64 {
        0.12 * s
    }
    fn apply_param(&self, img: &Image, sigma: f64, _: &DistortionSpec, rng: &mut SeededRng) -> Result<Image> {
        if sigma == 0.0 {
            return Ok(img.clone());
        }
        Ok(img.map(|v| v + sigma * v.max(0.0).sqrt() * rng.normal()))
    }
}

struct GaussianBlur;

pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let kernel = gaussian_kernel(2 * radius + 1, sigma);
    let planes: Vec<Image> = (0..img.channels())
        .map(|c| {
            let p = separable(img.plane(c), img.width(), img.height(), &kernel);
            Image::new(img.width(), img.height(), 1, p).expect("plane shape")
        })
        .collect();
    Image::from_planes(&planes).expect("plane shapes agree")
}

impl Distortion for GaussianBlur {
    fn name(&self) -> &'static str {
        "gaussian_blur"
    }
    fn param_range(&self) -> Option<(f64, f64)> {
        Some((0.0, 4.0))
    }
    fn param_for(&self, s: f64) -> f64 {
        4.0 * s
    }
    fn apply_param(&self, img: &Image, sigma: f64, _: &DistortionSpec, _: &mut SeededRng) -> Result<Image> {
        Ok(gaussian_blur(img, sigma))
    }
}

struct ColorCast;

impl Distortion for ColorCast {
    fn name(&self) -> &'static str {
        "color_cast"
    }
    fn param_range(&self) -> Option<(f64, f64)> {
        Some((1.0, 1.5))
    }
    fn param_for(&self, s: f64) -> f64 {
        1.0 + 0.5 * s
    }
    fn apply_param(&self, img: &Image, gain: f64, spec: &DistortionSpec, _: &mut SeededRng) -> Result<Image> {
        let channel = spec.channel.unwrap_or(0);
        if channel > 2 {
            return Err(Error::InvalidParameter(format!(
                "color_cast channel {channel} not in 0..=2"
            )));
        }
        let mut out = img.clone();
        let n = img.width() * img.height();
        for v in &mut out.data_mut()[channel * n..(channel + 1) * n] {
            *v *= gain;
        }
        Ok(out)
    }
}

struct Desaturate;

impl Distortion for Desaturate {
    fn name(&self) -> &'static str {
        "desaturate"
    }
    fn param_range(&self) -> Option<(f64, f64)> {
        Some((0.0, 1.0))
    }
    fn param_for(&self, s: f64) -> f64 {
        s
    }
    fn apply_param(&self, img: &Image, amount: f64, _: &DistortionSpec, _: &mut SeededRng) -> Result<Image> {
        let luma = img.luma()?;
        let l = luma.data();
        let n = l.len();
        let mut out = img.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (1.0 - amount) * *v + amount * l[i % n];
        }
        Ok(out)
    }
}

const BINS: usize = 256;

fn bin_of(v: f64) -> usize {
    ((v.clamp(0.0, 1.0) * (BINS - 1) as f64).round()) as usize
}

/// Normalised CDF lookup for a histogram; maps bin -> output level.
fn equalize_lut(hist: &[f64]) -> Vec<f64> {
    let total: f64 = hist.iter().sum();
    let mut cdf = Vec::with_capacity(BINS);
    let mut acc = 0.0;
    for &h in hist {
        acc += h;
        cdf.push(acc / total);
    }
    let first = cdf.iter().cloned().find(|&c| c > 0.0).unwrap_or(0.0);
    if first >= 1.0 {
        return (0..BINS).map(|b| b as f64 / (BINS - 1) as f64).collect();
    }
    cdf.iter()
        .map(|&c| ((c - first) / (1.0 - first)).clamp(0.0, 1.0))
        .collect()
}

/// Per-channel global histogram equalisation. Severity-free.
struct HistEqualize;

impl Distortion for HistEqualize {
    fn name(&self) -> &'static str {
        "hist_equalize"
    }
    fn parametric(&self) -> bool {
        false
    }
    fn param_range(&self) -> Option<(f64, f64)> {
        None
    }
    fn param_for(&self, _: f64) -> f64 {
        0.0
    }
    fn apply_param(&self, img: &Image, _: f64, _: &DistortionSpec, _: &mut SeededRng) -> Result<Image> {
        let mut out = img.clone();
        let n = img.width() * img.height();
        for c in 0..img.channels() {
            let plane = &mut out.data_mut()[c * n..(c + 1) * n];
            let mut hist = vec![0.0; BINS];
            for &v in plane.iter() {
                hist[bin_of(v)] += 1.0;
            }
            let lut = equalize_lut(&hist);
            for v in plane.iter_mut() {
                *v = lut[bin_of(*v)];
            }
        }
        Ok(out)
    }
}

/// Contrast-limited equalisation on a 4x4 tile grid, per channel, with
/// bilinear blending of the tile mappings. Severity scales the clip limit
/// (fraction of tile pixels allowed per bin).
struct ClaheLike;

const CLAHE_TILES: usize = 4;

impl Distortion for ClaheLike {
    fn name(&self) -> &'static str {
        "clahe_like"
    }
    fn parametric(&self) -> bool {
        false
    }
    fn param_range(&self) -> Option<(f64, f64)> {
        Some((0.01, 0.05))
    }
    fn param_for(&self, s: f64) -> f64 {
        0.01 * (1.0 + 4.0 * s)
    }
    fn apply_param(&self, img: &Image, clip: f64, _: &DistortionSpec, _: &mut SeededRng) -> Result<Image> {
        let (w, h) = (img.width(), img.height());
        let tw = w.div_ceil(CLAHE_TILES);
        let th = h.div_ceil(CLAHE_TILES);
        let tiles_x = w.div_ceil(tw);
        let tiles_y = h.div_ceil(th);
        let mut out = img.clone();
        for c in 0..img.channels() {
            let plane = img.plane(c);
            let mut luts = Vec::with_capacity(tiles_x * tiles_y);
            for ty in 0..tiles_y {
                for tx in 0..tiles_x {
                    let mut hist = vec![0.0; BINS];
                    let mut count = 0.0;
                    for y in ty * th..((ty + 1) * th).min(h) {
                        for x in tx * tw..((tx + 1) * tw).min(w) {
                            hist[bin_of(plane[y * w + x])] += 1.0;
                            count += 1.0;
                        }
                    }
                    let limit = (clip * count).max(1.0);
                    let mut excess = 0.0;
                    for b in hist.iter_mut() {
                        if *b > limit {
                            excess += *b - limit;
                            *b = limit;
                        }
                    }
                    for b in hist.iter_mut() {
                        *b += excess / BINS as f64;
                    }
                    luts.push(equalize_lut(&hist));
                }
            }
            let centre = |t: usize, size: usize, n: usize| {
                let start = t * size;
                let end = ((t + 1) * size).min(n);
                (start + end) as f64 / 2.0 - 0.5
            };
            let locate = |p: usize, size: usize, tiles: usize, n: usize| -> (usize, usize, f64) {
                let pf = p as f64;
                if pf <= centre(0, size, n) {
                    return (0, 0, 0.0);
                }
                if pf >= centre(tiles - 1, size, n) {
                    return (tiles - 1, tiles - 1, 0.0);
                }
                let mut t = 0;
                while t + 1 < tiles && centre(t + 1, size, n) < pf {
                    t += 1;
                }
                let (c0, c1) = (centre(t, size, n), centre(t + 1, size, n));
                (t, t + 1, (pf - c0) / (c1 - c0))
            };
            for y in 0..h {
                let (y0, y1, fy) = locate(y, th, tiles_y, h);
                for x in 0..w {
                    let (x0, x1, fx) = locate(x, tw, tiles_x, w);
                    let b = bin_of(plane[y * w + x]);
                    let m = |ty: usize, tx: usize| luts[ty * tiles_x + tx][b];
                    let top = m(y0, x0) * (1.0 - fx) + m(y0, x1) * fx;
                    let bot = m(y1, x0) * (1.0 - fx) + m(y1, x1) * fx;
                    out.set(c, y, x, top * (1.0 - fy) + bot * fy);
                }
            }
        }
        Ok(out)
    }
}

/// Name-keyed table of distortion kernels.
#[derive(Clone)]
pub struct DistortionRegistry {
    kernels: BTreeMap<&'static str, Arc<dyn Distortion>>,
}

impl DistortionRegistry {
    pub fn empty() -> Self {
        Self {
            kernels: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, kernel: Arc<dyn Distortion>) {
        self.kernels.insert(kernel.name(), kernel);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Distortion>> {
        self.kernels
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownName {
                registry: "distortion",
                name: name.to_string(),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.kernels.keys().copied().collect()
    }

    pub fn parametric_names(&self) -> Vec<&'static str> {
        self.kernels
            .values()
            .filter(|k| k.parametric())
            .map(|k| k.name())
            .collect()
    }

    /// The process-wide registry with every built-in kernel.
    pub fn builtin() -> &'static DistortionRegistry {
        static REG: OnceLock<DistortionRegistry> = OnceLock::new();
        REG.get_or_init(|| {
            let mut r = DistortionRegistry::empty();
            r.register(Arc::new(GammaUnder));
            r.register(Arc::new(GammaOver));
            r.register(Arc::new(GaussianNoise));
            r.register(Arc::new(PoissonLikeNoise));
            r.register(Arc::new(GaussianBlur));
            r.register(Arc::new(ColorCast));
            r.register(Arc::new(Desaturate));
            r.register(Arc::new(HistEqualize));
            r.register(Arc::new(ClaheLike));
            r
        })
    }
}

pub fn apply_distortion(img: &Image, spec: &DistortionSpec, rng: &mut SeededRng) -> Result<Image> {
    DistortionRegistry::builtin().get(&spec.kind)?.apply(img, spec, rng)
}

/// Mean over pixels of the largest minus the smallest channel mean.
pub fn channel_imbalance(img: &Image) -> f64 {
    let means: Vec<f64> = (0..img.channels())
        .map(|c| img.plane(c).iter().sum::<f64>() / img.plane(c).len() as f64)
        .collect();
    let max = means.iter().cloned().fold(f64::MIN, f64::max);
    let min = means.iter().cloned().fold(f64::MAX, f64::min);
    max - min
}

/// Mean absolute deviation of RGB from luma.
pub fn mean_chroma(img: &Image) -> f64 {
    let n = img.width() * img.height();
    let mut acc = 0.0;
    for i in 0..n {
        let rgb = [img.data()[i], img.data()[n + i], img.data()[2 * n + i]];
        let l: f64 = rgb.iter().zip(LUMA_WEIGHTS).map(|(v, w)| v * w).sum();
        acc += rgb.iter().map(|v| (v - l).abs()).sum::<f64>();
    }
    acc / (3 * n) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(seed: u64) -> Image {
        crate::corpus::synthetic_scene(48, 40, &mut SeededRng::new(seed))
    }

    #[test]
    fn unit_gamma_is_identity() {
        let img = test_image(1);
        let mut rng = SeededRng::new(0);
        for kind in ["gamma_under", "gamma_over"] {
            let out = apply_distortion(&img, &DistortionSpec::with_param(kind, 1.0), &mut rng).unwrap();
            assert_eq!(out, img);
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let img = test_image(2);
        let mut rng = SeededRng::new(0);
        let out = apply_distortion(&img, &DistortionSpec::with_param("gaussian_noise", 0.0), &mut rng)
            .unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn squaring_gamma() {
        let img = Image::filled(4, 4, 3, 0.25);
        let out = apply_distortion(
            &img,
            &DistortionSpec::with_param("gamma_under", 2.0),
            &mut SeededRng::new(0),
        )
        .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0625));
    }

    #[test]
    fn severity_zero_identity_for_every_parametric_kind() {
        let img = test_image(3);
        let reg = DistortionRegistry::builtin();
        for name in reg.parametric_names() {
            let out = apply_distortion(&img, &DistortionSpec::new(name, 0.0), &mut SeededRng::new(5))
                .unwrap();
            assert_eq!(out, img, "{name}");
        }
    }

    #[test]
    fn outputs_clamped_and_deterministic() {
        let img = test_image(4);
        for name in DistortionRegistry::builtin().names() {
            let spec = DistortionSpec::new(name, 1.0).with_channel(2);
            let a = apply_distortion(&img, &spec, &mut SeededRng::new(9)).unwrap();
            let b = apply_distortion(&img, &spec, &mut SeededRng::new(9)).unwrap();
            assert_eq!(a, b, "{name}");
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)), "{name}");
        }
    }

    #[test]
    fn bad_specs_rejected() {
        let img = test_image(5);
        let mut rng = SeededRng::new(0);
        assert!(matches!(
            apply_distortion(&img, &DistortionSpec::new("sepia", 0.5), &mut rng),
            Err(Error::UnknownName { .. })
        ));
        assert!(matches!(
            apply_distortion(&img, &DistortionSpec::with_param("gaussian_blur", 9.0), &mut rng),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            apply_distortion(&img, &DistortionSpec::new("desaturate", 1.5), &mut rng),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn equalisation_spreads_a_dark_image() {
        let img = test_image(6).map(|v| v * 0.2);
        let out = apply_distortion(&img, &DistortionSpec::new("hist_equalize", 1.0), &mut SeededRng::new(0))
            .unwrap();
        assert!(out.mean() > img.mean() * 2.0);
        let clahe = apply_distortion(&img, &DistortionSpec::new("clahe_like", 0.5), &mut SeededRng::new(0))
            .unwrap();
        assert!(clahe.mean() > img.mean());
    }
}
