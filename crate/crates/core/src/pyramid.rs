//! Laplacian pyramid analysis and synthesis.
//!
//! The low-pass filter is the separable binomial `[1, 4, 6, 4, 1] / 16`
//! with mirror borders. Downsampling keeps even-indexed samples, so a
//! dimension `n` becomes `ceil(n / 2)`. Upsampling inserts zeros up to the
//! recorded finer size and filters with twice the kernel per axis.
//!
//! `highpass[m - 1] = G(m-1) - up(G(m))` with `G(0) = img` and
//! `G(m) = down(blur(G(m-1)))`; `lowpass = G(M)`. Synthesis adds the bands
//! back in reverse order, so reconstruction is exact up to rounding.

use crate::error::{Error, Result};
use crate::filter::separable;
use crate::image::Image;

pub const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PyramidConfig {
    pub levels: usize,
}

impl PyramidConfig {
    pub fn new(levels: usize) -> Self {
        Self { levels }
    }

    pub fn check(&self, width: usize, height: usize) -> Result<()> {
        let need = 1usize
            .checked_shl(self.levels as u32)
            .ok_or_else(|| Error::InvalidParameter(format!("{} levels", self.levels)))?;
        if width.min(height) < need {
            return Err(Error::TooSmall(format!(
                "{width}x{height} image cannot hold {} pyramid levels (needs {need})",
                self.levels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    /// Band-pass images, finest first.
    pub highpass: Vec<Image>,
    pub lowpass: Image,
}

/// A pyramid level a feature network is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Level {
    /// The image itself.
    Image,
    /// Band-pass level `m`, 1-based; level 1 is full resolution.
    HighPass(usize),
    /// Residual of an `M`-level decomposition.
    LowPass(usize),
}

impl Level {
    /// `[image, hp1 .. hpM, lowpass]`; just `[image]` when `M = 0`.
    pub fn all(m: usize) -> Vec<Level> {
        let mut v = vec![Level::Image];
        if m > 0 {
            v.extend((1..=m).map(Level::HighPass));
            v.push(Level::LowPass(m));
        }
        v
    }

    /// Downscale factor relative to the input image.
    pub fn scale(&self) -> usize {
        match *self {
            Level::Image => 1,
            Level::HighPass(m) => 1 << (m - 1),
            Level::LowPass(m) => 1 << m,
        }
    }

    /// Pyramid depth this level requires.
    pub fn depth(&self) -> usize {
        match *self {
            Level::Image => 0,
            Level::HighPass(m) | Level::LowPass(m) => m,
        }
    }

    pub fn is_highpass(&self) -> bool {
        matches!(self, Level::HighPass(_))
    }

    pub fn name(&self) -> String {
        match *self {
            Level::Image => "image".into(),
            Level::HighPass(m) => format!("hp{m}"),
            Level::LowPass(m) => format!("lp{m}"),
        }
    }

    pub fn parse(s: &str) -> Result<Level> {
        let bad = || Error::Parse(format!("unknown level '{s}'"));
        if s == "image" {
            return Ok(Level::Image);
        }
        let num = |p: &str| p.parse::<usize>().map_err(|_| bad());
        if let Some(rest) = s.strip_prefix("hp") {
            let m = num(rest)?;
            if m == 0 {
                return Err(bad());
            }
            return Ok(Level::HighPass(m));
        }
        if let Some(rest) = s.strip_prefix("lp") {
            let m = num(rest)?;
            if m == 0 {
                return Err(bad());
            }
            return Ok(Level::LowPass(m));
        }
        Err(bad())
    }

    /// Compact numeric id used in weight files.
    pub fn id(&self) -> u32 {
        match *self {
            Level::Image => 0,
            Level::HighPass(m) => m as u32,
            Level::LowPass(m) => 0x8000_0000 | m as u32,
        }
    }

    pub fn from_id(id: u32) -> Result<Level> {
        match id {
            0 => Ok(Level::Image),
            i if i & 0x8000_0000 != 0 && i & 0x7FFF_FFFF > 0 => {
                Ok(Level::LowPass((i & 0x7FFF_FFFF) as usize))
            }
            i if i & 0x8000_0000 == 0 => Ok(Level::HighPass(i as usize)),
            i => Err(Error::Parse(format!("invalid level id {i:#x}"))),
        }
    }

    /// Band of `img` at this level.
    pub fn select(&self, img: &Image) -> Result<Image> {
        match *self {
            Level::Image => Ok(img.clone()),
            _ => {
                let pyr = decompose(img, PyramidConfig::new(self.depth()))?;
                Ok(self.select_from(img, &pyr))
            }
        }
    }

    /// Band at this level from an already computed decomposition of `img`.
    /// The pyramid must be at least as deep as the level.
    pub fn select_from(&self, img: &Image, pyr: &Pyramid) -> Image {
        match *self {
            Level::Image => img.clone(),
            Level::HighPass(m) => pyr.highpass[m - 1].clone(),
            Level::LowPass(_) => pyr.lowpass.clone(),
        }
    }
}

fn half(n: usize) -> usize {
    n.div_ceil(2)
}

fn map_planes(img: &Image, f: impl Fn(&[f64], usize, usize) -> (Vec<f64>, usize, usize)) -> Image {
    let mut data = Vec::new();
    let (mut w, mut h) = (0, 0);
    for c in 0..img.channels() {
        let (p, pw, ph) = f(img.plane(c), img.width(), img.height());
        data.extend(p);
        w = pw;
        h = ph;
    }
    Image::new(w, h, img.channels(), data).expect("plane sizes agree")
}

/// Binomial blur followed by decimation to `ceil(n / 2)`.
pub fn blur_downsample(img: &Image) -> Image {
    map_planes(img, |p, w, h| {
        let blurred = separable(p, w, h, &BINOMIAL5);
        let (nw, nh) = (half(w), half(h));
        let mut out = Vec::with_capacity(nw * nh);
        for y in 0..nh {
            for x in 0..nw {
                out.push(blurred[2 * y * w + 2 * x]);
            }
        }
        (out, nw, nh)
    })
}

/// Zero insertion to `width x height`, then filtering with twice the kernel.
pub fn upsample(img: &Image, width: usize, height: usize) -> Image {
    let kernel: Vec<f64> = BINOMIAL5.iter().map(|k| 2.0 * k).collect();
    map_planes(img, |p, w, _h| {
        let mut up = vec![0.0; width * height];
        for y in (0..height).step_by(2) {
            for x in (0..width).step_by(2) {
                up[y * width + x] = p[(y / 2) * w + x / 2];
            }
        }
        (separable(&up, width, height, &kernel), width, height)
    })
}

pub fn decompose(img: &Image, cfg: PyramidConfig) -> Result<Pyramid> {
    cfg.check(img.width(), img.height())?;
    let mut highpass = Vec::with_capacity(cfg.levels);
    let mut current = img.clone();
    for _ in 0..cfg.levels {
        let coarse = blur_downsample(&current);
        let predicted = upsample(&coarse, current.width(), current.height());
        highpass.push(current.zip_map(&predicted, |a, b| a - b)?);
        current = coarse;
    }
    Ok(Pyramid {
        highpass,
        lowpass: current,
    })
}

pub fn reconstruct(pyr: &Pyramid) -> Result<Image> {
    for pair in pyr.highpass.windows(2) {
        if pair[1].width() != half(pair[0].width()) || pair[1].height() != half(pair[0].height()) {
            return Err(Error::DimensionMismatch(
                "high-pass bands are not successive halvings".into(),
            ));
        }
    }
    if let Some(last) = pyr.highpass.last() {
        if pyr.lowpass.width() != half(last.width()) || pyr.lowpass.height() != half(last.height())
        {
            return Err(Error::DimensionMismatch(
                "low-pass band does not match the coarsest high-pass band".into(),
            ));
        }
    }
    let mut current = pyr.lowpass.clone();
    for band in pyr.highpass.iter().rev() {
        if band.channels() != current.channels() {
            return Err(Error::DimensionMismatch("channel count differs".into()));
        }
        let up = upsample(&current, band.width(), band.height());
        current = up.zip_map(band, |a, b| a + b)?;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::reflect;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn random(w: usize, h: usize, c: usize, seed: u64) -> Image {
        let mut r = SeededRng::new(seed);
        Image::from_fn(w, h, c, |_, _, _| r.uniform())
    }

    /// Direct 2-D correlation with the outer-product kernel, no separability.
    fn direct_blur(p: &[f64], w: usize, h: usize, scale: f64) -> Vec<f64> {
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for j in 0..5 {
                    for i in 0..5 {
                        let yy = reflect(y as isize + j as isize - 2, h);
                        let xx = reflect(x as isize + i as isize - 2, w);
                        acc += scale * BINOMIAL5[j] * BINOMIAL5[i] * p[yy * w + xx];
                    }
                }
                out[y * w + x] = acc;
            }
        }
        out
    }

    #[test]
    fn constant_image_has_zero_bands() {
        let img = Image::filled(16, 12, 3, 0.37);
        let pyr = decompose(&img, PyramidConfig::new(2)).unwrap();
        assert_eq!(pyr.highpass.len(), 2);
        for band in &pyr.highpass {
            assert!(band.data().iter().all(|v| v.abs() < 1e-12));
        }
        assert!(pyr.lowpass.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
        assert_eq!((pyr.lowpass.width(), pyr.lowpass.height()), (4, 3));
    }

    #[test]
    fn zero_levels_is_identity() {
        let img = random(5, 7, 3, 1);
        let pyr = decompose(&img, PyramidConfig::new(0)).unwrap();
        assert!(pyr.highpass.is_empty());
        assert_eq!(pyr.lowpass, img);
        assert_eq!(reconstruct(&pyr).unwrap(), img);
    }

    #[test]
    fn impulse_matches_direct_convolution() {
        let mut p = vec![0.0; 16];
        p[0] = 1.0;
        let img = Image::new(4, 4, 1, p.clone()).unwrap();
        let pyr = decompose(&img, PyramidConfig::new(1)).unwrap();

        let blurred = direct_blur(&p, 4, 4, 1.0);
        let coarse: Vec<f64> = [(0, 0), (0, 2), (2, 0), (2, 2)]
            .iter()
            .map(|&(y, x)| blurred[y * 4 + x])
            .collect();
        let mut zi = vec![0.0; 16];
        for (k, &(y, x)) in [(0, 0), (0, 2), (2, 0), (2, 2)].iter().enumerate() {
            zi[y * 4 + x] = coarse[k];
        }
        let predicted = direct_blur(&zi, 4, 4, 4.0);
        let band: Vec<f64> = p.iter().zip(&predicted).map(|(a, b)| a - b).collect();

        assert!(pyr
            .lowpass
            .data()
            .iter()
            .zip(&coarse)
            .all(|(a, b)| (a - b).abs() < 1e-14));
        assert!(pyr.highpass[0]
            .data()
            .iter()
            .zip(&band)
            .all(|(a, b)| (a - b).abs() < 1e-14));
        // Hand value: reflected impulse at the corner gets 6/16 on each axis.
        assert!((pyr.lowpass.get(0, 0, 0) - 36.0 / 256.0).abs() < 1e-15);
    }

    #[test]
    fn random_round_trip() {
        let img = random(64, 64, 3, 9);
        let pyr = decompose(&img, PyramidConfig::new(3)).unwrap();
        let back = reconstruct(&pyr).unwrap();
        assert!(back.max_abs_diff(&img).unwrap() < 1e-6);
    }

    #[test]
    fn zero_bands_give_zero_image() {
        let img = random(20, 18, 3, 2);
        let mut pyr = decompose(&img, PyramidConfig::new(2)).unwrap();
        for b in pyr.highpass.iter_mut() {
            *b = b.map(|_| 0.0);
        }
        pyr.lowpass = pyr.lowpass.map(|_| 0.0);
        assert!(reconstruct(&pyr).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lowpass_only_equals_upsample_chain() {
        let img = random(23, 17, 1, 4);
        let mut pyr = decompose(&img, PyramidConfig::new(2)).unwrap();
        for b in pyr.highpass.iter_mut() {
            *b = b.map(|_| 0.0);
        }
        let g1 = blur_downsample(&img);
        let g2 = blur_downsample(&g1);
        let chain = upsample(&upsample(&g2, g1.width(), g1.height()), 23, 17);
        let rec = reconstruct(&pyr).unwrap();
        assert!(rec.max_abs_diff(&chain).unwrap() < 1e-14);
    }

    #[test]
    fn odd_sizes_and_errors() {
        let img = random(9, 5, 3, 3);
        let pyr = decompose(&img, PyramidConfig::new(2)).unwrap();
        assert_eq!((pyr.highpass[1].width(), pyr.highpass[1].height()), (5, 3));
        assert_eq!((pyr.lowpass.width(), pyr.lowpass.height()), (3, 2));
        assert!(matches!(
            decompose(&img, PyramidConfig::new(3)),
            Err(Error::TooSmall(_))
        ));
        let mut bad = pyr.clone();
        bad.lowpass = Image::zeros(4, 4, 3);
        assert!(matches!(reconstruct(&bad), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn level_ids_round_trip() {
        for l in Level::all(3) {
            assert_eq!(Level::from_id(l.id()).unwrap(), l);
            assert_eq!(Level::parse(&l.name()).unwrap(), l);
        }
        assert_eq!(Level::all(0), vec![Level::Image]);
        assert_eq!(Level::all(2).len(), 4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn perfect_reconstruction(w in 8usize..40, h in 8usize..40, levels in 0usize..4, seed in any::<u64>()) {
            let img = random(w, h, 2, seed);
            let pyr = decompose(&img, PyramidConfig::new(levels)).unwrap();
            prop_assert!(reconstruct(&pyr).unwrap().max_abs_diff(&img).unwrap() < 1e-6);
        }

        #[test]
        fn constant_shift_only_moves_lowpass(seed in any::<u64>(), c in -1.0f64..1.0) {
            let img = random(16, 16, 1, seed);
            let shifted = img.map(|v| v + c);
            let a = decompose(&img, PyramidConfig::new(2)).unwrap();
            let b = decompose(&shifted, PyramidConfig::new(2)).unwrap();
            for (x, y) in a.highpass.iter().zip(&b.highpass) {
                prop_assert!(x.max_abs_diff(y).unwrap() < 1e-12);
            }
            let d = b.lowpass.zip_map(&a.lowpass, |p, q| p - q).unwrap();
            prop_assert!(d.data().iter().all(|v| (v - c).abs() < 1e-12));
        }

        #[test]
        fn linearity(s1 in any::<u64>(), s2 in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let x = random(12, 10, 1, s1);
            let y = random(12, 10, 1, s2);
            let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
            let px = decompose(&x, PyramidConfig::new(2)).unwrap();
            let py = decompose(&y, PyramidConfig::new(2)).unwrap();
            let pm = decompose(&mix, PyramidConfig::new(2)).unwrap();
            let bands = |p: &Pyramid| {
                let mut v = p.highpass.clone();
                v.push(p.lowpass.clone());
                v
            };
            for ((bx, by), bm) in bands(&px).iter().zip(bands(&py)).zip(bands(&pm)) {
                let expect = bx.zip_map(&by, |p, q| a * p + b * q).unwrap();
                prop_assert!(bm.max_abs_diff(&expect).unwrap() < 1e-12);
            }
        }
    }
}
