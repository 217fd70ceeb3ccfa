//! Planar real-valued rasters, patches and scene sets.

use crate::error::{Error, Result};

/// Rec.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Planar raster. Channel `c`, row `y`, column `x` lives at
/// `data[(c * height + y) * width + x]`.
///
/// RGB images hold values in `[0, 1]`; pyramid bands reuse the type and may
/// be negative.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "buffer of {} values for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    /// Stacks single-channel planes.
    pub fn from_planes(planes: &[Image]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::InvalidParameter("no planes".into()))?;
        let (w, h) = (first.width, first.height);
        let mut data = Vec::with_capacity(w * h * planes.len());
        for p in planes {
            if p.width != w || p.height != h || p.channels != 1 {
                return Err(Error::DimensionMismatch("planes differ in shape".into()));
            }
            data.extend_from_slice(&p.data);
        }
        Image::new(w, h, planes.len(), data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
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

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
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
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_image(&self, c: usize) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.plane(c).to_vec(),
        }
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn clamp01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Image> {
        if !self.same_shape(other) {
            return Err(Error::DimensionMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )));
        }
        Ok(Image {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..self.clone()
        })
    }

    pub fn max_abs_diff(&self, other: &Image) -> Result<f64> {
        let d = self.zip_map(other, |a, b| (a - b).abs())?;
        Ok(d.data.iter().cloned().fold(0.0, f64::max))
    }

    /// Rec.601 luma for RGB input; single-channel input is returned as is.
    pub fn luma(&self) -> Result<Image> {
        match self.channels {
            1 => Ok(self.clone()),
            3 => {
                let n = self.width * self.height;
                let data = (0..n)
                    .map(|i| {
                        LUMA_WEIGHTS[0] * self.data[i]
                            + LUMA_WEIGHTS[1] * self.data[n + i]
                            + LUMA_WEIGHTS[2] * self.data[2 * n + i]
                    })
                    .collect();
                Image::new(self.width, self.height, 1, data)
            }
            c => Err(Error::InvalidParameter(format!(
                "cannot take luma of a {c}-channel image"
            ))),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn mean_luma(&self) -> Result<f64> {
        Ok(self.luma()?.mean())
    }

    /// Replicates a single-channel image to three channels.
    pub fn to_rgb(&self) -> Result<Image> {
        match self.channels {
            3 => Ok(self.clone()),
            1 => {
                let mut data = Vec::with_capacity(self.data.len() * 3);
                for _ in 0..3 {
                    data.extend_from_slice(&self.data);
                }
                Image::new(self.width, self.height, 3, data)
            }
            c => Err(Error::InvalidParameter(format!(
                "cannot expand a {c}-channel image to RGB"
            ))),
        }
    }

    pub fn crop(&self, rect: Rect) -> Result<Image> {
        rect.check_inside(self.width, self.height)?;
        let Rect { x, y, side } = rect;
        let mut data = Vec::with_capacity(side * side * self.channels);
        for c in 0..self.channels {
            for yy in y..y + side {
                let start = (c * self.height + yy) * self.width + x;
                data.extend_from_slice(&self.data[start..start + side]);
            }
        }
        Image::new(side, side, self.channels, data)
    }

    /// Bilinear resampling with half-pixel centres and edge clamping.
    pub fn resize_bilinear(&self, new_width: usize, new_height: usize) -> Result<Image> {
        if new_width == 0 || new_height == 0 {
            return Err(Error::InvalidParameter("zero target size".into()));
        }
        if new_width == self.width && new_height == self.height {
            return Ok(self.clone());
        }
        let sx = self.width as f64 / new_width as f64;
        let sy = self.height as f64 / new_height as f64;
        let taps = |scale: f64, n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
            (0..n_out)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                    let i0 = src.floor() as usize;
                    let i1 = (i0 + 1).min(n_in - 1);
                    (i0, i1, src - i0 as f64)
                })
                .collect()
        };
        let xt = taps(sx, new_width, self.width);
        let yt = taps(sy, new_height, self.height);
        Ok(Image::from_fn(new_width, new_height, self.channels, |c, y, x| {
            let (y0, y1, fy) = yt[y];
            let (x0, x1, fx) = xt[x];
            let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
            let bot = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
            top * (1.0 - fy) + bot * fy
        }))
    }
}

/// Axis-aligned square in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub side: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, side: usize) -> Self {
        Self { x, y, side }
    }

    pub fn check_inside(&self, width: usize, height: usize) -> Result<()> {
        if self.side == 0 || self.x + self.side > width || self.y + self.side > height {
            return Err(Error::OutOfBounds {
                x: self.x,
                y: self.y,
                side: self.side,
                width,
                height,
            });
        }
        Ok(())
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x < other.x + other.side
            && other.x < self.x + self.side
            && self.y < other.y + other.side
            && other.y < self.y + self.side
    }
}

/// A square crop together with where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub rect: Rect,
    pub pixels: Image,
}

impl Patch {
    /// Wraps a square image as a patch located at the origin.
    pub fn from_image(pixels: Image) -> Result<Self> {
        if pixels.width() != pixels.height() {
            return Err(Error::DimensionMismatch("patch must be square".into()));
        }
        Ok(Self {
            rect: Rect::new(0, 0, pixels.width()),
            pixels,
        })
    }

    pub fn side(&self) -> usize {
        self.rect.side
    }
}

pub fn crop_patch(img: &Image, x: usize, y: usize, side: usize) -> Result<Patch> {
    let rect = Rect::new(x, y, side);
    Ok(Patch {
        rect,
        pixels: img.crop(rect)?,
    })
}

/// One scene: an identifier and its distorted versions.
#[derive(Debug, Clone)]
pub struct Scene {
    pub id: String,
    pub versions: Vec<Image>,
}

#[derive(Debug, Clone, Default)]
pub struct SceneSet {
    pub scenes: Vec<Scene>,
}

impl SceneSet {
    pub fn new(scenes: Vec<Scene>) -> Result<Self> {
        for s in &scenes {
            let first = s
                .versions
                .first()
                .ok_or_else(|| Error::InvalidParameter(format!("scene {} has no versions", s.id)))?;
            if s.versions.iter().any(|v| !v.same_shape(first)) {
                return Err(Error::DimensionMismatch(format!(
                    "versions of scene {} differ in size",
                    s.id
                )));
            }
        }
        Ok(Self { scenes })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Smallest version count over scenes.
    pub fn versions_per_scene(&self) -> usize {
        self.scenes.iter().map(|s| s.versions.len()).min().unwrap_or(0)
    }
}
