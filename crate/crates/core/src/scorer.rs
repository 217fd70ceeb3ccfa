//! Patch features and the quality score of a test image.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

use crate::encoder::EncoderWeights;
use crate::error::{Error, Result};
use crate::image::{Image, Patch, Rect};
use crate::nss::nss_patch_features;
use crate::pristine::{fit_mvg, pca_project, MvgModel, PristineModel};
use crate::pyramid::{decompose, Level, Pyramid, PyramidConfig};
use crate::trainer::{encoder_band, fit_patch};

/// Turns image regions into feature vectors.
pub trait FeatureProvider: Send + Sync {
    fn name(&self) -> &'static str;

    /// Length of every vector returned by [`FeatureProvider::features`].
    fn dim(&self) -> usize;

    /// Vectors for the rectangles, in the order given. A provider may
    /// leave out rectangles its features are undefined on.
    fn features(&self, img: &Image, rects: &[Rect]) -> Result<Vec<Vec<f64>>>;
}

/// Encoders for `[image, hp1 .. hpM, lowpass]`, in that order.
#[derive(Debug, Clone)]
pub struct EncoderSet {
    levels: usize,
    encoders: Vec<EncoderWeights>,
}

impl EncoderSet {
    /// Arranges weights by level; they must cover exactly one level set.
    pub fn new(weights: Vec<EncoderWeights>) -> Result<Self> {
        let m = weights
            .iter()
            .filter_map(|w| match w.level {
                Level::LowPass(m) => Some(m),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        let mut encoders = Vec::new();
        for level in Level::all(m) {
            let found: Vec<&EncoderWeights> = weights.iter().filter(|w| w.level == level).collect();
            match found.len() {
                1 => encoders.push(found[0].clone()),
                0 => {
                    return Err(Error::InvalidParameter(format!("no encoder weights for level {}", level.name())))
                }
                _ => {
                    return Err(Error::InvalidParameter(format!(
                        "several encoder weights for level {}",
                        level.name()
                    )))
                }
            }
        }
        if encoders.len() != weights.len() {
            return Err(Error::InvalidParameter(format!(
                "encoder weights outside the {}-level set",
                m
            )));
        }
        let e = encoders[0].embedding_dim();
        if encoders.iter().any(|w| w.embedding_dim() != e) {
            return Err(Error::DimensionMismatch("encoders disagree on embedding size".into()));
        }
        Ok(Self { levels: m, encoders })
    }

    /// Pyramid depth `M`.
    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn encoders(&self) -> &[EncoderWeights] {
        &self.encoders
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoders[0].embedding_dim()
    }
}

/// Concatenated per-level embeddings of co-located crops.
pub struct MsqaleFeatures {
    set: EncoderSet,
}

impl MsqaleFeatures {
    pub fn new(set: EncoderSet) -> Self {
        Self { set }
    }
}

/// Crop at `level` covering `rect` of the full-resolution image.
fn colocated(rect: Rect, level: Level, band: &Image) -> Result<Patch> {
    let s = level.scale();
    let side = (rect.side / s).max(1).min(band.width()).min(band.height());
    let x = (rect.x / s).min(band.width() - side);
    let y = (rect.y / s).min(band.height() - side);
    let r = Rect::new(x, y, side);
    Ok(Patch {
        rect: r,
        pixels: band.crop(r)?,
    })
}

impl FeatureProvider for MsqaleFeatures {
    fn name(&self) -> &'static str {
        "msqale"
    }

    fn dim(&self) -> usize {
        self.set.embedding_dim() * self.set.encoders.len()
    }

    fn features(&self, img: &Image, rects: &[Rect]) -> Result<Vec<Vec<f64>>> {
        for r in rects {
            r.check_inside(img.width(), img.height())?;
        }
        let m = self.set.levels;
        let pyr = if m > 0 {
            decompose(img, PyramidConfig::new(m))?
        } else {
            Pyramid {
                highpass: Vec::new(),
                lowpass: img.clone(),
            }
        };
        let bands: Vec<Image> = Level::all(m)
            .into_iter()
            .map(|l| encoder_band(l, &l.select_from(img, &pyr)))
            .collect();
        rects
            .par_iter()
            .map(|&r| {
                let mut v = Vec::with_capacity(self.dim());
                for (w, band) in self.set.encoders.iter().zip(&bands) {
                    let p = colocated(r, w.level, band)?;
                    v.extend(w.encode_image(&fit_patch(&p, w.arch.input_side)?)?.0);
                }
                Ok(v)
            })
            .collect()
    }
}

pub struct NssFeatures;

impl FeatureProvider for NssFeatures {
    fn name(&self) -> &'static str {
        "nss"
    }

    fn dim(&self) -> usize {
        crate::nss::NSS_FEATURES
    }

    fn features(&self, img: &Image, rects: &[Rect]) -> Result<Vec<Vec<f64>>> {
        let per_rect: Vec<Option<Vec<f64>>> = rects
            .par_iter()
            .map(|&r| {
                let p = Patch {
                    rect: r,
                    pixels: img.crop(r)?,
                };
                // Flat or clipped regions have no coefficient spread.
                match nss_patch_features(&p) {
                    Ok(v) => Ok(Some(v)),
                    Err(Error::Degenerate(_)) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<_>>()?;
        let kept: Vec<Vec<f64>> = per_rect.into_iter().flatten().collect();
        if kept.len() < rects.len() {
            log::debug!("nss: {} of {} patches undefined", rects.len() - kept.len(), rects.len());
        }
        Ok(kept)
    }
}

/// What a provider constructor may draw on.
#[derive(Default)]
pub struct FeatureContext {
    pub encoders: Option<EncoderSet>,
}

type ProviderCtor = fn(&FeatureContext) -> Result<Box<dyn FeatureProvider>>;

pub struct FeatureRegistry {
    ctors: BTreeMap<&'static str, ProviderCtor>,
}

impl FeatureRegistry {
    pub fn register(&mut self, name: &'static str, ctor: ProviderCtor) {
        self.ctors.insert(name, ctor);
    }

    pub fn create(&self, name: &str, ctx: &FeatureContext) -> Result<Box<dyn FeatureProvider>> {
        let ctor = self.ctors.get(name).ok_or_else(|| Error::UnknownName {
            registry: "feature provider",
            name: name.to_string(),
        })?;
        ctor(ctx)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.ctors.keys().copied().collect()
    }

    pub fn builtin() -> &'static FeatureRegistry {
        static REG: OnceLock<FeatureRegistry> = OnceLock::new();
        REG.get_or_init(|| {
            let mut r = FeatureRegistry { ctors: BTreeMap::new() };
            r.register("msqale", |ctx| {
                let set = ctx
                    .encoders
                    .clone()
                    .ok_or_else(|| Error::InvalidParameter("msqale features need trained encoders".into()))?;
                Ok(Box::new(MsqaleFeatures::new(set)))
            });
            r.register("nss", |_| Ok(Box::new(NssFeatures)));
            r
        })
    }
}

/// Patch grid with stride `P/2`, sorted by `(y, x)`.
pub fn tile_patches(width: usize, height: usize, p: usize) -> Result<Vec<Rect>> {
    if p < 2 || p % 2 != 0 {
        return Err(Error::InvalidParameter(format!("patch side {p} must be even and >= 2")));
    }
    if width < p || height < p {
        return Err(Error::TooSmall(format!("{width}x{height} image is smaller than the {p} patch")));
    }
    let stride = p / 2;
    let xs: Vec<usize> = (0..=(width - p) / stride).map(|i| i * stride).collect();
    let mut out = Vec::new();
    for y in (0..=(height - p) / stride).map(|i| i * stride) {
        out.extend(xs.iter().map(|&x| Rect::new(x, y, p)));
    }
    Ok(out)
}

/// Sorts rectangles by `(y, x, side)`.
pub fn canonical_order(rects: &mut [Rect]) {
    rects.sort_by_key(|r| (r.y, r.x, r.side));
}

pub fn msqale_features(img: &Image, encoders: &EncoderSet, p: usize) -> Result<Vec<Vec<f64>>> {
    MsqaleFeatures::new(encoders.clone()).features(img, &tile_patches(img.width(), img.height(), p)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityScore {
    /// Distance to the pristine model; lower is better.
    pub q: f64,
    pub patches: usize,
    pub feature_kind: String,
}

/// Averaged-covariance distance between two Gaussians.
///
/// The averaged covariance gets a ridge of `1e-6 * trace / D` when its
/// Cholesky factor fails or has a squared pivot below that value.
pub fn mvg_distance(r: &MvgModel, d: &MvgModel) -> Result<f64> {
    let n = r.dim();
    if d.dim() != n || r.sigma.len() != n * n || d.sigma.len() != n * n {
        return Err(Error::DimensionMismatch(format!("models of dimension {n} and {}", d.dim())));
    }
    let a = (r.sigma_matrix() + d.sigma_matrix()) * 0.5;
    let eps = 1e-6 * a.trace() / n as f64;
    let diff = DVector::from_iterator(n, r.mu.iter().zip(&d.mu).map(|(a, b)| a - b));
    let well_posed = |c: &Cholesky<f64, nalgebra::Dyn>| c.l_dirty().diagonal().iter().all(|p| p * p >= eps);
    let chol = match Cholesky::new(a.clone()) {
        Some(c) if well_posed(&c) => c,
        _ => {
            if !(eps > 0.0) {
                return Err(Error::Degenerate("both covariances vanish".into()));
            }
            Cholesky::new(a + DMatrix::identity(n, n) * eps)
                .ok_or_else(|| Error::Degenerate("averaged covariance is not positive definite".into()))?
        }
    };
    let q2 = diff.dot(&chol.solve(&diff));
    let q = q2.max(0.0).sqrt();
    if !q.is_finite() {
        return Err(Error::NonFinite("quality score".into()));
    }
    Ok(q)
}

pub fn quality_score(pristine: &PristineModel, features: &[Vec<f64>]) -> Result<QualityScore> {
    if features.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "{} patch features; at least 2 are needed",
            features.len()
        )));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("patch feature".into()));
    }
    let reduced: Vec<Vec<f64>> = features
        .iter()
        .map(|f| pca_project(&pristine.pca, f))
        .collect::<Result<_>>()?;
    let test = fit_mvg(&reduced)?;
    Ok(QualityScore {
        q: mvg_distance(&pristine.mvg, &test)?,
        patches: features.len(),
        feature_kind: pristine.feature_kind.clone(),
    })
}

pub fn score_image(img: &Image, pristine: &PristineModel, provider: &dyn FeatureProvider) -> Result<QualityScore> {
    if provider.name() != pristine.feature_kind {
        return Err(Error::InvalidParameter(format!(
            "pristine model was built with {} features, scoring with {}",
            pristine.feature_kind,
            provider.name()
        )));
    }
    let mut rects = tile_patches(img.width(), img.height(), pristine.patch)?;
    canonical_order(&mut rects);
    quality_score(pristine, &provider.features(img, &rects)?)
}
