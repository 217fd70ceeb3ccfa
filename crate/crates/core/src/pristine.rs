//! The pristine reference model: patch selection, PCA and a multivariate
//! Gaussian over the reduced features of sharp, colorful patches.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::ByteReader;
use crate::error::{Error, Result};
use crate::filter::local_moments;
use crate::image::{Image, Patch, Rect};
use crate::scorer::FeatureProvider;

pub const PRISTINE_MAGIC: [u8; 4] = *b"MSQP";
pub const PRISTINE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PristineConfig {
    /// Patch side `P`.
    pub patch: usize,
    /// Sharpness fraction of the maximum.
    pub tau_s: f64,
    /// Colorfulness fraction of the maximum.
    pub tau_c: f64,
    /// Requested PCA dimension; capped by the feature size and sample count.
    pub dim: usize,
    /// Compare sharpness against the maximum over all images instead of
    /// each image's own maximum.
    pub global_sharpness: bool,
}

impl Default for PristineConfig {
    fn default() -> Self {
        Self {
            patch: 96,
            tau_s: 0.3,
            tau_c: 0.8,
            dim: 2048,
            global_sharpness: false,
        }
    }
}

impl PristineConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |v: f64| v > 0.0 && v <= 1.0;
        if !frac(self.tau_s) || !frac(self.tau_c) {
            return Err(Error::InvalidParameter(format!(
                "thresholds must lie in (0, 1]: tau_s={} tau_c={}",
                self.tau_s, self.tau_c
            )));
        }
        if self.dim < 1 || self.patch < 2 || self.patch % 2 != 0 {
            return Err(Error::InvalidParameter(format!(
                "need dim >= 1 and an even patch side, got dim={} patch={}",
                self.dim, self.patch
            )));
        }
        Ok(())
    }
}

/// Mean of the Gaussian-weighted local standard deviation of the luma.
pub fn sharpness_index(patch: &Patch) -> Result<f64> {
    let y = patch.pixels.luma()?;
    let (_, sigma) = local_moments(y.data(), y.width(), y.height())?;
    Ok(sigma.iter().sum::<f64>() / sigma.len() as f64)
}

/// Opponent-channel colorfulness with population moments.
pub fn colorfulness_index(patch: &Patch) -> Result<f64> {
    let img = &patch.pixels;
    if img.channels() != 3 {
        return Err(Error::InvalidParameter(format!(
            "colorfulness needs RGB, got {} channels",
            img.channels()
        )));
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let n = r.len() as f64;
    let rg: Vec<f64> = r.iter().zip(g).map(|(r, g)| r - g).collect();
    let yb: Vec<f64> = r.iter().zip(g).zip(b).map(|((r, g), b)| 0.5 * (r + g) - b).collect();
    let moments = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        (m, var)
    };
    let (m_rg, v_rg) = moments(&rg);
    let (m_yb, v_yb) = moments(&yb);
    Ok((v_rg + v_yb).sqrt() + 0.3 * (m_rg * m_rg + m_yb * m_yb).sqrt())
}

/// Non-overlapping `side x side` tiles from the top-left corner.
pub fn grid_tiles(width: usize, height: usize, side: usize) -> Vec<Rect> {
    let mut out = Vec::new();
    if side == 0 {
        return out;
    }
    for y in (0..height / side).map(|i| i * side) {
        for x in (0..width / side).map(|i| i * side) {
            out.push(Rect::new(x, y, side));
        }
    }
    out
}

/// Selected tiles of each image, in tiling order.
pub fn select_pristine_rects(images: &[Image], cfg: &PristineConfig) -> Result<Vec<Vec<Rect>>> {
    cfg.validate()?;
    let scored: Vec<Vec<(Rect, f64, f64)>> = images
        .par_iter()
        .map(|img| {
            if img.width() < cfg.patch || img.height() < cfg.patch {
                return Err(Error::TooSmall(format!(
                    "{}x{} image is smaller than the {} patch",
                    img.width(),
                    img.height(),
                    cfg.patch
                )));
            }
            grid_tiles(img.width(), img.height(), cfg.patch)
                .into_iter()
                .map(|r| {
                    let p = Patch {
                        rect: r,
                        pixels: img.crop(r)?,
                    };
                    Ok((r, sharpness_index(&p)?, colorfulness_index(&p)?))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let max_of = |v: &[(Rect, f64, f64)], f: fn(&(Rect, f64, f64)) -> f64| v.iter().map(f).fold(0.0, f64::max);
    let global_s = scored.iter().map(|v| max_of(v, |t| t.1)).fold(0.0, f64::max);
    let picked: Vec<Vec<Rect>> = scored
        .iter()
        .map(|v| {
            let s_max = if cfg.global_sharpness { global_s } else { max_of(v, |t| t.1) };
            let c_max = max_of(v, |t| t.2);
            v.iter()
                .filter(|(_, s, c)| *s > cfg.tau_s * s_max && *c > cfg.tau_c * c_max)
                .map(|t| t.0)
                .collect()
        })
        .collect();
    if picked.iter().all(|v| v.is_empty()) {
        return Err(Error::EmptySelection("no patch passed the sharpness and colorfulness thresholds".into()));
    }
    Ok(picked)
}

pub fn select_pristine_patches(images: &[Image], cfg: &PristineConfig) -> Result<Vec<Patch>> {
    let rects = select_pristine_rects(images, cfg)?;
    let mut out = Vec::new();
    for (img, rs) in images.iter().zip(rects) {
        for r in rs {
            out.push(Patch {
                rect: r,
                pixels: img.crop(r)?,
            });
        }
    }
    Ok(out)
}

fn check_samples(features: &[Vec<f64>], min: usize) -> Result<usize> {
    if features.len() < min {
        return Err(Error::InvalidParameter(format!(
            "need at least {min} samples, got {}",
            features.len()
        )));
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(Error::DimensionMismatch("feature vectors differ in length".into()));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature value".into()));
    }
    Ok(dim)
}

fn mean_vector(features: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    for f in features {
        for (a, v) in m.iter_mut().zip(f) {
            *a += v;
        }
    }
    let n = features.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// Centered sample covariance, `1/(n-1)`, symmetrized.
fn covariance(features: &[Vec<f64>], mean: &[f64]) -> DMatrix<f64> {
    let (n, dim) = (features.len(), mean.len());
    let x = DMatrix::from_fn(n, dim, |i, j| features[i][j] - mean[j]);
    let c = x.transpose() * &x / (n as f64 - 1.0);
    (&c + c.transpose()) * 0.5
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `D` orthonormal directions, each of the input dimension.
    pub basis: Vec<Vec<f64>>,
    /// Sample variance along each direction, nonincreasing.
    pub explained: Vec<f64>,
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn fit_pca(features: &[Vec<f64>], d: usize) -> Result<PcaModel> {
    let dim = check_samples(features, 2)?;
    let limit = (features.len() - 1).min(dim);
    if d < 1 || d > limit {
        return Err(Error::InvalidParameter(format!(
            "PCA dimension {d} outside 1..={limit}"
        )));
    }
    let mean = mean_vector(features, dim);
    let cov = covariance(features, &mean);
    if cov.trace() <= 0.0 {
        return Err(Error::Degenerate("all samples identical".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut basis = Vec::with_capacity(d);
    let mut explained = Vec::with_capacity(d);
    for &i in order.iter().take(d) {
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        let lead = v
            .iter()
            .enumerate()
            .fold(0, |best, (j, x)| if x.abs() > v[best].abs() { j } else { best });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        basis.push(v);
        explained.push(eig.eigenvalues[i].max(0.0));
    }
    Ok(PcaModel { mean, basis, explained })
}

pub fn pca_project(model: &PcaModel, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != model.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "vector of length {} for a {}-dimensional PCA",
            v.len(),
            model.input_dim()
        )));
    }
    Ok(model
        .basis
        .iter()
        .map(|b| b.iter().zip(v).zip(&model.mean).map(|((b, x), m)| b * (x - m)).sum())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MvgModel {
    pub mu: Vec<f64>,
    /// Row-major `D x D`.
    pub sigma: Vec<f64>,
}

impl MvgModel {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.sigma)
    }
}

pub fn fit_mvg(features: &[Vec<f64>]) -> Result<MvgModel> {
    let dim = check_samples(features, 2)?;
    let mu = mean_vector(features, dim);
    let c = covariance(features, &mu);
    let sigma = (0..dim).flat_map(|i| (0..dim).map(move |j| (i, j))).map(|(i, j)| c[(i, j)]).collect();
    Ok(MvgModel { mu, sigma })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PristineModel {
    /// Name of the feature provider the model was built with.
    pub feature_kind: String,
    pub patch: usize,
    pub pca: PcaModel,
    pub mvg: MvgModel,
}

impl PristineModel {
    pub fn dim(&self) -> usize {
        self.pca.dim()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        out.extend_from_slice(&PRISTINE_MAGIC);
        out.extend_from_slice(&PRISTINE_VERSION.to_le_bytes());
        u32le(&mut out, self.feature_kind.len());
        out.extend_from_slice(self.feature_kind.as_bytes());
        u32le(&mut out, self.patch);
        u32le(&mut out, self.pca.input_dim());
        u32le(&mut out, self.dim());
        let floats = self
            .pca
            .mean
            .iter()
            .chain(self.pca.basis.iter().flatten())
            .chain(&self.pca.explained)
            .chain(&self.mvg.mu)
            .chain(&self.mvg.sigma);
        for v in floats {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<PristineModel> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != PRISTINE_MAGIC {
            return Err(Error::BadMagic {
                expected: PRISTINE_MAGIC,
            });
        }
        let version = r.u32()?;
        if version != PRISTINE_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                supported: PRISTINE_VERSION,
            });
        }
        let len = r.u32()? as usize;
        let feature_kind = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Parse("feature kind is not UTF-8".into()))?
            .to_string();
        let patch = r.u32()? as usize;
        let input = r.u32()? as usize;
        let d = r.u32()? as usize;
        if d == 0 || input == 0 || d > input {
            return Err(Error::Parse(format!("bad model shape D={d} input={input}")));
        }
        let mut floats = |n: usize| -> Result<Vec<f64>> { (0..n).map(|_| r.f64()).collect() };
        let mean = floats(input)?;
        let basis = (0..d).map(|_| floats(input)).collect::<Result<_>>()?;
        let explained = floats(d)?;
        let mu = floats(d)?;
        let sigma = floats(d * d)?;
        if r.pos != bytes.len() {
            return Err(Error::Parse(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(PristineModel {
            feature_kind,
            patch,
            pca: PcaModel { mean, basis, explained },
            mvg: MvgModel { mu, sigma },
        })
    }
}

/// Selects pristine patches, extracts their features, and fits the PCA and
/// MVG. The PCA dimension is capped at the feature size and at one less
/// than the number of selected patches.
pub fn build_pristine_model(
    images: &[Image],
    provider: &dyn FeatureProvider,
    cfg: &PristineConfig,
) -> Result<PristineModel> {
    let rects = select_pristine_rects(images, cfg)?;
    let per_image: Vec<Vec<Vec<f64>>> = images
        .iter()
        .zip(&rects)
        .map(|(img, rs)| if rs.is_empty() { Ok(Vec::new()) } else { provider.features(img, rs) })
        .collect::<Result<_>>()?;
    let bank: Vec<Vec<f64>> = per_image.into_iter().flatten().collect();
    if bank.len() < 2 {
        return Err(Error::EmptySelection(format!(
            "{} pristine patch selected; at least 2 are needed",
            bank.len()
        )));
    }
    let d = cfg.dim.min(bank[0].len()).min(bank.len() - 1);
    let pca = fit_pca(&bank, d)?;
    let reduced: Vec<Vec<f64>> = bank.iter().map(|f| pca_project(&pca, f)).collect::<Result<_>>()?;
    let mvg = fit_mvg(&reduced)?;
    log::info!(
        "pristine model: {} patches, {} -> {} dims",
        bank.len(),
        pca.input_dim(),
        d
    );
    Ok(PristineModel {
        feature_kind: provider.name().to_string(),
        patch: cfg.patch,
        pca,
        mvg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{moment_kernel, reflect};
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn rand_features(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = SeededRng::new(seed);
        // Correlated columns so the spectrum is not flat.
        (0..n)
            .map(|_| {
                let base: Vec<f64> = (0..d).map(|_| r.normal()).collect();
                (0..d).map(|j| base[j] * (j + 1) as f64 + 0.5 * base[(j + 1) % d]).collect()
            })
            .collect()
    }

    fn patch(img: Image) -> Patch {
        Patch::from_image(img).unwrap()
    }

    #[test]
    fn sharpness_of_flat_and_shifted_patches() {
        let flat = patch(Image::filled(16, 16, 3, 0.4));
        assert!(sharpness_index(&flat).unwrap() < 1e-7);
        let mut r = SeededRng::new(1);
        let img = Image::from_fn(16, 16, 3, |_, _, _| r.uniform() * 0.5);
        let a = sharpness_index(&patch(img.clone())).unwrap();
        let b = sharpness_index(&patch(img.map(|v| v + 0.3))).unwrap();
        let c = sharpness_index(&patch(img.map(|v| v * 1.7))).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!((c - 1.7 * a).abs() < 1e-12);
        assert!(sharpness_index(&patch(Image::filled(6, 6, 3, 0.0))).is_err());
    }

    #[test]
    fn sharpness_matches_direct_window_sum() {
        let img = Image::from_fn(12, 12, 1, |_, y, x| if (x + y) % 2 == 0 { 0.2 } else { 0.9 });
        let k = moment_kernel();
        let mut total = 0.0;
        for y in 0..12isize {
            for x in 0..12isize {
                let at = |dy: isize, dx: isize| img.get(0, reflect(y + dy, 12), reflect(x + dx, 12));
                let mut mu = 0.0;
                for dy in -3..=3 {
                    for dx in -3..=3 {
                        mu += k[(dy + 3) as usize] * k[(dx + 3) as usize] * at(dy, dx);
                    }
                }
                let mut var = 0.0;
                for dy in -3..=3 {
                    for dx in -3..=3 {
                        let d = at(dy, dx) - mu;
                        var += k[(dy + 3) as usize] * k[(dx + 3) as usize] * d * d;
                    }
                }
                total += var.sqrt();
            }
        }
        let got = sharpness_index(&patch(img)).unwrap();
        assert!((got - total / 144.0).abs() < 1e-12);
    }

    #[test]
    fn colorfulness_cases() {
        let gray = Image::from_fn(8, 8, 3, |_, y, x| (x * y) as f64 / 64.0);
        assert_eq!(colorfulness_index(&patch(gray)).unwrap(), 0.0);
        let red = Image::from_fn(4, 4, 3, |c, _, _| if c == 0 { 1.0 } else { 0.0 });
        let v = colorfulness_index(&patch(red)).unwrap();
        assert!((v - 0.3 * 1.25f64.sqrt()).abs() < 1e-12);
        assert!((v - 0.33541).abs() < 1e-5);
        assert!(colorfulness_index(&patch(Image::filled(4, 4, 1, 0.5))).is_err());

        let mut r = SeededRng::new(4);
        let img = Image::from_fn(8, 8, 3, |_, _, _| r.uniform());
        let (mut rg, mut yb) = (Vec::new(), Vec::new());
        for y in 0..8 {
            for x in 0..8 {
                let (rr, gg, bb) = (img.get(0, y, x), img.get(1, y, x), img.get(2, y, x));
                rg.push(rr - gg);
                yb.push((rr + gg) / 2.0 - bb);
            }
        }
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / 64.0;
            (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 64.0).sqrt())
        };
        let ((m1, s1), (m2, s2)) = (stats(&rg), stats(&yb));
        let expect = (s1 * s1 + s2 * s2).sqrt() + 0.3 * (m1 * m1 + m2 * m2).sqrt();
        assert!((colorfulness_index(&patch(img)).unwrap() - expect).abs() < 1e-12);
    }

    fn colorful_texture(w: usize, h: usize, seed: u64) -> Image {
        let mut r = SeededRng::new(seed);
        Image::from_fn(w, h, 3, |c, _, _| {
            let base = [0.8, 0.3, 0.1][c];
            (base + 0.15 * r.normal()).clamp(0.0, 1.0)
        })
    }

    #[test]
    fn single_patch_is_always_kept() {
        let img = colorful_texture(16, 16, 1);
        let cfg = PristineConfig {
            patch: 16,
            ..PristineConfig::default()
        };
        let sel = select_pristine_patches(&[img], &cfg).unwrap();
        assert_eq!(sel.len(), 1);
    }

    #[test]
    fn tiny_thresholds_keep_everything() {
        let img = colorful_texture(48, 32, 2);
        let cfg = PristineConfig {
            patch: 16,
            tau_s: 1e-9,
            tau_c: 1e-9,
            ..PristineConfig::default()
        };
        assert_eq!(select_pristine_patches(&[img], &cfg).unwrap().len(), 6);
    }

    #[test]
    fn flat_half_is_rejected() {
        let tex = colorful_texture(64, 32, 3);
        let img = Image::from_fn(64, 32, 3, |c, y, x| if x < 32 { tex.get(c, y, x) } else { [0.8, 0.3, 0.1][c] });
        let cfg = PristineConfig {
            patch: 16,
            tau_c: 0.5,
            ..PristineConfig::default()
        };
        let tiles = grid_tiles(64, 32, 16);
        let sharp: Vec<f64> = tiles
            .iter()
            .map(|r| sharpness_index(&Patch { rect: *r, pixels: img.crop(*r).unwrap() }).unwrap())
            .collect();
        let max = sharp.iter().cloned().fold(0.0, f64::max);
        for (r, s) in tiles.iter().zip(&sharp) {
            assert_eq!(*s > 0.3 * max, r.x + 16 <= 32, "{r:?} {s}");
        }
        let sel = select_pristine_patches(&[img], &cfg).unwrap();
        assert!(!sel.is_empty());
        assert!(sel.iter().all(|p| p.rect.x + 16 <= 32));
    }

    #[test]
    fn selection_thresholds_are_per_image() {
        let strong = colorful_texture(32, 32, 4);
        let weak = colorful_texture(32, 32, 5).map(|v| 0.5 + 0.1 * (v - 0.5));
        let cfg = PristineConfig {
            patch: 16,
            tau_c: 0.1,
            ..PristineConfig::default()
        };
        let per = select_pristine_rects(&[strong.clone(), weak.clone()], &cfg).unwrap();
        assert!(!per[1].is_empty());
        let global = PristineConfig {
            global_sharpness: true,
            tau_s: 0.9,
            ..cfg
        };
        let g = select_pristine_rects(&[strong, weak], &global).unwrap();
        assert!(g[1].is_empty());
    }

    #[test]
    fn nothing_selected_is_an_error() {
        let cfg = PristineConfig {
            patch: 16,
            ..PristineConfig::default()
        };
        let gray = Image::from_fn(32, 32, 3, |_, y, x| ((x * 7 + y * 3) % 5) as f64 / 5.0);
        assert!(matches!(select_pristine_patches(&[gray], &cfg), Err(Error::EmptySelection(_))));
    }

    /// Cyclic Jacobi eigenvalues of a symmetric matrix.
    fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _ in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a[i][j] * a[i][j]).sum();
            if off < 1e-26 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }

    /// Two-pass mean and covariance by plain loops.
    fn moment_oracle(x: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let (n, d) = (x.len(), x[0].len());
        let mut mu = vec![0.0; d];
        for row in x {
            for j in 0..d {
                mu[j] += row[j] / n as f64;
            }
        }
        let mut c = vec![vec![0.0; d]; d];
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for row in x {
                    s += (row[i] - mu[i]) * (row[j] - mu[j]);
                }
                c[i][j] = s / (n as f64 - 1.0);
            }
        }
        (mu, c)
    }

    fn pca_oracle_check(seed: u64) {
        let x = rand_features(50, 8, seed);
        let (_, c) = moment_oracle(&x);
        let ev = jacobi_eigenvalues(c);
        let pca = fit_pca(&x, 8).unwrap();
        for (a, b) in pca.explained.iter().zip(&ev) {
            assert!((a - b).abs() < 1e-8 * (1.0 + b.abs()), "{a} {b}");
        }
    }

    #[test]
    fn pca_matches_jacobi() {
        for seed in 0..5 {
            pca_oracle_check(seed);
        }
    }

    #[test]
    fn pca_on_a_line() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| {
            let t = i as f64;
            vec![t, 2.0 * t, -t]
        }).collect();
        let pca = fit_pca(&x, 1).unwrap();
        let total: f64 = moment_oracle(&x).1.iter().enumerate().map(|(i, r)| r[i]).sum();
        assert!((pca.explained[0] - total).abs() < 1e-9);
        // Largest-magnitude entry is positive.
        assert!(pca.basis[0][1] > 0.0);
    }

    #[test]
    fn full_basis_reconstructs() {
        let x = rand_features(30, 5, 7);
        let pca = fit_pca(&x, 5).unwrap();
        for v in &x {
            let p = pca_project(&pca, v).unwrap();
            for j in 0..5 {
                let back: f64 = (0..5).map(|i| p[i] * pca.basis[i][j]).sum();
                assert!((back - (v[j] - pca.mean[j])).abs() < 1e-6);
            }
        }
        for a in 0..5 {
            for b in 0..5 {
                let d: f64 = pca.basis[a].iter().zip(&pca.basis[b]).map(|(p, q)| p * q).sum();
                assert!((d - if a == b { 1.0 } else { 0.0 }).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn projection_cases() {
        let x = rand_features(40, 6, 8);
        let pca = fit_pca(&x, 3).unwrap();
        assert!(pca_project(&pca, &pca.mean).unwrap().iter().all(|&v| v == 0.0));
        let v: Vec<f64> = pca.mean.iter().zip(&pca.basis[0]).map(|(m, b)| m + b).collect();
        let p = pca_project(&pca, &v).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-9 && p[1].abs() < 1e-9 && p[2].abs() < 1e-9);
        let mut r = SeededRng::new(9);
        let v: Vec<f64> = (0..6).map(|_| r.normal()).collect();
        let p = pca_project(&pca, &v).unwrap();
        for i in 0..3 {
            let mut s = 0.0;
            for j in 0..6 {
                s += pca.basis[i][j] * (v[j] - pca.mean[j]);
            }
            assert!((p[i] - s).abs() < 1e-12);
        }
        assert!(pca_project(&pca, &[0.0; 5]).is_err());
    }

    #[test]
    fn projection_variances_equal_explained() {
        let x = rand_features(60, 6, 10);
        let pca = fit_pca(&x, 6).unwrap();
        let proj: Vec<Vec<f64>> = x.iter().map(|v| pca_project(&pca, v).unwrap()).collect();
        let (_, c) = moment_oracle(&proj);
        for i in 0..6 {
            assert!((c[i][i] - pca.explained[i]).abs() < 1e-8 * (1.0 + pca.explained[i]));
            if i > 0 {
                assert!(pca.explained[i] <= pca.explained[i - 1]);
            }
        }
    }

    #[test]
    fn pca_errors() {
        let x = rand_features(5, 8, 11);
        assert!(fit_pca(&x, 5).is_err());
        let same = vec![vec![1.0, 2.0]; 4];
        assert!(matches!(fit_pca(&same, 1), Err(Error::Degenerate(_))));
        assert!(fit_pca(&x[..1], 1).is_err());
    }

    #[test]
    fn mvg_hand_cases() {
        let m = fit_mvg(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(m.mu, vec![1.0, 0.0]);
        assert_eq!(m.sigma, vec![2.0, 0.0, 0.0, 0.0]);
        let same = fit_mvg(&vec![vec![0.5, -1.0, 3.0]; 5]).unwrap();
        assert_eq!(same.mu, vec![0.5, -1.0, 3.0]);
        assert!(same.sigma.iter().all(|&v| v == 0.0));
        assert!(fit_mvg(&[vec![1.0]]).is_err());
    }

    #[test]
    fn mvg_matches_two_pass_oracle() {
        for seed in 0..5 {
            let x = rand_features(100, 5, 20 + seed);
            let m = fit_mvg(&x).unwrap();
            let (mu, c) = moment_oracle(&x);
            for i in 0..5 {
                assert!((m.mu[i] - mu[i]).abs() < 1e-10);
                for j in 0..5 {
                    assert!((m.sigma[i * 5 + j] - c[i][j]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn model_round_trip() {
        let x = rand_features(20, 4, 30);
        let pca = fit_pca(&x, 3).unwrap();
        let red: Vec<Vec<f64>> = x.iter().map(|v| pca_project(&pca, v).unwrap()).collect();
        let model = PristineModel {
            feature_kind: "nss".into(),
            patch: 32,
            pca,
            mvg: fit_mvg(&red).unwrap(),
        };
        let bytes = model.to_bytes();
        assert_eq!(PristineModel::from_bytes(&bytes).unwrap(), model);
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(matches!(PristineModel::from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(PristineModel::from_bytes(&bad), Err(Error::VersionMismatch { .. })));
        assert!(matches!(PristineModel::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn mvg_covariance_is_psd(seed in 0u64..10_000, n in 2usize..30, d in 1usize..6) {
            let x = rand_features(n, d, seed);
            let m = fit_mvg(&x).unwrap();
            let s = m.sigma_matrix();
            prop_assert!((&s - s.transpose()).abs().max() <= 1e-9);
            let ev = SymmetricEigen::new(s).eigenvalues;
            prop_assert!(ev.iter().all(|&e| e >= -1e-9));
        }

        #[test]
        fn sharpness_is_shift_invariant(seed in 0u64..10_000, c in -0.5f64..0.5) {
            let mut r = SeededRng::new(seed);
            let img = Image::from_fn(10, 10, 3, |_, _, _| r.uniform());
            let a = sharpness_index(&patch(img.clone())).unwrap();
            let b = sharpness_index(&patch(img.map(|v| v + c))).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
