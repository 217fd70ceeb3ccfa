//! Per-level contrastive training of the feature encoder.

mod adam;
mod loss;
mod views;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::{
    anchor_loss, anchor_loss_with_grad, batch_objective, cosine_similarity, BatchObjective, CrossScene,
    NegativeSampler, NegativeSamplerRegistry, SameScene, SceneEmbeddings, Slot,
};
pub use views::{make_views, view_rects, SplitAxis, ViewPair};

use crate::encoder::{encoder_init, EncoderArch, EncoderWeights, Forward};
use crate::error::{Error, Result};
use crate::image::{Image, Patch, SceneSet};
use crate::pyramid::{decompose, Level, PyramidConfig};
use crate::rng::{child_seed, SeededRng};

/// Scenes per batch and versions per scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchShape {
    pub n: usize,
    pub k: usize,
}

impl BatchShape {
    pub const fn new(n: usize, k: usize) -> Self {
        Self { n, k }
    }
}

/// `(N, K)` for each level. High-pass levels past the end of `highpass`
/// use its last entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSchedule {
    pub image: BatchShape,
    pub highpass: Vec<BatchShape>,
    pub lowpass: BatchShape,
}

impl LevelSchedule {
    pub fn desk() -> Self {
        Self {
            image: BatchShape::new(2, 4),
            highpass: vec![BatchShape::new(2, 4), BatchShape::new(4, 4), BatchShape::new(8, 4)],
            lowpass: BatchShape::new(8, 4),
        }
    }

    /// Batch sizes of the full-scale setting; N doubles with depth.
    pub fn full() -> Self {
        Self {
            image: BatchShape::new(4, 10),
            highpass: vec![BatchShape::new(4, 10), BatchShape::new(8, 20), BatchShape::new(16, 40)],
            lowpass: BatchShape::new(32, 40),
        }
    }

    pub fn for_level(&self, level: Level) -> BatchShape {
        match level {
            Level::Image => self.image,
            Level::LowPass(_) => self.lowpass,
            Level::HighPass(m) => {
                let i = (m - 1).min(self.highpass.len().saturating_sub(1));
                self.highpass.get(i).copied().unwrap_or(self.image)
            }
        }
    }
}

impl Default for LevelSchedule {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub tau: f64,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub schedule: LevelSchedule,
    pub seed: u64,
    pub negatives: String,
    #[serde(skip)]
    pub arch: EncoderArch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            epochs: 20,
            adam: AdamConfig::default(),
            schedule: LevelSchedule::desk(),
            seed: 0,
            negatives: "same_scene".into(),
            arch: EncoderArch::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidParameter(format!("temperature {} must be positive", self.tau)));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::InvalidParameter("learning rate must be positive".into()));
        }
        let shapes = std::iter::once(self.schedule.image)
            .chain(self.schedule.highpass.iter().copied())
            .chain(std::iter::once(self.schedule.lowpass));
        for s in shapes {
            if s.n < 1 || s.k < 2 {
                return Err(Error::InvalidParameter(format!(
                    "batch shape N={} K={} needs N >= 1 and K >= 2",
                    s.n, s.k
                )));
            }
        }
        self.arch.validate()?;
        NegativeSamplerRegistry::builtin().get(&self.negatives)?;
        Ok(())
    }
}

/// Maps a band into the encoder's input range: high-pass values are
/// halved and offset by one half, everything else passes through.
pub fn encoder_band(level: Level, band: &Image) -> Image {
    if level.is_highpass() {
        band.map(|v| 0.5 * v + 0.5)
    } else {
        band.clone()
    }
}

/// Resizes a patch to the encoder's input side.
pub fn fit_patch(patch: &Patch, side: usize) -> Result<Image> {
    if patch.side() == side {
        Ok(patch.pixels.clone())
    } else {
        patch.pixels.resize_bilinear(side, side)
    }
}

/// Encoder-ready band of each version of a scene.
pub fn scene_bands(versions: &[Image], level: Level) -> Result<Vec<Image>> {
    versions
        .iter()
        .map(|v| {
            let band = match level {
                Level::Image => v.clone(),
                _ => level.select_from(v, &decompose(v, PyramidConfig::new(level.depth()))?),
            };
            Ok(encoder_band(level, &band))
        })
        .collect()
}

struct ScenePass {
    forwards: [Vec<Forward>; 2],
}

fn forward_views(w: &EncoderWeights, views: &ViewPair) -> Result<ScenePass> {
    let side = w.arch.input_side;
    let run = |ps: &[Patch]| -> Result<Vec<Forward>> { ps.iter().map(|p| w.forward(&fit_patch(p, side)?)).collect() };
    Ok(ScenePass {
        forwards: [run(&views.view1)?, run(&views.view2)?],
    })
}

fn embeddings(passes: &[ScenePass]) -> Vec<SceneEmbeddings> {
    passes
        .iter()
        .map(|p| SceneEmbeddings {
            view1: p.forwards[0].iter().map(|f| f.embedding().clone()).collect(),
            view2: p.forwards[1].iter().map(|f| f.embedding().clone()).collect(),
        })
        .collect()
}

/// Loss, parameter gradient and negative log for one batch of views.
pub fn batch_loss_and_grad(
    views: &[ViewPair],
    w: &EncoderWeights,
    tau: f64,
    sampler: &dyn NegativeSampler,
    rng: &mut SeededRng,
) -> Result<(f64, Vec<f64>, Vec<(usize, usize)>)> {
    let passes: Vec<ScenePass> = views.par_iter().map(|v| forward_views(w, v)).collect::<Result<_>>()?;
    let obj = batch_objective(&embeddings(&passes), tau, sampler, rng)?;
    let jobs: Vec<(&Forward, &Vec<f64>)> = passes
        .iter()
        .zip(&obj.grads)
        .flat_map(|(p, g)| (0..2).flat_map(move |view| p.forwards[view].iter().zip(&g[view])))
        .collect();
    let parts: Vec<Vec<f64>> = jobs.par_iter().map(|(f, g)| f.backward(w, g)).collect::<Result<_>>()?;
    let mut grad = vec![0.0; w.params().len()];
    for p in &parts {
        for (acc, v) in grad.iter_mut().zip(p) {
            *acc += v;
        }
    }
    Ok((obj.loss, grad, obj.negative_pairs))
}

/// Objective value for a batch of views with the same-scene sampler.
pub fn batch_loss(views: &[ViewPair], w: &EncoderWeights, tau: f64) -> Result<f64> {
    let passes: Vec<ScenePass> = views.par_iter().map(|v| forward_views(w, v)).collect::<Result<_>>()?;
    Ok(batch_objective(&embeddings(&passes), tau, &SameScene, &mut SeededRng::new(0))?.loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    /// Negatives drawn from the anchor's own scene.
    pub same_scene_negatives: usize,
    /// Negatives drawn from another scene.
    pub cross_scene_negatives: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub level: Option<Level>,
    pub batches: Vec<BatchRecord>,
}

impl TrainLog {
    pub fn epoch_means(&self) -> Vec<f64> {
        let epochs = self.batches.iter().map(|b| b.epoch + 1).max().unwrap_or(0);
        (0..epochs)
            .map(|e| {
                let ls: Vec<f64> = self.batches.iter().filter(|b| b.epoch == e).map(|b| b.loss).collect();
                ls.iter().sum::<f64>() / ls.len().max(1) as f64
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,batch,loss,same_scene_negatives,cross_scene_negatives\n");
        for b in &self.batches {
            let _ = writeln!(
                s,
                "{},{},{:.8},{},{}",
                b.epoch, b.batch, b.loss, b.same_scene_negatives, b.cross_scene_negatives
            );
        }
        s
    }
}

fn level_seed(seed: u64, level: Level) -> u64 {
    child_seed(seed, level.id() as u64)
}

/// Trains the encoder for one level from scratch.
pub fn train_subband(corpus: &SceneSet, level: Level, cfg: &TrainConfig) -> Result<(EncoderWeights, TrainLog)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidParameter("empty training corpus".into()));
    }
    let sampler = NegativeSamplerRegistry::builtin().get(&cfg.negatives)?;
    let shape = cfg.schedule.for_level(level);
    let k_avail = corpus.versions_per_scene();
    if k_avail < 2 {
        return Err(Error::InvalidParameter("scenes need at least two versions".into()));
    }
    let k = shape.k.min(k_avail);
    let n = shape.n.min(corpus.len());

    // Bands are fixed across epochs.
    let bands: Vec<Vec<Image>> = corpus
        .scenes
        .par_iter()
        .map(|s| scene_bands(&s.versions, level))
        .collect::<Result<_>>()?;
    let (bw, bh) = (bands[0][0].width(), bands[0][0].height());
    let min_side = cfg.arch.min_side();
    if bw.min(bh) < 2 * min_side {
        return Err(Error::TooSmall(format!(
            "{} band is {bw}x{bh}; views need a side of at least {}",
            level.name(),
            2 * min_side
        )));
    }

    let base = level_seed(cfg.seed, level);
    let mut weights = encoder_init(&cfg.arch, level, &mut SeededRng::new(child_seed(base, 0)))?;
    let mut state = AdamState::new(weights.params().len());
    let mut log = TrainLog {
        level: Some(level),
        batches: Vec::new(),
    };

    for epoch in 0..cfg.epochs {
        let mut rng = SeededRng::new(child_seed(base, epoch as u64 + 1));
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        rng.shuffle(&mut order);
        let full = order.len() / n;
        let batches: Vec<&[usize]> = if full == 0 {
            vec![&order[..]]
        } else {
            order.chunks_exact(n).collect()
        };
        for (bi, scenes) in batches.into_iter().enumerate() {
            let mut views = Vec::with_capacity(scenes.len());
            for &s in scenes {
                let mut pick = rng.choose_distinct(k_avail, k);
                pick.sort_unstable();
                let versions: Vec<Image> = pick.iter().map(|&j| bands[s][j].clone()).collect();
                views.push(make_views(&versions, min_side, &mut rng)?);
            }
            let (loss, grad, pairs) = batch_loss_and_grad(&views, &weights, cfg.tau, sampler.as_ref(), &mut rng)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("{} training, epoch {epoch}", level.name())));
            }
            adam_step(weights.params_mut(), &grad, &mut state, &cfg.adam)?;
            let same = pairs.iter().filter(|(a, b)| a == b).count();
            log.batches.push(BatchRecord {
                epoch,
                batch: bi,
                loss,
                same_scene_negatives: same,
                cross_scene_negatives: pairs.len() - same,
            });
            log::debug!("{} epoch {epoch} batch {bi} loss {loss:.5}", level.name());
        }
        weights.epoch = epoch as u32 + 1;
    }
    Ok((weights, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{apply_distortion, synthetic_scene, DistortionSpec};
    use crate::image::Scene;

    fn small_arch() -> EncoderArch {
        EncoderArch {
            in_channels: 3,
            widths: vec![6, 8],
            input_side: 16,
        }
    }

    fn toy_corpus(scenes: usize, side: usize, seed: u64) -> SceneSet {
        let mut rng = SeededRng::new(seed);
        let scenes = (0..scenes)
            .map(|i| {
                let clean = synthetic_scene(side, side, &mut rng);
                let noisy = apply_distortion(&clean, &DistortionSpec::new("gaussian_noise", 0.8), &mut rng).unwrap();
                let blur = apply_distortion(&clean, &DistortionSpec::new("gaussian_blur", 0.6), &mut rng).unwrap();
                let dark = apply_distortion(&clean, &DistortionSpec::new("gamma_under", 0.9), &mut rng).unwrap();
                Scene {
                    id: format!("s{i}"),
                    versions: vec![clean, noisy, blur, dark],
                }
            })
            .collect();
        SceneSet::new(scenes).unwrap()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            arch: small_arch(),
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_lookup() {
        let s = LevelSchedule::desk();
        assert_eq!(s.for_level(Level::Image), BatchShape::new(2, 4));
        assert_eq!(s.for_level(Level::HighPass(2)), BatchShape::new(4, 4));
        assert_eq!(s.for_level(Level::HighPass(5)), BatchShape::new(8, 4));
        assert_eq!(s.for_level(Level::LowPass(3)), BatchShape::new(8, 4));
        assert_eq!(LevelSchedule::full().for_level(Level::LowPass(3)), BatchShape::new(32, 40));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            tau: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let mut bad = TrainConfig::default();
        bad.schedule.image.k = 1;
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            negatives: "nope".into(),
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::UnknownName { .. })));
    }

    #[test]
    fn highpass_bands_are_recentred() {
        let b = Image::filled(4, 4, 3, -0.2);
        assert!((encoder_band(Level::HighPass(1), &b).get(0, 0, 0) - 0.4).abs() < 1e-15);
        assert_eq!(encoder_band(Level::LowPass(1), &b), b);
    }

    #[test]
    fn zero_epochs_returns_initial_weights() {
        let corpus = toy_corpus(2, 48, 1);
        let c = cfg(0);
        let (w, log) = train_subband(&corpus, Level::Image, &c).unwrap();
        let init = encoder_init(
            &c.arch,
            Level::Image,
            &mut SeededRng::new(child_seed(level_seed(c.seed, Level::Image), 0)),
        )
        .unwrap();
        assert_eq!(w.params(), init.params());
        assert!(log.batches.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = toy_corpus(4, 48, 2);
        let c = cfg(2);
        let (a, la) = train_subband(&corpus, Level::HighPass(1), &c).unwrap();
        let (b, lb) = train_subband(&corpus, Level::HighPass(1), &c).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(la, lb);
    }

    #[test]
    fn too_small_band_is_rejected() {
        let corpus = toy_corpus(2, 24, 3);
        let err = train_subband(&corpus, Level::LowPass(2), &cfg(1)).unwrap_err();
        assert!(matches!(err, Error::TooSmall(_)));
    }

    #[test]
    fn negatives_share_the_anchor_scene() {
        let corpus = toy_corpus(4, 48, 4);
        let (_, log) = train_subband(&corpus, Level::Image, &cfg(1)).unwrap();
        assert!(log.batches.iter().all(|b| b.cross_scene_negatives == 0 && b.same_scene_negatives > 0));
        let cross = TrainConfig {
            negatives: "cross_scene".into(),
            ..cfg(1)
        };
        let (_, log) = train_subband(&corpus, Level::Image, &cross).unwrap();
        assert!(log.batches.iter().all(|b| b.same_scene_negatives == 0 && b.cross_scene_negatives > 0));
    }

    #[test]
    fn loss_decreases_on_toy_corpus() {
        let corpus = toy_corpus(8, 64, 5);
        let (_, log) = train_subband(&corpus, Level::Image, &cfg(12)).unwrap();
        let means = log.epoch_means();
        assert!(means.last().unwrap() < &means[0], "{means:?}");
        assert!(log.to_csv().starts_with("epoch,batch,loss"));
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let arch = EncoderArch {
            in_channels: 3,
            widths: vec![3, 4],
            input_side: 8,
        };
        let mut w = encoder_init(&arch, Level::Image, &mut SeededRng::new(11)).unwrap();
        let mut r = SeededRng::new(12);
        for b in 0..2 {
            let (_, br) = w.block_ranges(b);
            for p in &mut w.params_mut()[br] {
                *p = r.uniform_range(0.05, 0.2) as f32;
            }
        }
        let mut views = Vec::new();
        for s in 0..2 {
            let versions: Vec<Image> = (0..2)
                .map(|_| Image::from_fn(16, 8, 3, |_, _, _| r.uniform()))
                .collect();
            let v = make_views(&versions, 4, &mut SeededRng::new(s)).unwrap();
            assert_eq!(v.rect1.side, 8);
            views.push(v);
        }
        let (_, grad, _) = batch_loss_and_grad(&views, &w, 0.1, &SameScene, &mut SeededRng::new(0)).unwrap();
        let mut bad = 0;
        let mut checked = 0;
        for i in 0..w.params().len() {
            let orig = w.params()[i];
            let mut wp = w.clone();
            wp.params_mut()[i] = orig + 1e-5;
            let mut wm = w.clone();
            wm.params_mut()[i] = orig - 1e-5;
            let step = wp.params()[i] as f64 - wm.params()[i] as f64;
            let fd = (batch_loss(&views, &wp, 0.1).unwrap() - batch_loss(&views, &wm, 0.1).unwrap()) / step;
            if grad[i].abs() < 1e-6 && fd.abs() < 1e-6 {
                continue;
            }
            checked += 1;
            if (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()) >= 1e-3 {
                bad += 1;
            }
        }
        assert!(checked > 0);
        assert!(bad * 100 <= checked, "{bad} of {checked} disagree");
    }
}
