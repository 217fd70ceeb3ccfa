//! Run-level plumbing shared by the command line and the end-to-end tests:
//! one flat configuration, corpus generation, per-level training, scoring
//! and the result tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_corpus_from_sources, distortion_ladder_seeded, synthetic_bases, BaseSource, CorpusManifest,
};
use crate::encoder::{EncoderArch, EncoderWeights};
use crate::error::{Error, Result};
use crate::eval::{srcc, EvalConfig, MosEntry, MosTable, SplitSummary, EVAL_HEADER};
use crate::image::{Image, SceneSet};
use crate::io::load_image;
use crate::pristine::{PristineConfig, PristineModel};
use crate::pyramid::Level;
use crate::rng::child_seed;
use crate::scorer::{score_image, EncoderSet, FeatureContext, FeatureProvider, FeatureRegistry};
use crate::trainer::{train_subband, AdamConfig, BatchShape, LevelSchedule, TrainConfig, TrainLog};

pub const SCORES_HEADER: &str = "path,Q,patch_count";
pub const SCORES_VERSION_LINE: &str = "# msqale scores v1";
pub const EVAL_VERSION_LINE: &str = "# msqale eval v1";
pub const MOS_VERSION_LINE: &str = "# msqale mos v1";

/// Every tunable of a run, as flat typed keys. See `docs/config.md`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tag: String,
    pub seed: u64,
    pub jobs: usize,

    pub base_dir: Option<PathBuf>,
    pub train_scenes: usize,
    pub heldout_scenes: usize,
    pub versions: usize,
    pub width: usize,
    pub height: usize,

    pub levels: usize,
    pub tau: f64,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_image: String,
    pub batch_highpass: String,
    pub batch_lowpass: String,
    pub widths: Vec<usize>,
    pub input_side: usize,
    pub negatives: String,

    pub features: String,
    pub patch: usize,
    pub tau_s: f64,
    pub tau_c: f64,
    pub pca_dim: usize,
    pub global_sharpness: bool,

    pub splits: usize,
    pub train_frac: f64,
    pub logistic: String,
    pub split_half_trials: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let arch = EncoderArch::default();
        let adam = AdamConfig::default();
        let t = TrainConfig::default();
        let e = EvalConfig::default();
        Self {
            tag: "run".into(),
            seed: 0,
            jobs: 0,
            base_dir: None,
            train_scenes: 4,
            heldout_scenes: 10,
            versions: 4,
            width: 128,
            height: 128,
            levels: 1,
            tau: t.tau,
            epochs: 15,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            batch_image: "2x4".into(),
            batch_highpass: "2x4,4x4,8x4".into(),
            batch_lowpass: "8x4".into(),
            widths: arch.widths,
            input_side: arch.input_side,
            negatives: t.negatives,
            features: "msqale".into(),
            patch: 64,
            tau_s: 0.3,
            tau_c: 0.8,
            pca_dim: 2048,
            global_sharpness: false,
            splits: e.splits,
            train_frac: e.train_frac,
            logistic: e.logistic,
            split_half_trials: 100,
        }
    }
}

/// Parses `NxK`.
pub fn parse_batch(s: &str) -> Result<BatchShape> {
    let bad = || Error::Parse(format!("batch shape '{s}' is not of the form NxK"));
    let (n, k) = s.trim().split_once('x').ok_or_else(bad)?;
    Ok(BatchShape::new(
        n.trim().parse().map_err(|_| bad())?,
        k.trim().parse().map_err(|_| bad())?,
    ))
}

impl RunConfig {
    pub fn arch(&self) -> EncoderArch {
        EncoderArch {
            in_channels: 3,
            widths: self.widths.clone(),
            input_side: self.input_side,
        }
    }

    pub fn schedule(&self) -> Result<LevelSchedule> {
        Ok(LevelSchedule {
            image: parse_batch(&self.batch_image)?,
            highpass: self
                .batch_highpass
                .split(',')
                .map(parse_batch)
                .collect::<Result<_>>()?,
            lowpass: parse_batch(&self.batch_lowpass)?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            tau: self.tau,
            epochs: self.epochs,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            schedule: self.schedule()?,
            seed: child_seed(self.seed, 1),
            negatives: self.negatives.clone(),
            arch: self.arch(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pristine_config(&self) -> PristineConfig {
        PristineConfig {
            patch: self.patch,
            tau_s: self.tau_s,
            tau_c: self.tau_c,
            dim: self.pca_dim,
            global_sharpness: self.global_sharpness,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            splits: self.splits,
            train_frac: self.train_frac,
            seed: child_seed(self.seed, 3),
            logistic: self.logistic.clone(),
        }
    }

    pub fn corpus_seed(&self) -> u64 {
        child_seed(self.seed, 0)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config()?;
        self.pristine_config().validate()?;
        FeatureRegistry::builtin()
            .names()
            .contains(&self.features.as_str())
            .then_some(())
            .ok_or_else(|| Error::UnknownName {
                registry: "feature provider",
                name: self.features.clone(),
            })?;
        crate::eval::LogisticRegistry::builtin().get(&self.logistic)?;
        if self.train_scenes == 0 || self.versions < 2 {
            return Err(Error::InvalidParameter(format!(
                "need train_scenes >= 1 and versions >= 2, got {} and {}",
                self.train_scenes, self.versions
            )));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::InvalidParameter(format!("train_frac {} outside (0, 1)", self.train_frac)));
        }
        Ok(())
    }
}

/// One generated scene set with the well-lit bases it came from.
pub struct Corpus {
    pub set: SceneSet,
    pub manifest: CorpusManifest,
    pub bases: Vec<Image>,
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "ppm")
            )
        })
        .collect();
    files.sort();
    Ok(files)
}

fn build(bases: Vec<(BaseSource, Image)>, k: usize, seed: u64, prefix: &str) -> Result<Corpus> {
    let (sources, images): (Vec<_>, Vec<_>) = bases.into_iter().unzip();
    let (mut set, mut manifest) = build_corpus_from_sources(&images, &sources, k, seed)?;
    for (i, (s, r)) in set.scenes.iter_mut().zip(&mut manifest.scenes).enumerate() {
        s.id = format!("{prefix}_{i:03}");
        r.id = s.id.clone();
    }
    Ok(Corpus {
        set,
        manifest,
        bases: images,
    })
}

/// Training and held-out corpora. Bases come from `base_dir` (sorted by
/// file name, training scenes first) or are procedurally generated.
pub fn generate_corpora(cfg: &RunConfig) -> Result<(Corpus, Corpus)> {
    let total = cfg.train_scenes + cfg.heldout_scenes;
    let mut bases = match &cfg.base_dir {
        Some(dir) => {
            let files = image_files(dir)?;
            if files.len() < total {
                return Err(Error::InvalidParameter(format!(
                    "{} holds {} images; {total} needed",
                    dir.display(),
                    files.len()
                )));
            }
            files
                .into_iter()
                .take(total)
                .map(|p| Ok((BaseSource::File { path: p.clone() }, load_image(&p)?)))
                .collect::<Result<Vec<_>>>()?
        }
        None => synthetic_bases(total, cfg.width, cfg.height, cfg.corpus_seed()),
    };
    let heldout = bases.split_off(cfg.train_scenes);
    let seed = cfg.corpus_seed();
    let train = build(bases, cfg.versions, child_seed(seed, 1), "scene")?;
    let held = build(heldout, cfg.versions, child_seed(seed, 2), "heldout")?;
    Ok((train, held))
}

/// MOS stand-in from each version's distortion chain; image ids are
/// `<root>/<scene>/<version>.png`.
pub fn proxy_mos(manifest: &CorpusManifest, root: &str) -> Result<MosTable> {
    let entries = manifest
        .scenes
        .iter()
        .flat_map(|s| {
            s.versions.iter().map(move |v| MosEntry {
                image_id: format!("{root}/{}/{}.png", s.id, v.index),
                scene_id: s.id.clone(),
                mos: v.quality_proxy(),
                count: 1,
            })
        })
        .collect();
    MosTable::new(entries)
}

/// Trains every level of an `M`-level decomposition; levels run in
/// parallel and come back in [`Level::all`] order.
pub fn train_levels(set: &SceneSet, m: usize, cfg: &TrainConfig) -> Result<Vec<(EncoderWeights, TrainLog)>> {
    Level::all(m)
        .into_par_iter()
        .map(|l| train_subband(set, l, cfg))
        .collect()
}

pub fn feature_provider(name: &str, encoders: Option<Vec<EncoderWeights>>) -> Result<Box<dyn FeatureProvider>> {
    let ctx = FeatureContext {
        encoders: encoders.map(EncoderSet::new).transpose()?,
    };
    FeatureRegistry::builtin().create(name, &ctx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub path: String,
    pub q: f64,
    pub patches: usize,
}

pub fn score_all(
    images: &[(String, Image)],
    model: &PristineModel,
    provider: &dyn FeatureProvider,
) -> Result<Vec<ScoreRow>> {
    images
        .iter()
        .map(|(path, img)| {
            let s = score_image(img, model, provider)?;
            Ok(ScoreRow {
                path: path.clone(),
                q: s.q,
                patches: s.patches,
            })
        })
        .collect()
}

pub fn scores_to_csv(rows: &[ScoreRow]) -> String {
    let mut s = format!("{SCORES_VERSION_LINE}\n{SCORES_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.9},{}", r.path, r.q, r.patches);
    }
    s
}

#[derive(Deserialize)]
struct RawScore {
    path: String,
    #[serde(rename = "Q")]
    q: f64,
    patch_count: usize,
}

pub fn scores_from_csv(reader: impl Read) -> Result<Vec<ScoreRow>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    rdr.deserialize::<RawScore>()
        .map(|r| {
            let r = r.map_err(|e| Error::Parse(e.to_string()))?;
            Ok(ScoreRow {
                path: r.path,
                q: r.q,
                patches: r.patch_count,
            })
        })
        .collect()
}

/// Scores keyed by path, negated so that higher means better.
pub fn oriented_scores(rows: &[ScoreRow]) -> BTreeMap<String, f64> {
    rows.iter().map(|r| (r.path.clone(), -r.q)).collect()
}

pub fn eval_to_csv(summary: &SplitSummary, metric: &str) -> String {
    format!("{EVAL_VERSION_LINE}\n{EVAL_HEADER}\n{}\n", summary.csv_row(metric))
}

/// Spearman correlation between `Q` and severity along one ladder per
/// image.
pub fn ladder_srcc(
    images: &[Image],
    kind: &str,
    levels: usize,
    model: &PristineModel,
    provider: &dyn FeatureProvider,
) -> Result<Vec<f64>> {
    let severity: Vec<f64> = (0..levels).map(|i| i as f64).collect();
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let q = distortion_ladder_seeded(img, kind, levels, i as u64)?
                .iter()
                .map(|x| score_image(x, model, provider).map(|s| s.q))
                .collect::<Result<Vec<f64>>>()?;
            srcc(&q, &severity)
        })
        .collect()
}
