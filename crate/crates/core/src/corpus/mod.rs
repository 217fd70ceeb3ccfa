//! Deterministic multi-distortion scene sets.
//!
//! Each scene gets `K` versions of one well-lit base image: version 0 is a
//! strongly darkened copy, version 1 is the base itself, and the rest are
//! chains of one to three distinct distortions with random severities.
//! Everything random flows from the corpus seed through
//! [`child_seed`](crate::rng::child_seed), and the resulting
//! [`CorpusManifest`] is enough to regenerate the set bit for bit.

mod distortion;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Scene, SceneSet};
use crate::io::{load_image, save_image};
use crate::rng::{child_seed, SeededRng};

pub use distortion::{
    apply_distortion, channel_imbalance, gaussian_blur, mean_chroma, Distortion, DistortionRegistry,
    DistortionSpec,
};
pub use synth::synthetic_scene;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BaseSource {
    /// Position in the caller-supplied base list.
    InMemory { index: usize },
    Synthetic { seed: u64, width: usize, height: usize },
    File { path: PathBuf },
}

impl BaseSource {
    pub fn load(&self) -> Result<Image> {
        match self {
            BaseSource::InMemory { index } => Err(Error::InvalidParameter(format!(
                "in-memory base {index} cannot be reloaded"
            ))),
            BaseSource::Synthetic { seed, width, height } => {
                Ok(synthetic_scene(*width, *height, &mut SeededRng::new(*seed)))
            }
            BaseSource::File { path } => load_image(path),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VersionRole {
    Darkened,
    WellLit,
    Distorted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionRecord {
    pub index: usize,
    pub role: VersionRole,
    pub seed: u64,
    pub chain: Vec<DistortionSpec>,
}

impl VersionRecord {
    /// Heuristic 0-100 quality proxy: `100 * prod(1 - 0.5 s)` over the
    /// chain, with severity-free kinds counted as 0.6. Not a perceptual
    /// score; it exists so the evaluation path has something to rank.
    pub fn quality_proxy(&self) -> f64 {
        let reg = DistortionRegistry::builtin();
        100.0
            * self
                .chain
                .iter()
                .map(|s| {
                    let sev = match reg.get(&s.kind) {
                        Ok(k) if !k.parametric() => 0.6,
                        _ => s.severity,
                    };
                    1.0 - 0.5 * sev
                })
                .product::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: String,
    pub base: BaseSource,
    pub width: usize,
    pub height: usize,
    pub versions: Vec<VersionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub seed: u64,
    pub versions_per_scene: usize,
    pub scenes: Vec<SceneRecord>,
}

impl CorpusManifest {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: CorpusManifest = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        if m.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: m.format_version,
                supported: MANIFEST_FORMAT_VERSION,
            });
        }
        Ok(m)
    }

    /// Rebuilds the scene set, loading bases from their recorded sources.
    pub fn regenerate(&self) -> Result<SceneSet> {
        let bases = self
            .scenes
            .iter()
            .map(|s| s.base.load())
            .collect::<Result<Vec<_>>>()?;
        self.regenerate_with(&bases)
    }

    /// Rebuilds the scene set from explicitly supplied bases, one per scene.
    pub fn regenerate_with(&self, bases: &[Image]) -> Result<SceneSet> {
        if bases.len() != self.scenes.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} bases for {} scenes",
                bases.len(),
                self.scenes.len()
            )));
        }
        let scenes = self
            .scenes
            .iter()
            .zip(bases)
            .map(|(rec, base)| {
                let versions = rec
                    .versions
                    .iter()
                    .map(|v| apply_chain(base, &v.chain, v.seed))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Scene {
                    id: rec.id.clone(),
                    versions,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        SceneSet::new(scenes)
    }
}

pub fn apply_chain(img: &Image, chain: &[DistortionSpec], seed: u64) -> Result<Image> {
    let mut rng = SeededRng::new(seed);
    let mut out = img.clone();
    for spec in chain {
        out = apply_distortion(&out, spec, &mut rng)?;
    }
    Ok(out)
}

fn random_chain(rng: &mut SeededRng) -> Vec<DistortionSpec> {
    let names = DistortionRegistry::builtin().names();
    let len = 1 + rng.below(3);
    rng.choose_distinct(names.len(), len)
        .into_iter()
        .map(|i| {
            let mut spec = DistortionSpec::new(names[i], rng.uniform_range(0.25, 1.0));
            if names[i] == "color_cast" {
                spec.channel = Some(rng.below(3));
            }
            spec
        })
        .collect()
}

/// Plans the versions of one scene.
fn plan_scene(k: usize, scene_seed: u64) -> Vec<VersionRecord> {
    let mut rng = SeededRng::new(scene_seed);
    (0..k)
        .map(|index| {
            let seed = child_seed(scene_seed, index as u64);
            let (role, chain) = match index {
                0 => (
                    VersionRole::Darkened,
                    vec![DistortionSpec::new("gamma_under", rng.uniform_range(0.8, 1.0))],
                ),
                1 => (VersionRole::WellLit, Vec::new()),
                _ => (VersionRole::Distorted, random_chain(&mut rng)),
            };
            VersionRecord {
                index,
                role,
                seed,
                chain,
            }
        })
        .collect()
}

pub fn build_training_corpus(bases: &[Image], k: usize, seed: u64) -> Result<(SceneSet, CorpusManifest)> {
    let sources = (0..bases.len())
        .map(|index| BaseSource::InMemory { index })
        .collect::<Vec<_>>();
    build_corpus_from_sources(bases, &sources, k, seed)
}

/// Like [`build_training_corpus`], recording where each base came from.
pub fn build_corpus_from_sources(
    bases: &[Image],
    sources: &[BaseSource],
    k: usize,
    seed: u64,
) -> Result<(SceneSet, CorpusManifest)> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 versions per scene, got {k}"
        )));
    }
    if bases.is_empty() {
        return Err(Error::InvalidParameter("no base images".into()));
    }
    if sources.len() != bases.len() {
        return Err(Error::DimensionMismatch("one source per base required".into()));
    }
    let scenes = bases
        .iter()
        .zip(sources)
        .enumerate()
        .map(|(i, (base, src))| SceneRecord {
            id: format!("scene_{i:03}"),
            base: src.clone(),
            width: base.width(),
            height: base.height(),
            versions: plan_scene(k, child_seed(seed, i as u64)),
        })
        .collect();
    let manifest = CorpusManifest {
        format_version: MANIFEST_FORMAT_VERSION,
        seed,
        versions_per_scene: k,
        scenes,
    };
    let set = manifest.regenerate_with(bases)?;
    Ok((set, manifest))
}

/// `count` procedural bases of the given size.
pub fn synthetic_bases(count: usize, width: usize, height: usize, seed: u64) -> Vec<(BaseSource, Image)> {
    (0..count)
        .map(|i| {
            let s = child_seed(seed, 0x5ce9e ^ i as u64);
            let src = BaseSource::Synthetic {
                seed: s,
                width,
                height,
            };
            let img = synthetic_scene(width, height, &mut SeededRng::new(s));
            (src, img)
        })
        .collect()
}

/// Images at severities `0, 1/(n-1), ..., 1` of one parametric kind. Every
/// level draws noise from the same seed.
pub fn distortion_ladder(img: &Image, kind: &str, levels: usize) -> Result<Vec<Image>> {
    distortion_ladder_seeded(img, kind, levels, 0)
}

pub fn distortion_ladder_seeded(img: &Image, kind: &str, levels: usize, seed: u64) -> Result<Vec<Image>> {
    let kernel = DistortionRegistry::builtin().get(kind)?;
    if !kernel.parametric() {
        return Err(Error::InvalidParameter(format!(
            "{kind} has no severity scale"
        )));
    }
    if levels < 2 {
        return Err(Error::InvalidParameter(format!("ladder needs >= 2 levels, got {levels}")));
    }
    (0..levels)
        .map(|i| {
            let s = i as f64 / (levels - 1) as f64;
            kernel.apply(img, &DistortionSpec::new(kind, s), &mut SeededRng::new(seed))
        })
        .collect()
}

/// Writes `<dir>/<scene_id>/<version>.png`, `<dir>/bases/<scene_id>.png`
/// and `<dir>/manifest.json`.
pub fn write_corpus(dir: &Path, set: &SceneSet, manifest: &CorpusManifest, bases: &[Image]) -> Result<()> {
    fs::create_dir_all(dir.join("bases")).map_err(|e| Error::io(dir, e))?;
    for (scene, base) in set.scenes.iter().zip(bases) {
        let sdir = dir.join(&scene.id);
        fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        for (i, v) in scene.versions.iter().enumerate() {
            save_image(v, sdir.join(format!("{i}.png")))?;
        }
        save_image(base, dir.join("bases").join(format!("{}.png", scene.id)))?;
    }
    let path = dir.join("manifest.json");
    fs::write(&path, manifest.to_json()?).map_err(|e| Error::io(&path, e))
}

/// Loads the PNG images a corpus directory holds.
pub fn read_corpus(dir: &Path) -> Result<(SceneSet, CorpusManifest)> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = CorpusManifest::from_json(&text)?;
    let scenes = manifest
        .scenes
        .iter()
        .map(|rec| {
            let versions = rec
                .versions
                .iter()
                .map(|v| load_image(dir.join(&rec.id).join(format!("{}.png", v.index))))
                .collect::<Result<Vec<_>>>()?;
            Ok(Scene {
                id: rec.id.clone(),
                versions,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((SceneSet::new(scenes)?, manifest))
}
