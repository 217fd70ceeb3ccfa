//! Scene-wise multi-view contrastive objective.
//!
//! For scene `n` with versions `1..K`, let `z1[k]` and `z2[k]` be the
//! embeddings of the two views of version `k`. With `z1[k]` as anchor the
//! positive is `z2[k]` and the negatives are opposite-view embeddings
//! chosen by a [`NegativeSampler`]; the same-scene sampler picks `z2[j]`,
//! `j != k`. Per anchor
//!
//! ```text
//! l = -log( exp(S(a, p) / tau) / sum_c exp(S(a, c) / tau) )
//! ```
//!
//! over the positive and the negatives, and the batch objective is
//! `(1 / NK) * sum_n sum_k [ l(z1[k]) + l(z2[k]) ]`.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use crate::encoder::Embedding;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

pub fn cosine_similarity(u: &Embedding, v: &Embedding) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::DimensionMismatch(format!("{} vs {}", u.dim(), v.dim())));
    }
    let (nu, nv) = (norm(&u.0), norm(&v.0));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(&u.0, &v.0) / (nu * nv)).clamp(-1.0, 1.0))
}

/// `S(u, v)` with its gradients with respect to `u` and `v`.
fn cosine_with_grad(u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let s = dot(u, v) / (nu * nv);
    let gu = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| b / (nu * nv) - s * a / (nu * nu))
        .collect();
    let gv = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| a / (nu * nv) - s * b / (nv * nv))
        .collect();
    Ok((s, gu, gv))
}

/// `-log softmax` of the first logit, computed with max subtraction.
/// Returns the loss and `d loss / d logit`.
fn softmax_nll_first(logits: &[f64]) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = (m + z.ln() - logits[0]).max(0.0);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
    grad[0] -= 1.0;
    (loss, grad)
}

pub fn anchor_loss(anchor: &Embedding, positive: &Embedding, negatives: &[Embedding], tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::InvalidParameter(format!("temperature {tau} must be positive")));
    }
    let mut logits = vec![cosine_similarity(anchor, positive)? / tau];
    for n in negatives {
        logits.push(cosine_similarity(anchor, n)? / tau);
    }
    Ok(softmax_nll_first(&logits).0)
}

/// Loss of one anchor with gradients for the anchor and every candidate
/// (positive first, then negatives in order).
pub fn anchor_loss_with_grad(
    anchor: &[f64],
    candidates: &[&[f64]],
    tau: f64,
) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
    let mut logits = Vec::with_capacity(candidates.len());
    let mut parts = Vec::with_capacity(candidates.len());
    for c in candidates {
        let (s, ga, gc) = cosine_with_grad(anchor, c)?;
        logits.push(s / tau);
        parts.push((ga, gc));
    }
    let (loss, dl) = softmax_nll_first(&logits);
    let mut g_anchor = vec![0.0; anchor.len()];
    let mut g_cands = Vec::with_capacity(candidates.len());
    for ((ga, gc), d) in parts.into_iter().zip(dl) {
        let w = d / tau;
        for (acc, g) in g_anchor.iter_mut().zip(&ga) {
            *acc += w * g;
        }
        g_cands.push(gc.into_iter().map(|g| w * g).collect());
    }
    Ok((loss, g_anchor, g_cands))
}

/// Chooses which opposite-view embeddings act as negatives for an anchor.
pub trait NegativeSampler: Send + Sync {
    fn name(&self) -> &'static str;

    /// Negatives for the anchor at `(scene, version)` as `(scene, version)`
    /// pairs; `versions[s]` is the version count of batch scene `s`.
    fn negatives(
        &self,
        versions: &[usize],
        scene: usize,
        version: usize,
        rng: &mut SeededRng,
    ) -> Result<Vec<(usize, usize)>>;
}

/// Every other version of the anchor's own scene.
pub struct SameScene;

impl NegativeSampler for SameScene {
    fn name(&self) -> &'static str {
        "same_scene"
    }

    fn negatives(&self, versions: &[usize], scene: usize, version: usize, _: &mut SeededRng) -> Result<Vec<(usize, usize)>> {
        Ok((0..versions[scene])
            .filter(|&j| j != version)
            .map(|j| (scene, j))
            .collect())
    }
}

/// `K - 1` entries drawn uniformly without replacement from the other
/// scenes of the batch. Used for the content-contrast ablation.
pub struct CrossScene;

impl NegativeSampler for CrossScene {
    fn name(&self) -> &'static str {
        "cross_scene"
    }

    fn negatives(&self, versions: &[usize], scene: usize, _: usize, rng: &mut SeededRng) -> Result<Vec<(usize, usize)>> {
        let pool: Vec<(usize, usize)> = versions
            .iter()
            .enumerate()
            .filter(|&(s, _)| s != scene)
            .flat_map(|(s, &k)| (0..k).map(move |j| (s, j)))
            .collect();
        if pool.is_empty() {
            return Err(Error::InvalidParameter(
                "cross-scene negatives need at least two scenes per batch".into(),
            ));
        }
        let want = versions[scene].saturating_sub(1);
        Ok(rng
            .choose_distinct(pool.len(), want)
            .into_iter()
            .map(|i| pool[i])
            .collect())
    }
}

#[derive(Clone)]
pub struct NegativeSamplerRegistry {
    samplers: BTreeMap<&'static str, Arc<dyn NegativeSampler>>,
}

impl NegativeSamplerRegistry {
    pub fn register(&mut self, s: Arc<dyn NegativeSampler>) {
        self.samplers.insert(s.name(), s);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn NegativeSampler>> {
        self.samplers.get(name).cloned().ok_or_else(|| Error::UnknownName {
            registry: "negative sampler",
            name: name.to_string(),
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.samplers.keys().copied().collect()
    }

    pub fn builtin() -> &'static NegativeSamplerRegistry {
        static REG: OnceLock<NegativeSamplerRegistry> = OnceLock::new();
        REG.get_or_init(|| {
            let mut r = NegativeSamplerRegistry {
                samplers: BTreeMap::new(),
            };
            r.register(Arc::new(SameScene));
            r.register(Arc::new(CrossScene));
            r
        })
    }
}

/// Embeddings of both views of every version of one scene.
#[derive(Debug, Clone)]
pub struct SceneEmbeddings {
    pub view1: Vec<Embedding>,
    pub view2: Vec<Embedding>,
}

/// Which embedding a gradient or negative refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub scene: usize,
    pub view: u8,
    pub version: usize,
}

/// Result of evaluating the batch objective.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub loss: f64,
    /// `d loss / d embedding` for every scene, view and version.
    pub grads: Vec<[Vec<Vec<f64>>; 2]>,
    /// `(anchor scene, negative scene)` for every negative used.
    pub negative_pairs: Vec<(usize, usize)>,
}

pub fn batch_objective(
    batch: &[SceneEmbeddings],
    tau: f64,
    sampler: &dyn NegativeSampler,
    rng: &mut SeededRng,
) -> Result<BatchObjective> {
    if tau <= 0.0 {
        return Err(Error::InvalidParameter(format!("temperature {tau} must be positive")));
    }
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let k = batch[0].view1.len();
    if batch.iter().any(|s| s.view1.len() != k || s.view2.len() != k) {
        return Err(Error::DimensionMismatch("inconsistent version count in batch".into()));
    }
    let versions: Vec<usize> = batch.iter().map(|s| s.view1.len()).collect();
    let mut grads: Vec<[Vec<Vec<f64>>; 2]> = batch
        .iter()
        .map(|s| {
            let zero = |v: &Vec<Embedding>| v.iter().map(|e| vec![0.0; e.dim()]).collect::<Vec<_>>();
            [zero(&s.view1), zero(&s.view2)]
        })
        .collect();
    let mut total = 0.0;
    let mut negative_pairs = Vec::new();
    let scale = 1.0 / (batch.len() * k) as f64;
    for (n, scene) in batch.iter().enumerate() {
        for kk in 0..k {
            for view in 0..2u8 {
                let (own, other) = if view == 0 {
                    (&scene.view1, 1usize)
                } else {
                    (&scene.view2, 0usize)
                };
                let opposite = |s: usize, v: usize| -> &Embedding {
                    if other == 1 {
                        &batch[s].view2[v]
                    } else {
                        &batch[s].view1[v]
                    }
                };
                let negs = sampler.negatives(&versions, n, kk, rng)?;
                let mut cands: Vec<&[f64]> = vec![&opposite(n, kk).0];
                for &(s, v) in &negs {
                    cands.push(&opposite(s, v).0);
                    negative_pairs.push((n, s));
                }
                let (l, ga, gc) = anchor_loss_with_grad(&own[kk].0, &cands, tau)?;
                total += l;
                for (acc, g) in grads[n][view as usize][kk].iter_mut().zip(&ga) {
                    *acc += scale * g;
                }
                let targets = std::iter::once((n, kk)).chain(negs.iter().copied());
                for ((s, v), g) in targets.zip(gc) {
                    for (acc, x) in grads[s][other][v].iter_mut().zip(&g) {
                        *acc += scale * x;
                    }
                }
            }
        }
    }
    Ok(BatchObjective {
        loss: total * scale,
        grads,
        negative_pairs,
    })
}
