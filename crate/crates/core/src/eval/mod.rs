//! Subjective-score processing and the correlation protocol used to judge
//! objective scores against MOS.

mod logistic;
mod stats;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Read;

use serde::{Deserialize, Serialize};

pub use logistic::{plcc_logistic, Logistic4, Logistic5, LogisticMap, LogisticRegistry, PlccFit};
pub use stats::{average_ranks, mean, median, pearson, sample_std, srcc};

use crate::error::{Error, Result};
use crate::rng::{child_seed, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub subject_id: String,
    pub session_id: String,
    pub image_id: String,
    pub scene_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RatingTable {
    pub rows: Vec<Rating>,
}

pub const RATINGS_HEADER: &str = "subject_id,session_id,image_id,scene_id,score";

impl RatingTable {
    /// Raw ratings; checks the `[0, 100]` range and key uniqueness.
    pub fn new(rows: Vec<Rating>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &rows {
            if !(0.0..=100.0).contains(&r.score) {
                return Err(Error::InvalidParameter(format!(
                    "score {} of {}/{} outside [0, 100]",
                    r.score, r.subject_id, r.image_id
                )));
            }
            if !seen.insert((&r.subject_id, &r.session_id, &r.image_id)) {
                return Err(Error::InvalidParameter(format!(
                    "duplicate rating by {} in session {} for {}",
                    r.subject_id, r.session_id, r.image_id
                )));
            }
        }
        Ok(Self { rows })
    }

    /// Reads `subject_id,session_id,image_id,scene_id,score`; `#` lines
    /// are comments.
    pub fn from_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let rows = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<Rating>, _>>()
            .map_err(|e| Error::Parse(format!("ratings: {e}")))?;
        Self::new(rows)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{RATINGS_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.subject_id, r.session_id, r.image_id, r.scene_id, r.score);
        }
        s
    }

    pub fn subjects(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.subject_id.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }
}

/// A `(subject, session)` group left out of z-scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct DroppedGroup {
    pub subject_id: String,
    pub session_id: String,
    pub reason: String,
}

/// Z-scores each `(subject, session)` group with its sample mean and
/// standard deviation. Groups with fewer than two ratings or no spread
/// are dropped and reported.
pub fn zscore_per_session(table: &RatingTable) -> (RatingTable, Vec<DroppedGroup>) {
    let mut groups: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (i, r) in table.rows.iter().enumerate() {
        groups.entry((&r.subject_id, &r.session_id)).or_default().push(i);
    }
    let mut rows = Vec::with_capacity(table.rows.len());
    let mut dropped = Vec::new();
    for ((subject, session), idx) in groups {
        let v: Vec<f64> = idx.iter().map(|&i| table.rows[i].score).collect();
        let sd = sample_std(&v);
        if v.len() < 2 || sd == 0.0 {
            dropped.push(DroppedGroup {
                subject_id: subject.to_string(),
                session_id: session.to_string(),
                reason: if v.len() < 2 { "single rating".into() } else { "zero variance".into() },
            });
            continue;
        }
        let m = mean(&v);
        for &i in &idx {
            let mut r = table.rows[i].clone();
            r.score = (r.score - m) / sd;
            rows.push(r);
        }
    }
    (RatingTable { rows }, dropped)
}

/// Kurtosis `m4 / m2^2` with population moments.
fn kurtosis(v: &[f64]) -> f64 {
    let m = mean(v);
    let m2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    let m4 = v.iter().map(|x| (x - m).powi(4)).sum::<f64>() / v.len() as f64;
    if m2 == 0.0 {
        3.0
    } else {
        m4 / (m2 * m2)
    }
}

/// Subject screening for continuous single-stimulus scores. Per image,
/// ratings beyond `mean +- 2 sd` (kurtosis in `[2, 4]`) or
/// `mean +- sqrt(20) sd` (otherwise) count as high or low excursions for
/// their subject. A subject with excursion rate above 0.05 whose highs and
/// lows are balanced within 0.3 is rejected.
pub fn bt500_outlier_reject(table: &RatingTable) -> Result<(RatingTable, Vec<String>)> {
    let subjects = table.subjects();
    if subjects.len() < 3 {
        return Err(Error::InvalidParameter(format!(
            "outlier screening needs at least 3 subjects, got {}",
            subjects.len()
        )));
    }
    let mut by_image: BTreeMap<&str, Vec<&Rating>> = BTreeMap::new();
    for r in &table.rows {
        by_image.entry(&r.image_id).or_default().push(r);
    }
    let mut counts: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for rs in by_image.values() {
        let v: Vec<f64> = rs.iter().map(|r| r.score).collect();
        let (m, sd) = (mean(&v), sample_std(&v));
        let k = if (2.0..=4.0).contains(&kurtosis(&v)) { 2.0 } else { 20f64.sqrt() };
        for r in rs {
            let c = counts.entry(&r.subject_id).or_default();
            c.2 += 1;
            if v.len() < 2 {
                continue;
            }
            if r.score > m + k * sd {
                c.0 += 1;
            } else if r.score < m - k * sd {
                c.1 += 1;
            }
        }
    }
    let rejected: Vec<String> = counts
        .iter()
        .filter(|(_, &(p, q, n))| {
            let pq = (p + q) as f64;
            pq > 0.0 && pq / n as f64 > 0.05 && ((p as f64 - q as f64) / pq).abs() < 0.3
        })
        .map(|(s, _)| s.to_string())
        .collect();
    let keep = table
        .rows
        .iter()
        .filter(|r| !rejected.contains(&r.subject_id))
        .cloned()
        .collect();
    Ok((RatingTable { rows: keep }, rejected))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosEntry {
    pub image_id: String,
    pub scene_id: String,
    pub mos: f64,
    pub count: usize,
}

/// Per-image MOS, sorted by image id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MosTable {
    pub entries: Vec<MosEntry>,
}

pub const MOS_HEADER: &str = "image_id,scene_id,mos,count";

impl MosTable {
    pub fn new(mut entries: Vec<MosEntry>) -> Result<Self> {
        entries.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        if entries.windows(2).any(|w| w[0].image_id == w[1].image_id) {
            return Err(Error::InvalidParameter("duplicate image in MOS table".into()));
        }
        if entries.iter().any(|e| e.count == 0 || !e.mos.is_finite()) {
            return Err(Error::InvalidParameter("MOS entries need at least one finite rating".into()));
        }
        Ok(Self { entries })
    }

    pub fn get(&self, image_id: &str) -> Option<&MosEntry> {
        self.entries
            .binary_search_by(|e| e.image_id.as_str().cmp(image_id))
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn scenes(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.scene_id.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Reads `image_id,scene_id,mos[,count]`; `#` lines are comments.
    pub fn from_csv(reader: impl Read) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            image_id: String,
            scene_id: String,
            mos: f64,
            count: Option<usize>,
        }
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(reader);
        let rows = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<Row>, _>>()
            .map_err(|e| Error::Parse(format!("MOS table: {e}")))?;
        Self::new(
            rows.into_iter()
                .map(|r| MosEntry {
                    image_id: r.image_id,
                    scene_id: r.scene_id,
                    mos: r.mos,
                    count: r.count.unwrap_or(1),
                })
                .collect(),
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{MOS_HEADER}\n");
        for e in &self.entries {
            let _ = writeln!(s, "{},{},{:.6},{}", e.image_id, e.scene_id, e.mos, e.count);
        }
        s
    }
}

/// Per-image mean z-score mapped affinely so the lowest image is 0 and the
/// highest 100.
pub fn rescale_mos(table: &RatingTable) -> Result<MosTable> {
    let mut acc: BTreeMap<&str, (&str, f64, usize)> = BTreeMap::new();
    for r in &table.rows {
        let e = acc.entry(&r.image_id).or_insert((&r.scene_id, 0.0, 0));
        e.1 += r.score;
        e.2 += 1;
    }
    if acc.len() < 2 {
        return Err(Error::Degenerate(format!("{} image(s); rescaling needs two", acc.len())));
    }
    let means: Vec<(&str, &str, f64, usize)> = acc.iter().map(|(i, (s, t, n))| (*i, *s, t / *n as f64, *n)).collect();
    let lo = means.iter().map(|m| m.2).fold(f64::INFINITY, f64::min);
    let hi = means.iter().map(|m| m.2).fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Err(Error::Degenerate("every image has the same mean score".into()));
    }
    MosTable::new(
        means
            .into_iter()
            .map(|(i, s, m, n)| MosEntry {
                image_id: i.to_string(),
                scene_id: s.to_string(),
                mos: 100.0 * (m - lo) / (hi - lo),
                count: n,
            })
            .collect(),
    )
}

/// Z-score, screen and rescale in one go.
pub fn process_ratings(table: &RatingTable) -> Result<(MosTable, Vec<DroppedGroup>, Vec<String>)> {
    let (z, dropped) = zscore_per_session(table);
    let (kept, rejected) = bt500_outlier_reject(&z)?;
    Ok((rescale_mos(&kept)?, dropped, rejected))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub splits: usize,
    pub train_frac: f64,
    pub seed: u64,
    /// Name in the logistic registry.
    pub logistic: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            splits: 100,
            train_frac: 0.8,
            seed: 0,
            logistic: "logistic4".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitRecord {
    pub train_scenes: Vec<String>,
    pub test_scenes: Vec<String>,
    pub srcc: f64,
    pub plcc: f64,
    pub plcc_warning: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSummary {
    pub median_srcc: f64,
    pub std_srcc: f64,
    pub median_plcc: f64,
    pub std_plcc: f64,
    pub splits: Vec<SplitRecord>,
    /// Splits whose test side was too small or constant to correlate.
    pub skipped: usize,
}

pub const EVAL_HEADER: &str = "metric,median_srcc,std_srcc,median_plcc,std_plcc";

impl SplitSummary {
    pub fn csv_row(&self, metric: &str) -> String {
        format!(
            "{metric},{:.6},{:.6},{:.6},{:.6}",
            self.median_srcc, self.std_srcc, self.median_plcc, self.std_plcc
        )
    }
}

/// Repeated scene-disjoint splits. Scores are oriented so that higher
/// means better; only the held-out images are correlated with MOS.
pub fn scene_split_eval(scores: &BTreeMap<String, f64>, mos: &MosTable, cfg: &EvalConfig) -> Result<SplitSummary> {
    let map = LogisticRegistry::builtin().get(&cfg.logistic)?;
    if !(cfg.train_frac > 0.0 && cfg.train_frac < 1.0) || cfg.splits == 0 {
        return Err(Error::InvalidParameter(format!(
            "need 0 < train_frac < 1 and splits >= 1, got {} and {}",
            cfg.train_frac, cfg.splits
        )));
    }
    let rated: Vec<&MosEntry> = mos.entries.iter().filter(|e| scores.contains_key(&e.image_id)).collect();
    let scenes: Vec<String> = rated.iter().map(|e| e.scene_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    if scenes.len() < 5 {
        return Err(Error::InvalidParameter(format!(
            "scene-disjoint evaluation needs at least 5 scored scenes, got {}",
            scenes.len()
        )));
    }
    let n_train = ((cfg.train_frac * scenes.len() as f64).round() as usize).clamp(1, scenes.len() - 1);
    let mut records = Vec::new();
    let mut skipped = 0;
    for s in 0..cfg.splits {
        let mut rng = SeededRng::new(child_seed(cfg.seed, s as u64));
        let mut order = scenes.clone();
        rng.shuffle(&mut order);
        let mut train = order[..n_train].to_vec();
        let mut test = order[n_train..].to_vec();
        train.sort();
        test.sort();
        let (mut p, mut m) = (Vec::new(), Vec::new());
        for e in &rated {
            if test.binary_search(&e.scene_id).is_ok() {
                p.push(scores[&e.image_id]);
                m.push(e.mos);
            }
        }
        let corr = srcc(&p, &m).and_then(|r| Ok((r, plcc_logistic(&p, &m, map.as_ref())?)));
        match corr {
            Ok((r, fit)) => records.push(SplitRecord {
                train_scenes: train,
                test_scenes: test,
                srcc: r,
                plcc: fit.plcc,
                plcc_warning: fit.warning(),
            }),
            Err(Error::Degenerate(_)) | Err(Error::InvalidParameter(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if records.is_empty() {
        return Err(Error::Degenerate("no split had a usable test side".into()));
    }
    let sr: Vec<f64> = records.iter().map(|r| r.srcc).collect();
    let pl: Vec<f64> = records.iter().map(|r| r.plcc).collect();
    Ok(SplitSummary {
        median_srcc: median(&sr),
        std_srcc: sample_std(&sr),
        median_plcc: median(&pl),
        std_plcc: sample_std(&pl),
        splits: records,
        skipped,
    })
}

/// Median, over random halvings of the subject pool, of the Pearson
/// correlation between the two halves' per-image mean ratings.
pub fn split_half_consistency(table: &RatingTable, trials: usize, seed: u64) -> Result<f64> {
    let subjects = table.subjects();
    if subjects.len() < 4 {
        return Err(Error::InvalidParameter(format!(
            "split-half consistency needs at least 4 subjects, got {}",
            subjects.len()
        )));
    }
    if trials == 0 {
        return Err(Error::InvalidParameter("need at least one trial".into()));
    }
    let mut vals = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = SeededRng::new(child_seed(seed, t as u64));
        let mut order = subjects.clone();
        rng.shuffle(&mut order);
        let half: BTreeSet<&String> = order[..order.len() / 2].iter().collect();
        let mut sums: BTreeMap<&str, [(f64, usize); 2]> = BTreeMap::new();
        for r in &table.rows {
            let side = usize::from(!half.contains(&r.subject_id));
            let e = sums.entry(&r.image_id).or_default();
            e[side].0 += r.score;
            e[side].1 += 1;
        }
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for v in sums.values() {
            if v[0].1 > 0 && v[1].1 > 0 {
                a.push(v[0].0 / v[0].1 as f64);
                b.push(v[1].0 / v[1].1 as f64);
            }
        }
        vals.push(pearson(&a, &b)?);
    }
    Ok(median(&vals))
}

/// Synthetic rating populations for exercising the pipeline.
pub mod simulate {
    use super::{Rating, RatingTable};
    use crate::error::Result;
    use crate::rng::SeededRng;

    /// One image with its scene and true quality on the `[0, 100]` scale.
    #[derive(Debug, Clone)]
    pub struct Stimulus {
        pub image_id: String,
        pub scene_id: String,
        pub quality: f64,
    }

    /// How a simulated subject rates.
    #[derive(Debug, Clone, Copy)]
    pub enum Rater {
        /// True quality plus Gaussian noise with this standard deviation.
        Noisy(f64),
        /// Uniform on `[0, 100]` regardless of the image.
        Random,
    }

    /// One rating per subject and stimulus in session `"s1"`, clamped to
    /// `[0, 100]`.
    pub fn ratings(stimuli: &[Stimulus], raters: &[Rater], rng: &mut SeededRng) -> Result<RatingTable> {
        let mut rows = Vec::with_capacity(stimuli.len() * raters.len());
        for (i, rater) in raters.iter().enumerate() {
            for s in stimuli {
                let score = match *rater {
                    Rater::Noisy(sd) => s.quality + sd * rng.normal(),
                    Rater::Random => rng.uniform_range(0.0, 100.0),
                };
                rows.push(Rating {
                    subject_id: format!("subj{i:03}"),
                    session_id: "s1".into(),
                    image_id: s.image_id.clone(),
                    scene_id: s.scene_id.clone(),
                    score: score.clamp(0.0, 100.0),
                });
            }
        }
        RatingTable::new(rows)
    }

    /// `count` stimuli with qualities drawn from `N(mean, sd)`, split over
    /// `scenes` scenes in round-robin order.
    pub fn stimuli(count: usize, scenes: usize, mean: f64, sd: f64, rng: &mut SeededRng) -> Vec<Stimulus> {
        (0..count)
            .map(|i| Stimulus {
                image_id: format!("img{i:04}"),
                scene_id: format!("scene{:03}", i % scenes.max(1)),
                quality: mean + sd * rng.normal(),
            })
            .collect()
    }
}
